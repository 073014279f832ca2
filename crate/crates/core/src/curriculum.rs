//! Three-stage schedule: clean samples only before epoch `m`, a growing
//! share of the noisy train-val samples from `m` to `n`, everything from `n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{partition, DatasetManifest, SampleRecord, Split, Subset};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ordering {
    #[default]
    FixedOrder,
    DifficultyAsc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub m: usize,
    pub n: usize,
    #[serde(default)]
    pub ordering: Ordering,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            m: 30,
            n: 90,
            ordering: Ordering::FixedOrder,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    /// All noisy samples from the first epoch.
    pub fn baseline(seed: u64) -> Self {
        Self {
            m: 0,
            n: 0,
            ordering: Ordering::FixedOrder,
            seed,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.m == 0 && self.n == 0
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        check(self.m, self.n).or_else(|e| if self.is_baseline() { Ok(()) } else { Err(e) })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CurriculumError {
    #[error("invalid curriculum: m = {m} must be less than n = {n}")]
    InvalidConfig { m: usize, n: usize },
    #[error("sample {0} has no difficulty score")]
    MissingDifficulty(String),
}

fn check(m: usize, n: usize) -> Result<(), CurriculumError> {
    if m < n {
        Ok(())
    } else {
        Err(CurriculumError::InvalidConfig { m, n })
    }
}

/// Number of noisy samples admitted at `epoch`, rounded down.
pub fn noisy_quota(epoch: usize, m: usize, n: usize, noisy_size: usize) -> Result<usize, CurriculumError> {
    check(m, n)?;
    Ok(if epoch < m {
        0
    } else if epoch < n {
        // Exact integer floor of (epoch - m) / (n - m) * size.
        ((epoch - m) as u128 * noisy_size as u128 / (n - m) as u128) as usize
    } else {
        noisy_size
    })
}

pub fn stage_of(epoch: usize, m: usize, n: usize) -> Result<u8, CurriculumError> {
    check(m, n)?;
    Ok(if epoch < m {
        1
    } else if epoch < n {
        2
    } else {
        3
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    pub stage: u8,
    pub clean_ids: Vec<String>,
    pub noisy_ids: Vec<String>,
    pub noisy_quota: usize,
}

/// Fisher-Yates shuffle driven by the curriculum seed.
fn shuffled<T>(mut items: Vec<T>, seed: u64) -> Vec<T> {
    let mut rng = seed::rng(seed, seed::stream::CURRICULUM_ORDER, 0);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    items
}

/// The run-wide admission order of the noisy train-val samples.
pub fn noisy_order(config: &CurriculumConfig, manifest: &DatasetManifest) -> Result<Vec<String>, CurriculumError> {
    let noisy = partition(manifest, Subset::Noisy, Split::Trainval);
    match config.ordering {
        Ordering::FixedOrder => Ok(shuffled(noisy.into_iter().map(|s| s.id).collect(), config.seed)),
        Ordering::DifficultyAsc => {
            let mut scored = noisy
                .into_iter()
                .map(|s| match s.difficulty {
                    Some(d) => Ok((d, s.id)),
                    None => Err(CurriculumError::MissingDifficulty(s.id)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            Ok(scored.into_iter().map(|(_, id)| id).collect())
        }
    }
}

/// Epoch plans for one run, sharing a single noisy ordering.
#[derive(Debug, Clone)]
pub struct Schedule {
    config: CurriculumConfig,
    clean_ids: Vec<String>,
    noisy_order: Vec<String>,
}

impl Schedule {
    pub fn new(config: CurriculumConfig, manifest: &DatasetManifest) -> Result<Self, CurriculumError> {
        config.validate()?;
        let clean_ids = partition(manifest, Subset::Clean, Split::Trainval)
            .into_iter()
            .map(|s: SampleRecord| s.id)
            .collect();
        Ok(Self {
            config,
            clean_ids,
            noisy_order: noisy_order(&config, manifest)?,
        })
    }

    pub fn config(&self) -> &CurriculumConfig {
        &self.config
    }

    pub fn noisy_order(&self) -> &[String] {
        &self.noisy_order
    }

    pub fn plan(&self, epoch: usize) -> EpochPlan {
        let size = self.noisy_order.len();
        let (stage, quota) = if self.config.is_baseline() {
            (3, size)
        } else {
            let (m, n) = (self.config.m, self.config.n);
            (
                stage_of(epoch, m, n).expect("validated"),
                noisy_quota(epoch, m, n, size).expect("validated"),
            )
        };
        EpochPlan {
            epoch,
            stage,
            clean_ids: self.clean_ids.clone(),
            noisy_ids: self.noisy_order[..quota].to_vec(),
            noisy_quota: quota,
        }
    }
}

pub fn build_epoch_plan(
    epoch: usize,
    config: &CurriculumConfig,
    manifest: &DatasetManifest,
) -> Result<EpochPlan, CurriculumError> {
    Ok(Schedule::new(*config, manifest)?.plan(epoch))
}
