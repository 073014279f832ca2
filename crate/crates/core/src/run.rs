//! On-disk layout of a training run and the helpers that fill it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{partition, DatasetManifest, Split, Subset};
use crate::jsonl;
use crate::models::{ModelError, ModelParams};
use crate::trainer::{self, best_epoch, AuditEntry, Checkpoint, EpochRecord, TrainError, TrainObserver};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

/// Written last; points at the selected checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPointer {
    pub epoch: usize,
    /// Checkpoint stem relative to the run directory.
    pub checkpoint: PathBuf,
    pub train_miou: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no selected checkpoint in {0} (train first)")]
    MissingCheckpoint(String),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_stem(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:04}"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn audit(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.json")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn judgments(&self) -> PathBuf {
        self.root.join("judgments.jsonl")
    }

    pub fn clean_metrics(&self) -> PathBuf {
        self.root.join("clean_metrics.json")
    }

    /// Creates the directory tree and truncates logs from an earlier run.
    pub fn prepare(&self) -> Result<(), RunError> {
        std::fs::create_dir_all(self.checkpoints()).map_err(io(&self.checkpoints()))?;
        for log in [self.train_log(), self.audit()] {
            std::fs::write(&log, "").map_err(io(&log))?;
        }
        let best = self.best();
        if best.exists() {
            std::fs::remove_file(&best).map_err(io(&best))?;
        }
        Ok(())
    }

    pub fn read_log(&self) -> Result<Vec<EpochRecord>, RunError> {
        Ok(jsonl::read(&self.train_log())?)
    }

    pub fn read_audit(&self) -> Result<Vec<AuditEntry>, RunError> {
        Ok(jsonl::read(&self.audit())?)
    }

    pub fn read_best(&self) -> Result<BestPointer, RunError> {
        let path = self.best();
        if !path.exists() {
            return Err(RunError::MissingCheckpoint(self.root.display().to_string()));
        }
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn load_best(&self) -> Result<ModelParams<f32>, RunError> {
        let best = self.read_best()?;
        let stem = self.root.join(&best.checkpoint);
        if !stem.with_extension("params").exists() {
            return Err(RunError::MissingCheckpoint(stem.display().to_string()));
        }
        Ok(ModelParams::load(&stem)?)
    }
}

/// Streams logs to disk and saves checkpoints as they arrive.
pub struct DiskObserver<'a> {
    run: &'a RunDir,
    pub epochs: Vec<usize>,
}

impl<'a> DiskObserver<'a> {
    pub fn new(run: &'a RunDir) -> Self {
        Self { run, epochs: Vec::new() }
    }
}

fn sink(e: impl std::fmt::Display) -> TrainError {
    TrainError::Sink(e.to_string())
}

impl TrainObserver for DiskObserver<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, audit: &[AuditEntry]) -> Result<(), TrainError> {
        jsonl::append(&self.run.train_log(), std::slice::from_ref(record)).map_err(sink)?;
        jsonl::append(&self.run.audit(), audit).map_err(sink)
    }

    fn on_checkpoint(&mut self, checkpoint: Checkpoint) -> Result<(), TrainError> {
        let stem = self.run.checkpoint_stem(checkpoint.epoch);
        checkpoint.model.save(&stem, Some(checkpoint.epoch)).map_err(sink)?;
        self.epochs.push(checkpoint.epoch);
        Ok(())
    }
}

/// Snapshots the config, trains, and records the selected checkpoint.
pub fn train_run(config: &RunConfig, manifest: &DatasetManifest, run: &RunDir) -> Result<BestPointer, RunError> {
    run.prepare()?;
    config
        .save(&run.config())
        .map_err(|e| RunError::Parse(e.to_string()))?;
    let mut observer = DiskObserver::new(run);
    let (log, _) = trainer::train_with(manifest, &config.curriculum, &config.train, &config.model, &mut observer)?;
    let epoch = best_epoch(observer.epochs.iter().copied(), &log).ok_or(TrainError::Empty)?;
    let stem = run.checkpoint_stem(epoch);
    let best = BestPointer {
        epoch,
        checkpoint: stem.strip_prefix(&run.root).unwrap_or(&stem).to_path_buf(),
        train_miou: log.iter().find(|r| r.epoch == epoch).and_then(|r| r.train_miou),
    };
    let path = run.best();
    let json = serde_json::to_string_pretty(&best).expect("serializable pointer") + "\n";
    std::fs::write(&path, json).map_err(io(&path))?;
    Ok(best)
}

/// Saves one `<id>.png` class mask per image of the partition.
pub fn write_predictions(
    model: &ModelParams<f32>,
    manifest: &DatasetManifest,
    subset: Subset,
    split: Split,
    dir: &Path,
) -> Result<usize, RunError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let records = partition(manifest, subset, split);
    for chunk in records.chunks(8) {
        let images = chunk
            .iter()
            .map(|r| manifest.load_image(r))
            .collect::<Result<Vec<_>, _>>()?;
        let masks = model.segment(&images.iter().collect::<Vec<_>>())?;
        for (rec, mask) in chunk.iter().zip(&masks) {
            mask.save_png(&dir.join(format!("{}.png", rec.id)))?;
        }
    }
    Ok(records.len())
}
