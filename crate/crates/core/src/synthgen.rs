//! Procedural cloud/snow scenes with known ground truth and controlled label
//! corruption.
//!
//! A scene is a textured land background, optionally a snow field (bright,
//! bluish, granular, hard-edged) and one to three cloud blobs. Thick clouds
//! have a near-opaque core and a sharp edge; thin clouds are blurred and
//! semi-transparent, and their true extent is wherever the composite opacity
//! reaches [`CLOUD_ALPHA`].

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Counts, DatasetManifest, SampleRecord, Split, Subset};
use crate::raster::{Mask, RasterError, RgbImage, BACKGROUND, CLOUD, IGNORE, SNOW};
use crate::seed;

/// Composite cloud opacity at which a pixel is labeled cloud.
pub const CLOUD_ALPHA: f32 = 0.35;

const THIN_PEAK: (f32, f32) = (0.4, 0.7);
/// Thin-cloud opacity below this is dropped entirely.
const THIN_CUTOFF: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMix {
    pub thick: f64,
    pub thin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleMix {
    pub clean: CloudMix,
    pub noisy: CloudMix,
}

impl StyleMix {
    pub fn get(&self, subset: Subset) -> CloudMix {
        match subset {
            Subset::Clean => self.clean,
            Subset::Noisy => self.noisy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionParams {
    pub boundary_shift_px: usize,
    pub swap_patch_rate: f64,
    pub omit_patch_rate: f64,
}

impl CorruptionParams {
    pub const NONE: CorruptionParams = CorruptionParams {
        boundary_shift_px: 0,
        swap_patch_rate: 0.0,
        omit_patch_rate: 0.0,
    };
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            boundary_shift_px: 2,
            swap_patch_rate: 0.2,
            omit_patch_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub counts: Counts,
    pub cloud_style_mix: StyleMix,
    pub snow_probability: f64,
    pub corruption: CorruptionParams,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            counts: Counts {
                clean_trainval: 120,
                clean_test: 40,
                noisy_trainval: 60,
                noisy_test: 20,
            },
            cloud_style_mix: StyleMix {
                clean: CloudMix { thick: 0.7, thin: 0.3 },
                noisy: CloudMix { thick: 0.3, thin: 0.7 },
            },
            snow_probability: 0.6,
            corruption: CorruptionParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn unit(name: &str, v: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SynthError::Config(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.image_size < 16 {
            return Err(SynthError::Config(format!(
                "image_size = {} must be at least 16",
                self.image_size
            )));
        }
        for (name, mix) in [("clean", self.cloud_style_mix.clean), ("noisy", self.cloud_style_mix.noisy)] {
            unit(&format!("cloud_style_mix.{name}.thick"), mix.thick)?;
            unit(&format!("cloud_style_mix.{name}.thin"), mix.thin)?;
            if (mix.thick + mix.thin - 1.0).abs() > 1e-9 {
                return Err(SynthError::Config(format!(
                    "cloud_style_mix.{name} fractions sum to {}, not 1",
                    mix.thick + mix.thin
                )));
            }
        }
        unit("snow_probability", self.snow_probability)?;
        unit("corruption.swap_patch_rate", self.corruption.swap_patch_rate)?;
        unit("corruption.omit_patch_rate", self.corruption.omit_patch_rate)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudStyle {
    Thick,
    Thin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub subset: Subset,
    pub clouds: Vec<CloudStyle>,
    pub snow: bool,
    /// Snow rendered at or above thick-cloud brightness.
    pub bright_snow: bool,
    pub cloud_fraction: f64,
    pub snow_fraction: f64,
    /// Share of true-cloud pixels contributed mainly by thin clouds.
    pub thin_share: f64,
    pub difficulty: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub true_mask: Mask,
    pub observed: Mask,
    /// True-cloud pixels whose opacity comes mainly from thin clouds.
    pub thin: Vec<bool>,
    pub meta: SceneMeta,
}

/// Smooth value noise in [0, 1] on a `cells x cells` lattice.
fn value_noise(rng: &mut impl Rng, size: usize, cells: usize) -> Vec<f32> {
    let g = cells + 1;
    let lattice: Vec<f32> = (0..g * g).map(|_| rng.random::<f32>()).collect();
    let fade = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f32 / size as f32 * cells as f32;
        let (y0, ty) = (fy.floor() as usize, fade(fy.fract()));
        for x in 0..size {
            let fx = x as f32 / size as f32 * cells as f32;
            let (x0, tx) = (fx.floor() as usize, fade(fx.fract()));
            let at = |xx: usize, yy: usize| lattice[yy * g + xx];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn box_blur(field: &[f32], size: usize, radius: usize) -> Vec<f32> {
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let (mut sum, mut n) = (0.0, 0.0);
                let c = if horizontal { x } else { y };
                for k in c.saturating_sub(radius)..=(c + radius).min(size - 1) {
                    sum += if horizontal { src[y * size + k] } else { src[k * size + x] };
                    n += 1.0;
                }
                dst[y * size + x] = sum / n;
            }
        }
        dst
    };
    pass(&pass(field, true), false)
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

const GROUND: [[f32; 3]; 4] = [
    [62.0, 92.0, 52.0],
    [122.0, 102.0, 72.0],
    [74.0, 72.0, 78.0],
    [38.0, 58.0, 84.0],
];

/// Opacity of one cloud blob over the whole image.
fn cloud_alpha(rng: &mut impl Rng, size: usize, style: CloudStyle) -> Vec<f32> {
    let s = size as f32;
    let (cx, cy) = (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
    let radius = rng.random_range(0.14..0.32) * s;
    let (sx, sy) = (rng.random_range(0.7..1.3), rng.random_range(0.7..1.3));
    let wobble = value_noise(rng, size, 4);
    let raw: Vec<f32> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32 + 0.5, (i / size) as f32 + 0.5);
            let d = (((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2)).sqrt() / radius;
            (1.0 - d + 0.6 * (wobble[i] - 0.5)).clamp(0.0, 1.0)
        })
        .collect();
    match style {
        CloudStyle::Thick => {
            let peak = rng.random_range(0.9..1.0);
            raw.iter().map(|&r| ((r - 0.1) * 8.0).clamp(0.0, 1.0) * peak).collect()
        }
        CloudStyle::Thin => {
            let peak = rng.random_range(THIN_PEAK.0..THIN_PEAK.1);
            let soft = box_blur(&raw, size, (size / 16).max(1));
            let max = soft.iter().cloned().fold(0.0f32, f32::max).max(1e-6);
            soft.iter()
                .map(|&v| {
                    let a = v / max * peak;
                    if a < THIN_CUTOFF {
                        0.0
                    } else {
                        a
                    }
                })
                .collect()
        }
    }
}

/// Renders one scene. The output depends only on the arguments.
pub fn generate_scene(config: &SynthConfig, subset: Subset, per_sample_seed: u64) -> Scene {
    let mut rng = seed::rng(per_sample_seed, seed::stream::SCENE, 0);
    let size = config.image_size;
    let n = size * size;

    let ground = GROUND[rng.random_range(0..GROUND.len())];
    let coarse = value_noise(&mut rng, size, 4);
    let fine = value_noise(&mut rng, size, 12);
    let mut rgb: Vec<[f32; 3]> = (0..n)
        .map(|i| {
            let m = 0.75 + 0.35 * coarse[i] + 0.2 * (fine[i] - 0.5);
            let jitter = rng.random_range(-5.0..5.0);
            ground.map(|c| c * m + jitter)
        })
        .collect();

    let snow = rng.random_bool(config.snow_probability);
    let bright_snow = snow && rng.random_bool(0.5);
    let mut snow_mask = vec![false; n];
    if snow {
        let field = value_noise(&mut rng, size, 3);
        let grain = value_noise(&mut rng, size, 16);
        let threshold = rng.random_range(0.5..0.65);
        let level = if bright_snow {
            rng.random_range(238.0..255.0)
        } else {
            rng.random_range(196.0..230.0)
        };
        for i in 0..n {
            if field[i] > threshold {
                snow_mask[i] = true;
                let v = level + 24.0 * (grain[i] - 0.5) + rng.random_range(-12.0..12.0);
                rgb[i] = [0.8 * v, 0.9 * v, v];
            }
        }
    }

    let mix = config.cloud_style_mix.get(subset);
    let blobs = rng.random_range(1..=3);
    let mut clouds = Vec::with_capacity(blobs);
    let mut transmit = vec![1.0f32; n];
    let mut thick_alpha = vec![0.0f32; n];
    let mut thin_alpha = vec![0.0f32; n];
    for _ in 0..blobs {
        let style = if rng.random_bool(mix.thick) {
            CloudStyle::Thick
        } else {
            CloudStyle::Thin
        };
        clouds.push(style);
        let alpha = cloud_alpha(&mut rng, size, style);
        let level = match style {
            CloudStyle::Thick => rng.random_range(212.0..242.0),
            CloudStyle::Thin => rng.random_range(200.0..232.0),
        };
        let shade = value_noise(&mut rng, size, 4);
        let track = match style {
            CloudStyle::Thick => &mut thick_alpha,
            CloudStyle::Thin => &mut thin_alpha,
        };
        for i in 0..n {
            let a = alpha[i];
            if a <= 0.0 {
                continue;
            }
            let c = level + 16.0 * (shade[i] - 0.5);
            for ch in rgb[i].iter_mut() {
                *ch = *ch * (1.0 - a) + c * a;
            }
            transmit[i] *= 1.0 - a;
            track[i] = track[i].max(a);
        }
    }

    let mut image = RgbImage::new(size, size);
    image.data = rgb.iter().flat_map(|p| p.map(clamp_u8)).collect();

    let mut truth = Mask::filled(size, size, BACKGROUND);
    let mut thin = vec![false; n];
    for i in 0..n {
        truth.data[i] = if 1.0 - transmit[i] >= CLOUD_ALPHA {
            thin[i] = thin_alpha[i] >= thick_alpha[i];
            CLOUD
        } else if snow_mask[i] {
            SNOW
        } else {
            BACKGROUND
        };
    }

    let observed = match subset {
        Subset::Clean => truth.clone(),
        Subset::Noisy => corrupt_label(&truth, &thin, &config.corruption, &mut rng),
    };

    let cloud_px = truth.count(CLOUD);
    let thin_share = if cloud_px == 0 {
        0.0
    } else {
        thin.iter().filter(|&&t| t).count() as f64 / cloud_px as f64
    };
    let meta = SceneMeta {
        subset,
        clouds,
        snow,
        bright_snow,
        cloud_fraction: cloud_px as f64 / n as f64,
        snow_fraction: truth.count(SNOW) as f64 / n as f64,
        thin_share,
        difficulty: 0.7 * thin_share + 0.3 * f64::from(u8::from(bright_snow)),
    };
    Scene {
        image,
        true_mask: truth,
        observed,
        thin,
        meta,
    }
}

/// Whether any pixel within Chebyshev distance `r` of `(x, y)` satisfies `pred`.
fn any_within(mask: &Mask, x: usize, y: usize, r: usize, pred: impl Fn(u8) -> bool) -> bool {
    let (w, h) = mask.dims();
    (y.saturating_sub(r)..=(y + r).min(h - 1))
        .any(|yy| (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| pred(mask.get(xx, yy))))
}

/// Relabels `from` pixels (restricted by `eligible`) to `to` in random square
/// patches until `target` pixels have changed.
fn patch_relabel(
    mask: &mut Mask,
    eligible: impl Fn(usize, u8) -> bool,
    to: u8,
    target: usize,
    rng: &mut impl Rng,
) {
    let (w, h) = mask.dims();
    let seeds: Vec<usize> = (0..mask.len()).filter(|&i| eligible(i, mask.data[i])).collect();
    if seeds.is_empty() {
        return;
    }
    let max_side = (w.min(h) / 6).max(3);
    let mut changed = 0;
    let mut attempts = 0;
    while changed < target && attempts < 64 * target.max(1) {
        attempts += 1;
        let c = seeds[rng.random_range(0..seeds.len())];
        if !eligible(c, mask.data[c]) {
            continue;
        }
        let side = rng.random_range(3..=max_side);
        let (cx, cy) = ((c % w) as isize, (c / w) as isize);
        let lo = -(side as isize / 2);
        'patch: for dy in lo..lo + side as isize {
            for dx in lo..lo + side as isize {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let i = y as usize * w + x as usize;
                if eligible(i, mask.data[i]) {
                    mask.data[i] = to;
                    changed += 1;
                    if changed == target {
                        break 'patch;
                    }
                }
            }
        }
    }
}

/// Derives an observed label from a true mask: a random erosion or dilation of
/// the cloud class by up to `boundary_shift_px`, then cloud-to-snow patches,
/// then background patches over thin cloud. Ignore pixels are never changed.
///
/// `thin` flags the thin-cloud pixels of `true_mask` (row-major).
pub fn corrupt_label(true_mask: &Mask, thin: &[bool], params: &CorruptionParams, rng: &mut impl Rng) -> Mask {
    assert_eq!(thin.len(), true_mask.len(), "thin flags must cover the mask");
    let (w, h) = true_mask.dims();
    let mut out = true_mask.clone();
    if true_mask.count(CLOUD) == 0 {
        return out;
    }

    if params.boundary_shift_px > 0 {
        let r = rng.random_range(1..=params.boundary_shift_px);
        let dilate = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let v = true_mask.get(x, y);
                if v == IGNORE {
                    continue;
                }
                if dilate && v != CLOUD && any_within(true_mask, x, y, r, |u| u == CLOUD) {
                    out.set(x, y, CLOUD);
                } else if !dilate && v == CLOUD && any_within(true_mask, x, y, r, |u| u != CLOUD) {
                    out.set(x, y, BACKGROUND);
                }
            }
        }
    }

    let cloud = out.count(CLOUD);
    let swap_target = (params.swap_patch_rate * cloud as f64).round() as usize;
    patch_relabel(&mut out, |_, v| v == CLOUD, SNOW, swap_target, rng);

    let thin_cloud = (0..out.len()).filter(|&i| thin[i] && out.data[i] == CLOUD).count();
    let omit_target = (params.omit_patch_rate * thin_cloud as f64).round() as usize;
    patch_relabel(&mut out, |i, v| thin[i] && v == CLOUD, BACKGROUND, omit_target, rng);
    out
}

fn sample_id(subset: Subset, split: Split, index: usize) -> String {
    format!(
        "{}_{}_{index:04}",
        subset.to_string().to_lowercase(),
        split.to_string().to_lowercase()
    )
}

fn create_dir(path: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes rasters under `out_dir` and returns the manifest saved at
/// `out_dir/manifest.json`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    for sub in ["images", "labels", "true_labels"] {
        create_dir(&out_dir.join(sub))?;
    }
    let mut samples = Vec::with_capacity(config.counts.total());
    let mut index = 0u64;
    for subset in Subset::ALL {
        for split in Split::ALL {
            for k in 0..config.counts.get(subset, split) {
                let id = sample_id(subset, split, k);
                let scene = generate_scene(config, subset, seed::derive(config.seed, seed::stream::SCENE, index));
                index += 1;
                let image_path = PathBuf::from(format!("images/{id}.png"));
                let label_path = PathBuf::from(format!("labels/{id}.png"));
                scene.image.save_png(&out_dir.join(&image_path))?;
                scene.observed.save_png(&out_dir.join(&label_path))?;
                let true_label_path = match subset {
                    Subset::Noisy => {
                        let p = PathBuf::from(format!("true_labels/{id}.png"));
                        scene.true_mask.save_png(&out_dir.join(&p))?;
                        Some(p)
                    }
                    Subset::Clean => None,
                };
                samples.push(SampleRecord {
                    id,
                    image_path,
                    label_path,
                    true_label_path,
                    subset,
                    split,
                    source: "synthetic".into(),
                    difficulty: Some((scene.meta.difficulty * 1e4).round() / 1e4),
                });
            }
        }
    }
    let manifest = DatasetManifest::new(out_dir, ".", samples);
    let path = out_dir.join(MANIFEST_FILE);
    manifest.save(&path).map_err(|e| match e {
        crate::dataset::DatasetError::Io { path, source } => SynthError::Io { path, source },
        other => SynthError::Config(other.to_string()),
    })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_mask() -> Mask {
        let mut m = Mask::filled(16, 16, BACKGROUND);
        for y in 4..12 {
            for x in 4..12 {
                m.set(x, y, CLOUD);
            }
        }
        m
    }

    #[test]
    fn zero_params_are_identity() {
        let m = square_mask();
        let thin = vec![true; m.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(corrupt_label(&m, &thin, &CorruptionParams::NONE, &mut rng), m);
    }

    #[test]
    fn background_only_is_untouched() {
        let m = Mask::filled(16, 16, BACKGROUND);
        let thin = vec![false; m.len()];
        let p = CorruptionParams {
            boundary_shift_px: 3,
            swap_patch_rate: 1.0,
            omit_patch_rate: 1.0,
        };
        for s in 0..20 {
            assert_eq!(corrupt_label(&m, &thin, &p, &mut ChaCha8Rng::seed_from_u64(s)), m);
        }
    }

    #[test]
    fn boundary_shift_stays_in_band() {
        let m = square_mask();
        let thin = vec![false; m.len()];
        let p = CorruptionParams {
            boundary_shift_px: 1,
            ..CorruptionParams::NONE
        };
        // Brute force: distance from each pixel to the nearest pixel of the other class.
        let near_boundary = |x: usize, y: usize| {
            let v = m.get(x, y);
            (0..16).any(|yy: usize| {
                (0..16).any(|xx: usize| m.get(xx, yy) != v && x.abs_diff(xx).max(y.abs_diff(yy)) <= 1)
            })
        };
        for s in 0..16 {
            let out = corrupt_label(&m, &thin, &p, &mut ChaCha8Rng::seed_from_u64(s));
            assert_ne!(out, m);
            for y in 0..16 {
                for x in 0..16 {
                    if out.get(x, y) != m.get(x, y) {
                        assert!(near_boundary(x, y), "seed {s}: ({x},{y}) changed");
                    }
                }
            }
        }
    }

    #[test]
    fn ignore_pixels_survive_corruption() {
        let mut m = square_mask();
        for x in 0..16 {
            m.set(x, 8, IGNORE);
        }
        let thin = vec![true; m.len()];
        let p = CorruptionParams {
            boundary_shift_px: 2,
            swap_patch_rate: 0.5,
            omit_patch_rate: 0.5,
        };
        for s in 0..20 {
            let out = corrupt_label(&m, &thin, &p, &mut ChaCha8Rng::seed_from_u64(s));
            for x in 0..16 {
                assert_eq!(out.get(x, 8), IGNORE);
            }
        }
    }

    #[test]
    fn swap_rate_over_many_seeds() {
        let config = SynthConfig {
            corruption: CorruptionParams {
                swap_patch_rate: 0.2,
                ..CorruptionParams::default()
            },
            ..SynthConfig::default()
        };
        let mut fractions = Vec::new();
        for s in 0..100 {
            let scene = generate_scene(&config, Subset::Noisy, s);
            let cloud = scene.true_mask.count(CLOUD);
            if cloud == 0 {
                continue;
            }
            let swapped = (0..scene.true_mask.len())
                .filter(|&i| scene.true_mask.data[i] == CLOUD && scene.observed.data[i] == SNOW)
                .count();
            fractions.push(swapped as f64 / cloud as f64);
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!((0.05..=0.35).contains(&mean), "mean swapped fraction {mean}");
    }

    #[test]
    fn scenes_are_deterministic_and_clean_is_exact() {
        let config = SynthConfig::default();
        for subset in Subset::ALL {
            let a = generate_scene(&config, subset, 42);
            let b = generate_scene(&config, subset, 42);
            assert_eq!(a.image, b.image);
            assert_eq!(a.observed, b.observed);
            assert_eq!(a.meta, b.meta);
        }
        for s in 0..20 {
            let c = generate_scene(&config, Subset::Clean, s);
            assert_eq!(c.observed, c.true_mask);
            assert!(c.true_mask.first_invalid().is_none());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SynthConfig::default();
        assert!(c.validate().is_ok());
        c.cloud_style_mix.clean.thin = 0.5;
        assert!(c.validate().is_err());
        let c = SynthConfig {
            image_size: 8,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
        let json = r#"{"image_size": 32, "seed": 5}"#;
        let c: SynthConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.counts, SynthConfig::default().counts);
        assert_eq!(c.seed, 5);
    }
}
