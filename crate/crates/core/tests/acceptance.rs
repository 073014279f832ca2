//! Acceptance suite. Prints one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use chrono::{DateTime, Utc};
use cirrus_core::config::RunConfig;
use cirrus_core::curriculum::{noisy_quota, CurriculumConfig, Schedule};
use cirrus_core::dataset::{load_manifest, partition, Counts, DatasetManifest, Split, Subset};
use cirrus_core::metrics::{evaluate_partition, CleanMetrics, ConfusionMatrix, Reference};
use cirrus_core::models::{build_model, images_to_tensor, Arch, ModelParams};
use cirrus_core::nn::{Adam, AdamConfig, Session};
use cirrus_core::noisy_eval::{aggregate_ids, Judgment, Source, Verdict};
use cirrus_core::raster::{Mask, CLOUD, IGNORE, SNOW};
use cirrus_core::run::{train_run, RunDir};
use cirrus_core::synthgen::{generate_dataset, generate_scene, SynthConfig};
use cirrus_core::tensor::{softmax_cross_entropy, Tape};
use cirrus_core::trainer::{lr_at, train_step, TrainConfig};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    run: fn() -> Outcome,
    /// Directional experiments report but do not gate the exit status.
    gating: bool,
}

fn main() {
    let criteria = [
        Criterion { name: "quota formula", run: quota_formula, gating: true },
        Criterion { name: "stage purity", run: stage_purity, gating: true },
        Criterion { name: "lr schedule", run: lr_schedule, gating: true },
        Criterion { name: "metrics oracle", run: metrics_oracle, gating: true },
        Criterion { name: "error% formula", run: error_percent, gating: true },
        Criterion { name: "model shape/gradient suite", run: model_suite, gating: true },
        Criterion { name: "curriculum benefit", run: curriculum_benefit, gating: false },
        Criterion { name: "determinism", run: determinism, gating: true },
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut gating_failures = 0;
    for c in &criteria {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} ({secs:.1}s): {detail}", c.name),
            Err(detail) => {
                let note = if c.gating { "" } else { " [non-gating]" };
                println!("FAIL {} ({secs:.1}s){note}: {detail}", c.name);
                if c.gating {
                    gating_failures += 1;
                }
            }
        }
    }
    if gating_failures > 0 {
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn quota_formula() -> Outcome {
    let t0 = Instant::now();
    for e in 0..30 {
        ensure!(noisy_quota(e, 30, 90, 599) == Ok(0), "epoch {e} quota not 0");
    }
    ensure!(noisy_quota(60, 30, 90, 599) == Ok(299), "epoch 60 quota not 299");
    for e in 90..200 {
        ensure!(noisy_quota(e, 30, 90, 599) == Ok(599), "epoch {e} quota not 599");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let m = rng.random_range(0..200usize);
        let n = rng.random_range(m + 1..=m + 300);
        let size = rng.random_range(0..5000usize);
        let epoch = rng.random_range(0..n + 50);
        let expected = if epoch < m {
            0
        } else if epoch >= n {
            size
        } else {
            // floor((e - m) / (n - m) * size) by exact integer arithmetic.
            (epoch - m) * size / (n - m)
        };
        let got = noisy_quota(epoch, m, n, size).map_err(|e| e.to_string())?;
        ensure!(got == expected, "m={m} n={n} size={size} epoch={epoch}: {got} != {expected}");
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.2}s");
    Ok("reference points and 1000 random triples match".into())
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        image_size: 32,
        counts: Counts {
            clean_trainval: 16,
            clean_test: 4,
            noisy_trainval: 12,
            noisy_test: 4,
        },
        seed,
        ..SynthConfig::default()
    }
}

fn small_run_config(seed: u64) -> RunConfig {
    let mut config = RunConfig::default();
    config.synth = small_synth(seed);
    config.curriculum.m = 3;
    config.curriculum.n = 7;
    config.train.epochs = 10;
    config.train.checkpoint_every = 5;
    config.set_seed(seed);
    config
}

fn stage_purity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = small_run_config(5);
    let manifest = generate_dataset(&config.synth, &dir.path().join("data")).map_err(|e| e.to_string())?;
    let run = RunDir::new(dir.path().join("run"));
    train_run(&config, &manifest, &run).map_err(|e| e.to_string())?;
    let audit = run.read_audit().map_err(|e| e.to_string())?;

    let noisy: BTreeSet<String> = partition(&manifest, Subset::Noisy, Split::Trainval)
        .into_iter()
        .map(|s| s.id)
        .collect();
    let (m, n) = (config.curriculum.m, config.curriculum.n);
    let mut per_epoch: BTreeMap<usize, BTreeSet<String>> = (0..config.train.epochs).map(|e| (e, BTreeSet::new())).collect();
    for entry in &audit {
        if noisy.contains(&entry.sample_id) {
            per_epoch
                .get_mut(&entry.epoch)
                .ok_or_else(|| format!("audit epoch {} out of range", entry.epoch))?
                .insert(entry.sample_id.clone());
        }
    }
    let mut previous = BTreeSet::new();
    for (&epoch, seen) in &per_epoch {
        let quota = noisy_quota(epoch, m, n, noisy.len()).map_err(|e| e.to_string())?;
        if epoch < m {
            ensure!(seen.is_empty(), "epoch {epoch} saw {} noisy ids before m", seen.len());
        }
        ensure!(seen.len() == quota, "epoch {epoch}: {} distinct noisy ids, quota {quota}", seen.len());
        ensure!(previous.is_subset(seen), "epoch {epoch} dropped a previously admitted noisy id");
        previous = seen.clone();
    }
    Ok(format!("{} audit entries over {} epochs, m={m} n={n}", audit.len(), per_epoch.len()))
}

fn lr_schedule() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b.abs();
    let unet = TrainConfig::for_arch(Arch::UnetRes);
    for (epoch, want) in [(0, 1e-3), (9, 1e-3), (10, 1e-4), (19, 1e-4), (20, 1e-5)] {
        let got = lr_at(epoch, &unet);
        ensure!(close(got, want), "unet epoch {epoch}: {got} != {want}");
    }
    let transformer = TrainConfig::for_arch(Arch::TransformerSeg);
    for (epoch, want) in [(0, 6e-5), (9, 6e-5), (10, 6e-6)] {
        let got = lr_at(epoch, &transformer);
        ensure!(close(got, want), "transformer epoch {epoch}: {got} != {want}");
    }
    Ok("0.001/0.0001/0.00001 at 0/10/20 and 6e-5/6e-6 at 0/10".into())
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> Mask {
    let data = (0..size * size)
        .map(|_| match rng.random_range(0..10) {
            0 => IGNORE,
            v => (v % 3) as u8,
        })
        .collect();
    Mask::from_vec(size, size, data)
}

fn metrics_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..200 {
        let pred = {
            // Predictions never carry the ignore value.
            let mut m = random_mask(&mut rng, 16);
            m.data.iter_mut().filter(|v| **v == IGNORE).for_each(|v| *v = 0);
            m
        };
        let label = random_mask(&mut rng, 16);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&pred, &label).map_err(|e| e.to_string())?;

        let mut oracle = [[0u64; 3]; 3];
        for y in 0..16 {
            for x in 0..16 {
                let l = label.get(x, y);
                if l != IGNORE {
                    oracle[l as usize][pred.get(x, y) as usize] += 1;
                }
            }
        }
        ensure!(cm.counts == oracle, "case {case}: confusion {:?} != {oracle:?}", cm.counts);

        let acc = |c: usize| {
            let row: u64 = oracle[c].iter().sum();
            (row > 0).then(|| oracle[c][c] as f64 / row as f64)
        };
        let iou = |c: usize| {
            let row: u64 = oracle[c].iter().sum();
            let col: u64 = (0..3).map(|r| oracle[r][c]).sum();
            let union = row + col - oracle[c][c];
            (union > 0).then(|| oracle[c][c] as f64 / union as f64)
        };
        let c = CLOUD as usize;
        let s = SNOW as usize;
        let defined: Vec<f64> = [iou(c), iou(s)].into_iter().flatten().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let expected = CleanMetrics {
            oa_cloud: acc(c),
            oa_snow: acc(s),
            iou_cloud: iou(c),
            iou_snow: iou(s),
            miou,
        };
        let got = CleanMetrics::from_confusion(&cm);
        ensure!(got == expected, "case {case}: {got:?} != {expected:?}");
        for (i, a) in [(iou(c), acc(c)), (iou(s), acc(s))] {
            if let (Some(i), Some(a)) = (i, a) {
                ensure!(i <= a, "case {case}: IoU {i} exceeds accuracy {a}");
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok("200 random 16x16 pairs match the double-loop oracle".into())
}

fn judgments(total: usize, errors: usize) -> (Vec<Judgment>, Vec<String>) {
    let ids: Vec<String> = (0..total).map(|i| format!("img_{i:04}")).collect();
    let base = DateTime::<Utc>::from_timestamp(1_700_000_000, 0).unwrap();
    let js = ids
        .iter()
        .enumerate()
        .map(|(i, id)| Judgment {
            image_id: id.clone(),
            verdict: if i < errors { Verdict::Error } else { Verdict::Ok },
            categories: if i < errors {
                [cirrus_core::noisy_eval::ErrorCategory::LargeOmission].into()
            } else {
                BTreeSet::new()
            },
            reviewer: "r1".into(),
            source: Source::Human,
            timestamp: base + chrono::Duration::seconds(i as i64),
        })
        .collect();
    (js, ids)
}

fn error_percent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (errors, want) in [(37, 18.5), (47, 23.5)] {
        let (mut js, ids) = judgments(200, errors);
        let got = aggregate_ids(&js, &ids).map_err(|e| e.to_string())?.summary;
        ensure!(got.error_percent == want, "{errors}/200 gave {} not {want}", got.error_percent);
        ensure!(got.error_images == errors && got.total_images == 200, "counts {got:?}");
        for _ in 0..20 {
            js.shuffle(&mut rng);
            let again = aggregate_ids(&js, &ids).map_err(|e| e.to_string())?.summary;
            ensure!(again == got, "permuted order changed the summary");
        }
    }
    Ok("37/200 -> 18.5, 47/200 -> 23.5, invariant under 20 permutations each".into())
}

fn loss_and_grads<F: cirrus_core::tensor::Real>(
    model: &ModelParams<F>,
    x: &ArrayD<F>,
    labels: &[u8],
) -> (f64, BTreeMap<String, ArrayD<F>>) {
    let tape = Tape::new();
    let cx = Session::new(&tape, &model.params, true, true);
    let (logits, _) = model.forward(&cx, tape.constant(x.clone())).unwrap();
    let loss = softmax_cross_entropy(logits, labels).unwrap();
    let value = loss.value().iter().next().unwrap().to_f64().unwrap();
    let (vars, _) = cx.finish();
    let mut grads = tape.backward(loss);
    let grads = vars.into_iter().filter_map(|(n, v)| grads.take(v).map(|g| (n, g))).collect();
    (value, grads)
}

/// Moves every trainable parameter by a small random amount so that no
/// activation sits exactly on a ReLU or max-pool kink.
fn generic_point(model: &mut ModelParams<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = model.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    for name in names {
        let p = model.params.get_mut(&name).unwrap();
        p.value.mapv_inplace(|v| v + rng.random_range(-1e-3..1e-3));
    }
}

/// Central differences in f64 on 8 random trainable entries; returns the
/// worst relative error of `analytic` against them.
fn gradient_error(
    model: &ModelParams<f64>,
    x: &ArrayD<f64>,
    labels: &[u8],
    analytic: &BTreeMap<String, Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> (f64, String) {
    let h = 1e-6;
    let names: Vec<&String> = analytic.keys().collect();
    let mut worst = (0.0, String::new());
    for _ in 0..8 {
        let name = names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..analytic[name].len());
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.get_mut(name).unwrap().value.as_slice_mut().unwrap()[idx] += delta;
            loss_and_grads(&m, x, labels).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic[name][idx];
        let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-3);
        if rel >= worst.0 {
            worst = (rel, format!("{name}[{idx}] analytic {a:.6e} numeric {numeric:.6e}"));
        }
    }
    worst
}

fn flatten<F: cirrus_core::tensor::Real>(grads: BTreeMap<String, ArrayD<F>>) -> BTreeMap<String, Vec<f64>> {
    grads
        .into_iter()
        .map(|(n, g)| (n, g.iter().map(|v| v.to_f64().unwrap()).collect()))
        .collect()
}

fn model_suite() -> Outcome {
    let mut notes = Vec::new();
    let config = SynthConfig::default();
    let scenes: Vec<_> = (0..4).map(|i| generate_scene(&config, Subset::Clean, i)).collect();
    let images: Vec<_> = scenes.iter().map(|s| &s.image).collect();
    let x32 = images_to_tensor::<f32>(&images);
    let labels: Vec<u8> = scenes.iter().flat_map(|s| s.observed.data.iter().copied()).collect();

    for arch in [Arch::UnetRes, Arch::TransformerSeg] {
        // Shapes.
        let model: ModelParams<f32> = build_model(arch, 3, 0.25, 0).map_err(|e| e.to_string())?;
        let tape = Tape::new();
        let cx = Session::new(&tape, &model.params, false, false);
        let (logits, trace) = model.forward(&cx, tape.constant(x32.clone())).map_err(|e| e.to_string())?;
        ensure!(logits.shape() == [4, 64, 64, 3], "{arch}: logits {:?}", logits.shape());
        if arch == Arch::TransformerSeg {
            ensure!(trace.head == Some(vec![4, 3, 16, 16]), "transformer head {:?}", trace.head);
        }

        // Gradients, f64 at 1e-4 and f32 at 1e-2, batch 1 at 32x32.
        let small = SynthConfig {
            image_size: 32,
            ..SynthConfig::default()
        };
        let scene = generate_scene(&small, Subset::Clean, 3);
        let gx = images_to_tensor::<f64>(&[&scene.image]);
        let glabels = scene.observed.data.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut m64: ModelParams<f64> = build_model(arch, 3, 0.25, 0).map_err(|e| e.to_string())?;
        generic_point(&mut m64, &mut rng);
        let (_, g64) = loss_and_grads(&m64, &gx, &glabels);
        let (err64, at64) = gradient_error(&m64, &gx, &glabels, &flatten(g64), &mut rng);
        ensure!(err64 < 1e-4, "{arch}: f64 gradient rel error {err64:.2e} at {at64}");
        let m32: ModelParams<f32> = m64.cast();
        let (_, g32) = loss_and_grads(&m32, &gx.mapv(|v| v as f32), &glabels);
        let (err32, at32) = gradient_error(&m64, &gx, &glabels, &flatten(g32), &mut rng);
        ensure!(err32 < 1e-2, "{arch}: f32 gradient rel error {err32:.2e} at {at32}");

        // Overfit four samples.
        let lr = match arch {
            Arch::UnetRes => 3e-3,
            Arch::TransformerSeg => 1e-3,
        };
        let mut model: ModelParams<f32> = build_model(arch, 3, 0.25, 0).map_err(|e| e.to_string())?;
        let mut adam = Adam::new(AdamConfig::default());
        let mut reached = None;
        let mut last = f64::NAN;
        for step in 0..300 {
            let (loss, _) = train_step(&mut model, &mut adam, &x32, &labels, lr)
                .map_err(|e| e.to_string())?
                .ok_or("all labels ignored")?;
            last = loss;
            if loss < 0.05 {
                reached = Some(step + 1);
                break;
            }
        }
        let steps = reached.ok_or_else(|| format!("{arch}: loss {last:.4} after 300 steps"))?;
        notes.push(format!("{arch}: grad err f64 {err64:.1e} f32 {err32:.1e}, overfit in {steps} steps"));
    }
    Ok(notes.join("; "))
}

fn miou_on_noisy_truth(manifest: &DatasetManifest, run: &RunDir) -> Result<f64, String> {
    let model = run.load_best().map_err(|e| e.to_string())?;
    let eval = evaluate_partition(manifest, Subset::Noisy, Split::Test, Reference::True, |_, images| {
        Ok(model.segment(images)?)
    })
    .map_err(|e| e.to_string())?;
    eval.metrics.miou.ok_or_else(|| "mIoU undefined".to_string())
}

fn curriculum_benefit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut margins = Vec::new();
    let mut detail = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut config = RunConfig::default();
        config.curriculum.m = 10;
        config.curriculum.n = 30;
        config.train.epochs = 50;
        config.model.width_multiplier = 0.25;
        config.set_seed(seed);
        let root = dir.path().join(format!("seed{seed}"));
        let manifest = generate_dataset(&config.synth, &root.join("data")).map_err(|e| e.to_string())?;

        let curriculum_run = RunDir::new(root.join("curriculum"));
        train_run(&config, &manifest, &curriculum_run).map_err(|e| e.to_string())?;
        let curriculum = miou_on_noisy_truth(&manifest, &curriculum_run)?;

        let mut baseline_config = config.clone();
        baseline_config.curriculum = CurriculumConfig::baseline(seed);
        let baseline_run = RunDir::new(root.join("baseline"));
        train_run(&baseline_config, &manifest, &baseline_run).map_err(|e| e.to_string())?;
        let baseline = miou_on_noisy_truth(&manifest, &baseline_run)?;

        margins.push(curriculum - baseline);
        detail.push(format!("seed {seed}: curriculum {curriculum:.4} baseline {baseline:.4}"));
    }
    let wins = margins.iter().filter(|m| **m >= 0.0).count();
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let summary = format!("{}; wins {wins}/3, mean margin {mean:+.4}", detail.join(", "));
    if wins >= 2 && mean >= 0.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = small_run_config(21);
    let mut outputs = Vec::new();
    for copy in ["a", "b"] {
        let root = dir.path().join(copy);
        let manifest = generate_dataset(&config.synth, &root.join("data")).map_err(|e| e.to_string())?;
        let schedule = Schedule::new(config.curriculum, &manifest).map_err(|e| e.to_string())?;
        let plans: Vec<_> = (0..config.train.epochs).map(|e| schedule.plan(e)).collect();
        let run = RunDir::new(root.join("run"));
        train_run(&config, &manifest, &run).map_err(|e| e.to_string())?;
        let losses: Vec<u64> = run
            .read_log()
            .map_err(|e| e.to_string())?
            .iter()
            .map(|r| r.loss.to_bits())
            .collect();
        let reloaded = load_manifest(&root.join("data/manifest.json")).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for rec in &reloaded.samples {
            files.push(read(&reloaded.resolve(&rec.image_path))?);
            files.push(read(&reloaded.resolve(&rec.label_path))?);
        }
        outputs.push((
            read(&root.join("data/manifest.json"))?,
            files,
            plans,
            read(&run.audit())?,
            losses,
        ));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    ensure!(a.0 == b.0, "manifests differ");
    ensure!(a.1 == b.1, "generated rasters differ");
    ensure!(a.2 == b.2, "epoch plans differ");
    ensure!(a.3 == b.3, "audit logs differ");
    ensure!(a.4 == b.4, "loss sequences differ");
    Ok(format!("{} samples, {} epochs identical", a.1.len() / 2, a.4.len()))
}
