use cirrus_core::dataset::{load_manifest, partition, Counts, Split, Subset};
use cirrus_core::raster::{BACKGROUND, CLOUD, IGNORE, SNOW};
use cirrus_core::synthgen::{generate_dataset, SynthConfig};

#[test]
fn default_dataset_counts_and_cloud_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig::default();
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    assert_eq!(
        manifest.counts,
        Counts {
            clean_trainval: 120,
            clean_test: 40,
            noisy_trainval: 60,
            noisy_test: 20,
        }
    );
    let reloaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(reloaded.samples, manifest.samples);

    let (mut cloud, mut total) = (0usize, 0usize);
    for rec in &manifest.samples {
        let label = manifest.load_label(rec).unwrap();
        assert!(label.data.iter().all(|v| [BACKGROUND, CLOUD, SNOW, IGNORE].contains(v)));
        cloud += label.count(CLOUD);
        total += label.len();
        match rec.subset {
            Subset::Clean => assert!(rec.true_label_path.is_none()),
            Subset::Noisy => assert!(manifest.load_true_label(rec).unwrap().is_some()),
        }
        let image = manifest.load_image(rec).unwrap();
        assert_eq!((image.width, image.height), (64, 64));
    }
    let freq = cloud as f64 / total as f64;
    assert!((0.05..=0.60).contains(&freq), "cloud pixel frequency {freq}");
}

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        image_size: 32,
        counts: Counts {
            clean_trainval: 6,
            clean_test: 2,
            noisy_trainval: 6,
            noisy_test: 2,
        },
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn same_config_gives_byte_identical_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(&small(4), a.path()).unwrap();
    generate_dataset(&small(4), b.path()).unwrap();
    let read = |root: &std::path::Path, rel: &std::path::Path| std::fs::read(root.join(rel)).unwrap();
    assert_eq!(read(a.path(), "manifest.json".as_ref()), read(b.path(), "manifest.json".as_ref()));
    for rec in &ma.samples {
        assert_eq!(read(a.path(), &rec.image_path), read(b.path(), &rec.image_path));
        assert_eq!(read(a.path(), &rec.label_path), read(b.path(), &rec.label_path));
    }

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(5), c.path()).unwrap();
    let first = &ma.samples[0].image_path;
    assert_ne!(read(a.path(), first), read(c.path(), first));
}

#[test]
fn only_noisy_labels_differ_from_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(8);
    config.counts.noisy_trainval = 20;
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    let noisy = partition(&manifest, Subset::Noisy, Split::Trainval);
    let differing = noisy
        .iter()
        .filter(|rec| manifest.load_label(rec).unwrap() != manifest.load_true_label(rec).unwrap().unwrap())
        .count();
    assert!(differing > 0, "corruption never changed a noisy label");
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = generate_dataset(&small(0), &blocker.join("data")).unwrap_err();
    assert!(matches!(err, cirrus_core::synthgen::SynthError::Io { .. }), "{err}");
}
