use std::collections::BTreeSet;

use chrono::{DateTime, Duration, Utc};
use cirrus_core::curriculum::{noisy_quota, stage_of};
use cirrus_core::metrics::{class_accuracy, class_iou, CleanMetrics, ConfusionMatrix};
use cirrus_core::noisy_eval::{
    aggregate_ids, compare_methods, prescreen, ErrorCategory, Judgment, MethodEntry, NoisyEvalSummary, Source,
    Thresholds, Verdict,
};
use cirrus_core::raster::{Mask, BACKGROUND, CLOUD, IGNORE, SNOW};
use proptest::prelude::*;

fn at(s: i64) -> DateTime<Utc> {
    DateTime::<Utc>::from_timestamp(1_700_000_000, 0).unwrap() + Duration::seconds(s)
}

fn judgment(id: usize, verdict: Verdict, s: i64) -> Judgment {
    Judgment {
        image_id: format!("img_{id:03}"),
        verdict,
        categories: match verdict {
            Verdict::Error => [ErrorCategory::CloudAsSnow].into(),
            Verdict::Ok => BTreeSet::new(),
        },
        reviewer: "r1".into(),
        source: Source::Human,
        timestamp: at(s),
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img_{i:03}")).collect()
}

fn mask_strategy(size: usize, with_ignore: bool) -> impl Strategy<Value = Mask> {
    let values: Vec<u8> = if with_ignore {
        vec![BACKGROUND, CLOUD, SNOW, IGNORE]
    } else {
        vec![BACKGROUND, CLOUD, SNOW]
    };
    proptest::collection::vec(proptest::sample::select(values), size * size).prop_map(move |d| Mask::from_vec(size, size, d))
}

proptest! {
    #[test]
    fn quota_matches_direct_arithmetic(m in 0usize..100, span in 1usize..200, size in 0usize..2000, epoch in 0usize..400) {
        let n = m + span;
        let want = if epoch < m { 0 } else if epoch >= n { size } else { (epoch - m) * size / (n - m) };
        prop_assert_eq!(noisy_quota(epoch, m, n, size).unwrap(), want);
        let stage = stage_of(epoch, m, n).unwrap();
        prop_assert_eq!(stage, if epoch < m { 1 } else if epoch < n { 2 } else { 3 });
        if epoch + 1 < n {
            prop_assert!(noisy_quota(epoch + 1, m, n, size).unwrap() >= want);
        }
    }

    #[test]
    fn iou_never_exceeds_accuracy(pred in mask_strategy(16, false), label in mask_strategy(16, true)) {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&pred, &label).unwrap();
        let counted = label.data.iter().filter(|v| **v != IGNORE).count() as u64;
        prop_assert_eq!(cm.counts.iter().flatten().sum::<u64>(), counted);
        prop_assert_eq!(cm.ignored_pixels, 256 - counted);
        prop_assert_eq!(cm.total(), 256);
        for c in [CLOUD, SNOW] {
            if let (Ok(iou), Ok(acc)) = (class_iou(&cm, c), class_accuracy(&cm, c)) {
                prop_assert!(iou <= acc);
                prop_assert!((0.0..=1.0).contains(&iou));
            }
        }
    }

    #[test]
    fn error_percent_is_order_invariant(
        verdicts in proptest::collection::vec(any::<bool>(), 1..60),
        seed in any::<u64>(),
    ) {
        let total = verdicts.len();
        let mut js: Vec<Judgment> = verdicts
            .iter()
            .enumerate()
            .map(|(i, e)| judgment(i, if *e { Verdict::Error } else { Verdict::Ok }, i as i64))
            .collect();
        let before = aggregate_ids(&js, &ids(total)).unwrap().summary;
        let errors = verdicts.iter().filter(|e| **e).count();
        prop_assert_eq!(before, NoisyEvalSummary::new(total, errors));
        // Deterministic reshuffle driven by the case seed.
        let mut state = seed | 1;
        for i in (1..js.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            js.swap(i, (state % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(aggregate_ids(&js, &ids(total)).unwrap().summary, before);
    }

    #[test]
    fn ok_never_raises_and_flip_adds_one_share(
        verdicts in proptest::collection::vec(any::<bool>(), 2..60),
        pick in any::<proptest::sample::Index>(),
    ) {
        let total = verdicts.len();
        // The last image stays unjudged so an OK can be added for it.
        let js: Vec<Judgment> = verdicts[..total - 1]
            .iter()
            .enumerate()
            .map(|(i, e)| judgment(i, if *e { Verdict::Error } else { Verdict::Ok }, i as i64))
            .collect();
        let base = aggregate_ids(&js, &ids(total)).unwrap().summary.error_percent;

        let mut with_ok = js.clone();
        with_ok.push(judgment(total - 1, Verdict::Ok, 10_000));
        prop_assert!(aggregate_ids(&with_ok, &ids(total)).unwrap().summary.error_percent <= base);

        let oks: Vec<usize> = (0..total - 1).filter(|&i| !verdicts[i]).collect();
        if !oks.is_empty() {
            let target = oks[pick.index(oks.len())];
            let mut flipped = js.clone();
            flipped.push(judgment(target, Verdict::Error, 20_000));
            let after = aggregate_ids(&flipped, &ids(total)).unwrap().summary.error_percent;
            let step = 100.0 / total as f64;
            prop_assert!((after - base - step).abs() < 1e-9, "{} -> {}, step {}", base, after, step);
        }
    }

    #[test]
    fn prescreen_is_translation_invariant(
        pred in mask_strategy(8, false),
        label in mask_strategy(8, true),
        a in (0usize..16, 0usize..16),
        b in (0usize..16, 0usize..16),
    ) {
        let place = |m: &Mask, (dx, dy): (usize, usize)| {
            let mut out = Mask::filled(24, 24, BACKGROUND);
            for y in 0..8 {
                for x in 0..8 {
                    out.set(x + dx, y + dy, m.get(x, y));
                }
            }
            out
        };
        let t = Thresholds { cloud_as_snow: 0.01, omission: 0.01, false_detection: 0.01 };
        let ra = prescreen(&place(&pred, a), &place(&label, a), &t).unwrap();
        let rb = prescreen(&place(&pred, b), &place(&label, b), &t).unwrap();
        prop_assert_eq!(&ra, &rb);
        prop_assert_eq!(ra, prescreen(&place(&pred, a), &place(&label, a), &t).unwrap());
    }
}

fn entry(name: &str, v: [f64; 4], errors: usize) -> MethodEntry {
    MethodEntry {
        name: name.into(),
        clean: Some(CleanMetrics {
            oa_cloud: Some(v[0] / 100.0),
            oa_snow: Some(v[1] / 100.0),
            iou_cloud: Some(v[2] / 100.0),
            iou_snow: Some(v[3] / 100.0),
            miou: None,
        }),
        noisy: Some(NoisyEvalSummary::new(200, errors)),
    }
}

#[test]
fn four_method_rows_mark_column_bests() {
    let report = compare_methods(&[
        entry("UNet", [88.89, 81.47, 83.33, 72.49], 70),
        entry("Segformer", [89.43, 81.44, 79.63, 70.48], 51),
        entry("UNet (Ours)", [92.56, 85.86, 87.50, 78.77], 47),
        entry("Segformer (Ours)", [89.44, 78.81, 84.84, 73.94], 37),
    ]);
    let best: Vec<Vec<bool>> = report.rows.iter().map(|r| r.best.clone()).collect();
    assert_eq!(best[0], vec![false; 5]);
    assert_eq!(best[1], vec![false; 5]);
    assert_eq!(best[2], vec![true, true, true, true, false]);
    assert_eq!(best[3], vec![false, false, false, false, true]);
    assert_eq!(report.rows[2].values[0], Some(92.56));
    assert_eq!(report.rows[3].values[4], Some(18.5));
    assert_eq!(report.rows[2].values[4], Some(23.5));
}

#[test]
fn tied_values_are_all_marked() {
    let report = compare_methods(&[
        entry("a", [90.0, 80.0, 70.0, 60.0], 10),
        entry("b", [90.0, 79.0, 70.0, 61.0], 10),
    ]);
    assert_eq!(report.rows[0].best, vec![true, true, true, false, true]);
    assert_eq!(report.rows[1].best, vec![true, false, true, true, true]);
}
