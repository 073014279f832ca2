use ndarray::{ArrayD, IxDyn};

use super::{from_vec, Real, Var};
use crate::raster::IGNORE;

/// Returned when every pixel of a batch carries the ignore label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cross-entropy over a batch with no labelled pixels")]
pub struct AllIgnored;

/// Per-row log-softmax evaluated at `label`, skipping ignored rows.
fn row_nll<F: Real>(row: &[F], label: usize) -> (F, F, F) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let total: F = row.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + total.ln();
    (log_z - row[label], max, total)
}

/// Mean cross-entropy of class logits `[..., C]` against integer labels,
/// ignoring pixels labelled [`IGNORE`].
pub fn softmax_cross_entropy<'t, F: Real>(
    logits: Var<'t, F>,
    labels: &[u8],
) -> Result<Var<'t, F>, AllIgnored> {
    let x = logits.value();
    let classes = *x.shape().last().unwrap();
    assert_eq!(x.len() / classes, labels.len(), "one label per pixel");
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    if valid == 0 {
        return Err(AllIgnored);
    }
    let xs = x.as_slice().unwrap();
    let mut loss = F::zero();
    for (row, &label) in xs.chunks(classes).zip(labels) {
        if label != IGNORE {
            assert!((label as usize) < classes, "label {label} out of range");
            loss += row_nll(row, label as usize).0;
        }
    }
    let inv = F::one() / F::of(valid as f64);
    let labels = labels.to_vec();
    let shape = x.shape().to_vec();
    Ok(logits.tape().push(
        ArrayD::from_elem(IxDyn(&[]), loss * inv),
        vec![logits.id()],
        Box::new(move |g| {
            let scale = g.iter().copied().sum::<F>() * inv;
            let xs = x.as_slice().unwrap();
            let mut d = vec![F::zero(); xs.len()];
            for ((row, drow), &label) in xs.chunks(classes).zip(d.chunks_mut(classes)).zip(&labels) {
                if label == IGNORE {
                    continue;
                }
                let (_, max, total) = row_nll(row, label as usize);
                for (j, (dv, &v)) in drow.iter_mut().zip(row).enumerate() {
                    let p = (v - max).exp() / total;
                    let target = if j == label as usize { F::one() } else { F::zero() };
                    *dv = (p - target) * scale;
                }
            }
            vec![from_vec(&shape, d)]
        }),
    ))
}

/// Value-only cross-entropy, for evaluation outside a tape.
pub fn cross_entropy_value<F: Real>(logits: &ArrayD<F>, labels: &[u8]) -> Result<F, AllIgnored> {
    let tape = super::Tape::new();
    let v = softmax_cross_entropy(tape.constant(logits.clone()), labels)?;
    let out = v.value()[IxDyn(&[])];
    Ok(out)
}
