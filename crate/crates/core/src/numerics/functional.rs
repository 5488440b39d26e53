//! Eager versions of the differentiable primitives, for direct use on tensors.

use super::graph::{LN_EPS, PROB_EPS};
use super::kernels;
use super::Tensor;
use crate::error::{ensure, Result};

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    ensure!(axis < shape.len(), Invalid, "axis {axis} out of range for {shape:?}");
    let n = shape[axis];
    ensure!(n >= 1, Invalid, "softmax over an empty axis");
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (k, v) in lane.iter_mut().enumerate() {
                *v = data[base + k * inner];
            }
            kernels::softmax_in_place(&mut lane);
            for (k, v) in lane.iter().enumerate() {
                data[base + k * inner] = *v;
            }
        }
    }
    Ok(out)
}

/// Row-wise layer normalization of `[m × d]` with affine `gain`, `bias` of length `d`.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let d = x.cols();
    ensure!(gain.len() == d && bias.len() == d, Shape, "layer_norm width {d}, gain {}, bias {}", gain.len(), bias.len());
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

/// Mean over elements of `0.5 e²` for `|e| < 1`, else `|e| − 0.5`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(pred.len() == target.len(), Shape, "smooth_l1: {} vs {}", pred.len(), target.len());
    ensure!(!pred.is_empty(), Shape, "smooth_l1 of nothing");
    Ok(pred.iter().zip(target).map(|(p, t)| kernels::smooth_l1(p - t)).sum::<f64>() / pred.len() as f64)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    ensure!(p.iter().all(|v| *v >= 0.0 && v.is_finite()), Invalid, "{what} has negative or non-finite entries");
    let s: f64 = p.iter().sum();
    ensure!((s - 1.0).abs() <= 1e-6, Invalid, "{what} sums to {s}");
    Ok(())
}

/// `KL(p ‖ q)`. Entries of `q` below the clamp are raised to it, with a warning.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure!(p.len() == q.len() && !p.is_empty(), Shape, "kl: {} vs {}", p.len(), q.len());
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    if p.iter().zip(q).any(|(pi, qi)| *pi > 0.0 && *qi < PROB_EPS) {
        log::warn!("kl_divergence: q has zero mass where p is positive; clamping q to {PROB_EPS}");
    }
    Ok(kernels::kl(p, q))
}

pub fn binary_cross_entropy(score: f64, label: f64) -> Result<f64> {
    ensure!(score.is_finite(), NonFinite, "score {score}");
    ensure!(label == 0.0 || label == 1.0, Invalid, "label must be 0 or 1, got {label}");
    Ok(kernels::bce(score, label))
}

pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    ensure!(label < logits.len(), Invalid, "label {label} out of range for {} classes", logits.len());
    Ok(kernels::log_sum_exp(logits) - logits[label])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let t = softmax(&Tensor::row(&[0.0, 0.0]), 1).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = softmax(&Tensor::row(&[3f64.ln(), 0.0]), 1).unwrap();
        assert!(close(t.data()[0], 0.75, 1e-12) && close(t.data()[1], 0.25, 1e-12));
        for c in [-50.0, 0.0, 7.5, 1e3] {
            let t = softmax(&Tensor::row(&[c, c, c]), 1).unwrap();
            assert!(t.data().iter().all(|v| close(*v, 1.0 / 3.0, 1e-12)));
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let t = softmax(&x, 0).unwrap();
        assert!(t.data().iter().all(|v| close(*v, 0.5, 1e-12)));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::row(&[1.0, 2.0, 3.0]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        for (v, e) in y.data().iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!(close(*v, e, 1e-3));
        }
        let y = layer_norm(&Tensor::row(&[5.0, 5.0, 5.0]), &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(&Tensor::row(&[1.0, -4.0, 9.0]), &[0.0; 3], &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!(close(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        // zero q mass under positive p is clamped, not rejected
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite() && v > 10.0);
        assert!(kl_divergence(&[0.7, 0.7], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!(close(binary_cross_entropy(0.5, 1.0).unwrap(), 2f64.ln(), 1e-15));
        assert!(close(binary_cross_entropy(0.5, 0.0).unwrap(), 2f64.ln(), 1e-15));
        assert!(close(binary_cross_entropy(0.9, 1.0).unwrap(), 0.1054, 1e-4));
        assert!(binary_cross_entropy(1.0 - 1e-15, 1.0).unwrap() < 1e-11);
        assert!(binary_cross_entropy(1.0, 1.0).unwrap().is_finite());
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        assert!(close(softmax_cross_entropy(&[0.0, 0.0, 0.0], 2).unwrap(), 3f64.ln(), 1e-15));
        let v = softmax_cross_entropy(&[10.0, 0.0], 0).unwrap();
        assert!(close(v, (1.0 + (-10f64).exp()).ln(), 1e-15));
        assert!(close(v, 4.54e-5, 1e-7));
        let shifted = softmax_cross_entropy(&[110.0, 100.0], 0).unwrap();
        assert!(close(v, shifted, 1e-12));
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }
}
