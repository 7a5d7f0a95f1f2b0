//! Primal, tangent and adjoint rules for every supported primitive.

use crate::error::{structural, Result};
use crate::tensor::Tensor;

use super::graph::Activation;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn bias_len(bias: &Tensor) -> usize {
    bias.numel()
}

/// `a (m×n)` plus `bias (n)` on every row.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if bias_len(bias) != n || bias.ndim() > 2 || (bias.ndim() == 2 && bias.shape()[0] != 1) {
        return Err(structural!(
            "bias of shape {:?} does not fit rows of {:?}",
            bias.shape(),
            a.shape()
        ));
    }
    let mut out = a.clone();
    let b = bias.data();
    for i in 0..m {
        for (o, &bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Column sums of a matrix, reshaped like `bias`.
pub fn bias_adjoint(adj: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = adj.dims2()?;
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(&adj.data()[i * n..(i + 1) * n]) {
            *o += v;
        }
    }
    Tensor::new(bias.shape().to_vec(), out)
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Tanh => x.map(f64::tanh),
        Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Gelu => x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())),
    }
}

/// Elementwise derivative of the activation at `x` (with `y = act(x)`).
pub fn activation_derivative(x: &Tensor, y: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Tanh => y.map(|t| 1.0 - t * t),
        Activation::Relu => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Activation::Gelu => x.map(|v| {
            let u = GELU_C * (v + GELU_K * v * v * v);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
        }),
    }
}

/// Mean softmax cross-entropy; returns the loss and the row-wise softmax.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(structural!(
            "{} labels for {} rows of logits",
            labels.len(),
            b
        ));
    }
    if b == 0 {
        return Err(structural!("empty batch"));
    }
    let mut probs = vec![0.0; b * c];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(structural!("label {} out of range for {} classes", y, c));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &l) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in &mut probs[i * c..(i + 1) * c] {
            *p /= z;
        }
        total += max + z.ln() - row[y];
    }
    Ok((total / b as f64, Tensor::new(vec![b, c], probs)?))
}

/// Directional derivative of the mean cross-entropy along `dlogits`.
pub fn softmax_cross_entropy_tangent(probs: &Tensor, labels: &[usize], dlogits: &Tensor) -> Result<f64> {
    probs.ensure_same_shape(dlogits, "cross-entropy tangent")?;
    let (b, c) = probs.dims2()?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = &probs.data()[i * c..(i + 1) * c];
        let d = &dlogits.data()[i * c..(i + 1) * c];
        let expect = p.iter().zip(d).fold(0.0, |acc, (&pv, &dv)| acc + pv * dv);
        total += expect - d[y];
    }
    Ok(total / b as f64)
}

/// Adjoint of the logits given the adjoint `seed` of the scalar loss.
pub fn softmax_cross_entropy_adjoint(probs: &Tensor, labels: &[usize], seed: f64) -> Result<Tensor> {
    let (b, c) = probs.dims2()?;
    let scale = seed / b as f64;
    let mut out = probs.scale(scale);
    for (i, &y) in labels.iter().enumerate() {
        out.data_mut()[i * c + y] -= scale;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::zeros(&[3, 4]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn label_out_of_range_is_structural() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let xs = Tensor::from_vec(vec![-1.7, -0.3, 0.2, 0.9, 2.5]);
        let h = 1e-6;
        for kind in [Activation::Tanh, Activation::Relu, Activation::Gelu] {
            let y = activation(&xs, kind);
            let d = activation_derivative(&xs, &y, kind);
            let plus = activation(&xs.map(|v| v + h), kind);
            let minus = activation(&xs.map(|v| v - h), kind);
            for i in 0..xs.numel() {
                let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
                assert!((fd - d.data()[i]).abs() < 1e-8, "{:?} at {}", kind, i);
            }
        }
    }

    #[test]
    fn bias_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(add_bias(&a, &Tensor::zeros(&[2])).is_err());
        let out = add_bias(&a, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[1., 2., 3., 1., 2., 3.]);
        let adj = bias_adjoint(&out, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(adj.data(), &[2., 4., 6.]);
    }
}
