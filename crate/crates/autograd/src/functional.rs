//! Composite layers built from the primitive operations.

use crate::Tensor;

/// Group normalization over an NCHW tensor, followed by the per-channel
/// affine map `gamma * x + beta` (`gamma`, `beta` of shape `[C]`).
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "group_norm expects NCHW");
    let (n, c) = (s[0], s[1]);
    assert!(groups >= 1 && c % groups == 0, "{c} channels not divisible into {groups} groups");
    let xg = x.reshape(&[n, groups, (c / groups) * s[2] * s[3]]);
    let mean = xg.mean_axes(&[2], true);
    let centered = xg.sub(&mean);
    let var = centered.square().mean_axes(&[2], true);
    let normed = centered.mul(&var.add_scalar(eps).powf(-0.5)).reshape(&s);
    normed
        .mul(&gamma.reshape(&[1, c, 1, 1]))
        .add(&beta.reshape(&[1, c, 1, 1]))
}

/// Standardizes a convolution kernel so every output channel has zero mean
/// and unit (population) variance.
pub fn weight_standardize(w: &Tensor, eps: f64) -> Tensor {
    let s = w.shape().to_vec();
    let o = s[0];
    let flat = w.reshape(&[o, w.numel() / o]);
    let mean = flat.mean_axes(&[1], true);
    let centered = flat.sub(&mean);
    let var = centered.square().mean_axes(&[1], true);
    centered.mul(&var.add_scalar(eps).powf(-0.5)).reshape(&s)
}

/// Elementwise binary cross-entropy `-(t ln p + (1 - t) ln(1 - p))` with the
/// prediction clamped to `[delta, 1 - delta]`.
pub fn binary_cross_entropy(pred: &Tensor, target: &Tensor, delta: f64) -> Tensor {
    let p = pred.clamp(delta, 1.0 - delta);
    let one_minus_t = target.neg().add_scalar(1.0);
    let one_minus_p = p.neg().add_scalar(1.0);
    target.mul(&p.ln()).add(&one_minus_t.mul(&one_minus_p.ln())).neg()
}
