//! Channel attention: learned spatial squeeze, two-layer gating, and
//! channel re-weighting.
//!
//! The squeeze step contracts the gated tensor `O` with a learned filter
//! `R` of the same shape, one scalar per channel. A bottleneck of two
//! fully-connected layers with a sigmoid output produces per-channel gates
//! in `(0, 1)`.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    /// Learned squeeze filter, `[H, W, B]`.
    pub squeeze_filter: T,
    /// First bottleneck layer, `[B/r, B]`.
    pub w1: T,
    /// Second bottleneck layer, `[B, B/r]`.
    pub w2: T,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            squeeze_filter: f(&self.squeeze_filter),
            w1: f(&self.w1),
            w2: f(&self.w2),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        f(format!("{prefix}/squeeze_filter"), &self.squeeze_filter);
        f(format!("{prefix}/w1"), &self.w1);
        f(format!("{prefix}/w2"), &self.w2);
    }
}

/// Seeded initialization. The squeeze filter starts as `1/(H*W)` so the
/// squeeze is spatial average pooling; the bottleneck weights are small
/// Gaussians.
pub fn init(h: usize, w: usize, b: usize, ratio: usize, rng: &mut Rng) -> Result<AttentionParams<Tensor>> {
    if ratio == 0 || b % ratio != 0 {
        return Err(Error::Input(format!(
            "attention ratio {ratio} must be positive and divide the channel count {b}"
        )));
    }
    let hidden = b / ratio;
    Ok(AttentionParams {
        squeeze_filter: Tensor::full(&[h, w, b], 1.0 / (h * w) as f64).trained(),
        w1: Tensor::randn(&[hidden, b], 0.1, rng).trained(),
        w2: Tensor::randn(&[b, hidden], 0.1, rng).trained(),
    })
}

/// Squeeze the spatial extent of `O` into a per-channel summary:
/// `z_b = sum_{h,w} R_b(h,w) * O_b(h,w)`.
pub fn squeeze<'t>(gated: Var<'t>, filter: Var<'t>) -> Result<Var<'t>> {
    let (gs, fs) = (gated.shape(), filter.shape());
    if gs != fs || gs.len() != 3 {
        return Err(Error::dim(
            "squeeze",
            format!("gated {gs:?} and filter {fs:?} must share an [H,W,B] shape"),
        ));
    }
    Ok(gated.mul(&filter).sum_spatial())
}

/// Two-layer gate: `g = sigmoid(W2 * relu(W1 * z))`, strictly inside
/// `(0, 1)`.
pub fn excite<'t>(summary: Var<'t>, w1: Var<'t>, w2: Var<'t>) -> Result<Var<'t>> {
    let (zs, s1, s2) = (summary.shape(), w1.shape(), w2.shape());
    if zs.len() != 1 || s1.len() != 2 || s2.len() != 2 {
        return Err(Error::dim("excite", format!("ranks z{zs:?} w1{s1:?} w2{s2:?}")));
    }
    let b = zs[0];
    if s1[1] != b || s2[0] != b || s1[0] != s2[1] {
        return Err(Error::dim(
            "excite",
            format!("incompatible shapes z{zs:?} w1{s1:?} w2{s2:?}"),
        ));
    }
    Ok(w2.matvec(&w1.matvec(&summary).relu()).sigmoid())
}

/// Re-weight each channel by its gate: `Φ_b = g_b * O_b`.
pub fn reweight<'t>(gated: Var<'t>, gates: Var<'t>) -> Result<Var<'t>> {
    let (gs, vs) = (gated.shape(), gates.shape());
    if gs.len() != 3 || vs != [gs[2]] {
        return Err(Error::dim(
            "reweight",
            format!("gated {gs:?} needs one gate per channel, got {vs:?}"),
        ));
    }
    Ok(gated.scale_channels(&gates))
}
