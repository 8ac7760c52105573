//! Classifier heads and embedding assembly.
//!
//! Training uses a two-layer fully-connected classifier on the assembled
//! embedding. At meta-test time the embedding is frozen and a multinomial
//! logistic-regression head is fit per episode.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::rng::Rng;

/// Meta-test embedding: pooled normalized attention output concatenated
/// with the pooled feature map, length `B + C`.
pub type Embedding = Vec<f64>;

/// Episodic head defaults.
pub const DEFAULT_L2_PENALTY: f64 = 1.0;
pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Assemble the classifier input from the attended tensor `[H, W, B]` and
/// the raw feature map `[H, W, C]`:
///
/// 1. L2-normalize each position's channel vector in the attended tensor,
/// 2. average-pool it spatially to a `B`-vector,
/// 3. average-pool the feature map to a `C`-vector,
/// 4. concatenate.
pub fn assemble_embedding<'t>(attended: Var<'t>, feature: Var<'t>) -> Result<Var<'t>> {
    let (ash, fsh) = (attended.shape(), feature.shape());
    if ash.len() != 3 || fsh.len() != 3 || ash[..2] != fsh[..2] {
        return Err(Error::dim(
            "assemble_embedding",
            format!("attended {ash:?} and feature {fsh:?} must share spatial dims"),
        ));
    }
    let pooled_attended = attended.normalize_channels().avg_pool_spatial();
    let pooled_feature = feature.avg_pool_spatial();
    Ok(pooled_attended.concat(&pooled_feature))
}

/// Two-layer training classifier.
#[derive(Clone, Debug)]
pub struct TrainHeadParams<T> {
    pub w_hidden: T,
    pub b_hidden: T,
    pub w_out: T,
    pub b_out: T,
}

impl<T> TrainHeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TrainHeadParams<U> {
        TrainHeadParams {
            w_hidden: f(&self.w_hidden),
            b_hidden: f(&self.b_hidden),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        f(format!("{prefix}/w_hidden"), &self.w_hidden);
        f(format!("{prefix}/b_hidden"), &self.b_hidden);
        f(format!("{prefix}/w_out"), &self.w_out);
        f(format!("{prefix}/b_out"), &self.b_out);
    }
}

pub fn init_train_head(
    input: usize,
    hidden: usize,
    classes: usize,
    rng: &mut Rng,
) -> TrainHeadParams<Tensor> {
    TrainHeadParams {
        w_hidden: Tensor::randn(&[hidden, input], (2.0 / input as f64).sqrt(), rng).trained(),
        b_hidden: Tensor::zeros(&[hidden]).trained(),
        w_out: Tensor::randn(&[classes, hidden], (2.0 / hidden as f64).sqrt(), rng).trained(),
        b_out: Tensor::zeros(&[classes]).trained(),
    }
}

/// `logits = W_out * relu(W_hidden * e + b_hidden) + b_out`.
pub fn train_head_forward<'t>(
    embedding: Var<'t>,
    params: &TrainHeadParams<Var<'t>>,
) -> Result<Var<'t>> {
    let es = embedding.shape();
    let ws = params.w_hidden.shape();
    if es.len() != 1 || ws.len() != 2 || ws[1] != es[0] {
        return Err(Error::dim(
            "train_head_forward",
            format!("embedding {es:?} vs hidden weights {ws:?}"),
        ));
    }
    let hidden = params
        .w_hidden
        .matvec(&embedding)
        .add(&params.b_hidden)
        .relu();
    Ok(params.w_out.matvec(&hidden).add(&params.b_out))
}

/// Episodic multinomial logistic-regression head.
#[derive(Clone, Debug)]
pub struct LogisticHead {
    /// `[classes, dim]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
    pub l2_penalty: f64,
}

impl LogisticHead {
    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        assert_eq!(embedding.len(), self.dim, "embedding length mismatch");
        (0..self.classes)
            .map(|k| {
                let row = &self.weights[k * self.dim..(k + 1) * self.dim];
                row.iter().zip(embedding.iter()).map(|(w, x)| w * x).sum::<f64>() + self.bias[k]
            })
            .collect()
    }
}

/// Objective: `sum_i CE(softmax(W x_i + b), y_i) + l2/2 * ||W||^2`
/// (bias unpenalized). Returns the loss and gradients.
fn logistic_objective(
    w: &[f64],
    b: &[f64],
    xs: &[Embedding],
    ys: &[usize],
    classes: usize,
    dim: usize,
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut loss = 0.0;
    let mut gw = vec![0.0; classes * dim];
    let mut gb = vec![0.0; classes];
    for (x, &y) in xs.iter().zip(ys.iter()) {
        let logits: Vec<f64> = (0..classes)
            .map(|k| {
                w[k * dim..(k + 1) * dim]
                    .iter()
                    .zip(x.iter())
                    .map(|(wv, xv)| wv * xv)
                    .sum::<f64>()
                    + b[k]
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        loss += m + sum_exp.ln() - logits[y];
        for k in 0..classes {
            let p = (logits[k] - m).exp() / sum_exp;
            let delta = p - if k == y { 1.0 } else { 0.0 };
            gb[k] += delta;
            for (g, xv) in gw[k * dim..(k + 1) * dim].iter_mut().zip(x.iter()) {
                *g += delta * xv;
            }
        }
    }
    for (g, wv) in gw.iter_mut().zip(w.iter()) {
        *g += l2 * wv;
    }
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss, gw, gb)
}

/// Fit the episodic head by full-batch gradient descent with Armijo
/// backtracking. Converges when the gradient infinity-norm drops below
/// `tol` or after `max_iters` iterations; the objective is convex, so the
/// iterates are monotone.
pub fn fit_logistic(
    support: &[Embedding],
    labels: &[usize],
    classes: usize,
    l2_penalty: f64,
    max_iters: usize,
    tol: f64,
) -> Result<LogisticHead> {
    if support.is_empty() || support.len() != labels.len() {
        return Err(Error::Input(format!(
            "fit_logistic: {} embeddings vs {} labels",
            support.len(),
            labels.len()
        )));
    }
    if classes < 2 {
        return Err(Error::Input("fit_logistic: need at least 2 classes".into()));
    }
    let dim = support[0].len();
    if dim == 0 || support.iter().any(|e| e.len() != dim) {
        return Err(Error::Input("fit_logistic: inconsistent embedding lengths".into()));
    }
    let mut seen = vec![false; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Input(format!("fit_logistic: label {y} out of range")));
        }
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Input(format!(
            "fit_logistic: class {missing} has no support example"
        )));
    }

    let mut w = vec![0.0; classes * dim];
    let mut b = vec![0.0; classes];
    let (mut loss, mut gw, mut gb) =
        logistic_objective(&w, &b, support, labels, classes, dim, l2_penalty);
    let mut step = 1.0;
    for _ in 0..max_iters {
        let grad_inf = gw
            .iter()
            .chain(gb.iter())
            .fold(0.0f64, |acc, g| acc.max(g.abs()));
        if grad_inf < tol {
            break;
        }
        let grad_sq: f64 = gw.iter().chain(gb.iter()).map(|g| g * g).sum();
        // Armijo backtracking from the last accepted step size.
        let mut t = step;
        loop {
            let wt: Vec<f64> = w.iter().zip(gw.iter()).map(|(v, g)| v - t * g).collect();
            let bt: Vec<f64> = b.iter().zip(gb.iter()).map(|(v, g)| v - t * g).collect();
            let (lt, gwt, gbt) =
                logistic_objective(&wt, &bt, support, labels, classes, dim, l2_penalty);
            if lt <= loss - 1e-4 * t * grad_sq {
                w = wt;
                b = bt;
                loss = lt;
                gw = gwt;
                gb = gbt;
                step = (t * 2.0).min(1e3);
                break;
            }
            t *= 0.5;
            if t < 1e-16 {
                // No descent possible at machine precision; we are done.
                return Ok(LogisticHead {
                    weights: w,
                    bias: b,
                    classes,
                    dim,
                    l2_penalty,
                });
            }
        }
    }
    Ok(LogisticHead {
        weights: w,
        bias: b,
        classes,
        dim,
        l2_penalty,
    })
}

/// Argmax of the head's logits; ties break to the lowest class index.
pub fn predict(head: &LogisticHead, embedding: &[f64]) -> usize {
    let logits = head.logits(embedding);
    let mut best = 0;
    for (k, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = k;
        }
    }
    best
}
