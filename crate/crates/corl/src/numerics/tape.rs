//! Reverse-mode differentiation on a single-threaded tape.
//!
//! Operations on [`Var`] record their values and backward rules in creation
//! order. [`Tape::backward`] replays the records in reverse, accumulating
//! gradients by node index. Tapes live for one forward/backward pass; they
//! are not shared across threads.

use std::cell::RefCell;

use super::tensor::Tensor;
use super::EPSILON;

type SinkFn<'s> = dyn FnMut(usize, Tensor) + 's;
type BackFn = Box<dyn Fn(&Tensor, &mut SinkFn)>;

struct Node {
    value: Tensor,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Zero-padding policy for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial dims are `ceil(in / stride)`; pads asymmetrically
    /// (extra on the bottom/right) when needed.
    Same,
    /// No padding; output dims are `(in - k) / stride + 1`.
    Valid,
}

impl Padding {
    /// `(out_dim, pad_before)` for one spatial axis.
    pub fn resolve(self, input: usize, kernel: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                (out, total / 2)
            }
            Padding::Valid => {
                assert!(input >= kernel, "valid padding: input {input} < kernel {kernel}");
                ((input - kernel) / stride + 1, 0)
            }
        }
    }
}

/// Gradients of one backward pass, indexed by tape position.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or zeros if `v` did not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Record a leaf value.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, None)
    }

    fn push(&self, value: Tensor, backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(self, root.tape), "root from another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.idx].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(Tensor::full(nodes[root.idx].value.shape(), 1.0));
        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].clone() else { continue };
            if let Some(back) = &nodes[i].backward {
                back(&g, &mut |parent, contrib| {
                    debug_assert!(parent < i, "backward edge must point earlier");
                    match &mut grads[parent] {
                        Some(acc) => *acc = acc.add(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>, op: &str) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "{op}: operands from different tapes"
        );
    }

    // ── element-wise ────────────────────────────────────────────────

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other, "add");
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.add(&b);
        let (pa, pb) = (self.idx, other.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(pa, g.clone());
                sink(pb, g.clone());
            })),
        )
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other, "sub");
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape(), data);
        let (pa, pb) = (self.idx, other.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(pa, g.clone());
                sink(pb, g.map(|v| -v));
            })),
        )
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other, "mul");
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape(), data);
        let (pa, pb) = (self.idx, other.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = g.data().iter().zip(b.data().iter()).map(|(gv, bv)| gv * bv).collect();
                let db = g.data().iter().zip(a.data().iter()).map(|(gv, av)| gv * av).collect();
                sink(pa, Tensor::new(g.shape(), da));
                sink(pb, Tensor::new(g.shape(), db));
            })),
        )
    }

    /// Element-wise product with a constant (no gradient into the constant).
    pub fn mul_const(&self, c: &Tensor) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "mul_const shape mismatch");
        let data = a.data().iter().zip(c.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape(), data);
        let pa = self.idx;
        let c = c.clone();
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = g.data().iter().zip(c.data().iter()).map(|(gv, cv)| gv * cv).collect();
                sink(pa, Tensor::new(g.shape(), da));
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        let pa = self.idx;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| sink(pa, g.map(|v| v * c)))),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        let pa = self.idx;
        self.tape
            .push(out, Some(Box::new(move |g, sink| sink(pa, g.clone()))))
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        let pa = self.idx;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                // Subgradient 0 at exactly 0.
                let d = g
                    .data()
                    .iter()
                    .zip(x.data().iter())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                sink(pa, Tensor::new(g.shape(), d));
            })),
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let x = self.value();
        let out = x.map(stable_sigmoid);
        let y = out.clone();
        let pa = self.idx;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data().iter())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                sink(pa, Tensor::new(g.shape(), d));
            })),
        )
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other, "matmul");
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a.data()[i * k + l];
                for j in 0..n {
                    out[i * n + j] += av * b.data()[l * n + j];
                }
            }
        }
        let (pa, pb) = (self.idx, other.idx);
        self.tape.push(
            Tensor::new(&[m, n], out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        for l in 0..k {
                            da[i * k + l] += gv * b.data()[l * n + j];
                            db[l * n + j] += gv * a.data()[i * k + l];
                        }
                    }
                }
                sink(pa, Tensor::new(&[m, k], da));
                sink(pb, Tensor::new(&[k, n], db));
            })),
        )
    }

    /// `[m,k] x [n,k]^T -> [m,n]`: rows of `other` act as kernels.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other, "matmul_nt");
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (n, k2) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.data()[i * k + l] * b.data()[j * k + l];
                }
                out[i * n + j] = acc;
            }
        }
        let (pa, pb) = (self.idx, other.idx);
        self.tape.push(
            Tensor::new(&[m, n], out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        for l in 0..k {
                            da[i * k + l] += gv * b.data()[j * k + l];
                            db[j * k + l] += gv * a.data()[i * k + l];
                        }
                    }
                }
                sink(pa, Tensor::new(&[m, k], da));
                sink(pb, Tensor::new(&[n, k], db));
            })),
        )
    }

    /// `[m,k] x [k] -> [m]`.
    pub fn matvec(&self, v: &Var<'t>) -> Var<'t> {
        self.same_tape(v, "matvec");
        let (a, x) = (self.value(), v.value());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(x.shape(), &[k], "matvec dims");
        let out: Vec<f64> = (0..m)
            .map(|i| (0..k).map(|l| a.data()[i * k + l] * x.data()[l]).sum())
            .collect();
        let (pa, pv) = (self.idx, v.idx);
        self.tape.push(
            Tensor::new(&[m], out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; m * k];
                let mut dx = vec![0.0; k];
                for i in 0..m {
                    let gv = g.data()[i];
                    for l in 0..k {
                        da[i * k + l] += gv * x.data()[l];
                        dx[l] += gv * a.data()[i * k + l];
                    }
                }
                sink(pa, Tensor::new(&[m, k], da));
                sink(pv, Tensor::new(&[k], dx));
            })),
        )
    }

    /// 2-D convolution over a channels-last input.
    ///
    /// `self`: `[H, W, Cin]`, `kernel`: `[kh, kw, Cin, Cout]`.
    pub fn conv2d(&self, kernel: &Var<'t>, stride: usize, padding: Padding) -> Var<'t> {
        self.same_tape(kernel, "conv2d");
        let (x, k) = (self.value(), kernel.value());
        assert_eq!(x.shape().len(), 3, "conv2d input must be [H,W,C]");
        assert_eq!(k.shape().len(), 4, "conv2d kernel must be [kh,kw,Cin,Cout]");
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, kcin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        assert_eq!(cin, kcin, "conv2d channel mismatch {cin} vs {kcin}");
        let (ho, pad_h) = padding.resolve(h, kh, stride);
        let (wo, pad_w) = padding.resolve(w, kw, stride);

        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let ix = (ox * stride + dx) as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xb = ((iy as usize * w) + ix as usize) * cin;
                        let kb = ((dy * kw) + dx) * cin * cout;
                        let ob = ((oy * wo) + ox) * cout;
                        for ci in 0..cin {
                            let xv = x.data()[xb + ci];
                            let krow = kb + ci * cout;
                            for co in 0..cout {
                                out[ob + co] += xv * k.data()[krow + co];
                            }
                        }
                    }
                }
            }
        }
        let (px, pk) = (self.idx, kernel.idx);
        self.tape.push(
            Tensor::new(&[ho, wo, cout], out),
            Some(Box::new(move |g, sink| {
                let mut dx_acc = vec![0.0; h * w * cin];
                let mut dk_acc = vec![0.0; kh * kw * cin * cout];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ob = ((oy * wo) + ox) * cout;
                        for dy in 0..kh {
                            let iy = (oy * stride + dy) as isize - pad_h as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = (ox * stride + dx) as isize - pad_w as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xb = ((iy as usize * w) + ix as usize) * cin;
                                let kb = ((dy * kw) + dx) * cin * cout;
                                for ci in 0..cin {
                                    let xv = x.data()[xb + ci];
                                    let krow = kb + ci * cout;
                                    let mut dxv = 0.0;
                                    for co in 0..cout {
                                        let gv = g.data()[ob + co];
                                        dxv += gv * k.data()[krow + co];
                                        dk_acc[krow + co] += gv * xv;
                                    }
                                    dx_acc[xb + ci] += dxv;
                                }
                            }
                        }
                    }
                }
                sink(px, Tensor::new(&[h, w, cin], dx_acc));
                sink(pk, Tensor::new(&[kh, kw, cin, cout], dk_acc));
            })),
        )
    }

    /// Broadcast-add a `[C]` bias over the last axis of `[H, W, C]`.
    pub fn add_channel_bias(&self, bias: &Var<'t>) -> Var<'t> {
        self.same_tape(bias, "add_channel_bias");
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().expect("add_channel_bias on scalar");
        assert_eq!(b.shape(), &[c], "bias length mismatch");
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % c])
            .collect();
        let out = Tensor::new(x.shape(), data);
        let (px, pb) = (self.idx, bias.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut db = vec![0.0; c];
                for (i, gv) in g.data().iter().enumerate() {
                    db[i % c] += gv;
                }
                sink(px, g.clone());
                sink(pb, Tensor::new(&[c], db));
            })),
        )
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Var<'t> {
        let x = self.value();
        let total: f64 = x.data().iter().sum();
        let n = x.len();
        let shape = x.shape().to_vec();
        let pa = self.idx;
        self.tape.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, sink| {
                let gv = g.item();
                sink(pa, Tensor::new(&shape, vec![gv; n]));
            })),
        )
    }

    /// Sum over the two spatial axes of `[H, W, C]`, leaving `[C]`.
    pub fn sum_spatial(&self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "sum_spatial expects [H,W,C]");
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            out[i % c] += v;
        }
        let pa = self.idx;
        self.tape.push(
            Tensor::new(&[c], out),
            Some(Box::new(move |g, sink| {
                let mut dx = vec![0.0; h * w * c];
                for (i, slot) in dx.iter_mut().enumerate() {
                    *slot = g.data()[i % c];
                }
                sink(pa, Tensor::new(&[h, w, c], dx));
            })),
        )
    }

    /// Spatial average pooling: `[H, W, C] -> [C]`.
    pub fn avg_pool_spatial(&self) -> Var<'t> {
        let shape = self.shape();
        let hw = (shape[0] * shape[1]) as f64;
        self.sum_spatial().scale(1.0 / hw)
    }

    fn reduce_last_axis(&self, take_max: bool) -> Var<'t> {
        let x = self.value();
        assert!(!x.shape().is_empty(), "reduce on scalar");
        let n = *x.shape().last().unwrap();
        assert!(n > 0);
        let slices = x.len() / n;
        let out_shape: Vec<usize> = x.shape()[..x.shape().len() - 1].to_vec();
        let mut out = vec![0.0; slices];
        let mut selected = vec![0usize; slices];
        for s in 0..slices {
            let base = s * n;
            let (mut best, mut best_i) = (x.data()[base], 0usize);
            for i in 1..n {
                let v = x.data()[base + i];
                // Strict comparison keeps the lowest index on ties.
                if (take_max && v > best) || (!take_max && v < best) {
                    best = v;
                    best_i = i;
                }
            }
            out[s] = best;
            selected[s] = best_i;
        }
        let in_shape = x.shape().to_vec();
        let pa = self.idx;
        self.tape.push(
            Tensor::new(&out_shape, out),
            Some(Box::new(move |g, sink| {
                // Gradient routes only through the selected element per slice.
                let mut dx = vec![0.0; slices * n];
                for s in 0..slices {
                    dx[s * n + selected[s]] = g.data()[s];
                }
                sink(pa, Tensor::new(&in_shape, dx));
            })),
        )
    }

    /// Minimum over the last axis; ties break to the lowest index.
    pub fn min_last_axis(&self) -> Var<'t> {
        self.reduce_last_axis(false)
    }

    /// Maximum over the last axis; ties break to the lowest index.
    pub fn max_last_axis(&self) -> Var<'t> {
        self.reduce_last_axis(true)
    }

    // ── normalization, losses, shaping ──────────────────────────────

    /// L2-normalize each slice along the last axis:
    /// `v -> v / max(‖v‖, eps)`.
    pub fn normalize_last_axis(&self, eps: f64) -> Var<'t> {
        assert!(eps > 0.0, "normalize_last_axis: eps must be positive");
        let x = self.value();
        assert!(!x.shape().is_empty(), "normalize on scalar");
        let n = *x.shape().last().unwrap();
        let slices = x.len() / n;
        let mut out = vec![0.0; x.len()];
        let mut norms = vec![0.0; slices];
        for s in 0..slices {
            let base = s * n;
            let norm: f64 = x.data()[base..base + n].iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[s] = norm;
            let denom = norm.max(eps);
            for i in 0..n {
                out[base + i] = x.data()[base + i] / denom;
            }
        }
        let y = Tensor::new(x.shape(), out);
        let y_back = y.clone();
        let in_shape = x.shape().to_vec();
        let pa = self.idx;
        self.tape.push(
            y,
            Some(Box::new(move |g, sink| {
                let mut dx = vec![0.0; slices * n];
                for s in 0..slices {
                    let base = s * n;
                    if norms[s] > eps {
                        // d(v/‖v‖) = (g - y⟨y,g⟩) / ‖v‖
                        let dot: f64 = (0..n)
                            .map(|i| y_back.data()[base + i] * g.data()[base + i])
                            .sum();
                        for i in 0..n {
                            dx[base + i] =
                                (g.data()[base + i] - y_back.data()[base + i] * dot) / norms[s];
                        }
                    } else {
                        // Below the guard the map is exactly v/eps.
                        for i in 0..n {
                            dx[base + i] = g.data()[base + i] / eps;
                        }
                    }
                }
                sink(pa, Tensor::new(&in_shape, dx));
            })),
        )
    }

    /// Cross-entropy of a logit vector against a class index, with a
    /// numerically stable log-sum-exp.
    pub fn softmax_cross_entropy(&self, label: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape().len(), 1, "softmax_cross_entropy expects a vector");
        let n = x.len();
        assert!(label < n, "label {label} out of range for {n} classes");
        let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = x.data().iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let loss = lse - x.data()[label];
        let softmax: Vec<f64> = x.data().iter().map(|v| (v - m).exp() / sum_exp).collect();
        let pa = self.idx;
        self.tape.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g, sink| {
                let gv = g.item();
                let d = softmax
                    .iter()
                    .enumerate()
                    .map(|(i, p)| gv * (p - if i == label { 1.0 } else { 0.0 }))
                    .collect();
                sink(pa, Tensor::new(&[n], d));
            })),
        )
    }

    /// Concatenate two vectors.
    pub fn concat(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other, "concat");
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 1, "concat expects vectors");
        assert_eq!(b.shape().len(), 1, "concat expects vectors");
        let (m, n) = (a.len(), b.len());
        let mut data = a.to_vec();
        data.extend_from_slice(b.data());
        let (pa, pb) = (self.idx, other.idx);
        self.tape.push(
            Tensor::new(&[m + n], data),
            Some(Box::new(move |g, sink| {
                sink(pa, Tensor::new(&[m], g.data()[..m].to_vec()));
                sink(pb, Tensor::new(&[n], g.data()[m..].to_vec()));
            })),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = x.reshaped(shape);
        let pa = self.idx;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| sink(pa, g.reshaped(&in_shape)))),
        )
    }

    /// Multiply each channel of `[H, W, B]` by the matching entry of `[B]`.
    pub fn scale_channels(&self, gates: &Var<'t>) -> Var<'t> {
        self.same_tape(gates, "scale_channels");
        let (x, g) = (self.value(), gates.value());
        assert_eq!(x.shape().len(), 3, "scale_channels expects [H,W,B]");
        let b = x.shape()[2];
        assert_eq!(g.shape(), &[b], "gate length mismatch");
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * g.data()[i % b])
            .collect();
        let out = Tensor::new(x.shape(), data);
        let shape = x.shape().to_vec();
        let (px, pg) = (self.idx, gates.idx);
        self.tape.push(
            out,
            Some(Box::new(move |gr, sink| {
                let mut dx = vec![0.0; x.len()];
                let mut dg = vec![0.0; b];
                for (i, gv) in gr.data().iter().enumerate() {
                    dx[i] = gv * g.data()[i % b];
                    dg[i % b] += gv * x.data()[i];
                }
                sink(px, Tensor::new(&shape, dx));
                sink(pg, Tensor::new(&[b], dg));
            })),
        )
    }

    /// Gate each channel of `[H, W, B]` by one selected map from `[V, H, W]`:
    /// `out[h,w,b] = self[h,w,b] * maps[indices[b],h,w]`.
    ///
    /// The selection is a constant; gradient flows through the product into
    /// both operands, touching only the selected maps.
    pub fn gate_channels(&self, maps: &Var<'t>, indices: &[usize]) -> Var<'t> {
        self.same_tape(maps, "gate_channels");
        let (a, s) = (self.value(), maps.value());
        assert_eq!(a.shape().len(), 3, "gate_channels expects [H,W,B]");
        assert_eq!(s.shape().len(), 3, "gate_channels maps expect [V,H,W]");
        let (h, w, b) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (v, sh, sw) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        assert_eq!((h, w), (sh, sw), "gate_channels spatial mismatch");
        assert_eq!(indices.len(), b, "one selected map per channel");
        assert!(indices.iter().all(|&i| i < v), "map index out of range");

        let mut out = vec![0.0; h * w * b];
        for y in 0..h {
            for x in 0..w {
                for c in 0..b {
                    out[(y * w + x) * b + c] =
                        a.data()[(y * w + x) * b + c] * s.data()[(indices[c] * h + y) * w + x];
                }
            }
        }
        let idx: Vec<usize> = indices.to_vec();
        let (pa, ps) = (self.idx, maps.idx);
        self.tape.push(
            Tensor::new(&[h, w, b], out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; h * w * b];
                let mut ds = vec![0.0; v * h * w];
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..b {
                            let gi = (y * w + x) * b + c;
                            let si = (idx[c] * h + y) * w + x;
                            da[gi] = g.data()[gi] * s.data()[si];
                            ds[si] += g.data()[gi] * a.data()[gi];
                        }
                    }
                }
                sink(pa, Tensor::new(&[h, w, b], da));
                sink(ps, Tensor::new(&[v, h, w], ds));
            })),
        )
    }

    /// Channel-wise L2 normalization with the crate-wide norm guard.
    pub fn normalize_channels(&self) -> Var<'t> {
        self.normalize_last_axis(EPSILON)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
