//! Map dictionary: shared spatial activation patterns.
//!
//! Each channel of the component activation tensor is matched against a
//! dictionary of prototypical spatial maps by cosine similarity and gated
//! (element-wise multiplied) by the closest one. A sparse loss keeps the
//! stored maps distinct from each other.

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim_unchecked, l2_normalize, Tensor, Var, EPSILON};
use crate::rng::Rng;

/// `V` spatial patterns of shape `[H, W]`, stored as a `[V, H, W]` tensor.
/// Every item has unit Frobenius norm after each training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MapDictionary {
    items: Tensor,
}

impl MapDictionary {
    pub fn new(items: Tensor) -> Result<Self> {
        let s = items.shape();
        if s.len() != 3 || s.iter().any(|&d| d == 0) {
            return Err(Error::dim(
                "MapDictionary",
                format!("expected non-empty [V, H, W] items, got {s:?}"),
            ));
        }
        Ok(MapDictionary {
            items: normalize_items(&items),
        })
    }

    /// Seeded uniform `[0, 1)` patterns, unit-normalized.
    pub fn random_init(v: usize, h: usize, w: usize, rng: &mut Rng) -> Self {
        MapDictionary::new(Tensor::rand_uniform(&[v, h, w], rng)).unwrap()
    }

    pub fn len(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.items.shape()[1], self.items.shape()[2])
    }

    pub fn items(&self) -> &Tensor {
        &self.items
    }

    pub fn item(&self, v: usize) -> &[f64] {
        let (h, w) = self.spatial();
        &self.items.data()[v * h * w..(v + 1) * h * w]
    }

    /// Restore the unit Frobenius norm invariant after an optimizer step.
    pub fn renormalized(items: &Tensor) -> Result<Self> {
        MapDictionary::new(items.clone())
    }
}

/// Unit-normalize each `[H, W]` slice of a `[V, H, W]` tensor.
pub(crate) fn normalize_items(items: &Tensor) -> Tensor {
    let (v, h, w) = (items.shape()[0], items.shape()[1], items.shape()[2]);
    let hw = h * w;
    let mut data = Vec::with_capacity(v * hw);
    for i in 0..v {
        data.extend(l2_normalize(&items.data()[i * hw..(i + 1) * hw], EPSILON));
    }
    Tensor::new(items.shape(), data).trained()
}

/// Activation channels gated by their closest stored spatial pattern.
pub struct GatedTensor<'t> {
    /// `[H, W, B]`: `O_b = A_b ⊙ S_{v̄(b)}`.
    pub values: Var<'t>,
    /// Selected map index per channel.
    pub selected_indices: Vec<usize>,
}

/// Match each activation channel to its most similar map (argmax cosine,
/// ties to the lowest index) and gate it element-wise.
///
/// The selection is treated as a constant: gradient flows through the
/// product into the activation and the selected map only.
pub fn match_and_gate<'t>(activation: Var<'t>, maps: Var<'t>) -> Result<GatedTensor<'t>> {
    let ashape = activation.shape();
    let mshape = maps.shape();
    if ashape.len() != 3 || mshape.len() != 3 {
        return Err(Error::dim(
            "match_and_gate",
            format!("expected activation [H,W,B] and maps [V,H,W], got {ashape:?} and {mshape:?}"),
        ));
    }
    if ashape[0] != mshape[1] || ashape[1] != mshape[2] {
        return Err(Error::dim(
            "match_and_gate",
            format!(
                "activation spatial {}x{} vs map spatial {}x{}",
                ashape[0], ashape[1], mshape[1], mshape[2]
            ),
        ));
    }
    let (h, w, b) = (ashape[0], ashape[1], ashape[2]);
    let v = mshape[0];
    let a = activation.value();
    let m = maps.value();
    let hw = h * w;

    let mut selected = Vec::with_capacity(b);
    let mut channel = vec![0.0; hw];
    for c in 0..b {
        for y in 0..h {
            for x in 0..w {
                channel[y * w + x] = a.data()[(y * w + x) * b + c];
            }
        }
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for i in 0..v {
            let cos = cosine_sim_unchecked(&channel, &m.data()[i * hw..(i + 1) * hw]);
            if cos > best_cos {
                best_cos = cos;
                best = i;
            }
        }
        selected.push(best);
    }

    Ok(GatedTensor {
        values: activation.gate_channels(&maps, &selected),
        selected_indices: selected,
    })
}

/// Sparse loss `sum_v max_{v' != v} cos(S_v, S_{v'})^2`.
///
/// The self-pair is excluded; gradient flows through each row's maximizing
/// pair only. With fewer than two items the loss is 0 by definition.
pub fn sparse_loss(maps: Var<'_>) -> Result<Var<'_>> {
    let s = maps.shape();
    if s.len() != 3 {
        return Err(Error::dim(
            "sparse_loss",
            format!("expected [V, H, W] maps, got {s:?}"),
        ));
    }
    let (v, h, w) = (s[0], s[1], s[2]);
    if v < 2 {
        // No pair exists; keep the graph connected with a zero term.
        return Ok(maps.sum_all().scale(0.0));
    }
    let flat = maps.reshape(&[v, h * w]).normalize_last_axis(EPSILON);
    let gram = flat.matmul_nt(&flat);
    let squared = gram.mul(&gram);
    // Zero out the diagonal so the self-pair can never win the row max:
    // off-diagonal cos^2 is nonnegative, so the masked max is exact.
    let mask = Tensor::from_fn(&[v, v], |i| if i / v == i % v { 0.0 } else { 1.0 });
    Ok(squared.mul_const(&mask).max_last_axis().sum_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape};
    use crate::rng;

    #[test]
    fn single_map_gates_every_channel() {
        let mut r = rng::seeded(2);
        let a = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
        let m = MapDictionary::random_init(1, 2, 2, &mut r);
        let tape = Tape::new();
        let gated = match_and_gate(tape.var(a.clone()), tape.var(m.items().clone())).unwrap();
        assert_eq!(gated.selected_indices, vec![0, 0, 0]);
        let o = gated.values.value();
        for y in 0..2 {
            for x in 0..2 {
                for b in 0..3 {
                    let expect = a.at(&[y, x, b]) * m.item(0)[y * 2 + x];
                    assert!((o.at(&[y, x, b]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn self_match_squares_the_channel() {
        // Channel 0 equals map 2 exactly; other maps are orthogonal to it.
        let maps = Tensor::new(
            &[3, 1, 2],
            vec![
                1.0, 0.0, // map 0
                0.0, 1.0, // map 1
                std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, // map 2
            ],
        );
        let a = Tensor::new(
            &[1, 2, 1],
            vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
        );
        let tape = Tape::new();
        let gated = match_and_gate(tape.var(a.clone()), tape.var(maps)).unwrap();
        assert_eq!(gated.selected_indices, vec![2]);
        let o = gated.values.value();
        for i in 0..2 {
            let expect = a.data()[i] * a.data()[i];
            assert!((o.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn match_and_gate_matches_brute_force() {
        let mut r = rng::seeded(0);
        let a = Tensor::randn(&[4, 4, 6], 1.0, &mut r);
        let maps = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
        let tape = Tape::new();
        let gated = match_and_gate(tape.var(a.clone()), tape.var(maps.clone())).unwrap();
        let o = gated.values.value();
        for b in 0..6 {
            let channel: Vec<f64> = (0..16).map(|p| a.data()[p * 6 + b]).collect();
            let (mut best, mut best_cos) = (0usize, f64::NEG_INFINITY);
            for v in 0..3 {
                let cos = cosine_sim_unchecked(&channel, &maps.data()[v * 16..(v + 1) * 16]);
                if cos > best_cos {
                    best_cos = cos;
                    best = v;
                }
            }
            assert_eq!(gated.selected_indices[b], best);
            for p in 0..16 {
                let expect = channel[p] * maps.data()[best * 16 + p];
                assert!((o.data()[p * 6 + b] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_is_invariant_to_positive_channel_scaling() {
        let mut r = rng::seeded(4);
        let a = Tensor::randn(&[3, 3, 4], 1.0, &mut r);
        let maps = Tensor::randn(&[5, 3, 3], 1.0, &mut r);
        let tape = Tape::new();
        let base = match_and_gate(tape.var(a.clone()), tape.var(maps.clone())).unwrap();
        // Scale channel 1 by 7.
        let scaled = Tensor::from_fn(&[3, 3, 4], |i| {
            let v = a.data()[i];
            if i % 4 == 1 {
                v * 7.0
            } else {
                v
            }
        });
        let after = match_and_gate(tape.var(scaled), tape.var(maps)).unwrap();
        assert_eq!(base.selected_indices, after.selected_indices);
    }

    #[test]
    fn gradient_reaches_only_selected_maps() {
        let mut r = rng::seeded(6);
        let a = Tensor::randn(&[2, 2, 2], 1.0, &mut r);
        let maps = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
        let tape = Tape::new();
        let mv = tape.var(maps);
        let gated = match_and_gate(tape.var(a), mv).unwrap();
        let loss = gated.values.sum_all();
        let grads = tape.backward(loss);
        let gm = grads.wrt(mv);
        for v in 0..4 {
            let touched = gated.selected_indices.contains(&v);
            let magnitude: f64 = gm.data()[v * 4..(v + 1) * 4].iter().map(|x| x.abs()).sum();
            assert_eq!(magnitude != 0.0, touched, "map {v}");
        }
    }

    #[test]
    fn spatial_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 2, 3]));
        let m = tape.var(Tensor::zeros(&[2, 3, 3]));
        assert!(matches!(match_and_gate(a, m), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sparse_loss_of_orthogonal_maps_is_zero() {
        let maps = Tensor::new(
            &[3, 1, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let tape = Tape::new();
        assert_eq!(sparse_loss(tape.var(maps)).unwrap().scalar(), 0.0);
    }

    #[test]
    fn sparse_loss_of_identical_pair_is_two() {
        let maps = Tensor::new(&[2, 2, 1], vec![0.6, 0.8, 0.6, 0.8]);
        let tape = Tape::new();
        let loss = sparse_loss(tape.var(maps)).unwrap().scalar();
        assert!((loss - 2.0).abs() < 1e-9);
    }

    #[test]
    fn sparse_loss_matches_brute_force_pairs() {
        let mut r = rng::seeded(0);
        let maps = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
        let tape = Tape::new();
        let loss = sparse_loss(tape.var(maps.clone())).unwrap().scalar();
        let mut expect = 0.0;
        for v in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for v2 in 0..4 {
                if v2 == v {
                    continue;
                }
                let cos = cosine_sim_unchecked(
                    &maps.data()[v * 9..(v + 1) * 9],
                    &maps.data()[v2 * 9..(v2 + 1) * 9],
                );
                best = best.max(cos * cos);
            }
            expect += best;
        }
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn sparse_loss_below_two_items_is_zero() {
        let tape = Tape::new();
        let single = tape.var(Tensor::full(&[1, 2, 2], 0.5));
        assert_eq!(sparse_loss(single).unwrap().scalar(), 0.0);
    }

    #[test]
    fn sparse_loss_bounded_and_monotone_under_duplication() {
        for seed in 0..5 {
            let mut r = rng::seeded(seed);
            let v = 3 + (seed as usize % 3);
            let maps = Tensor::randn(&[v, 2, 3], 1.0, &mut r);
            let tape = Tape::new();
            let base = sparse_loss(tape.var(maps.clone())).unwrap().scalar();
            assert!(base >= 0.0 && base <= v as f64);

            // Duplicate item 0.
            let mut data = maps.to_vec();
            data.extend_from_slice(&maps.data()[..6]);
            let bigger = Tensor::new(&[v + 1, 2, 3], data);
            let grown = sparse_loss(tape.var(bigger)).unwrap().scalar();
            assert!(grown >= base - 1e-12, "duplication decreased loss");
        }
    }

    #[test]
    fn permuting_items_relabels_selection_and_preserves_losses() {
        let mut r = rng::seeded(9);
        let a = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
        let maps = Tensor::randn(&[3, 2, 2], 1.0, &mut r);
        let perm = [1usize, 2, 0];
        let pdata: Vec<f64> = perm
            .iter()
            .flat_map(|&v| maps.data()[v * 4..(v + 1) * 4].to_vec())
            .collect();
        let pmaps = Tensor::new(&[3, 2, 2], pdata);

        let tape = Tape::new();
        let base = match_and_gate(tape.var(a.clone()), tape.var(maps.clone())).unwrap();
        let permuted = match_and_gate(tape.var(a), tape.var(pmaps.clone())).unwrap();
        assert_eq!(base.values.value(), permuted.values.value());
        for (b, &sel) in permuted.selected_indices.iter().enumerate() {
            assert_eq!(perm[sel], base.selected_indices[b]);
        }

        let l = sparse_loss(tape.var(maps)).unwrap().scalar();
        let lp = sparse_loss(tape.var(pmaps)).unwrap().scalar();
        assert!((l - lp).abs() < 1e-12);
    }

    #[test]
    fn sparse_loss_gradients_pass_finite_difference_check() {
        let mut r = rng::seeded(1);
        let maps = Tensor::randn(&[4, 2, 3], 1.0, &mut r);
        let report = grad_check(|_, vars| sparse_loss(vars[0]), &[maps], 1e-5, 1e-5).unwrap();
        assert!(report.pass, "worst error {}", report.worst());
    }

    #[test]
    fn match_and_gate_gradients_pass_finite_difference_check() {
        let mut r = rng::seeded(2);
        let a = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        let maps = Tensor::randn(&[3, 2, 3], 1.0, &mut r);
        let report = grad_check(
            |_, vars| Ok(match_and_gate(vars[0], vars[1])?.values.sum_all()),
            &[a, maps],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "worst error {}", report.worst());
    }
}
