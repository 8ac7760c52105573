//! Component dictionary: shared part detectors in feature space.
//!
//! The dictionary holds unit-norm vectors that are matched against every
//! position of a feature map by cosine similarity (the component detection
//! layer). A cluster loss pulls the items toward frequently occurring
//! feature vectors, and K-means over a feature sample provides the initial
//! dictionary.

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim_unchecked, l2_normalize, Tensor, Var, EPSILON};
use crate::rng::{self, Rng};

/// `B` unit-norm vectors of length `C`, stored as a `[B, C]` tensor.
///
/// Items are re-normalized after every training step; detection normalizes
/// again defensively at forward time.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentDictionary {
    items: Tensor,
}

impl ComponentDictionary {
    pub fn new(items: Tensor) -> Result<Self> {
        if items.shape().len() != 2 || items.shape()[0] == 0 || items.shape()[1] == 0 {
            return Err(Error::dim(
                "ComponentDictionary",
                format!("expected non-empty [B, C] items, got {:?}", items.shape()),
            ));
        }
        Ok(ComponentDictionary {
            items: normalize_rows(&items),
        })
    }

    /// Random unit vectors, seeded.
    pub fn random_init(b: usize, c: usize, rng: &mut Rng) -> Self {
        ComponentDictionary::new(Tensor::randn(&[b, c], 1.0, rng)).unwrap()
    }

    pub fn len(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.shape()[1]
    }

    pub fn items(&self) -> &Tensor {
        &self.items
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let c = self.dim();
        &self.items.data()[b * c..(b + 1) * c]
    }

    /// Restore the unit-norm invariant, e.g. after an optimizer step.
    pub fn renormalized(items: &Tensor) -> Result<Self> {
        ComponentDictionary::new(items.clone())
    }
}

/// Unit-normalize each row of a `[B, C]` tensor.
pub(crate) fn normalize_rows(items: &Tensor) -> Tensor {
    let (b, c) = (items.shape()[0], items.shape()[1]);
    let mut data = Vec::with_capacity(b * c);
    for row in 0..b {
        data.extend(l2_normalize(&items.data()[row * c..(row + 1) * c], EPSILON));
    }
    Tensor::new(items.shape(), data).trained()
}

/// Component detection layer.
///
/// `A[h,w,b] = cos(f_{h,w}, d_b)`, realized as a 1x1 convolution of the
/// channel-normalized feature map with row-normalized dictionary kernels.
/// Differentiable with respect to both operands.
pub fn detect<'t>(feature: Var<'t>, dictionary: Var<'t>) -> Result<Var<'t>> {
    let fs = feature.shape();
    let ds = dictionary.shape();
    if fs.len() != 3 || ds.len() != 2 {
        return Err(Error::dim(
            "detect",
            format!("expected feature [H,W,C] and dictionary [B,C], got {fs:?} and {ds:?}"),
        ));
    }
    if fs[2] != ds[1] {
        return Err(Error::dim(
            "detect",
            format!("feature channels {} vs dictionary item length {}", fs[2], ds[1]),
        ));
    }
    let (h, w, c) = (fs[0], fs[1], fs[2]);
    let b = ds[0];
    let fn_ = feature.normalize_channels().reshape(&[h * w, c]);
    let dn = dictionary.normalize_last_axis(EPSILON);
    Ok(fn_.matmul_nt(&dn).reshape(&[h, w, b]))
}

/// Cluster loss from a precomputed activation tensor `[H, W, B]`:
/// sum over positions of `min_b (1 - A[h,w,b])`.
pub fn cluster_loss_from_activation(activation: Var<'_>) -> Var<'_> {
    activation
        .scale(-1.0)
        .add_scalar(1.0)
        .min_last_axis()
        .sum_all()
}

/// Cluster loss `sum_p min_b (1 - cos(d_b, f_p))`.
///
/// Gradient flows only through the arg-min item at each position; ties
/// break to the lowest index.
pub fn cluster_loss<'t>(feature: Var<'t>, dictionary: Var<'t>) -> Result<Var<'t>> {
    Ok(cluster_loss_from_activation(detect(feature, dictionary)?))
}

/// Non-differentiating cluster loss over a plain feature sample; used for
/// initialization diagnostics.
pub fn cluster_loss_over(dictionary: &ComponentDictionary, features: &[Vec<f64>]) -> f64 {
    features
        .iter()
        .map(|f| {
            (0..dictionary.len())
                .map(|b| 1.0 - cosine_sim_unchecked(dictionary.item(b), f))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// K-means (Lloyd's algorithm) with cosine distance on L2-normalized
/// inputs, seeded k-means++ style. Centers come out unit-normalized; an
/// empty cluster is re-seeded from the point farthest from its assigned
/// center.
pub fn kmeans_init(
    features: &[Vec<f64>],
    b: usize,
    iters: usize,
    rng_seed: u64,
) -> Result<ComponentDictionary> {
    if b == 0 {
        return Err(Error::Input("kmeans_init: B must be positive".into()));
    }
    if features.len() < b {
        return Err(Error::Input(format!(
            "kmeans_init: need at least {b} feature vectors, got {}",
            features.len()
        )));
    }
    let c = features[0].len();
    if c == 0 || features.iter().any(|f| f.len() != c) {
        return Err(Error::Input("kmeans_init: inconsistent feature lengths".into()));
    }
    let mut rng = rng::seeded(rng_seed);
    let points: Vec<Vec<f64>> = features.iter().map(|f| l2_normalize(f, EPSILON)).collect();
    let n = points.len();

    // Cosine distance between unit vectors reduces to 1 - dot.
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        1.0 - a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
    };

    // k-means++ seeding: first center uniform, then proportional to the
    // squared distance to the nearest chosen center. When every candidate
    // weight is zero (duplicate inputs), fall back to a uniform pick.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(b);
    centers.push(points[rng::below(&mut rng, n)].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| dist(p, &centers[0])).collect();
    while centers.len() < b {
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng::uniform(&mut rng) * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng::below(&mut rng, n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(p, centers.last().unwrap()));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..iters.max(1) {
        // Assignment step; ties break to the lowest center index.
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist(p, &centers[0]);
            for (k, center) in centers.iter().enumerate().skip(1) {
                let d = dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Update step: normalized means; re-seed empty clusters from the
        // farthest point.
        let mut sums = vec![vec![0.0; c]; b];
        let mut counts = vec![0usize; b];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for k in 0..b {
            if counts[k] == 0 {
                let farthest = (0..n)
                    .max_by(|&i, &j| {
                        let di = dist(&points[i], &centers[assignment[i]]);
                        let dj = dist(&points[j], &centers[assignment[j]]);
                        di.partial_cmp(&dj).unwrap()
                    })
                    .unwrap();
                centers[k] = points[farthest].clone();
                continue;
            }
            let mean = l2_normalize(&sums[k], EPSILON);
            // A mean that cancels to zero keeps the previous center.
            if mean.iter().any(|&v| v != 0.0) {
                centers[k] = mean;
            }
        }
    }

    let data: Vec<f64> = centers.into_iter().flatten().collect();
    ComponentDictionary::new(Tensor::new(&[b, c], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape};

    fn detect_value(feature: &Tensor, dict: &Tensor) -> Tensor {
        let tape = Tape::new();
        detect(tape.var(feature.clone()), tape.var(dict.clone()))
            .unwrap()
            .value()
    }

    #[test]
    fn detect_self_similarity_is_one() {
        // Position (0,1) holds dictionary item 3 exactly.
        let mut rng = rng::seeded(5);
        let dict = ComponentDictionary::random_init(4, 6, &mut rng);
        let mut fdata = Tensor::randn(&[1, 2, 6], 1.0, &mut rng).to_vec();
        fdata[6..12].copy_from_slice(dict.item(3));
        let a = detect_value(&Tensor::new(&[1, 2, 6], fdata), dict.items());
        assert!((a.at(&[0, 1, 3]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn detect_orthogonal_feature_gives_zero_row() {
        // Dictionary spans the first two axes; the feature lives on the third.
        let dict = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let feature = Tensor::new(&[1, 1, 3], vec![0.0, 0.0, 2.0]);
        let a = detect_value(&feature, &dict);
        assert_eq!(a.data(), &[0.0, 0.0]);
    }

    #[test]
    fn detect_matches_position_wise_cosine_oracle() {
        let mut rng = rng::seeded(0);
        let feature = Tensor::randn(&[2, 2, 4], 1.0, &mut rng);
        let dict = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let a = detect_value(&feature, &dict);
        for h in 0..2 {
            for w in 0..2 {
                let f: Vec<f64> = (0..4).map(|c| feature.at(&[h, w, c])).collect();
                for b in 0..3 {
                    let d = &dict.data()[b * 4..(b + 1) * 4];
                    let expect = cosine_sim_unchecked(&f, d);
                    assert!((a.at(&[h, w, b]) - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn detect_output_stays_in_cosine_range() {
        for seed in 0..10 {
            let mut rng = rng::seeded(seed);
            let feature = Tensor::randn(&[3, 3, 5], 2.0, &mut rng);
            let dict = Tensor::randn(&[4, 5], 3.0, &mut rng);
            let a = detect_value(&feature, &dict);
            assert!(a.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn detect_channel_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let f = tape.var(Tensor::zeros(&[2, 2, 4]));
        let d = tape.var(Tensor::zeros(&[3, 5]));
        assert!(matches!(detect(f, d), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cluster_loss_zero_when_features_equal_items() {
        let mut rng = rng::seeded(1);
        let dict = ComponentDictionary::random_init(3, 4, &mut rng);
        let mut fdata = Vec::new();
        for b in [0usize, 2, 1, 0] {
            fdata.extend_from_slice(dict.item(b));
        }
        let tape = Tape::new();
        let loss = cluster_loss(
            tape.var(Tensor::new(&[2, 2, 4], fdata)),
            tape.var(dict.items().clone()),
        )
        .unwrap();
        assert!(loss.scalar().abs() < 1e-9);
    }

    #[test]
    fn cluster_loss_two_position_analytic() {
        // f1 = (1,0) matches the single item exactly, f2 = (0,1) is orthogonal.
        let tape = Tape::new();
        let f = tape.var(Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let d = tape.var(Tensor::new(&[1, 2], vec![1.0, 0.0]));
        let loss = cluster_loss(f, d).unwrap();
        assert!((loss.scalar() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cluster_loss_matches_brute_force() {
        let mut rng = rng::seeded(0);
        let feature = Tensor::randn(&[3, 3, 8], 1.0, &mut rng);
        let dict = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let loss = cluster_loss(tape.var(feature.clone()), tape.var(dict.clone()))
            .unwrap()
            .scalar();
        let mut expect = 0.0;
        for h in 0..3 {
            for w in 0..3 {
                let f: Vec<f64> = (0..8).map(|c| feature.at(&[h, w, c])).collect();
                expect += (0..4)
                    .map(|b| 1.0 - cosine_sim_unchecked(&dict.data()[b * 8..(b + 1) * 8], &f))
                    .fold(f64::INFINITY, f64::min);
            }
        }
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn cluster_gradient_only_reaches_argmin_items() {
        // One feature position far from item 1: item 1 must get zero gradient.
        let tape = Tape::new();
        let f = tape.var(Tensor::new(&[1, 1, 2], vec![0.9, 0.1]));
        let d = tape.var(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let loss = cluster_loss(f, d).unwrap();
        let grads = tape.backward(loss);
        let gd = grads.wrt(d);
        assert!(gd.data()[..2].iter().any(|&v| v != 0.0));
        assert!(gd.data()[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_items_permutes_channels_and_preserves_loss() {
        let mut rng = rng::seeded(7);
        let feature = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let dict = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let perm = [2usize, 0, 1];
        let pdata: Vec<f64> = perm
            .iter()
            .flat_map(|&b| dict.data()[b * 4..(b + 1) * 4].to_vec())
            .collect();
        let pdict = Tensor::new(&[3, 4], pdata);

        let a = detect_value(&feature, &dict);
        let pa = detect_value(&feature, &pdict);
        for h in 0..2 {
            for w in 0..3 {
                for (new_b, &old_b) in perm.iter().enumerate() {
                    assert_eq!(pa.at(&[h, w, new_b]), a.at(&[h, w, old_b]));
                }
            }
        }

        let tape = Tape::new();
        let l = cluster_loss(tape.var(feature.clone()), tape.var(dict)).unwrap().scalar();
        let lp = cluster_loss(tape.var(feature), tape.var(pdict)).unwrap().scalar();
        assert!((l - lp).abs() < 1e-12);
    }

    #[test]
    fn cluster_loss_gradients_pass_finite_difference_check() {
        let mut rng = rng::seeded(3);
        let feature = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
        let dict = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let report = grad_check(
            |_, vars| cluster_loss(vars[0], vars[1]),
            &[feature, dict],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "worst error {}", report.worst());
    }

    #[test]
    fn kmeans_with_exactly_b_distinct_points_returns_them() {
        let points = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let dict = kmeans_init(&points, 3, 10, 0).unwrap();
        // Centers are a permutation of the inputs.
        for p in &points {
            let hit = (0..3).any(|b| {
                dict.item(b)
                    .iter()
                    .zip(p.iter())
                    .all(|(a, b)| (a - b).abs() < 1e-12)
            });
            assert!(hit, "input {p:?} missing from centers");
        }
    }

    #[test]
    fn kmeans_with_identical_points_collapses_and_clusters_perfectly() {
        let points = vec![vec![0.6, 0.8]; 10];
        let dict = kmeans_init(&points, 3, 10, 0).unwrap();
        for b in 0..3 {
            assert!((dict.item(b)[0] - 0.6).abs() < 1e-12);
            assert!((dict.item(b)[1] - 0.8).abs() < 1e-12);
        }
        assert!(cluster_loss_over(&dict, &points) < 1e-12);
    }

    #[test]
    fn kmeans_beats_random_init_on_separated_blobs() {
        let mut rng = rng::seeded(0);
        let mut points = Vec::new();
        for i in 0..100 {
            let center: &[f64] = if i < 50 { &[1.0, 0.0, 0.0, 0.0] } else { &[0.0, 0.0, 1.0, 0.0] };
            let p: Vec<f64> = center
                .iter()
                .map(|&c| c + 0.05 * rng::normal(&mut rng))
                .collect();
            points.push(l2_normalize(&p, EPSILON));
        }
        let dict = kmeans_init(&points, 2, 20, 0).unwrap();
        let kmeans_cost = cluster_loss_over(&dict, &points) / points.len() as f64;
        let mut random_costs = Vec::new();
        for seed in 0..10 {
            let mut r = rng::seeded(100 + seed);
            let random = ComponentDictionary::random_init(2, 4, &mut r);
            random_costs.push(cluster_loss_over(&random, &points) / points.len() as f64);
        }
        let random_mean = random_costs.iter().sum::<f64>() / random_costs.len() as f64;
        assert!(
            kmeans_cost <= random_mean,
            "kmeans {kmeans_cost} vs random mean {random_mean}"
        );
    }

    #[test]
    fn kmeans_with_too_few_points_is_input_error() {
        let points = vec![vec![1.0, 0.0]];
        assert!(matches!(
            kmeans_init(&points, 2, 5, 0),
            Err(Error::Input(_))
        ));
    }
}
