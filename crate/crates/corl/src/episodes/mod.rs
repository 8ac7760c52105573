//! Datasets, episode sampling, and episodic evaluation.
//!
//! Classes are assigned whole to one of three splits; meta-testing never
//! sees a training class. An episode is an N-way-K-shot task: N classes,
//! K support and Q query images each, with labels remapped to `0..N` by
//! sorted original class id.

pub mod io;
pub mod synth;

use crate::error::{Error, Result};
use crate::heads::{self, Embedding};
use crate::model::CorlModel;
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

/// Which split a class belongs to. Tags match the on-disk encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub fn from_tag(tag: u8) -> Option<Split> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub name: String,
    pub split: Split,
}

/// One 8-bit image, channel-interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), h * w * channels, "pixel buffer size");
        Image { h, w, channels, pixels }
    }

    /// Scale to `[0, 1]` as an `[H, W, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.h, self.w, self.channels],
            self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )
    }

    /// Mirror along the width axis.
    pub fn flipped_horizontal(&self) -> Image {
        let mut pixels = vec![0u8; self.pixels.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.channels {
                    pixels[(y * self.w + x) * self.channels + c] =
                        self.pixels[(y * self.w + (self.w - 1 - x)) * self.channels + c];
                }
            }
        }
        Image { pixels, ..self.clone() }
    }
}

/// Labeled image collection with class-disjoint splits.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub classes: Vec<ClassInfo>,
    pub images: Vec<Image>,
    /// Class id per image, parallel to `images`.
    pub labels: Vec<usize>,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl LabeledDataset {
    pub fn new(
        classes: Vec<ClassInfo>,
        images: Vec<Image>,
        labels: Vec<usize>,
        h: usize,
        w: usize,
        channels: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        for (i, image) in images.iter().enumerate() {
            if (image.h, image.w, image.channels) != (h, w, channels) {
                return Err(Error::Input(format!(
                    "image {i} is {}x{}x{}, dataset is {h}x{w}x{channels}",
                    image.h, image.w, image.channels
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {} classes",
                classes.len()
            )));
        }
        // Classes are keyed by name; a duplicate name would let one class
        // appear in two splits.
        for (i, class) in classes.iter().enumerate() {
            if let Some(dup) = classes[..i].iter().find(|c| c.name == class.name) {
                return Err(Error::Input(format!(
                    "class '{}' appears twice (splits {:?} and {:?}); splits must be class-disjoint",
                    class.name, dup.split, class.split
                )));
            }
        }
        Ok(LabeledDataset {
            classes,
            images,
            labels,
            h,
            w,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Class ids belonging to a split, ascending.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.classes[c].split == split)
            .collect()
    }

    /// Image indices of one class, in dataset order.
    pub fn images_of(&self, class_id: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == class_id)
            .collect()
    }

    /// Image indices belonging to a split, in dataset order.
    pub fn image_indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.classes[self.labels[i]].split == split)
            .collect()
    }
}

/// One N-way-K-shot task. Episode labels are positions in `class_ids`,
/// which is sorted ascending by original class id.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub class_ids: Vec<usize>,
    /// `(image index, episode label)`, grouped by class.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Uniform episode draw: N classes without replacement from the split,
/// then K+Q distinct instances per class (first K to support).
pub fn sample_episode(
    dataset: &LabeledDataset,
    split: Split,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || queries == 0 {
        return Err(Error::Input("episode dims must be positive".into()));
    }
    let need = k_shot + queries;
    let candidates: Vec<usize> = dataset
        .classes_in(split)
        .into_iter()
        .filter(|&c| dataset.images_of(c).len() >= need)
        .collect();
    if candidates.len() < n_way {
        return Err(Error::Input(format!(
            "split {split:?} has {} classes with at least {need} images; episode needs {n_way}",
            candidates.len()
        )));
    }
    let mut class_ids: Vec<usize> = rng::sample_indices(rng, candidates.len(), n_way)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    // Labels remap by sorted original class id.
    class_ids.sort_unstable();

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * queries);
    for (label, &class_id) in class_ids.iter().enumerate() {
        let pool = dataset.images_of(class_id);
        let picks = rng::sample_indices(rng, pool.len(), need);
        for (j, &p) in picks.iter().enumerate() {
            if j < k_shot {
                support.push((pool[p], label));
            } else {
                query.push((pool[p], label));
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        queries_per_class: queries,
        class_ids,
        support,
        query,
    })
}

/// Aggregate accuracy over meta-test tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_accuracy: f64,
    /// `1.96 * stddev(task accuracies) / sqrt(task_count)`.
    pub ci95: f64,
    pub task_count: usize,
}

/// Evaluation output including the raw per-task accuracies the interval
/// was computed from.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub result: EvalResult,
    pub task_accuracies: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tasks: 200,
            n_way: 5,
            k_shot: 1,
            queries: 15,
            seed: 0,
            threads: 1,
        }
    }
}

/// Sample stddev-based 95% interval; zero for fewer than two tasks.
pub fn confidence_interval(accs: &[f64]) -> f64 {
    if accs.len() < 2 {
        return 0.0;
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    1.96 * var.sqrt() / n.sqrt()
}

fn summarize(task_accuracies: Vec<f64>) -> EvalReport {
    let mean = task_accuracies.iter().sum::<f64>() / task_accuracies.len() as f64;
    EvalReport {
        result: EvalResult {
            mean_accuracy: mean,
            ci95: confidence_interval(&task_accuracies),
            task_count: task_accuracies.len(),
        },
        task_accuracies,
    }
}

/// Evaluate frozen embeddings over `tasks` independent episodes.
///
/// Each task derives its own RNG stream from `(seed, task index)`, fits a
/// logistic head on the support set, and scores the queries. The
/// per-image embedding table is computed by the caller, so the model runs
/// once per image regardless of how many episodes reuse it.
pub fn evaluate_table(
    dataset: &LabeledDataset,
    split: Split,
    embeddings: &(dyn Fn(usize) -> Embedding + Sync),
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.tasks == 0 {
        return Err(Error::Input("evaluate: tasks must be positive".into()));
    }
    let run_task = |task: usize| -> Result<f64> {
        let mut rng = rng::stream(cfg.seed, task as u64);
        let episode = sample_episode(dataset, split, cfg.n_way, cfg.k_shot, cfg.queries, &mut rng)?;
        let support: Vec<Embedding> = episode.support.iter().map(|&(i, _)| embeddings(i)).collect();
        let labels: Vec<usize> = episode.support.iter().map(|&(_, l)| l).collect();
        let head = heads::fit_logistic(
            &support,
            &labels,
            cfg.n_way,
            heads::DEFAULT_L2_PENALTY,
            heads::DEFAULT_MAX_ITERS,
            heads::DEFAULT_TOL,
        )?;
        let correct = episode
            .query
            .iter()
            .filter(|&&(i, l)| heads::predict(&head, &embeddings(i)) == l)
            .count();
        Ok(correct as f64 / episode.query.len() as f64)
    };

    let accs = run_indexed(cfg.tasks, cfg.threads, &run_task)?;
    Ok(summarize(accs))
}

/// Evaluate a model on a split: embed every image once, then run episodes.
pub fn evaluate(
    model: &CorlModel,
    dataset: &LabeledDataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let indices = dataset.image_indices_in(split);
    let embed_one = |k: usize| -> Result<Vec<f64>> {
        model.embed(&dataset.images[indices[k]].to_tensor())
    };
    let embedded = run_indexed(indices.len(), cfg.threads, &embed_one)?;
    let mut table: Vec<Option<Embedding>> = vec![None; dataset.len()];
    for (k, &i) in indices.iter().enumerate() {
        table[i] = Some(embedded[k].clone());
    }
    evaluate_table(
        dataset,
        split,
        &move |i| table[i].clone().expect("image outside evaluated split"),
        cfg,
    )
}

/// Run `f(0..n)` on up to `threads` workers; results keep index order, so
/// the output is independent of the thread count.
fn run_indexed<T: Send>(
    n: usize,
    threads: usize,
    f: &(dyn Fn(usize) -> Result<T> + Sync),
) -> Result<Vec<T>> {
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (w, slice) in slots.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (j, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(classes_per_split: [usize; 3], images_per_class: usize) -> LabeledDataset {
        let mut classes = Vec::new();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let splits = [Split::Train, Split::Val, Split::Test];
        let mut id = 0usize;
        for (s, &count) in classes_per_split.iter().enumerate() {
            for _ in 0..count {
                classes.push(ClassInfo {
                    name: format!("class_{id:02}"),
                    split: splits[s],
                });
                for k in 0..images_per_class {
                    images.push(Image::new(4, 4, 1, vec![(id * 31 + k) as u8; 16]));
                    labels.push(id);
                }
                id += 1;
            }
        }
        LabeledDataset::new(classes, images, labels, 4, 4, 1).unwrap()
    }

    #[test]
    fn exhaustive_draw_uses_every_image_once() {
        let ds = toy_dataset([3, 0, 0], 6);
        let mut rng = rng::seeded(0);
        let ep = sample_episode(&ds, Split::Train, 3, 2, 4, &mut rng).unwrap();
        let mut seen: Vec<usize> = ep
            .support
            .iter()
            .chain(ep.query.iter())
            .map(|&(i, _)| i)
            .collect();
        seen.sort_unstable();
        let expect: Vec<usize> = (0..18).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn same_rng_state_gives_identical_episodes() {
        let ds = toy_dataset([8, 0, 5], 10);
        let a = sample_episode(&ds, Split::Test, 3, 1, 5, &mut rng::seeded(42)).unwrap();
        let b = sample_episode(&ds, Split::Test, 3, 1, 5, &mut rng::seeded(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_frequencies_match_binomial_expectation() {
        let ds = toy_dataset([20, 0, 0], 3);
        let mut rng = rng::seeded(7);
        let mut counts = vec![0usize; 20];
        let draws = 10_000;
        for _ in 0..draws {
            let ep = sample_episode(&ds, Split::Train, 5, 1, 2, &mut rng).unwrap();
            for &c in &ep.class_ids {
                counts[c] += 1;
            }
        }
        // Each class appears with p = 5/20; 3 sigma around the mean.
        let mean = draws as f64 * 0.25;
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64 - mean).abs() <= 3.0 * sigma,
                "class {c} drawn {count} times, expected {mean} ± {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn support_and_query_are_disjoint_across_seeds() {
        let ds = toy_dataset([6, 0, 0], 8);
        for seed in 0..1000 {
            let mut rng = rng::seeded(seed);
            let ep = sample_episode(&ds, Split::Train, 4, 2, 3, &mut rng).unwrap();
            for &(si, _) in &ep.support {
                assert!(!ep.query.iter().any(|&(qi, _)| qi == si), "seed {seed}");
            }
            // Labels consistent with sorted class ids in both sets.
            for &(i, l) in ep.support.iter().chain(ep.query.iter()) {
                assert_eq!(ds.labels[i], ep.class_ids[l], "seed {seed}");
            }
        }
    }

    #[test]
    fn insufficient_classes_name_the_shortfall() {
        let ds = toy_dataset([2, 0, 0], 4);
        let err = sample_episode(&ds, Split::Train, 3, 2, 2, &mut rng::seeded(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn class_with_too_few_images_is_ineligible() {
        let ds = toy_dataset([3, 0, 0], 4);
        // Needs 5 images per class, classes have 4.
        assert!(sample_episode(&ds, Split::Train, 3, 2, 3, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn perfect_per_class_embeddings_score_100() {
        let ds = toy_dataset([0, 0, 6], 8);
        let table = |i: usize| -> Embedding {
            let mut e = vec![0.0; 6];
            e[ds.labels[i]] = 1.0;
            e
        };
        let cfg = EvalConfig {
            tasks: 20,
            n_way: 3,
            k_shot: 1,
            queries: 4,
            seed: 0,
            threads: 1,
        };
        let report = evaluate_table(&ds, Split::Test, &table, &cfg).unwrap();
        assert_eq!(report.result.mean_accuracy, 1.0);
        assert_eq!(report.result.ci95, 0.0);
        assert_eq!(report.result.task_count, 20);
    }

    #[test]
    fn constant_embedding_scores_exactly_chance() {
        let ds = toy_dataset([0, 0, 8], 20);
        let table = |_: usize| -> Embedding { vec![0.5, 0.5] };
        let cfg = EvalConfig {
            tasks: 50,
            n_way: 5,
            k_shot: 1,
            queries: 15,
            seed: 1,
            threads: 1,
        };
        let report = evaluate_table(&ds, Split::Test, &table, &cfg).unwrap();
        assert!((report.result.mean_accuracy - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ci95_matches_recomputation_from_task_accuracies() {
        let ds = toy_dataset([0, 0, 8], 20);
        let mut r = rng::seeded(3);
        let noise: Vec<Embedding> = (0..ds.len())
            .map(|_| (0..4).map(|_| rng::normal(&mut r)).collect())
            .collect();
        let cfg = EvalConfig {
            tasks: 40,
            n_way: 5,
            k_shot: 1,
            queries: 15,
            seed: 2,
            threads: 1,
        };
        let report = evaluate_table(&ds, Split::Test, &|i| noise[i].clone(), &cfg).unwrap();
        let recomputed = confidence_interval(&report.task_accuracies);
        assert!((report.result.ci95 - recomputed).abs() < 1e-12);
        let mean = report.task_accuracies.iter().sum::<f64>() / 40.0;
        assert!((report.result.mean_accuracy - mean).abs() < 1e-12);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = toy_dataset([0, 0, 8], 20);
        let mut r = rng::seeded(5);
        let noise: Vec<Embedding> = (0..ds.len())
            .map(|_| (0..4).map(|_| rng::normal(&mut r)).collect())
            .collect();
        let base = EvalConfig {
            tasks: 30,
            n_way: 5,
            k_shot: 1,
            queries: 5,
            seed: 9,
            threads: 1,
        };
        let single = evaluate_table(&ds, Split::Test, &|i| noise[i].clone(), &base).unwrap();
        let multi = evaluate_table(
            &ds,
            Split::Test,
            &|i| noise[i].clone(),
            &EvalConfig { threads: 4, ..base },
        )
        .unwrap();
        assert_eq!(single.task_accuracies, multi.task_accuracies);
    }

    #[test]
    fn duplicate_class_name_is_rejected() {
        let classes = vec![
            ClassInfo { name: "a".into(), split: Split::Train },
            ClassInfo { name: "a".into(), split: Split::Test },
        ];
        let err = LabeledDataset::new(classes, vec![], vec![], 4, 4, 1).unwrap_err();
        assert!(err.to_string().contains("class-disjoint"), "{err}");
    }

    #[test]
    fn flip_mirrors_width() {
        let image = Image::new(1, 3, 2, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(image.flipped_horizontal().pixels, vec![5, 6, 3, 4, 1, 2]);
    }
}
