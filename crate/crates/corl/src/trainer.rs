//! End-to-end meta-training.
//!
//! One optimizer thread runs shuffled mini-batches of the combined
//! meta-training set. The objective is the classification cross-entropy
//! plus the cluster and sparse regularizers; parameters update by SGD with
//! momentum, weight decay, and a cosine-annealed learning rate. Dictionary
//! items are norm-constrained: they skip weight decay and are re-normalized
//! after every step.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::compdict;
use crate::episodes::{self, EvalConfig, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::mapdict;
use crate::model::{Ablation, CorlModel, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Cluster-loss coefficient.
    pub gamma1: f64,
    /// Sparse-loss coefficient.
    pub gamma2: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; batch size 64 is the full-scale setting.
    fn default() -> Self {
        TrainConfig {
            gamma1: 1.0,
            gamma2: 0.5,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 {
            return Err(Error::Input("gamma1 must be nonnegative".into()));
        }
        if self.gamma2 < 0.0 {
            return Err(Error::Input("gamma2 must be nonnegative".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Input("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Input("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate: `base * 0.5 * (1 + cos(pi * t / T))`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Input("lr_at: total step count must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Input(format!(
            "lr_at: step {step} beyond schedule length {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// One SGD update with momentum and weight decay:
/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_step(
    param: &Tensor,
    grad: &Tensor,
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Tensor {
    assert_eq!(param.shape(), grad.shape(), "sgd_step shape mismatch");
    assert_eq!(param.len(), velocity.len(), "sgd_step velocity mismatch");
    let mut out = param.to_vec();
    for i in 0..out.len() {
        velocity[i] = momentum * velocity[i] + grad.data()[i] + weight_decay * out[i];
        out[i] -= lr * velocity[i];
    }
    Tensor::new(param.shape(), out).trained()
}

/// The three loss terms of one optimizer step. `cluster` and `sparse` are
/// reported before their coefficients.
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub class_term: f64,
    pub cluster_term: f64,
    pub sparse_term: f64,
}

fn mean_of<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let sum = vars[1..]
        .iter()
        .fold(vars[0], |acc, v| acc.add(v));
    sum.scale(1.0 / vars.len() as f64)
}

/// Total objective from per-sample logits and activation tensors:
/// mean cross-entropy + gamma1 * mean cluster loss + gamma2 * sparse loss.
///
/// Ablation switches drop terms entirely (their reported value is 0).
pub fn total_loss_from_activations<'t>(
    logits: &[Var<'t>],
    labels: &[usize],
    activations: &[Var<'t>],
    maps: Var<'t>,
    gamma1: f64,
    gamma2: f64,
    ablation: &Ablation,
) -> Result<LossBreakdown<'t>> {
    if logits.is_empty() || logits.len() != labels.len() || logits.len() != activations.len() {
        return Err(Error::Input(format!(
            "total_loss: {} logits, {} labels, {} activations",
            logits.len(),
            labels.len(),
            activations.len()
        )));
    }
    let ce: Vec<Var<'t>> = logits
        .iter()
        .zip(labels.iter())
        .map(|(l, &y)| l.softmax_cross_entropy(y))
        .collect();
    let class = mean_of(&ce);
    let mut total = class;
    let class_term = class.scalar();

    let mut cluster_term = 0.0;
    if ablation.use_cluster_loss {
        let per_sample: Vec<Var<'t>> = activations
            .iter()
            .map(|a| compdict::cluster_loss_from_activation(*a))
            .collect();
        let cluster = mean_of(&per_sample);
        cluster_term = cluster.scalar();
        total = total.add(&cluster.scale(gamma1));
    }

    let mut sparse_term = 0.0;
    if ablation.use_sparse_loss && ablation.use_map_dictionary {
        let sparse = mapdict::sparse_loss(maps)?;
        sparse_term = sparse.scalar();
        total = total.add(&sparse.scale(gamma2));
    }

    Ok(LossBreakdown {
        total,
        class_term,
        cluster_term,
        sparse_term,
    })
}

/// Total objective from raw feature maps; recomputes the component
/// activations from `components`.
pub fn total_loss<'t>(
    logits: &[Var<'t>],
    labels: &[usize],
    features: &[Var<'t>],
    components: Var<'t>,
    maps: Var<'t>,
    gamma1: f64,
    gamma2: f64,
    ablation: &Ablation,
) -> Result<LossBreakdown<'t>> {
    let activations: Vec<Var<'t>> = features
        .iter()
        .map(|f| compdict::detect(*f, components))
        .collect::<Result<_>>()?;
    total_loss_from_activations(logits, labels, &activations, maps, gamma1, gamma2, ablation)
}

/// Per-epoch training log entry.
#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub class_loss: f64,
    pub cluster_loss: f64,
    pub sparse_loss: f64,
    pub train_accuracy: f64,
    /// Learning rate at the last step of the epoch.
    pub learning_rate: f64,
}

pub struct TrainOutcome {
    /// Model after the final epoch.
    pub model: CorlModel,
    /// Validation-selected model when a meta-val split exists, otherwise
    /// the final model.
    pub best: CorlModel,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochMetrics>,
    pub steps_taken: usize,
    /// Checkpoint of the final model, including optimizer bookkeeping.
    pub checkpoint: Checkpoint,
    /// Checkpoint of `best`.
    pub best_checkpoint: Checkpoint,
}

/// How each named parameter is treated by the optimizer. Dictionary items
/// are norm-constrained, so they skip weight decay and are re-normalized
/// after the step.
fn is_norm_constrained(name: &str) -> bool {
    name == "component_dictionary" || name == "map_dictionary"
}

/// K-means features: every spatial vector from one backbone pass over the
/// training images, reservoir-sampled to a cap.
pub const KMEANS_FEATURE_CAP: usize = 10_000;
pub const KMEANS_ITERS: usize = 25;

pub fn collect_feature_sample(
    model: &CorlModel,
    dataset: &LabeledDataset,
    image_indices: &[usize],
    cap: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut sample: Vec<Vec<f64>> = Vec::with_capacity(cap.min(1024));
    let mut seen = 0usize;
    for &i in image_indices {
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let trace = model.forward_trace(&vars, tape.var(dataset.images[i].to_tensor()), None)?;
        let f = trace.feature.value();
        let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        for p in 0..h * w {
            let v = f.data()[p * c..(p + 1) * c].to_vec();
            // Reservoir sampling keeps the cap without a second pass.
            if sample.len() < cap {
                sample.push(v);
            } else {
                let j = rng::below(rng, seen + 1);
                if j < cap {
                    sample[j] = v;
                }
            }
            seen += 1;
        }
    }
    Ok(sample)
}

/// Meta-train on the dataset's train split. Fully deterministic for a
/// given seed; emits one metrics record per epoch through `on_epoch`.
pub fn train(
    dataset: &LabeledDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    let train_classes = dataset.classes_in(Split::Train);
    if train_classes.len() < 2 {
        return Err(Error::Input(format!(
            "training needs at least 2 train-split classes, found {}",
            train_classes.len()
        )));
    }
    if model_config.n_classes != train_classes.len() {
        return Err(Error::Input(format!(
            "model is configured for {} classes but the train split has {}",
            model_config.n_classes,
            train_classes.len()
        )));
    }
    if (dataset.h, dataset.w, dataset.channels)
        != (
            model_config.backbone.input_height,
            model_config.backbone.input_width,
            model_config.backbone.input_channels,
        )
    {
        return Err(Error::Input(format!(
            "dataset images are {}x{}x{}, backbone expects {}x{}x{}",
            dataset.h,
            dataset.w,
            dataset.channels,
            model_config.backbone.input_height,
            model_config.backbone.input_width,
            model_config.backbone.input_channels
        )));
    }

    // Class id -> train label, by sorted class id.
    let label_of: BTreeMap<usize, usize> = train_classes
        .iter()
        .enumerate()
        .map(|(l, &c)| (c, l))
        .collect();
    let train_images = dataset.image_indices_in(Split::Train);
    if train_images.is_empty() {
        return Err(Error::Input("train split has no images".into()));
    }

    let mut model = CorlModel::init(model_config.clone(), config.seed)?;
    let mut rng = rng::stream(config.seed, 1);

    // K-means initialization of the component dictionary on features from
    // the freshly initialized backbone.
    let features =
        collect_feature_sample(&model, dataset, &train_images, KMEANS_FEATURE_CAP, &mut rng)?;
    if features.len() >= model_config.components {
        let dict = compdict::kmeans_init(
            &features,
            model_config.components,
            KMEANS_ITERS,
            config.seed,
        )?;
        model.set_components(&dict)?;
    }

    let steps_per_epoch = train_images.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut names: Vec<String> = Vec::new();
    model.params.visit(&mut |name, t: &Tensor| {
        velocity.insert(name.clone(), vec![0.0; t.len()]);
        names.push(name);
    });

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, CorlModel)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order = train_images.clone();
        rng::shuffle(&mut rng, &mut order);

        let mut term_sums = [0.0f64; 3];
        let mut correct = 0usize;
        let mut last_lr = 0.0;

        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let vars = model.vars(&tape);
            let mut logits = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut activations = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut image = dataset.images[i].clone();
                if config.flip_augment && rng::uniform(&mut rng) < 0.5 {
                    image = image.flipped_horizontal();
                }
                let dropout = model_config.backbone.use_dropout;
                let trace = model.forward_trace(
                    &vars,
                    tape.var(image.to_tensor()),
                    if dropout { Some(&mut rng) } else { None },
                )?;
                let l = model.train_logits(&vars, &trace)?;
                let label = label_of[&dataset.labels[i]];
                let lv = l.value();
                let pred = (0..lv.len())
                    .max_by(|&a, &b| lv.data()[a].total_cmp(&lv.data()[b]))
                    .unwrap();
                if pred == label {
                    correct += 1;
                }
                logits.push(l);
                labels.push(label);
                activations.push(trace.activation);
            }

            let loss = total_loss_from_activations(
                &logits,
                &labels,
                &activations,
                vars.maps,
                config.gamma1,
                config.gamma2,
                &model_config.ablation,
            )?;
            for (value, name) in [
                (loss.class_term, "classification"),
                (loss.cluster_term, "cluster"),
                (loss.sparse_term, "sparse"),
            ] {
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "{name} loss became {value} at epoch {epoch} step {step}"
                    )));
                }
            }
            term_sums[0] += loss.class_term;
            term_sums[1] += loss.cluster_term;
            term_sums[2] += loss.sparse_term;

            let grads = tape.backward(loss.total);
            let lr = lr_at(step, total_steps, config.base_lr)?;
            last_lr = lr;

            let mut updated: Vec<Tensor> = Vec::with_capacity(names.len());
            let mut k = 0usize;
            vars.visit(&mut |name, var: &Var<'_>| {
                debug_assert_eq!(name, names[k]);
                k += 1;
                let grad = grads.wrt(*var);
                let wd = if is_norm_constrained(&name) {
                    0.0
                } else {
                    config.weight_decay
                };
                let v = velocity.get_mut(&name).expect("velocity slot");
                let mut next = sgd_step(&var.value(), &grad, v, lr, config.momentum, wd);
                if name == "component_dictionary" {
                    next = compdict::normalize_rows(&next);
                } else if name == "map_dictionary" {
                    next = mapdict::normalize_items(&next);
                }
                updated.push(next);
            });
            let mut it = updated.into_iter();
            model.params = model.params.map(&mut |_| it.next().expect("updated tensor"));
            step += 1;
        }

        let n_steps = steps_per_epoch as f64;
        let metrics = EpochMetrics {
            epoch,
            class_loss: term_sums[0] / n_steps,
            cluster_loss: term_sums[1] / n_steps,
            sparse_loss: term_sums[2] / n_steps,
            train_accuracy: correct as f64 / order.len() as f64,
            learning_rate: last_lr,
        };
        on_epoch(&metrics);
        history.push(metrics);

        // Track the best model by meta-validation episode accuracy.
        if let Some(val_cfg) = val_eval_config(dataset, config.seed, epoch) {
            let report = episodes::evaluate(&model, dataset, Split::Val, &val_cfg)?;
            let acc = report.result.mean_accuracy;
            if best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true) {
                best = Some((acc, model.clone()));
            }
        }
    }

    let checkpoint = build_checkpoint(&model, config, config.epochs, &rng);
    let (best_val_accuracy, best_model) = match best {
        Some((acc, m)) => (Some(acc), m),
        None => (None, model.clone()),
    };
    let best_checkpoint = build_checkpoint(&best_model, config, config.epochs, &rng);
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_val_accuracy,
        history,
        steps_taken: step,
        checkpoint,
        best_checkpoint,
    })
}

/// Episode shape for per-epoch validation, if the val split can support
/// one.
fn val_eval_config(dataset: &LabeledDataset, seed: u64, epoch: usize) -> Option<EvalConfig> {
    let classes = dataset.classes_in(Split::Val);
    if classes.len() < 2 {
        return None;
    }
    let min_images = classes
        .iter()
        .map(|&c| dataset.images_of(c).len())
        .min()
        .unwrap_or(0);
    if min_images < 2 {
        return None;
    }
    Some(EvalConfig {
        tasks: 20,
        n_way: classes.len().min(5),
        k_shot: 1,
        queries: (min_images - 1).min(5),
        seed: seed ^ 0x5EED_0000 ^ epoch as u64,
        threads: 1,
    })
}

// ── checkpoint meta encoding ────────────────────────────────────────
//
// The container format stores named f32 tensors only, so the config, the
// epoch counter, and the RNG state are packed into `meta/*` tensors using
// integer-exact values (16-bit chunks for wide integers).

fn push_u64(out: &mut Vec<f64>, v: u64) {
    for k in 0..4 {
        out.push(((v >> (16 * k)) & 0xFFFF) as f64);
    }
}

fn read_u64(data: &[f64], at: &mut usize) -> u64 {
    let mut v = 0u64;
    for k in 0..4 {
        v |= (data[*at + k] as u64) << (16 * k);
    }
    *at += 4;
    v
}

fn push_u128(out: &mut Vec<f64>, v: u128) {
    for k in 0..8 {
        out.push(((v >> (16 * k)) & 0xFFFF) as f64);
    }
}

fn read_u128(data: &[f64], at: &mut usize) -> u128 {
    let mut v = 0u128;
    for k in 0..8 {
        v |= (data[*at + k] as u128) << (16 * k);
    }
    *at += 8;
    v
}

fn encode_config(model_config: &ModelConfig, config: &TrainConfig) -> Tensor {
    let mut v: Vec<f64> = Vec::new();
    v.push(1.0); // meta encoding sub-version
    let b = &model_config.backbone;
    v.extend([
        b.input_height as f64,
        b.input_width as f64,
        b.input_channels as f64,
        b.stage_channels.len() as f64,
    ]);
    v.extend(b.stage_channels.iter().map(|&c| c as f64));
    v.push(b.convs_per_stage as f64);
    v.push(b.use_dropout as u8 as f64);
    v.extend([
        model_config.components as f64,
        model_config.maps as f64,
        model_config.attention_ratio as f64,
        model_config.head_hidden as f64,
        model_config.n_classes as f64,
    ]);
    let a = &model_config.ablation;
    v.extend([
        a.use_map_dictionary as u8 as f64,
        a.use_attention as u8 as f64,
        a.use_cluster_loss as u8 as f64,
        a.use_sparse_loss as u8 as f64,
    ]);
    v.extend([
        config.gamma1,
        config.gamma2,
        config.base_lr,
        config.momentum,
        config.weight_decay,
        config.batch_size as f64,
        config.epochs as f64,
        config.flip_augment as u8 as f64,
    ]);
    push_u64(&mut v, config.seed);
    let len = v.len();
    Tensor::new(&[len], v)
}

fn decode_config(t: &Tensor) -> Result<(ModelConfig, TrainConfig)> {
    let bad = |what: &str| Error::Format {
        offset: 0,
        detail: format!("meta/config: {what}"),
    };
    let d = t.data();
    let mut at = 0usize;
    let mut next = |n: usize| -> Result<&[f64]> {
        if at + n > d.len() {
            return Err(bad("truncated"));
        }
        let s = &d[at..at + n];
        at += n;
        Ok(s)
    };
    if next(1)?[0] != 1.0 {
        return Err(bad("unknown encoding sub-version"));
    }
    let head = next(4)?.to_vec();
    let n_stages = head[3] as usize;
    let stage_channels: Vec<usize> = next(n_stages)?.iter().map(|&c| c as usize).collect();
    let tail = next(2)?.to_vec();
    let backbone = crate::backbone::BackboneConfig {
        input_height: head[0] as usize,
        input_width: head[1] as usize,
        input_channels: head[2] as usize,
        stage_channels,
        convs_per_stage: tail[0] as usize,
        use_dropout: tail[1] != 0.0,
    };
    let m = next(5)?.to_vec();
    let ab = next(4)?.to_vec();
    let model_config = ModelConfig {
        backbone,
        components: m[0] as usize,
        maps: m[1] as usize,
        attention_ratio: m[2] as usize,
        head_hidden: m[3] as usize,
        n_classes: m[4] as usize,
        ablation: Ablation {
            use_map_dictionary: ab[0] != 0.0,
            use_attention: ab[1] != 0.0,
            use_cluster_loss: ab[2] != 0.0,
            use_sparse_loss: ab[3] != 0.0,
        },
    };
    let tr = next(8)?.to_vec();
    let mut seed_at = at;
    if seed_at + 4 > d.len() {
        return Err(bad("truncated seed"));
    }
    let seed = read_u64(d, &mut seed_at);
    let train_config = TrainConfig {
        gamma1: tr[0],
        gamma2: tr[1],
        base_lr: tr[2],
        momentum: tr[3],
        weight_decay: tr[4],
        batch_size: tr[5] as usize,
        epochs: tr[6] as usize,
        seed,
        flip_augment: tr[7] != 0.0,
    };
    Ok((model_config, train_config))
}

fn encode_rng(rng: &Rng) -> Tensor {
    let mut v: Vec<f64> = Vec::new();
    for byte in rng.get_seed() {
        v.push(byte as f64);
    }
    push_u64(&mut v, rng.get_stream());
    push_u128(&mut v, rng.get_word_pos());
    let n = v.len();
    Tensor::new(&[n], v)
}

fn decode_rng(t: &Tensor) -> Result<Rng> {
    use rand_core::SeedableRng;
    if t.len() != 44 {
        return Err(Error::Format {
            offset: 0,
            detail: format!("meta/rng: expected 44 values, got {}", t.len()),
        });
    }
    let d = t.data();
    let mut seed = [0u8; 32];
    for (i, s) in seed.iter_mut().enumerate() {
        *s = d[i] as u8;
    }
    let mut at = 32;
    let stream = read_u64(d, &mut at);
    let word_pos = read_u128(d, &mut at);
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// Serialize a trained model with its configuration, epoch counter, and
/// RNG state.
pub fn build_checkpoint(
    model: &CorlModel,
    config: &TrainConfig,
    epoch: usize,
    rng: &Rng,
) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = vec![
        ("meta/config".into(), encode_config(&model.config, config)),
        ("meta/epoch".into(), Tensor::new(&[1], vec![epoch as f64])),
        ("meta/rng".into(), encode_rng(rng)),
    ];
    model
        .params
        .visit(&mut |name, t: &Tensor| tensors.push((name, t.clone())));
    Checkpoint { tensors }
}

/// Rebuild a model (plus its training context) from a checkpoint.
pub fn restore_checkpoint(ckpt: &Checkpoint) -> Result<(CorlModel, TrainConfig, usize, Rng)> {
    let missing = |name: &str| Error::Format {
        offset: 0,
        detail: format!("checkpoint is missing tensor '{name}'"),
    };
    let config_t = ckpt.get("meta/config").ok_or_else(|| missing("meta/config"))?;
    let (model_config, train_config) = decode_config(config_t)?;
    model_config.validate().map_err(|e| Error::Format {
        offset: 0,
        detail: format!("checkpoint config invalid: {e}"),
    })?;
    let epoch = ckpt
        .get("meta/epoch")
        .ok_or_else(|| missing("meta/epoch"))?
        .item() as usize;
    let rng = decode_rng(ckpt.get("meta/rng").ok_or_else(|| missing("meta/rng"))?)?;

    // Shape template from a fresh init, filled by name.
    let template = CorlModel::init(model_config.clone(), 0)?;
    let mut names = Vec::new();
    template.params.visit(&mut |name, _: &Tensor| names.push(name));
    let mut err: Option<Error> = None;
    let mut k = 0usize;
    let params = template.params.map(&mut |old: &Tensor| {
        let name = &names[k];
        k += 1;
        match ckpt.get(name) {
            Some(t) if t.shape() == old.shape() => t.clone().trained(),
            Some(t) => {
                err.get_or_insert(Error::Format {
                    offset: 0,
                    detail: format!(
                        "tensor '{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        old.shape()
                    ),
                });
                old.clone()
            }
            None => {
                err.get_or_insert(missing(name));
                old.clone()
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok((
        CorlModel {
            config: model_config,
            params,
        },
        train_config,
        epoch,
        rng,
    ))
}
