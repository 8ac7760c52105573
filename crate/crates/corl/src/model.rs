//! The assembled pipeline: backbone, dictionaries, attention, and heads,
//! together with the full parameter set.

use crate::attention::{self, AttentionParams};
use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::compdict::{self, ComponentDictionary};
use crate::error::{Error, Result};
use crate::heads::{self, TrainHeadParams};
use crate::mapdict::{self, MapDictionary};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{self, Rng};

/// Pipeline switches for ablation runs. Disabling the map dictionary makes
/// the gated output equal the raw activations (and removes the sparse
/// loss); disabling attention passes the gated output straight through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_map_dictionary: bool,
    pub use_attention: bool,
    pub use_cluster_loss: bool,
    pub use_sparse_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_map_dictionary: true,
            use_attention: true,
            use_cluster_loss: true,
            use_sparse_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Component dictionary size B.
    pub components: usize,
    /// Map dictionary size V.
    pub maps: usize,
    /// Squeeze-excite reduction ratio r.
    pub attention_ratio: usize,
    /// Hidden width of the training classifier.
    pub head_hidden: usize,
    /// Number of meta-training classes.
    pub n_classes: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    /// Desk-scale default: B = 64, V = 32, r = 4 on the default backbone.
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            components: 64,
            maps: 32,
            attention_ratio: 4,
            head_hidden: 128,
            n_classes: 8,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.components == 0 {
            return Err(Error::Input("components (B) must be positive".into()));
        }
        if self.maps == 0 {
            return Err(Error::Input("maps (V) must be positive".into()));
        }
        if self.attention_ratio == 0 || self.components % self.attention_ratio != 0 {
            return Err(Error::Input(format!(
                "attention_ratio {} must divide components {}",
                self.attention_ratio, self.components
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Input("head_hidden must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Input("n_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Length of the assembled embedding (B + C).
    pub fn embedding_len(&self) -> usize {
        self.components + self.backbone.output_spec().c
    }
}

/// Every trainable tensor of the pipeline, generic over storage so the
/// same structure holds plain tensors or tape variables.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub backbone: BackboneParams<T>,
    /// Component dictionary items, `[B, C]`.
    pub components: T,
    /// Map dictionary items, `[V, H, W]`.
    pub maps: T,
    pub attention: AttentionParams<T>,
    pub head: TrainHeadParams<T>,
}

impl<T> ModelParams<T> {
    /// Rebuild with a transform applied to every tensor. The traversal
    /// order is identical to [`ModelParams::visit`].
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            backbone: self.backbone.map(f),
            components: f(&self.components),
            maps: f(&self.maps),
            attention: self.attention.map(f),
            head: self.head.map(f),
        }
    }

    /// Walk every tensor with its stable checkpoint name.
    pub fn visit(&self, f: &mut impl FnMut(String, &T)) {
        self.backbone.visit("backbone", f);
        f("component_dictionary".into(), &self.components);
        f("map_dictionary".into(), &self.maps);
        self.attention.visit("attention", f);
        self.head.visit("head", f);
    }
}

impl ModelParams<Tensor> {
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }
}

/// The full model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct CorlModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

/// Intermediate tensors of one forward pass, kept on the tape so losses
/// can be attached to any of them.
pub struct ForwardTrace<'t> {
    /// Backbone feature map `F`, `[H, W, C]`.
    pub feature: Var<'t>,
    /// Component activation tensor `A`, `[H, W, B]`.
    pub activation: Var<'t>,
    /// Gated tensor `O` (equals `A` when the map dictionary is disabled).
    pub gated: Var<'t>,
    /// Selected map index per channel; empty when the map dictionary is
    /// disabled.
    pub selected_maps: Vec<usize>,
    /// Attended tensor (equals `O` when attention is disabled).
    pub attended: Var<'t>,
    /// Assembled embedding, `[B + C]`.
    pub embedding: Var<'t>,
}

impl CorlModel {
    /// Seeded initialization of the whole parameter set.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let spec = config.backbone.output_spec();
        let backbone = backbone::init(&config.backbone, &mut rng);
        let components = ComponentDictionary::random_init(config.components, spec.c, &mut rng);
        let maps = MapDictionary::random_init(config.maps, spec.h, spec.w, &mut rng);
        let attention = attention::init(spec.h, spec.w, config.components, config.attention_ratio, &mut rng)?;
        let head = heads::init_train_head(
            config.embedding_len(),
            config.head_hidden,
            config.n_classes,
            &mut rng,
        );
        Ok(CorlModel {
            config,
            params: ModelParams {
                backbone,
                components: components.items().clone(),
                maps: maps.items().clone(),
                attention,
                head,
            },
        })
    }

    /// Swap in a component dictionary (e.g. from K-means initialization).
    pub fn set_components(&mut self, dict: &ComponentDictionary) -> Result<()> {
        if dict.items().shape() != self.params.components.shape() {
            return Err(Error::dim(
                "set_components",
                format!(
                    "dictionary shape {:?} vs configured {:?}",
                    dict.items().shape(),
                    self.params.components.shape()
                ),
            ));
        }
        self.params.components = dict.items().clone();
        Ok(())
    }

    /// Lift all parameters onto a tape.
    pub fn vars<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.params.map(&mut |t| tape.var(t.clone()))
    }

    /// Full forward pass for one image already lifted onto the tape.
    pub fn forward_trace<'t>(
        &self,
        vars: &ModelParams<Var<'t>>,
        image: Var<'t>,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<ForwardTrace<'t>> {
        let feature = backbone::forward(&self.config.backbone, &vars.backbone, image, dropout_rng)?;
        let activation = compdict::detect(feature, vars.components)?;
        let (gated, selected_maps) = if self.config.ablation.use_map_dictionary {
            let g = mapdict::match_and_gate(activation, vars.maps)?;
            (g.values, g.selected_indices)
        } else {
            (activation, Vec::new())
        };
        let attended = if self.config.ablation.use_attention {
            let z = attention::squeeze(gated, vars.attention.squeeze_filter)?;
            let gate = attention::excite(z, vars.attention.w1, vars.attention.w2)?;
            attention::reweight(gated, gate)?
        } else {
            gated
        };
        let embedding = heads::assemble_embedding(attended, feature)?;
        Ok(ForwardTrace {
            feature,
            activation,
            gated,
            selected_maps,
            attended,
            embedding,
        })
    }

    /// Training-classifier logits for a traced forward pass.
    pub fn train_logits<'t>(
        &self,
        vars: &ModelParams<Var<'t>>,
        trace: &ForwardTrace<'t>,
    ) -> Result<Var<'t>> {
        heads::train_head_forward(trace.embedding, &vars.head)
    }

    /// Meta-test embedding of one image tensor (frozen parameters, no
    /// dropout).
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.vars(&tape);
        let trace = self.forward_trace(&vars, tape.var(image.clone()), None)?;
        Ok(trace.embedding.value().to_vec())
    }

    /// Embeddings for a batch, order-preserving.
    pub fn embed_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.embed(im)).collect()
    }
}
