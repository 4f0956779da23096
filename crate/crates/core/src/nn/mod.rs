//! The two model families: a small three-block CNN and a patch transformer.

mod cnn;
mod io;
mod train;
mod vit;

pub use io::{load_model, read_model_file, save_model, write_model_file};
pub use train::{
    argmax_rows, evaluate_accuracy, predict_probs, train_model, DataView, EpochRecord,
    TrainHistory, TrainParams,
};
pub use vit::{attention_matrices, multi_head_attention, patchify, unpatchify, AttnWeights};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    HsCnn,
    Vit,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::HsCnn => "hs_cnn",
            ModelKind::Vit => "vit",
        })
    }
}

/// Three double-convolution blocks, a dense stack, and a softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsCnnConfig {
    pub block_filters: [(usize, usize); 3],
    pub dense_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub num_classes: usize,
    pub input_size: usize,
}

impl HsCnnConfig {
    /// Full-scale layout: lands near the published 2.8M-parameter budget.
    pub fn reference() -> Self {
        HsCnnConfig {
            block_filters: [(32, 32), (64, 64), (128, 128)],
            dense_sizes: vec![1024, 512],
            dropout_rate: 0.25,
            l2_lambda: 1e-4,
            num_classes: 17,
            input_size: 32,
        }
    }

    /// Desk-scale layout for the synthetic experiments.
    pub fn mini(num_classes: usize) -> Self {
        HsCnnConfig {
            block_filters: [(8, 8), (16, 16), (32, 32)],
            dense_sizes: vec![64],
            dropout_rate: 0.15,
            l2_lambda: 1e-4,
            num_classes,
            input_size: 32,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(NnError::Config(format!(
                "input_size {} must be a positive multiple of 8 (three pooling stages)",
                self.input_size
            )));
        }
        if self.block_filters.iter().any(|&(a, b)| a == 0 || b == 0)
            || self.dense_sizes.iter().any(|&d| d == 0)
        {
            return Err(NnError::Config("zero-width layer".into()));
        }
        if self.num_classes < 2 {
            return Err(NnError::Config("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!(
                "dropout_rate {} not in [0,1)",
                self.dropout_rate
            )));
        }
        if self.l2_lambda < 0.0 {
            return Err(NnError::Config("negative l2_lambda".into()));
        }
        Ok(())
    }
}

/// Patch transformer with class-token readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl VitConfig {
    /// Published-scale configuration; used for parameter counting only.
    pub fn reference() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            hidden_dim: 768,
            mlp_dim: 3072,
            num_layers: 12,
            num_heads: 12,
            num_classes: 17,
            dropout_rate: 0.1,
        }
    }

    /// Desk-scale configuration: 16 patches of 8x8 on a 32x32 chip.
    pub fn tiny(num_classes: usize) -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            hidden_dim: 64,
            mlp_dim: 128,
            num_layers: 2,
            num_heads: 4,
            num_classes,
            dropout_rate: 0.1,
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(NnError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(NnError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim == 0 || self.mlp_dim == 0 || self.num_layers == 0 {
            return Err(NnError::Config("zero-sized transformer dimension".into()));
        }
        if self.num_classes < 2 {
            return Err(NnError::Config("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config(format!(
                "dropout_rate {} not in [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    HsCnn(HsCnnConfig),
    Vit(VitConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::HsCnn(_) => ModelKind::HsCnn,
            ModelConfig::Vit(_) => ModelKind::Vit,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::HsCnn(c) => c.num_classes,
            ModelConfig::Vit(c) => c.num_classes,
        }
    }

    pub fn input_side(&self) -> usize {
        match self {
            ModelConfig::HsCnn(c) => c.input_size,
            ModelConfig::Vit(c) => c.image_size,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        match self {
            ModelConfig::HsCnn(c) => c.validate(),
            ModelConfig::Vit(c) => c.validate(),
        }
    }

    /// Weight-decay coefficient used by the optimizer for flagged tensors.
    pub fn weight_decay(&self) -> f64 {
        match self {
            ModelConfig::HsCnn(c) => c.l2_lambda,
            ModelConfig::Vit(_) => 0.0,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        match self {
            ModelConfig::HsCnn(c) => c.dropout_rate,
            ModelConfig::Vit(c) => c.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    HeUniform { fan_in: usize },
    Normal002,
    Zero,
    One,
}

/// Shape, name and initialization of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    pub(crate) init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            decay: false,
            init,
        }
    }

    fn decayed(mut self) -> Self {
        self.decay = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter layout for a config; names are unique and stable.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    match config {
        ModelConfig::HsCnn(c) => cnn_specs(c),
        ModelConfig::Vit(c) => vit_specs(c),
    }
}

fn cnn_specs(c: &HsCnnConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut c_in = 3;
    for (b, &(w1, w2)) in c.block_filters.iter().enumerate() {
        for (j, (ci, co)) in [(c_in, w1), (w1, w2)].into_iter().enumerate() {
            specs.push(ParamSpec::new(
                format!("block{b}.conv{j}.weight"),
                vec![co, ci, 3, 3],
                Init::HeUniform { fan_in: ci * 9 },
            ));
            specs.push(ParamSpec::new(
                format!("block{b}.conv{j}.bias"),
                vec![co],
                Init::Zero,
            ));
        }
        c_in = w2;
    }
    let side = c.input_size / 8;
    let mut d_in = c_in * side * side;
    for (i, &d_out) in c.dense_sizes.iter().enumerate() {
        specs.push(
            ParamSpec::new(
                format!("dense{i}.weight"),
                vec![d_in, d_out],
                Init::HeUniform { fan_in: d_in },
            )
            .decayed(),
        );
        specs.push(ParamSpec::new(format!("dense{i}.bias"), vec![d_out], Init::Zero));
        d_in = d_out;
    }
    specs.push(ParamSpec::new(
        "head.weight",
        vec![d_in, c.num_classes],
        Init::HeUniform { fan_in: d_in },
    ));
    specs.push(ParamSpec::new("head.bias", vec![c.num_classes], Init::Zero));
    specs
}

fn vit_specs(c: &VitConfig) -> Vec<ParamSpec> {
    let (d, pd) = (c.hidden_dim, c.patch_dim());
    let mut specs = vec![
        ParamSpec::new("patch_embed.weight", vec![pd, d], Init::HeUniform { fan_in: pd }),
        ParamSpec::new("patch_embed.bias", vec![d], Init::Zero),
        ParamSpec::new("cls_token", vec![1, d], Init::Normal002),
        ParamSpec::new("pos_embed", vec![c.tokens(), d], Init::Normal002),
    ];
    for l in 0..c.num_layers {
        specs.push(ParamSpec::new(format!("layer{l}.ln1.gamma"), vec![d], Init::One));
        specs.push(ParamSpec::new(format!("layer{l}.ln1.beta"), vec![d], Init::Zero));
        for proj in ["q", "k", "v", "out"] {
            specs.push(ParamSpec::new(
                format!("layer{l}.attn.{proj}.weight"),
                vec![d, d],
                Init::HeUniform { fan_in: d },
            ));
            specs.push(ParamSpec::new(
                format!("layer{l}.attn.{proj}.bias"),
                vec![d],
                Init::Zero,
            ));
        }
        specs.push(ParamSpec::new(format!("layer{l}.ln2.gamma"), vec![d], Init::One));
        specs.push(ParamSpec::new(format!("layer{l}.ln2.beta"), vec![d], Init::Zero));
        specs.push(ParamSpec::new(
            format!("layer{l}.mlp.fc1.weight"),
            vec![d, c.mlp_dim],
            Init::HeUniform { fan_in: d },
        ));
        specs.push(ParamSpec::new(
            format!("layer{l}.mlp.fc1.bias"),
            vec![c.mlp_dim],
            Init::Zero,
        ));
        specs.push(ParamSpec::new(
            format!("layer{l}.mlp.fc2.weight"),
            vec![c.mlp_dim, d],
            Init::HeUniform { fan_in: c.mlp_dim },
        ));
        specs.push(ParamSpec::new(
            format!("layer{l}.mlp.fc2.bias"),
            vec![d],
            Init::Zero,
        ));
    }
    specs.push(ParamSpec::new("final_ln.gamma", vec![d], Init::One));
    specs.push(ParamSpec::new("final_ln.beta", vec![d], Init::Zero));
    specs.push(ParamSpec::new(
        "head.weight",
        vec![d, c.num_classes],
        Init::HeUniform { fan_in: d },
    ));
    specs.push(ParamSpec::new("head.bias", vec![c.num_classes], Init::Zero));
    specs
}

/// Parameter total derived from shapes alone (no tensors materialized).
pub fn param_count_for_config(config: &ModelConfig) -> usize {
    param_specs(config).iter().map(|s| s.numel()).sum()
}

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub decay: bool,
}

/// A built model: config plus named parameter tensors in spec order.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Model<F> {
    /// Materialize parameters per the config's spec list, drawing from `rng`
    /// in spec order (same seed, same model).
    pub fn build(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, NnError> {
        config.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("valid stddev");
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for spec in param_specs(&config) {
            let n = spec.numel();
            let data: Vec<F> = match spec.init {
                Init::HeUniform { fan_in } => {
                    let limit = (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
                        .collect()
                }
                Init::Normal002 => (0..n)
                    .map(|_| F::from_f64(normal.sample(rng)))
                    .collect(),
                Init::Zero => vec![F::zero(); n],
                Init::One => vec![F::one(); n],
            };
            index.insert(spec.name.clone(), params.len());
            params.push(Param {
                name: spec.name,
                tensor: Tensor::new(spec.shape, data)?,
                decay: spec.decay,
            });
        }
        Ok(Model {
            config,
            params,
            index,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param<F>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Model {
            config,
            params,
            index,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor<F> {
        &self.params[self.index[name]].tensor
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Record every parameter as a gradient-tracked tape leaf, in order.
    pub(crate) fn bind(&self, tape: &mut Tape<F>, mode: Mode) -> Bound<'_> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mut t = p.tensor.clone();
            if mode == Mode::Train {
                t = t.requires_grad();
            }
            vars.push(tape.leaf(t));
        }
        Bound {
            vars,
            index: &self.index,
        }
    }

    /// Deterministic eval-mode forward; rows are post-softmax probabilities.
    pub fn forward(&self, batch: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let mut tape = Tape::new();
        // eval mode never consumes randomness; any seed works
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let bound = self.bind(&mut tape, Mode::Eval);
        let logits = self.logits(&mut tape, &bound, batch, Mode::Eval, &mut rng, None)?;
        let probs = tape.softmax(logits);
        Ok(tape.value(probs).clone())
    }

    pub(crate) fn logits(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        batch: &Tensor<F>,
        mode: Mode,
        rng: &mut impl Rng,
        mut capture: Option<&mut Vec<Tensor<F>>>,
    ) -> Result<Var, NnError> {
        let shape = batch.shape();
        let side = self.config.input_side();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != side || shape[3] != side {
            return Err(NnError::Input(format!(
                "expected batch [B, 3, {side}, {side}], got {shape:?}"
            )));
        }
        match &self.config {
            ModelConfig::HsCnn(c) => cnn::logits(tape, bound, c, batch, mode, rng),
            ModelConfig::Vit(c) => vit::logits(tape, bound, c, batch, mode, rng, capture.as_deref_mut()),
        }
    }
}

/// Tape handles for a model's parameters, ordered like `Model::params`.
pub(crate) struct Bound<'m> {
    vars: Vec<Var>,
    index: &'m HashMap<String, usize>,
}

impl Bound<'_> {
    pub(crate) fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }
}
