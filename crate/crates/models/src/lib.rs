//! The seven forecasting architectures. Every model maps an input batch
//! `[B, 250, 3]` to a forecast `[B, 50, 3]` (in standardized units) through
//! the same [`Net`] interface, so one training harness drives them all.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use threetank_autodiff::{AdError, Graph, NodeId, ParamSet, Tensor};
use threetank_sim::{INPUT_STEPS, TARGET_STEPS};

pub mod checkpoint;
pub mod gru;
pub mod init;
pub mod layers;
pub mod mlp;
pub mod norm;
pub mod tcn;
pub mod transformer;

pub use checkpoint::{load_model, save_model, ModelManifest};
pub use norm::Standardizer;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch in {context}: got {got:?}, expected {expected}")]
    ShapeMismatch {
        context: String,
        got: Vec<usize>,
        expected: String,
    },
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("toml parse: {0}")]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// The seven architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Gru,
    GruAr,
    Tcn,
    TcnFae,
    Transformer,
    TransformerCe,
}

impl ArchKind {
    pub const ALL: [ArchKind; 7] = [
        ArchKind::Mlp,
        ArchKind::Gru,
        ArchKind::GruAr,
        ArchKind::Tcn,
        ArchKind::TcnFae,
        ArchKind::Transformer,
        ArchKind::TransformerCe,
    ];

    pub fn cli_name(&self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::Gru => "gru",
            ArchKind::GruAr => "gru_ar",
            ArchKind::Tcn => "tcn",
            ArchKind::TcnFae => "tcn_fae",
            ArchKind::Transformer => "transformer",
            ArchKind::TransformerCe => "transformer_ce",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ArchKind::Mlp => "MLP",
            ArchKind::Gru => "GRU",
            ArchKind::GruAr => "GRU-AR",
            ArchKind::Tcn => "TCN",
            ArchKind::TcnFae => "TCN-FAE",
            ArchKind::Transformer => "Transformer",
            ArchKind::TransformerCe => "Transformer-CE",
        }
    }
}

impl FromStr for ArchKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .iter()
            .copied()
            .find(|k| k.cli_name() == s)
            .ok_or_else(|| {
                ModelError::InvalidConfig(format!(
                    "unknown architecture '{s}' (expected one of {})",
                    ArchKind::ALL.map(|k| k.cli_name()).join(", ")
                ))
            })
    }
}

/// How a forward pass runs. Teacher-forced modes carry the normalized
/// target batch `[B, 50, 3]` so autoregressive models can condition on true
/// previous steps; purely feed-forward models ignore it.
#[derive(Clone, Copy)]
pub enum ForwardMode<'a> {
    /// Training pass: teacher forcing for autoregressive decoders, dropout
    /// active, auxiliary losses computed.
    Train { target: &'a Tensor },
    /// Validation pass during training: teacher forcing, no dropout.
    Val { target: &'a Tensor },
    /// Test/inference pass: the model decodes from its own predictions.
    Eval,
}

impl ForwardMode<'_> {
    pub fn teacher_target(&self) -> Option<&Tensor> {
        match self {
            ForwardMode::Train { target } | ForwardMode::Val { target } => Some(target),
            ForwardMode::Eval => None,
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, ForwardMode::Train { .. })
    }
}

/// Result of a forward pass: the forecast node `[B, 50, 3]` plus an
/// optional auxiliary loss term (already weighted) that the training loss
/// adds to the forecast MSE. Validation and test metrics use the forecast
/// alone.
pub struct NetOutput {
    pub forecast: NodeId,
    pub aux_loss: Option<NodeId>,
}

/// Common interface of all architectures. Inputs and outputs are in
/// standardized units; [`Standardizer`] handles the conversion.
/// Parameters are `Rc`-backed, so a model stays on the thread that built
/// it; parallel harnesses construct one model per worker.
pub trait Net {
    fn kind(&self) -> ArchKind;
    fn params(&self) -> &ParamSet;
    fn forward(&self, graph: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput>;
}

pub(crate) fn check_input_shape(context: &str, shape: &[usize]) -> Result<usize> {
    match shape {
        [b, t, c] if *t == INPUT_STEPS && *c == 3 && *b > 0 => Ok(*b),
        _ => Err(ModelError::ShapeMismatch {
            context: context.to_string(),
            got: shape.to_vec(),
            expected: format!("[B, {INPUT_STEPS}, 3]"),
        }),
    }
}

pub(crate) fn check_target_shape(context: &str, batch: usize, shape: &[usize]) -> Result<()> {
    match shape {
        [b, t, c] if *b == batch && *t == TARGET_STEPS && *c == 3 => Ok(()),
        _ => Err(ModelError::ShapeMismatch {
            context: context.to_string(),
            got: shape.to_vec(),
            expected: format!("[{batch}, {TARGET_STEPS}, 3]"),
        }),
    }
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
    }
    Ok(())
}

fn check_dropout(p: f64) -> Result<()> {
    if !p.is_finite() || !(0.0..1.0).contains(&p) {
        return Err(ModelError::InvalidConfig(format!(
            "dropout must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    /// 1 to 3 hidden layer widths.
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256], dropout: 0.0 }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.len() > 3 {
            return Err(ModelError::InvalidConfig(format!(
                "mlp needs 1 to 3 hidden layers, got {}",
                self.hidden.len()
            )));
        }
        for (i, &h) in self.hidden.iter().enumerate() {
            check_positive(&format!("mlp hidden[{i}]"), h)?;
        }
        check_dropout(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GruConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 2, dropout: 0.0 }
    }
}

impl GruConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("gru hidden", self.hidden)?;
        check_positive("gru layers", self.layers)?;
        check_dropout(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GruArConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for GruArConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 2, dropout: 0.0 }
    }
}

impl GruArConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("gru_ar hidden", self.hidden)?;
        check_positive("gru_ar layers", self.layers)?;
        check_dropout(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Residual blocks; block i uses dilation 2^i.
    pub blocks: usize,
    pub dropout: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self { channels: 64, kernel: 3, blocks: 5, dropout: 0.0 }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("tcn channels", self.channels)?;
        check_positive("tcn kernel", self.kernel)?;
        check_positive("tcn blocks", self.blocks)?;
        check_dropout(self.dropout)
    }

    /// Input steps the last output step can see: 1 + (k-1) * sum of
    /// dilations.
    pub fn receptive_field(&self) -> usize {
        let dilation_sum: usize = (0..self.blocks).map(|i| 1 << i).sum();
        1 + (self.kernel - 1) * dilation_sum
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnFaeConfig {
    pub channels: usize,
    pub kernel: usize,
    pub blocks: usize,
    /// Bottleneck width.
    pub latent: usize,
    /// Hidden width of the two decoders.
    pub decoder_hidden: usize,
    /// Weight of the reconstruction loss term.
    pub recon_weight: f64,
    pub dropout: f64,
}

impl Default for TcnFaeConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            kernel: 3,
            blocks: 5,
            latent: 8,
            decoder_hidden: 64,
            recon_weight: 0.5,
            dropout: 0.0,
        }
    }
}

impl TcnFaeConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("tcn_fae channels", self.channels)?;
        check_positive("tcn_fae kernel", self.kernel)?;
        check_positive("tcn_fae blocks", self.blocks)?;
        check_positive("tcn_fae latent", self.latent)?;
        check_positive("tcn_fae decoder_hidden", self.decoder_hidden)?;
        if !self.recon_weight.is_finite() || self.recon_weight < 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "tcn_fae recon_weight must be finite and >= 0, got {}",
                self.recon_weight
            )));
        }
        check_dropout(self.dropout)
    }

    pub fn encoder(&self) -> TcnConfig {
        TcnConfig {
            channels: self.channels,
            kernel: self.kernel,
            blocks: self.blocks,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, enc_layers: 2, dec_layers: 2, ff: 128, dropout: 0.0 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("transformer d_model", self.d_model)?;
        check_positive("transformer heads", self.heads)?;
        check_positive("transformer enc_layers", self.enc_layers)?;
        check_positive("transformer dec_layers", self.dec_layers)?;
        check_positive("transformer ff", self.ff)?;
        if self.d_model % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "transformer heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerCeConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff: usize,
    pub dropout: f64,
    /// Convolutional embedding: layer i uses dilation 2^i.
    pub embed_layers: usize,
    pub embed_kernel: usize,
}

impl Default for TransformerCeConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff: 128,
            dropout: 0.0,
            embed_layers: 2,
            embed_kernel: 3,
        }
    }
}

impl TransformerCeConfig {
    pub fn validate(&self) -> Result<()> {
        self.base().validate()?;
        check_positive("transformer_ce embed_layers", self.embed_layers)?;
        check_positive("transformer_ce embed_kernel", self.embed_kernel)
    }

    pub fn base(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ff: self.ff,
            dropout: self.dropout,
        }
    }
}

/// Architecture choice plus its hyperparameters. Serialized into the
/// checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Mlp(MlpConfig),
    Gru(GruConfig),
    GruAr(GruArConfig),
    Tcn(TcnConfig),
    TcnFae(TcnFaeConfig),
    Transformer(TransformerConfig),
    TransformerCe(TransformerCeConfig),
}

impl ArchConfig {
    pub fn kind(&self) -> ArchKind {
        match self {
            ArchConfig::Mlp(_) => ArchKind::Mlp,
            ArchConfig::Gru(_) => ArchKind::Gru,
            ArchConfig::GruAr(_) => ArchKind::GruAr,
            ArchConfig::Tcn(_) => ArchKind::Tcn,
            ArchConfig::TcnFae(_) => ArchKind::TcnFae,
            ArchConfig::Transformer(_) => ArchKind::Transformer,
            ArchConfig::TransformerCe(_) => ArchKind::TransformerCe,
        }
    }

    /// Full-size defaults for each architecture.
    pub fn default_for(kind: ArchKind) -> ArchConfig {
        match kind {
            ArchKind::Mlp => ArchConfig::Mlp(MlpConfig::default()),
            ArchKind::Gru => ArchConfig::Gru(GruConfig::default()),
            ArchKind::GruAr => ArchConfig::GruAr(GruArConfig::default()),
            ArchKind::Tcn => ArchConfig::Tcn(TcnConfig::default()),
            ArchKind::TcnFae => ArchConfig::TcnFae(TcnFaeConfig::default()),
            ArchKind::Transformer => ArchConfig::Transformer(TransformerConfig::default()),
            ArchKind::TransformerCe => ArchConfig::TransformerCe(TransformerCeConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchConfig::Mlp(c) => c.validate(),
            ArchConfig::Gru(c) => c.validate(),
            ArchConfig::GruAr(c) => c.validate(),
            ArchConfig::Tcn(c) => c.validate(),
            ArchConfig::TcnFae(c) => c.validate(),
            ArchConfig::Transformer(c) => c.validate(),
            ArchConfig::TransformerCe(c) => c.validate(),
        }
    }
}

/// A built model: the network, its standardization constants, and the
/// config and seed that produced it.
pub struct Model {
    net: Box<dyn Net>,
    pub norm: Standardizer,
    pub config: ArchConfig,
    pub seed: u64,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("seed", &self.seed)
            .field("parameters", &self.parameter_count())
            .field("norm", &self.norm)
            .finish()
    }
}

impl Model {
    pub fn kind(&self) -> ArchKind {
        self.net.kind()
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.params().numel()
    }

    /// Forward pass in standardized units.
    pub fn forward(
        &self,
        graph: &mut Graph,
        input: &Tensor,
        mode: &ForwardMode,
    ) -> Result<NetOutput> {
        self.net.forward(graph, input, mode)
    }
}

/// Construct a model with freshly initialized parameters. All random draws
/// come from the model-init stream of `seed`, so construction is
/// deterministic and independent of data or scheduling randomness.
pub fn build_model(config: &ArchConfig, norm: Standardizer, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = threetank_sim::rng::stream_rng(seed, threetank_sim::rng::INIT_STREAM);
    let net: Box<dyn Net> = match config {
        ArchConfig::Mlp(c) => Box::new(mlp::Mlp::new(c, &mut rng)?),
        ArchConfig::Gru(c) => Box::new(gru::Gru::new(c, &mut rng)?),
        ArchConfig::GruAr(c) => Box::new(gru::GruAr::new(c, &mut rng)?),
        ArchConfig::Tcn(c) => Box::new(tcn::Tcn::new(c, &mut rng)?),
        ArchConfig::TcnFae(c) => Box::new(tcn::TcnFae::new(c, &mut rng)?),
        ArchConfig::Transformer(c) => Box::new(transformer::Transformer::new(c, &mut rng)?),
        ArchConfig::TransformerCe(c) => Box::new(transformer::TransformerCe::new(c, &mut rng)?),
    };
    Ok(Model { net, norm, config: config.clone(), seed })
}
