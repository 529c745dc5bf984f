//! The five toy networks (text encoder, speech encoder, speech decoder, text
//! decoder, vocoder), the codebook, and the per-speaker conditioning tables.
//!
//! Every network is a two-layer frame-wise perceptron with a tanh hidden layer.
//! The speech decoder additionally sees a causal window of latent frames. The
//! speech decoder, text decoder and vocoder are conditioned on the training
//! speaker through a learned embedding table projected into the hidden layer;
//! [`ModelState::remove_sd`] replaces those tables with a single learned bias.

pub mod checkpoint;
pub mod networks;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Tensor};
use crate::codebook::{Codebook, CodebookError};

pub use networks::{
    decode_speech, decode_text, encode_speech, encode_text, sts_stack, stt_stack, tts_stack,
    ttt_stack, vocode, Bottleneck, EncoderOutput, Forward, FrameLayout, LatentSequence, Sampling,
    StackOutput,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("symbol {symbol} outside vocabulary of size {vocab}")]
    UnknownSymbol { symbol: usize, vocab: usize },
    #[error("expected {expected} columns, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("layout covers {frames} frames but the input has {rows} rows")]
    Layout { frames: usize, rows: usize },
    #[error("speaker id required while speaker-dependent components are present")]
    SpeakerRequired,
    #[error("speaker id {0} supplied after speaker-dependent components were removed")]
    SpeakerAfterRemoval(usize),
    #[error("speaker id {id} outside the {count} training speakers")]
    UnknownSpeaker { id: usize, count: usize },
    #[error("speaker-dependent components were already removed")]
    AlreadyRemoved,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

/// Latent-space policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Vector-quantized bottleneck with an asymmetric MSE tie.
    Vq,
    /// Gaussian encoders with a KL tie.
    Vae,
    /// Plain continuous latents with a symmetric MSE tie.
    Standard,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Vq => 0,
            Mode::Vae => 1,
            Mode::Standard => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Mode::Vq),
            1 => Some(Mode::Vae),
            2 => Some(Mode::Standard),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vq => "vq",
            Mode::Vae => "vae",
            Mode::Standard => "standard",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vq" => Ok(Mode::Vq),
            "vae" => Ok(Mode::Vae),
            "standard" => Ok(Mode::Standard),
            other => Err(format!(
                "unknown mode {other:?} (expected vq, vae or standard)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    TextEncoder,
    SpeechEncoder,
    SpeechDecoder,
    TextDecoder,
    Vocoder,
    Codebook,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::TextEncoder,
        ModuleKind::SpeechEncoder,
        ModuleKind::SpeechDecoder,
        ModuleKind::TextDecoder,
        ModuleKind::Vocoder,
        ModuleKind::Codebook,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ModuleKind::TextEncoder => "tenc",
            ModuleKind::SpeechEncoder => "senc",
            ModuleKind::SpeechDecoder => "sdec",
            ModuleKind::TextDecoder => "tdec",
            ModuleKind::Vocoder => "voc",
            ModuleKind::Codebook => "codebook",
        }
    }

    /// Owning module of a parameter name.
    pub fn of_param(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|m| m.prefix() == head)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Which training stage produced a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Initialized,
    Trained,
    VocoderTrained,
    SdRemoved,
    Adapted,
    VocoderAdapted,
    Welded,
}

impl Stage {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        use Stage::*;
        [
            Initialized,
            Trained,
            VocoderTrained,
            SdRemoved,
            Adapted,
            VocoderAdapted,
            Welded,
        ]
        .get(c as usize)
        .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Initialized => "init",
            Stage::Trained => "train",
            Stage::VocoderTrained => "train-voc",
            Stage::SdRemoved => "sd-removed",
            Stage::Adapted => "adapt",
            Stage::VocoderAdapted => "adapt-voc",
            Stage::Welded => "weld",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab: usize,
    pub acoustic_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub codebook_size: usize,
    pub wave_k: usize,
    pub speaker_dim: usize,
    pub n_speakers: usize,
    /// Latent frames seen by the speech decoder (current plus previous).
    pub window: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Vq,
            vocab: 12,
            acoustic_dim: 8,
            latent_dim: 64,
            hidden: 64,
            codebook_size: 160,
            wave_k: 4,
            speaker_dim: 8,
            n_speakers: 8,
            window: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab", self.vocab),
            ("acoustic_dim", self.acoustic_dim),
            ("latent_dim", self.latent_dim),
            ("hidden", self.hidden),
            ("codebook_size", self.codebook_size),
            ("wave_k", self.wave_k),
            ("speaker_dim", self.speaker_dim),
            ("n_speakers", self.n_speakers),
            ("window", self.window),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes for a fresh model.
    fn shapes(&self) -> Vec<(String, (usize, usize))> {
        let (v, a, d, h, k) = (
            self.vocab,
            self.acoustic_dim,
            self.latent_dim,
            self.hidden,
            self.wave_k,
        );
        let mut out = Vec::new();
        let mut push = |n: &str, s: (usize, usize)| out.push((n.to_string(), s));
        for (enc, input) in [("tenc", v), ("senc", a)] {
            push(&format!("{enc}.w1"), (input, h));
            push(&format!("{enc}.b1"), (1, h));
            push(&format!("{enc}.w_mu"), (h, d));
            push(&format!("{enc}.b_mu"), (1, d));
            if self.mode == Mode::Vae {
                push(&format!("{enc}.w_logsig"), (h, d));
                push(&format!("{enc}.b_logsig"), (1, d));
            }
        }
        for (dec, input, output) in [("sdec", self.window * d, a), ("tdec", d, v), ("voc", a, k)] {
            push(&format!("{dec}.w1"), (input, h));
            push(&format!("{dec}.b1"), (1, h));
            push(&format!("{dec}.w2"), (h, output));
            push(&format!("{dec}.b2"), (1, output));
            push(
                &format!("{dec}.spk_table"),
                (self.n_speakers, self.speaker_dim),
            );
            push(&format!("{dec}.spk_proj"), (self.speaker_dim, h));
        }
        push("codebook", (self.codebook_size, d));
        out
    }
}

/// Modules that carry speaker-dependent components.
pub const SD_MODULES: [&str; 3] = ["sdec", "tdec", "voc"];

pub fn is_sd_param(name: &str) -> bool {
    name.ends_with(".spk_table") || name.ends_with(".spk_proj")
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name keeps per-parameter streams independent of order
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// Parameters, freeze flags and stage provenance of the whole system.
#[derive(Debug)]
pub struct ModelState {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<ModuleKind>,
    stage: Stage,
    sd_removed: bool,
    sd_reads: AtomicU64,
}

impl Clone for ModelState {
    fn clone(&self) -> Self {
        ModelState {
            config: self.config.clone(),
            params: self.params.clone(),
            frozen: self.frozen.clone(),
            stage: self.stage,
            sd_removed: self.sd_removed,
            sd_reads: AtomicU64::new(self.sd_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for ModelState {
    /// Bit-level equality of configuration, parameters, flags and stage.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.frozen == other.frozen
            && self.stage == other.stage
            && self.sd_removed == other.sd_removed
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| {
                    na == nb
                        && a.dim() == b.dim()
                        && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, (r, c)) in config.shapes() {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(config.seed, &name));
            let t = if name == "codebook" {
                Codebook::random(r, c, rng.random())?.entries().clone()
            } else if name.ends_with(".b_logsig") {
                Array2::from_elem((r, c), -2.0)
            } else if name.contains(".b") {
                Array2::zeros((r, c))
            } else if name.ends_with(".spk_table") {
                Array2::from_shape_fn((r, c), |_| rng.random_range(-0.5..0.5))
            } else {
                let mut bound = (6.0 / (r + c) as f64).sqrt();
                if name.ends_with(".w_logsig") {
                    bound *= 0.1;
                }
                Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound))
            };
            params.insert(name, t);
        }
        Ok(ModelState {
            config,
            params,
            frozen: BTreeSet::new(),
            stage: Stage::Initialized,
            sd_removed: false,
            sd_reads: AtomicU64::new(0),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        frozen: BTreeSet<ModuleKind>,
        stage: Stage,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let sd_removed = SD_MODULES
            .iter()
            .all(|m| params.contains_key(&format!("{m}.spk_bias")));
        let mut expected: BTreeMap<String, (usize, usize)> = config.shapes().into_iter().collect();
        if sd_removed {
            for m in SD_MODULES {
                expected.remove(&format!("{m}.spk_table"));
                expected.remove(&format!("{m}.spk_proj"));
                expected.insert(format!("{m}.spk_bias"), (1, config.hidden));
            }
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(p) if p.dim() == *shape => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        p.dim()
                    )))
                }
                None => return Err(ModelError::MissingParam(name.clone())),
            }
        }
        if params.len() != expected.len() {
            return Err(ModelError::Config("unexpected extra parameters".into()));
        }
        Ok(ModelState {
            config,
            params,
            frozen,
            stage,
            sd_removed,
            sd_reads: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn sd_removed(&self) -> bool {
        self.sd_removed
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn codebook(&self) -> Result<Codebook, ModelError> {
        Ok(Codebook::new(self.param("codebook")?.clone())?)
    }

    /// Parameters owned by `module`.
    pub fn module_params(&self, module: ModuleKind) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params
            .iter()
            .filter(move |(n, _)| ModuleKind::of_param(n) == Some(module))
    }

    pub fn frozen(&self) -> &BTreeSet<ModuleKind> {
        &self.frozen
    }

    pub fn is_frozen(&self, module: ModuleKind) -> bool {
        self.frozen.contains(&module)
    }

    pub fn freeze(&mut self, module: ModuleKind) {
        self.frozen.insert(module);
    }

    pub fn unfreeze(&mut self, module: ModuleKind) {
        self.frozen.remove(&module);
    }

    /// Freezes every module except `trainable`.
    pub fn train_only(&mut self, trainable: &[ModuleKind]) {
        self.frozen = ModuleKind::ALL
            .into_iter()
            .filter(|m| !trainable.contains(m))
            .collect();
    }

    pub fn frozen_mask(&self) -> u8 {
        self.frozen.iter().fold(0, |acc, m| acc | m.bit())
    }

    pub fn frozen_from_mask(mask: u8) -> BTreeSet<ModuleKind> {
        ModuleKind::ALL
            .into_iter()
            .filter(|m| mask & m.bit() != 0)
            .collect()
    }

    pub fn is_trainable_param(&self, name: &str) -> bool {
        ModuleKind::of_param(name).is_some_and(|m| !self.is_frozen(m))
    }

    /// Number of speaker-table reads since the last reset.
    pub fn sd_reads(&self) -> u64 {
        self.sd_reads.load(Ordering::Relaxed)
    }

    pub fn reset_sd_reads(&self) {
        self.sd_reads.store(0, Ordering::Relaxed);
    }

    pub(crate) fn note_sd_read(&self) {
        self.sd_reads.fetch_add(1, Ordering::Relaxed);
    }

    /// Drops the speaker tables of the speech decoder, text decoder and
    /// vocoder. Each is replaced by a trainable hidden-layer bias initialised
    /// to the mean projected embedding over training speakers. All other
    /// parameters are untouched.
    pub fn remove_sd(&mut self) -> Result<(), ModelError> {
        if self.sd_removed {
            return Err(ModelError::AlreadyRemoved);
        }
        for m in SD_MODULES {
            let table = self
                .params
                .remove(&format!("{m}.spk_table"))
                .ok_or_else(|| ModelError::MissingParam(format!("{m}.spk_table")))?;
            let proj = self
                .params
                .remove(&format!("{m}.spk_proj"))
                .ok_or_else(|| ModelError::MissingParam(format!("{m}.spk_proj")))?;
            let projected = table.dot(&proj);
            let bias = projected
                .mean_axis(Axis(0))
                .expect("at least one speaker")
                .insert_axis(Axis(0));
            self.params.insert(format!("{m}.spk_bias"), bias);
        }
        self.sd_removed = true;
        self.stage = Stage::SdRemoved;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}
