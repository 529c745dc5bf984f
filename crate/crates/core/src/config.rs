//! Plain-text run configuration: `key = value` lines grouped in sections.
//!
//! ```text
//! seed = 0
//! mode = vq
//!
//! [hyper]
//! alpha = 0.1
//! beta = 0.25
//! ```
//!
//! Every key is optional. `alpha` sets both `alpha_sts` and `alpha_stt`.
//! All randomness derives from the root `seed`.

use std::fmt::Write as _;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::losses::HyperParams;
use crate::model::{Mode, ModelConfig};
use crate::pipeline::{Optimizer, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub hyper: HyperParams,
    pub codebook_k: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub speaker_dim: usize,
    pub corpus: CorpusConfig,
    pub lr: f64,
    pub clip: f64,
    pub train_steps: usize,
    pub voc_steps: usize,
    pub adapt_steps: usize,
    pub adapt_voc_steps: usize,
    pub weld_steps: usize,
    /// Adaptation-set size.
    pub adapt_utterances: usize,
    /// Index among the held-out speakers.
    pub target: usize,
    /// Nominal frame rate for bit-rate reporting.
    pub frames_per_second: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let m = ModelConfig::default();
        RunConfig {
            seed: 0,
            mode: Mode::Vq,
            hyper: HyperParams::default(),
            codebook_k: m.codebook_size,
            latent_dim: m.latent_dim,
            hidden: m.hidden,
            window: m.window,
            speaker_dim: m.speaker_dim,
            corpus: CorpusConfig::default(),
            lr: p.optimizer.lr,
            clip: p.optimizer.clip,
            train_steps: p.train_steps,
            voc_steps: p.voc_steps,
            adapt_steps: p.adapt_steps,
            adapt_voc_steps: p.adapt_voc_steps,
            weld_steps: p.weld_steps,
            adapt_utterances: 20,
            target: 0,
            frames_per_second: 100.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut c = RunConfig::default();
        for (section, props) in &ini {
            for (key, value) in props.iter() {
                let full = match section {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                c.set(&full, value)?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one `section.key` (or bare root key).
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let c = &mut self.corpus;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "mode" => {
                self.mode = v.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                })?
            }
            "hyper.alpha" => {
                self.hyper.alpha_sts = parse(key, v)?;
                self.hyper.alpha_stt = self.hyper.alpha_sts;
            }
            "hyper.alpha_sts" => self.hyper.alpha_sts = parse(key, v)?,
            "hyper.alpha_stt" => self.hyper.alpha_stt = parse(key, v)?,
            "hyper.beta" => self.hyper.beta = parse(key, v)?,
            "hyper.gamma" => self.hyper.gamma = parse(key, v)?,
            "hyper.delta_vq" => self.hyper.delta_vq = parse(key, v)?,
            "hyper.delta_c" => self.hyper.delta_c = parse(key, v)?,
            "model.codebook_k" => self.codebook_k = parse(key, v)?,
            "model.latent_dim" => self.latent_dim = parse(key, v)?,
            "model.hidden" => self.hidden = parse(key, v)?,
            "model.window" => self.window = parse(key, v)?,
            "model.speaker_dim" => self.speaker_dim = parse(key, v)?,
            "corpus.train_speakers" => c.n_train_speakers = parse(key, v)?,
            "corpus.target_speakers" => c.n_target_speakers = parse(key, v)?,
            "corpus.utterances_per_speaker" => c.utterances_per_speaker = parse(key, v)?,
            "corpus.test_per_speaker" => c.test_per_speaker = parse(key, v)?,
            "corpus.target_utterances" => c.target_utterances = parse(key, v)?,
            "corpus.min_len" => c.min_len = parse(key, v)?,
            "corpus.max_len" => c.max_len = parse(key, v)?,
            "corpus.noise" => c.noise = parse(key, v)?,
            "corpus.margin" => c.margin = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.clip" => self.clip = parse(key, v)?,
            "train.train_steps" => self.train_steps = parse(key, v)?,
            "train.voc_steps" => self.voc_steps = parse(key, v)?,
            "train.adapt_steps" => self.adapt_steps = parse(key, v)?,
            "train.adapt_voc_steps" => self.adapt_voc_steps = parse(key, v)?,
            "train.weld_steps" => self.weld_steps = parse(key, v)?,
            "train.adapt_utterances" => self.adapt_utterances = parse(key, v)?,
            "train.target" => self.target = parse(key, v)?,
            "analysis.frames_per_second" => self.frames_per_second = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.hyper.validate().map_err(|e| invalid(e.to_string()))?;
        self.corpus_config()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.model_config()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(invalid("lr and clip must be > 0".into()));
        }
        if !(self.frames_per_second > 0.0 && self.frames_per_second.is_finite()) {
            return Err(invalid("frames_per_second must be > 0".into()));
        }
        if self.target >= self.corpus.n_target_speakers.max(1) {
            return Err(invalid(format!(
                "target {} outside held-out speakers",
                self.target
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            vocab: self.corpus.vocab,
            acoustic_dim: self.corpus.acoustic_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            codebook_size: self.codebook_k,
            wave_k: self.corpus.wave_k,
            speaker_dim: self.speaker_dim,
            n_speakers: self.corpus.n_train_speakers,
            window: self.window,
            seed: self.seed,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            hyper: self.hyper,
            optimizer: Optimizer {
                lr: self.lr,
                clip: self.clip,
            },
            train_steps: self.train_steps,
            voc_steps: self.voc_steps,
            adapt_steps: self.adapt_steps,
            adapt_voc_steps: self.adapt_voc_steps,
            weld_steps: self.weld_steps,
            seed: self.seed,
        }
    }

    /// Fully resolved configuration; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let c = &self.corpus;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}\nmode = {}\n", self.seed, self.mode);
        let _ = writeln!(
            s,
            "[hyper]\nalpha_sts = {:?}\nalpha_stt = {:?}\nbeta = {:?}\ngamma = {:?}\ndelta_vq = {:?}\ndelta_c = {:?}\n",
            h.alpha_sts, h.alpha_stt, h.beta, h.gamma, h.delta_vq, h.delta_c
        );
        let _ = writeln!(
            s,
            "[model]\ncodebook_k = {}\nlatent_dim = {}\nhidden = {}\nwindow = {}\nspeaker_dim = {}\n",
            self.codebook_k, self.latent_dim, self.hidden, self.window, self.speaker_dim
        );
        let _ = writeln!(
            s,
            "[corpus]\ntrain_speakers = {}\ntarget_speakers = {}\nutterances_per_speaker = {}\ntest_per_speaker = {}\ntarget_utterances = {}\nmin_len = {}\nmax_len = {}\nnoise = {:?}\nmargin = {:?}\n",
            c.n_train_speakers,
            c.n_target_speakers,
            c.utterances_per_speaker,
            c.test_per_speaker,
            c.target_utterances,
            c.min_len,
            c.max_len,
            c.noise,
            c.margin
        );
        let _ = writeln!(
            s,
            "[train]\nlr = {:?}\nclip = {:?}\ntrain_steps = {}\nvoc_steps = {}\nadapt_steps = {}\nadapt_voc_steps = {}\nweld_steps = {}\nadapt_utterances = {}\ntarget = {}\n",
            self.lr,
            self.clip,
            self.train_steps,
            self.voc_steps,
            self.adapt_steps,
            self.adapt_voc_steps,
            self.weld_steps,
            self.adapt_utterances,
            self.target
        );
        let _ = writeln!(
            s,
            "[analysis]\nframes_per_second = {:?}",
            self.frames_per_second
        );
        s
    }

    /// SHA-256 of the resolved text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
