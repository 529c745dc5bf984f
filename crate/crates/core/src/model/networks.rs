//! In-graph network definitions and the four encoder/decoder stacks.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Mode, ModelError, ModelState};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::codebook::{quantize_node, CodeSequence};

/// How a Gaussian encoder turns `(μ, σ)` into `z`. Ignored outside VAE mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// `z = μ` (equivalently σ forced to zero).
    Mean,
    /// `z = μ + σ·ε` with `ε ~ N(0, I)` drawn from the given seed.
    Draw(u64),
}

impl Sampling {
    fn stream(self, stream: u64) -> Option<ChaCha8Rng> {
        match self {
            Sampling::Mean => None,
            Sampling::Draw(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                Some(rng)
            }
        }
    }
}

const NORM_EPS: f64 = 1e-4;

/// Per-utterance, per-dimension standardization. A voice acts on every
/// dimension as `gain·p + bias`, which this cancels up to noise.
pub fn normalize_utterances(y: &Tensor, ranges: &[Range<usize>]) -> Tensor {
    let mut out = y.clone();
    for r in ranges {
        if r.is_empty() {
            continue;
        }
        let mut block = out.slice_mut(ndarray::s![r.clone(), ..]);
        for mut col in block.columns_mut() {
            let mean = col.mean().expect("non-empty range");
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            let scale = (var + NORM_EPS).sqrt();
            col.mapv_inplace(|v| (v - mean) / scale);
        }
    }
    out
}

/// Utterance boundaries inside a concatenated batch, with the speaker of
/// each utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLayout {
    ranges: Vec<Range<usize>>,
    speakers: Vec<Option<usize>>,
}

impl FrameLayout {
    pub fn single(len: usize, speaker: Option<usize>) -> Self {
        FrameLayout {
            ranges: vec![0..len],
            speakers: vec![speaker],
        }
    }

    pub fn from_lengths(lengths: &[usize], speakers: &[Option<usize>]) -> Self {
        assert_eq!(lengths.len(), speakers.len());
        let mut at = 0;
        let ranges = lengths
            .iter()
            .map(|&l| {
                let r = at..at + l;
                at += l;
                r
            })
            .collect();
        FrameLayout {
            ranges,
            speakers: speakers.to_vec(),
        }
    }

    pub fn frames(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn speakers(&self) -> &[Option<usize>] {
        &self.speakers
    }

    /// For each frame, the index of the frame `lag` steps earlier in the same
    /// utterance, or `None` before the utterance start.
    pub fn lag_index(&self, lag: usize) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.frames());
        for r in &self.ranges {
            for t in r.clone() {
                out.push((t >= r.start + lag).then(|| t - lag));
            }
        }
        out
    }

    fn frame_speakers(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.frames());
        for (r, s) in self.ranges.iter().zip(&self.speakers) {
            out.extend(std::iter::repeat_n(*s, r.len()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub z: NodeId,
    pub mu: NodeId,
    /// Present in VAE mode only.
    pub log_sigma: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    /// What the speech decoder consumes.
    pub decoder_input: NodeId,
    /// Gathered code vectors (VQ mode only).
    pub q: Option<NodeId>,
    pub indices: Option<Vec<usize>>,
}

/// Builds network forward passes into a graph, adding each parameter at most
/// once.
pub struct Forward<'g, 'm> {
    pub g: &'g mut Graph,
    pub m: &'m ModelState,
    cache: HashMap<String, NodeId>,
}

impl<'g, 'm> Forward<'g, 'm> {
    pub fn new(g: &'g mut Graph, m: &'m ModelState) -> Self {
        Forward {
            g,
            m,
            cache: HashMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let id = self.g.param(name, self.m.param(name)?.clone())?;
        self.cache.insert(name.to_string(), id);
        Ok(id)
    }

    fn dense(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId, ModelError> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let h = self.g.matmul(x, w)?;
        Ok(self.g.add_row(h, b)?)
    }

    pub fn one_hot_symbols(&mut self, symbols: &[usize]) -> Result<NodeId, ModelError> {
        let v = self.m.config().vocab;
        let mut oh = Array2::zeros((symbols.len(), v));
        for (t, &s) in symbols.iter().enumerate() {
            if s >= v {
                return Err(ModelError::UnknownSymbol {
                    symbol: s,
                    vocab: v,
                });
            }
            oh[[t, s]] = 1.0;
        }
        Ok(self.g.constant(oh)?)
    }

    pub fn acoustic(&mut self, y: &Tensor) -> Result<NodeId, ModelError> {
        let a = self.m.config().acoustic_dim;
        if y.ncols() != a {
            return Err(ModelError::FeatureDim {
                expected: a,
                got: y.ncols(),
            });
        }
        Ok(self.g.constant(y.clone())?)
    }

    fn encoder(
        &mut self,
        prefix: &str,
        input: NodeId,
        sampling: Sampling,
        stream: u64,
    ) -> Result<EncoderOutput, ModelError> {
        let pre = self.dense(input, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.g.tanh(pre)?;
        let mu = self.dense(h, &format!("{prefix}.w_mu"), &format!("{prefix}.b_mu"))?;
        if self.m.mode() != Mode::Vae {
            return Ok(EncoderOutput {
                z: mu,
                mu,
                log_sigma: None,
            });
        }
        let log_sigma = self.dense(
            h,
            &format!("{prefix}.w_logsig"),
            &format!("{prefix}.b_logsig"),
        )?;
        let z = match sampling.stream(stream) {
            None => mu,
            Some(mut rng) => {
                let dim = self.g.value(mu).dim();
                let eps = self.g.decide_constant(|| {
                    Array2::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
                })?;
                let sigma = self.g.exp(log_sigma)?;
                let noise = self.g.mul(sigma, eps)?;
                self.g.add(mu, noise)?
            }
        };
        Ok(EncoderOutput {
            z,
            mu,
            log_sigma: Some(log_sigma),
        })
    }

    pub fn text_encoder(
        &mut self,
        symbols: &[usize],
        sampling: Sampling,
    ) -> Result<EncoderOutput, ModelError> {
        let x = self.one_hot_symbols(symbols)?;
        self.encoder("tenc", x, sampling, 1)
    }

    /// Each utterance of `y` is standardized per dimension before the first
    /// layer.
    pub fn speech_encoder(
        &mut self,
        y: &Tensor,
        layout: &FrameLayout,
        sampling: Sampling,
    ) -> Result<EncoderOutput, ModelError> {
        let a = self.m.config().acoustic_dim;
        if y.ncols() != a {
            return Err(ModelError::FeatureDim {
                expected: a,
                got: y.ncols(),
            });
        }
        if layout.frames() != y.nrows() {
            return Err(ModelError::Layout {
                frames: layout.frames(),
                rows: y.nrows(),
            });
        }
        let input = self.g.constant(normalize_utterances(y, layout.ranges()))?;
        self.encoder("senc", input, sampling, 2)
    }

    /// VQ mode snaps `z` to the codebook and routes it through the
    /// straight-through estimator; other modes pass `z` on unchanged.
    pub fn bottleneck(&mut self, enc: &EncoderOutput) -> Result<Bottleneck, ModelError> {
        if self.m.mode() != Mode::Vq {
            return Ok(Bottleneck {
                decoder_input: enc.z,
                q: None,
                indices: None,
            });
        }
        let cb = self.param("codebook")?;
        let (q, indices) = quantize_node(self.g, enc.z, cb)?;
        let st = self.g.straight_through(enc.z, q)?;
        Ok(Bottleneck {
            decoder_input: st,
            q: Some(q),
            indices: Some(indices),
        })
    }

    /// Adds the speaker term for `prefix` to a hidden pre-activation.
    fn condition(
        &mut self,
        prefix: &str,
        pre: NodeId,
        layout: &FrameLayout,
    ) -> Result<NodeId, ModelError> {
        if self.m.sd_removed() {
            if let Some(s) = layout.speakers().iter().flatten().next() {
                return Err(ModelError::SpeakerAfterRemoval(*s));
            }
            let bias = self.param(&format!("{prefix}.spk_bias"))?;
            return Ok(self.g.add_row(pre, bias)?);
        }
        let count = self.m.config().n_speakers;
        let frames = layout.frame_speakers();
        let mut oh = Array2::zeros((frames.len(), count));
        for (t, s) in frames.iter().enumerate() {
            let s = s.ok_or(ModelError::SpeakerRequired)?;
            if s >= count {
                return Err(ModelError::UnknownSpeaker { id: s, count });
            }
            oh[[t, s]] = 1.0;
        }
        self.m.note_sd_read();
        let oh = self.g.constant(oh)?;
        let table = self.param(&format!("{prefix}.spk_table"))?;
        let proj = self.param(&format!("{prefix}.spk_proj"))?;
        let e = self.g.matmul(oh, table)?;
        let c = self.g.matmul(e, proj)?;
        Ok(self.g.add(pre, c)?)
    }

    fn conditioned_mlp(
        &mut self,
        prefix: &str,
        x: NodeId,
        layout: &FrameLayout,
    ) -> Result<NodeId, ModelError> {
        if self.g.shape(x)[0] != layout.frames() {
            return Err(ModelError::Config(format!(
                "{prefix}: {} frames but layout covers {}",
                self.g.shape(x)[0],
                layout.frames()
            )));
        }
        let pre = self.dense(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let pre = self.condition(prefix, pre, layout)?;
        let h = self.g.tanh(pre)?;
        self.dense(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Acoustic prediction from per-frame latents and a causal window.
    pub fn speech_decoder(
        &mut self,
        input: NodeId,
        layout: &FrameLayout,
    ) -> Result<NodeId, ModelError> {
        let mut parts = vec![input];
        for lag in 1..self.m.config().window {
            parts.push(self.g.gather_rows(input, &layout.lag_index(lag))?);
        }
        let windowed = self.g.concat_cols(&parts)?;
        self.conditioned_mlp("sdec", windowed, layout)
    }

    /// Per-frame symbol logits.
    pub fn text_decoder_logits(
        &mut self,
        z: NodeId,
        layout: &FrameLayout,
    ) -> Result<NodeId, ModelError> {
        self.conditioned_mlp("tdec", z, layout)
    }

    /// `wave_k` waveform samples per acoustic frame.
    pub fn vocoder(&mut self, y: NodeId, layout: &FrameLayout) -> Result<NodeId, ModelError> {
        self.conditioned_mlp("voc", y, layout)
    }
}

/// Continuous latents of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub z: Tensor,
    /// VAE mode only.
    pub mu: Option<Tensor>,
    /// VAE mode only; strictly positive.
    pub sigma: Option<Tensor>,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

fn latents(g: &Graph, enc: &EncoderOutput) -> LatentSequence {
    LatentSequence {
        z: g.value(enc.z).clone(),
        mu: enc.log_sigma.map(|_| g.value(enc.mu).clone()),
        sigma: enc.log_sigma.map(|ls| g.value(ls).mapv(f64::exp)),
    }
}

pub fn encode_text(
    x: &[usize],
    m: &ModelState,
    sampling: Sampling,
) -> Result<LatentSequence, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let enc = f.text_encoder(x, sampling)?;
    Ok(latents(&g, &enc))
}

pub fn encode_speech(
    y: &Tensor,
    m: &ModelState,
    sampling: Sampling,
) -> Result<LatentSequence, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let enc = f.speech_encoder(y, &FrameLayout::single(y.nrows(), None), sampling)?;
    Ok(latents(&g, &enc))
}

/// Runs the speech decoder on latent vectors (continuous `z` or code vectors).
pub fn decode_speech(
    latents: &Tensor,
    speaker: Option<usize>,
    m: &ModelState,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let x = f.g.constant(latents.clone())?;
    let out = f.speech_decoder(x, &FrameLayout::single(latents.nrows(), speaker))?;
    Ok(g.value(out).clone())
}

/// Per-frame symbol probabilities.
pub fn decode_text(
    z: &Tensor,
    speaker: Option<usize>,
    m: &ModelState,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let x = f.g.constant(z.clone())?;
    let logits = f.text_decoder_logits(x, &FrameLayout::single(z.nrows(), speaker))?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).clone())
}

/// Toy waveform, `wave_k` samples per frame, as a `T×wave_k` matrix.
pub fn vocode(y: &Tensor, speaker: Option<usize>, m: &ModelState) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let yn = f.acoustic(y)?;
    let out = f.vocoder(yn, &FrameLayout::single(y.nrows(), speaker))?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone)]
pub struct StackOutput {
    pub acoustic: Tensor,
    /// What the speech decoder consumed: the straight-through output in VQ
    /// mode, `z` otherwise.
    pub decoder_input: Tensor,
    pub latents: LatentSequence,
    /// VQ mode only.
    pub codes: Option<CodeSequence>,
}

fn speech_stack(
    f: &mut Forward<'_, '_>,
    enc: EncoderOutput,
    speaker: Option<usize>,
) -> Result<StackOutput, ModelError> {
    let frames = f.g.shape(enc.z)[0];
    let b = f.bottleneck(&enc)?;
    let out = f.speech_decoder(b.decoder_input, &FrameLayout::single(frames, speaker))?;
    let codes = match (&b.q, b.indices) {
        (Some(q), Some(indices)) => Some(CodeSequence {
            indices,
            vectors: f.g.value(*q).clone(),
        }),
        _ => None,
    };
    Ok(StackOutput {
        acoustic: f.g.value(out).clone(),
        decoder_input: f.g.value(b.decoder_input).clone(),
        latents: latents(f.g, &enc),
        codes,
    })
}

/// Text encoder → codebook → speech decoder, deterministic latents.
pub fn tts_stack(
    x: &[usize],
    speaker: Option<usize>,
    m: &ModelState,
) -> Result<StackOutput, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let enc = f.text_encoder(x, Sampling::Mean)?;
    speech_stack(&mut f, enc, speaker)
}

/// Speech encoder → codebook → speech decoder, deterministic latents.
pub fn sts_stack(
    y: &Tensor,
    speaker: Option<usize>,
    m: &ModelState,
) -> Result<StackOutput, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let enc = f.speech_encoder(y, &FrameLayout::single(y.nrows(), speaker), Sampling::Mean)?;
    speech_stack(&mut f, enc, speaker)
}

fn text_stack(
    f: &mut Forward<'_, '_>,
    enc: EncoderOutput,
    speaker: Option<usize>,
) -> Result<Tensor, ModelError> {
    let frames = f.g.shape(enc.z)[0];
    let logits = f.text_decoder_logits(enc.z, &FrameLayout::single(frames, speaker))?;
    let p = f.g.softmax(logits)?;
    Ok(f.g.value(p).clone())
}

/// Speech encoder → text decoder (bypasses the codebook).
pub fn stt_stack(y: &Tensor, speaker: Option<usize>, m: &ModelState) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let enc = f.speech_encoder(y, &FrameLayout::single(y.nrows(), speaker), Sampling::Mean)?;
    text_stack(&mut f, enc, speaker)
}

/// Text encoder → text decoder (bypasses the codebook).
pub fn ttt_stack(
    x: &[usize],
    speaker: Option<usize>,
    m: &ModelState,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, m);
    let enc = f.text_encoder(x, Sampling::Mean)?;
    text_stack(&mut f, enc, speaker)
}
