//! Training objectives built into a graph, with every term reported.
//!
//! Reductions: reconstruction terms are the MAE over all elements, latent
//! distances and the KL tie are averaged over frames and latent dimensions,
//! and the cross-entropy is averaged over frames.

use std::fmt;
use std::io::Write;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::codebook::{commitment_loss, vq_loss, CodebookError};
use crate::model::{EncoderOutput, Forward, FrameLayout, Mode, ModelError, ModelState, Sampling};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("misaligned batch item {item}: {what}")]
    Misaligned { item: usize, what: String },
    #[error("batch has no symbol transcripts")]
    MissingSymbols,
    #[error("batch has no waveform targets")]
    MissingWave,
    #[error("empty batch")]
    Empty,
    #[error("speaker-dependent components must be removed first")]
    SdPresent,
    #[error("invalid hyperparameter {0}")]
    Hyper(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub alpha_sts: f64,
    pub alpha_stt: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta_vq: f64,
    pub delta_c: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha_sts: 0.1,
            alpha_stt: 0.1,
            beta: 0.25,
            gamma: 0.01,
            delta_vq: 0.25,
            delta_c: 1.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("alpha_sts", self.alpha_sts),
            ("alpha_stt", self.alpha_stt),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta_vq", self.delta_vq),
            ("delta_c", self.delta_c),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::Hyper(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Borrowed view of one utterance for batching.
#[derive(Debug, Clone, Copy)]
pub struct Part<'a> {
    pub x: Option<&'a [usize]>,
    pub y: &'a Tensor,
    pub o: Option<&'a Tensor>,
    pub speaker: Option<usize>,
}

/// Utterances concatenated along the frame axis.
#[derive(Debug, Clone)]
pub struct Batch {
    pub layout: FrameLayout,
    pub symbols: Option<Vec<usize>>,
    pub y: Tensor,
    pub o: Option<Tensor>,
}

fn stack_rows(parts: &[&Tensor]) -> Tensor {
    let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal column counts checked")
}

impl Batch {
    pub fn new(parts: &[Part<'_>]) -> Result<Self, LossError> {
        if parts.is_empty() {
            return Err(LossError::Empty);
        }
        let a = parts[0].y.ncols();
        let k = parts[0].o.map(|o| o.ncols());
        for (i, p) in parts.iter().enumerate() {
            let t = p.y.nrows();
            let bad = |what: String| Err(LossError::Misaligned { item: i, what });
            if p.y.ncols() != a {
                return bad(format!("{} acoustic columns, expected {a}", p.y.ncols()));
            }
            if let Some(x) = p.x {
                if x.len() != t {
                    return bad(format!("{} symbols for {t} frames", x.len()));
                }
            }
            if let Some(o) = p.o {
                if o.nrows() != t || Some(o.ncols()) != k {
                    return bad(format!("waveform shape {:?} for {t} frames", o.dim()));
                }
            }
        }
        let lengths: Vec<usize> = parts.iter().map(|p| p.y.nrows()).collect();
        let speakers: Vec<Option<usize>> = parts.iter().map(|p| p.speaker).collect();
        let symbols = parts
            .iter()
            .map(|p| p.x)
            .collect::<Option<Vec<_>>>()
            .map(|xs| xs.concat());
        let o = parts
            .iter()
            .map(|p| p.o)
            .collect::<Option<Vec<_>>>()
            .map(|os| stack_rows(&os));
        let ys: Vec<&Tensor> = parts.iter().map(|p| p.y).collect();
        Ok(Batch {
            layout: FrameLayout::from_lengths(&lengths, &speakers),
            symbols,
            y: stack_rows(&ys),
            o,
        })
    }

    pub fn frames(&self) -> usize {
        self.y.nrows()
    }

    fn symbols(&self) -> Result<&[usize], LossError> {
        self.symbols.as_deref().ok_or(LossError::MissingSymbols)
    }

    fn wave(&self) -> Result<&Tensor, LossError> {
        self.o.as_ref().ok_or(LossError::MissingWave)
    }
}

/// Which objective a breakdown belongs to; decides how `total` recomposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Joint,
    TtsStack,
    StsStack,
    Vocoder,
    Adapt,
    AdaptVocoder,
    Weld,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Joint => "train",
            LossKind::TtsStack => "tts",
            LossKind::StsStack => "sts",
            LossKind::Vocoder => "train-voc",
            LossKind::Adapt => "adapt",
            LossKind::AdaptVocoder => "adapt-voc",
            LossKind::Weld => "weld",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every named term of one evaluation. Terms an objective does not use are 0.
/// `ttt` is a diagnostic and never enters `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub kind: LossKind,
    pub tts: f64,
    pub sts: f64,
    pub stt: f64,
    pub ttt: f64,
    pub tie: f64,
    pub vq_text: f64,
    pub vq_speech: f64,
    pub commit_text: f64,
    pub commit_speech: f64,
    pub voc: f64,
    pub total: f64,
}

pub const CSV_HEADER: &str =
    "step,stage,loss_tts,loss_sts,loss_stt,loss_ttt,loss_tie,loss_vq_text,loss_vq_speech,loss_c_text,loss_c_speech,loss_voc,total";

impl LossBreakdown {
    fn empty(kind: LossKind) -> Self {
        LossBreakdown {
            kind,
            tts: 0.0,
            sts: 0.0,
            stt: 0.0,
            ttt: 0.0,
            tie: 0.0,
            vq_text: 0.0,
            vq_speech: 0.0,
            commit_text: 0.0,
            commit_speech: 0.0,
            voc: 0.0,
            total: 0.0,
        }
    }

    /// The weighted sum the objective is defined as, from the reported parts.
    pub fn recompose(&self, h: &HyperParams) -> f64 {
        let tts = self.tts + h.delta_vq * self.vq_text + h.delta_c * self.commit_text;
        let sts = self.sts + h.delta_vq * self.vq_speech + h.delta_c * self.commit_speech;
        match self.kind {
            LossKind::Joint => tts + h.alpha_sts * sts + h.alpha_stt * self.stt + h.beta * self.tie,
            LossKind::TtsStack => tts,
            LossKind::StsStack => sts,
            LossKind::Vocoder | LossKind::AdaptVocoder => self.voc,
            LossKind::Adapt => self.sts,
            LossKind::Weld => self.sts + h.gamma * self.voc,
        }
    }

    pub fn write_csv_row<W: Write>(&self, w: &mut W, step: usize) -> std::io::Result<()> {
        // {:?} on f64 prints the shortest round-trip representation
        writeln!(
            w,
            "{step},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.kind,
            self.tts,
            self.sts,
            self.stt,
            self.ttt,
            self.tie,
            self.vq_text,
            self.vq_speech,
            self.commit_text,
            self.commit_speech,
            self.voc,
            self.total
        )
    }
}

/// Header plus one row per step, steps counted from 0.
pub fn write_log_csv<W: Write>(w: &mut W, log: &[LossBreakdown]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for (step, b) in log.iter().enumerate() {
        b.write_csv_row(w, step)?;
    }
    Ok(())
}

/// A loss node in a graph plus its reported breakdown.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

struct Weighted(Vec<(f64, NodeId)>);

impl Weighted {
    fn build(self, g: &mut Graph) -> Result<NodeId, LossError> {
        let mut acc: Option<NodeId> = None;
        for (w, n) in self.0 {
            if w == 0.0 {
                continue;
            }
            let term = if w == 1.0 { n } else { g.scale(n, w)? };
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => Ok(g.scalar_constant(0.0)?),
        }
    }
}

struct StackTerms {
    recon: NodeId,
    vq: Option<NodeId>,
    commit: Option<NodeId>,
}

fn reconstruct(
    f: &mut Forward<'_, '_>,
    enc: &EncoderOutput,
    target: NodeId,
    layout: &FrameLayout,
) -> Result<StackTerms, LossError> {
    let b = f.bottleneck(enc)?;
    let pred = f.speech_decoder(b.decoder_input, layout)?;
    let recon = f.g.mae(pred, target)?;
    let (vq, commit) = match b.q {
        Some(q) => (
            Some(vq_loss(f.g, enc.z, q)?),
            Some(commitment_loss(f.g, enc.z, q)?),
        ),
        None => (None, None),
    };
    Ok(StackTerms { recon, vq, commit })
}

/// `KL(N(μs, σs²) ‖ N(μt, σt²))` per latent component, averaged over frames
/// and dimensions, from log standard deviations.
pub fn gaussian_kl(
    g: &mut Graph,
    mu_s: NodeId,
    ls_s: NodeId,
    mu_t: NodeId,
    ls_t: NodeId,
) -> Result<NodeId, LossError> {
    let elems = (g.shape(mu_s)[0] * g.shape(mu_s)[1]) as f64;
    if elems == 0.0 {
        return Ok(g.scalar_constant(0.0)?);
    }
    let log_ratio = g.sub(ls_t, ls_s)?;
    let var_ratio = {
        let d = g.sub(ls_s, ls_t)?;
        let d2 = g.scale(d, 2.0)?;
        g.exp(d2)?
    };
    let diff = g.sub(mu_s, mu_t)?;
    let diff2 = g.mul(diff, diff)?;
    let inv_var_t = {
        let m2 = g.scale(ls_t, -2.0)?;
        g.exp(m2)?
    };
    let mahal = g.mul(diff2, inv_var_t)?;
    let quad = g.add(var_ratio, mahal)?;
    let half = g.scale(quad, 0.5)?;
    let per = g.add(log_ratio, half)?;
    let s = g.sum(per)?;
    let c = g.scalar_constant(-0.5 * elems)?;
    let s = g.add(s, c)?;
    Ok(g.scale(s, 1.0 / elems)?)
}

/// The latent tying term between text- and speech-encoded latents.
pub fn tie_loss(
    g: &mut Graph,
    mode: Mode,
    text: &EncoderOutput,
    speech: &EncoderOutput,
) -> Result<NodeId, LossError> {
    let (tl, sl) = (g.shape(text.z), g.shape(speech.z));
    if tl != sl {
        return Err(LossError::Misaligned {
            item: 0,
            what: format!("text latents {tl:?} vs speech latents {sl:?}"),
        });
    }
    match mode {
        Mode::Vq => {
            let t = g.stop_gradient(text.z)?;
            Ok(g.mse(t, speech.z)?)
        }
        Mode::Standard => Ok(g.mse(text.z, speech.z)?),
        Mode::Vae => {
            let missing =
                || LossError::Model(ModelError::Config("VAE encoder without σ head".into()));
            let ls_t = text.log_sigma.ok_or_else(missing)?;
            let ls_s = speech.log_sigma.ok_or_else(missing)?;
            let mu_t = g.stop_gradient(text.mu)?;
            let ls_t = g.stop_gradient(ls_t)?;
            gaussian_kl(g, speech.mu, ls_s, mu_t, ls_t)
        }
    }
}

fn value(g: &Graph, n: Option<NodeId>) -> f64 {
    n.map_or(0.0, |n| g.scalar(n))
}

/// Joint supervised objective over a transcribed batch.
pub fn joint_train_loss(
    g: &mut Graph,
    m: &ModelState,
    batch: &Batch,
    h: &HyperParams,
    sampling: Sampling,
) -> Result<Objective, LossError> {
    h.validate()?;
    let x = batch.symbols()?;
    let mut f = Forward::new(g, m);
    let y = f.g.constant(batch.y.clone())?;
    let text = f.text_encoder(x, sampling)?;
    let speech = f.speech_encoder(&batch.y, &batch.layout, sampling)?;
    let tts = reconstruct(&mut f, &text, y, &batch.layout)?;
    let sts = reconstruct(&mut f, &speech, y, &batch.layout)?;
    let stt_logits = f.text_decoder_logits(speech.z, &batch.layout)?;
    let stt = f.g.cross_entropy(stt_logits, x)?;
    let ttt_logits = f.text_decoder_logits(text.z, &batch.layout)?;
    let ttt = f.g.cross_entropy(ttt_logits, x)?;
    let tie = tie_loss(f.g, m.mode(), &text, &speech)?;
    let mut terms = vec![(1.0, tts.recon)];
    terms.extend(tts.vq.map(|n| (h.delta_vq, n)));
    terms.extend(tts.commit.map(|n| (h.delta_c, n)));
    terms.push((h.alpha_sts, sts.recon));
    terms.extend(sts.vq.map(|n| (h.alpha_sts * h.delta_vq, n)));
    terms.extend(sts.commit.map(|n| (h.alpha_sts * h.delta_c, n)));
    terms.push((h.alpha_stt, stt));
    terms.push((h.beta, tie));
    let total = Weighted(terms).build(g)?;
    let breakdown = LossBreakdown {
        tts: g.scalar(tts.recon),
        sts: g.scalar(sts.recon),
        stt: g.scalar(stt),
        ttt: g.scalar(ttt),
        tie: g.scalar(tie),
        vq_text: value(g, tts.vq),
        vq_speech: value(g, sts.vq),
        commit_text: value(g, tts.commit),
        commit_speech: value(g, sts.commit),
        total: g.scalar(total),
        ..LossBreakdown::empty(LossKind::Joint)
    };
    Ok(Objective { total, breakdown })
}

/// Text-to-speech stack objective: reconstruction plus codebook terms.
pub fn tts_stack_loss(
    g: &mut Graph,
    m: &ModelState,
    batch: &Batch,
    h: &HyperParams,
    sampling: Sampling,
) -> Result<Objective, LossError> {
    h.validate()?;
    let x = batch.symbols()?;
    let mut f = Forward::new(g, m);
    let y = f.g.constant(batch.y.clone())?;
    let text = f.text_encoder(x, sampling)?;
    let t = reconstruct(&mut f, &text, y, &batch.layout)?;
    let mut terms = vec![(1.0, t.recon)];
    terms.extend(t.vq.map(|n| (h.delta_vq, n)));
    terms.extend(t.commit.map(|n| (h.delta_c, n)));
    let total = Weighted(terms).build(g)?;
    let breakdown = LossBreakdown {
        tts: g.scalar(t.recon),
        vq_text: value(g, t.vq),
        commit_text: value(g, t.commit),
        total: g.scalar(total),
        ..LossBreakdown::empty(LossKind::TtsStack)
    };
    Ok(Objective { total, breakdown })
}

/// Speech-to-speech stack objective: reconstruction plus codebook terms.
pub fn sts_stack_loss(
    g: &mut Graph,
    m: &ModelState,
    batch: &Batch,
    h: &HyperParams,
    sampling: Sampling,
) -> Result<Objective, LossError> {
    h.validate()?;
    let mut f = Forward::new(g, m);
    let y = f.g.constant(batch.y.clone())?;
    let speech = f.speech_encoder(&batch.y, &batch.layout, sampling)?;
    let s = reconstruct(&mut f, &speech, y, &batch.layout)?;
    let mut terms = vec![(1.0, s.recon)];
    terms.extend(s.vq.map(|n| (h.delta_vq, n)));
    terms.extend(s.commit.map(|n| (h.delta_c, n)));
    let total = Weighted(terms).build(g)?;
    let breakdown = LossBreakdown {
        sts: g.scalar(s.recon),
        vq_speech: value(g, s.vq),
        commit_speech: value(g, s.commit),
        total: g.scalar(total),
        ..LossBreakdown::empty(LossKind::StsStack)
    };
    Ok(Objective { total, breakdown })
}

fn vocoder_node(f: &mut Forward<'_, '_>, batch: &Batch) -> Result<NodeId, LossError> {
    let o = batch.wave()?;
    let y = f.acoustic(&batch.y)?;
    let pred = f.vocoder(y, &batch.layout)?;
    let target = f.g.constant(o.clone())?;
    Ok(f.g.mae(pred, target)?)
}

/// MAE between the vocoder output on ground-truth acoustics and the waveform.
pub fn vocoder_train_loss(
    g: &mut Graph,
    m: &ModelState,
    batch: &Batch,
) -> Result<Objective, LossError> {
    let mut f = Forward::new(g, m);
    let voc = vocoder_node(&mut f, batch)?;
    let breakdown = LossBreakdown {
        voc: g.scalar(voc),
        total: g.scalar(voc),
        ..LossBreakdown::empty(LossKind::Vocoder)
    };
    Ok(Objective {
        total: voc,
        breakdown,
    })
}

fn sts_recon(f: &mut Forward<'_, '_>, batch: &Batch) -> Result<NodeId, LossError> {
    let y = f.acoustic(&batch.y)?;
    let speech = f.speech_encoder(&batch.y, &batch.layout, Sampling::Mean)?;
    let b = f.bottleneck(&speech)?;
    let pred = f.speech_decoder(b.decoder_input, &batch.layout)?;
    Ok(f.g.mae(pred, y)?)
}

/// Speech-decoder adaptation objective: STS reconstruction only.
pub fn adapt_loss(g: &mut Graph, m: &ModelState, batch: &Batch) -> Result<Objective, LossError> {
    if !m.sd_removed() {
        return Err(LossError::SdPresent);
    }
    let mut f = Forward::new(g, m);
    let sts = sts_recon(&mut f, batch)?;
    let breakdown = LossBreakdown {
        sts: g.scalar(sts),
        total: g.scalar(sts),
        ..LossBreakdown::empty(LossKind::Adapt)
    };
    Ok(Objective {
        total: sts,
        breakdown,
    })
}

/// Vocoder adaptation objective on the target speaker.
pub fn adapt_vocoder_loss(
    g: &mut Graph,
    m: &ModelState,
    batch: &Batch,
) -> Result<Objective, LossError> {
    if !m.sd_removed() {
        return Err(LossError::SdPresent);
    }
    let mut f = Forward::new(g, m);
    let voc = vocoder_node(&mut f, batch)?;
    let breakdown = LossBreakdown {
        voc: g.scalar(voc),
        total: g.scalar(voc),
        ..LossBreakdown::empty(LossKind::AdaptVocoder)
    };
    Ok(Objective {
        total: voc,
        breakdown,
    })
}

/// Welding objective: STS reconstruction plus γ times the vocoder loss on
/// ground-truth acoustics.
pub fn weld_loss(
    g: &mut Graph,
    m: &ModelState,
    batch: &Batch,
    h: &HyperParams,
) -> Result<Objective, LossError> {
    h.validate()?;
    if !m.sd_removed() {
        return Err(LossError::SdPresent);
    }
    let mut f = Forward::new(g, m);
    let sts = sts_recon(&mut f, batch)?;
    let voc = vocoder_node(&mut f, batch)?;
    let total = Weighted(vec![(1.0, sts), (h.gamma, voc)]).build(g)?;
    let breakdown = LossBreakdown {
        sts: g.scalar(sts),
        voc: g.scalar(voc),
        total: g.scalar(total),
        ..LossBreakdown::empty(LossKind::Weld)
    };
    Ok(Objective { total, breakdown })
}
