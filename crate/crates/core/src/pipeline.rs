//! Stage machine: joint training, vocoder training, decoder adaptation,
//! vocoder adaptation, welding, and inference.

use crate::autodiff::{Graph, Tensor};
use crate::codebook::{quantize, CodeSequence};
use crate::corpus::{AdaptationSet, Corpus, Split};
use crate::losses::{
    adapt_loss, adapt_vocoder_loss, joint_train_loss, vocoder_train_loss, weld_loss, Batch,
    HyperParams, LossBreakdown, LossError, Objective, Part,
};
use crate::model::{
    encode_speech, encode_text, sts_stack, tts_stack, vocode, Mode, ModelError, ModelState,
    ModuleKind, Sampling, Stage,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage} requires {required}, model is at {found}")]
    StageOrder {
        stage: &'static str,
        required: &'static str,
        found: &'static str,
    },
    #[error("adaptation data must be untranscribed")]
    Transcribed,
    #[error("no {0} utterances in corpus")]
    NoData(&'static str),
    #[error("non-finite value at {stage} step {step}: {source}")]
    NonFinite {
        stage: &'static str,
        step: usize,
        source: LossError,
        /// State before the failing step.
        last_good: Box<ModelState>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimizer {
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer { lr: 1.0, clip: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub hyper: HyperParams,
    pub optimizer: Optimizer,
    pub train_steps: usize,
    pub voc_steps: usize,
    pub adapt_steps: usize,
    pub adapt_voc_steps: usize,
    pub weld_steps: usize,
    /// Seeds VAE sampling noise during training.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hyper: HyperParams::default(),
            optimizer: Optimizer::default(),
            train_steps: 500,
            voc_steps: 200,
            adapt_steps: 100,
            adapt_voc_steps: 50,
            weld_steps: 50,
            seed: 0,
        }
    }
}

/// Per-step breakdowns, recorded before each update.
pub type LossLog = Vec<LossBreakdown>;

fn is_non_finite(e: &LossError) -> bool {
    matches!(
        e,
        LossError::Autodiff(crate::autodiff::AutodiffError::NonFinite { .. })
            | LossError::Model(ModelError::Autodiff(
                crate::autodiff::AutodiffError::NonFinite { .. }
            ))
    )
}

/// Full-batch gradient descent on the non-frozen parameters.
pub fn optimize<F>(
    m: &mut ModelState,
    stage: &'static str,
    steps: usize,
    opt: Optimizer,
    mut build: F,
) -> Result<LossLog, PipelineError>
where
    F: FnMut(&mut Graph, &ModelState, usize) -> Result<Objective, LossError>,
{
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let fail = |source: LossError, m: &ModelState| PipelineError::NonFinite {
            stage,
            step,
            source,
            last_good: Box::new(m.clone()),
        };
        let mut g = Graph::new();
        let obj = match build(&mut g, m, step) {
            Ok(o) => o,
            Err(e) if is_non_finite(&e) => return Err(fail(e, m)),
            Err(e) => return Err(e.into()),
        };
        let grads = g
            .backward(obj.total)
            .map_err(|e| fail(e.into(), m))?
            .params();
        let trainable: Vec<(&String, &Tensor)> = grads
            .iter()
            .filter(|(n, _)| m.is_trainable_param(n))
            .collect();
        let norm = trainable
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            let e = crate::autodiff::AutodiffError::NonFinite {
                node: obj.total.index(),
                op: "gradient norm",
            };
            return Err(fail(e.into(), m));
        }
        let scale = if norm > opt.clip {
            opt.clip / norm
        } else {
            1.0
        };
        let before = m.clone();
        for (name, grad) in trainable {
            let p = m.param_mut(name)?;
            p.scaled_add(-opt.lr * scale, grad);
        }
        if m.params()
            .values()
            .any(|t| t.iter().any(|v| !v.is_finite()))
        {
            let e = crate::autodiff::AutodiffError::NonFinite {
                node: obj.total.index(),
                op: "parameter update",
            };
            return Err(PipelineError::NonFinite {
                stage,
                step,
                source: e.into(),
                last_good: Box::new(before),
            });
        }
        if step % 50 == 0 || step + 1 == steps {
            log::info!("{stage} step {step}: total {:.6}", obj.breakdown.total);
        }
        log.push(obj.breakdown);
    }
    Ok(log)
}

fn require(
    m: &ModelState,
    stage: &'static str,
    allowed: &[Stage],
    required: &'static str,
) -> Result<(), PipelineError> {
    if allowed.contains(&m.stage()) {
        Ok(())
    } else {
        Err(PipelineError::StageOrder {
            stage,
            required,
            found: m.stage().name(),
        })
    }
}

/// Batch of a corpus split with speaker ids.
pub fn split_batch(corpus: &Corpus, split: Split) -> Result<Batch, PipelineError> {
    let parts: Vec<Part<'_>> = corpus.split(split).map(|u| u.part()).collect();
    if parts.is_empty() {
        return Err(PipelineError::NoData("training"));
    }
    Ok(Batch::new(&parts)?)
}

fn sampling_for(cfg: &PipelineConfig, stage: u64, step: usize) -> Sampling {
    Sampling::Draw(cfg.seed ^ (stage << 32) ^ step as u64)
}

/// Joint supervised training of both encoders, both decoders and the
/// codebook. The vocoder stays frozen.
pub fn train_initial(
    mut m: ModelState,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<(ModelState, LossLog), PipelineError> {
    require(&m, "train", &[Stage::Initialized], "a fresh model")?;
    let batch = split_batch(corpus, Split::Train)?;
    m.train_only(&[
        ModuleKind::TextEncoder,
        ModuleKind::SpeechEncoder,
        ModuleKind::SpeechDecoder,
        ModuleKind::TextDecoder,
        ModuleKind::Codebook,
    ]);
    let log = optimize(
        &mut m,
        "train",
        cfg.train_steps,
        cfg.optimizer,
        |g, m, step| joint_train_loss(g, m, &batch, &cfg.hyper, sampling_for(cfg, 1, step)),
    )?;
    m.set_stage(Stage::Trained);
    Ok((m, log))
}

/// Separately trains the vocoder on ground-truth acoustics.
pub fn train_vocoder(
    mut m: ModelState,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<(ModelState, LossLog), PipelineError> {
    require(&m, "train-voc", &[Stage::Trained], "train")?;
    let batch = split_batch(corpus, Split::Train)?;
    m.train_only(&[ModuleKind::Vocoder]);
    let log = optimize(
        &mut m,
        "train-voc",
        cfg.voc_steps,
        cfg.optimizer,
        |g, m, _| vocoder_train_loss(g, m, &batch),
    )?;
    m.set_stage(Stage::VocoderTrained);
    Ok((m, log))
}

fn untranscribed(batch: &Batch) -> Result<(), PipelineError> {
    if batch.symbols.is_some() {
        return Err(PipelineError::Transcribed);
    }
    Ok(())
}

/// Removes the speaker-dependent components, then fine-tunes the speech
/// decoder alone on untranscribed target speech.
pub fn adapt_batch(
    mut m: ModelState,
    batch: &Batch,
    cfg: &PipelineConfig,
) -> Result<(ModelState, LossLog), PipelineError> {
    require(&m, "adapt", &[Stage::VocoderTrained], "train-voc")?;
    untranscribed(batch)?;
    m.remove_sd()?;
    m.train_only(&[ModuleKind::SpeechDecoder]);
    let log = optimize(
        &mut m,
        "adapt",
        cfg.adapt_steps,
        cfg.optimizer,
        |g, m, _| adapt_loss(g, m, batch),
    )?;
    m.set_stage(Stage::Adapted);
    Ok((m, log))
}

pub fn adapt(
    m: ModelState,
    set: &AdaptationSet,
    cfg: &PipelineConfig,
) -> Result<(ModelState, LossLog), PipelineError> {
    adapt_batch(m, &adaptation_batch(set)?, cfg)
}

/// Fine-tunes the vocoder alone on the target waveforms. Runs after
/// [`adapt`].
pub fn adapt_vocoder(
    mut m: ModelState,
    set: &AdaptationSet,
    cfg: &PipelineConfig,
) -> Result<(ModelState, LossLog), PipelineError> {
    require(&m, "adapt-voc", &[Stage::Adapted], "adapt")?;
    let batch = adaptation_batch(set)?;
    m.train_only(&[ModuleKind::Vocoder]);
    let log = optimize(
        &mut m,
        "adapt-voc",
        cfg.adapt_voc_steps,
        cfg.optimizer,
        |g, m, _| adapt_vocoder_loss(g, m, &batch),
    )?;
    m.set_stage(Stage::VocoderAdapted);
    Ok((m, log))
}

/// Jointly tunes the speech decoder and vocoder.
pub fn weld(
    mut m: ModelState,
    set: &AdaptationSet,
    cfg: &PipelineConfig,
) -> Result<(ModelState, LossLog), PipelineError> {
    require(
        &m,
        "weld",
        &[Stage::Adapted, Stage::VocoderAdapted],
        "adapt",
    )?;
    let batch = adaptation_batch(set)?;
    m.train_only(&[ModuleKind::SpeechDecoder, ModuleKind::Vocoder]);
    let log = optimize(&mut m, "weld", cfg.weld_steps, cfg.optimizer, |g, m, _| {
        weld_loss(g, m, &batch, &cfg.hyper)
    })?;
    m.set_stage(Stage::Welded);
    Ok((m, log))
}

pub fn adaptation_batch(set: &AdaptationSet) -> Result<Batch, PipelineError> {
    if set.is_empty() {
        return Err(PipelineError::NoData("adaptation"));
    }
    let batch = Batch::new(&set.parts())?;
    untranscribed(&batch)?;
    Ok(batch)
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub acoustic: Tensor,
    /// `T×wave_k`; row-major flattening gives the waveform.
    pub wave: Tensor,
    /// Code indices of the latents. Outside VQ mode the latents are not
    /// snapped during decoding, and this is their nearest-code labelling.
    pub codes: CodeSequence,
}

impl Inference {
    pub fn waveform(&self) -> Vec<f64> {
        self.wave.iter().copied().collect()
    }
}

fn warn_unwelded(m: &ModelState, what: &str) {
    if m.stage() != Stage::Welded {
        log::warn!("{what} on a model at stage {}, not weld", m.stage().name());
    }
}

fn codes_for(
    m: &ModelState,
    z: &Tensor,
    codes: Option<CodeSequence>,
) -> Result<CodeSequence, PipelineError> {
    match codes {
        Some(c) => Ok(c),
        None => Ok(quantize(z, &m.codebook()?).map_err(ModelError::from)?),
    }
}

/// Text encoder, codebook, speech decoder, vocoder.
pub fn infer_tts(x: &[usize], m: &ModelState) -> Result<Inference, PipelineError> {
    warn_unwelded(m, "TTS inference");
    let out = tts_stack(x, None, m)?;
    let wave = vocode(&out.acoustic, None, m)?;
    let codes = codes_for(m, &out.latents.z, out.codes)?;
    Ok(Inference {
        acoustic: out.acoustic,
        wave,
        codes,
    })
}

/// Speech encoder, codebook, speech decoder, vocoder. The source speaker
/// need not be known.
pub fn infer_vc(y: &Tensor, m: &ModelState) -> Result<Inference, PipelineError> {
    warn_unwelded(m, "VC inference");
    let out = sts_stack(y, None, m)?;
    let wave = vocode(&out.acoustic, None, m)?;
    let codes = codes_for(m, &out.latents.z, out.codes)?;
    Ok(Inference {
        acoustic: out.acoustic,
        wave,
        codes,
    })
}

/// Code indices of the text- and speech-encoded latents of one utterance.
pub fn code_pair(
    x: &[usize],
    y: &Tensor,
    m: &ModelState,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let cb = m.codebook()?;
    let zt = encode_text(x, m, Sampling::Mean)?.z;
    let zs = encode_speech(y, m, Sampling::Mean)?.z;
    let qt = quantize(&zt, &cb).map_err(ModelError::from)?;
    let qs = quantize(&zs, &cb).map_err(ModelError::from)?;
    Ok((qt.indices, qs.indices))
}

/// Per test utterance: VC speaker distances to the target and to the
/// source voice, and the content error of VC and TTS output.
#[derive(Debug, Clone, PartialEq)]
pub struct CloneRow {
    pub utterance: usize,
    pub source: usize,
    pub to_target: f64,
    pub to_source: f64,
    pub vc_error: f64,
    pub tts_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloneReport {
    pub target: usize,
    pub rows: Vec<CloneRow>,
}

impl CloneReport {
    /// Fraction of utterances whose VC output is nearer the target voice.
    pub fn closer_to_target(&self) -> f64 {
        let n = self
            .rows
            .iter()
            .filter(|r| r.to_target < r.to_source)
            .count();
        n as f64 / self.rows.len().max(1) as f64
    }

    pub fn vc_error(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.vc_error))
    }

    pub fn tts_error(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.tts_error))
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "utterance_id,source_speaker,target_speaker,dist_target,dist_source,vc_content_error,tts_content_error")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:?},{:?},{:?},{:?}",
                r.utterance,
                r.source,
                self.target,
                r.to_target,
                r.to_source,
                r.vc_error,
                r.tts_error
            )?;
        }
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Converts every test utterance to the cloned voice and synthesizes its
/// transcript. Content is scored by the model's own speech-to-text stack.
pub fn evaluate_clone(
    corpus: &Corpus,
    target: usize,
    m: &ModelState,
) -> Result<CloneReport, PipelineError> {
    let target_spec = corpus.speaker(target)?;
    let mut rows = Vec::new();
    for u in corpus.split(Split::Test) {
        let vc = infer_vc(&u.y, m)?;
        let tts = infer_tts(&u.x, m)?;
        let vc_read = crate::metrics::recognize(&vc.acoustic, None, m)?;
        let tts_read = crate::metrics::recognize(&tts.acoustic, None, m)?;
        rows.push(CloneRow {
            utterance: u.id,
            source: u.speaker,
            to_target: crate::metrics::speaker_distance(&vc.acoustic, target_spec),
            to_source: crate::metrics::speaker_distance(&vc.acoustic, corpus.speaker(u.speaker)?),
            vc_error: crate::metrics::content_error(&vc_read, &u.x)?,
            tts_error: crate::metrics::content_error(&tts_read, &u.x)?,
        });
    }
    if rows.is_empty() {
        return Err(PipelineError::NoData("test"));
    }
    Ok(CloneReport { target, rows })
}

/// Every stage log of a complete run for one target speaker.
#[derive(Debug, Clone, Default)]
pub struct RunLogs {
    pub train: LossLog,
    pub voc: LossLog,
    pub adapt: LossLog,
    pub adapt_voc: LossLog,
    pub weld: LossLog,
}

/// Trains the speaker-independent base model (joint plus vocoder).
pub fn train_base(
    mode: Mode,
    model_cfg: crate::model::ModelConfig,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<(ModelState, RunLogs), PipelineError> {
    let m = ModelState::new(crate::model::ModelConfig { mode, ..model_cfg })?;
    let (m, train) = train_initial(m, corpus, cfg)?;
    let (m, voc) = train_vocoder(m, corpus, cfg)?;
    Ok((
        m,
        RunLogs {
            train,
            voc,
            ..Default::default()
        },
    ))
}

/// Clones a trained base model onto one target speaker.
pub fn clone_voice(
    base: &ModelState,
    set: &AdaptationSet,
    cfg: &PipelineConfig,
    logs: &mut RunLogs,
) -> Result<ModelState, PipelineError> {
    let (m, a) = adapt(base.clone(), set, cfg)?;
    let (m, av) = adapt_vocoder(m, set, cfg)?;
    let (m, w) = weld(m, set, cfg)?;
    logs.adapt = a;
    logs.adapt_voc = av;
    logs.weld = w;
    Ok(m)
}
