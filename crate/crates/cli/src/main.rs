//! `vqclone`: corpus generation, staged training, inference, analysis and
//! gradient checking over one run directory.
//!
//! Exit status: 0 success, 1 other failure, 2 usage error, 3 bad config or
//! missing artifact, 4 numeric failure.

mod rundir;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vqclone::autodiff::Tensor;
use vqclone::codebook::usage_stats;
use vqclone::config::RunConfig;
use vqclone::corpus::{strip_transcripts, Corpus, Split};
use vqclone::gradcheck::{gradcheck, DEFAULT_FLOOR, DEFAULT_STEP};
use vqclone::losses::{
    adapt_loss, joint_train_loss, vocoder_train_loss, weld_loss, write_log_csv, Batch,
    LossBreakdown,
};
use vqclone::metrics::{
    bit_rate, code_overlap, codemap_svg, content_error, recognize, write_histogram_csv,
    write_overlap_csv,
};
use vqclone::model::{Mode, ModelState, ModuleKind, Sampling};
use vqclone::pipeline::{
    adapt, adapt_vocoder, code_pair, evaluate_clone, infer_tts, infer_vc, train_initial,
    train_vocoder, weld, Inference, PipelineError,
};

use rundir::RunDir;

const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "vqclone",
    version,
    about = "Toy vector-quantized voice cloning pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (key = value lines with sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Input checkpoint instead of the latest one in the run directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Latent-space mode: vq, vae or standard.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Adaptation-set size.
    #[arg(long, global = true)]
    utterances: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic corpus into <out>/corpus.
    GenData,
    /// Joint training of encoders, decoders and codebook.
    Train,
    /// Vocoder training on ground-truth acoustics.
    TrainVoc,
    /// Remove speaker tables, adapt the speech decoder, then the vocoder.
    Adapt,
    /// Joint speech decoder and vocoder tuning.
    Weld,
    /// Synthesize the test transcripts in the cloned voice.
    InferTts,
    /// Convert the test utterances to the cloned voice.
    InferVc,
    /// Code overlap, code usage, bit rate and code maps.
    Analyze,
    /// Finite-difference check of the four training objectives.
    Gradcheck,
}

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::other(format!("{}: {e}", path.display()))
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::StageOrder { .. }
            | PipelineError::Transcribed
            | PipelineError::NoData(_) => Failure::config(e.to_string()),
            PipelineError::NonFinite { .. } => Failure::numeric(e.to_string()),
            other => Failure::other(other.to_string()),
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| {
            Failure::config(format!("missing artifact: config {}: {e}", p.display()))
        })?,
        None => {
            let previous = cli.out.join("config.ini");
            if previous.exists() {
                std::fs::read_to_string(&previous).map_err(|e| Failure::io(&previous, e))?
            } else {
                String::new()
            }
        }
    };
    let mut c = RunConfig::parse(&text).map_err(|e| Failure::config(e.to_string()))?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(m) = cli.mode {
        c.mode = m;
    }
    if let Some(n) = cli.utterances {
        c.adapt_utterances = n;
    }
    c.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(c)
}

fn csv_bytes(log: &[LossBreakdown]) -> Vec<u8> {
    let mut b = Vec::new();
    write_log_csv(&mut b, log).expect("writing to memory");
    b
}

/// Saves a finished stage, or the last good state of an aborted one.
fn finish(
    dir: &RunDir,
    stage: &str,
    result: Result<(ModelState, Vec<LossBreakdown>), PipelineError>,
    parent: Option<&Path>,
) -> Result<(ModelState, PathBuf), Failure> {
    match result {
        Ok((m, log)) => {
            dir.write(&format!("{stage}_losses.csv"), &csv_bytes(&log))?;
            let path = dir.save(stage, log.len(), &m, parent, "ok")?;
            match (log.first(), log.last()) {
                (Some(a), Some(b)) => println!(
                    "{stage}: {} steps, loss {:.6} -> {:.6}, wrote {}",
                    log.len(),
                    a.total,
                    b.total,
                    path.display()
                ),
                _ => println!("{stage}: 0 steps, wrote {}", path.display()),
            }
            Ok((m, path))
        }
        Err(PipelineError::NonFinite {
            stage: s,
            step,
            source,
            last_good,
        }) => {
            let path = dir.save(stage, step, &last_good, parent, "aborted")?;
            Err(Failure::numeric(format!(
                "non-finite value in {s} at step {step}: {source}; last good state in {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn gen_data(dir: &RunDir) -> Result<(), Failure> {
    let corpus = Corpus::generate(&dir.config.corpus_config())
        .map_err(|e| Failure::config(e.to_string()))?;
    let path = dir.path("corpus");
    if path.exists() {
        std::fs::remove_dir_all(&path).map_err(|e| Failure::io(&path, e))?;
    }
    corpus
        .save(&path)
        .map_err(|e| Failure::other(e.to_string()))?;
    let count = |s| corpus.split(s).count();
    println!(
        "gen-data: {} speakers, {} train / {} test / {} target utterances, wrote {}",
        corpus.speakers.len(),
        count(Split::Train),
        count(Split::Test),
        count(Split::Target),
        path.display()
    );
    Ok(())
}

fn train(dir: &RunDir) -> Result<(), Failure> {
    let corpus = dir.corpus()?;
    let m =
        ModelState::new(dir.config.model_config()).map_err(|e| Failure::config(e.to_string()))?;
    let pc = dir.config.pipeline_config();
    finish(dir, "train", train_initial(m, &corpus, &pc), None)?;
    Ok(())
}

fn train_voc(dir: &RunDir, ckpt: Option<&Path>) -> Result<(), Failure> {
    let parent = dir.resolve(ckpt, &["train"])?;
    let m = dir.load(&parent)?;
    let corpus = dir.corpus()?;
    let pc = dir.config.pipeline_config();
    finish(
        dir,
        "train-voc",
        train_vocoder(m, &corpus, &pc),
        Some(&parent),
    )?;
    Ok(())
}

fn target_speaker(dir: &RunDir, corpus: &Corpus) -> Result<usize, Failure> {
    corpus
        .target_speakers()
        .get(dir.config.target)
        .copied()
        .ok_or_else(|| Failure::config(format!("no held-out speaker {}", dir.config.target)))
}

fn adaptation_set(
    dir: &RunDir,
    corpus: &Corpus,
) -> Result<vqclone::corpus::AdaptationSet, Failure> {
    let target = target_speaker(dir, corpus)?;
    let (set, _) = strip_transcripts(corpus, target, dir.config.adapt_utterances)
        .map_err(|e| Failure::config(e.to_string()))?;
    Ok(set)
}

fn adapt_cmd(dir: &RunDir, ckpt: Option<&Path>) -> Result<(), Failure> {
    let parent = dir.resolve(ckpt, &["train-voc"])?;
    let m = dir.load(&parent)?;
    let corpus = dir.corpus()?;
    let set = adaptation_set(dir, &corpus)?;
    let pc = dir.config.pipeline_config();
    let (m, path) = finish(dir, "adapt", adapt(m, &set, &pc), Some(&parent))?;
    finish(dir, "adapt-voc", adapt_vocoder(m, &set, &pc), Some(&path))?;
    Ok(())
}

fn weld_cmd(dir: &RunDir, ckpt: Option<&Path>) -> Result<(), Failure> {
    let parent = dir.resolve(ckpt, &["adapt-voc", "adapt"])?;
    let m = dir.load(&parent)?;
    let corpus = dir.corpus()?;
    let set = adaptation_set(dir, &corpus)?;
    let pc = dir.config.pipeline_config();
    finish(dir, "weld", weld(m, &set, &pc), Some(&parent))?;
    Ok(())
}

fn matrix_csv(header: &str, m: &Tensor) -> String {
    let mut s = String::new();
    let cols: Vec<String> = (0..m.ncols()).map(|j| format!("{header}{j}")).collect();
    let _ = writeln!(s, "frame,{}", cols.join(","));
    for (t, row) in m.rows().into_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{t},{}", vals.join(","));
    }
    s
}

fn wave_csv(out: &Inference) -> String {
    let mut s = String::from("sample,value\n");
    for (i, v) in out.waveform().iter().enumerate() {
        let _ = writeln!(s, "{i},{v:?}");
    }
    s
}

fn write_inference(dir: &RunDir, sub: &str, id: usize, out: &Inference) -> Result<(), Failure> {
    dir.write(
        &format!("{sub}/utt_{id:05}_acoustic.csv"),
        matrix_csv("a", &out.acoustic).as_bytes(),
    )?;
    dir.write(
        &format!("{sub}/utt_{id:05}_wave.csv"),
        wave_csv(out).as_bytes(),
    )?;
    let mut codes = Vec::new();
    out.codes
        .write_csv(&mut codes)
        .map_err(|e| Failure::other(e.to_string()))?;
    dir.write(&format!("{sub}/utt_{id:05}_codes.csv"), &codes)?;
    Ok(())
}

fn cloned_model(dir: &RunDir, ckpt: Option<&Path>) -> Result<ModelState, Failure> {
    let path = dir.resolve(ckpt, &["weld", "adapt-voc", "adapt"])?;
    let m = dir.load(&path)?;
    if !m.sd_removed() {
        return Err(Failure::config(format!(
            "{} is at stage {} and still has speaker tables; run adapt first",
            path.display(),
            m.stage().name()
        )));
    }
    Ok(m)
}

fn infer_tts_cmd(dir: &RunDir, ckpt: Option<&Path>) -> Result<(), Failure> {
    let m = cloned_model(dir, ckpt)?;
    let corpus = dir.corpus()?;
    let mut rows = String::from("utterance_id,content_error\n");
    let (mut total, mut n) = (0.0, 0);
    for u in corpus.split(Split::Test) {
        let out = infer_tts(&u.x, &m)?;
        write_inference(dir, "infer-tts", u.id, &out)?;
        let read = recognize(&out.acoustic, None, &m).map_err(|e| Failure::other(e.to_string()))?;
        let e = content_error(&read, &u.x).map_err(|e| Failure::other(e.to_string()))?;
        let _ = writeln!(rows, "{},{e:?}", u.id);
        total += e;
        n += 1;
    }
    let path = dir.write("infer-tts/content.csv", rows.as_bytes())?;
    println!(
        "infer-tts: {n} utterances, mean content error {:.4}, wrote {}",
        total / n.max(1) as f64,
        path.display()
    );
    Ok(())
}

fn infer_vc_cmd(dir: &RunDir, ckpt: Option<&Path>) -> Result<(), Failure> {
    let m = cloned_model(dir, ckpt)?;
    let corpus = dir.corpus()?;
    for u in corpus.split(Split::Test) {
        let out = infer_vc(&u.y, &m)?;
        write_inference(dir, "infer-vc", u.id, &out)?;
    }
    let target = target_speaker(dir, &corpus)?;
    let report = evaluate_clone(&corpus, target, &m)?;
    let mut b = Vec::new();
    report
        .write_csv(&mut b)
        .map_err(|e| Failure::other(e.to_string()))?;
    let path = dir.write("infer-vc/report.csv", &b)?;
    println!(
        "infer-vc: {} utterances, {:.1}% closer to speaker {target}, content error vc {:.4} tts {:.4}, wrote {}",
        report.rows.len(),
        100.0 * report.closer_to_target(),
        report.vc_error(),
        report.tts_error(),
        path.display()
    );
    Ok(())
}

fn analyze(dir: &RunDir, ckpt: Option<&Path>) -> Result<(), Failure> {
    let path = dir.resolve(ckpt, &["weld", "adapt-voc", "adapt", "train-voc", "train"])?;
    let m = dir.load(&path)?;
    let corpus = dir.corpus()?;
    let k = m.config().codebook_size;
    let mut rows = Vec::new();
    let mut seqs = Vec::new();
    for u in corpus.split(Split::Test) {
        let (text, speech) = code_pair(&u.x, &u.y, &m)?;
        rows.push((
            u.id,
            code_overlap(&text, &speech).map_err(|e| Failure::other(e.to_string()))?,
        ));
        let svg = codemap_svg(&text, &speech, k).map_err(|e| Failure::other(e.to_string()))?;
        dir.write(&format!("analysis/codemap_{:05}.svg", u.id), svg.as_bytes())?;
        seqs.push(text);
        seqs.push(speech);
    }
    let mut b = Vec::new();
    write_overlap_csv(&mut b, &rows).map_err(|e| Failure::other(e.to_string()))?;
    dir.write("analysis/overlap.csv", &b)?;
    let usage = usage_stats(seqs.iter().map(|s| s.as_slice()), k)
        .map_err(|e| Failure::other(e.to_string()))?;
    let mut b = Vec::new();
    write_histogram_csv(&mut b, &usage).map_err(|e| Failure::other(e.to_string()))?;
    dir.write("analysis/code_histogram.csv", &b)?;
    let fps = dir.config.frames_per_second;
    let rate = bit_rate(k, fps, Some(&usage)).map_err(|e| Failure::config(e.to_string()))?;
    let text = format!(
        "codebook_k,frames_per_second,fixed_bits_per_frame,fixed_bps,entropy_bits_per_frame,entropy_bps,used_fraction,perplexity\n{k},{fps:?},{},{:?},{:?},{:?},{:?},{:?}\n",
        rate.fixed_bits_per_frame,
        rate.fixed_bps,
        rate.entropy_bits_per_frame,
        rate.entropy_bps,
        usage.used_fraction,
        usage.perplexity
    );
    dir.write("analysis/bitrate.csv", text.as_bytes())?;
    let mean = rows.iter().map(|(_, o)| o).sum::<f64>() / rows.len().max(1) as f64;
    println!(
        "analyze: {} utterances, mean code overlap {:.4}, {} bits/frame fixed, {:.3} bits/frame entropy, wrote {}",
        rows.len(),
        mean,
        rate.fixed_bits_per_frame,
        rate.entropy_bits_per_frame,
        dir.path("analysis").display()
    );
    Ok(())
}

fn gradcheck_cmd(dir: &RunDir, ckpt: Option<&Path>) -> Result<(), Failure> {
    let m = match ckpt {
        Some(p) => dir.load(&dir.resolve(Some(p), &[])?)?,
        None => ModelState::new(dir.config.model_config())
            .map_err(|e| Failure::config(e.to_string()))?,
    };
    let corpus = dir.corpus()?;
    let h = dir.config.hyper;
    let parts: Vec<_> = corpus
        .split(Split::Train)
        .take(2)
        .map(|u| u.part())
        .collect();
    let supervised = Batch::new(&parts).map_err(|e| Failure::config(e.to_string()))?;
    let target = target_speaker(dir, &corpus)?;
    let (set, _) =
        strip_transcripts(&corpus, target, 2).map_err(|e| Failure::config(e.to_string()))?;
    let untranscribed = Batch::new(&set.parts()).map_err(|e| Failure::config(e.to_string()))?;

    use ModuleKind::*;
    let mut removed = m.clone();
    if !removed.sd_removed() {
        removed
            .remove_sd()
            .map_err(|e| Failure::other(e.to_string()))?;
    }
    let mut adapted = removed.clone();
    adapted.train_only(&[SpeechDecoder]);
    let mut welded = removed;
    welded.train_only(&[SpeechDecoder, Vocoder]);

    let mut csv = String::from("objective,checked,max_rel_error,worst_param,worst_index\n");
    let mut worst = 0.0f64;
    let mut check =
        |name: &str, r: Result<vqclone::gradcheck::GradcheckReport, _>| -> Result<(), Failure> {
            let r =
                r.map_err(|e: vqclone::losses::LossError| Failure::other(format!("{name}: {e}")))?;
            let (param, index) = r.worst.clone().unwrap_or_default();
            let _ = writeln!(
                csv,
                "{name},{},{:?},{param},{index}",
                r.checked, r.max_rel_error
            );
            println!(
                "gradcheck {name}: {} parameters, max rel error {:.3e}",
                r.checked, r.max_rel_error
            );
            worst = worst.max(r.max_rel_error);
            Ok(())
        };
    if !m.sd_removed() {
        let mut joint = m.clone();
        joint.train_only(&[
            TextEncoder,
            SpeechEncoder,
            SpeechDecoder,
            TextDecoder,
            Codebook,
        ]);
        let sampling = Sampling::Draw(dir.config.seed);
        check(
            "joint",
            gradcheck(&joint, DEFAULT_STEP, DEFAULT_FLOOR, |g, m| {
                joint_train_loss(g, m, &supervised, &h, sampling)
            }),
        )?;
        let mut voc = m.clone();
        voc.train_only(&[Vocoder]);
        check(
            "vocoder",
            gradcheck(&voc, DEFAULT_STEP, DEFAULT_FLOOR, |g, m| {
                vocoder_train_loss(g, m, &supervised)
            }),
        )?;
    }
    check(
        "adapt",
        gradcheck(&adapted, DEFAULT_STEP, DEFAULT_FLOOR, |g, m| {
            adapt_loss(g, m, &untranscribed)
        }),
    )?;
    check(
        "weld",
        gradcheck(&welded, DEFAULT_STEP, DEFAULT_FLOOR, |g, m| {
            weld_loss(g, m, &untranscribed, &h)
        }),
    )?;
    dir.write("gradcheck.csv", csv.as_bytes())?;
    if worst < GRAD_TOL {
        println!("gradcheck: max rel error {worst:.3e} < {GRAD_TOL:e}");
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradcheck: max rel error {worst:.3e} >= {GRAD_TOL:e}"
        )))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = resolve_config(cli)?;
    let dir = RunDir::open(cli.out.clone(), config)?;
    let ckpt = cli.checkpoint.as_deref();
    match cli.command {
        Command::GenData => gen_data(&dir),
        Command::Train => train(&dir),
        Command::TrainVoc => train_voc(&dir, ckpt),
        Command::Adapt => adapt_cmd(&dir, ckpt),
        Command::Weld => weld_cmd(&dir, ckpt),
        Command::InferTts => infer_tts_cmd(&dir, ckpt),
        Command::InferVc => infer_vc_cmd(&dir, ckpt),
        Command::Analyze => analyze(&dir, ckpt),
        Command::Gradcheck => gradcheck_cmd(&dir, ckpt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
