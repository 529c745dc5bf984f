//! Deterministic synthetic parallel corpus.
//!
//! Every speaker renders the same per-symbol patterns `P` through their own
//! affine voice `y_t = a ⊙ P[x_t] + b + noise`. The toy waveform expands each
//! frame into `wave_k` samples by a fixed speaker-independent map.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::blocks::{read_blocks, write_blocks};
use crate::losses::Part;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("unknown speaker {0}")]
    UnknownSpeaker(usize),
    #[error("speaker {speaker} has {available} target utterances, {requested} requested")]
    NotEnough {
        speaker: usize,
        available: usize,
        requested: usize,
    },
    #[error("corrupt corpus: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_train_speakers: usize,
    pub n_target_speakers: usize,
    /// Training utterances per training speaker, test utterances included.
    pub utterances_per_speaker: usize,
    /// Of those, how many are held out as the test split.
    pub test_per_speaker: usize,
    /// Utterances rendered for each held-out target speaker.
    pub target_utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub acoustic_dim: usize,
    pub wave_k: usize,
    pub noise: f64,
    /// Minimum distance between the analytic statistics of any two speakers.
    pub margin: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train_speakers: 8,
            n_target_speakers: 2,
            utterances_per_speaker: 16,
            test_per_speaker: 4,
            target_utterances: 20,
            min_len: 8,
            max_len: 24,
            vocab: 12,
            acoustic_dim: 8,
            wave_k: 4,
            noise: 0.02,
            margin: 0.5,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.n_train_speakers == 0 || self.utterances_per_speaker == 0 {
            return bad("speaker and utterance counts must be >= 1");
        }
        if self.test_per_speaker >= self.utterances_per_speaker {
            return bad("test_per_speaker must leave at least one training utterance");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.vocab == 0 || self.acoustic_dim == 0 || self.wave_k == 0 {
            return bad("vocab, acoustic_dim and wave_k must be >= 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.margin >= 0.0) {
            return bad("noise and margin must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    Target,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Target => "target",
        })
    }
}

impl FromStr for Split {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "target" => Ok(Split::Target),
            other => Err(CorpusError::Corrupt(format!("split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub id: usize,
    /// Held-out target speakers never appear in the training split.
    pub held_out: bool,
    /// Shared per-symbol patterns, V×A.
    pub pattern: Tensor,
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    pub noise: f64,
}

impl SpeakerSpec {
    /// Noise-free rendering of a symbol sequence.
    pub fn render_clean(&self, x: &[usize]) -> Tensor {
        let mut y = Array2::zeros((x.len(), self.pattern.ncols()));
        for (t, &s) in x.iter().enumerate() {
            let row = &self.pattern.row(s) * &self.gain + &self.bias;
            y.row_mut(t).assign(&row);
        }
        y
    }

    /// Per-dimension frame mean and variance of this speaker's speech when
    /// every symbol is equally likely.
    pub fn expected_stats(&self) -> (Array1<f64>, Array1<f64>) {
        let p_mean = self.pattern.mean_axis(Axis(0)).expect("non-empty pattern");
        let p_var = self.pattern.var_axis(Axis(0), 0.0);
        let mean = &p_mean * &self.gain + &self.bias;
        let var = &p_var * &self.gain.mapv(|g| g * g) + self.noise * self.noise;
        (mean, var)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: usize,
    pub speaker: usize,
    pub split: Split,
    /// Frame-aligned symbols.
    pub x: Vec<usize>,
    pub y: Tensor,
    /// `T×wave_k` toy waveform.
    pub o: Tensor,
}

impl SynthUtterance {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Batch view for supervised training.
    pub fn part(&self) -> Part<'_> {
        Part {
            x: Some(&self.x),
            y: &self.y,
            o: Some(&self.o),
            speaker: Some(self.speaker),
        }
    }
}

/// Fixed speaker-independent expansion of acoustic frames into `k` samples
/// per frame: sample `j` is tanh of the mean of the dimensions `i ≡ j mod k`.
pub fn waveform(y: &Tensor, k: usize) -> Tensor {
    let a = y.ncols();
    Array2::from_shape_fn((y.nrows(), k), |(t, j)| {
        let (mut s, mut n) = (0.0, 0);
        let mut i = j % a.max(1);
        while i < a {
            s += y[[t, i]];
            n += 1;
            i += k;
        }
        if n == 0 {
            0.0
        } else {
            (s / n as f64).tanh()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<SynthUtterance>,
}

fn rng_for(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag);
    rng.set_stream(index);
    rng
}

fn stats_distance(a: &SpeakerSpec, b: &SpeakerSpec) -> f64 {
    let (ma, va) = a.expected_stats();
    let (mb, vb) = b.expected_stats();
    ((&ma - &mb).mapv(|v| v * v).sum() + (&va - &vb).mapv(|v| v * v).sum()).sqrt()
}

/// Symbols with runs of one to four frames, as a crude duration model.
fn symbol_sequence(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    let mut x = Vec::with_capacity(len);
    while x.len() < len {
        let s = rng.random_range(0..vocab);
        let run = rng.random_range(1..=4).min(len - x.len());
        x.extend(std::iter::repeat_n(s, run));
    }
    x
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self, CorpusError> {
        cfg.validate()?;
        let (v, a) = (cfg.vocab, cfg.acoustic_dim);
        let mut prng = rng_for(cfg.seed, 1, 0);
        let pattern = Array2::from_shape_fn((v, a), |_| prng.random_range(-1.0..1.0));
        let total = cfg.n_train_speakers + cfg.n_target_speakers;
        let mut speakers: Vec<SpeakerSpec> = Vec::with_capacity(total);
        for id in 0..total {
            let mut rng = rng_for(cfg.seed, 2, id as u64);
            // redraw until the new voice is at least `margin` from all others
            let spec = loop {
                let spec = SpeakerSpec {
                    id,
                    held_out: id >= cfg.n_train_speakers,
                    pattern: pattern.clone(),
                    gain: Array1::from_shape_fn(a, |_| rng.random_range(0.5..=2.0)),
                    bias: Array1::from_shape_fn(a, |_| rng.random_range(-0.8..=0.8)),
                    noise: cfg.noise,
                };
                if speakers
                    .iter()
                    .all(|o| stats_distance(o, &spec) >= cfg.margin)
                {
                    break spec;
                }
            };
            speakers.push(spec);
        }

        let mut utterances = Vec::new();
        for spec in &speakers {
            let (count, split_at) = if spec.held_out {
                (cfg.target_utterances, usize::MAX)
            } else {
                (
                    cfg.utterances_per_speaker,
                    cfg.utterances_per_speaker - cfg.test_per_speaker,
                )
            };
            for i in 0..count {
                let id = utterances.len();
                let mut rng = rng_for(cfg.seed, 3, id as u64);
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                let x = symbol_sequence(&mut rng, len, v);
                let noise = Normal::new(0.0, cfg.noise).expect("validated noise level");
                let y = spec.render_clean(&x)
                    + Array2::from_shape_fn((len, a), |_| noise.sample(&mut rng));
                let o = waveform(&y, cfg.wave_k);
                let split = match (spec.held_out, i < split_at) {
                    (true, _) => Split::Target,
                    (false, true) => Split::Train,
                    (false, false) => Split::Test,
                };
                utterances.push(SynthUtterance {
                    id,
                    speaker: spec.id,
                    split,
                    x,
                    y,
                    o,
                });
            }
        }
        Ok(Corpus {
            speakers,
            utterances,
        })
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerSpec, CorpusError> {
        self.speakers.get(id).ok_or(CorpusError::UnknownSpeaker(id))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthUtterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn training_speakers(&self) -> Vec<usize> {
        self.speakers
            .iter()
            .filter(|s| !s.held_out)
            .map(|s| s.id)
            .collect()
    }

    pub fn target_speakers(&self) -> Vec<usize> {
        self.speakers
            .iter()
            .filter(|s| s.held_out)
            .map(|s| s.id)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut spk = BufWriter::new(File::create(dir.join("speakers.bin"))?);
        let mut blocks: Vec<(String, Tensor)> = Vec::new();
        if let Some(first) = self.speakers.first() {
            blocks.push(("pattern".into(), first.pattern.clone()));
        }
        for s in &self.speakers {
            let row = |v: &Array1<f64>| v.clone().insert_axis(Axis(0));
            blocks.push((format!("gain.{}", s.id), row(&s.gain)));
            blocks.push((format!("bias.{}", s.id), row(&s.bias)));
            blocks.push((
                format!("noise.{}", s.id),
                Array2::from_elem((1, 1), s.noise),
            ));
            blocks.push((
                format!("held_out.{}", s.id),
                Array2::from_elem((1, 1), if s.held_out { 1.0 } else { 0.0 }),
            ));
        }
        write_blocks(&mut spk, blocks.iter().map(|(n, t)| (n.as_str(), t)))?;
        spk.flush()?;

        let mut manifest = BufWriter::new(File::create(dir.join("manifest.csv"))?);
        writeln!(manifest, "utterance_id,speaker_id,length,split")?;
        for u in &self.utterances {
            writeln!(manifest, "{},{},{},{}", u.id, u.speaker, u.len(), u.split)?;
            let x = Array2::from_shape_fn((u.len(), 1), |(t, _)| u.x[t] as f64);
            let mut w = BufWriter::new(File::create(dir.join(format!("utt_{:05}.bin", u.id)))?);
            write_blocks(&mut w, [("x", &x), ("y", &u.y), ("o", &u.o)].into_iter())?;
            w.flush()?;
        }
        manifest.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let corrupt = |m: String| CorpusError::Corrupt(m);
        let blocks: BTreeMap<String, Tensor> =
            read_blocks(&mut BufReader::new(File::open(dir.join("speakers.bin"))?))?
                .into_iter()
                .collect();
        let pattern = blocks
            .get("pattern")
            .cloned()
            .unwrap_or_else(|| Array2::zeros((0, 0)));
        let mut speakers = Vec::new();
        for id in 0.. {
            let Some(gain) = blocks.get(&format!("gain.{id}")) else {
                break;
            };
            let get = |k: &str| {
                blocks
                    .get(&format!("{k}.{id}"))
                    .ok_or_else(|| corrupt(format!("missing {k}.{id}")))
            };
            speakers.push(SpeakerSpec {
                id,
                held_out: get("held_out")?[[0, 0]] != 0.0,
                pattern: pattern.clone(),
                gain: gain.row(0).to_owned(),
                bias: get("bias")?.row(0).to_owned(),
                noise: get("noise")?[[0, 0]],
            });
        }

        let manifest = BufReader::new(File::open(dir.join("manifest.csv"))?);
        let mut utterances = Vec::new();
        for line in manifest.lines().skip(1) {
            let line = line?;
            let f: Vec<&str> = line.split(',').collect();
            let [id, speaker, len, split] = f[..] else {
                return Err(corrupt(format!("manifest line {line:?}")));
            };
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| corrupt(format!("number {s:?}")))
            };
            let (id, speaker, len, split) = (num(id)?, num(speaker)?, num(len)?, split.parse()?);
            let file = dir.join(format!("utt_{id:05}.bin"));
            let mut b: BTreeMap<String, Tensor> =
                read_blocks(&mut BufReader::new(File::open(file)?))?
                    .into_iter()
                    .collect();
            let mut take = |k: &str| {
                b.remove(k)
                    .ok_or_else(|| corrupt(format!("utterance {id} lacks {k}")))
            };
            let x: Vec<usize> = take("x")?.iter().map(|&v| v as usize).collect();
            let (y, o) = (take("y")?, take("o")?);
            if x.len() != len || y.nrows() != len || o.nrows() != len {
                return Err(corrupt(format!("utterance {id} length mismatch")));
            }
            utterances.push(SynthUtterance {
                id,
                speaker,
                split,
                x,
                y,
                o,
            });
        }
        Ok(Corpus {
            speakers,
            utterances,
        })
    }
}

/// Untranscribed speech of one speaker: acoustics and waveforms only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSet {
    pub speaker: usize,
    pub items: Vec<UntranscribedUtterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UntranscribedUtterance {
    pub id: usize,
    pub y: Tensor,
    pub o: Tensor,
}

impl AdaptationSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Batch views with no symbols and no speaker id.
    pub fn parts(&self) -> Vec<Part<'_>> {
        self.items
            .iter()
            .map(|u| Part {
                x: None,
                y: &u.y,
                o: Some(&u.o),
                speaker: None,
            })
            .collect()
    }
}

/// Transcripts withheld from an adaptation set, for evaluation only.
#[derive(Debug, Clone, Default)]
pub struct TranscriptKey {
    transcripts: BTreeMap<usize, Vec<usize>>,
}

impl TranscriptKey {
    pub fn lookup(&self, id: usize) -> Option<&[usize]> {
        self.transcripts.get(&id).map(Vec::as_slice)
    }
}

/// The first `count` utterances of `speaker` (target split for held-out
/// speakers, otherwise every split) with their transcripts removed.
pub fn strip_transcripts(
    corpus: &Corpus,
    speaker: usize,
    count: usize,
) -> Result<(AdaptationSet, TranscriptKey), CorpusError> {
    corpus.speaker(speaker)?;
    let pool: Vec<&SynthUtterance> = corpus
        .utterances
        .iter()
        .filter(|u| u.speaker == speaker)
        .collect();
    if pool.len() < count {
        return Err(CorpusError::NotEnough {
            speaker,
            available: pool.len(),
            requested: count,
        });
    }
    let mut key = TranscriptKey::default();
    let items = pool[..count]
        .iter()
        .map(|u| {
            key.transcripts.insert(u.id, u.x.clone());
            UntranscribedUtterance {
                id: u.id,
                y: u.y.clone(),
                o: u.o.clone(),
            }
        })
        .collect();
    Ok((AdaptationSet { speaker, items }, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            utterances_per_speaker: 4,
            test_per_speaker: 1,
            target_utterances: 5,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            Corpus::generate(&small()).unwrap(),
            Corpus::generate(&small()).unwrap()
        );
        let other = Corpus::generate(&CorpusConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(other, Corpus::generate(&small()).unwrap());
    }

    #[test]
    fn shapes_and_ranges() {
        let c = Corpus::generate(&small()).unwrap();
        assert_eq!(c.speakers.len(), 10);
        assert_eq!(c.utterances.len(), 8 * 4 + 2 * 5);
        for u in &c.utterances {
            assert!((8..=24).contains(&u.len()));
            assert_eq!(u.y.dim(), (u.len(), 8));
            assert_eq!(u.o.dim(), (u.len(), 4));
            assert!(u.x.iter().all(|&s| s < 12));
        }
        for s in &c.speakers {
            assert!(s.gain.iter().all(|g| (0.5..=2.0).contains(g)));
        }
    }

    #[test]
    fn held_out_never_in_training() {
        let c = Corpus::generate(&small()).unwrap();
        let targets = c.target_speakers();
        assert_eq!(targets, vec![8, 9]);
        assert!(c.split(Split::Train).all(|u| !targets.contains(&u.speaker)));
        assert!(c.split(Split::Test).all(|u| !targets.contains(&u.speaker)));
        assert_eq!(c.split(Split::Test).count(), 8);
    }

    #[test]
    fn speakers_respect_margin() {
        let c = Corpus::generate(&small()).unwrap();
        for a in &c.speakers {
            for b in &c.speakers {
                if a.id != b.id {
                    assert!(stats_distance(a, b) >= 0.5);
                }
            }
        }
    }

    #[test]
    fn single_speaker_shares_transform() {
        let c = Corpus::generate(&CorpusConfig {
            n_train_speakers: 1,
            n_target_speakers: 0,
            ..small()
        })
        .unwrap();
        assert!(c.utterances.iter().all(|u| u.speaker == 0));
        assert_eq!(c.speakers.len(), 1);
    }

    #[test]
    fn different_voices_render_differently() {
        let c = Corpus::generate(&small()).unwrap();
        let x = &c.utterances[0].x;
        let a = c.speakers[0].render_clean(x);
        let b = c.speakers[1].render_clean(x);
        let dist = (&a - &b)
            .rows()
            .into_iter()
            .map(|r| r.mapv(|v| v * v).sum().sqrt())
            .sum::<f64>()
            / x.len() as f64;
        assert!(dist > 0.0);
    }

    #[test]
    fn y_is_pattern_plus_noise() {
        let cfg = CorpusConfig {
            noise: 0.0,
            ..small()
        };
        let c = Corpus::generate(&cfg).unwrap();
        for u in &c.utterances {
            assert_eq!(u.y, c.speakers[u.speaker].render_clean(&u.x));
            assert_eq!(u.o, waveform(&u.y, 4));
        }
    }

    #[test]
    fn strip_and_recover() {
        let c = Corpus::generate(&small()).unwrap();
        let (set, key) = strip_transcripts(&c, 8, 3).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set
            .parts()
            .iter()
            .all(|p| p.x.is_none() && p.speaker.is_none()));
        for item in &set.items {
            let u = &c.utterances[item.id];
            assert_eq!(key.lookup(item.id), Some(&u.x[..]));
        }
        assert!(matches!(
            strip_transcripts(&c, 99, 1),
            Err(CorpusError::UnknownSpeaker(99))
        ));
        assert!(matches!(
            strip_transcripts(&c, 8, 6),
            Err(CorpusError::NotEnough { .. })
        ));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::generate(&small()).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(manifest.starts_with("utterance_id,speaker_id,length,split\n0,0,"));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = CorpusConfig {
            min_len: 30,
            ..small()
        };
        assert!(Corpus::generate(&cfg).is_err());
    }
}
