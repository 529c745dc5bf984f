use vqclone::config::RunConfig;
use vqclone::corpus::{strip_transcripts, Corpus, CorpusConfig, Split};
use vqclone::model::checkpoint::{read_state, write_state};
use vqclone::model::{encode_speech, Mode, ModelConfig, ModelState, Sampling, Stage};
use vqclone::pipeline::{
    adapt, adapt_vocoder, evaluate_clone, train_base, train_initial, train_vocoder, weld,
    PipelineConfig,
};

fn small() -> (Corpus, ModelConfig, PipelineConfig) {
    let corpus = Corpus::generate(&CorpusConfig {
        n_train_speakers: 3,
        n_target_speakers: 1,
        utterances_per_speaker: 4,
        test_per_speaker: 1,
        target_utterances: 4,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let mc = ModelConfig {
        hidden: 12,
        latent_dim: 8,
        codebook_size: 16,
        n_speakers: 3,
        seed: 21,
        ..Default::default()
    };
    let pc = PipelineConfig {
        train_steps: 15,
        voc_steps: 8,
        adapt_steps: 8,
        adapt_voc_steps: 4,
        weld_steps: 4,
        ..Default::default()
    };
    (corpus, mc, pc)
}

fn bytes(m: &ModelState) -> Vec<u8> {
    let mut b = Vec::new();
    write_state(&mut b, m).unwrap();
    b
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let (corpus, mc, pc) = small();
    let (trained, _) = train_initial(ModelState::new(mc).unwrap(), &corpus, &pc).unwrap();
    let direct = train_vocoder(trained.clone(), &corpus, &pc).unwrap().0;
    let reloaded = read_state(&mut bytes(&trained).as_slice()).unwrap();
    assert_eq!(reloaded.stage(), Stage::Trained);
    let resumed = train_vocoder(reloaded, &corpus, &pc).unwrap().0;
    assert_eq!(bytes(&direct), bytes(&resumed));
}

#[test]
fn saved_corpus_trains_identically() {
    let (corpus, mc, pc) = small();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let loaded = Corpus::load(dir.path()).unwrap();
    let a = train_initial(ModelState::new(mc.clone()).unwrap(), &corpus, &pc)
        .unwrap()
        .0;
    let b = train_initial(ModelState::new(mc).unwrap(), &loaded, &pc)
        .unwrap()
        .0;
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn clone_report_covers_the_test_split() {
    let (corpus, mc, pc) = small();
    let (base, logs) = train_base(Mode::Vq, mc, &corpus, &pc).unwrap();
    assert_eq!(logs.train.len(), 15);
    let target = corpus.target_speakers()[0];
    let (set, key) = strip_transcripts(&corpus, target, 3).unwrap();
    assert!(set.items.iter().all(|u| key.lookup(u.id).is_some()));
    let (m, _) = adapt(base, &set, &pc).unwrap();
    let (m, _) = adapt_vocoder(m, &set, &pc).unwrap();
    let (m, _) = weld(m, &set, &pc).unwrap();
    assert_eq!(m.stage(), Stage::Welded);
    let report = evaluate_clone(&corpus, target, &m).unwrap();
    assert_eq!(report.rows.len(), corpus.split(Split::Test).count());
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.vc_error) && (0.0..=1.0).contains(&r.tts_error));
        assert!(r.to_target >= 0.0 && r.to_source >= 0.0);
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), report.rows.len() + 1);
    assert!((0.0..=1.0).contains(&report.closer_to_target()));
}

#[test]
fn root_seed_reaches_every_stream() {
    let run = |seed: u64| {
        let cfg = RunConfig::parse(&format!(
            "seed = {seed}\nmode = vae\n[model]\nhidden = 8\nlatent_dim = 4\ncodebook_k = 8\n[corpus]\ntrain_speakers = 2\ntarget_speakers = 1\nutterances_per_speaker = 3\ntest_per_speaker = 1\ntarget_utterances = 3\n[train]\ntrain_steps = 3\n"
        ))
        .unwrap();
        let corpus = Corpus::generate(&cfg.corpus_config()).unwrap();
        let m = ModelState::new(cfg.model_config()).unwrap();
        let init = bytes(&m);
        let trained = bytes(&train_initial(m, &corpus, &cfg.pipeline_config()).unwrap().0);
        (corpus.utterances[0].y.clone(), init, trained)
    };
    let (a, b) = (run(1), run(1));
    assert_eq!(a, b);
    let c = run(2);
    assert_ne!(a.0, c.0);
    assert_ne!(a.1, c.1);
    assert_ne!(a.2, c.2);
}

#[test]
fn speech_encoder_input_ignores_the_voice() {
    // clean renderings of one transcript by two voices encode alike
    let corpus = Corpus::generate(&CorpusConfig {
        noise: 0.0,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let m = ModelState::new(ModelConfig::default()).unwrap();
    let x: Vec<usize> = (0..20).map(|t| (t / 2) % 12).collect();
    let za = encode_speech(&corpus.speakers[0].render_clean(&x), &m, Sampling::Mean)
        .unwrap()
        .z;
    let zb = encode_speech(&corpus.speakers[1].render_clean(&x), &m, Sampling::Mean)
        .unwrap()
        .z;
    let gap = (&za - &zb).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    let scale = za.mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(gap < 1e-2 * scale, "gap {gap} scale {scale}");
}
