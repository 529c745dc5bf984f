use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 4
[model]
hidden = 12
latent_dim = 8
codebook_k = 16
[train]
train_steps = 30
voc_steps = 10
adapt_steps = 10
adapt_voc_steps = 5
weld_steps = 5
";

fn vqclone(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqclone"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.ini");
    fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

/// Relative path to contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(vqclone(&["gen-data", "--seed", "7"], &a).status.success());
    assert!(vqclone(&["gen-data", "--seed", "7"], &b).status.success());
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.contains_key("corpus/manifest.csv"));
    assert!(sa.contains_key("config.ini"));
    assert_eq!(sa, sb);

    let c = tmp.path().join("c");
    assert!(vqclone(&["gen-data", "--seed", "8"], &c).status.success());
    assert_ne!(
        sa["corpus/speakers.bin"],
        snapshot(&c)["corpus/speakers.bin"]
    );
}

#[test]
fn gradcheck_on_fresh_model_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = vqclone(&["gradcheck", "--config", &cfg], &out);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let stdout = String::from_utf8_lossy(&o.stdout);
    for name in ["joint", "vocoder", "adapt", "weld"] {
        assert!(stdout.contains(&format!("gradcheck {name}")), "{stdout}");
    }
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let err: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{row}");
    }
}

#[test]
fn adapt_without_checkpoint_names_the_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vqclone(&["adapt"], &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("missing artifact") && err.contains("train-voc"),
        "{err}"
    );
}

#[test]
fn usage_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(vqclone(&["bogus"], &out).status.code(), Some(2));
    assert_eq!(
        vqclone(&["train", "--mode", "other"], &out).status.code(),
        Some(2)
    );
    let bad = tmp.path().join("bad.ini");
    fs::write(&bad, "[hyper]\nbeta = -1\n").unwrap();
    let o = vqclone(&["train", "--config", bad.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(3));
    fs::write(&bad, "nonsense = 1\n").unwrap();
    assert_eq!(
        vqclone(&["train", "--config", bad.to_str().unwrap()], &out)
            .status
            .code(),
        Some(3)
    );
    let o = vqclone(&["train", "--config", "/nonexistent/cfg.ini"], &out);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4_and_keeps_last_good_state() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("diverge.ini");
    fs::write(&cfg, "[model]\nhidden = 8\nlatent_dim = 4\ncodebook_k = 8\n[train]\nlr = 1e300\ntrain_steps = 5\n").unwrap();
    let out = tmp.path().join("run");
    let o = vqclone(&["train", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    let row = manifest.lines().nth(1).unwrap();
    assert!(row.contains(",aborted,"), "{row}");
    let name = row.split(',').next().unwrap();
    assert!(out.join(name).exists());
    // an aborted state is never picked up as a finished stage
    let o = vqclone(&["train-voc"], &out);
    assert_eq!(o.status.code(), Some(3));
}

fn full_run(out: &Path, cfg: &str) {
    for cmd in [
        "gen-data",
        "train",
        "train-voc",
        "adapt",
        "weld",
        "infer-tts",
        "infer-vc",
        "analyze",
    ] {
        let o = vqclone(&[cmd, "--config", cfg], out);
        assert!(
            o.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn staged_run_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    full_run(&a, &cfg);
    full_run(&b, &cfg);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    for name in [
        "train-30.ckpt",
        "train-voc-10.ckpt",
        "adapt-10.ckpt",
        "adapt-voc-5.ckpt",
        "weld-5.ckpt",
        "train_losses.csv",
        "weld_losses.csv",
        "manifest.csv",
        "analysis/overlap.csv",
        "analysis/code_histogram.csv",
        "analysis/bitrate.csv",
        "infer-vc/report.csv",
        "infer-tts/content.csv",
    ] {
        assert!(sa.contains_key(name), "{name} missing");
    }
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs");
    }
    let manifest = String::from_utf8(sa["manifest.csv"].clone()).unwrap();
    let parents: Vec<&str> = manifest
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap())
        .collect();
    assert_eq!(
        parents,
        [
            "",
            "train-30.ckpt",
            "train-voc-10.ckpt",
            "adapt-10.ckpt",
            "adapt-voc-5.ckpt"
        ]
    );
    assert!(sa
        .keys()
        .any(|k| k.starts_with("analysis/codemap_") && k.ends_with(".svg")));
}

#[test]
fn checkpoint_mode_must_match_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    assert!(vqclone(&["train", "--config", &cfg], &out).status.success());
    let o = vqclone(&["train-voc", "--config", &cfg, "--mode", "vae"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));
}
