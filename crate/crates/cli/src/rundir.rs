//! Run directory layout: resolved config, manifest, stage checkpoints.
//!
//! ```text
//! <out>/config.ini            resolved configuration
//! <out>/manifest.csv          one row per checkpoint written
//! <out>/corpus/               written by gen-data
//! <out>/<stage>-<step>.ckpt   stage checkpoints
//! <out>/<stage>_losses.csv    per-step loss breakdowns
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use vqclone::config::RunConfig;
use vqclone::corpus::Corpus;
use vqclone::model::{checkpoint, ModelState};

use crate::Failure;

pub const MANIFEST_HEADER: &str = "checkpoint,stage,step,status,parent,config_hash,seed";

pub struct RunDir {
    pub root: PathBuf,
    pub config: RunConfig,
}

impl RunDir {
    pub fn open(root: PathBuf, config: RunConfig) -> Result<Self, Failure> {
        fs::create_dir_all(&root).map_err(|e| Failure::io(&root, e))?;
        let dir = RunDir { root, config };
        let path = dir.root.join("config.ini");
        fs::write(&path, dir.config.to_text()).map_err(|e| Failure::io(&path, e))?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Corpus from `corpus/` if gen-data ran, otherwise regenerated from the
    /// config (the two are identical for the same seed).
    pub fn corpus(&self) -> Result<Corpus, Failure> {
        let dir = self.path("corpus");
        if dir.join("manifest.csv").exists() {
            log::info!("loading corpus from {}", dir.display());
            return Corpus::load(&dir)
                .map_err(|e| Failure::config(format!("corpus {}: {e}", dir.display())));
        }
        log::info!(
            "no corpus directory, generating from seed {}",
            self.config.seed
        );
        Corpus::generate(&self.config.corpus_config()).map_err(|e| Failure::config(e.to_string()))
    }

    /// Checkpoints whose latest manifest row marks them as the last good
    /// state of a failed stage.
    fn aborted(&self) -> Vec<String> {
        let text = fs::read_to_string(self.path("manifest.csv")).unwrap_or_default();
        let mut status = std::collections::BTreeMap::new();
        for l in text.lines().skip(1) {
            let cols: Vec<&str> = l.split(',').collect();
            if let (Some(name), Some(s)) = (cols.first(), cols.get(3)) {
                status.insert(name.to_string(), *s == "aborted");
            }
        }
        status
            .into_iter()
            .filter(|(_, a)| *a)
            .map(|(n, _)| n)
            .collect()
    }

    /// Highest-step `<stage>-<step>.ckpt` in the run directory, skipping
    /// aborted ones.
    pub fn latest(&self, stage: &str) -> Option<PathBuf> {
        let aborted = self.aborted();
        let entries = fs::read_dir(&self.root).ok()?;
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                if aborted.contains(&name) {
                    return None;
                }
                let stem = name.strip_suffix(".ckpt")?;
                let (s, step) = stem.rsplit_once('-')?;
                let step: usize = step.parse().ok()?;
                (s == stage).then_some((step, e.path()))
            })
            .max_by_key(|(step, _)| *step)
            .map(|(_, p)| p)
    }

    /// `--checkpoint` if given, else the latest checkpoint of the first
    /// stage in `stages` that has one.
    pub fn resolve(&self, explicit: Option<&Path>, stages: &[&str]) -> Result<PathBuf, Failure> {
        if let Some(p) = explicit {
            if !p.exists() {
                return Err(Failure::config(format!(
                    "missing artifact: checkpoint {}",
                    p.display()
                )));
            }
            return Ok(p.to_path_buf());
        }
        stages.iter().find_map(|s| self.latest(s)).ok_or_else(|| {
            Failure::config(format!(
                "missing artifact: no {} checkpoint in {} (run `vqclone {}` first or pass --checkpoint)",
                stages.join(" or "),
                self.root.display(),
                stages[stages.len() - 1]
            ))
        })
    }

    pub fn load(&self, path: &Path) -> Result<ModelState, Failure> {
        let m = checkpoint::load(path)
            .map_err(|e| Failure::config(format!("checkpoint {}: {e}", path.display())))?;
        if m.mode() != self.config.mode {
            return Err(Failure::config(format!(
                "checkpoint {} is {} mode but the config says {}",
                path.display(),
                m.mode(),
                self.config.mode
            )));
        }
        Ok(m)
    }

    /// Writes `<stage>-<step>.ckpt` and appends it to the manifest.
    pub fn save(
        &self,
        stage: &str,
        step: usize,
        m: &ModelState,
        parent: Option<&Path>,
        status: &str,
    ) -> Result<PathBuf, Failure> {
        let name = format!("{stage}-{step}.ckpt");
        let path = self.path(&name);
        checkpoint::save(&path, m)
            .map_err(|e| Failure::other(format!("{}: {e}", path.display())))?;
        let manifest = self.path("manifest.csv");
        let fresh = !manifest.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)
            .map_err(|e| Failure::io(&manifest, e))?;
        let parent = parent
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut row = String::new();
        if fresh {
            row.push_str(MANIFEST_HEADER);
            row.push('\n');
        }
        row.push_str(&format!(
            "{name},{stage},{step},{status},{parent},{},{}\n",
            self.config.hash(),
            self.config.seed
        ));
        f.write_all(row.as_bytes())
            .map_err(|e| Failure::io(&manifest, e))?;
        Ok(path)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }
}
