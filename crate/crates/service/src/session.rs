use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use geoedit_core::imaging::{load_mask_png, load_png, save_mask_png, save_png, ImageBuffer, MaskBuffer};
use geoedit_core::instruction::EditInstruction;
use geoedit_core::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Source,
    Completion,
}

impl MaskRole {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(MaskRole::Source),
            "completion" => Some(MaskRole::Completion),
            _ => None,
        }
    }

    pub fn file(self) -> &'static str {
        match self {
            MaskRole::Source => "source_mask.png",
            MaskRole::Completion => "completion_mask.png",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Inpaint,
    Refine,
    Full,
}

impl JobKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inpaint" => Some(JobKind::Inpaint),
            "refine" => Some(JobKind::Refine),
            "full" => Some(JobKind::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Idle,
    Running { job: JobKind, step: String },
    Done { job: JobKind, run: usize },
    Failed { job: JobKind, reason: String },
}

/// Persisted part of a session (`session.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Upload size before resizing to the working resolution.
    pub original: (usize, usize),
    pub masks: Vec<MaskRole>,
    pub instruction: Option<EditInstruction>,
    pub prompt: Option<String>,
    pub seed: u64,
    pub status: JobStatus,
    /// Latest file of each artifact, relative to the session directory.
    pub artifacts: BTreeMap<String, String>,
    pub runs: usize,
}

pub struct Session {
    pub meta: SessionMeta,
    pub dir: PathBuf,
    pub source: ImageBuffer,
    pub masks: HashMap<MaskRole, MaskBuffer>,
    /// Step-2 result of the latest inpaint, input of refine jobs.
    pub background: Option<ImageBuffer>,
    pub last_access: Instant,
}

impl Session {
    pub fn create(root: &Path, id: String, source: ImageBuffer, original: (usize, usize)) -> Result<Self> {
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir)?;
        save_png(&source, dir.join("source.png"))?;
        let mut s = Session {
            meta: SessionMeta {
                id,
                height: source.height(),
                width: source.width(),
                original,
                masks: Vec::new(),
                instruction: None,
                prompt: None,
                seed: 0,
                status: JobStatus::Idle,
                artifacts: BTreeMap::new(),
                runs: 0,
            },
            dir,
            source,
            masks: HashMap::new(),
            background: None,
            last_access: Instant::now(),
        };
        s.meta.artifacts.insert("source".into(), "source.png".into());
        s.persist()?;
        Ok(s)
    }

    /// Reloads a session directory. A job that was running when the
    /// process stopped is reported as failed.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut meta: SessionMeta = serde_json::from_slice(&std::fs::read(dir.join("session.json"))?)?;
        if let JobStatus::Running { job, .. } = meta.status {
            meta.status = JobStatus::Failed {
                job,
                reason: "interrupted".into(),
            };
        }
        let source = load_png(dir.join("source.png"))?;
        let mut masks = HashMap::new();
        for role in &meta.masks {
            masks.insert(*role, load_mask_png(dir.join(role.file()))?);
        }
        let background = match meta.artifacts.get("background") {
            Some(p) => Some(load_png(dir.join(p))?),
            None => None,
        };
        Ok(Session {
            meta,
            dir: dir.to_path_buf(),
            source,
            masks,
            background,
            last_access: Instant::now(),
        })
    }

    pub fn persist(&self) -> Result<()> {
        let tmp = self.dir.join("session.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.meta)?)?;
        std::fs::rename(tmp, self.dir.join("session.json"))?;
        Ok(())
    }

    pub fn set_mask(&mut self, role: MaskRole, mask: MaskBuffer) -> Result<()> {
        save_mask_png(&mask, self.dir.join(role.file()))?;
        self.masks.insert(role, mask);
        if !self.meta.masks.contains(&role) {
            self.meta.masks.push(role);
            self.meta.masks.sort();
        }
        self.persist()
    }

    pub fn is_running(&self) -> bool {
        matches!(self.meta.status, JobStatus::Running { .. })
    }

    /// Opens a fresh run directory; artifacts of earlier runs are kept.
    pub fn next_run(&mut self) -> Result<(usize, PathBuf)> {
        self.meta.runs += 1;
        let rel = format!("runs/{:03}", self.meta.runs);
        std::fs::create_dir_all(self.dir.join(&rel))?;
        Ok((self.meta.runs, self.dir.join(rel)))
    }

    pub fn artifact_path(&self, name: &str) -> Option<PathBuf> {
        self.meta.artifacts.get(name).map(|p| self.dir.join(p))
    }
}

/// One written artifact image.
pub enum Artifact {
    Image(ImageBuffer),
    Mask(MaskBuffer),
}

/// Writes `artifacts` into run `run` of a session directory and returns
/// their relative paths.
pub fn write_run(dir: &Path, run: usize, artifacts: &[(&str, Artifact)]) -> Result<Vec<(String, String)>> {
    let rel = format!("runs/{run:03}");
    let mut out = Vec::new();
    for (name, a) in artifacts {
        let file = format!("{rel}/{name}.png");
        match a {
            Artifact::Image(img) => save_png(img, dir.join(&file))?,
            Artifact::Mask(m) => save_mask_png(m, dir.join(&file))?,
        }
        out.push((name.to_string(), file));
    }
    Ok(out)
}

/// Sessions whose last access is older than `ttl` and that are not running.
pub fn expired<'a>(sessions: impl Iterator<Item = &'a Session>, now: Instant, ttl: Duration) -> Vec<String> {
    sessions
        .filter(|s| !s.is_running() && now.saturating_duration_since(s.last_access) > ttl)
        .map(|s| s.meta.id.clone())
        .collect()
}
