use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use brickseq::datasets::ingest_model;
use brickseq::generate::{frontier_candidates, next_brick_candidates, CandidateSet, SessionState};
use brickseq::neural::{load_checkpoint, LMParams};
use brickseq::tokenize::{DiscretizationConfig, Vocabulary};
use brickseq::validity::PreparedModel;
use brickseq::{BrickModel, Cell, Error, Placement};

use crate::error::ApiError;

pub const DEFAULT_CHECKPOINT: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One candidate, auto-selected when a step names neither rank nor placement.
    SingleTrack,
    /// The top `k` candidates on every request.
    MultiTrack,
    /// Candidates only when the client passes an explicit `k`.
    OnDemand,
}

impl Mode {
    pub fn default_k(self) -> usize {
        match self {
            Mode::SingleTrack => 1,
            Mode::MultiTrack | Mode::OnDemand => 3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Back off to the oracle frontier when the model offers no legal placement.
    pub fallback_oracle: bool,
    /// Where sessions are written on shutdown and restored from on start.
    pub snapshot: Option<PathBuf>,
}

/// Parameters shared read-only by every session that uses them.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub params: Arc<LMParams>,
    pub vocab: Arc<Vocabulary>,
}

impl LoadedCheckpoint {
    pub fn load(path: impl AsRef<Path>) -> brickseq::Result<Self> {
        let ckpt = load_checkpoint(path.as_ref())?;
        let vocab = ckpt
            .vocabulary
            .ok_or_else(|| Error::Checkpoint(format!("{} carries no vocabulary", path.as_ref().display())))?;
        Ok(Self { params: Arc::new(ckpt.params), vocab: Arc::new(vocab) })
    }
}

#[derive(Debug)]
pub struct SessionRecord {
    pub id: String,
    pub model_id: String,
    pub mode: Mode,
    pub k: usize,
    pub checkpoint: Option<String>,
    pub state: SessionState,
    pub created: u64,
    pub updated: u64,
}

/// Where a candidate list came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    Oracle,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub rank: usize,
    pub index: usize,
    pub placement: Placement,
    pub prob: f64,
}

pub fn views(set: &CandidateSet) -> Vec<CandidateView> {
    set.candidates
        .iter()
        .enumerate()
        .map(|(i, c)| CandidateView { rank: i + 1, index: c.index, placement: c.placement, prob: c.prob })
        .collect()
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl SessionRecord {
    /// Occupied cells in (x, y, z) order.
    pub fn occupied(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self.state.occupancy.cells.iter().copied().collect();
        cells.sort_unstable();
        cells
    }

    /// SHA-256 over the model id, the committed prefix and the occupied cells.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model_id.as_bytes());
        for &i in &self.state.prefix {
            h.update((i as u64).to_le_bytes());
        }
        for c in self.occupied() {
            for v in c {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Default)]
pub struct AppState {
    pub config: ServiceConfig,
    pub checkpoints: HashMap<String, LoadedCheckpoint>,
    pub models: RwLock<HashMap<String, Arc<PreparedModel>>>,
    pub sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
    next_id: AtomicU64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionSnapshot {
    id: String,
    model_id: String,
    mode: Mode,
    k: usize,
    checkpoint: Option<String>,
    prefix: Vec<usize>,
    created: u64,
    updated: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    next_id: u64,
    models: BTreeMap<String, BrickModel>,
    sessions: Vec<SessionSnapshot>,
}

impl AppState {
    pub fn new(config: ServiceConfig, checkpoints: HashMap<String, LoadedCheckpoint>) -> Self {
        Self { config, checkpoints, ..Default::default() }
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}-{:06}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1)
    }

    pub fn add_model(&self, model: BrickModel) -> brickseq::Result<(String, usize)> {
        let pm = ingest_model(&model)?;
        let n = pm.len();
        let id = self.fresh_id("m");
        self.models.write().unwrap().insert(id.clone(), Arc::new(pm));
        Ok((id, n))
    }

    pub fn model(&self, id: &str) -> Result<Arc<PreparedModel>, ApiError> {
        self.models.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown model {id}")))
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<SessionRecord>>, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    /// Resolves the checkpoint a session asks for; no name means the
    /// default checkpoint if one is loaded, otherwise oracle-only guidance.
    fn resolve_checkpoint(&self, name: Option<&str>) -> Result<Option<String>, ApiError> {
        match name {
            Some(n) if self.checkpoints.contains_key(n) => Ok(Some(n.to_string())),
            Some(n) => Err(ApiError::not_found(format!("unknown checkpoint {n}"))),
            None => Ok(self.checkpoints.contains_key(DEFAULT_CHECKPOINT).then(|| DEFAULT_CHECKPOINT.to_string())),
        }
    }

    fn session_vocab(&self, checkpoint: Option<&str>, model: &PreparedModel) -> brickseq::Result<Arc<Vocabulary>> {
        match checkpoint.and_then(|c| self.checkpoints.get(c)) {
            Some(c) => Ok(c.vocab.clone()),
            None => Ok(Arc::new(Vocabulary::from_models([&model.model], DiscretizationConfig::default())?)),
        }
    }

    pub fn create_session(
        &self,
        model_id: &str,
        mode: Mode,
        k: Option<usize>,
        checkpoint: Option<&str>,
    ) -> Result<(String, usize), ApiError> {
        let pm = self.model(model_id)?;
        let checkpoint = self.resolve_checkpoint(checkpoint)?;
        let k = match (mode, k) {
            (Mode::SingleTrack, _) => 1,
            (_, Some(0)) => return Err(ApiError::bad_request("k must be at least 1")),
            (_, Some(k)) => k,
            (m, None) => m.default_k(),
        };
        let vocab = self.session_vocab(checkpoint.as_deref(), &pm)?;
        let n = pm.len();
        let id = self.fresh_id("s");
        let t = now();
        let record = SessionRecord {
            id: id.clone(),
            model_id: model_id.to_string(),
            mode,
            k,
            checkpoint,
            state: SessionState::new(pm, vocab),
            created: t,
            updated: t,
        };
        self.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(record)));
        Ok((id, n))
    }

    /// Ranked next-brick candidates for a session. When the model offers no
    /// legal placement the error is a 422, carrying the oracle frontier as
    /// `fallback` if the service is configured for it.
    pub fn candidates(&self, rec: &SessionRecord, k: usize) -> Result<(CandidateSet, Source), ApiError> {
        if rec.state.is_complete() {
            return Ok((CandidateSet::default(), Source::Model));
        }
        let Some(ckpt) = rec.checkpoint.as_deref().and_then(|c| self.checkpoints.get(c)) else {
            return Ok((frontier_candidates(None, &rec.state, k), Source::Oracle));
        };
        match next_brick_candidates(&ckpt.params, &rec.state, k) {
            Ok(set) => Ok((set, Source::Model)),
            Err(e @ (Error::NoValidCandidate | Error::SequenceTooLong { .. })) => {
                let mut err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "NoValidCandidate", e.to_string());
                if self.config.fallback_oracle {
                    let set = frontier_candidates(Some(&ckpt.params), &rec.state, k);
                    err = err.with("fallback", serde_json::to_value(views(&set)).unwrap_or_default());
                }
                Err(err)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Like [`AppState::candidates`], but resolves to the fallback list
    /// instead of failing when fallback is enabled.
    pub fn candidates_or_fallback(&self, rec: &SessionRecord, k: usize) -> Result<(CandidateSet, Source), ApiError> {
        match self.candidates(rec, k) {
            Err(e) if e.status == StatusCode::UNPROCESSABLE_ENTITY && self.config.fallback_oracle => {
                let params = rec.checkpoint.as_deref().and_then(|c| self.checkpoints.get(c)).map(|c| &*c.params);
                Ok((frontier_candidates(params, &rec.state, k), Source::Fallback))
            }
            other => other,
        }
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> brickseq::Result<()> {
        let models = self.models.read().unwrap().iter().map(|(id, pm)| (id.clone(), pm.model.clone())).collect();
        let mut sessions: Vec<SessionSnapshot> = self
            .sessions
            .read()
            .unwrap()
            .values()
            .map(|s| {
                let r = s.lock().unwrap();
                SessionSnapshot {
                    id: r.id.clone(),
                    model_id: r.model_id.clone(),
                    mode: r.mode,
                    k: r.k,
                    checkpoint: r.checkpoint.clone(),
                    prefix: r.state.prefix.clone(),
                    created: r.created,
                    updated: r.updated,
                }
            })
            .collect();
        sessions.sort_by(|a, b| a.id.cmp(&b.id));
        let snap = Snapshot { next_id: self.next_id.load(Ordering::Relaxed), models, sessions };
        std::fs::write(path, serde_json::to_string_pretty(&snap)?)?;
        Ok(())
    }

    /// Restores models and sessions written by [`AppState::save_snapshot`].
    /// Sessions whose checkpoint is no longer loaded fall back to oracle guidance.
    pub fn restore_snapshot(&self, path: impl AsRef<Path>) -> brickseq::Result<usize> {
        let snap: Snapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut models = HashMap::new();
        for (id, m) in snap.models {
            models.insert(id, Arc::new(ingest_model(&m)?));
        }
        let mut sessions = HashMap::new();
        for s in snap.sessions {
            let pm = models
                .get(&s.model_id)
                .cloned()
                .ok_or_else(|| Error::InvalidModel(format!("snapshot session {} names unknown model", s.id)))?;
            let checkpoint = s.checkpoint.filter(|c| self.checkpoints.contains_key(c));
            let vocab = self.session_vocab(checkpoint.as_deref(), &pm)?;
            let state = SessionState::from_prefix(pm, vocab, &s.prefix)?;
            let record = SessionRecord {
                id: s.id.clone(),
                model_id: s.model_id,
                mode: s.mode,
                k: s.k,
                checkpoint,
                state,
                created: s.created,
                updated: s.updated,
            };
            sessions.insert(s.id, Arc::new(Mutex::new(record)));
        }
        let n = sessions.len();
        *self.models.write().unwrap() = models;
        *self.sessions.write().unwrap() = sessions;
        self.next_id.fetch_max(snap.next_id, Ordering::Relaxed);
        Ok(n)
    }
}
