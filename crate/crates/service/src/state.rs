//! Sessions, jobs and the training worker.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use pilrecon_core::ensemble::{member_maps, EnsembleResult, Strategy};
use pilrecon_core::geometry::{GridSpec, Provenance, ReferencePoint, ReferencePointSet};
use pilrecon_core::loss::{LossBreakdown, LossWeights, Poles};
use pilrecon_core::net::MlpParams;
use pilrecon_core::raster::{format_reference_points, save_filament, write_atomic, FilamentMask};
use pilrecon_core::trainer::{Problem, TrainConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::ApiError;
use crate::ServiceConfig;

pub(crate) fn new_token() -> String {
    format!("{:032x}", rand::thread_rng().gen::<u128>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Interactive,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolesJson {
    pub north: i8,
    pub south: i8,
}

/// Body of `POST /api/sessions/{id}/reconstruct`; every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructOptions {
    pub members: usize,
    pub preset: Preset,
    pub strategy: String,
    pub poles: PolesJson,
    pub warm_start: bool,
    pub seed: u64,
    /// Overrides the preset's iteration budget.
    pub iterations: Option<usize>,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            members: 4,
            preset: Preset::Interactive,
            strategy: "mean".into(),
            poles: PolesJson {
                north: 1,
                south: -1,
            },
            warm_start: false,
            seed: 0,
            iterations: None,
        }
    }
}

impl ReconstructOptions {
    pub(crate) fn validate(
        &self,
        max_members: usize,
    ) -> Result<(Strategy, Poles, TrainConfig), ApiError> {
        if self.members == 0 || self.members > max_members {
            return Err(ApiError::unprocessable(format!(
                "members must be in 1..={max_members}, got {}",
                self.members
            )));
        }
        let strategy: Strategy = self.strategy.parse()?;
        let poles = Poles::new(self.poles.north, self.poles.south)?;
        let mut cfg = match self.preset {
            Preset::Interactive => TrainConfig::interactive(),
            Preset::Paper => TrainConfig::paper(),
        };
        if let Some(it) = self.iterations {
            cfg.iterations = it;
        }
        // a warm start is filled in per member later; validate as if present
        if cfg.iterations == 0 && !self.warm_start {
            return Err(ApiError::unprocessable(
                "iterations must be at least 1 without a warm start",
            ));
        }
        Ok((strategy, poles, cfg))
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossJson {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    pub t5: f64,
    pub t_ref: f64,
    pub total: f64,
}

impl From<&LossBreakdown> for LossJson {
    fn from(b: &LossBreakdown) -> Self {
        LossJson {
            t1: b.t1,
            t2: b.t2,
            t3: b.t3,
            t4: b.t4,
            t5: b.t5,
            t_ref: b.t_ref,
            total: b.total,
        }
    }
}

/// A published, immutable reconstruction.
#[derive(Debug)]
pub struct ResultVersion {
    pub version: u64,
    pub points_version: u64,
    pub options: ReconstructOptions,
    pub result: EnsembleResult,
    pub iterations_run: Vec<usize>,
    pub final_loss: Vec<LossJson>,
    pub warm_started: Vec<bool>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub filaments: FilamentMask,
    pub spec: GridSpec,
    pub points: BTreeMap<(usize, usize), i8>,
    pub points_version: u64,
    /// Member parameters of the latest result, for warm starts.
    pub snapshots: Vec<MlpParams>,
    pub results: BTreeMap<u64, Arc<ResultVersion>>,
    pub next_version: u64,
    pub running_job: Option<String>,
}

impl Session {
    pub fn new(filaments: FilamentMask, spec: GridSpec) -> Self {
        Session {
            id: new_token(),
            filaments,
            spec,
            points: BTreeMap::new(),
            points_version: 0,
            snapshots: Vec::new(),
            results: BTreeMap::new(),
            next_version: 1,
            running_job: None,
        }
    }

    pub fn reference_points(&self) -> Vec<ReferencePoint> {
        self.points
            .iter()
            .map(|(&(row, col), &polarity)| ReferencePoint { row, col, polarity })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Progress {
    /// Completed iterations summed over members.
    pub iteration: usize,
    pub iterations_total: usize,
    pub loss: Option<LossJson>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: String,
    pub session_id: String,
    pub state: JobState,
    pub progress: Progress,
    pub result_version: Option<u64>,
    pub error: Option<String>,
    #[serde(skip)]
    member_iterations: Vec<usize>,
}

impl Job {
    fn advance(&mut self, member: usize, iteration: usize, loss: &LossBreakdown) {
        let slot = &mut self.member_iterations[member];
        if iteration > *slot {
            self.progress.iteration += iteration - *slot;
            *slot = iteration;
        }
        self.progress.loss = Some(loss.into());
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    pub jobs: RwLock<HashMap<String, Arc<Mutex<Job>>>>,
    pub pool: Arc<Semaphore>,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let pool = Arc::new(Semaphore::new(config.workers.max(1)));
        AppState {
            config,
            sessions: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            pool,
        }
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))
    }

    pub fn job(&self, id: &str) -> Result<Arc<Mutex<Job>>, ApiError> {
        self.jobs
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no job '{id}'")))
    }

    fn snapshot_path(&self, session: &str) -> Option<PathBuf> {
        self.config.snapshot_dir.as_ref().map(|d| d.join(session))
    }

    /// Best effort; a failing snapshot never fails the request.
    pub fn snapshot_session(&self, s: &Session, with_raster: bool) {
        let Some(dir) = self.snapshot_path(&s.id) else {
            return;
        };
        let res = (|| -> pilrecon_core::Result<()> {
            std::fs::create_dir_all(&dir)?;
            if with_raster {
                save_filament(&s.filaments, dir.join("filaments.pgm"))?;
            }
            let set = ReferencePointSet::new(s.reference_points(), Provenance::User, &s.spec)?;
            let body = format!(
                "# points version {}\n{}",
                s.points_version,
                format_reference_points(&set)
            );
            write_atomic(dir.join("points.txt"), body.as_bytes())
        })();
        if let Err(e) = res {
            log::warn!("snapshot of session {} failed: {e}", s.id);
        }
    }

    fn snapshot_result(&self, session: &str, r: &ResultVersion) {
        let Some(dir) = self.snapshot_path(session) else {
            return;
        };
        let dir = dir.join(format!("v{}", r.version));
        let res = (|| -> pilrecon_core::Result<()> {
            std::fs::create_dir_all(&dir)?;
            let manifest = serde_json::to_string_pretty(&r.options).unwrap_or_default();
            write_atomic(dir.join("options.json"), manifest.as_bytes())?;
            pilrecon_core::raster::save_confidence(&r.result.mean_map, dir.join("mean.conf.pgm"))?;
            pilrecon_core::raster::save_polarity(&r.result.binarized, dir.join("binarized.pgm"))
        })();
        if let Err(e) = res {
            log::warn!("snapshot of session {session} v{} failed: {e}", r.version);
        }
    }
}

/// Everything a worker needs, copied out of the session at submission.
pub(crate) struct JobInput {
    pub filaments: FilamentMask,
    pub spec: GridSpec,
    pub points: Vec<ReferencePoint>,
    pub points_version: u64,
    pub warm: Option<Vec<Option<MlpParams>>>,
    pub options: ReconstructOptions,
    pub strategy: Strategy,
    pub poles: Poles,
    pub config: TrainConfig,
}

struct Trained {
    result: EnsembleResult,
    params: Vec<MlpParams>,
    iterations_run: Vec<usize>,
    final_loss: Vec<LossJson>,
    seconds: f64,
}

fn train(input: &JobInput, job: &Mutex<Job>) -> pilrecon_core::Result<Trained> {
    let start = Instant::now();
    let refs = ReferencePointSet::new(input.points.clone(), Provenance::User, &input.spec)?;
    let problem = Problem::new(
        &input.filaments,
        &input.spec,
        &refs,
        input.poles,
        LossWeights::default(),
    )?;
    let models = pilrecon_core::train_ensemble(
        &problem,
        &input.config,
        input.options.members,
        input.options.seed,
        input.warm.as_deref(),
        &|k, it, loss| job.lock().unwrap().advance(k, it, loss),
    )?;
    let maps = member_maps(&models, &problem)?;
    let result = EnsembleResult::from_members(maps, input.strategy)?;
    Ok(Trained {
        result,
        iterations_run: models.iter().map(|m| m.iterations_run).collect(),
        final_loss: models.iter().map(|m| (&m.final_breakdown).into()).collect(),
        params: models.into_iter().map(|m| m.params).collect(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Registers a queued job and starts its worker task. The caller has
/// already marked `job_id` as the session's running job.
pub(crate) fn submit(
    state: &Shared,
    session: &Arc<Mutex<Session>>,
    session_id: String,
    job_id: String,
    input: JobInput,
) {
    let total = input.config.iterations * input.options.members;
    let job = Arc::new(Mutex::new(Job {
        id: job_id.clone(),
        session_id,
        state: JobState::Queued,
        progress: Progress {
            iteration: 0,
            iterations_total: total,
            loss: None,
        },
        result_version: None,
        error: None,
        member_iterations: vec![0; input.options.members],
    }));
    state
        .jobs
        .write()
        .unwrap()
        .insert(job_id.clone(), job.clone());

    let state = state.clone();
    let session = session.clone();
    tokio::spawn(async move {
        let permit = state
            .pool
            .clone()
            .acquire_owned()
            .await
            .expect("worker pool closed");
        job.lock().unwrap().state = JobState::Running;
        let worker_job = job.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let r = train(&input, &worker_job);
            (input, r)
        })
        .await;
        drop(permit);
        let mut s = session.lock().unwrap();
        s.running_job = None;
        match outcome {
            Ok((input, Ok(t))) => {
                let version = s.next_version;
                s.next_version += 1;
                let published = Arc::new(ResultVersion {
                    version,
                    points_version: input.points_version,
                    warm_started: match &input.warm {
                        Some(w) => w.iter().map(Option::is_some).collect(),
                        None => vec![false; input.options.members],
                    },
                    options: input.options,
                    result: t.result,
                    iterations_run: t.iterations_run,
                    final_loss: t.final_loss,
                    seconds: t.seconds,
                });
                s.snapshots = t.params;
                s.results.insert(version, published.clone());
                while s.results.len() > state.config.retain_versions.max(2) {
                    let oldest = *s.results.keys().next().unwrap();
                    s.results.remove(&oldest);
                }
                state.snapshot_result(&s.id, &published);
                let mut j = job.lock().unwrap();
                j.result_version = Some(version);
                j.state = JobState::Done;
            }
            Ok((_, Err(e))) => {
                log::warn!("job on session {} failed: {e}", s.id);
                let mut j = job.lock().unwrap();
                j.error = Some(e.to_string());
                j.state = JobState::Failed;
            }
            Err(e) => {
                let mut j = job.lock().unwrap();
                j.error = Some(format!("worker panicked: {e}"));
                j.state = JobState::Failed;
            }
        }
    });
}
