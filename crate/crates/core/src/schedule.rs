//! Staggered two-speed training: a fast model retrained on every data
//! increment, a slow model on every s-th, an append-only snapshot registry,
//! and additive time accounting.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{AugmentPolicy, DataError};
use crate::ensemble::{EnsembleError, EnsembleSpec, ProbClassifier};
use crate::nn::{
    evaluate_accuracy, read_model_file, train_model, write_model_file, DataView, Model,
    ModelConfig, NnError, TrainParams,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("bad schedule config: {0}")]
    Config(String),
    #[error("schedule state error: {0}")]
    State(String),
    #[error("registry log damage: {0}")]
    Format(String),
    #[error("{kind} training failed: {source}")]
    Train {
        kind: SpeedKind,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScheduleError + '_ {
    move |source| ScheduleError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The two cadence roles. Orthogonal to the architecture: any model config
/// can fill either slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeedKind {
    Fast,
    Slow,
}

impl std::fmt::Display for SpeedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpeedKind::Fast => "fast",
            SpeedKind::Slow => "slow",
        })
    }
}

impl std::str::FromStr for SpeedKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fast" => Ok(SpeedKind::Fast),
            "slow" => Ok(SpeedKind::Slow),
            other => Err(format!("unknown speed kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub label: String,
    pub fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingSchedule {
    pub increments: Vec<Increment>,
    /// Slow model trains every s-th increment, first at increment s.
    pub slow_cadence: usize,
    pub fast_config: ModelConfig,
    pub slow_config: ModelConfig,
    pub fast_params: TrainParams,
    pub slow_params: TrainParams,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.increments.is_empty() {
            return Err(ScheduleError::Config("no increments".into()));
        }
        let mut prev = 0.0;
        let mut seen = HashSet::new();
        for inc in &self.increments {
            if inc.label.is_empty() || !seen.insert(inc.label.as_str()) {
                return Err(ScheduleError::Config(format!(
                    "increment labels must be unique and non-empty, got {:?}",
                    inc.label
                )));
            }
            if !(inc.fraction > prev && inc.fraction <= 1.0) {
                return Err(ScheduleError::Config(format!(
                    "fractions must increase strictly to 1.0, got {} after {prev}",
                    inc.fraction
                )));
            }
            prev = inc.fraction;
        }
        if prev != 1.0 {
            return Err(ScheduleError::Config(format!(
                "last fraction must be 1.0, got {prev}"
            )));
        }
        if self.slow_cadence == 0 {
            return Err(ScheduleError::Config("slow cadence must be >= 1".into()));
        }
        self.fast_config
            .validate()
            .map_err(|e| ScheduleError::Config(format!("fast model: {e}")))?;
        self.slow_config
            .validate()
            .map_err(|e| ScheduleError::Config(format!("slow model: {e}")))?;
        self.fast_params
            .validate()
            .map_err(|e| ScheduleError::Config(format!("fast training: {e}")))?;
        self.slow_params
            .validate()
            .map_err(|e| ScheduleError::Config(format!("slow training: {e}")))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// 1-based position of a label.
    fn position(&self, label: &str) -> Option<usize> {
        self.increments
            .iter()
            .position(|i| i.label == label)
            .map(|p| p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub kind: SpeedKind,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedIncrement {
    /// 1-based increment number.
    pub k: usize,
    pub label: String,
    pub actions: Vec<Action>,
}

/// Expand the schedule: fast trains at every increment, slow at every
/// s-th (k = s, 2s, ... counting from 1).
pub fn plan_schedule(schedule: &TrainingSchedule) -> Result<Vec<PlannedIncrement>, ScheduleError> {
    schedule.validate()?;
    Ok(schedule
        .increments
        .iter()
        .enumerate()
        .map(|(i, inc)| {
            let k = i + 1;
            let mut actions = vec![Action {
                kind: SpeedKind::Fast,
                fraction: inc.fraction,
            }];
            if k % schedule.slow_cadence == 0 {
                actions.push(Action {
                    kind: SpeedKind::Slow,
                    fraction: inc.fraction,
                });
            }
            PlannedIncrement {
                k,
                label: inc.label.clone(),
                actions,
            }
        })
        .collect())
}

/// Immutable record of one registered training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub id: String,
    pub kind: SpeedKind,
    pub data_fraction: f64,
    pub duration_seconds: f64,
    pub increment_label: String,
    /// Path of the weights file, relative to the registry directory.
    pub model_file: String,
    pub validation_oa: f64,
}

pub fn snapshot_id(kind: SpeedKind, increment_label: &str) -> String {
    format!("{kind}-{increment_label}")
}

impl ModelSnapshot {
    fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{:.4}\t{:.3}\t{}\t{}\t{:.6}\n",
            self.id,
            self.kind,
            self.data_fraction,
            self.duration_seconds,
            self.increment_label,
            self.model_file,
            self.validation_oa,
        )
    }

    fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(format!("{} fields, expected 7", fields.len()));
        }
        Ok(ModelSnapshot {
            id: fields[0].to_string(),
            kind: fields[1].parse()?,
            data_fraction: fields[2].parse().map_err(|e| format!("fraction: {e}"))?,
            duration_seconds: fields[3].parse().map_err(|e| format!("duration: {e}"))?,
            increment_label: fields[4].to_string(),
            model_file: fields[5].to_string(),
            validation_oa: fields[6].parse().map_err(|e| format!("oa: {e}"))?,
        })
    }
}

/// Append-only snapshot log persisted under `dir`: `log.tsv` plus one
/// weights file per snapshot in `models/`. Registration writes the weights
/// first and the log line last, so a replayed log never references a
/// missing file; a torn trailing line is an unfinished registration and is
/// dropped on open.
#[derive(Debug)]
pub struct ModelRegistry {
    dir: PathBuf,
    log: Vec<ModelSnapshot>,
}

pub const REGISTRY_LOG: &str = "log.tsv";
pub const REGISTRY_MODELS_DIR: &str = "models";

impl ModelRegistry {
    pub fn open(dir: &Path) -> Result<Self, ScheduleError> {
        std::fs::create_dir_all(dir.join(REGISTRY_MODELS_DIR)).map_err(io_err(dir))?;
        let log_path = dir.join(REGISTRY_LOG);
        let mut log = Vec::new();
        if log_path.exists() {
            let text = std::fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
            let complete = text.ends_with('\n');
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                match ModelSnapshot::parse_line(line) {
                    Ok(snap) => log.push(snap),
                    Err(e) if i + 1 == lines.len() && !complete => {
                        // torn tail from an interrupted registration
                        let _ = e;
                        break;
                    }
                    Err(e) => {
                        return Err(ScheduleError::Format(format!("log line {}: {e}", i + 1)))
                    }
                }
            }
        }
        let mut ids = HashSet::new();
        for snap in &log {
            if !ids.insert(snap.id.as_str()) {
                return Err(ScheduleError::Format(format!(
                    "duplicate snapshot id {}",
                    snap.id
                )));
            }
        }
        Ok(ModelRegistry {
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn snapshots(&self) -> &[ModelSnapshot] {
        &self.log
    }

    pub fn get(&self, id: &str) -> Option<&ModelSnapshot> {
        self.log.iter().find(|s| s.id == id)
    }

    pub fn latest(&self, kind: SpeedKind) -> Option<&ModelSnapshot> {
        self.log.iter().rev().find(|s| s.kind == kind)
    }

    /// Persist a snapshot: weights file first (atomic), then the log line
    /// in one appended write. A failure before the log write leaves the
    /// registry observably unchanged.
    pub fn register<F: Scalar>(
        &mut self,
        kind: SpeedKind,
        data_fraction: f64,
        duration_seconds: f64,
        increment_label: &str,
        validation_oa: f64,
        model: &Model<F>,
    ) -> Result<&ModelSnapshot, ScheduleError> {
        let id = snapshot_id(kind, increment_label);
        if self.get(&id).is_some() {
            return Err(ScheduleError::State(format!(
                "snapshot {id} already registered"
            )));
        }
        let model_file = format!("{REGISTRY_MODELS_DIR}/{id}.tspd");
        write_model_file(model, &self.dir.join(&model_file))?;
        let snap = ModelSnapshot {
            id,
            kind,
            data_fraction,
            duration_seconds,
            increment_label: increment_label.to_string(),
            model_file,
            validation_oa,
        };
        let log_path = self.dir.join(REGISTRY_LOG);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        file.write_all(snap.log_line().as_bytes())
            .and_then(|_| file.sync_all())
            .map_err(io_err(&log_path))?;
        self.log.push(snap);
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn load_model<F: Scalar>(&self, snap: &ModelSnapshot) -> Result<Model<F>, ScheduleError> {
        Ok(read_model_file(&self.dir.join(&snap.model_file))?)
    }
}

/// What a trainer hands back for registration.
#[derive(Debug)]
pub struct TrainedArtifact<F: Scalar> {
    pub model: Model<F>,
    pub duration_seconds: f64,
    pub validation_oa: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRequest<'a> {
    pub kind: SpeedKind,
    pub fraction: f64,
    pub increment_label: &'a str,
    pub train: DataView<'a>,
    pub val: Option<DataView<'a>>,
    pub seed: u64,
}

pub trait SnapshotTrainer<F: Scalar>: Sync {
    fn train(&self, req: &TrainRequest<'_>) -> Result<TrainedArtifact<F>, ScheduleError>;
}

/// Record zero durations instead of wall-clock time when byte-identical
/// reruns matter more than the timing table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingMode {
    WallClock,
    Zeroed,
}

/// Trains from scratch on the cumulative increment with the schedule's
/// config and hyperparameters for the requested speed.
pub struct ScheduleTrainer<'s> {
    pub schedule: &'s TrainingSchedule,
    pub augment: AugmentPolicy,
    pub timing: TimingMode,
}

impl<F: Scalar> SnapshotTrainer<F> for ScheduleTrainer<'_> {
    fn train(&self, req: &TrainRequest<'_>) -> Result<TrainedArtifact<F>, ScheduleError> {
        let (config, params) = match req.kind {
            SpeedKind::Fast => (&self.schedule.fast_config, &self.schedule.fast_params),
            SpeedKind::Slow => (&self.schedule.slow_config, &self.schedule.slow_params),
        };
        let wrap = |source: NnError| ScheduleError::Train {
            kind: req.kind,
            source,
        };
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut model = Model::<F>::build(config.clone(), &mut rng).map_err(wrap)?;
        train_model(&mut model, req.train, req.val, params, &self.augment, &mut rng)
            .map_err(wrap)?;
        let duration_seconds = match self.timing {
            TimingMode::WallClock => start.elapsed().as_secs_f64(),
            TimingMode::Zeroed => 0.0,
        };
        let validation_oa = match req.val {
            Some(val) => evaluate_accuracy(&model, val, 64).map_err(wrap)?,
            None => f64::NAN,
        };
        Ok(TrainedArtifact {
            model,
            duration_seconds,
            validation_oa,
        })
    }
}

/// Stable per-action seed derived from the run seed (splitmix64 over the
/// increment number and speed slot).
pub fn action_seed(base: u64, k: usize, kind: SpeedKind) -> u64 {
    let slot = match kind {
        SpeedKind::Fast => 0u64,
        SpeedKind::Slow => 1u64,
    };
    let mut z = base
        .wrapping_add((k as u64).wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(slot.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn planned_at(
    plan: &[PlannedIncrement],
    k: usize,
) -> Result<&PlannedIncrement, ScheduleError> {
    plan.get(k.wrapping_sub(1)).ok_or_else(|| {
        ScheduleError::State(format!(
            "increment {k} out of range (schedule has {})",
            plan.len()
        ))
    })
}

/// True when every planned action of increment `k` has a registered
/// snapshot.
pub fn increment_complete(
    registry: &ModelRegistry,
    schedule: &TrainingSchedule,
    k: usize,
) -> Result<bool, ScheduleError> {
    let plan = plan_schedule(schedule)?;
    let inc = planned_at(&plan, k)?;
    Ok(inc
        .actions
        .iter()
        .all(|a| registry.get(&snapshot_id(a.kind, &inc.label)).is_some()))
}

/// Execute increment `k` (1-based): train every planned action that is not
/// yet registered, register results in fast-then-slow order. Increments
/// run strictly in order; a complete increment is rejected. When both
/// actions are pending and `concurrent` is set, they train on separate
/// threads with independently derived seeds.
pub fn run_increment<F: Scalar>(
    registry: &mut ModelRegistry,
    schedule: &TrainingSchedule,
    k: usize,
    train: DataView<'_>,
    val: Option<DataView<'_>>,
    trainer: &dyn SnapshotTrainer<F>,
    base_seed: u64,
    concurrent: bool,
) -> Result<Vec<LedgerRow>, ScheduleError> {
    let plan = plan_schedule(schedule)?;
    let inc = planned_at(&plan, k)?;
    if k > 1 && !increment_complete(registry, schedule, k - 1)? {
        return Err(ScheduleError::State(format!(
            "increment {} must complete before {}",
            plan[k - 2].label, inc.label
        )));
    }
    if increment_complete(registry, schedule, k)? {
        return Err(ScheduleError::State(format!(
            "increment {} already complete",
            inc.label
        )));
    }
    let pending: Vec<Action> = inc
        .actions
        .iter()
        .filter(|a| registry.get(&snapshot_id(a.kind, &inc.label)).is_none())
        .cloned()
        .collect();
    let request = |a: &Action| TrainRequest {
        kind: a.kind,
        fraction: a.fraction,
        increment_label: &inc.label,
        train,
        val,
        seed: action_seed(base_seed, k, a.kind),
    };
    // each action is atomic: it registers as soon as it succeeds, and a
    // failure leaves no trace of that action
    let mut register =
        |a: &Action, art: TrainedArtifact<F>| -> Result<(), ScheduleError> {
            registry
                .register(
                    a.kind,
                    a.fraction,
                    art.duration_seconds,
                    &inc.label,
                    art.validation_oa,
                    &art.model,
                )
                .map(|_| ())
        };
    if concurrent && pending.len() == 2 {
        let (first, second) = (&pending[0], &pending[1]);
        let (ra, rb) = std::thread::scope(|scope| {
            let handle = scope.spawn(|| trainer.train(&request(second)));
            let ra = trainer.train(&request(first));
            (ra, handle.join().expect("training thread panicked"))
        });
        // register whatever succeeded (in plan order) before reporting
        // the first failure
        let mut failure = None;
        for (a, res) in [(first, ra), (second, rb)] {
            match res {
                Ok(art) => register(a, art)?,
                Err(e) => failure = failure.or(Some(e)),
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
    } else {
        for a in &pending {
            let art = trainer.train(&request(a))?;
            register(a, art)?;
        }
    }
    ledger_rows(registry, schedule, k)
}

/// Latest snapshot of each kind registered at or before increment `k`,
/// fast first.
fn active_at<'r>(
    registry: &'r ModelRegistry,
    schedule: &TrainingSchedule,
    k: usize,
) -> Result<Vec<&'r ModelSnapshot>, ScheduleError> {
    let mut out = Vec::new();
    for kind in [SpeedKind::Fast, SpeedKind::Slow] {
        let mut best: Option<(usize, &ModelSnapshot)> = None;
        for snap in registry.snapshots().iter().filter(|s| s.kind == kind) {
            let pos = schedule.position(&snap.increment_label).ok_or_else(|| {
                ScheduleError::State(format!(
                    "snapshot {} references unknown increment {}",
                    snap.id, snap.increment_label
                ))
            })?;
            if pos <= k && best.map_or(true, |(p, _)| pos > p) {
                best = Some((pos, snap));
            }
        }
        if let Some((_, snap)) = best {
            out.push(snap);
        }
    }
    if out.is_empty() {
        return Err(ScheduleError::State(format!(
            "no snapshots at or before increment {k}"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub increment: String,
    pub model_kind: SpeedKind,
    pub data_fraction: f64,
    pub duration_seconds: f64,
    pub ensemble_total_seconds: f64,
}

/// One row per active-ensemble component at increment `k`; every row
/// carries the ensemble's total (the exact sum of component durations).
pub fn ledger_rows(
    registry: &ModelRegistry,
    schedule: &TrainingSchedule,
    k: usize,
) -> Result<Vec<LedgerRow>, ScheduleError> {
    if !increment_complete(registry, schedule, k)? {
        return Err(ScheduleError::State(format!(
            "increment {k} is not complete"
        )));
    }
    let active = active_at(registry, schedule, k)?;
    let total: f64 = active.iter().map(|s| s.duration_seconds).sum();
    let label = &schedule.increments[k - 1].label;
    Ok(active
        .iter()
        .map(|s| LedgerRow {
            increment: label.clone(),
            model_kind: s.kind,
            data_fraction: s.data_fraction,
            duration_seconds: s.duration_seconds,
            ensemble_total_seconds: total,
        })
        .collect())
}

/// Per-increment training-time accounting, rebuilt from the registry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeLedger {
    rows: Vec<LedgerRow>,
    labels: Vec<String>,
}

pub const LEDGER_HEADER: &str =
    "increment,model_kind,data_fraction,duration_seconds,ensemble_total_seconds";

impl TimeLedger {
    /// Derive rows for every completed prefix increment.
    pub fn from_registry(
        registry: &ModelRegistry,
        schedule: &TrainingSchedule,
    ) -> Result<Self, ScheduleError> {
        let mut ledger = TimeLedger::default();
        for k in 1..=schedule.len() {
            if !increment_complete(registry, schedule, k)? {
                break;
            }
            ledger.rows.extend(ledger_rows(registry, schedule, k)?);
            ledger.labels.push(schedule.increments[k - 1].label.clone());
        }
        Ok(ledger)
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn completed(&self) -> usize {
        self.labels.len()
    }

    /// Ensemble total for increment `k` (1-based among recorded rows).
    pub fn total(&self, k: usize) -> Result<f64, ScheduleError> {
        let label = self.labels.get(k.wrapping_sub(1)).ok_or_else(|| {
            ScheduleError::State(format!("increment {k} not recorded in the ledger"))
        })?;
        let row = self
            .rows
            .iter()
            .find(|r| &r.increment == label)
            .expect("label implies rows");
        Ok(row.ensemble_total_seconds)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LEDGER_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{:.3},{:.3}\n",
                r.increment,
                r.model_kind,
                r.data_fraction,
                r.duration_seconds,
                r.ensemble_total_seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ScheduleError> {
        crate::fsutil::write_atomic(path, self.to_csv().as_bytes()).map_err(io_err(path))
    }
}

/// `ledger_total` per the accounting contract: the recorded ensemble total
/// of increment `k`.
pub fn ledger_total(ledger: &TimeLedger, k: usize) -> Result<f64, ScheduleError> {
    ledger.total(k)
}

/// Seconds as `h:mm:ss`, rounded to the nearest second.
pub fn format_hms(seconds: f64) -> String {
    let total = seconds.round().max(0.0) as u64;
    format!("{}:{:02}:{:02}", total / 3600, total % 3600 / 60, total % 60)
}

/// The latest snapshot of each kind, loaded and paired with fusion
/// weights: both kinds → two components (fast first), one kind → that
/// model alone.
pub struct ActiveEnsemble<F: Scalar> {
    components: Vec<(ModelSnapshot, Model<F>, f64)>,
}

pub fn active_ensemble<F: Scalar>(
    registry: &ModelRegistry,
    weights: Option<(f64, f64)>,
) -> Result<ActiveEnsemble<F>, ScheduleError> {
    let fast = registry.latest(SpeedKind::Fast);
    let slow = registry.latest(SpeedKind::Slow);
    let (w_fast, w_slow) = weights.unwrap_or((0.5, 0.5));
    let picks: Vec<(&ModelSnapshot, f64)> = match (fast, slow) {
        (Some(f), Some(s)) => vec![(f, w_fast), (s, w_slow)],
        (Some(f), None) => vec![(f, 1.0)],
        (None, Some(s)) => vec![(s, 1.0)],
        (None, None) => {
            return Err(ScheduleError::State(
                "registry holds no snapshots".into(),
            ))
        }
    };
    let mut components = Vec::with_capacity(picks.len());
    for (snap, w) in picks {
        components.push((snap.clone(), registry.load_model::<F>(snap)?, w));
    }
    Ok(ActiveEnsemble { components })
}

/// Like `active_ensemble`, but as of the end of increment `k`: the latest
/// snapshot of each kind registered at or before `k`.
pub fn active_ensemble_at<F: Scalar>(
    registry: &ModelRegistry,
    schedule: &TrainingSchedule,
    k: usize,
    weights: Option<(f64, f64)>,
) -> Result<ActiveEnsemble<F>, ScheduleError> {
    let snaps = active_at(registry, schedule, k)?;
    let (w_fast, w_slow) = weights.unwrap_or((0.5, 0.5));
    let mut components = Vec::with_capacity(snaps.len());
    for snap in &snaps {
        let w = if snaps.len() == 1 {
            1.0
        } else {
            match snap.kind {
                SpeedKind::Fast => w_fast,
                SpeedKind::Slow => w_slow,
            }
        };
        components.push(((*snap).clone(), registry.load_model::<F>(snap)?, w));
    }
    Ok(ActiveEnsemble { components })
}

impl<F: Scalar> ActiveEnsemble<F> {
    pub fn snapshots(&self) -> impl Iterator<Item = &ModelSnapshot> {
        self.components.iter().map(|(s, _, _)| s)
    }

    pub fn models(&self) -> impl Iterator<Item = &Model<F>> {
        self.components.iter().map(|(_, m, _)| m)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn total_duration(&self) -> f64 {
        self.components.iter().map(|(s, _, _)| s.duration_seconds).sum()
    }

    pub fn spec(&self) -> Result<EnsembleSpec<'_, F>, EnsembleError> {
        EnsembleSpec::new(
            self.components
                .iter()
                .map(|(_, m, w)| (m as &dyn ProbClassifier<F>, *w))
                .collect(),
        )
    }
}
