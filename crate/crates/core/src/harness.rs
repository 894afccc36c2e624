//! Experiment plumbing shared by the command-line tool and the acceptance
//! suite: a sectioned TOML configuration, per-trial seeding, pipeline stages
//! that read and write artifacts, and the success/IoU summaries.
//!
//! Every file written here starts with a `# config_hash=<hex> seed=<u64>`
//! line and is written to a staging file first, then renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{initial_anchors, record_demonstration, DemoScript, Demonstration};
use crate::geometry::{ObjectPose, Vec3};
use crate::mpc::{ablate, EpisodeConfig, EpisodeResult, IterationStats, Method, Termination};
use crate::net::{DenseNetwork, TrainReport};
use crate::priors::{
    collect_dataset, registration_pairs, splitmix, train_forward, train_inverse, train_registration, CollectConfig,
    PriorModels, PriorTrainConfig, TransitionDataset,
};
use crate::sim::trace::{write_trace, TraceHeader, TraceRecord};
use crate::sim::{init_scenario, ScenarioKind, ScenarioSpec};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::MissingArtifact(_) => 3,
            HarnessError::Runtime(_) => 4,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Uniform ranges for the object pose of each trial: offsets are drawn from
/// `[-x, x]`, `[-y, y]` and `[-yaw, yaw]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Randomization {
    pub translation_x: f64,
    pub translation_y: f64,
    pub yaw: f64,
}

impl Default for Randomization {
    fn default() -> Self {
        Self { translation_x: 0.10, translation_y: 0.07, yaw: 0.0 }
    }
}

/// Artifact locations. Relative paths are resolved against the directory of
/// the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub models: PathBuf,
    pub demos: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "artifacts/dataset.bin".into(),
            models: "artifacts/models".into(),
            demos: "artifacts/demos".into(),
            output: "artifacts/runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSection {
    pub transitions: usize,
    pub seed: u64,
    pub exploration: CollectConfig,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self { transitions: 10_000, seed: 7, exploration: CollectConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenarios: Vec<ScenarioKind>,
    pub trials: usize,
    /// Source of per-trial seeds when `seeds` is empty.
    pub master_seed: u64,
    /// Explicit per-trial seeds; must have exactly `trials` entries if given.
    pub seeds: Vec<u64>,
    pub randomization: Randomization,
    pub paths: Paths,
    pub collect: CollectSection,
    pub train: PriorTrainConfig,
    pub episode: EpisodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![ScenarioKind::Box, ScenarioKind::Hanger],
            trials: 50,
            master_seed: 1,
            seeds: Vec::new(),
            randomization: Randomization::default(),
            paths: Paths::default(),
            collect: CollectSection::default(),
            train: PriorTrainConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse, validate and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| HarnessError::MissingArtifact(path.to_path_buf()))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.models, &mut cfg.paths.demos, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.scenarios.is_empty() {
            return bad("at least one scenario is required".into());
        }
        if let Some(k) = self.scenarios.iter().find(|k| DemoScript::for_scenario(**k, [Vec3::zeros(); 2]).is_none()) {
            return bad(format!("scenario `{}` has no goal to imitate", k.as_str()));
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.trials {
            return bad(format!("seed list has {} entries but trials = {}", self.seeds.len(), self.trials));
        }
        let r = &self.randomization;
        if [r.translation_x, r.translation_y, r.yaw].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("randomization ranges must be finite and non-negative".into());
        }
        if self.collect.transitions == 0 {
            return bad("collect.transitions must be positive".into());
        }
        self.episode.control.validate().or_else(|e| bad(format!("episode.control: {e}")))?;
        self.episode.reward.validate().or_else(|e| bad(format!("episode.reward: {e}")))?;
        self.episode.constraints.validate().or_else(|e| bad(format!("episode.constraints: {e}")))?;
        self.episode.sim.validate().or_else(|e| bad(format!("episode.sim: {e}")))?;
        self.train.train.validate().or_else(|e| bad(format!("train: {e}")))?;
        Ok(())
    }

    /// Digest of every setting except artifact locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        crate::config_hash(&c)
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.trials as u64).map(|i| splitmix(self.master_seed, i)).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// Object pose of a trial, drawn from the randomization ranges.
    pub fn trial_pose(&self, seed: u64) -> ObjectPose {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 0));
        let r = &self.randomization;
        let dx = rng.gen_range(-r.translation_x..=r.translation_x);
        let dy = rng.gen_range(-r.translation_y..=r.translation_y);
        let yaw = rng.gen_range(-r.yaw..=r.yaw);
        ObjectPose::new(Vec3::new(dx, dy, 0.0), yaw)
    }

    pub fn demo_path(&self, kind: ScenarioKind) -> PathBuf {
        self.paths.demos.join(format!("{}.demo", kind.as_str()))
    }

    /// Registration model adapted to the demonstration of `kind`.
    pub fn tuned_registration_path(&self, kind: ScenarioKind) -> PathBuf {
        self.paths.models.join(format!("registration-{}.net", kind.as_str()))
    }
}

/// Nominal scene of each scenario, object at the origin.
pub fn scenario_spec(kind: ScenarioKind) -> ScenarioSpec {
    match kind {
        ScenarioKind::Box => ScenarioSpec::box_cover(),
        ScenarioKind::Hanger => ScenarioSpec::hanger(),
        ScenarioKind::ContactFree => ScenarioSpec::default(),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact(path.to_path_buf()))
    }
}

/// Write `path` through a staging file in the same directory, then rename.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let mut staged = tempfile::NamedTempFile::new_in(dir).map_err(runtime)?;
    {
        let mut out = std::io::BufWriter::new(staged.as_file_mut());
        write(&mut out).map_err(runtime)?;
        out.flush().map_err(runtime)?;
    }
    staged.persist(path).map_err(runtime)?;
    Ok(())
}

fn provenance(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

/// Write a CSV file whose first line records provenance.
fn write_csv<T: Serialize>(path: &Path, hash: &str, seed: u64, rows: &[T]) -> Result<()> {
    let mut body = csv::Writer::from_writer(Vec::new());
    for r in rows {
        body.serialize(r).map_err(runtime)?;
    }
    let body = body.into_inner().map_err(runtime)?;
    atomic_write(path, |w| {
        w.write_all(provenance(hash, seed).as_bytes())?;
        w.write_all(&body)
    })
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    require_file(path)?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(runtime)?;
    reader.deserialize().collect::<std::result::Result<_, _>>().map_err(runtime)
}

/// One row per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub scenario: ScenarioKind,
    pub method: Method,
    pub trial: usize,
    pub seed: u64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub yaw: f64,
    pub success: bool,
    pub steps: usize,
    pub termination: Termination,
    pub initial_chamfer: f64,
    pub final_chamfer: f64,
    pub final_iou: f64,
    pub audit_violations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub trials: usize,
    pub success_rate: f64,
    pub mu_iou: f64,
    /// Population standard deviation of the final IoU.
    pub sigma_iou: f64,
}

impl Aggregate {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a TrialRow>) -> Self {
        let rows: Vec<&TrialRow> = rows.into_iter().collect();
        let n = rows.len();
        if n == 0 {
            return Self { trials: 0, success_rate: f64::NAN, mu_iou: f64::NAN, sigma_iou: f64::NAN };
        }
        let successes = rows.iter().filter(|r| r.success).count();
        let mu = rows.iter().map(|r| r.final_iou).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r.final_iou - mu).powi(2)).sum::<f64>() / n as f64;
        Self { trials: n, success_rate: successes as f64 / n as f64, mu_iou: mu, sigma_iou: var.sqrt() }
    }
}

/// Per-trial rows of one or more runs; aggregates are always recomputed
/// from the rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub rows: Vec<TrialRow>,
}

impl RunSummary {
    pub fn aggregate(&self, scenario: ScenarioKind, method: Method) -> Aggregate {
        Aggregate::from_rows(self.rows.iter().filter(|r| r.scenario == scenario && r.method == method))
    }

    fn keys(&self) -> (Vec<ScenarioKind>, Vec<Method>) {
        let mut scenarios = Vec::new();
        let mut methods = Vec::new();
        for r in &self.rows {
            if !scenarios.contains(&r.scenario) {
                scenarios.push(r.scenario);
            }
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        methods.sort_by_key(|m| Method::ALL.iter().position(|x| x == m));
        (scenarios, methods)
    }

    /// Aligned text table: one row per method, rate and IoU statistics per
    /// scenario.
    pub fn table(&self) -> String {
        let (scenarios, methods) = self.keys();
        let mut header = vec!["Method".to_string()];
        for s in &scenarios {
            header.extend([format!("{} Rate %", s.as_str()), format!("{} mu_IoU", s.as_str()), format!("{} sigma_IoU", s.as_str())]);
        }
        let mut lines = vec![header];
        for m in &methods {
            let mut line = vec![m.as_str().to_string()];
            for s in &scenarios {
                let a = self.aggregate(*s, *m);
                line.extend([format!("{:.1}", 100.0 * a.success_rate), format!("{:.3}", a.mu_iou), format!("{:.3}", a.sigma_iou)]);
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }

    pub fn write(&self, csv_path: &Path, hash: &str, seed: u64) -> Result<()> {
        write_csv(csv_path, hash, seed, &self.rows)?;
        let table = self.table();
        atomic_write(&csv_path.with_extension("txt"), |w| {
            w.write_all(provenance(hash, seed).as_bytes())?;
            w.write_all(table.as_bytes())
        })
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        Ok(Self { rows: read_csv(csv_path)? })
    }
}

/// Outcome of one trial with its full episode record.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub row: TrialRow,
    pub episode: EpisodeResult,
}

/// Collect the contact-free exploration dataset.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<TransitionDataset> {
    collect_dataset(cfg.collect.transitions, &cfg.collect.exploration, cfg.collect.seed).map_err(runtime)
}

/// Train f_D, f_I and the demonstration-independent f_A.
pub fn train_priors(cfg: &ExperimentConfig, ds: &TransitionDataset) -> Result<(PriorModels, Vec<(&'static str, TrainReport)>)> {
    let (forward, rf) = train_forward(ds, &cfg.train).map_err(runtime)?;
    let (inverse, ri) = train_inverse(ds, &cfg.train).map_err(runtime)?;
    let pairs = registration_pairs(ds, &[], cfg.train.registration_pairs, &cfg.train, splitmix(cfg.train.train.seed, 3));
    let (registration, ra) = train_registration(&pairs, None, cfg.train.train.epochs, &cfg.train).map_err(runtime)?;
    let models = PriorModels::new(forward, inverse, registration, ds.keypoint_count).map_err(runtime)?;
    Ok((models, vec![("forward", rf), ("inverse", ri), ("registration", ra)]))
}

/// Record the scripted demonstration of `kind` with the object at the origin.
pub fn make_demo(cfg: &ExperimentConfig, kind: ScenarioKind) -> Result<Demonstration> {
    let spec = scenario_spec(kind);
    let start = initial_anchors(&init_scenario(&spec).map_err(runtime)?);
    let script = DemoScript::for_scenario(kind, start).ok_or_else(|| HarnessError::Config(format!("no script for `{}`", kind.as_str())))?;
    let e = &cfg.episode;
    record_demonstration(&script, &spec, &e.sim, &e.success, &e.layout, e.constraints.max_step).map_err(runtime)
}

/// Adapt f_A to a demonstration's states.
pub fn tune_registration(
    cfg: &ExperimentConfig,
    ds: &TransitionDataset,
    base: &DenseNetwork,
    demo: &Demonstration,
) -> Result<(DenseNetwork, TrainReport)> {
    let seed = splitmix(cfg.train.train.seed, 4 + demo.scenario as u64);
    let pairs = registration_pairs(ds, &demo.states, cfg.train.registration_pairs / 2, &cfg.train, seed);
    train_registration(&pairs, Some(base), cfg.train.fine_tune_epochs, &cfg.train).map_err(runtime)
}

/// Run one randomized trial.
pub fn run_trial(
    cfg: &ExperimentConfig,
    kind: ScenarioKind,
    method: Method,
    trial: usize,
    seed: u64,
    demo: &Demonstration,
    models: &PriorModels,
) -> Result<TrialOutcome> {
    let pose = cfg.trial_pose(seed);
    let spec = scenario_spec(kind).with_object_pose(pose);
    let episode = ablate(method, &spec, demo, models, &cfg.episode, splitmix(seed, 1)).map_err(runtime)?;
    let row = TrialRow {
        scenario: kind,
        method,
        trial,
        seed,
        offset_x: pose.position[0],
        offset_y: pose.position[1],
        yaw: pose.yaw,
        success: episode.success,
        steps: episode.steps,
        termination: episode.termination,
        initial_chamfer: episode.chamfer[0],
        final_chamfer: episode.final_chamfer(),
        final_iou: episode.final_iou,
        audit_violations: episode.audit_violations,
    };
    Ok(TrialOutcome { row, episode })
}

/// Every configured trial of one scenario and method.
pub fn run_trials(
    cfg: &ExperimentConfig,
    kind: ScenarioKind,
    method: Method,
    demo: &Demonstration,
    models: &PriorModels,
) -> Result<Vec<TrialOutcome>> {
    cfg.trial_seeds()
        .into_iter()
        .enumerate()
        .map(|(i, seed)| {
            let out = run_trial(cfg, kind, method, i, seed, demo, models)?;
            log::info!(
                "{} {} trial {i}: success={} steps={} {}",
                kind.as_str(),
                method.as_str(),
                out.row.success,
                out.row.steps,
                out.row.termination.as_str()
            );
            Ok(out)
        })
        .collect()
}

#[derive(Serialize)]
struct LossRow<'a> {
    model: &'a str,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

#[derive(Serialize)]
struct ChamferRow {
    trial: usize,
    step: usize,
    released: bool,
    chamfer: f64,
}

#[derive(Serialize)]
struct TelemetryRow {
    step: usize,
    iteration: usize,
    best_reward: f64,
    mean_elite_reward: f64,
    feasible_fraction: f64,
    max_sigma: f64,
}

fn loss_rows<'a>(reports: &'a [(&'a str, TrainReport)]) -> Vec<LossRow<'a>> {
    reports
        .iter()
        .flat_map(|(name, r)| {
            r.train_loss.iter().zip(&r.val_loss).enumerate().map(move |(epoch, (t, v))| LossRow {
                model: name,
                epoch: epoch + 1,
                train_loss: *t,
                val_loss: *v,
            })
        })
        .collect()
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<TransitionDataset> {
    require_file(&cfg.paths.dataset)?;
    TransitionDataset::load(&cfg.paths.dataset).map_err(runtime)
}

fn load_base_models(cfg: &ExperimentConfig) -> Result<PriorModels> {
    for name in PriorModels::FILES {
        require_file(&cfg.paths.models.join(name))?;
    }
    PriorModels::load(&cfg.paths.models, cfg.episode.layout.count()).map_err(runtime)
}

/// Demonstration and models adapted to it, as written by [`stage_record_demo`].
pub fn load_scene(cfg: &ExperimentConfig, kind: ScenarioKind) -> Result<(Demonstration, PriorModels)> {
    let base = load_base_models(cfg)?;
    let (demo_path, reg_path) = (cfg.demo_path(kind), cfg.tuned_registration_path(kind));
    require_file(&demo_path)?;
    require_file(&reg_path)?;
    let demo = Demonstration::load(&demo_path).map_err(runtime)?;
    let registration = DenseNetwork::load(&reg_path).map_err(runtime)?;
    let models = PriorModels::new(base.forward, base.inverse, registration, base.keypoint_count).map_err(runtime)?;
    Ok((demo, models))
}

pub fn stage_collect(cfg: &ExperimentConfig) -> Result<TransitionDataset> {
    let ds = build_dataset(cfg)?;
    let bytes = ds.to_bytes();
    atomic_write(&cfg.paths.dataset, |w| w.write_all(&bytes))?;
    Ok(ds)
}

/// Train the priors and write the three networks plus `loss_curves.csv`.
pub fn stage_train(cfg: &ExperimentConfig) -> Result<PriorModels> {
    let ds = load_dataset(cfg)?;
    let (models, reports) = train_priors(cfg, &ds)?;
    for (name, net) in PriorModels::FILES.iter().zip([&models.forward, &models.inverse, &models.registration]) {
        atomic_write(&cfg.paths.models.join(name), |w| net.write_to(w).map_err(std::io::Error::other))?;
    }
    write_csv(&cfg.paths.models.join("loss_curves.csv"), &cfg.hash(), cfg.train.train.seed, &loss_rows(&reports))?;
    Ok(models)
}

/// Record the demonstration of `kind` and adapt f_A to it.
pub fn stage_record_demo(cfg: &ExperimentConfig, kind: ScenarioKind) -> Result<Demonstration> {
    let ds = load_dataset(cfg)?;
    let base = load_base_models(cfg)?;
    let demo = make_demo(cfg, kind)?;
    let (tuned, report) = tune_registration(cfg, &ds, &base.registration, &demo)?;
    let text = demo.to_text();
    atomic_write(&cfg.demo_path(kind), |w| w.write_all(text.as_bytes()))?;
    atomic_write(&cfg.tuned_registration_path(kind), |w| tuned.write_to(w).map_err(std::io::Error::other))?;
    let curve = format!("loss_curves-registration-{}.csv", kind.as_str());
    write_csv(&cfg.paths.models.join(curve), &cfg.hash(), cfg.train.train.seed, &loss_rows(&[("registration", report)]))?;
    Ok(demo)
}

/// One trial with its trace and planner telemetry.
pub fn stage_imitate(cfg: &ExperimentConfig, kind: ScenarioKind, method: Method, trial: usize) -> Result<TrialOutcome> {
    let seeds = cfg.trial_seeds();
    let seed = *seeds.get(trial).ok_or_else(|| HarnessError::Config(format!("trial {trial} is out of range (trials = {})", cfg.trials)))?;
    let (demo, models) = load_scene(cfg, kind)?;
    let out = run_trial(cfg, kind, method, trial, seed, &demo, &models)?;
    let stem = format!("{}-{}-trial{trial}", kind.as_str(), method.as_str());
    let hash = cfg.hash();
    let header = TraceHeader {
        kind: kind.as_str().into(),
        config_hash: hash.clone(),
        seed,
        keypoint_count: models.keypoint_count,
        include_mesh: false,
    };
    let ep = &out.episode;
    let records: Vec<TraceRecord> = ep
        .states
        .iter()
        .enumerate()
        .map(|(t, s)| TraceRecord {
            t,
            anchors: [s.points[0].into(), s.points[1].into()],
            keypoints: s.to_flat(),
            mesh: None,
            reward: t.checked_sub(1).map(|i| ep.rewards[i]),
            cost: t.checked_sub(1).map(|i| ep.planned_costs[i] as f64),
            chamfer: Some(ep.chamfer[t]),
        })
        .collect();
    atomic_write(&cfg.paths.output.join(format!("{stem}.trace.jsonl")), |w| write_trace(w, &header, &records))?;
    write_csv(&cfg.paths.output.join(format!("{stem}.telemetry.csv")), &hash, seed, &telemetry_rows(&ep.telemetry))?;
    Ok(out)
}

fn telemetry_rows(telemetry: &[Vec<IterationStats>]) -> Vec<TelemetryRow> {
    telemetry
        .iter()
        .enumerate()
        .flat_map(|(step, its)| {
            its.iter().map(move |it| TelemetryRow {
                step,
                iteration: it.iteration,
                best_reward: it.best_reward,
                mean_elite_reward: it.mean_elite_reward,
                feasible_fraction: it.feasible_fraction,
                max_sigma: it.max_sigma,
            })
        })
        .collect()
}

/// Run every trial of every scenario with each method; per method write
/// `summary-<method>.csv`/`.txt` and `chamfer-<scenario>-<method>.csv`.
pub fn stage_evaluate(cfg: &ExperimentConfig, methods: &[Method]) -> Result<RunSummary> {
    let scenes = cfg.scenarios.iter().map(|&k| load_scene(cfg, k).map(|s| (k, s))).collect::<Result<Vec<_>>>()?;
    let hash = cfg.hash();
    let mut all = RunSummary::default();
    for &method in methods {
        let mut summary = RunSummary::default();
        for (kind, (demo, models)) in &scenes {
            let outcomes = run_trials(cfg, *kind, method, demo, models)?;
            let curves: Vec<ChamferRow> = outcomes
                .iter()
                .flat_map(|o| {
                    let n = o.episode.chamfer.len();
                    o.episode.chamfer.iter().enumerate().map(move |(i, c)| ChamferRow {
                        trial: o.row.trial,
                        step: i.min(n - 2),
                        released: i == n - 1,
                        chamfer: *c,
                    })
                })
                .collect();
            let name = format!("chamfer-{}-{}.csv", kind.as_str(), method.as_str());
            write_csv(&cfg.paths.output.join(name), &hash, cfg.master_seed, &curves)?;
            summary.rows.extend(outcomes.into_iter().map(|o| o.row));
        }
        summary.write(&cfg.paths.output.join(format!("summary-{}.csv", method.as_str())), &hash, cfg.master_seed)?;
        all.rows.extend(summary.rows);
    }
    Ok(all)
}

/// Merge every `summary-*.csv` under `dir` into `report.csv`/`report.txt`.
pub fn stage_report(dir: &Path) -> Result<RunSummary> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| HarnessError::MissingArtifact(dir.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("summary-") && name.ends_with(".csv")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::MissingArtifact(dir.join("summary-*.csv")));
    }
    let mut hashes = Vec::new();
    let mut report = RunSummary::default();
    for f in &files {
        let first = std::fs::read_to_string(f).map_err(runtime)?.lines().next().unwrap_or("").to_string();
        if !hashes.contains(&first) {
            hashes.push(first);
        }
        report.rows.extend(RunSummary::read(f)?.rows);
    }
    let hash = crate::config_hash(&hashes);
    report.write(&dir.join("report.csv"), &hash, 0)?;
    Ok(report)
}

/// Controller variant names accepted on the command line.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',').map(|m| m.trim().parse().map_err(HarnessError::Config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scenario: ScenarioKind, method: Method, success: bool, iou: f64) -> TrialRow {
        TrialRow {
            scenario,
            method,
            trial: 0,
            seed: 1,
            offset_x: 0.0,
            offset_y: 0.0,
            yaw: 0.0,
            success,
            steps: 3,
            termination: Termination::ExhaustedSteps,
            initial_chamfer: 0.1,
            final_chamfer: 0.01,
            final_iou: iou,
            audit_violations: 0,
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("trials = 3\n[randomization]\ntranslation_x = 0.02\n").unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.randomization.translation_x, 0.02);
        assert_eq!(cfg.randomization.translation_y, Randomization::default().translation_y);
    }

    #[test]
    fn schema_violations_are_config_errors() {
        for text in [
            "trials = 0",
            "trials = 2\nseeds = [1, 2, 3]",
            "scenarios = []",
            "scenarios = [\"contact-free\"]",
            "unknown_key = 1",
            "[randomization]\nyaw = -1.0",
            "[episode.control]\nelite_count = 500",
            "trials = \"many\"",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn trial_seeds_and_poses_are_reproducible() {
        let cfg = ExperimentConfig { trials: 5, ..Default::default() };
        let seeds = cfg.trial_seeds();
        assert_eq!(seeds, cfg.trial_seeds());
        assert_eq!(seeds.len(), 5);
        let distinct: std::collections::HashSet<_> = seeds.iter().collect();
        assert_eq!(distinct.len(), 5);
        for s in seeds {
            let p = cfg.trial_pose(s);
            assert_eq!(p, cfg.trial_pose(s));
            assert!(p.position[0].abs() <= cfg.randomization.translation_x);
            assert!(p.position[1].abs() <= cfg.randomization.translation_y);
            assert_eq!(p.yaw, 0.0);
        }
        let explicit = ExperimentConfig { trials: 2, seeds: vec![9, 4], ..Default::default() };
        assert_eq!(explicit.trial_seeds(), vec![9, 4]);
    }

    #[test]
    fn aggregates_match_hand_computation() {
        let rows = [
            row(ScenarioKind::Box, Method::Full, true, 0.9),
            row(ScenarioKind::Box, Method::Full, false, 0.5),
            row(ScenarioKind::Box, Method::Full, true, 0.7),
            row(ScenarioKind::Box, Method::Full, true, 0.9),
        ];
        let a = Aggregate::from_rows(&rows);
        assert_eq!(a.trials, 4);
        assert!((a.success_rate - 0.75).abs() < 1e-12);
        assert!((a.mu_iou - 0.75).abs() < 1e-12);
        // deviations 0.15, -0.25, -0.05, 0.15
        let var: f64 = (0.0225 + 0.0625 + 0.0025 + 0.0225) / 4.0;
        assert!((a.sigma_iou - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summary_round_trips_and_tables_have_one_row_per_method() {
        let dir = tempfile::tempdir().unwrap();
        let mut summary = RunSummary::default();
        for (i, m) in [Method::NoCost, Method::Full, Method::NoMpc, Method::NoPrior].into_iter().enumerate() {
            for s in [ScenarioKind::Box, ScenarioKind::Hanger] {
                summary.rows.push(row(s, m, i % 2 == 0, 0.1 * i as f64 + 1.0 / 3.0));
            }
        }
        let path = dir.path().join("summary-all.csv");
        summary.write(&path, "abc", 5).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc seed=5\n"));
        assert!(std::fs::read_to_string(path.with_extension("txt")).unwrap().starts_with("# config_hash=abc"));
        let back = RunSummary::read(&path).unwrap();
        assert_eq!(back, summary);

        let table = summary.table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("box Rate %") && lines[0].contains("hanger sigma_IoU"));
        let order: Vec<&str> = lines[1..].iter().map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(order, ["full", "no-mpc", "no-prior", "no-cost"]);
        // aligned columns
        let width = lines[0].len();
        assert!(lines.iter().all(|l| l.len() == width));
        assert!(lines[1].starts_with("full "));
    }

    #[test]
    fn report_merges_summaries_and_flags_missing_ones() {
        let dir = tempfile::tempdir().unwrap();
        let err = stage_report(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        for m in Method::ALL {
            let s = RunSummary { rows: vec![row(ScenarioKind::Box, m, m == Method::Full, 0.5)] };
            s.write(&dir.path().join(format!("summary-{}.csv", m.as_str())), "h", 1).unwrap();
        }
        let report = stage_report(dir.path()).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.aggregate(ScenarioKind::Box, Method::Full).success_rate, 1.0);
        assert!(dir.path().join("report.txt").is_file());
    }

    #[test]
    fn atomic_write_leaves_no_staging_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        atomic_write(&path, |w| w.write_all(b"one")).unwrap();
        atomic_write(&path, |w| w.write_all(b"two")).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
        let failed = atomic_write(&path, |_| Err(std::io::Error::other("boom")));
        assert_eq!(failed.unwrap_err().exit_code(), 4);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
    }

    #[test]
    fn downstream_stages_report_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig { trials: 1, ..Default::default() };
        cfg.paths.dataset = dir.path().join("none.bin");
        cfg.paths.models = dir.path().join("models");
        cfg.paths.demos = dir.path().join("demos");
        cfg.paths.output = dir.path().join("out");
        assert_eq!(stage_train(&cfg).unwrap_err().exit_code(), 3);
        assert_eq!(stage_record_demo(&cfg, ScenarioKind::Box).unwrap_err().exit_code(), 3);
        assert_eq!(stage_imitate(&cfg, ScenarioKind::Box, Method::Full, 0).unwrap_err().exit_code(), 3);
        assert_eq!(stage_evaluate(&cfg, &[Method::Full]).unwrap_err().exit_code(), 3);
        assert_eq!(stage_imitate(&cfg, ScenarioKind::Box, Method::Full, 7).unwrap_err().exit_code(), 2);
    }
}
