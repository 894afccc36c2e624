//! Safe sampling-based MPC: an inverse-dynamics action prior seeds a
//! cross-entropy search over action sequences whose rewards and costs are
//! predicted with the learned forward model. Only the first action of the
//! best feasible sequence is executed before replanning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{cost, BimanualAction, ConstraintConfig};
use crate::demo::{Demonstration, CLOUD_POINTS};
use crate::priors::PriorModels;
use crate::reward::{is_terminated, reward_batch, subgoal, Registrar, RewardConfig};
use crate::sim::{check_success, init_scenario, release_and_settle, step, RigidScene, ScenarioSpec, SimConfig, SuccessConfig};
use crate::state::{chamfer, extract_keypoints, polygon_iou, sample_pointcloud, KeypointLayout, KeypointState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Planning horizon (steps).
    pub horizon: usize,
    /// Episode step budget.
    pub max_steps: usize,
    pub n_samples: usize,
    pub elite_count: usize,
    /// Portion of the elite statistics blended in per iteration.
    pub beta: f64,
    pub gamma: f64,
    /// Initial per-dimension noise variance (m^2).
    pub sigma_init: f64,
    /// Planning stops once every noise variance is below this (m^2).
    pub tau_conv: f64,
    pub max_iterations: usize,
    /// Carry the previous elites into the next candidate pool.
    pub keep_elites: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            max_steps: 40,
            n_samples: 200,
            elite_count: 20,
            beta: 0.7,
            gamma: 0.95,
            sigma_init: 0.01 * 0.01,
            tau_conv: 0.005 * 0.005,
            max_iterations: 8,
            keep_elites: true,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 || self.n_samples == 0 || self.max_iterations == 0 {
            return Err("horizon, n_samples and max_iterations must be positive".into());
        }
        if self.elite_count == 0 || self.elite_count > self.n_samples {
            return Err("elite_count must lie in 1..=n_samples".into());
        }
        if self.horizon > self.max_steps.max(1) {
            return Err("horizon must not exceed max_steps".into());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) || !(0.0..=1.0).contains(&self.gamma) {
            return Err("need beta in (0, 1] and gamma in [0, 1]".into());
        }
        if !(self.sigma_init >= 0.0 && self.tau_conv >= 0.0) {
            return Err("noise variances must be non-negative".into());
        }
        Ok(())
    }
}

/// Variant of the controller, for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Full,
    /// Execute the inverse-model action toward the subgoal, no search.
    NoMpc,
    /// Search around a zero sequence instead of the action prior.
    NoPrior,
    /// Pick elites by reward alone.
    NoCost,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Full, Method::NoMpc, Method::NoPrior, Method::NoCost];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::NoMpc => "no-mpc",
            Method::NoPrior => "no-prior",
            Method::NoCost => "no-cost",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Read-only inputs shared by every planning call of an episode. States and
/// actions are in the object frame.
pub struct PlanContext<'a> {
    pub models: &'a PriorModels,
    pub registrar: &'a dyn Registrar,
    pub demo: &'a Demonstration,
    pub scene: &'a RigidScene,
    pub constraints: &'a ConstraintConfig,
    pub reward: &'a RewardConfig,
    /// Lowest height a gripper may be commanded to.
    pub floor: f64,
}

impl PlanContext<'_> {
    fn project(&self, a: &BimanualAction, s: &KeypointState) -> BimanualAction {
        a.clamped(self.constraints.max_step).above_floor(s, self.floor)
    }
}

/// Alternate inverse dynamics toward the next subgoal with forward
/// prediction, `h` times.
pub fn action_prior(s: &KeypointState, ctx: &PlanContext, h: usize) -> Vec<BimanualAction> {
    let mut cur = s.clone();
    let mut out = Vec::with_capacity(h);
    for _ in 0..h {
        let goal = subgoal(&cur, ctx.demo);
        let a = ctx.project(&ctx.models.infer_action(&cur, goal), &cur);
        cur = ctx.models.predict_next(&cur, &a);
        out.push(a);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Discounted sum of predicted rewards.
    pub reward: f64,
    /// Number of predicted steps violating a safety rule.
    pub cost: u32,
}

/// Predicted reward and cost of each candidate sequence. The sequences are
/// projected into the action box (and above the floor) in place. A rollout
/// whose predicted state is classified as finished stops there: its
/// remaining actions would never be executed, so they add no cost and the
/// final reward is held for the rest of the horizon.
pub fn evaluate_batch(s: &KeypointState, candidates: &mut [Vec<BimanualAction>], ctx: &PlanContext, gamma: f64) -> Vec<Evaluation> {
    let n = candidates.len();
    let h = candidates.first().map_or(0, |c| c.len());
    let mut states = vec![s.clone(); n];
    let mut evals = vec![Evaluation { reward: 0.0, cost: 0 }; n];
    let mut held: Vec<Option<f64>> = vec![None; n];
    let mut discount = 1.0;
    for k in 0..h {
        let live: Vec<usize> = (0..n).filter(|&i| held[i].is_none()).collect();
        let from: Vec<KeypointState> = live.iter().map(|&i| states[i].clone()).collect();
        let actions: Vec<BimanualAction> = live
            .iter()
            .map(|&i| {
                candidates[i][k] = ctx.project(&candidates[i][k], &states[i]);
                candidates[i][k]
            })
            .collect();
        let next = ctx.models.predict_next_batch(&from, &actions);
        let rewards = reward_batch(&next, ctx.demo, ctx.registrar, ctx.reward);
        let held_before = held.clone();
        for (j, &i) in live.iter().enumerate() {
            if !cost(&from[j], &actions[j], &next[j], ctx.scene, ctx.constraints).is_safe() {
                evals[i].cost += 1;
            }
            let r = rewards[j].value;
            evals[i].reward += if r.is_finite() { discount * r } else { f64::NEG_INFINITY };
            if rewards[j].terminated {
                held[i] = Some(r);
            }
        }
        for (j, &i) in live.iter().enumerate() {
            states[i] = next[j].clone();
        }
        for (ev, r) in evals.iter_mut().zip(&held_before) {
            if let Some(r) = r {
                ev.reward += discount * r;
            }
        }
        discount *= gamma;
    }
    evals
}

pub fn evaluate(s: &KeypointState, sequence: &[BimanualAction], ctx: &PlanContext, gamma: f64) -> Evaluation {
    let mut c = vec![sequence.to_vec()];
    evaluate_batch(s, &mut c, ctx, gamma)[0]
}

/// Statistics of one CEM iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub best_reward: f64,
    pub mean_elite_reward: f64,
    pub feasible_fraction: f64,
    pub max_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// First action of the best feasible sequence, if any was found.
    pub action: Option<BimanualAction>,
    pub sequence: Vec<BimanualAction>,
    pub evaluation: Option<Evaluation>,
    pub iterations: Vec<IterationStats>,
}

fn flatten(seq: &[BimanualAction]) -> Vec<f64> {
    seq.iter().flat_map(|a| a.to_array()).collect()
}

fn unflatten(v: &[f64]) -> Vec<BimanualAction> {
    v.chunks(6).map(BimanualAction::from_slice).collect()
}

/// Indices of the elites: the `count` highest rewards among candidates with
/// zero cost (all candidates when `use_cost` is false). Ties keep the
/// earlier candidate first.
pub fn select_elites(evals: &[Evaluation], count: usize, use_cost: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..evals.len()).filter(|&i| evals[i].reward.is_finite() && (!use_cost || evals[i].cost == 0)).collect();
    idx.sort_by(|&a, &b| evals[b].reward.total_cmp(&evals[a].reward));
    idx.truncate(count);
    idx
}

/// Blend the elite mean and (population) variance into the sampling
/// distribution with portion `beta`.
pub fn cem_update(mu: &mut [f64], sigma: &mut [f64], elite_noise: &[Vec<f64>], beta: f64) {
    let k = elite_noise.len() as f64;
    for d in 0..mu.len() {
        let m = elite_noise.iter().map(|e| e[d]).sum::<f64>() / k;
        let v = elite_noise.iter().map(|e| (e[d] - m).powi(2)).sum::<f64>() / k;
        mu[d] = (1.0 - beta) * mu[d] + beta * m;
        sigma[d] = (1.0 - beta) * sigma[d] + beta * v;
    }
}

/// Cross-entropy search over `h`-step sequences around the action prior.
pub fn cem_plan(s: &KeypointState, ctx: &PlanContext, cfg: &ControlConfig, method: Method, rng: &mut ChaCha8Rng) -> Plan {
    let h = cfg.horizon;
    let dim = 6 * h;
    let prior = if method == Method::NoPrior {
        vec![0.0; dim]
    } else {
        flatten(&action_prior(s, ctx, h))
    };
    let use_cost = method != Method::NoCost;
    let mut mu = vec![0.0; dim];
    let mut sigma = vec![cfg.sigma_init; dim];
    let mut best: Option<(Vec<BimanualAction>, Evaluation)> = None;
    let mut elites: Vec<(Vec<BimanualAction>, Evaluation)> = Vec::new();
    let mut iterations = Vec::new();

    for iteration in 0..cfg.max_iterations {
        let mut candidates: Vec<Vec<BimanualAction>> = (0..cfg.n_samples)
            .map(|i| {
                let x: Vec<f64> = (0..dim)
                    .map(|d| {
                        // the first candidate of the first iteration is the noise-free mean
                        let noise = if iteration == 0 && i == 0 {
                            0.0
                        } else {
                            let z: f64 = StandardNormal.sample(rng);
                            sigma[d].sqrt() * z
                        };
                        prior[d] + mu[d] + noise
                    })
                    .collect();
                unflatten(&x)
            })
            .collect();
        let evals = evaluate_batch(s, &mut candidates, ctx, cfg.gamma);
        let mut pool: Vec<(Vec<BimanualAction>, Evaluation)> = candidates.into_iter().zip(evals).collect();
        let feasible_fraction = pool.iter().filter(|(_, e)| e.cost == 0).count() as f64 / cfg.n_samples as f64;
        if cfg.keep_elites {
            pool.append(&mut elites);
        }
        let evals: Vec<Evaluation> = pool.iter().map(|(_, e)| *e).collect();
        let chosen = select_elites(&evals, cfg.elite_count, use_cost);
        let mut slots: Vec<Option<(Vec<BimanualAction>, Evaluation)>> = pool.into_iter().map(Some).collect();
        elites = chosen.iter().map(|&i| slots[i].take().expect("indices are distinct")).collect();

        if let Some((seq, ev)) = elites.first() {
            if best.as_ref().map_or(true, |(_, b)| ev.reward > b.reward) {
                best = Some((seq.clone(), *ev));
            }
            let noise: Vec<Vec<f64>> = elites.iter().map(|(seq, _)| flatten(seq).iter().zip(&prior).map(|(x, p)| x - p).collect()).collect();
            cem_update(&mut mu, &mut sigma, &noise, cfg.beta);
        }
        let max_sigma = sigma.iter().copied().fold(0.0, f64::max);
        iterations.push(IterationStats {
            iteration,
            best_reward: best.as_ref().map_or(f64::NAN, |(_, e)| e.reward),
            mean_elite_reward: if elites.is_empty() {
                f64::NAN
            } else {
                elites.iter().map(|(_, e)| e.reward).sum::<f64>() / elites.len() as f64
            },
            feasible_fraction,
            max_sigma,
        });
        if best.is_some() && max_sigma < cfg.tau_conv {
            break;
        }
    }
    match best {
        Some((sequence, ev)) => Plan { action: Some(sequence[0]), sequence, evaluation: Some(ev), iterations },
        None => Plan { action: None, sequence: Vec::new(), evaluation: None, iterations },
    }
}

/// Something that proposes the next action from the current keypoints.
pub trait Policy {
    fn plan(&mut self, s: &KeypointState, t: usize, ctx: &PlanContext) -> Plan;
}

/// The controller in one of its variants.
pub struct MpcPolicy {
    pub config: ControlConfig,
    pub method: Method,
    rng: ChaCha8Rng,
}

impl MpcPolicy {
    pub fn new(config: ControlConfig, method: Method, seed: u64) -> Self {
        Self { config, method, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for MpcPolicy {
    fn plan(&mut self, s: &KeypointState, _t: usize, ctx: &PlanContext) -> Plan {
        if self.method == Method::NoMpc {
            let a = ctx.project(&ctx.models.infer_action(s, subgoal(s, ctx.demo)), s);
            return Plan { action: Some(a), sequence: vec![a], evaluation: None, iterations: Vec::new() };
        }
        cem_plan(s, ctx, &self.config, self.method, &mut self.rng)
    }
}

/// Replays the grasped-corner displacements between consecutive
/// demonstration states.
pub struct ScriptedOracle {
    actions: Vec<BimanualAction>,
}

impl ScriptedOracle {
    pub fn from_demo(demo: &Demonstration) -> Self {
        let actions = demo
            .states
            .windows(2)
            .map(|w| BimanualAction::new(w[1].points[0] - w[0].points[0], w[1].points[1] - w[0].points[1]))
            .collect();
        Self { actions }
    }
}

impl Policy for ScriptedOracle {
    fn plan(&mut self, _s: &KeypointState, t: usize, _ctx: &PlanContext) -> Plan {
        let action = self.actions.get(t).copied();
        Plan { action, sequence: action.into_iter().collect(), evaluation: None, iterations: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    TerminatedSuccessClassifier,
    ExhaustedSteps,
    NoFeasibleAction,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::TerminatedSuccessClassifier => "terminated-success-classifier",
            Termination::ExhaustedSteps => "exhausted-steps",
            Termination::NoFeasibleAction => "no-feasible-action",
        }
    }
}

/// Everything an episode needs besides the models and the demonstration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub sim: SimConfig,
    pub success: SuccessConfig,
    pub constraints: ConstraintConfig,
    pub reward: RewardConfig,
    pub control: ControlConfig,
    pub layout: KeypointLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub steps: usize,
    pub termination: Termination,
    pub actions: Vec<BimanualAction>,
    /// Keypoints before the first and after every executed action.
    pub states: Vec<KeypointState>,
    pub success: bool,
    /// True reward after every executed action.
    pub rewards: Vec<f64>,
    /// Predicted sequence cost of each executed plan (0 for unplanned actions).
    pub planned_costs: Vec<u32>,
    /// Executed actions whose true next state breaks a safety rule.
    pub audit_violations: usize,
    /// Chamfer distance to the demonstration's final cloud: initially, after
    /// every step, and after release.
    pub chamfer: Vec<f64>,
    /// IoU between the last grasped state and the final demonstration state.
    pub final_iou: f64,
    pub telemetry: Vec<Vec<IterationStats>>,
}

impl EpisodeResult {
    pub fn final_chamfer(&self) -> f64 {
        *self.chamfer.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("scenario could not be initialised: {0}")]
    Scenario(#[from] crate::sim::SimError),
    #[error("demonstration and models disagree on keypoint count ({demo} vs {models})")]
    KeypointCount { demo: usize, models: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Receding-horizon loop in the true simulator. After termination the
/// grippers open, the fabric settles and the success predicate is checked.
pub fn run_episode(
    spec: &ScenarioSpec,
    demo: &Demonstration,
    models: &PriorModels,
    cfg: &EpisodeConfig,
    policy: &mut dyn Policy,
) -> Result<EpisodeResult, EpisodeError> {
    cfg.control.validate().map_err(EpisodeError::Config)?;
    let mut state = init_scenario(spec)?;
    if demo.last().len() != models.keypoint_count || cfg.layout.count() != models.keypoint_count {
        return Err(EpisodeError::KeypointCount { demo: demo.last().len(), models: models.keypoint_count });
    }
    let scene = state.scene.clone();
    let frame = scene.frame();
    let registrar = crate::reward::registrar(cfg.reward.registration, models);
    let ctx = PlanContext {
        models,
        registrar,
        demo,
        scene: &scene,
        constraints: &cfg.constraints,
        reward: &cfg.reward,
        floor: scene.local_floor(),
    };
    let distance_to_demo = |st: &crate::sim::SimState| {
        let cloud = sample_pointcloud(st, CLOUD_POINTS).expect("mesh has enough vertices");
        chamfer(&cloud, &demo.final_cloud).expect("clouds are non-empty")
    };

    let mut s = extract_keypoints(&state, &cfg.layout);
    let mut result = EpisodeResult {
        steps: 0,
        termination: Termination::ExhaustedSteps,
        actions: Vec::new(),
        states: vec![s.clone()],
        success: false,
        rewards: Vec::new(),
        planned_costs: Vec::new(),
        audit_violations: 0,
        chamfer: vec![distance_to_demo(&state)],
        final_iou: 0.0,
        telemetry: Vec::new(),
    };

    for t in 0..cfg.control.max_steps {
        let plan = policy.plan(&s, t, &ctx);
        result.telemetry.push(plan.iterations.clone());
        let Some(a) = plan.action else {
            result.termination = Termination::NoFeasibleAction;
            break;
        };
        // sampling-time recheck with the predicted next state
        let predicted = models.predict_next(&s, &a);
        if !cost(&s, &a, &predicted, &scene, &cfg.constraints).is_safe() {
            result.termination = Termination::NoFeasibleAction;
            break;
        }
        let world = BimanualAction::new(frame.vector_to_world(&a.left), frame.vector_to_world(&a.right));
        let Ok(next) = step(&state, &world, &cfg.sim) else {
            result.termination = Termination::NoFeasibleAction;
            break;
        };
        state = next;
        let s_next = extract_keypoints(&state, &cfg.layout);
        if !cost(&s, &a, &s_next, &scene, &cfg.constraints).is_safe() {
            result.audit_violations += 1;
        }
        result.rewards.push(reward_batch(std::slice::from_ref(&s_next), demo, registrar, &cfg.reward)[0].value);
        result.planned_costs.push(plan.evaluation.map_or(0, |e| e.cost));
        result.chamfer.push(distance_to_demo(&state));
        result.actions.push(a);
        result.states.push(s_next.clone());
        result.steps += 1;
        s = s_next;
        if is_terminated(&s, demo, &cfg.reward) {
            result.termination = Termination::TerminatedSuccessClassifier;
            break;
        }
    }

    result.final_iou = polygon_iou(&s, demo.last()).value;
    let settled = release_and_settle(&state, &cfg.sim);
    result.success = check_success(&settled, &cfg.success).unwrap_or(false);
    result.chamfer.push(distance_to_demo(&settled));
    Ok(result)
}

/// Run one episode with the controller variant `method`.
pub fn ablate(
    method: Method,
    spec: &ScenarioSpec,
    demo: &Demonstration,
    models: &PriorModels,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeResult, EpisodeError> {
    let mut policy = MpcPolicy::new(cfg.control.clone(), method, seed);
    run_episode(spec, demo, models, cfg, &mut policy)
}
