//! Task-family priors learned in the contact-free scene: the random
//! exploration dataset, forward and inverse keypoint dynamics, and the
//! learned registration model, plus the closed-form Kabsch registration.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraints::{cost, rigid_prediction, sample_valid_action, BimanualAction, ConstraintConfig};
use crate::geometry::{euler_zyx_jacobian, euler_zyx_to_matrix, matrix_to_euler_zyx, Vec3};
use crate::net::{DenseNetwork, NetError, Normalizer, TrainConfig, TrainReport};
use crate::sim::{init_scenario, step, PlacementJitter, ScenarioKind, ScenarioSpec, SimConfig};
use crate::state::{extract_keypoints, KeypointLayout, KeypointState};

const DATASET_MAGIC: &[u8; 8] = b"FIMDATA\0";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("dataset has {have} records, at least {need} are required")]
    InsufficientData { have: usize, need: usize },
    #[error("scenario must be contact-free for exploration, got {0:?}")]
    NotContactFree(ScenarioKind),
    #[error("model {name} has shape {got:?}, expected {expected:?}")]
    ModelShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: KeypointState,
    pub a: BimanualAction,
    pub s_next: KeypointState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub records: Vec<Transition>,
    pub keypoint_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Settings of the random exploration in the contact-free scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub scenario: ScenarioSpec,
    pub sim: SimConfig,
    pub constraints: ConstraintConfig,
    pub layout: KeypointLayout,
    /// Steps before an exploration episode is reset.
    pub horizon: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec { jitter: PlacementJitter { translation: 0.04, yaw: 0.15 }, ..ScenarioSpec::default() },
            sim: SimConfig::default(),
            constraints: ConstraintConfig::default(),
            layout: KeypointLayout::default(),
            horizon: 30,
        }
    }
}

/// Derive independent seeds from a master seed.
pub fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Roll out random safe actions, resetting after `horizon` steps or when no
/// safe action can be found.
pub fn collect_dataset(n: usize, cfg: &CollectConfig, seed: u64) -> Result<TransitionDataset, PriorError> {
    if cfg.scenario.kind != ScenarioKind::ContactFree {
        return Err(PriorError::NotContactFree(cfg.scenario.kind));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut episode = 0u64;
    while records.len() < n {
        let spec = ScenarioSpec { seed: splitmix(seed, episode), ..cfg.scenario.clone() };
        episode += 1;
        let mut state = init_scenario(&spec).map_err(|e| PriorError::Format(e.to_string()))?;
        let floor = state.scene.local_floor();
        let mut s = extract_keypoints(&state, &cfg.layout);
        for _ in 0..cfg.horizon {
            if records.len() == n {
                break;
            }
            let Some(a) = sample_floored(&s, &state.scene, &cfg.constraints, floor, &mut rng) else { break };
            let Ok(next) = step(&state, &a, &cfg.sim) else { break };
            let s_next = extract_keypoints(&next, &cfg.layout);
            if !s_next.is_finite() {
                break;
            }
            records.push(Transition { s: s.clone(), a, s_next: s_next.clone() });
            state = next;
            s = s_next;
        }
    }
    log::info!("collected {} transitions over {} episodes", records.len(), episode);
    Ok(TransitionDataset { records, keypoint_count: cfg.layout.count(), seed, config_hash: crate::config_hash(cfg) })
}

fn sample_floored<R: Rng>(
    s: &KeypointState,
    scene: &crate::sim::RigidScene,
    cfg: &ConstraintConfig,
    floor: f64,
    rng: &mut R,
) -> Option<BimanualAction> {
    for _ in 0..cfg.max_sampling_attempts {
        let a = sample_valid_action(s, scene, cfg, rng).ok()?;
        let lifted = a.above_floor(s, floor);
        if lifted == a {
            return Some(a);
        }
        if lifted.within_box(cfg.max_step) && cost(s, &lifted, &rigid_prediction(s, &lifted), scene, cfg).is_safe() {
            return Some(lifted);
        }
    }
    None
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.keypoint_count as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        for r in &self.records {
            let values = r.s.to_flat().into_iter().chain(r.a.to_array()).chain(r.s_next.to_flat());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PriorError> {
        let bad = |m: &str| PriorError::Format(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], PriorError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("file is truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != DATASET_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(PriorError::Format(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if m == 0 || m > 1024 {
            return Err(bad("implausible keypoint count"));
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let hash_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config_hash = String::from_utf8(take(hash_len)?.to_vec()).map_err(|_| bad("hash is not UTF-8"))?;
        let width = 6 * m + 6;
        let body = take(count.checked_mul(width * 8).ok_or_else(|| bad("size overflow"))?)?;
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        drop(take);
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let records = values
            .chunks_exact(width)
            .map(|row| Transition {
                s: KeypointState::from_flat(&row[..3 * m]).unwrap(),
                a: BimanualAction::from_slice(&row[3 * m..3 * m + 6]),
                s_next: KeypointState::from_flat(&row[3 * m + 6..]).unwrap(),
            })
            .collect();
        Ok(Self { records, keypoint_count: m, seed, config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<(), PriorError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PriorError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn xy_centroid(s: &KeypointState) -> Vec3 {
    let c = s.centroid();
    Vec3::new(c.x, c.y, 0.0)
}

/// f_D input: the state shifted so its horizontal centroid is at the origin,
/// followed by the action. The network predicts the displacement S' - S.
pub fn forward_features(s: &KeypointState, a: &BimanualAction, out: &mut [f64]) {
    let c = xy_centroid(s);
    s.translated(&-c).write_flat(&mut out[..3 * s.len()]);
    out[3 * s.len()..].copy_from_slice(&a.to_array());
}

/// f_I input: both states shifted by the horizontal centroid of the first.
pub fn inverse_features(s: &KeypointState, s_next: &KeypointState, out: &mut [f64]) {
    let c = xy_centroid(s);
    let m = s.len();
    s.translated(&-c).write_flat(&mut out[..3 * m]);
    s_next.translated(&-c).write_flat(&mut out[3 * m..]);
}

/// f_A input: source and target in the object frame, unshifted.
pub fn registration_features(src: &KeypointState, tgt: &KeypointState, out: &mut [f64]) {
    let m = src.len();
    src.write_flat(&mut out[..3 * m]);
    tgt.write_flat(&mut out[3 * m..]);
}

/// Rigid transform `p -> R p + t` with `R` given as z-y-x Euler angles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidEstimate {
    pub euler: [f64; 3],
    pub translation: Vec3,
}

impl RigidEstimate {
    pub fn from_slice(v: &[f64]) -> Self {
        Self { euler: [v[0], v[1], v[2]], translation: Vec3::new(v[3], v[4], v[5]) }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_zyx_to_matrix(self.euler)
    }

    pub fn apply(&self, s: &KeypointState) -> KeypointState {
        let r = self.rotation();
        KeypointState::new(s.points.iter().map(|p| r * p + self.translation).collect())
    }

    /// Mean squared residual `|R src_i + t - tgt_i|^2` over the keypoints.
    pub fn residual(&self, src: &KeypointState, tgt: &KeypointState) -> f64 {
        let moved = self.apply(src);
        moved.points.iter().zip(&tgt.points).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / src.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KabschResult {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    /// The source points are (nearly) collinear, so the rotation about their
    /// common line is arbitrary.
    pub degenerate: bool,
}

impl KabschResult {
    pub fn estimate(&self) -> RigidEstimate {
        RigidEstimate { euler: matrix_to_euler_zyx(&self.rotation), translation: self.translation }
    }
}

/// Least-squares rigid alignment of `src` onto `tgt` (proper rotation).
pub fn kabsch_align(src: &KeypointState, tgt: &KeypointState) -> KabschResult {
    assert_eq!(src.len(), tgt.len(), "point sets differ in size");
    let cs = src.centroid();
    let ct = tgt.centroid();
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (p, q) in src.points.iter().zip(&tgt.points) {
        h += (p - cs) * (q - ct).transpose();
        spread += (p - cs) * (p - cs).transpose();
    }
    let mut sv = spread.symmetric_eigenvalues().as_slice().to_vec();
    sv.sort_by(|a, b| b.total_cmp(a));
    let degenerate = src.len() < 3 || sv[0] <= 1e-18 || sv[1] <= 1e-12 * sv[0];

    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    let rotation = v_t.transpose() * fix * u.transpose();
    KabschResult { rotation, translation: ct - rotation * cs, degenerate }
}

/// Hyper-parameters for training the three prior networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorTrainConfig {
    pub train: TrainConfig,
    /// Smallest dataset accepted for dynamics training.
    pub min_records: usize,
    pub hidden: Vec<usize>,
    /// Source/target pairs generated for registration training.
    pub registration_pairs: usize,
    /// Fraction of registration pairs that are exact self-pairs.
    pub self_pair_fraction: f64,
    /// Fraction of pairs whose target is a random rigid motion of the source.
    pub rigid_pair_fraction: f64,
    /// Epochs used when adapting the registration model to a demonstration.
    pub fine_tune_epochs: usize,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            min_records: 1000,
            hidden: vec![256, 256],
            registration_pairs: 20000,
            self_pair_fraction: 0.15,
            rigid_pair_fraction: 0.35,
            fine_tune_epochs: 20,
        }
    }
}

fn layers(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
}

fn require(ds: &TransitionDataset, cfg: &PriorTrainConfig) -> Result<(), PriorError> {
    if ds.len() < cfg.min_records.max(2) {
        return Err(PriorError::InsufficientData { have: ds.len(), need: cfg.min_records.max(2) });
    }
    Ok(())
}

/// Train f_D on (S, A) -> S'. The network learns S' - S.
pub fn train_forward(ds: &TransitionDataset, cfg: &PriorTrainConfig) -> Result<(DenseNetwork, TrainReport), PriorError> {
    require(ds, cfg)?;
    let m = ds.keypoint_count;
    let n = ds.len();
    let mut x = DMatrix::zeros(3 * m + 6, n);
    let mut y = DMatrix::zeros(3 * m, n);
    for (j, r) in ds.records.iter().enumerate() {
        forward_features(&r.s, &r.a, x.column_mut(j).as_mut_slice());
        let delta: Vec<f64> = r.s_next.to_flat().iter().zip(r.s.to_flat()).map(|(b, a)| b - a).collect();
        y.column_mut(j).copy_from_slice(&delta);
    }
    let mut net = DenseNetwork::new(&layers(3 * m + 6, &cfg.hidden, 3 * m), splitmix(cfg.train.seed, 1));
    net.tag = format!("forward-dynamics M={m}");
    let report = net.train(&x, &y, &cfg.train)?;
    Ok((net, report))
}

/// Train f_I on (S, S') -> A.
pub fn train_inverse(ds: &TransitionDataset, cfg: &PriorTrainConfig) -> Result<(DenseNetwork, TrainReport), PriorError> {
    require(ds, cfg)?;
    let m = ds.keypoint_count;
    let n = ds.len();
    let mut x = DMatrix::zeros(6 * m, n);
    let mut y = DMatrix::zeros(6, n);
    for (j, r) in ds.records.iter().enumerate() {
        inverse_features(&r.s, &r.s_next, x.column_mut(j).as_mut_slice());
        y.column_mut(j).copy_from_slice(&r.a.to_array());
    }
    let mut net = DenseNetwork::new(&layers(6 * m, &cfg.hidden, 6), splitmix(cfg.train.seed, 2));
    net.tag = format!("inverse-dynamics M={m}");
    let report = net.train(&x, &y, &cfg.train)?;
    Ok((net, report))
}

/// Random rigid motion used to synthesize registration pairs.
pub fn random_rigid<R: Rng>(rng: &mut R, max_angle: f64, max_shift: f64) -> RigidEstimate {
    let euler = [
        rng.gen_range(-max_angle..=max_angle),
        rng.gen_range(-max_angle..=max_angle),
        rng.gen_range(-max_angle..=max_angle),
    ];
    let t = Vec3::new(
        rng.gen_range(-max_shift..=max_shift),
        rng.gen_range(-max_shift..=max_shift),
        rng.gen_range(-max_shift..=max_shift),
    );
    RigidEstimate { euler, translation: t }
}

/// Source/target pairs for registration training: dataset states against
/// demonstration states (or against other dataset states when no
/// demonstration is given), exact self-pairs, and sources paired with a
/// random rigid motion of themselves.
pub fn registration_pairs(
    ds: &TransitionDataset,
    demo_states: &[KeypointState],
    count: usize,
    cfg: &PriorTrainConfig,
    seed: u64,
) -> Vec<(KeypointState, KeypointState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<&KeypointState> = ds.records.iter().map(|r| &r.s).collect();
    let targets: Vec<&KeypointState> = if demo_states.is_empty() { pool.clone() } else { demo_states.iter().collect() };
    (0..count)
        .map(|_| {
            let src = (*pool.choose(&mut rng).unwrap()).clone();
            let u: f64 = rng.gen();
            if u < cfg.self_pair_fraction {
                (src.clone(), src)
            } else if u < cfg.self_pair_fraction + cfg.rigid_pair_fraction {
                let angle = if rng.gen_bool(0.5) { 0.0 } else { 0.5 };
                let motion = random_rigid(&mut rng, angle, 0.08);
                let tgt = motion.apply(&src);
                (src, tgt)
            } else {
                (src, (*targets.choose(&mut rng).unwrap()).clone())
            }
        })
        .collect()
}

/// Train (or, given `base`, fine-tune) f_A with the registration loss
/// mean_i |R(theta) src_i + t - tgt_i|^2.
pub fn train_registration(
    pairs: &[(KeypointState, KeypointState)],
    base: Option<&DenseNetwork>,
    epochs: usize,
    cfg: &PriorTrainConfig,
) -> Result<(DenseNetwork, TrainReport), PriorError> {
    if pairs.len() < 2 {
        return Err(PriorError::InsufficientData { have: pairs.len(), need: 2 });
    }
    let m = pairs[0].0.len();
    let mut x = DMatrix::zeros(6 * m, pairs.len());
    for (j, (src, tgt)) in pairs.iter().enumerate() {
        registration_features(src, tgt, x.column_mut(j).as_mut_slice());
    }
    let mut net = match base {
        Some(b) => {
            if b.input_dim() != 6 * m || b.output_dim() != 6 {
                return Err(PriorError::ModelShape {
                    name: "registration".into(),
                    expected: (6 * m, 6),
                    got: (b.input_dim(), b.output_dim()),
                });
            }
            b.clone()
        }
        None => {
            let all: Vec<usize> = (0..pairs.len()).collect();
            let mut net = DenseNetwork::new(&layers(6 * m, &cfg.hidden, 6), splitmix(cfg.train.seed, 3));
            net.input_norm = Normalizer::fit(&x, &all);
            net.output_norm = Normalizer { mean: vec![0.0; 6], std: vec![0.3, 0.3, 0.3, 0.05, 0.05, 0.05] };
            net.tag = format!("registration M={m} euler=zyx");
            net
        }
    };
    let train_cfg = TrainConfig { epochs, ..cfg.train.clone() };
    let report = net.train_with(&x, &train_cfg, |idx, out| registration_objective(pairs, idx, out))?;
    Ok((net, report))
}

fn registration_objective(pairs: &[(KeypointState, KeypointState)], idx: &[usize], out: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let b = idx.len() as f64;
    let mut grad = DMatrix::zeros(6, idx.len());
    let mut loss = 0.0;
    for (j, &k) in idx.iter().enumerate() {
        let (src, tgt) = &pairs[k];
        let col = out.column(j);
        let euler = [col[0], col[1], col[2]];
        let t = Vec3::new(col[3], col[4], col[5]);
        let r = euler_zyx_to_matrix(euler);
        let jac = euler_zyx_jacobian(euler);
        let scale = 1.0 / src.len() as f64;
        let mut g = [0.0; 6];
        for (p, q) in src.points.iter().zip(&tgt.points) {
            let res = r * p + t - q;
            loss += res.norm_squared() * scale;
            for a in 0..3 {
                g[a] += 2.0 * scale * res.dot(&(jac[a] * p));
                g[3 + a] += 2.0 * scale * res[a];
            }
        }
        for (row, v) in g.iter().enumerate() {
            grad[(row, j)] = v / b;
        }
    }
    (loss / b, grad)
}

/// The three trained prior networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorModels {
    pub forward: DenseNetwork,
    pub inverse: DenseNetwork,
    pub registration: DenseNetwork,
    pub keypoint_count: usize,
}

impl PriorModels {
    pub const FILES: [&'static str; 3] = ["forward.net", "inverse.net", "registration.net"];

    pub fn new(
        forward: DenseNetwork,
        inverse: DenseNetwork,
        registration: DenseNetwork,
        keypoint_count: usize,
    ) -> Result<Self, PriorError> {
        let m = keypoint_count;
        let check = |name: &str, net: &DenseNetwork, expected: (usize, usize)| {
            let got = (net.input_dim(), net.output_dim());
            if got == expected {
                Ok(())
            } else {
                Err(PriorError::ModelShape { name: name.into(), expected, got })
            }
        };
        check("forward", &forward, (3 * m + 6, 3 * m))?;
        check("inverse", &inverse, (6 * m, 6))?;
        check("registration", &registration, (6 * m, 6))?;
        Ok(Self { forward, inverse, registration, keypoint_count })
    }

    pub fn save(&self, dir: &Path) -> Result<(), PriorError> {
        std::fs::create_dir_all(dir)?;
        for (name, net) in Self::FILES.iter().zip([&self.forward, &self.inverse, &self.registration]) {
            net.save(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, keypoint_count: usize) -> Result<Self, PriorError> {
        let [f, i, r] = Self::FILES.map(|name| DenseNetwork::load(&dir.join(name)));
        Self::new(f?, i?, r?, keypoint_count)
    }

    pub fn predict_next(&self, s: &KeypointState, a: &BimanualAction) -> KeypointState {
        self.predict_next_batch(std::slice::from_ref(s), std::slice::from_ref(a)).pop().unwrap()
    }

    pub fn predict_next_batch(&self, states: &[KeypointState], actions: &[BimanualAction]) -> Vec<KeypointState> {
        let m = self.keypoint_count;
        let width = 3 * m + 6;
        let mut x = DMatrix::zeros(width, states.len());
        for (j, (s, a)) in states.iter().zip(actions).enumerate() {
            forward_features(s, a, x.column_mut(j).as_mut_slice());
        }
        let delta = self.forward.forward_batch(&x).expect("feature width matches the model");
        states
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let d = delta.column(j);
                let mut points: Vec<Vec3> =
                    s.points.iter().enumerate().map(|(i, p)| p + Vec3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2])).collect();
                // the grippers carry the grasped corners exactly
                points[0] = s.points[0] + actions[j].left;
                points[1] = s.points[1] + actions[j].right;
                KeypointState::new(points)
            })
            .collect()
    }

    pub fn infer_action(&self, s: &KeypointState, s_next: &KeypointState) -> BimanualAction {
        self.infer_action_batch(std::slice::from_ref(s), std::slice::from_ref(s_next)).pop().unwrap()
    }

    pub fn infer_action_batch(&self, states: &[KeypointState], targets: &[KeypointState]) -> Vec<BimanualAction> {
        let m = self.keypoint_count;
        let mut x = DMatrix::zeros(6 * m, states.len());
        for (j, (s, t)) in states.iter().zip(targets).enumerate() {
            inverse_features(s, t, x.column_mut(j).as_mut_slice());
        }
        let out = self.inverse.forward_batch(&x).expect("feature width matches the model");
        out.column_iter().map(|c| BimanualAction::from_slice(c.as_slice())).collect()
    }

    pub fn register_batch(&self, sources: &[&KeypointState], targets: &[&KeypointState]) -> Vec<RigidEstimate> {
        let m = self.keypoint_count;
        let mut x = DMatrix::zeros(6 * m, sources.len());
        for (j, (s, t)) in sources.iter().zip(targets).enumerate() {
            registration_features(s, t, x.column_mut(j).as_mut_slice());
        }
        let out = self.registration.forward_batch(&x).expect("feature width matches the model");
        out.column_iter().map(|c| RigidEstimate::from_slice(c.as_slice())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_z;
    use proptest::{prop_assert, proptest};

    fn quad() -> KeypointState {
        KeypointState::new(vec![
            Vec3::new(-0.15, 0.0, 0.05),
            Vec3::new(0.15, 0.0, 0.05),
            Vec3::new(-0.14, -0.28, 0.0),
            Vec3::new(0.15, -0.3, 0.01),
        ])
    }

    #[test]
    fn kabsch_identity() {
        let s = quad();
        let k = kabsch_align(&s, &s);
        assert!(!k.degenerate);
        assert!((k.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(k.translation.norm() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_rotation_and_shift() {
        let s = quad();
        let r = rot_z(30f64.to_radians());
        let t = Vec3::new(0.1, 0.0, 0.0);
        let tgt = KeypointState::new(s.points.iter().map(|p| r * p + t).collect());
        let k = kabsch_align(&s, &tgt);
        assert!((k.rotation - r).abs().max() < 1e-9);
        assert!((k.translation - t).abs().max() < 1e-9);
    }

    #[test]
    fn kabsch_flags_collinear_points() {
        let line = KeypointState::new((0..4).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect());
        assert!(kabsch_align(&line, &line.translated(&Vec3::new(0.0, 0.1, 0.0))).degenerate);
    }

    #[test]
    fn kabsch_beats_random_rigid_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = quad();
        let tgt = KeypointState::new(
            src.points.iter().map(|p| rot_z(0.4) * p + Vec3::new(0.03, -0.02, 0.1) + Vec3::new(rng.gen_range(-0.02..0.02), 0.01, 0.0)).collect(),
        );
        let best = kabsch_align(&src, &tgt).estimate().residual(&src, &tgt);
        for _ in 0..10_000 {
            let other = random_rigid(&mut rng, std::f64::consts::PI, 0.3);
            assert!(best <= other.residual(&src, &tgt) + 1e-15);
        }
    }

    #[test]
    fn dataset_round_trip_and_audit() {
        let ds = collect_dataset(60, &CollectConfig::default(), 3).unwrap();
        assert_eq!(ds.len(), 60);
        let cfg = CollectConfig::default();
        for r in &ds.records {
            let v = cost(&r.s, &r.a, &rigid_prediction(&r.s, &r.a), &crate::sim::RigidScene::contact_free(0.0, cfg.constraints.workspace), &cfg.constraints);
            assert!(v.is_safe());
        }
        let back = TransitionDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back, ds);
        let again = collect_dataset(60, &CollectConfig::default(), 3).unwrap();
        assert_eq!(again.content_hash(), ds.content_hash());
        let bytes = ds.to_bytes();
        assert!(TransitionDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(TransitionDataset::from_bytes(&versioned).is_err());
    }

    #[test]
    fn collection_requires_contact_free_scene() {
        let cfg = CollectConfig { scenario: ScenarioSpec::box_cover(), ..CollectConfig::default() };
        assert!(matches!(collect_dataset(5, &cfg, 0), Err(PriorError::NotContactFree(ScenarioKind::Box))));
    }

    #[test]
    fn small_datasets_are_rejected() {
        let ds = collect_dataset(10, &CollectConfig::default(), 1).unwrap();
        assert!(matches!(train_forward(&ds, &PriorTrainConfig::default()), Err(PriorError::InsufficientData { .. })));
    }

    #[test]
    fn constant_dataset_gives_identity_dynamics() {
        let s = quad();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let records = (0..1000)
            .map(|_| {
                let s = s.translated(&Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0));
                Transition { s: s.clone(), a: BimanualAction::zero(), s_next: s }
            })
            .collect();
        let ds = TransitionDataset { records, keypoint_count: 4, seed: 0, config_hash: String::new() };
        let cfg = PriorTrainConfig { hidden: vec![16], ..PriorTrainConfig::default() };
        let (net, report) = train_forward(&ds, &cfg).unwrap();
        assert!(report.final_val() < 1e-4);
        let models = PriorModels::new(net.clone(), DenseNetwork::new(&[24, 6], 0), DenseNetwork::new(&[24, 6], 0), 4).unwrap();
        let probe = s.translated(&Vec3::new(0.05, -0.02, 0.0));
        assert!(models.predict_next(&probe, &BimanualAction::zero()).mean_distance(&probe) < 1e-2);
    }

    #[test]
    fn models_check_shapes() {
        let bad = PriorModels::new(DenseNetwork::new(&[5, 12], 0), DenseNetwork::new(&[24, 6], 0), DenseNetwork::new(&[24, 6], 0), 4);
        assert!(matches!(bad, Err(PriorError::ModelShape { .. })));
    }

    #[test]
    fn grasped_corners_follow_the_action_exactly() {
        let models = PriorModels::new(DenseNetwork::new(&[18, 8, 12], 3), DenseNetwork::new(&[24, 6], 0), DenseNetwork::new(&[24, 6], 0), 4).unwrap();
        let s = quad();
        let a = BimanualAction::from_slice(&[0.01, -0.02, 0.03, -0.01, 0.0, 0.02]);
        let next = models.predict_next(&s, &a);
        assert_eq!(next.points[0], s.points[0] + a.left);
        assert_eq!(next.points[1], s.points[1] + a.right);
    }

    #[test]
    fn registration_objective_gradient_matches_finite_differences() {
        let src = quad();
        let tgt = RigidEstimate { euler: [0.3, -0.2, 0.1], translation: Vec3::new(0.05, 0.02, -0.01) }.apply(&src);
        let pairs = vec![(src, tgt)];
        let out = DMatrix::from_column_slice(6, 1, &[0.1, 0.05, -0.1, 0.0, 0.01, 0.02]);
        let (_, grad) = registration_objective(&pairs, &[0], &out);
        let h = 1e-6;
        for k in 0..6 {
            let mut up = out.clone();
            up[k] += h;
            let mut down = out.clone();
            down[k] -= h;
            let numeric = (registration_objective(&pairs, &[0], &up).0 - registration_objective(&pairs, &[0], &down).0) / (2.0 * h);
            assert!((numeric - grad[k]).abs() < 1e-6 * numeric.abs().max(1.0), "{k}: {numeric} vs {}", grad[k]);
        }
    }

    proptest! {
        #[test]
        fn kabsch_is_exact_for_noiseless_pairs(yaw in -3.0f64..3.0, pitch in -1.4f64..1.4, roll in -3.0f64..3.0,
                                               tx in -0.3f64..0.3, ty in -0.3f64..0.3, tz in -0.3f64..0.3) {
            let motion = RigidEstimate { euler: [yaw, pitch, roll], translation: Vec3::new(tx, ty, tz) };
            let src = quad();
            let k = kabsch_align(&src, &motion.apply(&src));
            prop_assert!((k.rotation - motion.rotation()).abs().max() < 1e-9);
            prop_assert!((k.translation - motion.translation).abs().max() < 1e-9);
            prop_assert!((k.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
