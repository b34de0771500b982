//! Direct optimization of log-depth, source poses and mask logits with
//! per-group Adam, plus a finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{compute_warp, CameraPose, DepthField};
use crate::imgcore::{bilinear_sample_channel, BilinearCell};
use crate::loss::{total_loss, ExplainabilityMask, GradientSet, LossBreakdown, LossModes, LossWeights, Observations, Variables};
use crate::sift::DESCRIPTOR_LEN;
use crate::synth::SceneSample;
use crate::{Error, Result};

/// Iterations between the two losses compared by the convergence test.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_depth: f64,
    pub lr_pose: f64,
    pub lr_mask: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub weights: LossWeights,
    pub modes: LossModes,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_depth: 1e-2,
            lr_pose: 1e-3,
            lr_mask: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 2000,
            rel_tol: 1e-5,
            weights: LossWeights::default(),
            modes: LossModes::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_depth", self.lr_depth), ("lr_pose", self.lr_pose), ("lr_mask", self.lr_mask)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::Config("rel_tol must be >= 0".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Init {
    /// Ground-truth depth and poses.
    Gt,
    /// Ground truth with Gaussian noise on log-depth and on each twist
    /// component (applied as a left increment).
    Perturbed { sigma_depth: f64, sigma_twist: f64, seed: u64 },
    /// Uniform depth, identity poses.
    Constant { depth: f64 },
}

/// First and second moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    /// Returns the update `-lr * m_hat / (sqrt(v_hat) + eps)` per entry.
    fn update(&mut self, grad: &[f64], lr: f64, config: &OptimConfig, step: u64) -> Vec<f64> {
        let c1 = 1.0 - config.beta1.powi(step as i32);
        let c2 = 1.0 - config.beta2.powi(step as i32);
        grad.iter()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                -lr * (*m / c1) / ((*v / c2).sqrt() + config.epsilon)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub vars: Variables,
    pub step_count: u64,
    depth_moments: Moments,
    pose_moments: Moments,
    mask_moments: Moments,
}

impl OptimState {
    pub fn new(vars: Variables) -> Self {
        let n = vars.depth.log_depth().len();
        let s = vars.poses.len();
        Self {
            vars,
            step_count: 0,
            depth_moments: Moments::zeros(n),
            pose_moments: Moments::zeros(6 * s),
            mask_moments: Moments::zeros(n),
        }
    }

    /// Length of the flattened parameter vector.
    pub fn parameter_count(&self) -> usize {
        2 * self.vars.depth.log_depth().len() + 6 * self.vars.poses.len()
    }
}

pub fn init_state(scene: &SceneSample, init: Init) -> Result<OptimState> {
    if scene.sources.is_empty() {
        return Err(Error::Config("scene has no source views".into()));
    }
    let (w, h) = (scene.gt_depth.width(), scene.gt_depth.height());
    let (depth, poses) = match init {
        Init::Gt => (scene.gt_depth.clone(), scene.gt_poses.clone()),
        Init::Constant { depth } => {
            if !(depth > 0.0 && depth.is_finite()) {
                return Err(Error::Config(format!("constant initial depth must be > 0, got {depth}")));
            }
            (DepthField::constant(w, h, depth)?, vec![CameraPose::identity(); scene.sources.len()])
        }
        Init::Perturbed {
            sigma_depth,
            sigma_twist,
            seed,
        } => {
            let make = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(format!("invalid noise level: {e}")));
            let (nd, nt) = (make(sigma_depth)?, make(sigma_twist)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let log_depth = scene.gt_depth.log_depth().iter().map(|l| l + nd.sample(&mut rng)).collect();
            let poses = scene
                .gt_poses
                .iter()
                .map(|p| {
                    let delta: [f64; 6] = std::array::from_fn(|_| nt.sample(&mut rng));
                    p.left_update(&delta)
                })
                .collect();
            (DepthField::from_log_depth(w, h, log_depth)?, poses)
        }
    };
    Ok(OptimState::new(Variables {
        depth,
        poses,
        mask: ExplainabilityMask::constant(w, h, 0.0),
    }))
}

fn check_finite(br: &LossBreakdown, grads: &GradientSet) -> Result<()> {
    if !br.total.is_finite() {
        return Err(Error::NonFinite {
            component: "total",
            value: br.total,
        });
    }
    let groups: [(&'static str, &[f64]); 2] = [("log-depth gradient", &grads.g_logdepth), ("mask gradient", &grads.g_mask_logits)];
    for (name, g) in groups {
        if let Some(&v) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { component: name, value: v });
        }
    }
    if let Some(&v) = grads.g_twist.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "twist gradient",
            value: v,
        });
    }
    Ok(())
}

/// One Adam update of every group; returns the loss before the update.
pub fn step(state: &mut OptimState, obs: &Observations, config: &OptimConfig) -> Result<LossBreakdown> {
    let (br, grads) = total_loss(obs, &state.vars, &config.weights, &config.modes)?;
    check_finite(&br, &grads)?;
    state.step_count += 1;
    let t = state.step_count;

    let dd = state.depth_moments.update(&grads.g_logdepth, config.lr_depth, config, t);
    for (l, d) in state.vars.depth.log_depth_mut().iter_mut().zip(dd) {
        *l += d;
    }
    let flat_twist: Vec<f64> = grads.g_twist.iter().flatten().copied().collect();
    let dp = state.pose_moments.update(&flat_twist, config.lr_pose, config, t);
    for (pose, delta) in state.vars.poses.iter_mut().zip(dp.chunks_exact(6)) {
        *pose = pose.left_update(&delta.try_into().expect("chunks of 6"));
    }
    let dm = state.mask_moments.update(&grads.g_mask_logits, config.lr_mask, config, t);
    for (z, d) in state.vars.mask.logits.iter_mut().zip(dm) {
        *z += d;
    }
    Ok(br)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunHistory {
    pub history: Vec<LossBreakdown>,
    pub converged: bool,
}

impl RunHistory {
    pub const CSV_HEADER: &'static str = "iter,l_key,l_photo,l_smooth,l_expl,total";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, b) in self.history.iter().enumerate() {
            out += &format!("{i},{},{},{},{},{}\n", b.l_key, b.l_photo, b.l_smooth, b.l_expl, b.total);
        }
        out
    }

    /// `(L_first - L_last) / L_first`; 0 for an empty history or zero start.
    pub fn relative_decrease(&self) -> f64 {
        match (self.history.first(), self.history.last()) {
            (Some(a), Some(b)) if a.total > 0.0 => (a.total - b.total) / a.total,
            _ => 0.0,
        }
    }
}

fn window_converged(history: &[LossBreakdown], rel_tol: f64) -> bool {
    let k = history.len();
    if k <= CONVERGENCE_WINDOW {
        return false;
    }
    let (old, new) = (history[k - 1 - CONVERGENCE_WINDOW].total, history[k - 1].total);
    if old == 0.0 {
        return new == 0.0;
    }
    ((new - old) / old).abs() < rel_tol
}

/// Steps until `max_iters` or until the total changes by less than
/// `rel_tol` (relative) across [`CONVERGENCE_WINDOW`] iterations.
pub fn run(state: &mut OptimState, obs: &Observations, config: &OptimConfig) -> Result<RunHistory> {
    config.validate()?;
    let mut history = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    for _ in 0..config.max_iters {
        history.push(step(state, obs, config)?);
        if window_converged(&history, config.rel_tol) {
            converged = true;
            break;
        }
    }
    Ok(RunHistory { history, converged })
}

/// A scalar function of a flat parameter vector, for gradient checking.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Discrete description of which smooth piece `x` lies on; points with
    /// different signatures are separated by a kink.
    fn signature(&self, _x: &[f64]) -> Result<Vec<i64>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// `|a - b| / max(|a|, |b|)`, or `|a - b|` when both are below 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Times the step is divided by ten when a kink lies within it. Smaller
/// steps lose more to round-off (about `eps * |L| / h`) than they gain.
const STEP_SHRINKS: usize = 2;

/// Central differences of `objective` at `x` for each index in `indices`.
/// When the perturbed points leave the smooth piece of `x`, the step is
/// shrunk tenfold up to [`STEP_SHRINKS`] times before the entry is skipped.
pub fn check_gradient<O: Objective>(
    objective: &O,
    x: &[f64],
    grad: &[f64],
    indices: &[usize],
    step: f64,
) -> Result<GradcheckReport> {
    let base_sig = objective.signature(x)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.to_vec();
    'entries: for &i in indices {
        let mut h = step;
        for _ in 0..=STEP_SHRINKS {
            probe[i] = x[i] + h;
            let plus_sig = objective.signature(&probe)?;
            let plus = objective.value(&probe)?;
            probe[i] = x[i] - h;
            let minus_sig = objective.signature(&probe)?;
            let minus = objective.value(&probe)?;
            probe[i] = x[i];
            if plus_sig == base_sig && minus_sig == base_sig {
                let err = relative_error(grad[i], (plus - minus) / (2.0 * h));
                report.checked += 1;
                if report.worst_index.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_index = Some(i);
                }
                continue 'entries;
            }
            h *= 0.1;
        }
        report.skipped += 1;
    }
    Ok(report)
}

/// The weighted total loss as a function of
/// `[log-depth..., twist increments..., mask logits...]`; twist increments
/// are left-applied to the base poses, so zero reproduces the base state.
pub struct FullObjective<'a> {
    pub obs: &'a Observations,
    pub base: &'a Variables,
    pub weights: LossWeights,
    pub modes: LossModes,
}

impl FullObjective<'_> {
    pub fn point(&self) -> Vec<f64> {
        let mut x = self.base.depth.log_depth().to_vec();
        x.extend(std::iter::repeat_n(0.0, 6 * self.base.poses.len()));
        x.extend(&self.base.mask.logits);
        x
    }

    pub fn variables(&self, x: &[f64]) -> Result<Variables> {
        let n = self.base.depth.log_depth().len();
        let s = self.base.poses.len();
        if x.len() != 2 * n + 6 * s {
            return Err(Error::Config("parameter vector has the wrong length".into()));
        }
        let depth = DepthField::from_log_depth(self.base.depth.width(), self.base.depth.height(), x[..n].to_vec())?;
        let poses = self
            .base
            .poses
            .iter()
            .zip(x[n..n + 6 * s].chunks_exact(6))
            .map(|(p, d)| p.left_update(&d.try_into().expect("chunks of 6")))
            .collect();
        let mut mask = self.base.mask.clone();
        mask.logits.copy_from_slice(&x[n + 6 * s..]);
        Ok(Variables { depth, poses, mask })
    }

    pub fn gradient(&self) -> Result<Vec<f64>> {
        Ok(total_loss(self.obs, self.base, &self.weights, &self.modes)?.1.flatten())
    }
}

#[inline]
fn sign_code(r: f64) -> i64 {
    (r > 0.0) as i64 - (r < 0.0) as i64
}

impl Objective for FullObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(total_loss(self.obs, &self.variables(x)?, &self.weights, &self.modes)?.0.total)
    }

    /// Validity and bilinear cell of every warped pixel, and the sign of
    /// every L1 residual.
    #[allow(clippy::needless_range_loop)]
    fn signature(&self, x: &[f64]) -> Result<Vec<i64>> {
        let vars = self.variables(x)?;
        let obs = self.obs;
        let (w, h) = (obs.width(), obs.height());
        let anchors: Vec<bool> = if self.modes.detector {
            let mut a = vec![false; w * h];
            for p in obs.keypoints.pixel_indices(w, h) {
                a[p] = true;
            }
            a
        } else {
            vec![true; w * h]
        };
        let mut sig = Vec::new();
        for (s, pose) in vars.poses.iter().enumerate() {
            let warp = compute_warp(&vars.depth, &obs.intrinsics, pose, (w, h), obs.z_min);
            for p in 0..w * h {
                let [u, v] = warp.coords[p];
                let cell = warp.valid[p].then(|| BilinearCell::locate(w, h, u, v)).flatten();
                let Some(cell) = cell else {
                    sig.push(-1);
                    continue;
                };
                sig.extend([cell.x0 as i64, cell.y0 as i64]);
                for c in 0..obs.target.channels() {
                    let sample = bilinear_sample_channel(&obs.sources[s], c, u, v);
                    sig.push(sign_code(sample.value - obs.target.get(p / w, p % w, c)));
                }
                if anchors[p] {
                    let t = obs.grid_target.at(p / w, p % w);
                    for (l, tv) in t.iter().enumerate().take(DESCRIPTOR_LEN) {
                        let (sv, _, _) = cell.interpolate(obs.grid_sources[s].data(), w, DESCRIPTOR_LEN, l);
                        sig.push(sign_code(sv - tv));
                    }
                }
            }
        }
        let inv: Vec<f64> = vars.depth.log_depth().iter().map(|l| (-l).exp()).collect();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                if j + 1 < w {
                    sig.push(sign_code(inv[p + 1] - inv[p]));
                }
                if i + 1 < h {
                    sig.push(sign_code(inv[p + w] - inv[p]));
                }
            }
        }
        Ok(sig)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Doubles the largest log-depth gradient entry before comparing.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-5,
            seed: 0,
            corrupt: false,
        }
    }
}

/// Pixels whose warped position lies within 0.1 px of a bilinear cell
/// boundary in any source.
fn near_cell_boundary(obs: &Observations, vars: &Variables) -> Vec<bool> {
    let (w, h) = (obs.width(), obs.height());
    let mut near = vec![false; w * h];
    for pose in &vars.poses {
        let warp = compute_warp(&vars.depth, &obs.intrinsics, pose, (w, h), obs.z_min);
        for (p, [u, v]) in warp.coords.iter().enumerate() {
            if warp.valid[p] && [u, v].iter().any(|c| (*c - c.round()).abs() < 0.1) {
                near[p] = true;
            }
        }
    }
    near
}

/// Checks every twist entry plus randomly chosen log-depth and mask entries
/// (`samples` in total) of the full objective.
pub fn gradcheck(
    state: &OptimState,
    obs: &Observations,
    config: &OptimConfig,
    check: &GradcheckConfig,
) -> Result<GradcheckReport> {
    if check.samples == 0 {
        return Err(Error::Config("gradcheck needs at least one sample".into()));
    }
    if !(check.step > 0.0 && check.step.is_finite()) {
        return Err(Error::Config(format!("gradcheck step must be > 0, got {}", check.step)));
    }
    let objective = FullObjective {
        obs,
        base: &state.vars,
        weights: config.weights,
        modes: config.modes,
    };
    let x = objective.point();
    let mut grad = objective.gradient()?;
    let n = obs.pixel_count();
    let twist_entries = 6 * state.vars.poses.len();

    let near = near_cell_boundary(obs, &state.vars);
    let interior: Vec<usize> = (0..n).filter(|&p| !near[p]).collect();
    let candidates: Vec<usize> = interior.iter().flat_map(|&p| [p, n + twist_entries + p]).collect();
    let mut indices = Vec::new();
    let extra = check.samples.saturating_sub(twist_entries).min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), extra).into_iter().map(|k| candidates[k]).collect();
    if check.corrupt {
        // a local log-depth entry, so the fault cannot hide behind a kink skip
        if let Some(&p) = interior.iter().max_by(|&&a, &&b| grad[a].abs().total_cmp(&grad[b].abs())) {
            grad[p] *= 2.0;
            picked.retain(|&i| i != p);
            indices.push(p);
        }
    }
    picked.sort_unstable();
    indices.extend(n..n + twist_entries);
    indices.extend(picked);
    indices.truncate(check.samples.max(1));
    check_gradient(&objective, &x, &grad, &indices, check.step)
}
