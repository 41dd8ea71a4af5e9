//! Stochastic ELBO estimation and Adam minimization.
//!
//! The objective is `E_q[log q(x) − log p̃(x)]`, estimated with draws
//! stratified per component: `⌈π_k N⌉` draws from component `k`, each term
//! weighted by `π_k / n_k`. Gradients combine the reparametrized pathwise
//! term, the score of `log q` at the drawn points, and the derivative of the
//! stratum weights `π_k`. The estimate is a smooth function of the
//! parameters for fixed draws, so its gradient agrees with finite
//! differences under common random numbers.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::experts::{ConditionalTarget, LogTarget, PoeTarget};
use crate::varfam::{Component, Family, Mixture, MoeParams};

/// Lower clamp for `log p̃` before differencing.
pub const LOG_TARGET_FLOOR: f64 = -1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam descent step.
pub fn adam_step(params: &[f64], grad: &[f64], state: &AdamState, cfg: &AdamConfig) -> (Vec<f64>, AdamState) {
    let t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut next = AdamState { m: Vec::with_capacity(params.len()), v: Vec::with_capacity(params.len()), t };
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        out.push(params[i] - cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps));
        next.m.push(m);
        next.v.push(v);
    }
    (out, next)
}

/// Weight on `log q` per step; `1` is the plain ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntropySchedule {
    Constant { weight: f64 },
    /// Linear from `start` to `end` over the run.
    Linear { start: f64, end: f64 },
}

impl Default for EntropySchedule {
    fn default() -> Self {
        EntropySchedule::Constant { weight: 1.0 }
    }
}

impl EntropySchedule {
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        match self {
            EntropySchedule::Constant { weight } => *weight,
            EntropySchedule::Linear { start, end } => {
                let f = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 1.0 };
                start + (end - start) * f
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub samples_per_step: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Steps over which uni-Gauss relaxed levels are annealed; `None` is half the run.
    pub anneal_steps: Option<usize>,
    /// Initial tempering of the relaxed uni-Gauss level (`1/s²` for an `s`-fold wider task density).
    pub anneal_initial: f64,
    pub entropy: EntropySchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples_per_step: 64,
            steps: 5000,
            adam: AdamConfig::default(),
            seed: 0,
            anneal_steps: None,
            anneal_initial: 0.25,
            entropy: EntropySchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_step == 0 {
            return Err(invalid("samples_per_step must be at least 1"));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(invalid("adam needs lr > 0, 0 ≤ beta1, beta2 < 1 and eps > 0"));
        }
        if !(self.anneal_initial >= 0.0) {
            return Err(invalid("anneal_initial must be nonnegative"));
        }
        Ok(())
    }

    fn tempering(&self, step: usize) -> f64 {
        let horizon = self.anneal_steps.unwrap_or(self.steps / 2);
        if step >= horizon {
            0.0
        } else {
            self.anneal_initial * (1.0 - step as f64 / horizon as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub elbo: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
}

impl FitTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn elbos(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.elbo).collect()
    }

    /// Median ELBO over the trailing `fraction` of steps.
    pub fn tail_median(&self, fraction: f64) -> f64 {
        let n = ((self.rows.len() as f64 * fraction).ceil() as usize).clamp(1, self.rows.len().max(1));
        median(&self.elbos()[self.rows.len() - n..])
    }

    /// Median ELBO over the leading `fraction` of steps.
    pub fn head_median(&self, fraction: f64) -> f64 {
        let n = ((self.rows.len() as f64 * fraction).ceil() as usize).clamp(1, self.rows.len().max(1));
        median(&self.elbos()[..n])
    }

    pub fn seconds(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.seconds)
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Deterministic RNG for one (step, lane) pair of a run.
pub fn substream(seed: u64, step: u64, lane: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((step << 24) | (lane & 0xFF_FFFF));
    r
}

fn normals(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// Per-component draw count `⌈π_k N⌉`.
pub fn allocation(weights: &[f64], n: usize) -> Vec<usize> {
    weights.iter().map(|p| ((p * n as f64).ceil() as usize).max(1)).collect()
}

/// Standard-normal draws for every component of `q` at one step.
pub fn stratified_draws(q: &Mixture, n: usize, seed: u64, step: u64) -> Vec<Vec<DVector<f64>>> {
    allocation(&q.weights(), n)
        .into_iter()
        .enumerate()
        .map(|(k, nk)| {
            let mut rng = substream(seed, step, k as u64);
            (0..nk).map(|_| normals(&mut rng, q.dim())).collect()
        })
        .collect()
}

/// ELBO estimate with its gradient over the flat parameters of `q`.
#[derive(Debug, Clone)]
pub struct ElboEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Monte Carlo standard error of `value`.
    pub std_err: f64,
}

struct PointEval {
    term: f64,
    grad: Vec<f64>,
}

fn clamp_target(lp: f64, glp: DVector<f64>) -> (f64, DVector<f64>) {
    if lp < LOG_TARGET_FLOOR {
        let n = glp.len();
        (LOG_TARGET_FLOOR, DVector::zeros(n))
    } else {
        (lp, glp)
    }
}

fn nonfinite<T: LogTarget + ?Sized>(target: &T, x: &DVector<f64>, step: u64) -> Error {
    Error::NonFinite { step: step as usize, detail: target.diagnose(x) }
}

/// ELBO and gradient from explicit draws (`draws[k]` are the standard-normal
/// inputs for component `k`), with `entropy_weight` on `log q`.
pub fn elbo_with_draws<T: LogTarget + ?Sized>(
    q: &Mixture,
    target: &T,
    draws: &[Vec<DVector<f64>>],
    entropy_weight: f64,
    step: u64,
) -> Result<ElboEval> {
    if draws.len() != q.k() || draws.iter().any(|d| d.is_empty()) {
        return Err(invalid("every component needs at least one draw"));
    }
    if target.dim() != q.dim() {
        return Err(invalid(format!("target dimension {} differs from q dimension {}", target.dim(), q.dim())));
    }
    let pis = q.weights();
    let jobs: Vec<(usize, &DVector<f64>)> =
        draws.iter().enumerate().flat_map(|(k, d)| d.iter().map(move |e| (k, e))).collect();
    let evals: Vec<Result<PointEval>> = jobs
        .par_iter()
        .map(|(k, eta)| {
            let comp = &q.components()[*k];
            let x = comp.sample(eta);
            let (lp, glp) = target.log_and_grad(&x);
            let bad_value = lp.is_nan() || lp == f64::INFINITY;
            let bad_grad = lp.is_finite() && glp.iter().any(|g| !g.is_finite());
            if bad_value || bad_grad {
                return Err(nonfinite(target, &x, step));
            }
            let (lp, glp) = clamp_target(lp, glp);
            let m = q.logpdf_grads(&x);
            if !m.log_q.is_finite() {
                return Err(Error::NonFinite { step: step as usize, detail: format!("log q is {} at {:?}", m.log_q, x.as_slice()) });
            }
            let term = entropy_weight * m.log_q - lp;
            let mut grad: Vec<f64> = m.score.iter().map(|s| entropy_weight * s).collect();
            let cot = &m.grad_x * entropy_weight - glp;
            let off = q.component_offset(*k);
            for (i, g) in comp.sample_vjp(eta, &cot).into_iter().enumerate() {
                grad[off + i] += g;
            }
            Ok(PointEval { term, grad })
        })
        .collect();

    let mut value = 0.0;
    let mut grad = vec![0.0; q.param_count()];
    let mut means = vec![0.0; q.k()];
    let mut var = 0.0;
    let mut it = evals.into_iter();
    for (k, d) in draws.iter().enumerate() {
        let nk = d.len() as f64;
        let w = pis[k] / nk;
        let mut terms = Vec::with_capacity(d.len());
        for _ in 0..d.len() {
            let e = it.next().expect("one evaluation per draw")?;
            value += w * e.term;
            for (g, v) in grad.iter_mut().zip(&e.grad) {
                *g += w * v;
            }
            terms.push(e.term);
        }
        let mean = terms.iter().sum::<f64>() / nk;
        means[k] = mean;
        if d.len() > 1 {
            let s2 = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (nk - 1.0);
            var += pis[k] * pis[k] * s2 / nk;
        }
    }
    // ∂π_k/∂ω_j = π_k(δ_kj − π_j)
    let lr = q.logits_range();
    let avg: f64 = pis.iter().zip(&means).map(|(p, m)| p * m).sum();
    for j in 0..q.k() {
        grad[lr.start + j] += pis[j] * (means[j] - avg);
    }
    Ok(ElboEval { value, grad, std_err: var.sqrt() })
}

/// ELBO and gradient with stratified draws from the `(seed, step)` substreams.
pub fn elbo_and_gradient<T: LogTarget + ?Sized>(q: &Mixture, target: &T, n: usize, seed: u64, step: u64) -> Result<ElboEval> {
    let draws = stratified_draws(q, n, seed, step);
    elbo_with_draws(q, target, &draws, 1.0, step)
}

/// ELBO estimate `(1/N) Σ [log q(x) − log p̃(x)]` and its standard error.
pub fn elbo_estimate<T: LogTarget + ?Sized, R: RngCore>(q: &Mixture, target: &T, n: usize, rng: &mut R) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(invalid("ELBO estimate needs at least one sample"));
    }
    let e = elbo_and_gradient(q, target, n, rng.next_u64(), 0)?;
    Ok((e.value, e.std_err))
}

/// Initial mixture: means uniform within `limits`, scales a quarter of each
/// range, zero curvature, equal weights.
pub fn init_mixture<R: Rng>(family: Family, k: usize, limits: &[(f64, f64)], rng: &mut R) -> Result<Mixture> {
    let d = limits.len();
    if k == 0 || d == 0 {
        return Err(invalid("initial mixture needs k ≥ 1 and a nonempty configuration space"));
    }
    let scale = nalgebra::DMatrix::from_diagonal(&DVector::from_iterator(d, limits.iter().map(|(lo, hi)| (hi - lo) / 4.0)));
    let comps = (0..k)
        .map(|_| {
            let mean = DVector::from_iterator(d, limits.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)));
            match family {
                Family::Gaussian => Component::gaussian(mean, scale.clone()),
                Family::Banana => Component::banana(mean, scale.clone(), DVector::zeros(d - 1)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Mixture::uniform(comps)
}

/// Fit a mixture to a generic target by Adam on the stochastic ELBO.
pub fn fit<T: LogTarget + ?Sized>(initial: &Mixture, target: &T, cfg: &TrainConfig) -> Result<(Mixture, FitTrace)> {
    fit_with(initial, cfg, |_| None, target)
}

/// Fit a mixture to a product of experts, annealing uni-Gauss relaxed levels.
pub fn fit_poe(initial: &Mixture, target: &PoeTarget, cfg: &TrainConfig) -> Result<(Mixture, FitTrace)> {
    let anneal = target.has_unigauss();
    fit_with(
        initial,
        cfg,
        |step| {
            let beta = cfg.tempering(step);
            (anneal && beta > 0.0).then(|| target.with_unigauss_tempering(beta))
        },
        target,
    )
}

fn fit_with<T, F>(initial: &Mixture, cfg: &TrainConfig, mut stage: F, target: &T) -> Result<(Mixture, FitTrace)>
where
    T: LogTarget + ?Sized,
    F: FnMut(usize) -> Option<PoeTarget>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut q = initial.clone();
    let mut params = q.to_flat();
    let mut state = AdamState::new(params.len());
    let mut trace = FitTrace { rows: Vec::with_capacity(cfg.steps) };
    for step in 0..cfg.steps {
        let w = cfg.entropy.at(step, cfg.steps);
        let draws = stratified_draws(&q, cfg.samples_per_step, cfg.seed, step as u64);
        let eval = match stage(step) {
            Some(t) => elbo_with_draws(&q, &t, &draws, w, step as u64)?,
            None => elbo_with_draws(&q, target, &draws, w, step as u64)?,
        };
        if !eval.value.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, detail: format!("ELBO estimate {} with non-finite gradient", eval.value) });
        }
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let (next, st) = adam_step(&params, &eval.grad, &state, &cfg.adam);
        params = next;
        state = st;
        q.set_flat(&params)?;
        trace.rows.push(TraceRow { step, elbo: eval.value, grad_norm, seconds: start.elapsed().as_secs_f64() });
    }
    Ok((q, trace))
}

/// Distribution of task parameters for conditional fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskDistribution {
    Uniform { low: Vec<f64>, high: Vec<f64> },
    Point { value: Vec<f64> },
}

impl TaskDistribution {
    pub fn dim(&self) -> usize {
        match self {
            TaskDistribution::Uniform { low, .. } => low.len(),
            TaskDistribution::Point { value } => value.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TaskDistribution::Uniform { low, high } = self {
            if low.len() != high.len() || low.iter().zip(high).any(|(l, h)| !(l < h)) {
                return Err(invalid("uniform task distribution needs low < high in every coordinate"));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            TaskDistribution::Uniform { low, high } => {
                DVector::from_iterator(low.len(), low.iter().zip(high).map(|(l, h)| rng.random_range(*l..*h)))
            }
            TaskDistribution::Point { value } => DVector::from_column_slice(value),
        }
    }
}

/// Draws for one conditional step: task parameters and, per task parameter,
/// standard-normal inputs for every component.
pub struct ConditionalDraws {
    pub ys: Vec<DVector<f64>>,
    pub etas: Vec<Vec<Vec<DVector<f64>>>>,
}

/// Task-parameter lane, kept apart from the per-(y, component) lanes.
const TASK_LANE: u64 = 0xFF_FFFF;

pub fn conditional_draws(q: &MoeParams, tasks: &TaskDistribution, n: usize, seed: u64, step: u64) -> Result<ConditionalDraws> {
    let mut yr = substream(seed, step, TASK_LANE);
    let ys: Vec<DVector<f64>> = (0..n).map(|_| tasks.sample(&mut yr)).collect();
    let etas = ys
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let h = q.gate(y)?;
            Ok(allocation(&h, 1)
                .into_iter()
                .enumerate()
                .map(|(k, nk)| {
                    let mut r = substream(seed, step, (i * q.k() + k) as u64);
                    (0..nk).map(|_| normals(&mut r, q.dim())).collect()
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalDraws { ys, etas })
}

/// Nested ELBO `E_y E_{q(x|y)}[log q(x|y) − log p̃(x|y)]` and its gradient over the flat MoE parameters.
pub fn conditional_elbo_with_draws<T: ConditionalTarget + ?Sized>(
    q: &MoeParams,
    target: &T,
    draws: &ConditionalDraws,
    step: u64,
) -> Result<ElboEval> {
    if target.task_dim() != q.task_dim() || target.dim() != q.dim() {
        return Err(invalid("conditional target and mixture of experts disagree on dimensions"));
    }
    let per_y: Vec<Result<(f64, Vec<f64>, f64)>> = draws
        .ys
        .par_iter()
        .zip(draws.etas.par_iter())
        .map(|(y, etas)| {
            let h = q.gate(y)?;
            let mut value = 0.0;
            let mut grad = vec![0.0; q.param_count()];
            let mut means = vec![0.0; q.k()];
            for (k, ek) in etas.iter().enumerate() {
                let w = h[k] / ek.len() as f64;
                for eta in ek {
                    let x = q.sample_component(k, y, eta);
                    let (lp, glp) = target.log_and_grad(&x, y);
                    if lp.is_nan() || lp == f64::INFINITY {
                        return Err(Error::NonFinite { step: step as usize, detail: format!("conditional target is {lp} at x = {:?}, y = {:?}", x.as_slice(), y.as_slice()) });
                    }
                    let (lp, glp) = clamp_target(lp, glp);
                    let m = q.logpdf_grads(y, &x)?;
                    let term = m.log_q - lp;
                    value += w * term;
                    means[k] += term / ek.len() as f64;
                    for (g, s) in grad.iter_mut().zip(&m.score) {
                        *g += w * s;
                    }
                    let cot = &m.grad_x - glp;
                    for (g, s) in grad.iter_mut().zip(q.sample_vjp(k, y, eta, &cot)) {
                        *g += w * s;
                    }
                }
            }
            let avg: f64 = h.iter().zip(&means).map(|(p, m)| p * m).sum();
            let ds: Vec<f64> = h.iter().zip(&means).map(|(p, m)| p * (m - avg)).collect();
            for (g, s) in grad.iter_mut().zip(q.gate_vjp(y, &ds)) {
                *g += s;
            }
            Ok((value, grad, avg))
        })
        .collect();
    let n = draws.ys.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; q.param_count()];
    let mut vals = Vec::with_capacity(draws.ys.len());
    for r in per_y {
        let (v, g, _) = r?;
        value += v / n;
        vals.push(v);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / n;
        }
    }
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0) / n } else { 0.0 };
    Ok(ElboEval { value, grad, std_err: var.sqrt() })
}

/// Initial mixture of experts: zero gates and `W`, offsets uniform within
/// `limits`, scales a quarter of each range.
pub fn init_moe<R: Rng>(k: usize, task_dim: usize, limits: &[(f64, f64)], rng: &mut R) -> Result<MoeParams> {
    let d = limits.len();
    let scale = nalgebra::DMatrix::from_diagonal(&DVector::from_iterator(d, limits.iter().map(|(lo, hi)| (hi - lo) / 4.0)));
    MoeParams::new(
        vec![DVector::zeros(task_dim); k],
        DVector::zeros(k),
        vec![nalgebra::DMatrix::zeros(d, task_dim); k],
        (0..k).map(|_| DVector::from_iterator(d, limits.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)))).collect(),
        vec![scale; k],
    )
}

/// Fit a mixture of experts on the nested ELBO over `tasks`.
pub fn fit_conditional<T: ConditionalTarget + ?Sized>(
    initial: &MoeParams,
    target: &T,
    tasks: &TaskDistribution,
    cfg: &TrainConfig,
) -> Result<(MoeParams, FitTrace)> {
    cfg.validate()?;
    tasks.validate()?;
    if tasks.dim() != initial.task_dim() {
        return Err(invalid("task distribution dimension differs from the mixture of experts"));
    }
    let start = Instant::now();
    let mut q = initial.clone();
    let mut params = q.to_flat();
    let mut state = AdamState::new(params.len());
    let mut trace = FitTrace { rows: Vec::with_capacity(cfg.steps) };
    for step in 0..cfg.steps {
        let draws = conditional_draws(&q, tasks, cfg.samples_per_step, cfg.seed, step as u64)?;
        let eval = conditional_elbo_with_draws(&q, target, &draws, step as u64)?;
        if !eval.value.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, detail: format!("conditional ELBO estimate {}", eval.value) });
        }
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let (next, st) = adam_step(&params, &eval.grad, &state, &cfg.adam);
        params = next;
        state = st;
        q.set_flat(&params)?;
        trace.rows.push(TraceRow { step, elbo: eval.value, grad_norm, seconds: start.elapsed().as_secs_f64() });
    }
    Ok((q, trace))
}
