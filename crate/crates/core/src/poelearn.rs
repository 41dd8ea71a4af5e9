//! Learning expert parameters from demonstrations, with a fitted mixture as
//! the negative-phase proposal.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elbo::{adam_step, fit_poe, median, substream, AdamConfig, AdamState, TrainConfig};
use crate::error::{invalid, Result};
use crate::experts::{EvalContext, LogTarget, PoeTarget};
use crate::geomkin::ConfigVector;
use crate::special::log_sum_exp;
use crate::varfam::{Component, Family, Mixture};

/// Demonstration configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<ConfigVector>,
}

impl Dataset {
    pub fn new(rows: Vec<ConfigVector>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(invalid("dataset needs at least one row"));
        };
        let d = first.len();
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(invalid(format!("dataset row {i} has dimension {}, expected {d}", rows[i].len())));
        }
        if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(invalid("dataset contains non-finite values"));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ConfigVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub outer_iterations: usize,
    /// Configuration of the first fit of q.
    pub inner: TrainConfig,
    /// Optimizer steps of each warm-started refit; `None` reuses `inner.steps`.
    pub refit_steps: Option<usize>,
    pub negative_samples: usize,
    /// Parameter updates per outer iteration, each with fresh negative samples.
    pub theta_steps: usize,
    pub theta_adam: AdamConfig,
    pub importance_weighting: bool,
    /// Per-expert learnable flags over [`crate::experts::ExpertDensity::params`];
    /// `None` makes every parameter learnable.
    pub mask: Option<Vec<Vec<bool>>>,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 20,
            inner: TrainConfig { steps: 1000, ..TrainConfig::default() },
            refit_steps: None,
            negative_samples: 2000,
            theta_steps: 10,
            theta_adam: AdamConfig { lr: 0.02, ..AdamConfig::default() },
            importance_weighting: true,
            mask: None,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self, target: &PoeTarget) -> Result<()> {
        if self.outer_iterations == 0 || self.negative_samples == 0 || self.theta_steps == 0 {
            return Err(invalid("outer_iterations, negative_samples and theta_steps must be at least 1"));
        }
        if self.refit_steps == Some(0) {
            return Err(invalid("refit_steps must be at least 1"));
        }
        self.inner.validate()?;
        self.flat_mask(target).map(|_| ())
    }

    /// Mask flattened to the layout of [`expert_params`].
    pub fn flat_mask(&self, target: &PoeTarget) -> Result<Vec<bool>> {
        let Some(mask) = &self.mask else {
            return Ok(vec![true; expert_params(target).len()]);
        };
        if mask.len() != target.experts().len() {
            return Err(invalid(format!("mask has {} entries for {} experts", mask.len(), target.experts().len())));
        }
        let mut flat = Vec::new();
        for (m, e) in mask.iter().zip(target.experts()) {
            if m.len() != e.density.param_count() {
                return Err(invalid(format!(
                    "mask for expert '{}' has {} flags, expected {}",
                    e.name,
                    m.len(),
                    e.density.param_count()
                )));
            }
            flat.extend(m);
        }
        Ok(flat)
    }
}

/// Mixture with means at `k` mutually distant data rows (greedy farthest-point
/// traversal from the first row) and isotropic scale `scale`.
pub fn init_from_data(family: Family, k: usize, data: &Dataset, scale: f64) -> Result<Mixture> {
    if k == 0 || !(scale > 0.0) {
        return Err(invalid("data initialization needs k ≥ 1 and a positive scale"));
    }
    let rows = data.rows();
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = rows.iter().map(|r| (r - &rows[0]).norm()).collect();
    while chosen.len() < k.min(rows.len()) {
        let next = (0..rows.len()).max_by(|a, b| dist[*a].total_cmp(&dist[*b])).unwrap_or(0);
        chosen.push(next);
        for (d, r) in dist.iter_mut().zip(rows) {
            *d = d.min((r - &rows[next]).norm());
        }
    }
    let d = data.dim();
    let l = DMatrix::identity(d, d) * scale;
    let comps = (0..k)
        .map(|i| {
            let mean = rows[chosen[i % chosen.len()]].clone();
            match family {
                Family::Gaussian => Component::gaussian(mean, l.clone()),
                Family::Banana => Component::banana(mean, l.clone(), DVector::zeros(d.saturating_sub(1))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Mixture::uniform(comps)
}

/// Concatenated parameters of every expert density.
pub fn expert_params(target: &PoeTarget) -> Vec<f64> {
    target.experts().iter().flat_map(|e| e.density.params()).collect()
}

pub fn set_expert_params(target: &mut PoeTarget, p: &[f64]) -> Result<()> {
    let total: usize = target.experts().iter().map(|e| e.density.param_count()).sum();
    if p.len() != total {
        return Err(invalid(format!("expected {total} expert parameters, got {}", p.len())));
    }
    let mut off = 0;
    for e in target.experts_mut() {
        let n = e.density.param_count();
        e.density.set_params(&p[off..off + n])?;
        off += n;
    }
    Ok(())
}

/// `∂ log p̃(x) / ∂θ` over the layout of [`expert_params`].
pub fn param_score(target: &PoeTarget, x: &ConfigVector) -> Result<Vec<f64>> {
    let mut ctx = EvalContext::new(target.chain(), x);
    let mut s = Vec::new();
    for e in target.experts() {
        let (v, _) = e.transformation.evaluate(&mut ctx)?;
        s.extend(e.density.param_score(&v)?);
    }
    Ok(s)
}

/// Self-normalized weights `w_s ∝ exp(log_p_s − log_q_s)`.
pub fn importance_weights(log_p: &[f64], log_q: &[f64]) -> Vec<f64> {
    let lw: Vec<f64> = log_p.iter().zip(log_q).map(|(p, q)| p - q).collect();
    let z = log_sum_exp(&lw);
    let w: Vec<f64> = lw.iter().map(|l| (l - z).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoeGradient {
    /// Ascent direction of the mean data log-likelihood; masked entries are zero.
    pub grad: Vec<f64>,
    pub std_err: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Effective sample size of the negative-phase weights.
    pub ess: f64,
    /// `log Ĉ = log mean p̃/q` over the negative samples.
    pub log_c: f64,
    pub warning: Option<String>,
}

fn mean_and_var(rows: &[Vec<f64>], weights: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n];
    for (r, w) in rows.iter().zip(weights) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += w * v;
        }
    }
    let mut var = vec![0.0; n];
    for (r, w) in rows.iter().zip(weights) {
        for i in 0..n {
            var[i] += w * w * (r[i] - mean[i]).powi(2);
        }
    }
    (mean, var)
}

/// Likelihood gradient: data average of the expert score minus its
/// expectation under the normalized product, estimated with draws from `q`.
pub fn poe_param_gradient(
    target: &PoeTarget,
    data: &Dataset,
    q: &Mixture,
    negatives: &[ConfigVector],
    importance_weighting: bool,
    mask: &[bool],
) -> Result<PoeGradient> {
    let n = mask.len();
    if n != expert_params(target).len() {
        return Err(invalid(format!("mask has {} flags for {} expert parameters", n, expert_params(target).len())));
    }
    if negatives.is_empty() {
        return Err(invalid("at least one negative sample is needed"));
    }
    if data.dim() != target.dim() {
        return Err(invalid(format!("dataset dimension {} does not match target dimension {}", data.dim(), target.dim())));
    }
    let pos: Vec<Vec<f64>> = data.rows().par_iter().map(|x| param_score(target, x)).collect::<Result<_>>()?;
    let neg: Vec<(Vec<f64>, f64, f64)> = negatives
        .par_iter()
        .map(|x| Ok((param_score(target, x)?, target.log_unnorm(x)?, q.logpdf(x))))
        .collect::<Result<_>>()?;

    let nd = pos.len() as f64;
    let (positive, pvar) = mean_and_var(&pos, &vec![1.0 / nd; pos.len()], n);
    let log_p: Vec<f64> = neg.iter().map(|t| t.1).collect();
    let log_q: Vec<f64> = neg.iter().map(|t| t.2).collect();
    let is_w = importance_weights(&log_p, &log_q);
    let s = negatives.len() as f64;
    let ess = 1.0 / is_w.iter().map(|w| w * w).sum::<f64>();
    let log_c = log_sum_exp(&log_p.iter().zip(&log_q).map(|(p, q)| p - q).collect::<Vec<_>>()) - s.ln();
    let weights = if importance_weighting { is_w } else { vec![1.0 / s; negatives.len()] };
    let scores: Vec<Vec<f64>> = neg.into_iter().map(|t| t.0).collect();
    let (negative, nvar) = mean_and_var(&scores, &weights, n);

    let grad = (0..n).map(|i| if mask[i] { positive[i] - negative[i] } else { 0.0 }).collect();
    let std_err = (0..n).map(|i| (pvar[i] + nvar[i]).sqrt()).collect();
    let warning = (importance_weighting && ess < 0.05 * s)
        .then(|| format!("degenerate proposal: effective sample size {ess:.1} of {} negative samples", negatives.len()));
    Ok(PoeGradient { grad, std_err, positive, negative, ess, log_c, warning })
}

#[derive(Debug, Clone)]
pub struct LearnResult {
    pub target: PoeTarget,
    pub q: Mixture,
    /// Estimated mean data log-likelihood after each outer iteration.
    pub log_likelihood: Vec<f64>,
    pub log_c: Vec<f64>,
    pub warnings: Vec<String>,
}

impl LearnResult {
    /// Median of the last three likelihood estimates minus that of the first three.
    pub fn likelihood_gain(&self) -> f64 {
        let ll = &self.log_likelihood;
        let k = ll.len().min(3);
        median(&ll[ll.len() - k..]) - median(&ll[..k])
    }
}

fn mean_log_unnorm(target: &PoeTarget, data: &Dataset) -> Result<f64> {
    let v: Vec<f64> = data.rows().par_iter().map(|x| target.log_unnorm(x)).collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

const LL_LANE: u64 = 0xFFFFFE;

/// Alternate fitting `q` to the current product with Adam ascent on the
/// expert parameters.
pub fn learn_poe(initial: &PoeTarget, data: &Dataset, q0: &Mixture, cfg: &LearnConfig) -> Result<LearnResult> {
    cfg.validate(initial)?;
    if data.dim() != initial.dim() || q0.dim() != initial.dim() {
        return Err(invalid("dataset, mixture and target dimensions differ"));
    }
    let mask = cfg.flat_mask(initial)?;
    let mut target = initial.clone();
    let mut theta = expert_params(&target);
    let mut state = AdamState::new(theta.len());
    let mut q = q0.clone();
    let mut result = LearnResult { target: target.clone(), q: q.clone(), log_likelihood: Vec::new(), log_c: Vec::new(), warnings: Vec::new() };
    let mut theta_step = 0u64;
    for it in 0..cfg.outer_iterations {
        let steps = if it == 0 { cfg.inner.steps } else { cfg.refit_steps.unwrap_or(cfg.inner.steps) };
        let train = TrainConfig { steps, seed: cfg.inner.seed.wrapping_add(it as u64), ..cfg.inner.clone() };
        q = fit_poe(&q, &target, &train)?.0;
        for _ in 0..cfg.theta_steps {
            let mut rng = substream(cfg.seed, theta_step, 0);
            theta_step += 1;
            let negatives = q.sample_n(cfg.negative_samples, &mut rng);
            let g = poe_param_gradient(&target, data, &q, &negatives, cfg.importance_weighting, &mask)?;
            if let Some(w) = g.warning {
                result.warnings.push(format!("iteration {it}: {w}"));
            }
            let descent: Vec<f64> = g.grad.iter().map(|v| -v).collect();
            let (next, st) = adam_step(&theta, &descent, &state, &cfg.theta_adam);
            // masked entries stay bit-identical
            theta = next.iter().zip(&theta).zip(&mask).map(|((n, o), m)| if *m { *n } else { *o }).collect();
            state = st;
            set_expert_params(&mut target, &theta)?;
        }
        let mut rng = substream(cfg.seed, it as u64, LL_LANE);
        let fresh = q.sample_n(cfg.negative_samples, &mut rng);
        let lw: Vec<f64> = fresh.par_iter().map(|x| Ok(target.log_unnorm(x)? - q.logpdf(x))).collect::<Result<_>>()?;
        let log_c = log_sum_exp(&lw) - (lw.len() as f64).ln();
        result.log_likelihood.push(mean_log_unnorm(&target, data)? - log_c);
        result.log_c.push(log_c);
    }
    result.target = target;
    result.q = q;
    Ok(result)
}
