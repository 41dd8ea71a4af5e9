//! Expert densities and their product.
//!
//! An expert pairs a [`Transformation`] of the configuration with an
//! unnormalized [`ExpertDensity`] on the transformed value. The product of
//! all experts is the unnormalized target `p̃(x)`; its negative log is the
//! cost `c(x)`. Normalization constants are dropped everywhere since only
//! the product is ever normalized.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::geomkin::{ConfigVector, Frames, JacobianKind, KinematicChain};
use crate::linalg::{nullspace_projector, pack_log_tril, solve_lower, solve_lower_transpose, tril_indices, unpack_log_tril};
use crate::special::{d_log_ndtr, log_add_exp, log_ndtr};

/// Central-difference step for Jacobians of the IK projection.
const IK_FD_STEP: f64 = 1e-6;

/// Map from configuration space to an expert's task space.
#[derive(Debug, Clone, PartialEq)]
pub enum Transformation {
    FkPosition { frame: usize },
    /// Link rotation matrix, flattened row-major.
    FkOrientation { frame: usize },
    /// Planar link angle.
    FkAngle { frame: usize },
    Com,
    JointSubset { indices: Vec<usize> },
    /// Distances between link tips and fixed world points.
    RelativeDistances { pairs: Vec<(usize, DVector<f64>)> },
    /// Tip position of `frame` after `steps` IK projections towards `target`.
    IkProjected { target: DVector<f64>, steps: usize, frame: usize },
    /// `matrix · inner(x) + offset`.
    Affine {
        inner: Box<Transformation>,
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
    },
}

/// Per-configuration cache so that experts sharing the chain reuse one FK pass.
pub struct EvalContext<'a> {
    chain: Option<&'a KinematicChain>,
    x: &'a ConfigVector,
    frames: Option<Frames>,
}

impl<'a> EvalContext<'a> {
    pub fn new(chain: Option<&'a KinematicChain>, x: &'a ConfigVector) -> Self {
        Self { chain, x, frames: None }
    }

    fn chain(&self) -> Result<&'a KinematicChain> {
        self.chain.ok_or_else(|| invalid("transformation needs a kinematic chain"))
    }

    fn frames(&mut self) -> Result<&Frames> {
        if self.frames.is_none() {
            self.frames = Some(self.chain()?.frames(self.x)?);
        }
        Ok(self.frames.as_ref().unwrap())
    }
}

fn to_task(v: &nalgebra::Vector3<f64>, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, v.iter().take(d).cloned())
}

impl Transformation {
    /// Output dimension for a configuration space of size `dim`.
    pub fn output_dim(&self, chain: Option<&KinematicChain>, dim: usize) -> Result<usize> {
        let need_chain = || chain.ok_or_else(|| invalid("transformation needs a kinematic chain"));
        let check_frame = |frame: usize| -> Result<()> {
            let c = need_chain()?;
            if frame >= c.joint_count() {
                return Err(invalid(format!(
                    "frame index {frame} out of range for a chain with {} joints",
                    c.joint_count()
                )));
            }
            Ok(())
        };
        Ok(match self {
            Transformation::FkPosition { frame } => {
                check_frame(*frame)?;
                need_chain()?.task_dim()
            }
            Transformation::FkOrientation { frame } => {
                check_frame(*frame)?;
                let d = need_chain()?.task_dim();
                d * d
            }
            Transformation::FkAngle { frame } => {
                check_frame(*frame)?;
                if !need_chain()?.is_planar() {
                    return Err(invalid("FkAngle needs a planar chain"));
                }
                1
            }
            Transformation::Com => {
                let c = need_chain()?;
                if !(c.total_mass() > 0.0) {
                    return Err(invalid("Com transformation needs a positive total mass"));
                }
                c.task_dim()
            }
            Transformation::JointSubset { indices } => {
                if let Some(i) = indices.iter().find(|i| **i >= dim) {
                    return Err(invalid(format!("joint index {i} out of range for dimension {dim}")));
                }
                if indices.is_empty() {
                    return Err(invalid("JointSubset needs at least one index"));
                }
                indices.len()
            }
            Transformation::RelativeDistances { pairs } => {
                let d = need_chain()?.task_dim();
                for (frame, point) in pairs {
                    check_frame(*frame)?;
                    if point.len() != d {
                        return Err(invalid(format!("world point must have dimension {d}")));
                    }
                }
                pairs.len()
            }
            Transformation::IkProjected { target, frame, .. } => {
                check_frame(*frame)?;
                let d = need_chain()?.task_dim();
                if target.len() != d {
                    return Err(invalid(format!("IK target must have dimension {d}")));
                }
                d
            }
            Transformation::Affine { inner, matrix, offset } => {
                let n = inner.output_dim(chain, dim)?;
                if matrix.ncols() != n || matrix.nrows() != offset.len() {
                    return Err(invalid(format!(
                        "affine map {}x{} (offset {}) does not fit an input of dimension {n}",
                        matrix.nrows(),
                        matrix.ncols(),
                        offset.len()
                    )));
                }
                offset.len()
            }
        })
    }

    /// Value and Jacobian at the configuration held by `ctx`.
    pub fn evaluate(&self, ctx: &mut EvalContext<'_>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = ctx.x.len();
        match self {
            Transformation::FkPosition { frame } => {
                let chain = ctx.chain()?;
                let f = ctx.frames()?;
                let v = to_task(&f.tip[*frame], chain.task_dim());
                Ok((v, chain.jacobian_from_frames(f, *frame, JacobianKind::Position)))
            }
            Transformation::FkOrientation { frame } => {
                let chain = ctx.chain()?;
                let d = chain.task_dim();
                let f = ctx.frames()?;
                let rot = f.rot[*frame];
                let v = DVector::from_iterator(d * d, (0..d).flat_map(|i| (0..d).map(move |j| rot[(i, j)])));
                // dR/dq_j = [ω_j]× R for every joint moving the link
                let mut jac = DMatrix::zeros(d * d, n);
                for j in 0..n {
                    if !chain.moves(j, *frame) {
                        continue;
                    }
                    let dr = f.axis[j].cross_matrix() * rot;
                    for r in 0..d {
                        for c in 0..d {
                            jac[(r * d + c, j)] = dr[(r, c)];
                        }
                    }
                }
                Ok((v, jac))
            }
            Transformation::FkAngle { frame } => {
                let chain = ctx.chain()?;
                let a = chain.fk_angle(ctx.x, *frame)?;
                let f = ctx.frames()?;
                Ok((DVector::from_element(1, a), chain.jacobian_from_frames(f, *frame, JacobianKind::Orientation)))
            }
            Transformation::Com => {
                let chain = ctx.chain()?;
                let d = chain.task_dim();
                let m = chain.total_mass();
                let f = ctx.frames()?;
                let c = f
                    .tip
                    .iter()
                    .zip(chain.link_masses())
                    .fold(nalgebra::Vector3::zeros(), |acc, (p, w)| acc + p * *w)
                    / m;
                Ok((to_task(&c, d), chain.com_jacobian_from_frames(f)))
            }
            Transformation::JointSubset { indices } => {
                let v = DVector::from_iterator(indices.len(), indices.iter().map(|i| ctx.x[*i]));
                let mut jac = DMatrix::zeros(indices.len(), n);
                for (r, i) in indices.iter().enumerate() {
                    jac[(r, *i)] = 1.0;
                }
                Ok((v, jac))
            }
            Transformation::RelativeDistances { pairs } => {
                let chain = ctx.chain()?;
                let d = chain.task_dim();
                let f = ctx.frames()?;
                let mut v = DVector::zeros(pairs.len());
                let mut jac = DMatrix::zeros(pairs.len(), n);
                for (r, (frame, point)) in pairs.iter().enumerate() {
                    let diff = to_task(&f.tip[*frame], d) - point;
                    let dist = diff.norm();
                    v[r] = dist;
                    if dist > 0.0 {
                        let jp = chain.jacobian_from_frames(f, *frame, JacobianKind::Position);
                        let row = (diff.transpose() / dist) * jp;
                        jac.row_mut(r).copy_from(&row);
                    }
                }
                Ok((v, jac))
            }
            Transformation::IkProjected { target, steps, frame } => {
                let chain = ctx.chain()?;
                let eval = |q: &ConfigVector| -> Result<DVector<f64>> {
                    let p = chain.ik_project(q, target, *steps, *frame)?;
                    chain.fk_position(&p, *frame)
                };
                let v = eval(ctx.x)?;
                let mut jac = DMatrix::zeros(v.len(), n);
                for j in 0..n {
                    let mut xp = ctx.x.clone();
                    let mut xm = ctx.x.clone();
                    xp[j] += IK_FD_STEP;
                    xm[j] -= IK_FD_STEP;
                    let col = (eval(&xp)? - eval(&xm)?) / (2.0 * IK_FD_STEP);
                    jac.set_column(j, &col);
                }
                Ok((v, jac))
            }
            Transformation::Affine { inner, matrix, offset } => {
                let (v, jac) = inner.evaluate(ctx)?;
                Ok((matrix * v + offset, matrix * jac))
            }
        }
    }
}

/// Unnormalized expert density over a task-space value.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertDensity {
    /// `−½ (v−μ)ᵀ Σ⁻¹ (v−μ)` with `Σ = LLᵀ`.
    Mvn { mean: DVector<f64>, scale_tril: DMatrix<f64> },
    /// `tr(CᵀR + B RᵀAR)` on a flattened rotation matrix.
    Bmf { a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64> },
    /// `log Φ((bound − t)/σ)`: soft `t ≤ bound` with margin σ.
    CdfLessEqual { bound: f64, sigma: f64 },
    /// `log(π·exp(inner) + (1−π)·exp(relaxed))`, where the relaxed level is
    /// `log_c + tempering·inner`. `tempering = 0` is the flat uniform level.
    UniGauss {
        inner: Box<ExpertDensity>,
        weight: f64,
        log_c: f64,
        tempering: f64,
    },
}

pub fn mvn_log(mean: &DVector<f64>, scale_tril: &DMatrix<f64>, v: &DVector<f64>) -> Result<f64> {
    if v.len() != mean.len() {
        return Err(invalid(format!("MVN expects dimension {}, got {}", mean.len(), v.len())));
    }
    let w = solve_lower(scale_tril, &(v - mean));
    Ok(-0.5 * w.norm_squared())
}

fn bmf_shape(a: &DMatrix<f64>, v_len: usize) -> Result<usize> {
    let d = a.nrows();
    if d * d != v_len {
        return Err(invalid(format!("BMF with {d}x{d} parameters expects a {d}x{d} rotation")));
    }
    Ok(d)
}

pub fn bmf_log(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, rot: &DMatrix<f64>) -> Result<f64> {
    let d = a.nrows();
    for m in [a, b, c, rot] {
        if m.nrows() != d || m.ncols() != d {
            return Err(invalid("BMF parameters and operand must share one square shape"));
        }
    }
    Ok((c.transpose() * rot + b * rot.transpose() * a * rot).trace())
}

pub fn cdf_log(bound: f64, sigma: f64, t: f64) -> f64 {
    log_ndtr((bound - t) / sigma)
}

pub fn unigauss_log(weight: f64, inner_log: f64, relaxed_log: f64) -> f64 {
    let on = if weight > 0.0 { weight.ln() + inner_log } else { f64::NEG_INFINITY };
    let off = if weight < 1.0 { (1.0 - weight).ln() + relaxed_log } else { f64::NEG_INFINITY };
    log_add_exp(on, off)
}

impl ExpertDensity {
    pub fn mvn(mean: DVector<f64>, scale_tril: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if scale_tril.nrows() != d || scale_tril.ncols() != d {
            return Err(invalid("MVN scale factor must be square with the mean's dimension"));
        }
        if (0..d).any(|i| !(scale_tril[(i, i)] > 0.0)) {
            return Err(invalid("MVN scale factor needs a strictly positive diagonal"));
        }
        let l = DMatrix::from_fn(d, d, |i, j| if j <= i { scale_tril[(i, j)] } else { 0.0 });
        Ok(ExpertDensity::Mvn { mean, scale_tril: l })
    }

    /// Isotropic MVN with standard deviation `sigma`.
    pub fn isotropic(mean: DVector<f64>, sigma: f64) -> Result<Self> {
        let d = mean.len();
        Self::mvn(mean, DMatrix::identity(d, d) * sigma)
    }

    pub fn cdf(bound: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid("CDF margin sigma must be positive"));
        }
        Ok(ExpertDensity::CdfLessEqual { bound, sigma })
    }

    pub fn unigauss(inner: ExpertDensity, weight: f64, log_c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(invalid("uni-Gauss weight must lie in [0, 1]"));
        }
        if matches!(inner, ExpertDensity::UniGauss { .. }) {
            return Err(invalid("uni-Gauss experts cannot be nested"));
        }
        Ok(ExpertDensity::UniGauss { inner: Box::new(inner), weight, log_c, tempering: 0.0 })
    }

    /// Required input dimension, when fixed by the parameters.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            ExpertDensity::Mvn { mean, .. } => Some(mean.len()),
            ExpertDensity::Bmf { a, .. } => Some(a.nrows() * a.nrows()),
            ExpertDensity::CdfLessEqual { .. } => Some(1),
            ExpertDensity::UniGauss { inner, .. } => inner.input_dim(),
        }
    }

    /// Log-density and its gradient with respect to the task value.
    pub fn log_and_grad(&self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        match self {
            ExpertDensity::Mvn { mean, scale_tril } => {
                if v.len() != mean.len() {
                    return Err(invalid(format!("MVN expects dimension {}, got {}", mean.len(), v.len())));
                }
                let w = solve_lower(scale_tril, &(v - mean));
                let g = -solve_lower_transpose(scale_tril, &w);
                Ok((-0.5 * w.norm_squared(), g))
            }
            ExpertDensity::Bmf { a, b, c } => {
                let d = bmf_shape(a, v.len())?;
                let rot = DMatrix::from_row_slice(d, d, v.as_slice());
                let val = bmf_log(a, b, c, &rot)?;
                let g = c + a * &rot * b + a.transpose() * &rot * b.transpose();
                Ok((val, DVector::from_iterator(d * d, (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]))))
            }
            ExpertDensity::CdfLessEqual { bound, sigma } => {
                if v.len() != 1 {
                    return Err(invalid(format!("CDF expert expects a scalar, got dimension {}", v.len())));
                }
                let z = (bound - v[0]) / sigma;
                Ok((log_ndtr(z), DVector::from_element(1, -d_log_ndtr(z) / sigma)))
            }
            ExpertDensity::UniGauss { inner, weight, log_c, tempering } => {
                let (il, ig) = inner.log_and_grad(v)?;
                let relaxed = log_c + tempering * il;
                let val = unigauss_log(*weight, il, relaxed);
                // responsibilities of the task and relaxed branches
                let r_on = if *weight > 0.0 { (weight.ln() + il - val).exp() } else { 0.0 };
                let r_off = 1.0 - r_on;
                Ok((val, ig * (r_on + r_off * tempering)))
            }
        }
    }

    pub fn log_density(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(self.log_and_grad(v)?.0)
    }

    /// Flattened learnable parameters (scale factors with log-diagonal).
    pub fn params(&self) -> Vec<f64> {
        match self {
            ExpertDensity::Mvn { mean, scale_tril } => {
                let mut p: Vec<f64> = mean.iter().cloned().collect();
                p.extend(pack_log_tril(scale_tril));
                p
            }
            ExpertDensity::Bmf { a, b, c } => {
                let mut p = Vec::new();
                for m in [a, b, c] {
                    p.extend(m.transpose().iter().cloned());
                }
                p
            }
            ExpertDensity::CdfLessEqual { bound, sigma } => vec![*bound, sigma.ln()],
            ExpertDensity::UniGauss { inner, .. } => inner.params(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(invalid(format!("expected {} expert parameters, got {}", self.param_count(), p.len())));
        }
        match self {
            ExpertDensity::Mvn { mean, scale_tril } => {
                let d = mean.len();
                mean.copy_from_slice(&p[..d]);
                *scale_tril = unpack_log_tril(d, &p[d..]);
            }
            ExpertDensity::Bmf { a, b, c } => {
                let d = a.nrows();
                for (k, m) in [a, b, c].into_iter().enumerate() {
                    *m = DMatrix::from_row_slice(d, d, &p[k * d * d..(k + 1) * d * d]);
                }
            }
            ExpertDensity::CdfLessEqual { bound, sigma } => {
                *bound = p[0];
                *sigma = p[1].exp();
            }
            ExpertDensity::UniGauss { inner, .. } => inner.set_params(p)?,
        }
        Ok(())
    }

    /// Gradient of the log-density with respect to [`Self::params`] at task value `v`.
    pub fn param_score(&self, v: &DVector<f64>) -> Result<Vec<f64>> {
        match self {
            ExpertDensity::Mvn { mean, scale_tril } => {
                if v.len() != mean.len() {
                    return Err(invalid("MVN score: dimension mismatch"));
                }
                let w = solve_lower(scale_tril, &(v - mean));
                let gm = solve_lower_transpose(scale_tril, &w);
                // ∂(−½‖L⁻¹e‖²)/∂L = L⁻ᵀ w wᵀ
                let gl = &gm * w.transpose();
                let mut s: Vec<f64> = gm.iter().cloned().collect();
                for (i, j) in tril_indices(mean.len()) {
                    s.push(if i == j { gl[(i, j)] * scale_tril[(i, i)] } else { gl[(i, j)] });
                }
                Ok(s)
            }
            ExpertDensity::Bmf { a, b, .. } => {
                let d = bmf_shape(a, v.len())?;
                let r = DMatrix::from_row_slice(d, d, v.as_slice());
                let ga = &r * b.transpose() * r.transpose();
                let gb = r.transpose() * a.transpose() * &r;
                let mut s = Vec::new();
                for m in [&ga, &gb, &r] {
                    s.extend(m.transpose().iter().cloned());
                }
                Ok(s)
            }
            ExpertDensity::CdfLessEqual { bound, sigma } => {
                if v.len() != 1 {
                    return Err(invalid("CDF score: scalar input expected"));
                }
                let z = (bound - v[0]) / sigma;
                let r = d_log_ndtr(z);
                Ok(vec![r / sigma, -r * z])
            }
            ExpertDensity::UniGauss { inner, weight, log_c, tempering } => {
                let il = inner.log_density(v)?;
                let val = unigauss_log(*weight, il, log_c + tempering * il);
                let r_on = if *weight > 0.0 { (weight.ln() + il - val).exp() } else { 0.0 };
                let factor = r_on + (1.0 - r_on) * tempering;
                Ok(inner.param_score(v)?.into_iter().map(|s| s * factor).collect())
            }
        }
    }
}

/// One factor of the product.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub name: String,
    pub transformation: Transformation,
    pub density: ExpertDensity,
}

impl Expert {
    pub fn new(name: impl Into<String>, transformation: Transformation, density: ExpertDensity) -> Self {
        Self { name: name.into(), transformation, density }
    }
}

/// Two soft joint-limit experts per joint (`x ≤ upper` and `−x ≤ −lower`).
pub fn joint_limit_experts(chain: &KinematicChain, sigma: f64) -> Result<Vec<Expert>> {
    let mut out = Vec::new();
    for (j, (lo, hi)) in chain.joint_limits().iter().enumerate() {
        out.push(Expert::new(
            format!("joint{j}_upper"),
            Transformation::JointSubset { indices: vec![j] },
            ExpertDensity::cdf(*hi, sigma)?,
        ));
        out.push(Expert::new(
            format!("joint{j}_lower"),
            Transformation::Affine {
                inner: Box::new(Transformation::JointSubset { indices: vec![j] }),
                matrix: DMatrix::from_element(1, 1, -1.0),
                offset: DVector::zeros(1),
            },
            ExpertDensity::cdf(-lo, sigma)?,
        ));
    }
    Ok(out)
}

/// Unnormalized log-density over configurations, with its gradient.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    /// Log-density and gradient. Invalid evaluations surface as NaN.
    fn log_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>);

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.log_and_grad(x).0
    }

    /// Human-readable description of a non-finite evaluation at `x`.
    fn diagnose(&self, x: &DVector<f64>) -> String {
        format!("log-density is {} at {:?}", self.log_density(x), x.as_slice())
    }
}

/// Product of experts over the configuration space of an optional chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PoeTarget {
    dim: usize,
    chain: Option<Arc<KinematicChain>>,
    experts: Vec<Expert>,
    priority: Vec<(usize, usize)>,
}

impl PoeTarget {
    pub fn new(
        dim: usize,
        chain: Option<Arc<KinematicChain>>,
        experts: Vec<Expert>,
        priority: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if experts.is_empty() {
            return Err(invalid("a product of experts needs at least one expert"));
        }
        if let Some(c) = &chain {
            if c.joint_count() != dim {
                return Err(invalid(format!("chain has {} joints, target dimension is {dim}", c.joint_count())));
            }
        }
        for e in &experts {
            let out = e
                .transformation
                .output_dim(chain.as_deref(), dim)
                .map_err(|err| invalid(format!("expert '{}': {err}", e.name)))?;
            if let Some(need) = e.density.input_dim() {
                if need != out {
                    return Err(invalid(format!(
                        "expert '{}': density expects dimension {need}, transformation gives {out}",
                        e.name
                    )));
                }
            }
            if matches!(e.density, ExpertDensity::Bmf { .. })
                && !matches!(e.transformation, Transformation::FkOrientation { .. })
            {
                return Err(invalid(format!("expert '{}': BMF needs an FkOrientation transformation", e.name)));
            }
        }
        let m = experts.len();
        for (p, s) in &priority {
            if *p >= m || *s >= m {
                return Err(invalid(format!("priority pair ({p}, {s}) references a missing expert")));
            }
            if p == s {
                return Err(invalid(format!("priority pair ({p}, {s}) is self-referential")));
            }
        }
        if has_cycle(m, &priority) {
            return Err(invalid("priority pairs contain a cycle"));
        }
        Ok(Self { dim, chain, experts, priority })
    }

    pub fn chain(&self) -> Option<&KinematicChain> {
        self.chain.as_deref()
    }

    pub fn chain_arc(&self) -> Option<Arc<KinematicChain>> {
        self.chain.clone()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Expert] {
        &mut self.experts
    }

    pub fn priority(&self) -> &[(usize, usize)] {
        &self.priority
    }

    /// Same product with priority pairs removed.
    pub fn without_priority(&self) -> Self {
        Self { priority: Vec::new(), ..self.clone() }
    }

    /// Per-expert log-densities at `x`.
    pub fn expert_logs(&self, x: &ConfigVector) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mut ctx = EvalContext::new(self.chain(), x);
        self.experts
            .iter()
            .map(|e| {
                let (v, _) = e.transformation.evaluate(&mut ctx)?;
                e.density.log_density(&v)
            })
            .collect()
    }

    fn check_x(&self, x: &ConfigVector) -> Result<()> {
        if x.len() != self.dim {
            return Err(invalid(format!("configuration has dimension {}, target expects {}", x.len(), self.dim)));
        }
        Ok(())
    }

    /// `log p̃(x) = Σ_m log p_m(T_m(x))`.
    pub fn log_unnorm(&self, x: &ConfigVector) -> Result<f64> {
        Ok(self.expert_logs(x)?.iter().sum())
    }

    /// `log p̃(x)` and its configuration gradient `Σ_m J_mᵀ g_m`, where the
    /// term of every secondary expert is filtered through the nullspace
    /// projector of each of its primaries.
    pub fn log_unnorm_and_grad(&self, x: &ConfigVector) -> Result<(f64, DVector<f64>)> {
        self.check_x(x)?;
        let mut ctx = EvalContext::new(self.chain(), x);
        let mut total = 0.0;
        let mut terms = Vec::with_capacity(self.experts.len());
        let mut jacobians = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            let (v, jac) = e.transformation.evaluate(&mut ctx)?;
            let (l, g) = e.density.log_and_grad(&v)?;
            total += l;
            terms.push(jac.transpose() * g);
            jacobians.push(jac);
        }
        for (p, s) in &self.priority {
            let filter = nullspace_projector(&jacobians[*p]);
            terms[*s] = filter.transpose() * &terms[*s];
        }
        let grad = terms.into_iter().fold(DVector::zeros(self.dim), |acc, t| acc + t);
        Ok((total, grad))
    }

    /// Copy with every uni-Gauss relaxed level tempered by `beta`.
    pub fn with_unigauss_tempering(&self, beta: f64) -> Self {
        let mut out = self.clone();
        for e in &mut out.experts {
            if let ExpertDensity::UniGauss { tempering, .. } = &mut e.density {
                *tempering = beta;
            }
        }
        out
    }

    pub fn has_unigauss(&self) -> bool {
        self.experts.iter().any(|e| matches!(e.density, ExpertDensity::UniGauss { .. }))
    }
}

fn has_cycle(m: usize, edges: &[(usize, usize)]) -> bool {
    // 0 = unvisited, 1 = on stack, 2 = done
    fn visit(v: usize, edges: &[(usize, usize)], state: &mut [u8]) -> bool {
        state[v] = 1;
        for (a, b) in edges {
            if *a == v {
                if state[*b] == 1 || (state[*b] == 0 && visit(*b, edges, state)) {
                    return true;
                }
            }
        }
        state[v] = 2;
        false
    }
    let mut state = vec![0u8; m];
    (0..m).any(|v| state[v] == 0 && visit(v, edges, &mut state))
}

impl LogTarget for PoeTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self.log_unnorm_and_grad(x)
            .unwrap_or_else(|_| (f64::NAN, DVector::from_element(self.dim, f64::NAN)))
    }

    fn diagnose(&self, x: &DVector<f64>) -> String {
        match self.expert_logs(x) {
            Err(e) => format!("evaluation failed: {e}"),
            Ok(logs) => {
                let bad: Vec<String> = self
                    .experts
                    .iter()
                    .zip(&logs)
                    .filter(|(_, l)| !l.is_finite())
                    .map(|(e, l)| format!("expert '{}' = {l}", e.name))
                    .collect();
                if bad.is_empty() {
                    format!("gradient is non-finite at {:?}", x.as_slice())
                } else {
                    format!("{} at {:?}", bad.join(", "), x.as_slice())
                }
            }
        }
    }
}

/// Unnormalized conditional target `p̃(x | y)`.
pub trait ConditionalTarget: Sync {
    fn dim(&self) -> usize;
    fn task_dim(&self) -> usize;
    fn log_and_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> (f64, DVector<f64>);
}

/// Slice `y[start..start+len]` of the task parameter replaces the location
/// of expert `expert` (MVN mean, or CDF bound when `len == 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBinding {
    pub expert: usize,
    pub start: usize,
    pub len: usize,
}

/// Product of experts whose locations are bound to a task parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPoe {
    base: PoeTarget,
    bindings: Vec<TaskBinding>,
    task_dim: usize,
}

impl ConditionalPoe {
    pub fn new(base: PoeTarget, bindings: Vec<TaskBinding>) -> Result<Self> {
        let mut task_dim = 0;
        for b in &bindings {
            let e = base
                .experts
                .get(b.expert)
                .ok_or_else(|| invalid(format!("task binding references missing expert {}", b.expert)))?;
            let ok = match &e.density {
                ExpertDensity::Mvn { mean, .. } => mean.len() == b.len,
                ExpertDensity::CdfLessEqual { .. } => b.len == 1,
                _ => false,
            };
            if !ok {
                return Err(invalid(format!(
                    "task binding on expert '{}' must cover an MVN mean or a CDF bound",
                    e.name
                )));
            }
            task_dim = task_dim.max(b.start + b.len);
        }
        Ok(Self { base, bindings, task_dim })
    }

    pub fn base(&self) -> &PoeTarget {
        &self.base
    }

    pub fn bindings(&self) -> &[TaskBinding] {
        &self.bindings
    }

    /// The unconditional target at a fixed task parameter.
    pub fn at(&self, y: &DVector<f64>) -> Result<PoeTarget> {
        if y.len() != self.task_dim {
            return Err(invalid(format!("task parameter has dimension {}, expected {}", y.len(), self.task_dim)));
        }
        let mut t = self.base.clone();
        for b in &self.bindings {
            let slice = y.rows(b.start, b.len);
            match &mut t.experts[b.expert].density {
                ExpertDensity::Mvn { mean, .. } => mean.copy_from(&slice),
                ExpertDensity::CdfLessEqual { bound, .. } => *bound = slice[0],
                _ => unreachable!("validated in ConditionalPoe::new"),
            }
        }
        Ok(t)
    }
}

impl ConditionalTarget for ConditionalPoe {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn task_dim(&self) -> usize {
        self.task_dim
    }

    fn log_and_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> (f64, DVector<f64>) {
        match self.at(y) {
            Ok(t) => LogTarget::log_and_grad(&t, x),
            Err(_) => (f64::NAN, DVector::from_element(self.base.dim, f64::NAN)),
        }
    }
}

/// One on/off assignment of the uni-Gauss experts with its estimated log-mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCombination {
    /// `active[u]` for the u-th uni-Gauss expert in expert order.
    pub active: Vec<bool>,
    pub log_mass: f64,
}

/// Maximum number of uni-Gauss experts enumerated by [`rank_task_combinations`].
pub const MAX_RANKED_TASKS: usize = 4;

/// Enumerate every on/off assignment of the uni-Gauss experts, estimate the
/// log-mass of each resulting product with `fit` (which returns the final
/// ELBO of a variational fit, so that `−ELBO ≈ log C`), and sort by mass.
///
/// The assignment prior is included: an active task contributes `log π_m`,
/// an abandoned one `log(1−π_m) + log_c`.
pub fn rank_task_combinations<F>(target: &PoeTarget, mut fit: F) -> Result<Vec<TaskCombination>>
where
    F: FnMut(&PoeTarget) -> Result<f64>,
{
    let ug: Vec<usize> = target
        .experts
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.density, ExpertDensity::UniGauss { .. }))
        .map(|(i, _)| i)
        .collect();
    if ug.len() > MAX_RANKED_TASKS {
        return Err(invalid(format!(
            "{} uni-Gauss experts exceed the enumeration limit of {MAX_RANKED_TASKS}",
            ug.len()
        )));
    }
    let mut out = Vec::with_capacity(1 << ug.len());
    for mask in 0..(1usize << ug.len()) {
        let active: Vec<bool> = (0..ug.len()).map(|u| mask & (1 << u) != 0).collect();
        let mut prior = 0.0;
        let mut keep = Vec::new();
        let mut index_map = vec![None; target.experts.len()];
        for (i, e) in target.experts.iter().enumerate() {
            match (&e.density, ug.iter().position(|u| *u == i)) {
                (ExpertDensity::UniGauss { inner, weight, log_c, .. }, Some(u)) => {
                    if active[u] {
                        prior += weight.ln();
                        index_map[i] = Some(keep.len());
                        keep.push(Expert::new(e.name.clone(), e.transformation.clone(), (**inner).clone()));
                    } else {
                        prior += (1.0 - weight).ln() + log_c;
                    }
                }
                _ => {
                    index_map[i] = Some(keep.len());
                    keep.push(e.clone());
                }
            }
        }
        if prior == f64::NEG_INFINITY {
            out.push(TaskCombination { active, log_mass: f64::NEG_INFINITY });
            continue;
        }
        if keep.is_empty() {
            return Err(invalid("abandoning every task leaves an improper (empty) product"));
        }
        let priority = target
            .priority
            .iter()
            .filter_map(|(p, s)| Some((index_map[*p]?, index_map[*s]?)))
            .collect();
        let sub = PoeTarget::new(target.dim, target.chain.clone(), keep, priority)?;
        let elbo = fit(&sub)?;
        if !elbo.is_finite() {
            return Err(Error::NonFinite { step: 0, detail: format!("combination {active:?} produced ELBO {elbo}") });
        }
        out.push(TaskCombination { active, log_mass: prior - elbo });
    }
    out.sort_by(|a, b| b.log_mass.total_cmp(&a.log_mass));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn two_link() -> Arc<KinematicChain> {
        Arc::new(KinematicChain::planar(vec![1.0, 1.0], vec![1.0, 1.0], vec![(-PI, PI); 2]).unwrap())
    }

    fn line_target(height: f64, sigma: f64) -> PoeTarget {
        let chain = two_link();
        let e = Expert::new(
            "line",
            Transformation::Affine {
                inner: Box::new(Transformation::FkPosition { frame: 1 }),
                matrix: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
                offset: DVector::zeros(1),
            },
            ExpertDensity::isotropic(v(&[height]), sigma).unwrap(),
        );
        PoeTarget::new(2, Some(chain), vec![e], vec![]).unwrap()
    }

    fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_iterator(
            x.len(),
            (0..x.len()).map(|j| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            }),
        )
    }

    #[test]
    fn mvn_examples() {
        let l = DMatrix::identity(2, 2);
        assert_eq!(mvn_log(&v(&[0.3, 0.1]), &l, &v(&[0.3, 0.1])).unwrap(), 0.0);
        assert_relative_eq!(mvn_log(&v(&[0.0, 0.0]), &l, &v(&[1.0, 0.0])).unwrap(), -0.5);
        let l = DMatrix::from_diagonal(&v(&[2.0, 1.0]));
        assert_relative_eq!(mvn_log(&v(&[0.0, 0.0]), &l, &v(&[2.0, 1.0])).unwrap(), -1.0);
        assert!(mvn_log(&v(&[0.0, 0.0]), &l, &v(&[2.0])).is_err());
    }

    #[test]
    fn bmf_examples() {
        let z = DMatrix::zeros(2, 2);
        let i = DMatrix::identity(2, 2);
        let (s, c) = 0.8f64.sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert_eq!(bmf_log(&z, &z, &z, &r).unwrap(), 0.0);
        assert_relative_eq!(bmf_log(&z, &z, &i, &i).unwrap(), 2.0);
        assert_relative_eq!(bmf_log(&i, &i, &z, &r).unwrap(), 2.0, epsilon = 1e-14);
        assert!(bmf_log(&i, &i, &z, &DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn bmf_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = || DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let d = ExpertDensity::Bmf { a: m(), b: m(), c: m() };
        let x = v(&[0.3, -0.2, 0.5, 0.9]);
        let (_, g) = d.log_and_grad(&x).unwrap();
        let fd = fd_grad(|y| d.log_density(y).unwrap(), &x);
        assert_relative_eq!(g, fd, epsilon = 1e-7);
    }

    #[test]
    fn cdf_examples() {
        assert_relative_eq!(cdf_log(1.0, 0.2, 1.0), 0.5f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(cdf_log(1.0, 0.2, 1.0 - 5.0 * 0.2), -2.866516129e-7, max_relative = 1e-6);
        assert_relative_eq!(cdf_log(1.0, 0.2, 1.2), 0.158655253931457f64.ln(), max_relative = 1e-9);
    }

    #[test]
    fn cdf_is_decreasing_with_mills_ratio_derivative() {
        let d = ExpertDensity::cdf(0.5, 0.1).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..400 {
            let t = -3.0 + k as f64 * 0.01;
            let (l, g) = d.log_and_grad(&v(&[t])).unwrap();
            assert!(l < prev);
            prev = l;
            let z = (0.5 - t) / 0.1;
            let ratio = crate::special::normal_pdf(z) / crate::special::normal_cdf(z);
            assert_relative_eq!(-g[0] * 0.1, ratio, max_relative = 1e-6);
        }
    }

    #[test]
    fn unigauss_examples() {
        assert_eq!(unigauss_log(1.0, -1.7, -3.0), -1.7);
        assert_eq!(unigauss_log(0.0, -1.7, -3.0), -3.0);
        let expect = (0.5 * (-1.0f64).exp() + 0.5 * (-3.0f64).exp()).ln();
        assert_relative_eq!(unigauss_log(0.5, -1.0, -3.0), expect, epsilon = 1e-14);
        assert_relative_eq!(expect, -1.566_219_169_5, epsilon = 1e-9);
    }

    #[test]
    fn unigauss_monotone_in_weight() {
        for (inner, c) in [(-1.0, -3.0), (-4.0, -2.0)] {
            let mut prev = unigauss_log(0.0, inner, c);
            for k in 1..=100 {
                let cur = unigauss_log(k as f64 / 100.0, inner, c);
                if inner > c {
                    assert!(cur >= prev);
                } else {
                    assert!(cur <= prev);
                }
                prev = cur;
            }
        }
    }

    #[test]
    fn single_joint_expert_at_mean() {
        let e = Expert::new(
            "q",
            Transformation::JointSubset { indices: vec![0, 1] },
            ExpertDensity::isotropic(v(&[0.2, -0.4]), 0.3).unwrap(),
        );
        let t = PoeTarget::new(2, None, vec![e], vec![]).unwrap();
        assert_eq!(t.log_unnorm(&v(&[0.2, -0.4])).unwrap(), 0.0);
    }

    #[test]
    fn product_is_additive() {
        let chain = two_link();
        let a = Expert::new("a", Transformation::FkPosition { frame: 1 }, ExpertDensity::isotropic(v(&[1.0, 0.5]), 0.2).unwrap());
        let b = Expert::new("b", Transformation::Com, ExpertDensity::isotropic(v(&[0.5, 0.5]), 0.4).unwrap());
        let ta = PoeTarget::new(2, Some(chain.clone()), vec![a.clone()], vec![]).unwrap();
        let tb = PoeTarget::new(2, Some(chain.clone()), vec![b.clone()], vec![]).unwrap();
        let tab = PoeTarget::new(2, Some(chain), vec![a, b], vec![]).unwrap();
        let x = v(&[0.3, 1.1]);
        assert_eq!(tab.log_unnorm(&x).unwrap(), ta.log_unnorm(&x).unwrap() + tb.log_unnorm(&x).unwrap());
    }

    #[test]
    fn line_task_constant_on_preimage() {
        let t = line_target(1.0, 0.1);
        // sin q1 + sin(q1+q2) = 1: pick q1, solve q1+q2 = asin(1 − sin q1)
        for q1 in [0.05, 0.1, 0.4, 0.9, 1.5] {
            let s: f64 = 1.0 - f64::sin(q1);
            let q2 = s.asin() - q1;
            let val = t.log_unnorm(&v(&[q1, q2])).unwrap();
            assert!(val.abs() < 1e-9, "{val}");
        }
    }

    fn rich_target() -> PoeTarget {
        let chain = Arc::new(
            KinematicChain::planar(vec![0.6, 0.5, 0.4, 0.3], vec![1.0, 0.8, 0.5, 0.3], vec![(-2.5, 2.5); 4]).unwrap(),
        );
        let mut experts = vec![
            Expert::new("tip", Transformation::FkPosition { frame: 3 }, ExpertDensity::isotropic(v(&[0.9, 0.6]), 0.2).unwrap()),
            Expert::new("com", Transformation::Affine {
                inner: Box::new(Transformation::Com),
                matrix: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                offset: DVector::zeros(1),
            }, ExpertDensity::cdf(0.6, 0.1).unwrap()),
            Expert::new("angle", Transformation::FkAngle { frame: 2 }, ExpertDensity::isotropic(v(&[0.4]), 0.5).unwrap()),
            Expert::new("rot", Transformation::FkOrientation { frame: 3 }, ExpertDensity::Bmf {
                a: DMatrix::identity(2, 2) * 0.3,
                b: DMatrix::identity(2, 2),
                c: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.4]),
            }),
            Expert::new("dist", Transformation::RelativeDistances { pairs: vec![(1, v(&[0.2, 0.9])), (3, v(&[-0.5, 0.1]))] },
                ExpertDensity::isotropic(v(&[0.5, 0.8]), 0.3).unwrap()),
            Expert::new("ik", Transformation::IkProjected { target: v(&[0.8, 0.7]), steps: 2, frame: 3 },
                ExpertDensity::isotropic(v(&[0.8, 0.7]), 0.1).unwrap()),
            Expert::new("ug", Transformation::FkPosition { frame: 1 },
                ExpertDensity::unigauss(ExpertDensity::isotropic(v(&[0.2, 0.6]), 0.1).unwrap(), 0.6, -2.0).unwrap()),
        ];
        experts.extend(joint_limit_experts(&chain, 0.05).unwrap());
        PoeTarget::new(4, Some(chain), experts, vec![]).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for tempering in [0.0, 0.3] {
            let t = rich_target().with_unigauss_tempering(tempering);
            for _ in 0..100 {
                let x = DVector::from_iterator(4, (0..4).map(|_| rng.random_range(-2.3..2.3)));
                let (_, g) = t.log_unnorm_and_grad(&x).unwrap();
                let fd = fd_grad(|y| t.log_unnorm(y).unwrap(), &x);
                for (a, b) in g.iter().zip(fd.iter()) {
                    // IK term is itself differentiated numerically; compare at its precision
                    assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0) + 1e-4 * 0.0 + 2e-4, "{g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_fd_without_ik() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = rich_target();
        t.experts.retain(|e| e.name != "ik");
        for _ in 0..100 {
            let x = DVector::from_iterator(4, (0..4).map(|_| rng.random_range(-2.3..2.3)));
            let (_, g) = t.log_unnorm_and_grad(&x).unwrap();
            let fd = fd_grad(|y| t.log_unnorm(y).unwrap(), &x);
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn nullspace_filter_examples() {
        // J₁ = [1 0]: the secondary keeps only its second-coordinate action
        let p = Expert::new("p", Transformation::JointSubset { indices: vec![0] }, ExpertDensity::isotropic(v(&[0.0]), 1.0).unwrap());
        let s = Expert::new("s", Transformation::JointSubset { indices: vec![0, 1] }, ExpertDensity::isotropic(v(&[1.0, 2.0]), 1.0).unwrap());
        let t = PoeTarget::new(2, None, vec![p.clone(), s.clone()], vec![(0, 1)]).unwrap();
        let x = v(&[0.5, 0.5]);
        let (_, g) = t.log_unnorm_and_grad(&x).unwrap();
        // primary: −0.5; secondary (a,b) = (0.5, 1.5) filtered to (0, 1.5)
        assert_relative_eq!(g, v(&[-0.5, 1.5]), epsilon = 1e-12);

        // square invertible primary: secondary contributes nothing
        let p2 = Expert::new("p2", Transformation::JointSubset { indices: vec![1, 0] }, ExpertDensity::isotropic(v(&[0.0, 0.0]), 1.0).unwrap());
        let t2 = PoeTarget::new(2, None, vec![p2.clone(), s.clone()], vec![(0, 1)]).unwrap();
        let only = PoeTarget::new(2, None, vec![p2], vec![]).unwrap();
        let (_, g2) = t2.log_unnorm_and_grad(&x).unwrap();
        let (_, g_only) = only.log_unnorm_and_grad(&x).unwrap();
        assert_relative_eq!(g2, g_only, epsilon = 1e-12);
        // reported scalar is untouched by filtering
        assert_eq!(t.log_unnorm(&x).unwrap(), t.without_priority().log_unnorm(&x).unwrap());
    }

    #[test]
    fn priority_validation() {
        let e = || Expert::new("e", Transformation::JointSubset { indices: vec![0] }, ExpertDensity::isotropic(v(&[0.0]), 1.0).unwrap());
        assert!(PoeTarget::new(1, None, vec![e(), e()], vec![(0, 1), (1, 0)]).is_err());
        assert!(PoeTarget::new(1, None, vec![e(), e()], vec![(0, 2)]).is_err());
        assert!(PoeTarget::new(1, None, vec![], vec![]).is_err());
        let bad_frame = Expert::new("tip", Transformation::FkPosition { frame: 4 }, ExpertDensity::isotropic(v(&[0.0, 0.0]), 1.0).unwrap());
        let err = PoeTarget::new(2, Some(two_link()), vec![bad_frame], vec![]).unwrap_err();
        assert!(err.to_string().contains("frame"));
    }

    #[test]
    fn conditional_binding_moves_mean() {
        let t = line_target(1.0, 0.1);
        let c = ConditionalPoe::new(t, vec![TaskBinding { expert: 0, start: 0, len: 1 }]).unwrap();
        let x = v(&[0.4, 0.3]);
        let y = c.base().chain().unwrap().fk_position(&x, 1).unwrap()[1];
        let (l, _) = ConditionalTarget::log_and_grad(&c, &x, &v(&[y]));
        assert!(l.abs() < 1e-12);
        let (l2, _) = ConditionalTarget::log_and_grad(&c, &x, &v(&[y + 0.1]));
        assert_relative_eq!(l2, -0.5, epsilon = 1e-9);
    }

    #[test]
    fn param_scores_match_fd() {
        let densities = vec![
            ExpertDensity::mvn(v(&[0.3, -0.1]), DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.2, 0.7])).unwrap(),
            ExpertDensity::cdf(0.4, 0.3).unwrap(),
            ExpertDensity::unigauss(ExpertDensity::isotropic(v(&[0.1, 0.2]), 0.4).unwrap(), 0.7, -1.5).unwrap(),
            ExpertDensity::Bmf {
                a: DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.2]),
                b: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.5]),
                c: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.4]),
            },
        ];
        let inputs = [v(&[0.9, 0.2]), v(&[0.6]), v(&[0.5, -0.3]), v(&[0.6, -0.8, 0.8, 0.6])];
        for (d, x) in densities.iter().zip(inputs.iter()) {
            let s = d.param_score(x).unwrap();
            let p0 = d.params();
            for k in 0..p0.len() {
                let h = 1e-6;
                let mut dp = d.clone();
                let mut dm = d.clone();
                let mut pp = p0.clone();
                pp[k] += h;
                dp.set_params(&pp).unwrap();
                let mut pm = p0.clone();
                pm[k] -= h;
                dm.set_params(&pm).unwrap();
                let fd = (dp.log_density(x).unwrap() - dm.log_density(x).unwrap()) / (2.0 * h);
                assert!((s[k] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{d:?} param {k}: {} vs {fd}", s[k]);
            }
        }
    }

    fn grid_log_mass(t: &PoeTarget, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut vals = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let x = v(&[lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h]);
                vals.push(t.log_unnorm(&x).unwrap());
            }
        }
        crate::special::log_sum_exp(&vals) + 2.0 * h.ln()
    }

    #[test]
    fn rank_off_branch_with_certain_task_is_impossible() {
        let base = Expert::new("base", Transformation::JointSubset { indices: vec![0, 1] }, ExpertDensity::isotropic(v(&[0.0, 0.0]), 1.0).unwrap());
        let ug = Expert::new("task", Transformation::JointSubset { indices: vec![0] },
            ExpertDensity::unigauss(ExpertDensity::isotropic(v(&[0.5]), 0.3).unwrap(), 1.0, -1.0).unwrap());
        let t = PoeTarget::new(2, None, vec![base, ug], vec![]).unwrap();
        let ranked = rank_task_combinations(&t, |sub| Ok(-grid_log_mass(sub, -6.0, 6.0, 200))).unwrap();
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[0].active, vec![true]);
        assert_eq!(ranked[1].log_mass, f64::NEG_INFINITY);
    }

    #[test]
    fn rank_compatible_and_incompatible_tasks() {
        let chain = two_link();
        let mk = |target: [f64; 2], frame: usize, w: f64| {
            Expert::new(
                format!("tip{frame}"),
                Transformation::FkPosition { frame },
                ExpertDensity::unigauss(ExpertDensity::isotropic(v(&target), 0.15).unwrap(), w, -8.0).unwrap(),
            )
        };
        let limits = joint_limit_experts(&chain, 0.05).unwrap();
        // compatible: elbow on the unit circle, tip reachable from it
        let mut experts = limits.clone();
        experts.push(mk([0.0, 1.0], 0, 0.5));
        experts.push(mk([1.0, 1.0], 1, 0.5));
        let t = PoeTarget::new(2, Some(chain.clone()), experts, vec![]).unwrap();
        let ranked = rank_task_combinations(&t, |sub| Ok(-grid_log_mass(sub, -PI, PI, 256))).unwrap();
        assert_eq!(ranked[0].active, vec![true, true], "{ranked:?}");

        // incompatible: the elbow cannot be at (0,1) with the tip at (0,-1.9)
        let primary = Expert::new("elbow", Transformation::FkPosition { frame: 0 }, ExpertDensity::isotropic(v(&[0.0, 1.0]), 0.15).unwrap());
        let mut experts = limits;
        experts.push(primary);
        experts.push(mk([0.0, -1.9], 1, 0.5));
        let t = PoeTarget::new(2, Some(chain), experts, vec![]).unwrap();
        let ranked = rank_task_combinations(&t, |sub| Ok(-grid_log_mass(sub, -PI, PI, 256))).unwrap();
        let on = ranked.iter().find(|c| c.active == vec![true]).unwrap();
        let off = ranked.iter().find(|c| c.active == vec![false]).unwrap();
        assert!(on.log_mass < off.log_mass);
        assert_eq!(ranked[0].active, vec![false]);
    }
}
