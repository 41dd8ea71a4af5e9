//! Declarative experiment description and its translation into core types.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cfgdist_core::elbo::{TaskDistribution, TrainConfig};
use cfgdist_core::experts::{
    joint_limit_experts, ConditionalPoe, ConditionalTarget, Expert, ExpertDensity, PoeTarget, TaskBinding, Transformation,
};
use cfgdist_core::geomkin::KinematicChain;
use cfgdist_core::hmc::HmcConfig;
use cfgdist_core::metrics::GridSpec;
use cfgdist_core::poelearn::LearnConfig;
use cfgdist_core::varfam::Family;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSpec>,
    /// Configuration box when there is no chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    /// Margin of the soft joint-limit experts appended after `experts`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_limit_sigma: Option<f64>,
    pub experts: Vec<ExpertSpec>,
    /// `[primary, secondary]` expert index pairs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub priority: Vec<[usize; 2]>,
    pub variational: VariationalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmc: Option<HmcSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learn: Option<LearnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainSpec {
    Planar {
        link_lengths: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        link_masses: Option<Vec<f64>>,
        joint_limits: Vec<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parents: Option<Vec<Option<usize>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        joint_offsets: Option<Vec<f64>>,
    },
    Serial {
        axes: Vec<[f64; 3]>,
        offsets: Vec<[f64; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        link_masses: Option<Vec<f64>>,
        joint_limits: Vec<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parents: Option<Vec<Option<usize>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub name: String,
    pub transformation: TransformSpec,
    pub density: DensitySpec,
    /// Learnable flags over the density parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learnable: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    FkPosition { frame: usize },
    FkOrientation { frame: usize },
    FkAngle { frame: usize },
    Com,
    JointSubset { indices: Vec<usize> },
    RelativeDistances { pairs: Vec<DistancePair> },
    IkProjected { target: Vec<f64>, steps: usize, frame: usize },
    Affine { inner: Box<TransformSpec>, matrix: Vec<Vec<f64>>, offset: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistancePair {
    pub frame: usize,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    /// Either an isotropic `sigma` or a lower-triangular `scale_tril` (rows).
    Mvn {
        mean: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale_tril: Option<Vec<Vec<f64>>>,
    },
    Bmf { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>> },
    Cdf { bound: f64, sigma: f64 },
    Unigauss { inner: Box<DensitySpec>, weight: f64, log_c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalSpec {
    pub family: Family,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSpec {
    pub tasks: TaskDistribution,
    pub bindings: Vec<BindingSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingSpec {
    pub expert: usize,
    pub start: usize,
    pub len: usize,
}

/// Either `cells` per axis over the configuration box, or explicit axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<(f64, f64, usize)>>,
}

/// Chains run from each start with seeds `seed, seed+1, …`; their thinned
/// samples are concatenated in start order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcSpec {
    #[serde(flatten)]
    pub config: HmcConfig,
    pub starts: Vec<Vec<f64>>,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

fn default_thin() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnSpec {
    #[serde(flatten)]
    pub config: LearnConfig,
    /// Demonstration CSV, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// Isotropic scale of the data-initialized mixture.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.2
}

/// Sample-based diagnostics for scenarios without exact grid metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Samples per evaluation (per task value for mixtures of experts).
    #[serde(default = "default_diag_samples")]
    pub samples: usize,
    /// Held-out task values drawn for mixtures of experts.
    #[serde(default = "default_task_values")]
    pub task_values: usize,
    pub checks: Vec<FkCheck>,
}

/// Tip residual `‖FK(x) − target‖` with tolerance scale `sigma`. Without a
/// `target`, the task value `y` is the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkCheck {
    pub name: String,
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    pub sigma: f64,
}

fn default_diag_samples() -> usize {
    1000
}

fn default_task_values() -> usize {
    10
}

/// Core objects built from a scenario.
#[derive(Debug, Clone)]
pub struct Built {
    pub chain: Option<Arc<KinematicChain>>,
    pub target: PoeTarget,
    pub limits: Vec<(f64, f64)>,
    pub conditional: Option<ConditionalPoe>,
}

impl Built {
    pub fn dim(&self) -> usize {
        self.limits.len()
    }
}

fn pairs(v: &[[f64; 2]]) -> Vec<(f64, f64)> {
    v.iter().map(|p| (p[0], p[1])).collect()
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::invalid(field, "matrix must be a non-empty list of equal-length rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

impl ChainSpec {
    pub fn build(&self) -> Result<KinematicChain> {
        let ones = |n: usize| vec![1.0; n];
        match self {
            ChainSpec::Planar { link_lengths, link_masses, joint_limits, parents, joint_offsets } => {
                let masses = link_masses.clone().unwrap_or_else(|| ones(link_lengths.len()));
                let mut c = KinematicChain::planar(link_lengths.clone(), masses, pairs(joint_limits)).field(|| "chain".into())?;
                if let Some(p) = parents {
                    c = c.with_parents(p.clone()).field(|| "chain.parents".into())?;
                }
                if let Some(o) = joint_offsets {
                    c = c.with_joint_offsets(o.clone()).field(|| "chain.joint_offsets".into())?;
                }
                Ok(c)
            }
            ChainSpec::Serial { axes, offsets, link_masses, joint_limits, parents } => {
                let masses = link_masses.clone().unwrap_or_else(|| ones(axes.len()));
                let mut c = KinematicChain::serial(axes.clone(), offsets.clone(), masses, pairs(joint_limits)).field(|| "chain".into())?;
                if let Some(p) = parents {
                    c = c.with_parents(p.clone()).field(|| "chain.parents".into())?;
                }
                Ok(c)
            }
        }
    }
}

impl TransformSpec {
    pub fn build(&self, field: &str) -> Result<Transformation> {
        Ok(match self {
            TransformSpec::FkPosition { frame } => Transformation::FkPosition { frame: *frame },
            TransformSpec::FkOrientation { frame } => Transformation::FkOrientation { frame: *frame },
            TransformSpec::FkAngle { frame } => Transformation::FkAngle { frame: *frame },
            TransformSpec::Com => Transformation::Com,
            TransformSpec::JointSubset { indices } => Transformation::JointSubset { indices: indices.clone() },
            TransformSpec::RelativeDistances { pairs } => Transformation::RelativeDistances {
                pairs: pairs.iter().map(|p| (p.frame, DVector::from_column_slice(&p.point))).collect(),
            },
            TransformSpec::IkProjected { target, steps, frame } => Transformation::IkProjected {
                target: DVector::from_column_slice(target),
                steps: *steps,
                frame: *frame,
            },
            TransformSpec::Affine { inner, matrix: m, offset } => Transformation::Affine {
                inner: Box::new(inner.build(&format!("{field}.inner"))?),
                matrix: matrix(&format!("{field}.matrix"), m)?,
                offset: DVector::from_column_slice(offset),
            },
        })
    }
}

impl DensitySpec {
    pub fn build(&self, field: &str) -> Result<ExpertDensity> {
        match self {
            DensitySpec::Mvn { mean, sigma, scale_tril } => {
                let mean = DVector::from_column_slice(mean);
                match (sigma, scale_tril) {
                    (Some(s), None) => ExpertDensity::isotropic(mean, *s).field(|| format!("{field}.sigma")),
                    (None, Some(l)) => {
                        ExpertDensity::mvn(mean, matrix(&format!("{field}.scale_tril"), l)?).field(|| format!("{field}.scale_tril"))
                    }
                    _ => Err(CliError::invalid(field, "MVN needs exactly one of `sigma` and `scale_tril`")),
                }
            }
            DensitySpec::Bmf { a, b, c } => {
                let (a, b, c) = (matrix(&format!("{field}.a"), a)?, matrix(&format!("{field}.b"), b)?, matrix(&format!("{field}.c"), c)?);
                if a.shape() != b.shape() || a.shape() != c.shape() || a.nrows() != a.ncols() {
                    return Err(CliError::invalid(field, "BMF matrices must be square and share one shape"));
                }
                Ok(ExpertDensity::Bmf { a, b, c })
            }
            DensitySpec::Cdf { bound, sigma } => ExpertDensity::cdf(*bound, *sigma).field(|| format!("{field}.sigma")),
            DensitySpec::Unigauss { inner, weight, log_c } => {
                let inner = inner.build(&format!("{field}.inner"))?;
                ExpertDensity::unigauss(inner, *weight, *log_c).field(|| field.to_string())
            }
        }
    }

    /// Spec of a (possibly learned) density, keeping the form of `self`
    /// where it still applies.
    pub fn updated(&self, d: &ExpertDensity) -> DensitySpec {
        match (self, d) {
            (DensitySpec::Mvn { sigma, .. }, ExpertDensity::Mvn { mean, scale_tril }) => {
                let n = mean.len();
                let s = scale_tril[(0, 0)];
                let isotropic = sigma.is_some() && *scale_tril == DMatrix::identity(n, n) * s;
                DensitySpec::Mvn {
                    mean: mean.iter().cloned().collect(),
                    sigma: isotropic.then_some(s),
                    scale_tril: (!isotropic).then(|| rows_of(scale_tril)),
                }
            }
            (DensitySpec::Unigauss { inner: spec, .. }, ExpertDensity::UniGauss { inner, weight, log_c, .. }) => {
                DensitySpec::Unigauss { inner: Box::new(spec.updated(inner)), weight: *weight, log_c: *log_c }
            }
            (_, ExpertDensity::Mvn { mean, scale_tril }) => {
                DensitySpec::Mvn { mean: mean.iter().cloned().collect(), sigma: None, scale_tril: Some(rows_of(scale_tril)) }
            }
            (_, ExpertDensity::Bmf { a, b, c }) => DensitySpec::Bmf { a: rows_of(a), b: rows_of(b), c: rows_of(c) },
            (_, ExpertDensity::CdfLessEqual { bound, sigma }) => DensitySpec::Cdf { bound: *bound, sigma: *sigma },
            (_, ExpertDensity::UniGauss { inner, weight, log_c, .. }) => DensitySpec::Unigauss {
                inner: Box::new(DensitySpec::Mvn { mean: vec![], sigma: None, scale_tril: None }.updated(inner)),
                weight: *weight,
                log_c: *log_c,
            },
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        let sc: Scenario = serde_json::from_str(&text).map_err(|source| CliError::Parse { path: path.into(), source })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks beyond what building the core objects catches.
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(CliError::invalid("experts", "at least one expert is required"));
        }
        if self.variational.k == 0 {
            return Err(CliError::invalid("variational.k", "must be at least 1"));
        }
        self.train.validate().field(|| "train".into())?;
        if let Some(m) = &self.moe {
            if self.variational.family != Family::Gaussian {
                return Err(CliError::invalid("variational.family", "mixtures of experts use Gaussian components"));
            }
            m.tasks.validate().field(|| "moe.tasks".into())?;
        }
        if let Some(g) = &self.grid {
            if g.cells.is_some() == g.axes.is_some() {
                return Err(CliError::invalid("grid", "give exactly one of `cells` and `axes`"));
            }
        }
        let mut names: Vec<&str> = self.experts.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::invalid("experts", format!("duplicate expert name '{}'", w[0])));
        }
        if let Some(h) = &self.hmc {
            if h.starts.is_empty() || h.thin == 0 {
                return Err(CliError::invalid("hmc", "needs at least one start and thin ≥ 1"));
            }
        }
        if let Some(l) = &self.learn {
            if l.config.mask.is_some() {
                return Err(CliError::invalid("learn.mask", "declare learnable parameters with `experts[].learnable`"));
            }
            if !(l.init_scale > 0.0) {
                return Err(CliError::invalid("learn.init_scale", "must be positive"));
            }
        }
        if let Some(d) = &self.diagnostics {
            if d.samples < 2 || d.task_values == 0 {
                return Err(CliError::invalid("diagnostics", "needs at least two samples and one task value"));
            }
            for (i, c) in d.checks.iter().enumerate() {
                if !(c.sigma > 0.0) {
                    return Err(CliError::invalid(format!("diagnostics.checks[{i}].sigma"), "must be positive"));
                }
                if c.target.is_none() && self.moe.is_none() {
                    return Err(CliError::invalid(format!("diagnostics.checks[{i}].target"), "required without a task distribution"));
                }
            }
        }
        let built = self.build()?;
        if let Some(h) = &self.hmc {
            for (i, s) in h.starts.iter().enumerate() {
                if s.len() != built.dim() {
                    return Err(CliError::invalid(format!("hmc.starts[{i}]"), format!("expected {} entries", built.dim())));
                }
            }
            h.config.validate(built.dim()).field(|| "hmc".into())?;
        }
        if let Some(d) = &self.diagnostics {
            let chain = built.chain.as_deref().ok_or_else(|| CliError::invalid("diagnostics", "FK checks require a chain"))?;
            for (i, c) in d.checks.iter().enumerate() {
                let probe = DVector::from_iterator(built.dim(), built.limits.iter().map(|(lo, hi)| 0.5 * (lo + hi)));
                let tip = chain.fk_position(&probe, c.frame).field(|| format!("diagnostics.checks[{i}].frame"))?;
                if c.target.as_ref().is_some_and(|t| t.len() != tip.len()) {
                    return Err(CliError::invalid(format!("diagnostics.checks[{i}].target"), format!("expected {} entries", tip.len())));
                }
            }
        }
        self.grid(&built)?;
        Ok(())
    }

    pub fn build(&self) -> Result<Built> {
        let chain = match &self.chain {
            Some(c) => Some(Arc::new(c.build()?)),
            None => None,
        };
        let limits = match (&chain, &self.bounds) {
            (Some(c), None) => c.joint_limits().to_vec(),
            (None, Some(b)) => {
                let l = pairs(b);
                if l.is_empty() || l.iter().any(|(lo, hi)| !(lo < hi)) {
                    return Err(CliError::invalid("bounds", "needs at least one [low, high] pair with low < high"));
                }
                l
            }
            (Some(_), Some(_)) => return Err(CliError::invalid("bounds", "bounds come from the chain's joint limits")),
            (None, None) => return Err(CliError::invalid("chain", "either a chain or explicit bounds is required")),
        };
        let dim = limits.len();
        let mut experts = Vec::with_capacity(self.experts.len());
        for (i, e) in self.experts.iter().enumerate() {
            let tf = e.transformation.build(&format!("experts[{i}].transformation"))?;
            tf.output_dim(chain.as_deref(), dim).field(|| format!("experts[{i}].transformation"))?;
            let density = e.density.build(&format!("experts[{i}].density"))?;
            if let Some(l) = &e.learnable {
                if l.len() != density.param_count() {
                    return Err(CliError::invalid(
                        format!("experts[{i}].learnable"),
                        format!("expected {} flags, got {}", density.param_count(), l.len()),
                    ));
                }
            }
            experts.push(Expert::new(e.name.clone(), tf, density));
        }
        if let Some(s) = self.joint_limit_sigma {
            let c = chain.as_deref().ok_or_else(|| CliError::invalid("joint_limit_sigma", "requires a chain"))?;
            experts.extend(joint_limit_experts(c, s).field(|| "joint_limit_sigma".into())?);
        }
        let priority = self.priority.iter().map(|p| (p[0], p[1])).collect();
        let target = PoeTarget::new(dim, chain.clone(), experts, priority).field(|| "experts".into())?;
        let conditional = match &self.moe {
            Some(m) => {
                let b = m.bindings.iter().map(|b| TaskBinding { expert: b.expert, start: b.start, len: b.len }).collect();
                let c = ConditionalPoe::new(target.clone(), b).field(|| "moe.bindings".into())?;
                if m.tasks.dim() != c.task_dim() {
                    return Err(CliError::invalid("moe.tasks", "dimension differs from the bound task parameters"));
                }
                Some(c)
            }
            None => None,
        };
        Ok(Built { chain, target, limits, conditional })
    }

    pub fn grid(&self, built: &Built) -> Result<Option<GridSpec>> {
        let Some(g) = &self.grid else { return Ok(None) };
        let spec = match (&g.axes, g.cells) {
            (Some(a), _) => GridSpec::new(a.clone()),
            (None, Some(n)) => GridSpec::over_limits(&built.limits, n),
            (None, None) => return Err(CliError::invalid("grid", "give `cells` or `axes`")),
        };
        let spec = spec.field(|| "grid".into())?;
        if spec.dim() != built.dim() {
            return Err(CliError::invalid("grid", format!("grid has {} axes for a {}-dimensional space", spec.dim(), built.dim())));
        }
        Ok(Some(spec))
    }

    /// Learning mask over the expert list of the built target.
    pub fn learn_mask(&self, built: &Built) -> Result<Vec<Vec<bool>>> {
        let mut mask: Vec<Vec<bool>> = built.target.experts().iter().map(|e| vec![false; e.density.param_count()]).collect();
        for (i, e) in self.experts.iter().enumerate() {
            if let Some(l) = &e.learnable {
                mask[i] = l.clone();
            }
        }
        if !mask.iter().flatten().any(|m| *m) {
            return Err(CliError::invalid("experts", "learning needs at least one `learnable` flag set"));
        }
        Ok(mask)
    }

    /// Scenario with expert densities replaced by those of `target`.
    pub fn with_learned(&self, target: &PoeTarget) -> Scenario {
        let mut out = self.clone();
        for (spec, e) in out.experts.iter_mut().zip(target.experts()) {
            spec.density = spec.density.updated(&e.density);
        }
        out
    }

    /// Replace every seed in the scenario.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let Some(h) = &mut self.hmc {
            h.config.seed = seed;
        }
        if let Some(l) = &mut self.learn {
            l.config.seed = seed;
            l.config.inner.seed = seed;
        }
    }

    pub fn output_dir(&self, base: &Path) -> PathBuf {
        match &self.output {
            Some(o) => PathBuf::from(o),
            None => base.join(&self.name),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Scenario {
        serde_json::from_str(
            r#"{
              "name": "t",
              "chain": {"type": "planar", "link_lengths": [1, 1], "joint_limits": [[-3, 3], [-3, 3]]},
              "joint_limit_sigma": 0.05,
              "experts": [{
                "name": "line",
                "transformation": {"type": "affine", "inner": {"type": "fk_position", "frame": 1}, "matrix": [[0, 1]], "offset": [0]},
                "density": {"type": "mvn", "mean": [1.0], "sigma": 0.07}
              }],
              "variational": {"family": "banana", "k": 3},
              "train": {"steps": 10},
              "grid": {"cells": 32}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn builds_line_scenario() {
        let sc = line();
        sc.validate().unwrap();
        let b = sc.build().unwrap();
        assert_eq!(b.dim(), 2);
        assert_eq!(b.target.experts().len(), 5);
        assert_eq!(sc.grid(&b).unwrap().unwrap().cell_count(), 32 * 32);
        assert_eq!(sc.train.samples_per_step, 64);
    }

    #[test]
    fn bad_frame_names_the_field() {
        let mut sc = line();
        sc.experts[0].transformation = TransformSpec::FkPosition { frame: 7 };
        let err = sc.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("experts[0].transformation") && msg.contains("frame"), "{msg}");
    }

    #[test]
    fn mvn_needs_one_scale() {
        let mut sc = line();
        sc.experts[0].density = DensitySpec::Mvn { mean: vec![1.0], sigma: Some(0.1), scale_tril: Some(vec![vec![0.1]]) };
        assert!(sc.validate().unwrap_err().to_string().contains("experts[0].density"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<Scenario>(r#"{"name": "x", "experts": [], "variational": {"family": "gaussian", "k": 1}, "colour": 1}"#);
        assert!(err.unwrap_err().to_string().contains("colour"));
    }

    #[test]
    fn json_round_trip() {
        let sc = line();
        let back: Scenario = serde_json::from_str(&sc.to_json()).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn learned_density_keeps_form() {
        let spec = DensitySpec::Mvn { mean: vec![0.0, 0.0], sigma: Some(0.1), scale_tril: None };
        let d = ExpertDensity::isotropic(DVector::from_vec(vec![0.5, 0.2]), 0.1).unwrap();
        assert_eq!(spec.updated(&d), DensitySpec::Mvn { mean: vec![0.5, 0.2], sigma: Some(0.1), scale_tril: None });
        let d2 = ExpertDensity::mvn(DVector::from_vec(vec![0.5, 0.2]), DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.02, 0.3])).unwrap();
        match spec.updated(&d2) {
            DensitySpec::Mvn { sigma: None, scale_tril: Some(l), .. } => assert_eq!(l, vec![vec![0.1, 0.0], vec![0.02, 0.3]]),
            other => panic!("{other:?}"),
        }
    }
}
