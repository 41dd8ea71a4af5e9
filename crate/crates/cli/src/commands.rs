//! Command implementations. Each returns a summary and writes its artifacts under `out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cfgdist_core::elbo::{fit_conditional, fit_poe, init_mixture, init_moe, FitTrace};
use cfgdist_core::experts::{rank_task_combinations, ExpertDensity, LogTarget};
use cfgdist_core::geomkin::KinematicChain;
use cfgdist_core::gmmops::{gmm_product, WEIGHT_FLOOR};
use cfgdist_core::hmc::hmc_chain;
use cfgdist_core::metrics::{
    alpha_half_from_bc, bhattacharyya, connectivity_graph, histogram, importance_log_c, normalize_on_grid, ovl, DensityTable,
};
use cfgdist_core::poelearn::{init_from_data, learn_poe, Dataset};
use cfgdist_core::varfam::{FittedParams, Mixture, MoeParams, ParamsDoc};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context, Result};
use crate::output::{ensure_dir, fmt9, read_json, read_rows, write_csv, write_json};
use crate::scenario::{Built, FkCheck, Scenario};

/// Normalized-density threshold below which a cell counts as outside the support of `p̃`.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn q_header(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("q{i}")).collect()
}

fn row(x: &DVector<f64>) -> Vec<String> {
    x.iter().map(|v| fmt9(*v)).collect()
}

pub fn load_params(path: &Path) -> Result<FittedParams> {
    let doc: ParamsDoc = read_json(path)?;
    doc.into_params().map_err(|e| CliError::invalid("params", format!("{}: {e}", path.display())))
}

fn require_mixture(p: FittedParams, what: &str) -> Result<Mixture> {
    match p {
        FittedParams::Mixture(m) => Ok(m),
        FittedParams::Moe(_) => Err(CliError::invalid("params", format!("{what} needs an unconditional mixture"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub name: String,
    pub steps: usize,
    /// Median loss `E_q[log q − log p̃]` over the last tenth of the run.
    pub final_loss: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone)]
pub enum Fitted {
    Mixture(Mixture),
    Moe(MoeParams),
}

impl Fitted {
    pub fn doc(&self) -> ParamsDoc {
        match self {
            Fitted::Mixture(m) => ParamsDoc::from(m),
            Fitted::Moe(m) => ParamsDoc::from(m),
        }
    }
}

/// Fit the variational family; initial parameters are drawn with the training seed.
pub fn fit_scenario(sc: &Scenario, built: &Built) -> Result<(Fitted, FitTrace)> {
    let mut rng = seeded(sc.train.seed);
    match (&sc.moe, &built.conditional) {
        (Some(m), Some(cond)) => {
            let init = init_moe(sc.variational.k, m.tasks.dim(), &built.limits, &mut rng)?;
            let (q, trace) = fit_conditional(&init, cond, &m.tasks, &sc.train)?;
            Ok((Fitted::Moe(q), trace))
        }
        _ => {
            let init = init_mixture(sc.variational.family, sc.variational.k, &built.limits, &mut rng)?;
            let (q, trace) = fit_poe(&init, &built.target, &sc.train)?;
            Ok((Fitted::Mixture(q), trace))
        }
    }
}

/// Writes `params.json`, `trace.csv` and `fit.json`.
pub fn fit(sc: &Scenario, out: &Path) -> Result<(Fitted, FitSummary)> {
    let built = sc.build()?;
    let start = Instant::now();
    let (q, trace) = fit_scenario(sc, &built)?;
    let runtime_s = start.elapsed().as_secs_f64();
    ensure_dir(out)?;
    write_json(&out.join("params.json"), &q.doc())?;
    let header = ["step", "loss", "grad_norm"].map(String::from);
    let rows = trace.rows.iter().map(|r| vec![r.step.to_string(), fmt9(r.elbo), fmt9(r.grad_norm)]);
    write_csv(&out.join("trace.csv"), &header, rows)?;
    let summary = FitSummary { name: sc.name.clone(), steps: trace.len(), final_loss: trace.tail_median(0.1), runtime_s };
    write_json(&out.join("fit.json"), &summary)?;
    Ok((q, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bhattacharyya: f64,
    pub ovl: f64,
    pub alpha_half: f64,
    /// Log normalizer of the reference density on the grid.
    pub log_c: f64,
    pub runtime_s: f64,
    /// Mass of the compared density in cells where the reference is below [`SUPPORT_THRESHOLD`].
    pub zero_avoiding_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub median: f64,
    pub q90: f64,
    pub q95: f64,
    pub q99: f64,
    /// Fraction of samples with residual below `3σ`.
    pub within_3sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub samples: usize,
    pub checks: Vec<CheckReport>,
    pub mean_pairwise_distance: f64,
    pub joint_variance: Vec<f64>,
    /// Importance estimate of `log C` with its effective sample size (unconditional mixtures only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_c_importance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Option<Metrics>,
    pub diagnostics: Option<Diagnostics>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn check_report(name: &str, sigma: f64, mut r: Vec<f64>) -> CheckReport {
    r.sort_by(f64::total_cmp);
    let within = r.iter().filter(|v| **v < 3.0 * sigma).count() as f64 / r.len() as f64;
    CheckReport {
        name: name.to_string(),
        median: quantile(&r, 0.5),
        q90: quantile(&r, 0.9),
        q95: quantile(&r, 0.95),
        q99: quantile(&r, 0.99),
        within_3sigma: within,
    }
}

/// Tip residual of each sample; the task value fills in a missing target.
pub fn residuals(chain: &KinematicChain, check: &FkCheck, samples: &[(DVector<f64>, Option<DVector<f64>>)]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|(x, y)| {
            let target = match (&check.target, y) {
                (Some(t), _) => DVector::from_column_slice(t),
                (None, Some(y)) => y.clone(),
                (None, None) => return Err(CliError::invalid("diagnostics", "check without target needs task values")),
            };
            let tip = chain.fk_position(x, check.frame)?;
            if tip.len() != target.len() {
                return Err(CliError::invalid(format!("diagnostics.checks[{}].target", check.name), "dimension mismatch"));
            }
            Ok((tip - target).norm())
        })
        .collect()
}

pub fn mean_pairwise_distance(xs: &[DVector<f64>]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (&xs[i] - &xs[j]).norm();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

fn joint_variance(xs: &[DVector<f64>]) -> Vec<f64> {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
    (0..d).map(|i| xs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).collect()
}

/// Sample-based diagnostics of a fitted density.
pub fn diagnose(sc: &Scenario, built: &Built, q: &Fitted, seed: u64) -> Result<Diagnostics> {
    let spec = sc.diagnostics.as_ref().ok_or_else(|| CliError::invalid("diagnostics", "scenario has no diagnostics block"))?;
    let chain = built.chain.as_deref().ok_or_else(|| CliError::invalid("diagnostics", "FK checks require a chain"))?;
    let start = Instant::now();
    let mut rng = seeded(seed);
    let samples: Vec<(DVector<f64>, Option<DVector<f64>>)> = match q {
        Fitted::Mixture(m) => m.sample_n(spec.samples, &mut rng).into_iter().map(|x| (x, None)).collect(),
        Fitted::Moe(m) => {
            let tasks = &sc.moe.as_ref().ok_or_else(|| CliError::invalid("moe", "conditional parameters need a task distribution"))?.tasks;
            let mut out = Vec::with_capacity(spec.samples * spec.task_values);
            for _ in 0..spec.task_values {
                let y = tasks.sample(&mut rng);
                for _ in 0..spec.samples {
                    out.push((m.sample(&y, &mut rng)?, Some(y.clone())));
                }
            }
            out
        }
    };
    let checks = spec
        .checks
        .iter()
        .map(|c| Ok(check_report(&c.name, c.sigma, residuals(chain, c, &samples)?)))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<DVector<f64>> = samples.iter().map(|(x, _)| x.clone()).collect();
    let (log_c_importance, ess) = match q {
        Fitted::Mixture(m) => {
            let est = importance_log_c(&built.target, m, &xs)?;
            (Some(est.log_c), Some(est.ess))
        }
        Fitted::Moe(_) => (None, None),
    };
    Ok(Diagnostics {
        samples: xs.len(),
        checks,
        mean_pairwise_distance: mean_pairwise_distance(&xs),
        joint_variance: joint_variance(&xs),
        log_c_importance,
        ess,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Grid comparison of two normalized tables.
pub fn compare(p: &DensityTable, q: &DensityTable, log_c: f64, runtime_s: f64) -> Result<Metrics> {
    let bc = bhattacharyya(p, q)?;
    Ok(Metrics {
        bhattacharyya: bc,
        ovl: ovl(p, q)?,
        alpha_half: alpha_half_from_bc(bc),
        log_c,
        runtime_s,
        zero_avoiding_mass: q.mass_where_below(p, SUPPORT_THRESHOLD)?,
    })
}

fn write_heatmap(path: &Path, t: &DensityTable) -> Result<()> {
    let d = t.grid.dim();
    let mut header = q_header(d);
    header.push("density".into());
    write_csv(path, &header, t.rows().map(|(c, v)| {
        let mut r = row(&c);
        r.push(fmt9(v));
        r
    }))
}

/// Grid metrics of `params` against the scenario target (or against
/// `reference` params when given), plus sample diagnostics when configured.
/// Writes `metrics.json`, `heatmap_p.csv`, `heatmap_q.csv` and `diagnostics.json` as applicable.
pub fn evaluate(sc: &Scenario, params: &Path, reference: Option<&Path>, out: &Path, seed: u64) -> Result<Evaluation> {
    let built = sc.build()?;
    let q = match load_params(params)? {
        FittedParams::Mixture(m) => Fitted::Mixture(m),
        FittedParams::Moe(m) => Fitted::Moe(m),
    };
    let dim = match &q {
        Fitted::Mixture(m) => m.dim(),
        Fitted::Moe(m) => m.dim(),
    };
    if dim != built.dim() {
        return Err(CliError::invalid("params", format!("parameters have dimension {dim}, scenario {}", built.dim())));
    }
    ensure_dir(out)?;
    let mut eval = Evaluation::default();
    if let Some(grid) = sc.grid(&built)? {
        let start = Instant::now();
        let Fitted::Mixture(qm) = &q else {
            return Err(CliError::invalid("grid", "grid metrics need an unconditional mixture"));
        };
        let (p_table, log_c) = match reference {
            Some(r) => {
                let pm = require_mixture(load_params(r)?, "a reference")?;
                normalize_on_grid(|x| pm.logpdf(x), &grid)?
            }
            None => normalize_on_grid(|x| built.target.log_density(x), &grid)?,
        };
        let (q_table, _) = normalize_on_grid(|x| qm.logpdf(x), &grid)?;
        let m = compare(&p_table, &q_table, log_c, start.elapsed().as_secs_f64())?;
        write_heatmap(&out.join("heatmap_p.csv"), &p_table)?;
        write_heatmap(&out.join("heatmap_q.csv"), &q_table)?;
        write_json(&out.join("metrics.json"), &m)?;
        eval.metrics = Some(m);
    }
    if sc.diagnostics.is_some() {
        let d = diagnose(sc, &built, &q, seed)?;
        write_json(&out.join("diagnostics.json"), &d)?;
        eval.diagnostics = Some(d);
    }
    if eval.metrics.is_none() && eval.diagnostics.is_none() {
        return Err(CliError::invalid("grid", "scenario declares neither a grid nor diagnostics"));
    }
    Ok(eval)
}

/// Frames without children.
fn leaf_frames(chain: &KinematicChain) -> Vec<usize> {
    let parents = chain.parents();
    (0..chain.joint_count()).filter(|j| !parents.iter().any(|p| *p == Some(*j))).collect()
}

/// Draws `count` configurations; rows carry the component index for
/// mixtures and tip positions of every leaf frame when a chain is given.
pub fn sample(
    params: &Path,
    chain: Option<&KinematicChain>,
    count: usize,
    y: Option<&[f64]>,
    seed: u64,
    out: &Path,
) -> Result<Vec<DVector<f64>>> {
    let q = load_params(params)?;
    let mut rng = seeded(seed);
    let (d, draws): (usize, Vec<(DVector<f64>, Option<usize>)>) = match &q {
        FittedParams::Mixture(m) => {
            if y.is_some() {
                return Err(CliError::invalid("y", "task values apply to conditional parameters only"));
            }
            (m.dim(), (0..count).map(|_| m.sample(&mut rng)).map(|(x, k)| (x, Some(k))).collect())
        }
        FittedParams::Moe(m) => {
            let y = y.ok_or_else(|| CliError::invalid("y", "conditional parameters need task values (--y)"))?;
            if y.len() != m.task_dim() {
                return Err(CliError::invalid("y", format!("expected {} task values, got {}", m.task_dim(), y.len())));
            }
            let y = DVector::from_column_slice(y);
            (m.dim(), (0..count).map(|_| m.sample(&y, &mut rng).map(|x| (x, None))).collect::<cfgdist_core::Result<_>>()?)
        }
    };
    if let Some(c) = chain {
        if c.joint_count() != d {
            return Err(CliError::invalid("scenario", format!("chain has {} joints, parameters {d} dimensions", c.joint_count())));
        }
    }
    let mut header = q_header(d);
    if matches!(q, FittedParams::Mixture(_)) {
        header.push("component".into());
    }
    let leaves = chain.map(leaf_frames).unwrap_or_default();
    let axes = ["x", "y", "z"];
    if let Some(c) = chain {
        for f in &leaves {
            header.extend((0..c.task_dim()).map(|a| format!("tip{f}_{}", axes[a])));
        }
    }
    let mut rows = Vec::with_capacity(draws.len());
    for (x, k) in &draws {
        let mut r = row(x);
        if let Some(k) = k {
            r.push(k.to_string());
        }
        if let Some(c) = chain {
            for f in &leaves {
                r.extend(row(&c.fk_position(x, *f)?));
            }
        }
        rows.push(r);
    }
    ensure_dir(out)?;
    write_csv(&out.join("samples.csv"), &header, rows)?;
    Ok(draws.into_iter().map(|(x, _)| x).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcSummary {
    pub rows: usize,
    /// Accepted fraction of each chain.
    pub acceptance_rates: Vec<f64>,
    pub acceptance_rate: f64,
    /// Histogram of the samples against the grid-normalized target.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bhattacharyya: Option<f64>,
    pub runtime_s: f64,
}

/// Runs one chain per start; writes `samples.csv` and `hmc.json`.
pub fn hmc(sc: &Scenario, out: &Path) -> Result<(Vec<DVector<f64>>, HmcSummary)> {
    let built = sc.build()?;
    let spec = sc.hmc.as_ref().ok_or_else(|| CliError::invalid("hmc", "scenario has no hmc block"))?;
    let start = Instant::now();
    let mut samples = Vec::new();
    let mut rates = Vec::new();
    for (i, s) in spec.starts.iter().enumerate() {
        let mut cfg = spec.config.clone();
        cfg.seed = cfg.seed.wrapping_add(i as u64);
        let r = hmc_chain(&built.target, &cfg, &DVector::from_column_slice(s))?;
        rates.push(r.acceptance_rate);
        samples.extend(r.samples.into_iter().step_by(spec.thin));
    }
    let bhattacharyya = match sc.grid(&built)? {
        Some(grid) => {
            let (p, _) = normalize_on_grid(|x| built.target.log_density(x), &grid)?;
            Some(cfgdist_core::metrics::bhattacharyya(&p, &histogram(&samples, &grid)?)?)
        }
        None => None,
    };
    let summary = HmcSummary {
        rows: samples.len(),
        acceptance_rate: rates.iter().sum::<f64>() / rates.len() as f64,
        acceptance_rates: rates,
        bhattacharyya,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    ensure_dir(out)?;
    write_csv(&out.join("samples.csv"), &q_header(built.dim()), samples.iter().map(row))?;
    write_json(&out.join("hmc.json"), &summary)?;
    Ok((samples, summary))
}

/// Writes `product.json`.
pub fn product(a: &Path, b: &Path, out: &Path) -> Result<Mixture> {
    let qa = require_mixture(load_params(a)?, "a product")?;
    let qb = require_mixture(load_params(b)?, "a product")?;
    let p = gmm_product(&qa, &qb, Some(WEIGHT_FLOOR))?;
    ensure_dir(out)?;
    write_json(&out.join("product.json"), &ParamsDoc::from(&p))?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connectivity {
    pub epsilon: f64,
    pub overlaps: Vec<Vec<f64>>,
    pub edges: Vec<[usize; 2]>,
    pub labels: Vec<usize>,
    pub groups: usize,
}

/// Writes `connectivity.json`.
pub fn connectivity(params: &Path, epsilon: f64, out: &Path) -> Result<Connectivity> {
    if !(epsilon >= 0.0) {
        return Err(CliError::invalid("epsilon", "must be nonnegative"));
    }
    let q = require_mixture(load_params(params)?, "connectivity")?;
    let g = connectivity_graph(&q, epsilon)?;
    let c = Connectivity {
        epsilon,
        overlaps: (0..g.overlaps.nrows()).map(|i| g.overlaps.row(i).iter().cloned().collect()).collect(),
        edges: g.edges.iter().map(|(a, b)| [*a, *b]).collect(),
        groups: g.group_count(),
        labels: g.labels,
    };
    ensure_dir(out)?;
    write_json(&out.join("connectivity.json"), &c)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    pub iterations: usize,
    pub likelihood_gain: f64,
    pub final_log_c: f64,
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
    pub runtime_s: f64,
}

/// Dataset named by the scenario, relative to its file.
pub fn dataset_path(sc: &Scenario, scenario_path: &Path) -> Result<PathBuf> {
    let rel = sc
        .learn
        .as_ref()
        .and_then(|l| l.dataset.as_ref())
        .ok_or_else(|| CliError::invalid("learn.dataset", "no dataset given"))?;
    Ok(scenario_path.parent().unwrap_or(Path::new(".")).join(rel))
}

/// Learns the flagged expert parameters; writes `learned.json` (the
/// scenario with learned densities), `q_params.json`, `learn_trace.csv` and `learn.json`.
pub fn learn(sc: &Scenario, dataset: &Path, out: &Path) -> Result<(Scenario, LearnSummary)> {
    let built = sc.build()?;
    let spec = sc.learn.as_ref().ok_or_else(|| CliError::invalid("learn", "scenario has no learn block"))?;
    let rows = read_rows(dataset)?;
    let data = Dataset::new(rows.into_iter().map(DVector::from_vec).collect()).field(|| "dataset".into())?;
    if data.dim() != built.dim() {
        return Err(CliError::invalid("dataset", format!("rows have {} columns, scenario {} joints", data.dim(), built.dim())));
    }
    let mut cfg = spec.config.clone();
    cfg.mask = Some(sc.learn_mask(&built)?);
    let start = Instant::now();
    let q0 = init_from_data(sc.variational.family, sc.variational.k, &data, spec.init_scale)?;
    let r = learn_poe(&built.target, &data, &q0, &cfg)?;
    let learned = sc.with_learned(&r.target);
    let summary = LearnSummary {
        iterations: r.log_likelihood.len(),
        likelihood_gain: r.likelihood_gain(),
        final_log_c: *r.log_c.last().unwrap_or(&f64::NAN),
        weights: r.q.weights(),
        warnings: r.warnings.clone(),
        runtime_s: start.elapsed().as_secs_f64(),
    };
    ensure_dir(out)?;
    std::fs::write(out.join("learned.json"), learned.to_json() + "\n").map_err(|source| CliError::Io { path: out.join("learned.json"), source })?;
    write_json(&out.join("q_params.json"), &ParamsDoc::from(&r.q))?;
    let header = ["iteration", "log_likelihood", "log_c"].map(String::from);
    let trace = r.log_likelihood.iter().zip(&r.log_c).enumerate().map(|(i, (l, c))| vec![i.to_string(), fmt9(*l), fmt9(*c)]);
    write_csv(&out.join("learn_trace.csv"), &header, trace)?;
    write_json(&out.join("learn.json"), &summary)?;
    Ok((learned, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCombination {
    /// Uni-Gauss experts kept active, by name.
    pub active: Vec<String>,
    pub abandoned: Vec<String>,
    /// `Σ log π` over active tasks plus `Σ log(1−π) + log_c` over abandoned ones.
    pub log_prior: f64,
    /// Assignment prior plus the variational estimate `−ELBO` of the product's log-mass.
    pub log_mass: f64,
    /// Assignment prior plus the importance estimate of the product's log-mass.
    pub log_mass_importance: f64,
    pub ess: f64,
}

/// Fits every on/off assignment of the uni-Gauss experts; writes `ranking.json`.
pub fn rank_tasks(sc: &Scenario, out: &Path, importance_samples: usize) -> Result<Vec<RankedCombination>> {
    let built = sc.build()?;
    let unigauss: Vec<(String, f64, f64)> = built
        .target
        .experts()
        .iter()
        .filter_map(|e| match &e.density {
            ExpertDensity::UniGauss { weight, log_c, .. } => Some((e.name.clone(), *weight, *log_c)),
            _ => None,
        })
        .collect();
    if unigauss.is_empty() {
        return Err(CliError::invalid("experts", "ranking needs at least one uni-Gauss expert"));
    }
    // importance estimates keyed by the set of kept expert names
    let mut estimates: Vec<(Vec<String>, f64, f64)> = Vec::new();
    let ranking = rank_task_combinations(&built.target, |sub| {
        let mut rng = seeded(sc.train.seed);
        let init = init_mixture(sc.variational.family, sc.variational.k, &built.limits, &mut rng)?;
        let (q, trace) = fit_poe(&init, sub, &sc.train)?;
        let xs = q.sample_n(importance_samples, &mut seeded(sc.train.seed ^ 0x5eed));
        let est = importance_log_c(sub, &q, &xs)?;
        estimates.push((sub.experts().iter().map(|e| e.name.clone()).collect(), est.log_c, est.ess));
        Ok(trace.tail_median(0.1))
    })?;
    let mut out_rows = Vec::with_capacity(ranking.len());
    for c in &ranking {
        let (mut active, mut abandoned, mut prior) = (Vec::new(), Vec::new(), 0.0);
        for ((name, w, lc), on) in unigauss.iter().zip(&c.active) {
            if *on {
                active.push(name.clone());
                prior += w.ln();
            } else {
                abandoned.push(name.clone());
                prior += (1.0 - w).ln() + lc;
            }
        }
        let (li, ess) = estimates
            .iter()
            .find(|(names, _, _)| abandoned.iter().all(|a| !names.contains(a)) && active.iter().all(|a| names.contains(a)))
            .map_or((f64::NEG_INFINITY, 0.0), |(_, l, e)| (*l, *e));
        out_rows.push(RankedCombination { active, abandoned, log_prior: prior, log_mass: c.log_mass, log_mass_importance: prior + li, ess });
    }
    ensure_dir(out)?;
    write_json(&out.join("ranking.json"), &out_rows)?;
    Ok(out_rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert_eq!(quantile(&v, 0.9), 3.6);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn pairwise_distance_of_square_corners() {
        let xs: Vec<DVector<f64>> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].iter().map(|p| DVector::from_column_slice(p)).collect();
        let expected = (4.0 + 2.0 * 2f64.sqrt()) / 6.0;
        assert!((mean_pairwise_distance(&xs) - expected).abs() < 1e-15);
        assert_eq!(mean_pairwise_distance(&xs[..1]), 0.0);
    }

    #[test]
    fn check_report_counts_strictly_inside() {
        let r = check_report("c", 1.0, vec![0.5, 2.9, 3.0, 10.0]);
        assert_eq!(r.within_3sigma, 0.5);
        assert_eq!(r.median, (2.9 + 3.0) / 2.0);
    }

    #[test]
    fn leaves_of_a_tree() {
        let c = KinematicChain::planar(vec![1.0; 5], vec![1.0; 5], vec![(-1.0, 1.0); 5])
            .unwrap()
            .with_parents(vec![None, Some(0), Some(1), Some(0), Some(3)])
            .unwrap();
        assert_eq!(leaf_frames(&c), vec![2, 4]);
    }
}
