//! Hamiltonian Monte Carlo over an unnormalized log-density.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::experts::LogTarget;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Samples kept after burn-in.
    pub samples: usize,
    pub burn_in: usize,
    /// Diagonal of the mass matrix before scaling; `None` is the identity.
    pub mass: Option<Vec<f64>>,
    /// Momentum scale: momenta are drawn from `N(0, σ_k² diag(mass))`.
    pub kernel_std: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { step_size: 0.01, leapfrog_steps: 10, samples: 2000, burn_in: 500, mass: None, kernel_std: 0.1, seed: 0 }
    }
}

impl HmcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(invalid("step_size must be positive"));
        }
        if self.leapfrog_steps == 0 {
            return Err(invalid("leapfrog_steps must be at least 1"));
        }
        if !(self.kernel_std > 0.0) {
            return Err(invalid("kernel_std must be positive"));
        }
        if let Some(m) = &self.mass {
            if m.len() != dim || m.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid(format!("mass needs {dim} positive entries")));
            }
        }
        Ok(())
    }

    fn mass_diag(&self, dim: usize) -> DVector<f64> {
        let s2 = self.kernel_std * self.kernel_std;
        match &self.mass {
            Some(m) => DVector::from_iterator(dim, m.iter().map(|v| v * s2)),
            None => DVector::from_element(dim, s2),
        }
    }
}

/// `L` leapfrog steps of size `ε` on `H = −log p̃(x) + ½ pᵀ M⁻¹ p`.
/// Returns `None` when the trajectory hits a non-finite gradient.
pub fn leapfrog<G>(
    x: &DVector<f64>,
    p: &DVector<f64>,
    grad_log: G,
    step: f64,
    n_steps: usize,
    inv_mass: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let finite = |v: &DVector<f64>| v.iter().all(|c| c.is_finite());
    let mut x = x.clone();
    let mut g = grad_log(&x);
    if !finite(&g) {
        return None;
    }
    let mut p = p + &g * (0.5 * step);
    for i in 0..n_steps {
        x += p.component_mul(inv_mass) * step;
        g = grad_log(&x);
        if !finite(&g) || !finite(&x) {
            return None;
        }
        let scale = if i + 1 == n_steps { 0.5 } else { 1.0 };
        p += &g * (scale * step);
    }
    Some((x, p))
}

fn kinetic(p: &DVector<f64>, inv_mass: &DVector<f64>) -> f64 {
    0.5 * p.component_mul(inv_mass).dot(p)
}

/// One Metropolis decision, kept for replay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub uniform: f64,
    /// `log` of the acceptance ratio; `-inf` for divergent trajectories.
    pub log_ratio: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcResult {
    /// Post-burn-in states.
    pub samples: Vec<DVector<f64>>,
    /// Accepted fraction over the whole chain.
    pub acceptance_rate: f64,
    pub records: Vec<StepRecord>,
}

/// Metropolis-corrected HMC chain started at `x0`.
pub fn hmc_chain<T: LogTarget + ?Sized>(target: &T, cfg: &HmcConfig, x0: &DVector<f64>) -> Result<HmcResult> {
    let d = target.dim();
    cfg.validate(d)?;
    if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("start point must be a finite vector of dimension {d}")));
    }
    let mass = cfg.mass_diag(d);
    let inv_mass = mass.map(|m| 1.0 / m);
    let sd = mass.map(f64::sqrt);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = x0.clone();
    let mut lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::Sampler(format!("start point has log-density {lp}; {}", target.diagnose(&x))));
    }
    let total = cfg.burn_in + cfg.samples;
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut records = Vec::with_capacity(total);
    let mut accepted = 0usize;
    for it in 0..total {
        let p = DVector::from_iterator(d, (0..d).map(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd[i] * z
        }));
        let u: f64 = rng.random();
        let proposal = leapfrog(&x, &p, |y| target.log_and_grad(y).1, cfg.step_size, cfg.leapfrog_steps, &inv_mass);
        let (log_ratio, next) = match proposal {
            Some((xn, pn)) => {
                let lpn = target.log_density(&xn);
                let h0 = -lp + kinetic(&p, &inv_mass);
                let h1 = -lpn + kinetic(&pn, &inv_mass);
                if h1.is_finite() {
                    ((h0 - h1).min(0.0), Some((xn, lpn)))
                } else {
                    (f64::NEG_INFINITY, None)
                }
            }
            None => (f64::NEG_INFINITY, None),
        };
        let accept = u.ln() < log_ratio;
        if accept {
            let (xn, lpn) = next.expect("finite proposal when accepted");
            x = xn;
            lp = lpn;
            accepted += 1;
        }
        records.push(StepRecord { uniform: u, log_ratio, accepted: accept });
        if it + 1 == cfg.burn_in && accepted == 0 {
            return Err(Error::Sampler(format!(
                "no proposal accepted during {} burn-in steps; reduce step_size (currently {})",
                cfg.burn_in, cfg.step_size
            )));
        }
        if it >= cfg.burn_in {
            samples.push(x.clone());
        }
    }
    if accepted == 0 {
        return Err(Error::Sampler(format!("no proposal accepted; reduce step_size (currently {})", cfg.step_size)));
    }
    Ok(HmcResult { samples, acceptance_rate: accepted as f64 / total as f64, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{Expert, ExpertDensity, PoeTarget, Transformation};
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn std_normal() -> PoeTarget {
        let e = Expert::new("n", Transformation::JointSubset { indices: vec![0] }, ExpertDensity::isotropic(v(&[0.0]), 1.0).unwrap());
        PoeTarget::new(1, None, vec![e], vec![]).unwrap()
    }

    #[test]
    fn leapfrog_at_rest_in_flat_field() {
        let x = v(&[0.4, -1.0]);
        let (x2, p2) = leapfrog(&x, &v(&[0.0, 0.0]), |y| DVector::zeros(y.len()), 0.1, 7, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(x2, x);
        assert_eq!(p2, v(&[0.0, 0.0]));
    }

    #[test]
    fn leapfrog_energy_drift_and_reversibility() {
        let grad = |y: &DVector<f64>| -y.clone();
        let inv = v(&[1.0]);
        for k in 0..16 {
            let a = k as f64 * std::f64::consts::PI / 8.0;
            // unit energy: ½x² + ½p² = 1
            let (x0, p0) = (v(&[2f64.sqrt() * a.cos()]), v(&[2f64.sqrt() * a.sin()]));
            let (x1, p1) = leapfrog(&x0, &p0, grad, 0.1, 10, &inv).unwrap();
            let h = |x: &DVector<f64>, p: &DVector<f64>| 0.5 * x.norm_squared() + 0.5 * p.norm_squared();
            assert!((h(&x1, &p1) - h(&x0, &p0)).abs() < 1e-2);
            let (xb, pb) = leapfrog(&x1, &(-p1), grad, 0.1, 10, &inv).unwrap();
            assert!((xb - &x0).norm() < 1e-8);
            assert!((-pb - &p0).norm() < 1e-8);
        }
    }

    #[test]
    fn leapfrog_flags_divergence() {
        let out = leapfrog(&v(&[0.0]), &v(&[1.0]), |y| if y[0] > 0.05 { v(&[f64::NAN]) } else { v(&[0.0]) }, 0.1, 5, &v(&[1.0]));
        assert!(out.is_none());
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = HmcConfig { step_size: 0.02, leapfrog_steps: 10, samples: 20_000, burn_in: 500, seed: 1, ..Default::default() };
        let r = hmc_chain(&std_normal(), &cfg, &v(&[0.5])).unwrap();
        let n = r.samples.len() as f64;
        let m = r.samples.iter().map(|s| s[0]).sum::<f64>() / n;
        let var = r.samples.iter().map(|s| (s[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(m.abs() < 0.05, "{m}");
        assert!((0.9..=1.1).contains(&var), "{var}");
        assert!(r.acceptance_rate > 0.0 && r.acceptance_rate <= 1.0);
    }

    #[test]
    fn chain_is_reproducible_and_replayable() {
        let cfg = HmcConfig { step_size: 0.05, leapfrog_steps: 8, samples: 500, burn_in: 50, seed: 7, ..Default::default() };
        let a = hmc_chain(&std_normal(), &cfg, &v(&[0.0])).unwrap();
        let b = hmc_chain(&std_normal(), &cfg, &v(&[0.0])).unwrap();
        assert_eq!(a, b);
        for rec in &a.records {
            assert_eq!(rec.accepted, rec.uniform.ln() < rec.log_ratio);
        }
        // rejected steps leave the state unchanged
        for (i, rec) in a.records.iter().enumerate().skip(cfg.burn_in + 1) {
            let j = i - cfg.burn_in;
            if !rec.accepted {
                assert_eq!(a.samples[j], a.samples[j - 1]);
            }
        }
        let total = a.records.iter().filter(|r| r.accepted).count() as f64 / a.records.len() as f64;
        assert_relative_eq!(total, a.acceptance_rate);
    }

    #[test]
    fn zero_acceptance_is_an_error() {
        let cfg = HmcConfig { step_size: 50.0, leapfrog_steps: 20, samples: 10, burn_in: 20, seed: 1, ..Default::default() };
        let err = hmc_chain(&std_normal(), &cfg, &v(&[0.3])).unwrap_err();
        assert!(err.to_string().contains("step_size"), "{err}");
    }

    #[test]
    fn transitions_are_balanced() {
        let cfg = HmcConfig { step_size: 0.05, leapfrog_steps: 5, samples: 100_000, burn_in: 100, seed: 3, ..Default::default() };
        let r = hmc_chain(&std_normal(), &cfg, &v(&[0.0])).unwrap();
        let state = |x: f64| if x < -0.5 { 0 } else if x <= 0.5 { 1 } else { 2 };
        let mut counts = [[0usize; 3]; 3];
        for w in r.samples.windows(2) {
            counts[state(w[0][0])][state(w[1][0])] += 1;
        }
        let n = (r.samples.len() - 1) as f64;
        for i in 0..3 {
            for j in 0..3 {
                let asym = (counts[i][j] as f64 - counts[j][i] as f64).abs() / n;
                assert!(asym < 5e-2, "{i}->{j}: {asym}");
            }
        }
    }
}
