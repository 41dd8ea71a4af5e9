//! Kinematic chains: forward kinematics, analytic Jacobians, center of mass
//! and the iterated pseudo-inverse projection onto a position target.
//!
//! Chains are trees rooted at the origin. Every joint has a parent joint (or
//! the fixed base) and carries one link whose tip is the frame reported by
//! [`KinematicChain::fk_position`]. Planar chains rotate about the out-of-plane
//! axis; serial-3d chains rotate about a per-joint axis followed by a fixed
//! translation. Link masses are lumped at link tips.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};

use crate::error::{invalid, Result};
use crate::linalg::{damped_pinv, PINV_DAMPING};

pub type ConfigVector = DVector<f64>;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub enum ChainKind {
    Planar,
    Serial3d {
        axes: Vec<Vector3<f64>>,
        offsets: Vec<Vector3<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianKind {
    Position,
    Orientation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    kind: ChainKind,
    link_lengths: Vec<f64>,
    link_masses: Vec<f64>,
    joint_limits: Vec<(f64, f64)>,
    parents: Vec<Option<usize>>,
    joint_offsets: Vec<f64>,
}

/// World-frame quantities of every joint for one configuration.
#[derive(Debug, Clone)]
pub struct Frames {
    /// Link-tip rotation.
    pub rot: Vec<Matrix3<f64>>,
    /// Link-tip position.
    pub tip: Vec<Vector3<f64>>,
    /// Joint origin (the parent tip, or the base).
    pub origin: Vec<Vector3<f64>>,
    /// Joint axis in world coordinates.
    pub axis: Vec<Vector3<f64>>,
}

fn check_limits(limits: &[(f64, f64)]) -> Result<()> {
    for (i, (lo, hi)) in limits.iter().enumerate() {
        if !(lo < hi) {
            return Err(invalid(format!("joint {i}: lower limit {lo} must be below upper {hi}")));
        }
    }
    Ok(())
}

fn check_masses(masses: &[f64]) -> Result<()> {
    if let Some(i) = masses.iter().position(|m| !(*m >= 0.0)) {
        return Err(invalid(format!("link {i}: mass must be nonnegative")));
    }
    Ok(())
}

impl KinematicChain {
    /// Serial planar chain; joint `i` is attached to the tip of link `i − 1`.
    pub fn planar(lengths: Vec<f64>, masses: Vec<f64>, limits: Vec<(f64, f64)>) -> Result<Self> {
        let n = lengths.len();
        if n == 0 {
            return Err(invalid("chain needs at least one joint"));
        }
        if masses.len() != n || limits.len() != n {
            return Err(invalid(format!(
                "link_lengths ({n}), link_masses ({}) and joint_limits ({}) must have equal length",
                masses.len(),
                limits.len()
            )));
        }
        if let Some(i) = lengths.iter().position(|l| !(*l > 0.0)) {
            return Err(invalid(format!("link {i}: length must be positive")));
        }
        check_masses(&masses)?;
        check_limits(&limits)?;
        Ok(Self {
            kind: ChainKind::Planar,
            link_lengths: lengths,
            link_masses: masses,
            joint_limits: limits,
            parents: (0..n).map(|i| i.checked_sub(1)).collect(),
            joint_offsets: vec![0.0; n],
        })
    }

    /// Serial 3-D chain; joint `i` rotates about `axes[i]` (parent frame) and
    /// then translates by `offsets[i]` to reach its link tip.
    pub fn serial(
        axes: Vec<[f64; 3]>,
        offsets: Vec<[f64; 3]>,
        masses: Vec<f64>,
        limits: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let n = axes.len();
        if n == 0 {
            return Err(invalid("chain needs at least one joint"));
        }
        if offsets.len() != n || masses.len() != n || limits.len() != n {
            return Err(invalid("axes, offsets, link_masses and joint_limits must have equal length"));
        }
        let axes: Vec<Vector3<f64>> = axes.iter().map(|a| Vector3::from(*a)).collect();
        let offsets: Vec<Vector3<f64>> = offsets.iter().map(|o| Vector3::from(*o)).collect();
        if let Some(i) = axes.iter().position(|a| !(a.norm() > 0.0)) {
            return Err(invalid(format!("joint {i}: rotation axis must be nonzero")));
        }
        let lengths: Vec<f64> = offsets.iter().map(|o| o.norm()).collect();
        if let Some(i) = lengths.iter().position(|l| !(*l > 0.0)) {
            return Err(invalid(format!("link {i}: offset must be nonzero")));
        }
        check_masses(&masses)?;
        check_limits(&limits)?;
        Ok(Self {
            kind: ChainKind::Serial3d {
                axes: axes.into_iter().map(|a| a.normalize()).collect(),
                offsets,
            },
            link_lengths: lengths,
            link_masses: masses,
            joint_limits: limits,
            parents: (0..n).map(|i| i.checked_sub(1)).collect(),
            joint_offsets: vec![0.0; n],
        })
    }

    /// Replace the default serial topology by a tree. Parents must precede
    /// their children.
    pub fn with_parents(mut self, parents: Vec<Option<usize>>) -> Result<Self> {
        if parents.len() != self.joint_count() {
            return Err(invalid("parents must have one entry per joint"));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= i {
                    return Err(invalid(format!("joint {i}: parent {p} must precede it")));
                }
            }
        }
        self.parents = parents;
        Ok(self)
    }

    /// Constant angle added to each planar joint (zero by default).
    pub fn with_joint_offsets(mut self, offsets: Vec<f64>) -> Result<Self> {
        if offsets.len() != self.joint_count() {
            return Err(invalid("joint_offsets must have one entry per joint"));
        }
        if !matches!(self.kind, ChainKind::Planar) && offsets.iter().any(|o| *o != 0.0) {
            return Err(invalid("joint_offsets are only supported on planar chains"));
        }
        self.joint_offsets = offsets;
        Ok(self)
    }

    pub fn joint_count(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn kind(&self) -> &ChainKind {
        &self.kind
    }

    pub fn is_planar(&self) -> bool {
        matches!(self.kind, ChainKind::Planar)
    }

    /// Dimension of positions returned by FK (2 or 3).
    pub fn task_dim(&self) -> usize {
        if self.is_planar() {
            2
        } else {
            3
        }
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    pub fn link_masses(&self) -> &[f64] {
        &self.link_masses
    }

    pub fn joint_limits(&self) -> &[(f64, f64)] {
        &self.joint_limits
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn joint_offsets(&self) -> &[f64] {
        &self.joint_offsets
    }

    pub fn total_mass(&self) -> f64 {
        self.link_masses.iter().sum()
    }

    /// Whether joint `j` moves frame `frame` (ancestor or the joint itself).
    pub fn moves(&self, j: usize, frame: usize) -> bool {
        let mut cur = Some(frame);
        while let Some(c) = cur {
            if c == j {
                return true;
            }
            if c < j {
                return false;
            }
            cur = self.parents[c];
        }
        false
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.joint_count() {
            return Err(invalid(format!(
                "frame index {frame} out of range for a chain with {} joints",
                self.joint_count()
            )));
        }
        Ok(())
    }

    fn check_config(&self, q: &ConfigVector) -> Result<()> {
        if q.len() != self.joint_count() {
            return Err(invalid(format!(
                "configuration has {} entries, chain has {} joints",
                q.len(),
                self.joint_count()
            )));
        }
        Ok(())
    }

    /// Compute all joint frames.
    pub fn frames(&self, q: &ConfigVector) -> Result<Frames> {
        self.check_config(q)?;
        let n = self.joint_count();
        let mut f = Frames {
            rot: Vec::with_capacity(n),
            tip: Vec::with_capacity(n),
            origin: Vec::with_capacity(n),
            axis: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (prot, ppos) = match self.parents[i] {
                Some(p) => (f.rot[p], f.tip[p]),
                None => (Matrix3::identity(), Vector3::zeros()),
            };
            let (local_axis, local_offset) = match &self.kind {
                ChainKind::Planar => (Vector3::z(), Vector3::new(self.link_lengths[i], 0.0, 0.0)),
                ChainKind::Serial3d { axes, offsets } => (axes[i], offsets[i]),
            };
            let angle = q[i] + self.joint_offsets[i];
            let r = Rotation3::from_axis_angle(&Unit::new_unchecked(local_axis), angle);
            let rot = prot * r.matrix();
            f.axis.push(prot * local_axis);
            f.origin.push(ppos);
            f.tip.push(ppos + rot * local_offset);
            f.rot.push(rot);
        }
        Ok(f)
    }

    fn project(&self, v: &Vector3<f64>) -> DVector<f64> {
        DVector::from_iterator(self.task_dim(), v.iter().take(self.task_dim()).cloned())
    }

    /// Position of the tip of link `frame`.
    pub fn fk_position(&self, q: &ConfigVector, frame: usize) -> Result<DVector<f64>> {
        self.check_frame(frame)?;
        let f = self.frames(q)?;
        Ok(self.project(&f.tip[frame]))
    }

    /// Orientation of link `frame` (2×2 for planar chains, 3×3 otherwise).
    pub fn fk_orientation(&self, q: &ConfigVector, frame: usize) -> Result<DMatrix<f64>> {
        self.check_frame(frame)?;
        let f = self.frames(q)?;
        let d = self.task_dim();
        Ok(DMatrix::from_fn(d, d, |i, j| f.rot[frame][(i, j)]))
    }

    /// Planar link angle (sum of ancestor joint angles and offsets).
    pub fn fk_angle(&self, q: &ConfigVector, frame: usize) -> Result<f64> {
        self.check_frame(frame)?;
        self.check_config(q)?;
        if !self.is_planar() {
            return Err(invalid("link angle is only defined for planar chains"));
        }
        Ok((0..=frame)
            .filter(|j| self.moves(*j, frame))
            .map(|j| q[j] + self.joint_offsets[j])
            .sum())
    }

    /// Analytic Jacobian of the position (rows = task dim) or orientation
    /// (planar: 1 row of link-angle rates; serial: 3 rows of world angular
    /// velocity) of link `frame`.
    pub fn fk_jacobian(&self, q: &ConfigVector, frame: usize, kind: JacobianKind) -> Result<DMatrix<f64>> {
        self.check_frame(frame)?;
        let f = self.frames(q)?;
        Ok(self.jacobian_from_frames(&f, frame, kind))
    }

    pub(crate) fn jacobian_from_frames(&self, f: &Frames, frame: usize, kind: JacobianKind) -> DMatrix<f64> {
        let n = self.joint_count();
        let d = self.task_dim();
        let rows = match (kind, self.is_planar()) {
            (JacobianKind::Position, _) => d,
            (JacobianKind::Orientation, true) => 1,
            (JacobianKind::Orientation, false) => 3,
        };
        let mut jac = DMatrix::zeros(rows, n);
        for j in 0..n {
            if !self.moves(j, frame) {
                continue;
            }
            match kind {
                JacobianKind::Position => {
                    let col = f.axis[j].cross(&(f.tip[frame] - f.origin[j]));
                    for r in 0..rows {
                        jac[(r, j)] = col[r];
                    }
                }
                JacobianKind::Orientation => {
                    if self.is_planar() {
                        jac[(0, j)] = 1.0;
                    } else {
                        for r in 0..3 {
                            jac[(r, j)] = f.axis[j][r];
                        }
                    }
                }
            }
        }
        jac
    }

    /// Mass-weighted average of link-tip positions.
    pub fn com(&self, q: &ConfigVector) -> Result<DVector<f64>> {
        let m = self.total_mass();
        if !(m > 0.0) {
            return Err(invalid("center of mass needs a positive total mass"));
        }
        let f = self.frames(q)?;
        let c = f
            .tip
            .iter()
            .zip(&self.link_masses)
            .fold(Vector3::zeros(), |acc, (p, w)| acc + p * *w)
            / m;
        Ok(self.project(&c))
    }

    pub fn com_jacobian(&self, q: &ConfigVector) -> Result<DMatrix<f64>> {
        let m = self.total_mass();
        if !(m > 0.0) {
            return Err(invalid("center of mass needs a positive total mass"));
        }
        let f = self.frames(q)?;
        Ok(self.com_jacobian_from_frames(&f))
    }

    pub(crate) fn com_jacobian_from_frames(&self, f: &Frames) -> DMatrix<f64> {
        let m = self.total_mass();
        let mut jac = DMatrix::zeros(self.task_dim(), self.joint_count());
        for (i, w) in self.link_masses.iter().enumerate() {
            if *w > 0.0 {
                jac += self.jacobian_from_frames(f, i, JacobianKind::Position) * (*w / m);
            }
        }
        jac
    }

    /// Apply `steps` damped pseudo-inverse updates
    /// `x ← x + J(x)†(target − F(x))` towards a position target of `frame`.
    ///
    /// A step that would increase the residual is halved until it does not,
    /// so the task residual is nonincreasing along the iteration.
    pub fn ik_project(&self, q: &ConfigVector, target: &DVector<f64>, steps: usize, frame: usize) -> Result<ConfigVector> {
        self.check_frame(frame)?;
        self.check_config(q)?;
        if target.len() != self.task_dim() {
            return Err(invalid(format!(
                "IK target has dimension {}, expected {}",
                target.len(),
                self.task_dim()
            )));
        }
        let mut x = q.clone();
        let mut f = self.frames(&x)?;
        let mut residual = target - self.project(&f.tip[frame]);
        for _ in 0..steps {
            let jac = self.jacobian_from_frames(&f, frame, JacobianKind::Position);
            let step = damped_pinv(&jac, PINV_DAMPING) * &residual;
            // Step halving: the full Gauss-Newton step may overshoot far from
            // the solution or near singular configurations.
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let candidate = &x + &step * scale;
                let cf = self.frames(&candidate)?;
                let cr = target - self.project(&cf.tip[frame]);
                if cr.norm() <= residual.norm() {
                    accepted = Some((candidate, cf, cr));
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some((cx, cf, cr)) => {
                    x = cx;
                    f = cf;
                    residual = cr;
                }
                None => break,
            }
        }
        Ok(x)
    }
}
