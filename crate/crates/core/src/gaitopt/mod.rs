//! Periodic multi-step gait optimization as a sparse nonlinear program over
//! actuated Bezier coefficients plus per-boundary impact variables.
//!
//! Stance and loop-closure equations never appear as constraint rows: every
//! collocation node solves them exactly by inverse kinematics and constrained
//! inverse dynamics, so the decision vector only carries the actuated curve
//! of each step and, per step boundary, the post-impact velocity and contact
//! impulse. The rows that remain are box inequalities (joint limits, torque
//! limits, friction cones, torso posture, swing-foot clearance) and the
//! equalities tying consecutive steps together (swing-foot start/end poses,
//! actuated continuity, and the plastic-impact momentum balance).

mod assemble;

use crate::closure::{cid, solve_ik, CidPoint, ConstraintError, ConstraintSet, IkSurrogate, Stance};
use crate::dynamics::RobotDyn;
use crate::model::{BaseCoords, Side};
use crate::solver::{Evaluation, NlpProblem};
use crate::spatial::Frame;
use crate::trajectory::{bernstein_weights, chebyshev_lobatto, DecisionLayout};
use nalgebra::{DVector, Matrix3, Vector3};
use std::collections::HashMap;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaitError {
    #[error("gait config: {0}")]
    BadConfig(String),
    #[error("an odd step count closes the cycle on the other leg; enable symmetric mode")]
    OddSteps,
    #[error("multi-step gaits must be periodic")]
    NonPeriodicMultiStep,
    #[error("model is unsuitable for gait optimization: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Gait definition and optimization weights. `parse` reads the line-based
/// `key = value` format; every key has a default.
#[derive(Clone, Debug)]
pub struct GaitConfig {
    /// Steps per optimized cycle.
    pub steps: usize,
    /// Duration of one step, seconds.
    pub duration: f64,
    /// Collocation nodes per step (Chebyshev–Lobatto points).
    pub nodes: usize,
    /// Bezier degree of the actuated curves.
    pub degree: usize,
    /// Forward travel of the stance point per step, meters.
    pub step_length: f64,
    /// Minimum swing-sole height at mid-step.
    pub apex_height: f64,
    /// Lower bound on base height (0 disables).
    pub torso_z_min: f64,
    /// Bound on |roll| and |pitch| of the base.
    pub torso_tilt_max: f64,
    /// Weight of the mean torque magnitude.
    pub w_effort: f64,
    /// Weight of the initial actuated rate of each step.
    pub w_rate: f64,
    /// Weight of the initial actuated acceleration of each step.
    pub w_accel: f64,
    /// Stance side of the first step.
    pub first_side: Side,
    /// Close the cycle through the model's left/right swap, so the optimized
    /// steps repeat mirrored. Required when `steps` is odd.
    pub symmetric: bool,
    /// Bound the torsional contact moment on both sides instead of one.
    pub symmetric_torsion: bool,
    /// Connect the last step back to the first with an impact boundary.
    pub periodic: bool,
    /// Optional equality pinning the actuated posture at the start of the
    /// first step.
    pub pin_initial_qa: Option<Vec<f64>>,
}

impl Default for GaitConfig {
    fn default() -> Self {
        GaitConfig {
            steps: 2,
            duration: 0.4,
            nodes: 11,
            degree: 5,
            step_length: 0.0,
            apex_height: 0.03,
            torso_z_min: 0.0,
            torso_tilt_max: 0.05236,
            w_effort: 1.0,
            w_rate: 0.1,
            w_accel: 1e-3,
            first_side: Side::Left,
            symmetric: false,
            symmetric_torsion: false,
            periodic: true,
            pin_initial_qa: None,
        }
    }
}

impl GaitConfig {
    pub fn parse(text: &str) -> Result<GaitConfig, GaitError> {
        let mut cfg = GaitConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| GaitError::BadConfig(format!("line {}: {}", ln + 1, what));
            let (key, val) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad("expected key = value"))?;
            let num = || -> Result<f64, GaitError> {
                val.parse::<f64>()
                    .map_err(|_| bad(&format!("bad number {val:?}")))
            };
            let int = || -> Result<usize, GaitError> {
                val.parse::<usize>()
                    .map_err(|_| bad(&format!("bad count {val:?}")))
            };
            let flag = || -> Result<bool, GaitError> {
                val.parse::<bool>()
                    .map_err(|_| bad(&format!("bad flag {val:?}")))
            };
            match key {
                "steps" => cfg.steps = int()?,
                "duration" => cfg.duration = num()?,
                "nodes" => cfg.nodes = int()?,
                "degree" => cfg.degree = int()?,
                "step_length" => cfg.step_length = num()?,
                "apex_height" => cfg.apex_height = num()?,
                "torso_z_min" => cfg.torso_z_min = num()?,
                "torso_tilt_max" => cfg.torso_tilt_max = num()?,
                "w_effort" => cfg.w_effort = num()?,
                "w_rate" => cfg.w_rate = num()?,
                "w_accel" => cfg.w_accel = num()?,
                "first_side" => {
                    cfg.first_side = val.parse().map_err(|e: String| bad(&e))?;
                }
                "symmetric" => cfg.symmetric = flag()?,
                "symmetric_torsion" => cfg.symmetric_torsion = flag()?,
                "periodic" => cfg.periodic = flag()?,
                "pin_initial_qa" => {
                    let qa: Result<Vec<f64>, _> =
                        val.split(',').map(|s| s.trim().parse::<f64>()).collect();
                    cfg.pin_initial_qa =
                        Some(qa.map_err(|_| bad(&format!("bad vector {val:?}")))?);
                }
                _ => return Err(bad(&format!("unknown key {key:?}"))),
            }
        }
        Ok(cfg)
    }
}

/// Contact-patch geometry needed by the friction-cone rows, with the stance
/// orientation frozen to the (constant) target so the sole-frame wrench is a
/// linear map of the world wrench.
#[derive(Clone, Debug)]
pub(crate) struct ConeGeom {
    pub rot: Matrix3<f64>,
    pub mu: f64,
    pub gamma: f64,
    /// Half-extents of the support rectangle.
    pub ha: f64,
    pub hb: f64,
}

/// The gait NLP over one cycle. Implements [`NlpProblem`].
pub struct GaitProblem<'m> {
    pub(crate) rd: &'m RobotDyn,
    pub(crate) cfg: GaitConfig,
    pub(crate) layout: DecisionLayout,
    pub(crate) grid: Vec<f64>,
    pub(crate) wts: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>,
    pub(crate) stances: Vec<Stance>,
    pub(crate) css: Vec<ConstraintSet>,
    /// Swing-sole pose rows at the start and end of each step.
    pub(crate) swing_sets: Vec<(ConstraintSet, ConstraintSet)>,
    /// Swing-foot body and sole origin (for clearance rows).
    pub(crate) swing_sole: Vec<(usize, Vector3<f64>)>,
    pub(crate) cone: Vec<ConeGeom>,
    pub(crate) apex_node: usize,
    pub(crate) clearance: Vec<usize>,
    /// Limited non-base coordinates: (index, lower, upper).
    pub(crate) limit_rows: Vec<(usize, f64, f64)>,
    /// Torque bounds per actuated coordinate.
    pub(crate) torque_lims: Vec<(f64, f64)>,
    /// Actuated position of a full coordinate index.
    pub(crate) a_pos: HashMap<usize, usize>,
    pub(crate) base: BaseCoords,
    /// Actuated-to-actuated leg swap at the wrap: entry `k` holds the
    /// destination index and sign. Identity when the wrap does not mirror.
    pub(crate) swap_to: Vec<(usize, f64)>,
    pub(crate) wrap_swap: bool,
    pub(crate) node_block: usize,
    pub(crate) swing_block: usize,
    pub(crate) step_block: usize,
    pub(crate) n_cons: usize,
    pub(crate) pattern: Vec<(usize, usize)>,
    pub(crate) pat_idx: HashMap<(usize, usize), usize>,
    pub(crate) warm: Vec<Vec<Mutex<DVector<f64>>>>,
    /// Stance solutions of the most recent evaluation, promoted to `warm`
    /// when the solver accepts the evaluated point.
    pub(crate) pending: Vec<Vec<Mutex<DVector<f64>>>>,
    pub(crate) q_ref: Vec<DVector<f64>>,
    pub(crate) threads: usize,
}

impl<'m> GaitProblem<'m> {
    pub fn new(
        rd: &'m RobotDyn,
        cfg: GaitConfig,
        sur: &IkSurrogate,
    ) -> Result<GaitProblem<'m>, GaitError> {
        let model = &rd.model;
        let base = model
            .base_coords()
            .ok_or(GaitError::Unsupported("needs a floating base"))?;
        if !model.fully_actuated_in_stance {
            return Err(GaitError::Unsupported(
                "needs as many constraint rows in stance as unactuated coordinates",
            ));
        }
        if model.contact(Side::Left).is_none() || model.contact(Side::Right).is_none() {
            return Err(GaitError::Unsupported("needs contact patches on both feet"));
        }
        let l_steps = cfg.steps;
        if l_steps == 0 {
            return Err(GaitError::BadConfig("steps must be positive".into()));
        }
        if cfg.degree < 3 {
            return Err(GaitError::BadConfig(
                "degree must be at least 3 so boundary rows touch distinct coefficients".into(),
            ));
        }
        if cfg.nodes < 5 {
            return Err(GaitError::BadConfig("at least 5 nodes are needed".into()));
        }
        if !cfg.periodic && l_steps > 1 {
            return Err(GaitError::NonPeriodicMultiStep);
        }
        if cfg.symmetric && model.symmetry.is_none() {
            return Err(GaitError::Unsupported("no left/right swap table"));
        }
        if l_steps % 2 == 1 && cfg.periodic && !cfg.symmetric {
            return Err(GaitError::OddSteps);
        }
        if let Some(pin) = &cfg.pin_initial_qa {
            if pin.len() != model.na() {
                return Err(GaitError::BadConfig(format!(
                    "pin_initial_qa has {} entries, expected {}",
                    pin.len(),
                    model.na()
                )));
            }
        }

        // Flat sole targets: lateral placement from the zero-posture foot
        // positions, advanced by one step length per step.
        let nominal = |side: Side| -> Frame {
            let patch = model.contact(side).unwrap();
            let q0 = sur.guess(rd, &DVector::zeros(model.na()), None);
            let st = rd.skel.fk_pos(&q0);
            let sole = st.body_frame(&rd.skel, patch.body).compose(&patch.frame);
            Frame::new(
                Matrix3::identity(),
                Vector3::new(sole.pos.x, sole.pos.y, 0.0),
            )
        };
        let advance = |f: &Frame, k: f64| -> Frame {
            Frame::new(f.rot, f.pos + Vector3::new(k * cfg.step_length, 0.0, 0.0))
        };

        let mut stances = Vec::new();
        let mut css = Vec::new();
        let mut swing_sets = Vec::new();
        let mut swing_sole = Vec::new();
        let mut cone = Vec::new();
        for l in 0..l_steps {
            let side = if l % 2 == 0 {
                cfg.first_side
            } else {
                cfg.first_side.other()
            };
            let stance = Stance {
                side,
                target: advance(&nominal(side), l as f64),
            };
            css.push(ConstraintSet::new(model, Some(&stance))?);
            let sw = side.other();
            let sw_nom = nominal(sw);
            swing_sets.push((
                ConstraintSet::sole_pose(model, sw, &advance(&sw_nom, l as f64 - 1.0))?,
                ConstraintSet::sole_pose(model, sw, &advance(&sw_nom, l as f64 + 1.0))?,
            ));
            let sw_patch = model.contact(sw).unwrap();
            swing_sole.push((sw_patch.body, sw_patch.frame.pos));
            let patch = model.contact(side).unwrap();
            cone.push(ConeGeom {
                rot: stance.target.rot,
                mu: patch.mu,
                gamma: patch.gamma,
                ha: 0.5 * patch.la,
                hb: 0.5 * patch.lb,
            });
            stances.push(stance);
        }
        if css[0].n_rows() != model.nu() {
            return Err(GaitError::Unsupported(
                "stance does not square the constraint system",
            ));
        }

        let a_pos: HashMap<usize, usize> = model
            .actuated_idx()
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, k))
            .collect();
        let mut swap_to: Vec<(usize, f64)> = (0..model.na()).map(|k| (k, 1.0)).collect();
        let wrap_swap = cfg.symmetric && cfg.periodic;
        if wrap_swap {
            let table = model.symmetry.as_ref().unwrap();
            for (k, &i) in model.actuated_idx().iter().enumerate() {
                let p = table.perm[i];
                let m = *a_pos
                    .get(&p)
                    .ok_or(GaitError::Unsupported("swap table mixes actuation"))?;
                swap_to[k] = (m, table.sign[i]);
            }
        }

        let grid = chebyshev_lobatto(cfg.nodes);
        let wts: Vec<_> = grid
            .iter()
            .map(|&s| bernstein_weights(cfg.degree, s))
            .collect();
        let apex_node = grid
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let (da, db) = ((*a - 0.5).abs(), (*b - 0.5).abs());
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        let clearance: Vec<usize> = (2..cfg.nodes.saturating_sub(2)).collect();

        let limit_rows: Vec<(usize, f64, f64)> = model
            .coords()
            .iter()
            .enumerate()
            .filter(|(i, c)| {
                let b = &base;
                c.limits.is_some()
                    && ![b.x, b.y, b.z, b.yaw, b.pitch, b.roll].contains(i)
            })
            .map(|(i, c)| {
                let (lo, hi) = c.limits.unwrap();
                (i, lo, hi)
            })
            .collect();
        let torque_lims: Vec<(f64, f64)> = model
            .actuated_idx()
            .iter()
            .map(|&i| match model.coords()[i].taumax {
                Some(t) => (-t, t),
                None => (f64::NEG_INFINITY, f64::INFINITY),
            })
            .collect();

        let layout = DecisionLayout {
            steps: l_steps,
            degree: cfg.degree,
            na: model.na(),
            nq: model.nq(),
            nu: model.nu(),
            reset: cfg.periodic,
        };

        let node_block = limit_rows.len() + model.na() + 7 + 3;
        let swing_block = 6 + 6 + 1 + clearance.len();
        let reset_block = if layout.reset {
            model.nq() + model.nu() + 2 * model.na() + 7
        } else {
            0
        };
        let step_block = cfg.nodes * node_block + swing_block + reset_block;
        let pin_rows = if cfg.pin_initial_qa.is_some() {
            model.na()
        } else {
            0
        };
        let n_cons = l_steps * step_block + pin_rows;

        // Reference configuration and warm-start slots: the standing (or
        // pinned) posture solved against each step's stance target.
        let qa_ref = match &cfg.pin_initial_qa {
            Some(p) => DVector::from_column_slice(p),
            None => DVector::zeros(model.na()),
        };
        let mut q_ref = Vec::new();
        let mut warm = Vec::new();
        let mut pending = Vec::new();
        for l in 0..l_steps {
            let guess = sur.guess(rd, &qa_ref, Some(&stances[l]));
            let sol = solve_ik(rd, &css[l], &qa_ref, &guess, 1e-10)?;
            warm.push(
                (0..cfg.nodes)
                    .map(|_| Mutex::new(sol.q.clone()))
                    .collect::<Vec<_>>(),
            );
            pending.push(
                (0..cfg.nodes)
                    .map(|_| Mutex::new(sol.q.clone()))
                    .collect::<Vec<_>>(),
            );
            q_ref.push(sol.q);
        }

        let mut gp = GaitProblem {
            rd,
            cfg,
            layout,
            grid,
            wts,
            stances,
            css,
            swing_sets,
            swing_sole,
            cone,
            apex_node,
            clearance,
            limit_rows,
            torque_lims,
            a_pos,
            base,
            swap_to,
            wrap_swap,
            node_block,
            swing_block,
            step_block,
            n_cons,
            pattern: Vec::new(),
            pat_idx: HashMap::new(),
            warm,
            pending,
            q_ref,
            threads: 1,
        };
        gp.pattern = assemble::pattern(&gp);
        gp.pat_idx = gp
            .pattern
            .iter()
            .enumerate()
            .map(|(i, &rc)| (rc, i))
            .collect();
        assert_eq!(
            gp.pattern.len(),
            gp.pat_idx.len(),
            "duplicate jacobian pattern entry"
        );
        Ok(gp)
    }

    pub fn config(&self) -> &GaitConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &DecisionLayout {
        &self.layout
    }

    /// Collocation grid in normalized step time.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn stance(&self, l: usize) -> &Stance {
        &self.stances[l]
    }

    /// Reference (standing) configuration solved against step `l`'s stance.
    pub fn q_ref(&self, l: usize) -> &DVector<f64> {
        &self.q_ref[l]
    }

    /// Worker threads used inside an evaluation (collocation nodes are
    /// independent).
    pub fn set_threads(&mut self, n: usize) {
        self.threads = n.max(1);
    }

    /// Standing start: every control point at the reference posture, zero
    /// boundary velocities and impulses.
    pub fn initial_guess(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.layout.n_vars());
        let qa_ref = match &self.cfg.pin_initial_qa {
            Some(p) => DVector::from_column_slice(p),
            None => DVector::zeros(self.layout.na),
        };
        for l in 0..self.layout.steps {
            for r in 0..=self.layout.degree {
                y.rows_mut(self.layout.coeff(l, r).start, self.layout.na)
                    .copy_from(&qa_ref);
            }
        }
        y
    }

    /// Row start of collocation node `i` of step `l`.
    pub(crate) fn node_row(&self, l: usize, i: usize) -> usize {
        l * self.step_block + i * self.node_block
    }

    pub(crate) fn swing_row(&self, l: usize) -> usize {
        l * self.step_block + self.cfg.nodes * self.node_block
    }

    pub(crate) fn reset_row(&self, l: usize) -> usize {
        self.swing_row(l) + self.swing_block
    }

    pub(crate) fn pin_row(&self) -> usize {
        self.layout.steps * self.step_block
    }

    /// Full reconstructed state at normalized time `s` of step `l`, solving
    /// the stance kinematics from `q_guess`.
    pub fn state_at(
        &self,
        y: &DVector<f64>,
        l: usize,
        s: f64,
        q_guess: &DVector<f64>,
    ) -> Result<CidPoint, ConstraintError> {
        let c = self.layout.coeff_matrix(y, l);
        let (w0, w1, w2) = bernstein_weights(self.layout.degree, s);
        let t = self.cfg.duration;
        let qa = c.tr_mul(&w0);
        let qda = c.tr_mul(&w1) / t;
        let qdda = c.tr_mul(&w2) / (t * t);
        let sol = solve_ik(self.rd, &self.css[l], &qa, q_guess, 1e-10)?;
        cid(self.rd, &self.css[l], &sol.q, &qda, &qdda)
    }

    /// Post-impact velocity and impulse decision values of boundary `l`.
    pub fn reset_values(&self, y: &DVector<f64>, l: usize) -> (DVector<f64>, DVector<f64>) {
        let qd = y.rows(self.layout.reset_qd(l).start, self.layout.nq);
        let lam = y.rows(self.layout.reset_lambda(l).start, self.layout.nu);
        (qd.into_owned(), lam.into_owned())
    }

    /// Worst distance of the constraint values outside their bounds.
    pub fn violation(&self, y: &DVector<f64>) -> Result<f64, String> {
        let ev = self.eval_all(y, false)?;
        let (lo, hi) = self.bounds();
        let mut v: f64 = 0.0;
        for r in 0..ev.cons.len() {
            v = v.max(lo[r] - ev.cons[r]).max(ev.cons[r] - hi[r]);
        }
        Ok(v)
    }
}

impl NlpProblem for GaitProblem<'_> {
    fn n_vars(&self) -> usize {
        self.layout.n_vars()
    }

    fn n_cons(&self) -> usize {
        self.n_cons
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        assemble::bounds(self)
    }

    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        self.pattern.clone()
    }

    fn eval_all(&self, y: &DVector<f64>, want_grad: bool) -> Result<Evaluation, String> {
        assemble::assemble(self, y, want_grad)
    }

    /// Loose boxes on the control points: the joint-limit interval widened by
    /// half its range (at least 0.5 rad). The node rows enforce the true
    /// limits on the trajectory values; these boxes only keep line-search
    /// probes inside the region where the stance kinematics can be solved.
    fn var_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.layout.n_vars();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        let coords = self.rd.model.coords();
        let act = self.rd.model.actuated_idx();
        for l in 0..self.layout.steps {
            for r in 0..=self.layout.degree {
                let start = self.layout.coeff(l, r).start;
                for (k, &ci) in act.iter().enumerate() {
                    if let Some((a, b)) = coords[ci].limits {
                        let m = (0.5 * (b - a)).max(0.5);
                        lo[start + k] = a - m;
                        hi[start + k] = b + m;
                    }
                }
            }
        }
        Some((lo, hi))
    }

    fn initial_point(&self) -> DVector<f64> {
        self.initial_guess()
    }

    /// Promotes the stance solutions of the accepted point's evaluation
    /// (parked in `pending` by `eval_all`) to the warm-start slots.
    fn note_accept(&self, _y: &DVector<f64>) {
        for l in 0..self.layout.steps {
            for i in 0..self.cfg.nodes {
                self.warm[l][i]
                    .lock()
                    .unwrap()
                    .copy_from(&self.pending[l][i].lock().unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::fit_ik;
    use crate::model::bundled::bundled_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dyn_of(name: &str) -> RobotDyn {
        RobotDyn::new(bundled_model(name).unwrap()).unwrap()
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let cfg = GaitConfig::parse(
            "# walking\n\
             steps = 4\n\
             duration = 0.35   # seconds\n\
             step_length = 0.08\n\
             first_side = right\n\
             symmetric = true\n\
             pin_initial_qa = 0.1, -0.2, 0.3\n",
        )
        .unwrap();
        assert_eq!(cfg.steps, 4);
        assert_eq!(cfg.duration, 0.35);
        assert_eq!(cfg.step_length, 0.08);
        assert_eq!(cfg.first_side, Side::Right);
        assert!(cfg.symmetric);
        assert_eq!(cfg.pin_initial_qa.as_deref(), Some(&[0.1, -0.2, 0.3][..]));
        // defaults survive
        assert_eq!(cfg.nodes, 11);
        assert!(cfg.periodic);

        let err = GaitConfig::parse("stride = 2\n").unwrap_err();
        assert!(matches!(err, GaitError::BadConfig(_)), "{err}");
        let err = GaitConfig::parse("steps\n").unwrap_err();
        assert!(matches!(err, GaitError::BadConfig(_)), "{err}");
    }

    fn expect_err(r: Result<GaitProblem, GaitError>) -> GaitError {
        match r {
            Err(e) => e,
            Ok(_) => panic!("expected a construction error"),
        }
    }

    #[test]
    fn construction_rejects_unsuitable_setups() {
        let rd = dyn_of("minibiped");
        let sur = IkSurrogate::empty();

        let mut cfg = GaitConfig::default();
        cfg.steps = 3;
        let err = expect_err(GaitProblem::new(&rd, cfg, &sur));
        assert!(matches!(err, GaitError::OddSteps), "{err}");

        let mut cfg = GaitConfig::default();
        cfg.periodic = false;
        let err = expect_err(GaitProblem::new(&rd, cfg, &sur));
        assert!(matches!(err, GaitError::NonPeriodicMultiStep), "{err}");

        let mut cfg = GaitConfig::default();
        cfg.pin_initial_qa = Some(vec![0.0; 3]);
        let err = expect_err(GaitProblem::new(&rd, cfg, &sur));
        assert!(matches!(err, GaitError::BadConfig(_)), "{err}");

        let fb = dyn_of("fourbar");
        let err = expect_err(GaitProblem::new(&fb, GaitConfig::default(), &sur));
        assert!(matches!(err, GaitError::Unsupported(_)), "{err}");
    }

    /// Standing still at the reference posture satisfies every equality row
    /// and every box row except the swing-apex height and the stance-cone
    /// rows (a static single-leg stance puts the center of pressure outside
    /// the foot), which is exactly what the optimizer must repair.
    #[test]
    fn standing_seed_violates_only_apex_and_cone_rows() {
        let rd = dyn_of("minibiped");
        let sur = fit_ik(&rd, 5).unwrap();
        let cfg = GaitConfig {
            nodes: 7,
            ..GaitConfig::default()
        };
        let gp = GaitProblem::new(&rd, cfg, &sur).unwrap();
        let y0 = gp.initial_guess();
        let ev = gp.eval_all(&y0, false).unwrap();
        assert_eq!(ev.cons.len(), gp.n_cons());
        let (lo, hi) = gp.bounds();

        let mut cone_rows_idx = vec![false; gp.n_cons()];
        let mut apex_rows_idx = vec![false; gp.n_cons()];
        for l in 0..gp.layout.steps {
            for i in 0..gp.cfg.nodes {
                let r0 = gp.node_row(l, i) + gp.limit_rows.len() + gp.layout.na;
                for r in r0..r0 + 7 {
                    cone_rows_idx[r] = true;
                }
            }
            apex_rows_idx[gp.swing_row(l) + 12] = true;
        }
        for r in 0..gp.n_cons() {
            let slack = (lo[r] - ev.cons[r]).max(ev.cons[r] - hi[r]);
            if apex_rows_idx[r] {
                assert!(
                    (slack - gp.cfg.apex_height).abs() < 1e-8,
                    "apex row {r}: slack {slack}"
                );
            } else if !cone_rows_idx[r] {
                assert!(slack < 1e-7, "row {r} out of bounds by {slack}");
            }
        }
        // The cone violation is the static CoP outside the lateral foot
        // strip; normal force itself is fine.
        let viol = gp.violation(&y0).unwrap();
        assert!(viol > 1.0, "expected a clear cone violation, got {viol}");
    }

    fn fd_check(gp: &GaitProblem, y: &DVector<f64>, label: &str) {
        let ev = gp.eval_all(y, true).unwrap();
        let pat = gp.jacobian_pattern();
        assert_eq!(ev.jac.len(), pat.len());
        let n = gp.n_vars();
        let h = 1e-6;
        let cols: Vec<usize> = (0..n).step_by((n / 16).max(1)).collect();
        for &c in &cols {
            let mut yp = y.clone();
            yp[c] += h;
            let mut ym = y.clone();
            ym[c] -= h;
            let ep = gp.eval_all(&yp, false).unwrap();
            let em = gp.eval_all(&ym, false).unwrap();
            let fd_cost = (ep.cost - em.cost) / (2.0 * h);
            assert!(
                (ev.cost_grad[c] - fd_cost).abs() <= 1e-5 * fd_cost.abs().max(1.0),
                "{label}: cost grad col {c}: {} vs fd {fd_cost}",
                ev.cost_grad[c]
            );
            let mut col = vec![0.0; gp.n_cons()];
            for (i, &(r, cc)) in pat.iter().enumerate() {
                if cc == c {
                    col[r] += ev.jac[i];
                }
            }
            for r in 0..gp.n_cons() {
                let fd = (ep.cons[r] - em.cons[r]) / (2.0 * h);
                assert!(
                    (col[r] - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "{label}: jac ({r},{c}): {} vs fd {fd}",
                    col[r]
                );
            }
        }
    }

    fn perturbed_seed(gp: &GaitProblem, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = gp.initial_guess();
        let lay = gp.layout();
        for l in 0..lay.steps {
            for r in lay.coeffs(l) {
                y[r] += rng.gen_range(-0.03..0.03);
            }
            if lay.reset {
                for r in lay.reset_qd(l) {
                    y[r] += rng.gen_range(-0.05..0.05);
                }
                for r in lay.reset_lambda(l) {
                    y[r] += rng.gen_range(-2.0..2.0);
                }
            }
        }
        y
    }

    #[test]
    fn gradients_match_finite_differences() {
        let rd = dyn_of("minibiped");
        let sur = fit_ik(&rd, 6).unwrap();
        let cfg = GaitConfig {
            nodes: 5,
            step_length: 0.04,
            torso_z_min: 0.4,
            ..GaitConfig::default()
        };
        let gp = GaitProblem::new(&rd, cfg, &sur).unwrap();
        let y = perturbed_seed(&gp, 61);
        fd_check(&gp, &y, "two plain steps");
    }

    #[test]
    fn gradients_match_finite_differences_at_a_mirrored_wrap() {
        let rd = dyn_of("minibiped");
        let sur = fit_ik(&rd, 7).unwrap();
        let cfg = GaitConfig {
            steps: 1,
            nodes: 5,
            step_length: 0.03,
            symmetric: true,
            pin_initial_qa: Some(vec![0.0; rd.model.na()]),
            ..GaitConfig::default()
        };
        let gp = GaitProblem::new(&rd, cfg, &sur).unwrap();
        let y = perturbed_seed(&gp, 62);
        fd_check(&gp, &y, "mirrored single step");
    }

    #[test]
    fn a_few_outer_iterations_shrink_the_infeasibility() {
        let rd = dyn_of("minibiped");
        let sur = fit_ik(&rd, 8).unwrap();
        let cfg = GaitConfig {
            nodes: 7,
            torso_z_min: 0.4,
            ..GaitConfig::default()
        };
        let gp = GaitProblem::new(&rd, cfg, &sur).unwrap();
        let y0 = gp.initial_guess();
        let v0 = gp.violation(&y0).unwrap();
        let opts = crate::solver::SolveOptions {
            max_outer: 3,
            max_inner: 20,
            ..Default::default()
        };
        let res = crate::solver::solve(&gp, &opts).unwrap();
        assert!(
            res.violation < 0.5 * v0,
            "violation {} did not shrink from {v0}",
            res.violation
        );
        assert!(!res.trace.is_empty());
    }
}
