//! Forward validation of optimized gaits: constrained forward dynamics via a
//! KKT solve with Baumgarte stabilization, plastic impact resolution at step
//! boundaries, a PD+feedforward tracking controller around the reconstructed
//! reference, and the evaluation metrics (per-step length error, RMS control
//! energy).
//!
//! The rollout is an honest hybrid simulation: within a step the active
//! constraint set is the loop closures plus the stance foot pinned where it
//! actually stands (the landed pose, not the planned one); at each boundary
//! a rigid plastic impact transfers stance to the swing foot at its actual
//! touchdown pose. Only the controller references the planned gait.

use crate::closure::{cid, solve_ik, CidPoint, ConstraintError, ConstraintSet, Stance};
use crate::dynamics::RobotDyn;
use crate::gaitopt::{GaitConfig, GaitProblem};
use crate::spatial::Frame;
use crate::trajectory::bernstein_weights;
use nalgebra::{DMatrix, DVector};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("KKT system is singular at t = {t:.6}")]
    SingularKkt { t: f64 },
    #[error("integrator step size underflow at t = {t:.6}")]
    StepUnderflow { t: f64 },
    #[error("time {t} lies outside the gait span [0, {span}]")]
    OutOfSpan { t: f64, span: f64 },
    #[error("invalid simulation configuration: {0}")]
    BadConfig(String),
    #[error("trace holds no samples")]
    EmptyTrace,
}

/// Tracking-controller gains, integrator tolerances, and stabilization
/// parameters of one rollout.
#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Proportional gain on the actuated position error.
    pub kp: f64,
    /// Derivative gain on the actuated velocity error.
    pub kd: f64,
    /// Relative integration tolerance.
    pub rel_tol: f64,
    /// Absolute integration tolerance.
    pub abs_tol: f64,
    /// Stabilization gain on the constraint rate (1/s).
    pub stab_alpha: f64,
    /// Stabilization gain on the constraint value (1/s).
    pub stab_beta: f64,
    /// Hard wall-clock cap on simulated time, seconds.
    pub max_time: f64,
    /// Sample recording rate, Hz.
    pub record_hz: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            kp: 80.0,
            kd: 5.0,
            rel_tol: 1e-8,
            abs_tol: 1e-8,
            stab_alpha: 20.0,
            stab_beta: 20.0,
            max_time: 10.0,
            record_hz: 1000.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.kp < 0.0 || self.kd < 0.0 || self.stab_alpha < 0.0 || self.stab_beta < 0.0 {
            return Err(SimError::BadConfig("gains must be non-negative".into()));
        }
        if self.rel_tol <= 0.0 || self.abs_tol <= 0.0 {
            return Err(SimError::BadConfig("tolerances must be positive".into()));
        }
        if self.record_hz <= 0.0 || self.max_time <= 0.0 {
            return Err(SimError::BadConfig(
                "record rate and time cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One recorded instant of a rollout.
#[derive(Clone, Debug)]
pub struct SimSample {
    pub t: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    /// Actuator inputs commanded at this instant (after clamping).
    pub u: DVector<f64>,
    /// Constraint reactions of the active (physical) constraint set.
    pub lambda: DVector<f64>,
    /// Whether any input channel sat at its torque limit.
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub enum SimEvent {
    /// Plastic impact at a step boundary.
    Impact {
        t: f64,
        /// Index of the step that just ended.
        step: usize,
        /// Impulse paired with the velocity Jacobian rows of the new stance.
        impulse: DVector<f64>,
        /// ‖H(q̇⁺−q̇⁻) − JᵀΛ‖∞ ∨ ‖J q̇⁺‖∞ of the impact solve.
        kkt_residual: f64,
        /// ‖q̇⁺ − q̇⁻‖∞.
        velocity_jump: f64,
    },
    /// Torso dropped below the fall threshold; the rollout stops here.
    Fall { t: f64, height: f64 },
}

/// Full record of one rollout.
#[derive(Clone, Debug)]
pub struct SimTrace {
    pub samples: Vec<SimSample>,
    /// World pose where the swing sole landed at each completed boundary.
    pub landings: Vec<Frame>,
    pub events: Vec<SimEvent>,
    /// True when every planned step finished without a fall.
    pub completed: bool,
}

/// Metrics of a finished rollout.
#[derive(Clone, Debug)]
pub struct SimMetrics {
    /// |desired − achieved| forward sole travel, one entry per completed step.
    pub step_length_error: Vec<f64>,
    /// √((1/N) Σ uᵢᵀuᵢ) over the recorded samples.
    pub control_energy: f64,
}

// ---------------------------------------------------------------------------
// constrained forward dynamics
// ---------------------------------------------------------------------------

/// Accelerations and reactions under the active constraint set:
/// solves [H, −Jᵀ; J, 0]·[q̈; λ] = [Su − (Cq̇ + g); −J̇q̇ − 2α ċ − β² c].
///
/// `J` and the stabilized right-hand side use the orientation-consistent
/// constraint rows (the same family the kinematics solver drives to zero),
/// so the stabilization feedback damps exactly the drift measured by
/// `ConstraintSet::value`. On the constraint manifold these rows coincide
/// with the wrench-paired velocity rows, making the reactions directly
/// comparable with the inverse-dynamics reconstruction.
pub fn constrained_fd(
    rd: &RobotDyn,
    cs: &ConstraintSet,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    u: &DVector<f64>,
    stab: (f64, f64),
) -> Result<(DVector<f64>, DVector<f64>), SimError> {
    let nq = rd.nq();
    let m = cs.n_rows();
    let h = rd.mass_matrix(q);
    let nle = rd.nle(q, qd);
    let mut tau = -nle;
    for (k, &i) in rd.model.actuated_idx().iter().enumerate() {
        tau[i] += u[k];
    }
    if m == 0 {
        let qdd = h
            .lu()
            .solve(&tau)
            .ok_or(SimError::SingularKkt { t: f64::NAN })?;
        return Ok((qdd, DVector::zeros(0)));
    }
    let st = rd.skel.fk_full(q, qd, &DVector::zeros(nq));
    let j = cs.jacobian(&rd.skel, &st);
    let (alpha, beta) = stab;
    // with zero accelerations in `st`, `accel` returns exactly J̇q̇
    let mut rhs_c = -cs.accel(&rd.skel, &st);
    if alpha != 0.0 {
        rhs_c -= cs.rate(&rd.skel, &st) * (2.0 * alpha);
    }
    if beta != 0.0 {
        rhs_c -= cs.value(&rd.skel, &st) * (beta * beta);
    }
    let mut kkt = DMatrix::zeros(nq + m, nq + m);
    kkt.view_mut((0, 0), (nq, nq)).copy_from(&h);
    kkt.view_mut((0, nq), (nq, m)).copy_from(&(-j.transpose()));
    kkt.view_mut((nq, 0), (m, nq)).copy_from(&j);
    let mut rhs = DVector::zeros(nq + m);
    rhs.rows_mut(0, nq).copy_from(&tau);
    rhs.rows_mut(nq, m).copy_from(&rhs_c);
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or(SimError::SingularKkt { t: f64::NAN })?;
    let qdd = sol.rows(0, nq).into_owned();
    let lambda = sol.rows(nq, m).into_owned();
    if !qdd.iter().all(|x| x.is_finite()) {
        return Err(SimError::SingularKkt { t: f64::NAN });
    }
    Ok((qdd, lambda))
}

/// Rigid plastic impact: positions unchanged, the post-impact velocity and
/// impulse solve [H, −Jᵀ; J, 0]·[q̇⁺; Λ] = [H q̇⁻; 0] with J the velocity
/// Jacobian of the constraint set active after the impact.
///
/// Returns (q̇⁺, Λ, residual) where the residual is the worse of the
/// momentum-balance and post-impact-velocity equation errors.
pub fn impact_map(
    rd: &RobotDyn,
    cs_next: &ConstraintSet,
    q: &DVector<f64>,
    qd_minus: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, f64), SimError> {
    let nq = rd.nq();
    let m = cs_next.n_rows();
    let h = rd.mass_matrix(q);
    if m == 0 {
        return Ok((qd_minus.clone(), DVector::zeros(0), 0.0));
    }
    let st = rd.skel.fk_pos(q);
    let j = cs_next.vel_jacobian(&rd.skel, &st);
    let mut kkt = DMatrix::zeros(nq + m, nq + m);
    kkt.view_mut((0, 0), (nq, nq)).copy_from(&h);
    kkt.view_mut((0, nq), (nq, m)).copy_from(&(-j.transpose()));
    kkt.view_mut((nq, 0), (m, nq)).copy_from(&j);
    let mut rhs = DVector::zeros(nq + m);
    rhs.rows_mut(0, nq).copy_from(&(&h * qd_minus));
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or(SimError::SingularKkt { t: f64::NAN })?;
    let qd_plus = sol.rows(0, nq).into_owned();
    let lam = sol.rows(nq, m).into_owned();
    let r_mom = (&h * (&qd_plus - qd_minus) - j.transpose() * &lam).amax();
    let r_vel = (&j * &qd_plus).amax();
    Ok((qd_plus, lam, r_mom.max(r_vel)))
}

// ---------------------------------------------------------------------------
// adaptive integration
// ---------------------------------------------------------------------------

/// Dormand–Prince 5(4) adaptive integration of ẋ = f(t, x) from `t0` to
/// `t1`. `record` is called at every multiple of `record_dt` past `t0`
/// (always including `t1`, never `t0` itself); returning `false` stops the
/// integration early. Returns the final time and state.
pub fn integrate<F, R>(
    mut f: F,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    rel_tol: f64,
    abs_tol: f64,
    record_dt: f64,
    mut record: R,
) -> Result<(f64, DVector<f64>), SimError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, SimError>,
    R: FnMut(f64, &DVector<f64>) -> bool,
{
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    // difference between the 5th-order weights and the embedded 4th-order ones
    const E: [f64; 7] = [
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ];

    let span = t1 - t0;
    if span <= 0.0 {
        return Err(SimError::BadConfig("integration span must be positive".into()));
    }
    let n_windows = (span / record_dt).ceil().max(1.0) as usize;
    let dt_w = span / n_windows as f64;
    let mut t = t0;
    let mut x = x0.clone();
    let mut hstep = 0.1 * dt_w;
    let n = x.len();
    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(n); 7];

    for w in 1..=n_windows {
        let t_end = if w == n_windows { t1 } else { t0 + dt_w * w as f64 };
        while t < t_end - 1e-12 * span {
            hstep = hstep.min(t_end - t);
            if hstep < 1e-14 * span.max(t.abs()) {
                return Err(SimError::StepUnderflow { t });
            }
            k[0] = f(t, &x)?;
            for s in 0..6 {
                let mut xs = x.clone();
                for (j, kj) in k.iter().enumerate().take(s + 1) {
                    if A[s][j] != 0.0 {
                        xs.axpy(hstep * A[s][j], kj, 1.0);
                    }
                }
                k[s + 1] = f(t + C[s] * hstep, &xs)?;
            }
            // k[6] is evaluated at the 5th-order solution itself
            let mut x_new = x.clone();
            for (j, kj) in k.iter().enumerate().take(6) {
                if A[5][j] != 0.0 {
                    x_new.axpy(hstep * A[5][j], kj, 1.0);
                }
            }
            let mut err2 = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e += E[j] * kj[i];
                }
                e *= hstep;
                let sc = abs_tol + rel_tol * x[i].abs().max(x_new[i].abs());
                err2 += (e / sc) * (e / sc);
            }
            let err = (err2 / n as f64).sqrt();
            let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
            if err <= 1.0 {
                t += hstep;
                x = x_new;
            }
            hstep *= factor;
        }
        t = t_end;
        if !record(t, &x) {
            return Ok((t, x));
        }
    }
    Ok((t1, x))
}

// ---------------------------------------------------------------------------
// reference gait
// ---------------------------------------------------------------------------

/// A solved gait packaged for playback: per-step actuated curves plus the
/// planned stance geometry, able to reconstruct the full reference state and
/// open-loop input at any time via the stance kinematics and inverse
/// dynamics.
pub struct ReferenceGait<'m> {
    rd: &'m RobotDyn,
    cfg: GaitConfig,
    /// Bezier control points of each step, (degree+1) × na.
    coeffs: Vec<DMatrix<f64>>,
    stances: Vec<Stance>,
    css: Vec<ConstraintSet>,
    /// Standing configuration per step, the cold-start kinematic seed.
    q_seed: Vec<DVector<f64>>,
    /// Most recent kinematic solution, seeding the next query (rollouts
    /// advance smoothly in time, so this nearly always converges in one or
    /// two iterations).
    warm: Mutex<DVector<f64>>,
}

impl<'m> ReferenceGait<'m> {
    /// Packages the decision vector `y` of a (solved) gait problem.
    pub fn new(gp: &GaitProblem<'m>, y: &DVector<f64>) -> ReferenceGait<'m> {
        let cfg = gp.config().clone();
        let layout = gp.layout();
        let coeffs: Vec<DMatrix<f64>> = (0..cfg.steps).map(|l| layout.coeff_matrix(y, l)).collect();
        let stances: Vec<Stance> = (0..cfg.steps).map(|l| gp.stance(l).clone()).collect();
        let css: Vec<ConstraintSet> = (0..cfg.steps).map(|l| gp.css[l].clone()).collect();
        let q_seed: Vec<DVector<f64>> = (0..cfg.steps).map(|l| gp.q_ref(l).clone()).collect();
        let warm = Mutex::new(q_seed[0].clone());
        ReferenceGait {
            rd: gp.rd,
            cfg,
            coeffs,
            stances,
            css,
            q_seed,
            warm,
        }
    }

    pub fn robot(&self) -> &'m RobotDyn {
        self.rd
    }

    pub fn config(&self) -> &GaitConfig {
        &self.cfg
    }

    /// Planned stance of step `l`.
    pub fn stance(&self, l: usize) -> &Stance {
        &self.stances[l]
    }

    /// Standing configuration used for seeding and fall thresholds.
    pub fn standing(&self) -> &DVector<f64> {
        &self.q_seed[0]
    }

    /// Total planned duration of one cycle, seconds.
    pub fn cycle_time(&self) -> f64 {
        self.cfg.steps as f64 * self.cfg.duration
    }

    fn locate(&self, t: f64) -> Result<(usize, f64), SimError> {
        let span = self.cycle_time();
        if !(-1e-9..=span + 1e-9).contains(&t) {
            return Err(SimError::OutOfSpan { t, span });
        }
        let l = ((t / self.cfg.duration).floor() as usize).min(self.cfg.steps - 1);
        let s = ((t - l as f64 * self.cfg.duration) / self.cfg.duration).clamp(0.0, 1.0);
        Ok((l, s))
    }

    /// Actuated reference position and velocity at cycle time `t`; cheap
    /// (no kinematics solve).
    pub fn actuated_ref(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>), SimError> {
        let (l, s) = self.locate(t)?;
        let (w0, w1, _) = bernstein_weights(self.cfg.degree, s);
        let c = &self.coeffs[l];
        Ok((c.tr_mul(&w0), c.tr_mul(&w1) / self.cfg.duration))
    }

    /// Full reference state, reactions, and open-loop input at cycle time
    /// `t`, reconstructed through the stance kinematics and the constrained
    /// inverse dynamics.
    pub fn sample(&self, t: f64) -> Result<CidPoint, SimError> {
        let (l, s) = self.locate(t)?;
        let (w0, w1, w2) = bernstein_weights(self.cfg.degree, s);
        let c = &self.coeffs[l];
        let qa = c.tr_mul(&w0);
        let qad = c.tr_mul(&w1) / self.cfg.duration;
        let qadd = c.tr_mul(&w2) / (self.cfg.duration * self.cfg.duration);
        let mut warm = self.warm.lock().unwrap();
        let sol = solve_ik(self.rd, &self.css[l], &qa, &warm, 1e-10)
            .or_else(|_| solve_ik(self.rd, &self.css[l], &qa, &self.q_seed[l], 1e-10))?;
        warm.copy_from(&sol.q);
        Ok(cid(self.rd, &self.css[l], &sol.q, &qad, &qadd)?)
    }

    /// Forward sole travel of each planned step: where the swing sole sits
    /// at the end of the step, relative to the stance sole.
    pub fn planned_step_lengths(&self) -> Result<Vec<f64>, SimError> {
        let mut out = Vec::with_capacity(self.cfg.steps);
        for l in 0..self.cfg.steps {
            let p = self.sample(((l + 1) as f64) * self.cfg.duration - 1e-12)?;
            let st = self.rd.skel.fk_pos(&p.q);
            let swing = self.stances[l].side.other();
            let landed = sole_frame(self.rd, swing, &st)?;
            out.push(landed.pos.x - self.stances[l].target.pos.x);
        }
        Ok(out)
    }
}

/// World pose of one foot's sole frame in the given kinematic state.
fn sole_frame(
    rd: &RobotDyn,
    side: crate::model::Side,
    st: &crate::kin::KinState,
) -> Result<Frame, SimError> {
    let patch = rd
        .model
        .contact(side)
        .ok_or(ConstraintError::NoContact(side.name()))?;
    Ok(st.body_frame(&rd.skel, patch.body).compose(&patch.frame))
}

// ---------------------------------------------------------------------------
// controller
// ---------------------------------------------------------------------------

/// PD+feedforward tracking input at time `t`:
/// u = u_open(t) + Kp (q_d − q)|A + Kd (q̇_d − q̇)|A, clamped to the torque
/// limits. Also reports whether any channel was clamped.
pub fn pd_tracking_controller(
    gait: &ReferenceGait,
    sim: &SimConfig,
    t: f64,
    q: &DVector<f64>,
    qd: &DVector<f64>,
) -> Result<(DVector<f64>, bool), SimError> {
    let rd = gait.robot();
    let reference = gait.sample(t)?;
    let qa_d = rd.model.select_actuated(&reference.q);
    let qad_d = rd.model.select_actuated(&reference.qd);
    let qa = rd.model.select_actuated(q);
    let qad = rd.model.select_actuated(qd);
    let mut u = reference.u + (qa_d - qa) * sim.kp + (qad_d - qad) * sim.kd;
    let taumax = rd.model.actuated_taumax();
    let mut clamped = false;
    for i in 0..u.len() {
        let lim = taumax[i];
        if u[i].abs() > lim {
            u[i] = u[i].clamp(-lim, lim);
            clamped = true;
        }
    }
    Ok((u, clamped))
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

/// Simulates one full cycle of the gait under the tracking controller.
///
/// Each step integrates the constrained dynamics with the stance foot pinned
/// at its actual pose; each boundary resolves a plastic impact at the actual
/// swing-sole touchdown pose and swaps stance. A fall (torso below half the
/// standing height) stops the rollout early and is recorded as an event, not
/// an error.
pub fn run_gait(gait: &ReferenceGait, sim: &SimConfig) -> Result<SimTrace, SimError> {
    sim.validate()?;
    let rd = gait.robot();
    let nq = rd.nq();
    let t_step = gait.config().duration;
    let steps = gait.config().steps;
    let record_dt = 1.0 / sim.record_hz;

    let start = gait.sample(0.0)?;
    let fall_floor = rd
        .model
        .base_coords()
        .map(|b| (b.z, 0.5 * gait.standing()[b.z]));

    let mut x = DVector::zeros(2 * nq);
    x.rows_mut(0, nq).copy_from(&start.q);
    x.rows_mut(nq, nq).copy_from(&start.qd);

    let mut trace = SimTrace {
        samples: Vec::new(),
        landings: Vec::new(),
        events: Vec::new(),
        completed: false,
    };
    // the active physical constraint set; step 0 starts on the planned stance
    let mut phys_cs = gait.css[0].clone();
    let mut stance_side = gait.stance(0).side;

    let record_state =
        |trace: &mut SimTrace, cs: &ConstraintSet, t: f64, x: &DVector<f64>| -> Result<bool, SimError> {
            let q = x.rows(0, nq).into_owned();
            let qd = x.rows(nq, nq).into_owned();
            let (u, clamped) = pd_tracking_controller(gait, sim, t, &q, &qd)?;
            let (_, lambda) =
                constrained_fd(rd, cs, &q, &qd, &u, (sim.stab_alpha, sim.stab_beta))?;
            trace.samples.push(SimSample {
                t,
                q: q.clone(),
                qd,
                u,
                lambda,
                clamped,
            });
            if let Some((zi, floor)) = fall_floor {
                if q[zi] < floor {
                    trace.events.push(SimEvent::Fall { t, height: q[zi] });
                    return Ok(false);
                }
            }
            Ok(true)
        };

    // initial sample at t = 0
    if !record_state(&mut trace, &phys_cs, 0.0, &x)? {
        return Ok(trace);
    }

    let horizon = sim.max_time.min(steps as f64 * t_step);
    let mut fell = false;
    for l in 0..steps {
        let t0 = l as f64 * t_step;
        let t1 = ((l + 1) as f64 * t_step).min(horizon);
        if t1 <= t0 {
            break;
        }
        let mut rec_err: Option<SimError> = None;
        let cs_now = phys_cs.clone();
        let (t_end, x_end) = integrate(
            |t, x| {
                let q = x.rows(0, nq).into_owned();
                let qd = x.rows(nq, nq).into_owned();
                let (u, _) = pd_tracking_controller(gait, sim, t, &q, &qd)?;
                let (qdd, _) =
                    constrained_fd(rd, &cs_now, &q, &qd, &u, (sim.stab_alpha, sim.stab_beta))?;
                let mut dx = DVector::zeros(2 * nq);
                dx.rows_mut(0, nq).copy_from(&qd);
                dx.rows_mut(nq, nq).copy_from(&qdd);
                Ok(dx)
            },
            &x,
            t0,
            t1,
            sim.rel_tol,
            sim.abs_tol,
            record_dt,
            |t, x| match record_state(&mut trace, &cs_now, t, x) {
                Ok(go_on) => go_on,
                Err(e) => {
                    rec_err = Some(e);
                    false
                }
            },
        )?;
        if let Some(e) = rec_err {
            return Err(e);
        }
        x = x_end;
        if matches!(trace.events.last(), Some(SimEvent::Fall { .. })) {
            fell = true;
            break;
        }
        if t_end < (l + 1) as f64 * t_step {
            // horizon cap hit inside the step; no impact happened
            return Ok(trace);
        }

        // ---- plastic impact at the actual touchdown pose ----------------
        let q = x.rows(0, nq).into_owned();
        let qd_minus = x.rows(nq, nq).into_owned();
        let st = rd.skel.fk_pos(&q);
        let swing = stance_side.other();
        let landed = sole_frame(rd, swing, &st)?;
        let next_stance = Stance {
            side: swing,
            target: landed.clone(),
        };
        let cs_next = ConstraintSet::new(&rd.model, Some(&next_stance))?;
        let (qd_plus, impulse, kkt_residual) = impact_map(rd, &cs_next, &q, &qd_minus)?;
        trace.events.push(SimEvent::Impact {
            t: t_end,
            step: l,
            velocity_jump: (&qd_plus - &qd_minus).amax(),
            impulse,
            kkt_residual,
        });
        trace.landings.push(landed);
        x.rows_mut(nq, nq).copy_from(&qd_plus);
        phys_cs = cs_next;
        stance_side = swing;
    }
    trace.completed = !fell && horizon >= steps as f64 * t_step;
    Ok(trace)
}

/// Step-length errors and RMS control energy of a rollout.
pub fn metrics(gait: &ReferenceGait, trace: &SimTrace) -> Result<SimMetrics, SimError> {
    if trace.samples.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let desired = gait.config().step_length;
    let mut step_length_error = Vec::with_capacity(trace.landings.len());
    let mut stance_x = gait.stance(0).target.pos.x;
    for landed in &trace.landings {
        step_length_error.push(((landed.pos.x - stance_x) - desired).abs());
        stance_x = landed.pos.x;
    }
    let sum: f64 = trace.samples.iter().map(|s| s.u.norm_squared()).sum();
    let control_energy = (sum / trace.samples.len() as f64).sqrt();
    Ok(SimMetrics {
        step_length_error,
        control_energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::fit_ik;
    use crate::gaitopt::GaitProblem;
    use crate::model::{bundled::bundled_model, parse_model};

    fn biped() -> RobotDyn {
        RobotDyn::new(bundled_model("minibiped").unwrap()).unwrap()
    }

    fn biped_problem(rd: &RobotDyn, cfg: GaitConfig) -> GaitProblem<'_> {
        let sur = fit_ik(rd, 8).unwrap();
        GaitProblem::new(rd, cfg, &sur).unwrap()
    }

    /// A single floating rigid body, no contacts, no closures.
    fn free_body() -> RobotDyn {
        let text = "body brick mass=3 com=0,0,0 inertia=0.02,0.02,0.02,0,0,0\n\
                    joint base type=floating6 parent=world child=brick\n";
        RobotDyn::new(parse_model(text, "brick").unwrap()).unwrap()
    }

    #[test]
    fn free_fall_is_projectile_motion() {
        let rd = free_body();
        let cs = ConstraintSet::new(&rd.model, None).unwrap();
        assert_eq!(cs.n_rows(), 0);
        let q = DVector::from_vec(vec![0.1, -0.2, 0.7, 0.02, -0.01, 0.03]);
        let qd = DVector::zeros(6);
        let u = DVector::zeros(rd.model.na());
        let (qdd, lam) = constrained_fd(&rd, &cs, &q, &qd, &u, (0.0, 0.0)).unwrap();
        assert_eq!(lam.len(), 0);
        let b = rd.model.base_coords().unwrap();
        for i in 0..6 {
            let want = if i == b.z { -9.81 } else { 0.0 };
            assert!((qdd[i] - want).abs() < 1e-10, "qdd[{i}] = {}", qdd[i]);
        }
    }

    /// On-manifold states round-trip through inverse then forward dynamics.
    #[test]
    fn forward_dynamics_inverts_the_reconstruction() {
        let rd = biped();
        let gp = biped_problem(&rd, GaitConfig::default());
        // bend the standing curves so velocity and acceleration are nonzero
        let mut y = gp.initial_guess();
        let layout = gp.layout();
        for l in 0..gp.config().steps {
            for r in 0..=gp.config().degree {
                let rows = layout.coeff(l, r);
                for (k, i) in rows.enumerate() {
                    y[i] += 0.03 * ((r + 2 * k + l) as f64 * 0.9).sin();
                }
            }
        }
        let gait = ReferenceGait::new(&gp, &y);
        for k in 0..5 {
            let t = 0.07 * (k as f64) + 0.01;
            let p = gait.sample(t).unwrap();
            assert!(p.qd.amax() > 1e-3, "perturbation should move the gait");
            let (qdd, lam) =
                constrained_fd(&rd, &gait.css[0], &p.q, &p.qd, &p.u, (0.0, 0.0)).unwrap();
            assert!((&qdd - &p.qdd).amax() < 1e-8, "t={t}: {}", (&qdd - &p.qdd).amax());
            assert!((&lam - &p.lambda).amax() < 1e-6);
        }
    }

    #[test]
    fn standing_torques_hold_equilibrium() {
        let rd = biped();
        let gp = biped_problem(&rd, GaitConfig::default());
        let gait = ReferenceGait::new(&gp, &gp.initial_guess());
        let p = gait.sample(0.0).unwrap();
        assert!(p.qd.amax() < 1e-12);
        let (qdd, _) = constrained_fd(&rd, &gait.css[0], &p.q, &p.qd, &p.u, (0.0, 0.0)).unwrap();
        assert!(qdd.amax() < 1e-8, "qdd = {}", qdd.amax());
    }

    #[test]
    fn unforced_double_pendulum_conserves_energy() {
        let rd = RobotDyn::new(bundled_model("double_pendulum").unwrap()).unwrap();
        let cs = ConstraintSet::new(&rd.model, None).unwrap();
        assert_eq!(cs.n_rows(), 0);
        let nq = rd.nq();
        let q0 = DVector::from_vec(vec![1.1, -0.4]);
        let qd0 = DVector::from_vec(vec![0.0, 0.3]);
        let (k0, p0) = rd.energy(&q0, &qd0);
        let e0 = k0 + p0;
        let u = DVector::zeros(rd.model.na());
        let mut x0 = DVector::zeros(2 * nq);
        x0.rows_mut(0, nq).copy_from(&q0);
        x0.rows_mut(nq, nq).copy_from(&qd0);
        let mut worst: f64 = 0.0;
        let (_, _) = integrate(
            |_, x| {
                let q = x.rows(0, nq).into_owned();
                let qd = x.rows(nq, nq).into_owned();
                let (qdd, _) = constrained_fd(&rd, &cs, &q, &qd, &u, (0.0, 0.0))?;
                let mut dx = DVector::zeros(2 * nq);
                dx.rows_mut(0, nq).copy_from(&qd);
                dx.rows_mut(nq, nq).copy_from(&qdd);
                Ok(dx)
            },
            &x0,
            0.0,
            5.0,
            1e-10,
            1e-10,
            0.01,
            |_, x| {
                let (k, p) = rd.energy(&x.rows(0, nq).into_owned(), &x.rows(nq, nq).into_owned());
                worst = worst.max(((k + p - e0) / e0).abs());
                true
            },
        )
        .unwrap();
        assert!(worst < 1e-6, "relative energy drift {worst}");
    }

    #[test]
    fn impact_from_compatible_velocity_is_identity() {
        let rd = biped();
        let gp = biped_problem(&rd, GaitConfig::default());
        let gait = ReferenceGait::new(&gp, &gp.initial_guess());
        let p = gait.sample(0.0).unwrap();
        // standing: q̇ = 0 satisfies any J q̇ = 0
        let st = rd.skel.fk_pos(&p.q);
        let landed = sole_frame(&rd, gait.stance(0).side.other(), &st).unwrap();
        let cs_next = ConstraintSet::new(
            &rd.model,
            Some(&Stance {
                side: gait.stance(0).side.other(),
                target: landed,
            }),
        )
        .unwrap();
        let (qd_plus, lam, resid) = impact_map(&rd, &cs_next, &p.q, &p.qd).unwrap();
        assert!(resid < 1e-10);
        assert!((&qd_plus - &p.qd).amax() < 1e-10);
        assert!(lam.amax() < 1e-9);
    }

    #[test]
    fn perfect_tracking_returns_the_open_loop_input() {
        let rd = biped();
        let gp = biped_problem(&rd, GaitConfig::default());
        let gait = ReferenceGait::new(&gp, &gp.initial_guess());
        let sim = SimConfig::default();
        let t = 0.13;
        let p = gait.sample(t).unwrap();
        let (u, clamped) = pd_tracking_controller(&gait, &sim, t, &p.q, &p.qd).unwrap();
        assert!(!clamped);
        assert!((&u - &p.u).amax() < 1e-9);
        // pure feedforward with zero gains, even off the reference
        let zero_gain = SimConfig {
            kp: 0.0,
            kd: 0.0,
            ..SimConfig::default()
        };
        let mut q_off = p.q.clone();
        q_off[rd.model.actuated_idx()[0]] += 0.05;
        let (u2, _) = pd_tracking_controller(&gait, &zero_gain, t, &q_off, &p.qd).unwrap();
        assert!((&u2 - &p.u).amax() < 1e-9);
        // unit position error on one actuated joint contributes exactly Kp
        let mut q_err = p.q.clone();
        q_err[rd.model.actuated_idx()[0]] -= 1.0;
        let (u3, _) = pd_tracking_controller(&gait, &sim, t, &q_err, &p.qd).unwrap();
        let lim = rd.model.actuated_taumax()[0];
        let expect = (p.u[0] + sim.kp).clamp(-lim, lim);
        assert!((u3[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn standing_gait_rollout_stays_put() {
        let rd = biped();
        let cfg = GaitConfig {
            torso_z_min: 0.42,
            ..GaitConfig::default()
        };
        let gp = biped_problem(&rd, cfg);
        let gait = ReferenceGait::new(&gp, &gp.initial_guess());
        let sim = SimConfig {
            record_hz: 200.0,
            ..SimConfig::default()
        };
        let trace = run_gait(&gait, &sim).unwrap();
        assert!(trace.completed);
        assert_eq!(trace.landings.len(), gait.config().steps);
        let q0 = &trace.samples[0].q;
        for s in &trace.samples {
            assert!(
                (&s.q - q0).amax() < 1e-3,
                "t = {}: drifted {}",
                s.t,
                (&s.q - q0).amax()
            );
        }
        for e in &trace.events {
            if let SimEvent::Impact { kkt_residual, .. } = e {
                assert!(*kkt_residual < 1e-10);
            }
        }
        let m = metrics(&gait, &trace).unwrap();
        assert_eq!(m.step_length_error.len(), gait.config().steps);
        for err in &m.step_length_error {
            assert!(*err < 1e-3, "step length error {err}");
        }
        assert!(m.control_energy > 0.0);
    }

    #[test]
    fn metrics_reproduce_the_rms_formula() {
        let rd = biped();
        let gp = biped_problem(&rd, GaitConfig::default());
        let gait = ReferenceGait::new(&gp, &gp.initial_guess());
        let na = rd.model.na();
        let mk = |u: DVector<f64>| SimSample {
            t: 0.0,
            q: DVector::zeros(rd.nq()),
            qd: DVector::zeros(rd.nq()),
            u,
            lambda: DVector::zeros(0),
            clamped: false,
        };
        let mut trace = SimTrace {
            samples: vec![mk(DVector::zeros(na))],
            landings: Vec::new(),
            events: Vec::new(),
            completed: true,
        };
        assert_eq!(metrics(&gait, &trace).unwrap().control_energy, 0.0);
        // constant ‖u‖ = 5 over all samples → RMS is 5
        let mut u = DVector::zeros(na);
        u[0] = 5.0;
        trace.samples = vec![mk(u.clone()), mk(u.clone()), mk(u)];
        assert!((metrics(&gait, &trace).unwrap().control_energy - 5.0).abs() < 1e-12);
        trace.samples.clear();
        assert!(matches!(metrics(&gait, &trace), Err(SimError::EmptyTrace)));
    }
}
