//! Constrained inverse dynamics: from actuated trajectories alone,
//! reconstruct the full state, the reaction forces, and the inputs.
//!
//! With as many constraint rows as unactuated coordinates (a fully actuated
//! support phase), the constraint equations determine the unactuated
//! rates and accelerations from the actuated ones, and the unactuated rows
//! of the inverse dynamics determine the reaction forces:
//!
//!   q̇_u  = −J_u⁻¹ J_a q̇_a
//!   q̈_u  = −J_u⁻¹ (J_a q̈_a + J̇ q̇)
//!   τ̃    = H q̈ + C q̇ + g          (plain inverse dynamics)
//!   λ    = J_u⁻ᵀ τ̃_u
//!   u    = τ̃_a − J_aᵀ λ
//!
//! The directional derivatives of this map are assembled from the same
//! forward tangent sweeps that power the inverse-dynamics partials, one
//! direction at a time.

use super::{gather_cols, ConstraintError, ConstraintSet};
use crate::dynamics::RobotDyn;
use nalgebra::{DMatrix, DVector};

/// One evaluation of the reconstruction map.
#[derive(Clone, Debug)]
pub struct CidPoint {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
    /// Unconstrained inverse-dynamics torques H q̈ + C q̇ + g.
    pub tau_tilde: DVector<f64>,
    /// Constraint reactions, paired with the velocity-level Jacobian rows.
    pub lambda: DVector<f64>,
    /// Actuator inputs.
    pub u: DVector<f64>,
}

/// Jacobians of the reactions and inputs with respect to the actuated
/// position, velocity, and acceleration inputs.
#[derive(Clone, Debug)]
pub struct CidPartials {
    pub du_dqa: DMatrix<f64>,
    pub du_dqda: DMatrix<f64>,
    pub du_dqdda: DMatrix<f64>,
    pub dl_dqa: DMatrix<f64>,
    pub dl_dqda: DMatrix<f64>,
    pub dl_dqdda: DMatrix<f64>,
}

struct Factored {
    ju_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    jut_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    ja: DMatrix<f64>,
}

fn factor(
    rd: &RobotDyn,
    cs: &ConstraintSet,
    st: &crate::kin::KinState,
) -> Result<Factored, ConstraintError> {
    let model = &rd.model;
    if cs.n_rows() != model.nu() {
        return Err(ConstraintError::NotSquare {
            rows: cs.n_rows(),
            unknowns: model.nu(),
        });
    }
    let j = cs.vel_jacobian(&rd.skel, st);
    let ju = gather_cols(&j, model.unactuated_idx());
    let ja = gather_cols(&j, model.actuated_idx());
    let svd = ju.clone().svd(false, false);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if smin < 1e-10 * smax {
        return Err(ConstraintError::Singular { ratio: smin / smax });
    }
    Ok(Factored {
        ju_lu: ju.clone().lu(),
        jut_lu: ju.transpose().lu(),
        ja,
    })
}

fn scatter(model: &crate::model::RobotModel, a: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    model.assemble_q(a, u)
}

/// Reconstructs the full state, reactions, and inputs from the actuated
/// position/velocity/acceleration at an on-manifold configuration `q`
/// (whose actuated entries must already agree with the trajectory).
pub fn cid(
    rd: &RobotDyn,
    cs: &ConstraintSet,
    q: &DVector<f64>,
    qa_d: &DVector<f64>,
    qa_dd: &DVector<f64>,
) -> Result<CidPoint, ConstraintError> {
    let model = &rd.model;
    let st0 = rd.skel.fk_pos(q);
    let fac = factor(rd, cs, &st0)?;

    // Velocity level: J q̇ = 0.
    let qdu = -fac
        .ju_lu
        .solve(&(&fac.ja * qa_d))
        .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
    let qd = scatter(model, qa_d, &qdu);

    // Acceleration level: evaluate the constraint accelerations with the
    // unactuated accelerations zeroed; what remains is J_a q̈_a + J̇ q̇, the
    // affine part, so one solve yields q̈_u.
    let qdd_part = scatter(model, qa_dd, &DVector::zeros(model.nu()));
    let st_mid = rd.skel.fk_full(q, &qd, &qdd_part);
    let r0 = cs.accel_plain(&rd.skel, &st_mid);
    let qddu = -fac
        .ju_lu
        .solve(&r0)
        .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
    let qdd = scatter(model, qa_dd, &qddu);

    // Inverse dynamics and the reaction/input split.
    let st = rd.skel.fk_full(q, &qd, &qdd);
    let (tau_tilde, _) = rd.rnea_at(&st);
    let lambda = fac
        .jut_lu
        .solve(&model.select_unactuated(&tau_tilde))
        .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
    let u = model.select_actuated(&tau_tilde) - fac.ja.transpose() * &lambda;

    Ok(CidPoint {
        q: q.clone(),
        qd,
        qdd,
        tau_tilde,
        lambda,
        u,
    })
}

/// [`cid`] plus the Jacobians of `(u, λ)` with respect to the actuated
/// inputs, computed with one tangent sweep family per direction.
pub fn cid_partials(
    rd: &RobotDyn,
    cs: &ConstraintSet,
    q: &DVector<f64>,
    qa_d: &DVector<f64>,
    qa_dd: &DVector<f64>,
) -> Result<(CidPoint, CidPartials), ConstraintError> {
    let model = &rd.model;
    let skel = &rd.skel;
    let (na, nq, nc) = (model.na(), model.nq(), cs.n_rows());
    let pt = cid(rd, cs, q, qa_d, qa_dd)?;
    let st = skel.fk_full(q, &pt.qd, &pt.qdd);
    let (_, forces) = rd.rnea_at(&st);
    let fac = factor(rd, cs, &st)?;

    // Velocity projection G: identity over actuated rows, −J_u⁻¹ J_a over
    // unactuated ones.
    let gu = -fac
        .ju_lu
        .solve(&fac.ja)
        .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
    let mut g = DMatrix::zeros(nq, na);
    for (k, &i) in model.actuated_idx().iter().enumerate() {
        g[(i, k)] = 1.0;
    }
    for (r, &i) in model.unactuated_idx().iter().enumerate() {
        for k in 0..na {
            g[(i, k)] = gu[(r, k)];
        }
    }

    let zeros_n = DVector::zeros(nq);
    let zeros_a = DVector::zeros(na);

    let mut parts = CidPartials {
        du_dqa: DMatrix::zeros(na, na),
        du_dqda: DMatrix::zeros(na, na),
        du_dqdda: DMatrix::zeros(na, na),
        dl_dqa: DMatrix::zeros(nc, na),
        dl_dqda: DMatrix::zeros(nc, na),
        dl_dqdda: DMatrix::zeros(nc, na),
    };

    // ---- positions ----------------------------------------------------
    for k in 0..na {
        let dq: DVector<f64> = g.column(k).into_owned();
        // δq̇_u from the velocity-level rows: drate with δq̇ zeroed is the
        // affine part.
        let tg_v = skel.tangent_full(&st, &pt.qd, &pt.qdd, &dq, &zeros_n, &zeros_n);
        let rv = cs.drate_plain(skel, &st, &tg_v);
        let dqdu = -fac
            .ju_lu
            .solve(&rv)
            .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
        let dqd = scatter(model, &zeros_a, &dqdu);
        // δq̈_u likewise from the acceleration rows.
        let tg_a = skel.tangent_full(&st, &pt.qd, &pt.qdd, &dq, &dqd, &zeros_n);
        let ra = cs.daccel_plain(skel, &st, &tg_a);
        let dqddu = -fac
            .ju_lu
            .solve(&ra)
            .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
        let dqdd = scatter(model, &zeros_a, &dqddu);
        // Full sweep for the inverse-dynamics and Jacobian variations.
        let tg = skel.tangent_full(&st, &pt.qd, &pt.qdd, &dq, &dqd, &dqdd);
        let dtau = rd.rnea_tangent(&st, &forces, &tg);
        let djtl = cs.djac_t_mul(skel, &st, &tg, &pt.lambda);
        let dl = fac
            .jut_lu
            .solve(&(model.select_unactuated(&dtau) - model.select_unactuated(&djtl)))
            .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
        let du = model.select_actuated(&dtau)
            - model.select_actuated(&djtl)
            - fac.ja.transpose() * &dl;
        parts.du_dqa.set_column(k, &du);
        parts.dl_dqa.set_column(k, &dl);
    }

    // ---- velocities ---------------------------------------------------
    for k in 0..na {
        let dqd: DVector<f64> = g.column(k).into_owned();
        let tg_a = skel.tangent_full(&st, &pt.qd, &pt.qdd, &zeros_n, &dqd, &zeros_n);
        let ra = cs.daccel_plain(skel, &st, &tg_a);
        let dqddu = -fac
            .ju_lu
            .solve(&ra)
            .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
        let dqdd = scatter(model, &zeros_a, &dqddu);
        let tg = skel.tangent_full(&st, &pt.qd, &pt.qdd, &zeros_n, &dqd, &dqdd);
        let dtau = rd.rnea_tangent(&st, &forces, &tg);
        let dl = fac
            .jut_lu
            .solve(&model.select_unactuated(&dtau))
            .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
        let du = model.select_actuated(&dtau) - fac.ja.transpose() * &dl;
        parts.du_dqda.set_column(k, &du);
        parts.dl_dqda.set_column(k, &dl);
    }

    // ---- accelerations ------------------------------------------------
    // δq̈ = G e_k and δτ̃ = H G e_k; no sweeps needed beyond the mass
    // matrix.
    let h = rd.mass_matrix_at(&st);
    let hg = &h * &g;
    for k in 0..na {
        let dtau: DVector<f64> = hg.column(k).into_owned();
        let dl = fac
            .jut_lu
            .solve(&model.select_unactuated(&dtau))
            .ok_or(ConstraintError::Singular { ratio: 0.0 })?;
        let du = model.select_actuated(&dtau) - fac.ja.transpose() * &dl;
        parts.du_dqdda.set_column(k, &du);
        parts.dl_dqdda.set_column(k, &dl);
    }

    Ok((pt, parts))
}
