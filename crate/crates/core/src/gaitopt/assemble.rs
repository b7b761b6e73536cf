//! Row values, gradients, bounds, and sparsity pattern of the gait NLP.
//!
//! Every collocation node is independent: it solves the stance kinematics,
//! reconstructs reactions and inputs, and emits its rows. Boundary rows
//! couple the last two control points of a step to the first two of the
//! next, the post-impact velocity, and the impulse. Gradients of the
//! reconstructed quantities flow through the inverse-dynamics partials and
//! the directional kinematic sweeps; everything else is polynomial in the
//! decision variables.

use super::{ConeGeom, GaitProblem};
use crate::closure::{cid, cid_partials, gather_cols, projection, solve_ik};
use crate::solver::Evaluation;
use crate::trajectory::DecisionLayout;
use nalgebra::{DMatrix, DVector, Vector3};
use std::collections::HashMap;

/// Smoothing of the norms in the cost, ‖x‖ = √(xᵀx + EPS2).
const EPS2: f64 = 1e-8;

/// Lower/upper bounds of every constraint row, in emission order.
pub(crate) fn bounds(gp: &GaitProblem) -> (DVector<f64>, DVector<f64>) {
    let inf = f64::INFINITY;
    let mut lo = DVector::from_element(gp.n_cons, -inf);
    let mut hi = DVector::from_element(gp.n_cons, inf);
    for l in 0..gp.layout.steps {
        for i in 0..gp.cfg.nodes {
            let mut r = gp.node_row(l, i);
            for &(_, a, b) in &gp.limit_rows {
                lo[r] = a;
                hi[r] = b;
                r += 1;
            }
            for &(a, b) in &gp.torque_lims {
                lo[r] = a;
                hi[r] = b;
                r += 1;
            }
            for _ in 0..7 {
                lo[r] = 0.0;
                r += 1;
            }
            for _ in 0..2 {
                lo[r] = -gp.cfg.torso_tilt_max;
                hi[r] = gp.cfg.torso_tilt_max;
                r += 1;
            }
            lo[r] = gp.cfg.torso_z_min;
        }
        let sw = gp.swing_row(l);
        for r in sw..sw + 12 {
            lo[r] = 0.0;
            hi[r] = 0.0;
        }
        lo[sw + 12] = gp.cfg.apex_height;
        for c in 0..gp.clearance.len() {
            lo[sw + 13 + c] = 0.0;
        }
        if gp.layout.reset {
            let rr = gp.reset_row(l);
            let neq = gp.layout.nq + gp.layout.nu + 2 * gp.layout.na;
            for r in rr..rr + neq {
                lo[r] = 0.0;
                hi[r] = 0.0;
            }
            for r in rr + neq..rr + neq + 7 {
                lo[r] = 0.0;
            }
        }
    }
    if gp.cfg.pin_initial_qa.is_some() {
        for r in gp.pin_row()..gp.pin_row() + gp.layout.na {
            lo[r] = 0.0;
            hi[r] = 0.0;
        }
    }
    (lo, hi)
}

/// The seven contact-wrench rows (all bounded below by zero): normal force,
/// squared friction budget, torsion, and the CoP rectangle, expressed in the
/// stance sole frame. Returns values and gradients with respect to the world
/// force/moment pair.
pub(crate) fn cone_rows(
    g: &ConeGeom,
    symmetric_torsion: bool,
    fw: &Vector3<f64>,
    mw: &Vector3<f64>,
) -> ([f64; 7], [(Vector3<f64>, Vector3<f64>); 7]) {
    let rt = g.rot.transpose();
    let f = rt * fw;
    let m = rt * mw;
    let mu2 = g.mu * g.mu;
    let (tors, tf, tm) = if symmetric_torsion {
        (
            g.gamma * g.gamma * f.z * f.z - m.z * m.z,
            Vector3::new(0.0, 0.0, 2.0 * g.gamma * g.gamma * f.z),
            Vector3::new(0.0, 0.0, -2.0 * m.z),
        )
    } else {
        (
            g.gamma * f.z - m.z,
            Vector3::new(0.0, 0.0, g.gamma),
            Vector3::new(0.0, 0.0, -1.0),
        )
    };
    let vals = [
        f.z,
        mu2 * f.z * f.z - f.x * f.x - f.y * f.y,
        tors,
        g.ha * f.z - m.y,
        g.ha * f.z + m.y,
        g.hb * f.z - m.x,
        g.hb * f.z + m.x,
    ];
    let gf = [
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(-2.0 * f.x, -2.0 * f.y, 2.0 * mu2 * f.z),
        tf,
        Vector3::new(0.0, 0.0, g.ha),
        Vector3::new(0.0, 0.0, g.ha),
        Vector3::new(0.0, 0.0, g.hb),
        Vector3::new(0.0, 0.0, g.hb),
    ];
    let gm = [
        Vector3::zeros(),
        Vector3::zeros(),
        tm,
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(-1.0, 0.0, 0.0),
        Vector3::new(1.0, 0.0, 0.0),
    ];
    let mut grads = [(Vector3::zeros(), Vector3::zeros()); 7];
    for i in 0..7 {
        grads[i] = (g.rot * gf[i], g.rot * gm[i]);
    }
    (vals, grads)
}

/// Fixed nonzero positions of the constraint Jacobian.
pub(crate) fn pattern(gp: &GaitProblem) -> Vec<(usize, usize)> {
    let lay = &gp.layout;
    let (v, na) = (lay.degree, lay.na);
    let a_idx = gp.rd.model.actuated_idx();
    let mut swap_from = vec![0usize; na];
    for (k, &(m, _)) in gp.swap_to.iter().enumerate() {
        swap_from[m] = k;
    }
    let mut pat = Vec::new();
    for l in 0..lay.steps {
        let cstart = lay.coeffs(l).start;
        let ncoef = (v + 1) * na;
        let dense_row = |pat: &mut Vec<(usize, usize)>, row: usize| {
            for c in cstart..cstart + ncoef {
                pat.push((row, c));
            }
        };
        for i in 0..gp.cfg.nodes {
            let mut row = gp.node_row(l, i);
            for &(j, _, _) in &gp.limit_rows {
                if let Some(&k) = gp.a_pos.get(&j) {
                    for r in 0..=v {
                        pat.push((row, lay.coeff(l, r).start + k));
                    }
                } else {
                    dense_row(&mut pat, row);
                }
                row += 1;
            }
            for _ in 0..na + 7 + 3 {
                dense_row(&mut pat, row);
                row += 1;
            }
        }
        let sw = gp.swing_row(l);
        for row in sw..sw + gp.swing_block {
            dense_row(&mut pat, row);
        }
        if lay.reset {
            let nx = (l + 1) % lay.steps;
            let is_wrap = l + 1 == lay.steps;
            let rr = gp.reset_row(l);
            let qd_col = lay.reset_qd(l).start;
            let lam_col = lay.reset_lambda(l).start;
            for r in 0..lay.nq {
                let row = rr + r;
                for k in 0..na {
                    pat.push((row, lay.coeff(l, v - 1).start + k));
                    pat.push((row, lay.coeff(l, v).start + k));
                }
                for c in 0..lay.nq {
                    pat.push((row, qd_col + c));
                }
                for c in 0..lay.nu {
                    pat.push((row, lam_col + c));
                }
            }
            for r in 0..lay.nu {
                let row = rr + lay.nq + r;
                for k in 0..na {
                    pat.push((row, lay.coeff(l, v).start + k));
                }
                for c in 0..lay.nq {
                    pat.push((row, qd_col + c));
                }
            }
            for m in 0..na {
                let row = rr + lay.nq + lay.nu + m;
                pat.push((row, lay.coeff(nx, 0).start + m));
                let k = if is_wrap { swap_from[m] } else { m };
                pat.push((row, lay.coeff(l, v).start + k));
            }
            for m in 0..na {
                let row = rr + lay.nq + lay.nu + na + m;
                pat.push((row, lay.coeff(nx, 0).start + m));
                pat.push((row, lay.coeff(nx, 1).start + m));
                pat.push((row, qd_col + a_idx[m]));
            }
            let sr = gp.css[nx].stance_row().unwrap();
            for c7 in 0..7 {
                let row = rr + lay.nq + lay.nu + 2 * na + c7;
                for c in 0..6 {
                    pat.push((row, lam_col + sr + c));
                }
            }
        }
    }
    if gp.cfg.pin_initial_qa.is_some() {
        for k in 0..na {
            pat.push((gp.pin_row() + k, lay.coeff(0, 0).start + k));
        }
    }
    pat
}

struct Sink<'a> {
    idx: &'a HashMap<(usize, usize), usize>,
    out: Vec<(usize, f64)>,
}

impl Sink<'_> {
    fn add(&mut self, r: usize, c: usize, v: f64) -> Result<(), String> {
        let i = *self
            .idx
            .get(&(r, c))
            .ok_or_else(|| format!("jacobian pattern lacks ({r},{c})"))?;
        self.out.push((i, v));
        Ok(())
    }
}

/// Emits d(row)/d(coefficients of step `l`) for a quantity whose derivatives
/// with respect to the actuated position/velocity/acceleration at this node
/// are `ga`, `gv`, `gq`.
#[allow(clippy::too_many_arguments)]
fn chain(
    sink: &mut Sink,
    lay: &DecisionLayout,
    l: usize,
    row: usize,
    wts: &(DVector<f64>, DVector<f64>, DVector<f64>),
    t: f64,
    ga: Option<&DVector<f64>>,
    gv: Option<&DVector<f64>>,
    gq: Option<&DVector<f64>>,
) -> Result<(), String> {
    let (w0, w1, w2) = wts;
    for r in 0..=lay.degree {
        let base = lay.coeff(l, r).start;
        for k in 0..lay.na {
            let mut val = 0.0;
            if let Some(a) = ga {
                val += a[k] * w0[r];
            }
            if let Some(b) = gv {
                val += b[k] * w1[r] / t;
            }
            if let Some(c) = gq {
                val += c[k] * w2[r] / (t * t);
            }
            sink.add(row, base + k, val)?;
        }
    }
    Ok(())
}

struct NodeOut {
    cons: Vec<(usize, f64)>,
    jac: Vec<(usize, f64)>,
    cost: f64,
    cost_grad: Vec<(usize, f64)>,
    /// Full position and velocity at the step's final node.
    end: Option<(DVector<f64>, DVector<f64>)>,
}

fn eval_node(
    gp: &GaitProblem,
    l: usize,
    i: usize,
    cmat: &DMatrix<f64>,
    want_grad: bool,
) -> Result<NodeOut, String> {
    let lay = &gp.layout;
    let skel = &gp.rd.skel;
    let t = gp.cfg.duration;
    let wts = &gp.wts[i];
    let (w0, _, _) = wts;
    let qa = cmat.tr_mul(w0);
    let qda = cmat.tr_mul(&wts.1) / t;
    let qdda = cmat.tr_mul(&wts.2) / (t * t);

    let guess = gp.warm[l][i].lock().unwrap().clone();
    let ctx = |e: &dyn std::fmt::Display| format!("step {l} node {i}: {e}");
    // The warm slot is read, never written: every line-search probe starts
    // from the last accepted configuration, so a wild trial point cannot
    // poison the evaluations after it. The solution is parked in `pending`,
    // which `note_accept` promotes when the solver accepts this point.
    let sol = solve_ik(gp.rd, &gp.css[l], &qa, &guess, 1e-10).map_err(|e| ctx(&e))?;
    gp.pending[l][i].lock().unwrap().copy_from(&sol.q);

    let (pt, parts) = if want_grad {
        let (p, d) = cid_partials(gp.rd, &gp.css[l], &sol.q, &qda, &qdda).map_err(|e| ctx(&e))?;
        (p, Some(d))
    } else {
        (
            cid(gp.rd, &gp.css[l], &sol.q, &qda, &qdda).map_err(|e| ctx(&e))?,
            None,
        )
    };
    let st = skel.fk_pos(&pt.q);
    let g = if want_grad {
        Some(projection(gp.rd, &gp.css[l], &st).map_err(|e| ctx(&e))?)
    } else {
        None
    };

    let mut out = NodeOut {
        cons: Vec::new(),
        jac: Vec::new(),
        cost: 0.0,
        cost_grad: Vec::new(),
        end: None,
    };
    let mut sink = Sink {
        idx: &gp.pat_idx,
        out: Vec::new(),
    };
    let mut row = gp.node_row(l, i);

    // Joint limits over every limited non-base coordinate.
    for &(j, _, _) in &gp.limit_rows {
        out.cons.push((row, pt.q[j]));
        if want_grad {
            if let Some(&k) = gp.a_pos.get(&j) {
                for r in 0..=lay.degree {
                    sink.add(row, lay.coeff(l, r).start + k, w0[r])?;
                }
            } else {
                let gm = g.as_ref().unwrap();
                let ga = DVector::from_fn(lay.na, |k, _| gm[(j, k)]);
                chain(&mut sink, lay, l, row, wts, t, Some(&ga), None, None)?;
            }
        }
        row += 1;
    }

    // Actuator torque bounds.
    for m in 0..lay.na {
        out.cons.push((row, pt.u[m]));
        if want_grad {
            let p = parts.as_ref().unwrap();
            let ga = DVector::from_fn(lay.na, |k, _| p.du_dqa[(m, k)]);
            let gv = DVector::from_fn(lay.na, |k, _| p.du_dqda[(m, k)]);
            let gq = DVector::from_fn(lay.na, |k, _| p.du_dqdda[(m, k)]);
            chain(&mut sink, lay, l, row, wts, t, Some(&ga), Some(&gv), Some(&gq))?;
        }
        row += 1;
    }

    // Contact wrench cone on the stance reaction.
    let sr = gp.css[l].stance_row().unwrap();
    let fw = Vector3::new(pt.lambda[sr], pt.lambda[sr + 1], pt.lambda[sr + 2]);
    let mw = Vector3::new(pt.lambda[sr + 3], pt.lambda[sr + 4], pt.lambda[sr + 5]);
    let (cvals, cgrads) = cone_rows(&gp.cone[l], gp.cfg.symmetric_torsion, &fw, &mw);
    for c7 in 0..7 {
        out.cons.push((row, cvals[c7]));
        if want_grad {
            let p = parts.as_ref().unwrap();
            let (df, dm) = &cgrads[c7];
            let mk = |d: &DMatrix<f64>| {
                DVector::from_fn(lay.na, |k, _| {
                    (0..3)
                        .map(|c| df[c] * d[(sr + c, k)] + dm[c] * d[(sr + 3 + c, k)])
                        .sum()
                })
            };
            let ga = mk(&p.dl_dqa);
            let gv = mk(&p.dl_dqda);
            let gq = mk(&p.dl_dqdda);
            chain(&mut sink, lay, l, row, wts, t, Some(&ga), Some(&gv), Some(&gq))?;
        }
        row += 1;
    }

    // Torso posture: roll, pitch, height.
    for j in [gp.base.roll, gp.base.pitch, gp.base.z] {
        out.cons.push((row, pt.q[j]));
        if want_grad {
            let gm = g.as_ref().unwrap();
            let ga = DVector::from_fn(lay.na, |k, _| gm[(j, k)]);
            chain(&mut sink, lay, l, row, wts, t, Some(&ga), None, None)?;
        }
        row += 1;
    }

    // Swing-foot pose equalities at the step ends.
    let swr = gp.swing_row(l);
    if i == 0 || i == gp.cfg.nodes - 1 {
        let (set, base_row) = if i == 0 {
            (&gp.swing_sets[l].0, swr)
        } else {
            (&gp.swing_sets[l].1, swr + 6)
        };
        let vals = set.value(skel, &st);
        for rr in 0..6 {
            out.cons.push((base_row + rr, vals[rr]));
        }
        if want_grad {
            let gm = g.as_ref().unwrap();
            for k in 0..lay.na {
                let dq = gm.column(k).into_owned();
                let tg = skel.tangent_pos(&st, &dq);
                let dv = set.dvalue(skel, &st, &tg);
                for rr in 0..6 {
                    for r in 0..=lay.degree {
                        sink.add(base_row + rr, lay.coeff(l, r).start + k, dv[rr] * w0[r])?;
                    }
                }
            }
        }
    }

    // Swing-sole height rows: apex and ground clearance.
    let mut z_rows = Vec::new();
    if i == gp.apex_node {
        z_rows.push(swr + 12);
    }
    if let Some(p) = gp.clearance.iter().position(|&n| n == i) {
        z_rows.push(swr + 13 + p);
    }
    if !z_rows.is_empty() {
        let (body, local) = gp.swing_sole[l];
        let pw = st.body_point(skel, body, &local);
        for &rz in &z_rows {
            out.cons.push((rz, pw.z));
        }
        if want_grad {
            let gm = g.as_ref().unwrap();
            for k in 0..lay.na {
                let dq = gm.column(k).into_owned();
                let tg = skel.tangent_pos(&st, &dq);
                let dz = tg.dpoint(skel, body, &pw).z;
                for &rz in &z_rows {
                    for r in 0..=lay.degree {
                        sink.add(rz, lay.coeff(l, r).start + k, dz * w0[r])?;
                    }
                }
            }
        }
    }

    // Mean-torque cost share of this node.
    let nrm = (pt.u.dot(&pt.u) + EPS2).sqrt();
    out.cost = gp.cfg.w_effort / gp.cfg.nodes as f64 * nrm;
    if want_grad {
        let p = parts.as_ref().unwrap();
        let scale = gp.cfg.w_effort / gp.cfg.nodes as f64 / nrm;
        let ga = p.du_dqa.tr_mul(&pt.u) * scale;
        let gv = p.du_dqda.tr_mul(&pt.u) * scale;
        let gq = p.du_dqdda.tr_mul(&pt.u) * scale;
        let (w0, w1, w2) = wts;
        for r in 0..=lay.degree {
            let base = lay.coeff(l, r).start;
            for k in 0..lay.na {
                let v = ga[k] * w0[r] + gv[k] * w1[r] / t + gq[k] * w2[r] / (t * t);
                out.cost_grad.push((base + k, v));
            }
        }
    }

    if i == gp.cfg.nodes - 1 {
        out.end = Some((pt.q.clone(), pt.qd.clone()));
    }
    out.jac = sink.out;
    Ok(out)
}

/// Initial-rate and initial-acceleration cost terms of one step.
fn start_cost(
    gp: &GaitProblem,
    cmat: &DMatrix<f64>,
    l: usize,
    want_grad: bool,
    cost: &mut f64,
    grad: &mut DVector<f64>,
) {
    let lay = &gp.layout;
    let t = gp.cfg.duration;
    let (_, w1, w2) = &gp.wts[0];
    let qda = cmat.tr_mul(w1) / t;
    let qdda = cmat.tr_mul(w2) / (t * t);
    let n1 = (qda.dot(&qda) + EPS2).sqrt();
    let n2 = (qdda.dot(&qdda) + EPS2).sqrt();
    *cost += gp.cfg.w_rate * n1 + gp.cfg.w_accel * n2;
    if want_grad {
        for r in 0..=lay.degree {
            let base = lay.coeff(l, r).start;
            for k in 0..lay.na {
                grad[base + k] += gp.cfg.w_rate * qda[k] / n1 * w1[r] / t
                    + gp.cfg.w_accel * qdda[k] / n2 * w2[r] / (t * t);
            }
        }
    }
}

/// Boundary rows of step `l`: plastic-impact momentum balance against the
/// next stance, zero post-impact contact rate, actuated continuity, and the
/// impulse cone. At the wrap the end state is mapped into the next cycle
/// (base shifted back by the cycle travel; mirrored in symmetric mode).
#[allow(clippy::too_many_arguments)]
fn boundary(
    gp: &GaitProblem,
    y: &DVector<f64>,
    cmats: &[DMatrix<f64>],
    l: usize,
    end: &(DVector<f64>, DVector<f64>),
    want_grad: bool,
    cons: &mut DVector<f64>,
    sink: &mut Sink,
) -> Result<(), String> {
    let lay = &gp.layout;
    let model = &gp.rd.model;
    let skel = &gp.rd.skel;
    let (na, nq, nu, v) = (lay.na, lay.nq, lay.nu, lay.degree);
    let t = gp.cfg.duration;
    let nx = (l + 1) % lay.steps;
    let is_wrap = l + 1 == lay.steps;
    let (qm, qdm) = end;
    let table = if is_wrap && gp.wrap_swap {
        model.symmetry.as_ref()
    } else {
        None
    };
    let mut qw = match table {
        Some(tb) => tb.apply(qm),
        None => qm.clone(),
    };
    if is_wrap {
        qw[gp.base.x] -= lay.steps as f64 * gp.cfg.step_length;
    }
    let qdw = match table {
        Some(tb) => tb.apply(qdm),
        None => qdm.clone(),
    };

    let qd_r = y.rows(lay.reset_qd(l).start, nq).into_owned();
    let lam = y.rows(lay.reset_lambda(l).start, nu).into_owned();

    let zn = DVector::zeros(nq);
    let st_w = skel.fk_full(&qw, &zn, &zn);
    let h = gp.rd.mass_matrix_at(&st_w);
    let jn = gp.css[nx].vel_jacobian(skel, &st_w);
    let w = &qd_r - &qdw;
    let momentum = &h * &w - jn.transpose() * &lam;
    let contact = &jn * &qd_r;

    let rr = gp.reset_row(l);
    for r in 0..nq {
        cons[rr + r] = momentum[r];
    }
    for r in 0..nu {
        cons[rr + nq + r] = contact[r];
    }

    let bv = cmats[l].row(v);
    let b0n = cmats[nx].row(0);
    let b1n = cmats[nx].row(1);
    for m in 0..na {
        cons[rr + nq + nu + m] = b0n[m];
    }
    for k in 0..na {
        let (m, s) = if is_wrap { gp.swap_to[k] } else { (k, 1.0) };
        cons[rr + nq + nu + m] -= s * bv[k];
    }
    let a_idx = model.actuated_idx();
    for m in 0..na {
        cons[rr + nq + nu + na + m] = v as f64 * (b1n[m] - b0n[m]) / t - qd_r[a_idx[m]];
    }

    let sr = gp.css[nx].stance_row().unwrap();
    let fw = Vector3::new(lam[sr], lam[sr + 1], lam[sr + 2]);
    let mw = Vector3::new(lam[sr + 3], lam[sr + 4], lam[sr + 5]);
    let (cvals, cgrads) = cone_rows(&gp.cone[nx], gp.cfg.symmetric_torsion, &fw, &mw);
    for c7 in 0..7 {
        cons[rr + nq + nu + 2 * na + c7] = cvals[c7];
    }

    if !want_grad {
        return Ok(());
    }

    let qd_col = lay.reset_qd(l).start;
    let lam_col = lay.reset_lambda(l).start;
    for r in 0..nq {
        for c in 0..nq {
            sink.add(rr + r, qd_col + c, h[(r, c)])?;
        }
        for c in 0..nu {
            sink.add(rr + r, lam_col + c, -jn[(c, r)])?;
        }
    }
    for r in 0..nu {
        for c in 0..nq {
            sink.add(rr + nq + r, qd_col + c, jn[(r, c)])?;
        }
    }
    for k in 0..na {
        let (m, s) = if is_wrap { gp.swap_to[k] } else { (k, 1.0) };
        sink.add(rr + nq + nu + m, lay.coeff(l, v).start + k, -s)?;
    }
    for m in 0..na {
        sink.add(rr + nq + nu + m, lay.coeff(nx, 0).start + m, 1.0)?;
        let row = rr + nq + nu + na + m;
        sink.add(row, lay.coeff(nx, 0).start + m, -(v as f64) / t)?;
        sink.add(row, lay.coeff(nx, 1).start + m, v as f64 / t)?;
        sink.add(row, qd_col + a_idx[m], -1.0)?;
    }
    for c7 in 0..7 {
        let row = rr + nq + nu + 2 * na + c7;
        let (df, dm) = &cgrads[c7];
        for c in 0..3 {
            sink.add(row, lam_col + sr + c, df[c])?;
            sink.add(row, lam_col + sr + 3 + c, dm[c])?;
        }
    }

    // End-state dependence: the final control points of step `l` move q⁻
    // (through the stance kinematics) and q̇⁻ (through the projection), and
    // with them the mass matrix, the next stance Jacobian, and the mapped
    // end velocity.
    let stm = skel.fk_pos(qm);
    let gl = projection(gp.rd, &gp.css[l], &stm).map_err(|e| format!("boundary {l}: {e}"))?;
    let jl = gp.css[l].vel_jacobian(skel, &stm);
    let ju_lu = gather_cols(&jl, model.unactuated_idx()).lu();
    let stm_full = skel.fk_full(qm, qdm, &zn);
    let st_a = skel.fk_full(&qw, &zn, &w);
    let (_, f_a) = gp.rd.rnea_at(&st_a);
    let (_, f_b) = gp.rd.rnea_at(&st_w);
    let st_r = skel.fk_full(&qw, &qd_r, &zn);
    let za = DVector::zeros(na);
    for k in 0..na {
        // Through the end position (enters via the last control point).
        let dqm = gl.column(k).into_owned();
        let tgm = skel.tangent_full(&stm_full, qdm, &zn, &dqm, &zn, &zn);
        let rv = gp.css[l].drate_plain(skel, &stm_full, &tgm);
        let dqdu = -(ju_lu
            .solve(&rv)
            .ok_or_else(|| format!("boundary {l}: singular stance jacobian"))?);
        let dqdm = model.assemble_q(&za, &dqdu);
        let (dqw, dqdw) = match table {
            Some(tb) => (tb.apply(&dqm), tb.apply(&dqdm)),
            None => (dqm.clone(), dqdm.clone()),
        };
        let tga = skel.tangent_full(&st_a, &zn, &w, &dqw, &zn, &zn);
        let dta = gp.rd.rnea_tangent(&st_a, &f_a, &tga);
        let tgb = skel.tangent_full(&st_w, &zn, &zn, &dqw, &zn, &zn);
        let dtb = gp.rd.rnea_tangent(&st_w, &f_b, &tgb);
        let tgw = skel.tangent_pos(&st_w, &dqw);
        let djtl = gp.css[nx].djac_t_mul(skel, &st_w, &tgw, &lam);
        let dmom = (dta - dtb) - &h * &dqdw - djtl;
        let cv = lay.coeff(l, v).start + k;
        for r in 0..nq {
            sink.add(rr + r, cv, dmom[r])?;
        }
        let tgr = skel.tangent_full(&st_r, &qd_r, &zn, &dqw, &zn, &zn);
        let dcon = gp.css[nx].drate_plain(skel, &st_r, &tgr);
        for r in 0..nu {
            sink.add(rr + nq + r, cv, dcon[r])?;
        }

        // Through the end velocity (enters via the last two control points).
        let dqd2 = gl.column(k).into_owned();
        let dqd2w = match table {
            Some(tb) => tb.apply(&dqd2),
            None => dqd2,
        };
        let hdq = &h * dqd2w;
        let scale = v as f64 / t;
        let cvm = lay.coeff(l, v - 1).start + k;
        for r in 0..nq {
            sink.add(rr + r, cv, -scale * hdq[r])?;
            sink.add(rr + r, cvm, scale * hdq[r])?;
        }
    }
    Ok(())
}

fn run_nodes(
    gp: &GaitProblem,
    cmats: &[DMatrix<f64>],
    want_grad: bool,
) -> Result<Vec<NodeOut>, String> {
    let ids: Vec<(usize, usize)> = (0..gp.layout.steps)
        .flat_map(|l| (0..gp.cfg.nodes).map(move |i| (l, i)))
        .collect();
    if gp.threads <= 1 {
        return ids
            .iter()
            .map(|&(l, i)| eval_node(gp, l, i, &cmats[l], want_grad))
            .collect();
    }
    let chunk = ids.len().div_ceil(gp.threads);
    let mut outs: Vec<Option<NodeOut>> = (0..ids.len()).map(|_| None).collect();
    let mut err: Option<String> = None;
    std::thread::scope(|sc| {
        let mut handles = Vec::new();
        for (ci, ch) in ids.chunks(chunk).enumerate() {
            handles.push((
                ci,
                sc.spawn(move || -> Result<Vec<NodeOut>, String> {
                    ch.iter()
                        .map(|&(l, i)| eval_node(gp, l, i, &cmats[l], want_grad))
                        .collect()
                }),
            ));
        }
        for (ci, h) in handles {
            match h.join() {
                Ok(Ok(v)) => {
                    for (j, o) in v.into_iter().enumerate() {
                        outs[ci * chunk + j] = Some(o);
                    }
                }
                Ok(Err(e)) => {
                    if err.is_none() {
                        err = Some(e);
                    }
                }
                Err(_) => {
                    if err.is_none() {
                        err = Some("a node evaluation panicked".into());
                    }
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(outs.into_iter().map(|o| o.unwrap()).collect())
}

pub(crate) fn assemble(
    gp: &GaitProblem,
    y: &DVector<f64>,
    want_grad: bool,
) -> Result<Evaluation, String> {
    let lay = &gp.layout;
    let cmats: Vec<DMatrix<f64>> = (0..lay.steps).map(|l| lay.coeff_matrix(y, l)).collect();
    let outs = run_nodes(gp, &cmats, want_grad)?;

    let mut cost = 0.0;
    let mut grad = DVector::zeros(if want_grad { lay.n_vars() } else { 0 });
    let mut cons = DVector::zeros(gp.n_cons);
    let mut jac = vec![0.0; if want_grad { gp.pattern.len() } else { 0 }];
    for o in &outs {
        cost += o.cost;
        for &(r, val) in &o.cons {
            cons[r] = val;
        }
        for &(i, val) in &o.jac {
            jac[i] += val;
        }
        for &(c, val) in &o.cost_grad {
            grad[c] += val;
        }
    }
    for l in 0..lay.steps {
        start_cost(gp, &cmats[l], l, want_grad, &mut cost, &mut grad);
    }

    let mut sink = Sink {
        idx: &gp.pat_idx,
        out: Vec::new(),
    };
    if lay.reset {
        for l in 0..lay.steps {
            let end_idx = l * gp.cfg.nodes + gp.cfg.nodes - 1;
            let end = outs[end_idx].end.as_ref().unwrap();
            boundary(gp, y, &cmats, l, end, want_grad, &mut cons, &mut sink)?;
        }
    }
    if let Some(pin) = &gp.cfg.pin_initial_qa {
        let pr = gp.pin_row();
        for k in 0..lay.na {
            cons[pr + k] = cmats[0][(0, k)] - pin[k];
            if want_grad {
                sink.add(pr + k, lay.coeff(0, 0).start + k, 1.0)?;
            }
        }
    }
    for (i, val) in sink.out {
        jac[i] += val;
    }

    Ok(Evaluation {
        cost,
        cost_grad: grad,
        cons,
        jac,
    })
}
