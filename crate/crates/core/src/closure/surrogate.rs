//! A cheap, explicit approximation of the inverse kinematics, used to seed
//! the Newton solver.
//!
//! The unactuated coordinates split into two groups with very different
//! structure. Loop-passive joints (the coordinates inside closed chains) are
//! smooth functions of a *few* actuated joints — often exactly one — so each
//! is fitted with a low-order trigonometric series per dependent actuated
//! axis, the axis mapped onto [0, π] over its travel range. Axes the
//! coordinate provably does not depend on get no terms at all, so their
//! coefficients are exactly zero. The floating base, when present, needs no
//! fitting: once the leg coordinates are known, the base pose follows in
//! closed form from the stance sole target and the base-relative sole pose.

use super::{newton_ik, ConstraintError, ConstraintSet, Stance};
use crate::dynamics::RobotDyn;
use crate::math::euler_zyx;
use crate::model::JointKind;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default trig-series order per dependent axis.
const DEFAULT_ORDER: usize = 4;
/// Default sweep samples per dependent axis.
const DEFAULT_SAMPLES: usize = 80;

#[derive(Clone, Debug)]
struct AxisSeries {
    /// Index into the actuated coordinate vector.
    axis: usize,
    lo: f64,
    hi: f64,
    cos_c: Vec<f64>,
    sin_c: Vec<f64>,
}

impl AxisSeries {
    fn phase(&self, v: f64) -> f64 {
        let t = (v.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo);
        std::f64::consts::PI * t
    }

    fn eval(&self, qa: &DVector<f64>) -> f64 {
        let s = self.phase(qa[self.axis]);
        let mut y = 0.0;
        for j in 0..self.cos_c.len() {
            let js = (j + 1) as f64 * s;
            y += self.cos_c[j] * js.cos() + self.sin_c[j] * js.sin();
        }
        y
    }
}

#[derive(Clone, Debug)]
struct PassiveSeries {
    /// Full-vector coordinate index of the passive joint.
    coord: usize,
    constant: f64,
    terms: Vec<AxisSeries>,
}

impl PassiveSeries {
    fn eval(&self, qa: &DVector<f64>) -> f64 {
        self.constant + self.terms.iter().map(|t| t.eval(qa)).sum::<f64>()
    }
}

/// Fitted inverse-kinematics seed generator.
#[derive(Clone, Debug)]
pub struct IkSurrogate {
    series: Vec<PassiveSeries>,
    /// Largest |series − exact| over the fitting samples.
    pub fit_residual: f64,
}

impl IkSurrogate {
    /// A surrogate with no fitted series. `guess` still reconstructs the
    /// base pose from a stance target; loop passives stay at zero.
    pub fn empty() -> IkSurrogate {
        IkSurrogate {
            series: Vec::new(),
            fit_residual: 0.0,
        }
    }

    /// Actuated-axis dependencies of each fitted passive coordinate, as
    /// `(coordinate index, actuated axes with nonzero terms)`.
    pub fn dependencies(&self) -> Vec<(usize, Vec<usize>)> {
        self.series
            .iter()
            .map(|s| (s.coord, s.terms.iter().map(|t| t.axis).collect()))
            .collect()
    }

    /// Series prediction for one passive coordinate (by full-vector index),
    /// if it was fitted.
    pub fn predict(&self, coord: usize, qa: &DVector<f64>) -> Option<f64> {
        self.series
            .iter()
            .find(|s| s.coord == coord)
            .map(|s| s.eval(qa))
    }

    /// Full-length initial guess: actuated entries from `qa`, loop passives
    /// from the fitted series, and — when a stance target is given and the
    /// model has a floating base — the base pose reconstructed in closed
    /// form so the stance sole lands on its target.
    pub fn guess(&self, rd: &RobotDyn, qa: &DVector<f64>, stance: Option<&Stance>) -> DVector<f64> {
        let model = &rd.model;
        let mut q = DVector::zeros(model.nq());
        for (k, &i) in model.actuated_idx().iter().enumerate() {
            q[i] = qa[k];
        }
        for s in &self.series {
            q[s.coord] = s.eval(qa);
        }
        if let (Some(b), Some(stn)) = (model.base_coords(), stance) {
            if let Some(patch) = model.contact(stn.side) {
                // With the base coordinates zeroed, forward kinematics gives
                // the sole pose relative to the base joint's origin frame.
                let st = rd.skel.fk_pos(&q);
                let sole = st.body_frame(&rd.skel, patch.body).compose(&patch.frame);
                let origin = model
                    .joints
                    .iter()
                    .find(|j| j.kind == JointKind::Floating6)
                    .map(|j| j.origin)
                    .unwrap_or_else(crate::spatial::Frame::identity);
                let local = origin.inverse().compose(&stn.target.compose(&sole.inverse()));
                let (roll, pitch, yaw) = euler_zyx(&local.rot);
                q[b.x] = local.pos.x;
                q[b.y] = local.pos.y;
                q[b.z] = local.pos.z;
                q[b.yaw] = yaw;
                q[b.pitch] = pitch;
                q[b.roll] = roll;
            }
        }
        q
    }

    /// Line-oriented text form, stable across runs, suitable for caching on
    /// disk and for diffing.
    pub fn to_text(&self) -> String {
        use crate::trajectory::fmt_f64 as f;
        let mut out = String::from("# fitted inverse-kinematics seed series\n");
        out.push_str(&format!("residual={}\n", f(self.fit_residual)));
        for s in &self.series {
            out.push_str(&format!("series coord={} constant={}\n", s.coord, f(s.constant)));
            for t in &s.terms {
                let join = |c: &[f64]| c.iter().map(|&x| f(x)).collect::<Vec<_>>().join(",");
                out.push_str(&format!(
                    "term axis={} lo={} hi={} cos={} sin={}\n",
                    t.axis,
                    f(t.lo),
                    f(t.hi),
                    join(&t.cos_c),
                    join(&t.sin_c),
                ));
            }
        }
        out
    }

    /// Parses the `to_text` form back.
    pub fn parse_text(text: &str) -> Result<IkSurrogate, ConstraintError> {
        let bad = |line: usize, what: &str| ConstraintError::BadCache(format!("line {line}: {what}"));
        let mut sur = IkSurrogate::empty();
        let mut saw_residual = false;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let ln = ln + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("residual=") {
                sur.fit_residual = rest
                    .parse::<f64>()
                    .map_err(|_| bad(ln, "unreadable residual"))?;
                saw_residual = true;
            } else if let Some(rest) = line.strip_prefix("series ") {
                let mut coord = None;
                let mut constant = None;
                for field in rest.split_whitespace() {
                    if let Some(v) = field.strip_prefix("coord=") {
                        coord = v.parse::<usize>().ok();
                    } else if let Some(v) = field.strip_prefix("constant=") {
                        constant = v.parse::<f64>().ok();
                    }
                }
                let (Some(coord), Some(constant)) = (coord, constant) else {
                    return Err(bad(ln, "series needs coord= and constant="));
                };
                sur.series.push(PassiveSeries {
                    coord,
                    constant,
                    terms: Vec::new(),
                });
            } else if let Some(rest) = line.strip_prefix("term ") {
                let cur = sur
                    .series
                    .last_mut()
                    .ok_or_else(|| bad(ln, "term before any series"))?;
                let mut axis = None;
                let mut lo = None;
                let mut hi = None;
                let mut cos_c = None;
                let mut sin_c = None;
                let list = |v: &str| -> Option<Vec<f64>> {
                    v.split(',').map(|x| x.parse::<f64>().ok()).collect()
                };
                for field in rest.split_whitespace() {
                    if let Some(v) = field.strip_prefix("axis=") {
                        axis = v.parse::<usize>().ok();
                    } else if let Some(v) = field.strip_prefix("lo=") {
                        lo = v.parse::<f64>().ok();
                    } else if let Some(v) = field.strip_prefix("hi=") {
                        hi = v.parse::<f64>().ok();
                    } else if let Some(v) = field.strip_prefix("cos=") {
                        cos_c = list(v);
                    } else if let Some(v) = field.strip_prefix("sin=") {
                        sin_c = list(v);
                    }
                }
                let (Some(axis), Some(lo), Some(hi), Some(cos_c), Some(sin_c)) =
                    (axis, lo, hi, cos_c, sin_c)
                else {
                    return Err(bad(ln, "term needs axis=, lo=, hi=, cos=, sin="));
                };
                if cos_c.len() != sin_c.len() || cos_c.is_empty() {
                    return Err(bad(ln, "cos and sin lists must match and be non-empty"));
                }
                if !(hi > lo) {
                    return Err(bad(ln, "term needs hi > lo"));
                }
                cur.terms.push(AxisSeries {
                    axis,
                    lo,
                    hi,
                    cos_c,
                    sin_c,
                });
            } else {
                return Err(bad(ln, "unrecognized directive"));
            }
        }
        if !saw_residual {
            return Err(ConstraintError::BadCache("missing residual line".into()));
        }
        Ok(sur)
    }
}

/// Fits the surrogate for a model's loop closures with the default grid
/// density and series order. Models without passive loop coordinates yield
/// an empty (pass-through) surrogate.
pub fn fit_ik(rd: &RobotDyn, seed: u64) -> Result<IkSurrogate, ConstraintError> {
    fit_ik_with(rd, seed, DEFAULT_SAMPLES, DEFAULT_ORDER)
}

/// Fits the surrogate with an explicit sweep density (`samples` points per
/// actuated axis) and trig-series order.
pub fn fit_ik_with(
    rd: &RobotDyn,
    seed: u64,
    samples_per_axis: usize,
    order: usize,
) -> Result<IkSurrogate, ConstraintError> {
    if samples_per_axis < 2 {
        return Err(ConstraintError::GridTooSmall(samples_per_axis));
    }
    let order = order.max(1);
    let model = &rd.model;
    let base: Vec<usize> = model
        .base_coords()
        .map(|b| vec![b.x, b.y, b.z, b.yaw, b.pitch, b.roll])
        .unwrap_or_default();
    let passives: Vec<usize> = model
        .unactuated_idx()
        .iter()
        .copied()
        .filter(|i| !base.contains(i))
        .collect();
    if passives.is_empty() {
        return Ok(IkSurrogate {
            series: Vec::new(),
            fit_residual: 0.0,
        });
    }
    let cs = ConstraintSet::new(model, None)?;
    if cs.n_rows() != passives.len() {
        return Err(ConstraintError::NotSquare {
            rows: cs.n_rows(),
            unknowns: passives.len(),
        });
    }

    let na = model.na();
    let limits: Vec<(f64, f64)> = model
        .actuated_idx()
        .iter()
        .map(|&i| model.coords()[i].limits.unwrap_or((-1.0, 1.0)))
        .collect();

    // Solve the loops at the reference posture first; everything continues
    // from here.
    let solve = |qa: &DVector<f64>, guess: &DVector<f64>| -> Option<DVector<f64>> {
        let mut q0 = DVector::zeros(model.nq());
        for (k, &i) in model.actuated_idx().iter().enumerate() {
            q0[i] = qa[k];
        }
        for (k, &i) in passives.iter().enumerate() {
            q0[i] = guess[k];
        }
        let sol = newton_ik(rd, &cs, q0, &passives, 1e-11).ok()?;
        Some(DVector::from_iterator(
            passives.len(),
            passives.iter().map(|&i| sol.q[i]),
        ))
    };

    let qa_ref = DVector::zeros(na);
    let p_ref = solve(&qa_ref, &DVector::zeros(passives.len())).ok_or(
        ConstraintError::IkNoConverge {
            iters: 50,
            residual: f64::NAN,
        },
    )?;

    // Dependency detection: the passive sensitivity −J_p⁻¹ J_a at a handful
    // of feasible points. Common-ancestor coordinates drop out of closure
    // rows exactly, so absent couplings are structural zeros, not small
    // numbers.
    let mut dep = vec![vec![false; na]; passives.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe_points: Vec<DVector<f64>> = vec![qa_ref.clone()];
    for _ in 0..8 {
        let qa = DVector::from_iterator(
            na,
            limits
                .iter()
                .map(|&(lo, hi)| rng.gen_range(0.25_f64..0.75) * (hi - lo) + lo),
        );
        probe_points.push(qa);
    }
    let mut p_prev = p_ref.clone();
    for qa in &probe_points {
        let Some(p) = solve(qa, &p_prev) else { continue };
        p_prev = p.clone();
        let mut q = DVector::zeros(model.nq());
        for (k, &i) in model.actuated_idx().iter().enumerate() {
            q[i] = qa[k];
        }
        for (k, &i) in passives.iter().enumerate() {
            q[i] = p[k];
        }
        let st = rd.skel.fk_pos(&q);
        let j = cs.vel_jacobian(&rd.skel, &st);
        let jp = super::gather_cols(&j, &passives);
        let ja = super::gather_cols(&j, model.actuated_idx());
        if let Some(gp) = jp.lu().solve(&ja) {
            for i in 0..passives.len() {
                for k in 0..na {
                    if gp[(i, k)].abs() > 1e-9 {
                        dep[i][k] = true;
                    }
                }
            }
        }
    }

    // One sweep per actuated axis that any passive depends on, walking
    // outward from the reference so Newton always continues from a close
    // neighbor.
    let sweep_axes: Vec<usize> = (0..na)
        .filter(|&k| dep.iter().any(|d| d[k]))
        .collect();
    let n_sweep = samples_per_axis;
    let mut samples: Vec<(DVector<f64>, DVector<f64>)> = vec![(qa_ref.clone(), p_ref.clone())];
    for &k in &sweep_axes {
        let (lo, hi) = limits[k];
        let ts: Vec<f64> = (0..n_sweep)
            .map(|i| lo + (hi - lo) * i as f64 / (n_sweep - 1) as f64)
            .collect();
        let i0 = (0..n_sweep).min_by(|&a, &b| ts[a].abs().total_cmp(&ts[b].abs())).unwrap();
        for dir in [1i64, -1] {
            let mut p_prev = p_ref.clone();
            let mut i = i0 as i64;
            while i >= 0 && (i as usize) < n_sweep {
                let mut qa = qa_ref.clone();
                qa[k] = ts[i as usize];
                if let Some(p) = solve(&qa, &p_prev) {
                    p_prev = p.clone();
                    samples.push((qa, p));
                }
                i += dir;
            }
        }
    }

    // Per-passive least squares on the additive per-axis series.
    let mut series = Vec::new();
    let mut fit_residual = 0.0_f64;
    for (pi, &coord) in passives.iter().enumerate() {
        let axes: Vec<usize> = (0..na).filter(|&k| dep[pi][k]).collect();
        let ncol = 1 + 2 * order * axes.len();
        let mut a = DMatrix::zeros(samples.len(), ncol);
        let mut b = DVector::zeros(samples.len());
        for (r, (qa, p)) in samples.iter().enumerate() {
            a[(r, 0)] = 1.0;
            for (t, &k) in axes.iter().enumerate() {
                let (lo, hi) = limits[k];
                let s = std::f64::consts::PI * ((qa[k] - lo) / (hi - lo));
                for j in 0..order {
                    let js = (j + 1) as f64 * s;
                    a[(r, 1 + 2 * order * t + j)] = js.cos();
                    a[(r, 1 + 2 * order * t + order + j)] = js.sin();
                }
            }
            b[r] = p[pi];
        }
        let coef = a
            .clone()
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|_| ConstraintError::Singular { ratio: 0.0 })?;
        let resid = (&a * &coef - &b).amax();
        fit_residual = fit_residual.max(resid);
        let mut terms = Vec::new();
        for (t, &k) in axes.iter().enumerate() {
            let (lo, hi) = limits[k];
            let mut cos_c = vec![0.0; order];
            let mut sin_c = vec![0.0; order];
            for j in 0..order {
                cos_c[j] = coef[1 + 2 * order * t + j];
                sin_c[j] = coef[1 + 2 * order * t + order + j];
            }
            terms.push(AxisSeries {
                axis: k,
                lo,
                hi,
                cos_c,
                sin_c,
            });
        }
        series.push(PassiveSeries {
            coord,
            constant: coef[0],
            terms,
        });
    }

    Ok(IkSurrogate {
        series,
        fit_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::{solve_ik, ConstraintSet};
    use crate::model::bundled::bundled_model;
    use crate::model::Side;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};

    fn dyn_of(name: &str) -> RobotDyn {
        RobotDyn::new(bundled_model(name).unwrap()).unwrap()
    }

    #[test]
    fn rigid_models_fit_trivially() {
        let rd = dyn_of("double_pendulum");
        let sur = fit_ik(&rd, 7).unwrap();
        assert_eq!(sur.dependencies().len(), 0);
        assert_eq!(sur.fit_residual, 0.0);
    }

    #[test]
    fn fourbar_series_tracks_the_crank() {
        let rd = dyn_of("fourbar");
        let sur = fit_ik(&rd, 7).unwrap();
        assert!(sur.fit_residual < 1e-2, "fit residual {}", sur.fit_residual);
        let deps = sur.dependencies();
        assert_eq!(deps.len(), 2);
        for (_, axes) in &deps {
            assert_eq!(axes, &vec![0]);
        }
        // Seeded Newton converges in very few steps across the full travel.
        let cs = ConstraintSet::new(&rd.model, None).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut worst = 0usize;
        for _ in 0..300 {
            let qa = DVector::from_element(1, rng.gen_range(-0.2..1.6));
            let guess = sur.guess(&rd, &qa, None);
            let sol = solve_ik(&rd, &cs, &qa, &guess, 1e-10).unwrap();
            worst = worst.max(sol.iters);
        }
        assert!(worst <= 10, "worst iteration count {worst}");
    }

    #[test]
    fn minibiped_series_depends_only_on_its_knee_drive() {
        let rd = dyn_of("minibiped");
        let sur = fit_ik(&rd, 7).unwrap();
        assert!(sur.fit_residual < 1e-2, "fit residual {}", sur.fit_residual);
        // Passives: l_knee, l_rod_pivot, r_knee, r_rod_pivot. Actuated axis 3
        // is l_knee_drive, axis 9 is r_knee_drive (6 actuated per leg).
        let deps = sur.dependencies();
        assert_eq!(deps.len(), 4);
        let names: Vec<&str> = deps
            .iter()
            .map(|(c, _)| rd.model.coords()[*c].name.as_str())
            .collect();
        assert_eq!(names, vec!["l_knee", "l_rod_pivot", "r_knee", "r_rod_pivot"]);
        let axis_names: Vec<Vec<&str>> = deps
            .iter()
            .map(|(_, axes)| {
                axes.iter()
                    .map(|&k| rd.model.coords()[rd.model.actuated_idx()[k]].name.as_str())
                    .collect()
            })
            .collect();
        assert_eq!(
            axis_names,
            vec![
                vec!["l_knee_drive"],
                vec!["l_knee_drive"],
                vec!["r_knee_drive"],
                vec!["r_knee_drive"]
            ]
        );
    }

    #[test]
    fn text_round_trip_preserves_predictions() {
        let rd = dyn_of("minibiped");
        let sur = fit_ik(&rd, 7).unwrap();
        let text = sur.to_text();
        let back = IkSurrogate::parse_text(&text).unwrap();
        assert_eq!(back.fit_residual, sur.fit_residual);
        assert_eq!(back.dependencies(), sur.dependencies());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let qa = DVector::from_fn(rd.model.na(), |_, _| rng.gen_range(-0.5..0.5));
            for (coord, _) in sur.dependencies() {
                assert_eq!(back.predict(coord, &qa), sur.predict(coord, &qa));
            }
        }
    }

    #[test]
    fn malformed_cache_text_is_rejected() {
        assert!(IkSurrogate::parse_text("series coord=1 constant=0.0\n").is_err());
        assert!(IkSurrogate::parse_text("residual=0.0\nterm axis=0 lo=0 hi=1 cos=1 sin=1\n").is_err());
        assert!(IkSurrogate::parse_text("residual=0.0\nwhat even\n").is_err());
        assert!(IkSurrogate::parse_text("residual=zero\n").is_err());
    }

    #[test]
    fn tiny_fit_grids_are_rejected() {
        let rd = dyn_of("fourbar");
        let err = fit_ik_with(&rd, 7, 1, 4).unwrap_err();
        assert!(err.to_string().contains("grid too small"), "{err}");
    }

    #[test]
    fn stance_guess_seeds_full_ik() {
        let rd = dyn_of("minibiped");
        let sur = fit_ik(&rd, 7).unwrap();
        let mut q0 = DVector::zeros(rd.model.nq());
        q0[rd.model.base_coords().unwrap().z] = 0.53;
        let st = rd.skel.fk_pos(&q0);
        let patch = rd.model.contact(Side::Left).unwrap();
        let stance = Stance {
            side: Side::Left,
            target: st.body_frame(&rd.skel, patch.body).compose(&patch.frame),
        };
        let cs = ConstraintSet::new(&rd.model, Some(&stance)).unwrap();

        // At the reference posture the guess is essentially exact.
        let qa0 = DVector::zeros(rd.model.na());
        let g0 = sur.guess(&rd, &qa0, Some(&stance));
        let st0 = rd.skel.fk_pos(&g0);
        assert!(cs.value(&rd.skel, &st0).amax() < 1e-6);

        // Across random postures, seeded Newton stays fast.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let limits: Vec<(f64, f64)> = rd
            .model
            .actuated_idx()
            .iter()
            .map(|&i| rd.model.coords()[i].limits.unwrap())
            .collect();
        let mut ok = 0;
        let total = 150;
        for _ in 0..total {
            let qa = DVector::from_iterator(
                rd.model.na(),
                limits
                    .iter()
                    .map(|&(lo, hi)| 0.4 * rng.gen_range(lo..hi)),
            );
            let guess = sur.guess(&rd, &qa, Some(&stance));
            match solve_ik(&rd, &cs, &qa, &guess, 1e-10) {
                Ok(sol) if sol.iters <= 10 => ok += 1,
                _ => {}
            }
        }
        assert!(ok * 100 >= total * 99, "only {ok}/{total} fast solves");
    }
}
