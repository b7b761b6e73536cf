//! World-frame kinematics over an elementary-joint skeleton.
//!
//! Every model joint expands into 1-DOF fixed-axis elements: a revolute or
//! prismatic joint maps to one element, a floating6 joint to six (prismatic
//! x, y, z then revolute z, y, x — coordinates x, y, z, yaw, pitch, roll),
//! and a fixed joint to a zero-DOF element. Elements are stored in
//! depth-first order, so parents precede children and every subtree is a
//! contiguous index range; all downstream recursions (dynamics, derivative
//! sweeps) only ever see fixed-axis elements.
//!
//! All spatial quantities live in the world frame, referenced to the world
//! origin. A revolute element with world axis `w` through world point `c`
//! has motion subspace `(w; c × w)`; a prismatic one `(0; w)`. Velocities
//! and accelerations are the true spatial fields, i.e. `a = d(v)/dt` in
//! world coordinates (the "spatial" acceleration, not the classical
//! acceleration of the body point at the origin).

use crate::model::{BodyRef, JointKind, ModelError, RobotModel};
use crate::spatial::{Frame, Inertia, Motion};
use nalgebra::{DVector, Matrix3, Vector3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ElemKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Clone, Debug)]
struct Elem {
    parent: Option<usize>,
    kind: ElemKind,
    /// Fixed transform from the parent element frame to this joint frame.
    pre: Frame,
    /// Motion axis in the joint frame (unit).
    axis: Vector3<f64>,
    /// Generalized coordinate driving this element (none for fixed).
    coord: Option<usize>,
    /// Inertia of the model body riding this element, in the element frame.
    inertia: Option<Inertia>,
    /// Elements `[self, subtree_end)` form this element's subtree.
    subtree_end: usize,
}

/// Elementary-joint expansion of a robot model.
#[derive(Clone, Debug)]
pub struct Skeleton {
    elems: Vec<Elem>,
    /// Model body index -> element carrying that body.
    body_elem: Vec<usize>,
    /// Coordinate index -> element it drives.
    coord_elem: Vec<usize>,
    nq: usize,
}

impl Skeleton {
    pub fn new(model: &RobotModel) -> Result<Skeleton, ModelError> {
        let nb = model.bodies.len();
        // Joint driving each body, and world-rooted joints, in declaration
        // order.
        let mut body_joint = vec![usize::MAX; nb];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nb + 1]; // last = world
        for (ji, j) in model.joints.iter().enumerate() {
            body_joint[j.child] = ji;
            match j.parent {
                BodyRef::World => children[nb].push(ji),
                BodyRef::Body(p) => children[p].push(ji),
            }
        }

        // Coordinate index assigned to each joint's first coordinate.
        let mut joint_coord0 = vec![usize::MAX; model.joints.len()];
        let mut nq = 0;
        for (ji, j) in model.joints.iter().enumerate() {
            joint_coord0[ji] = nq;
            nq += j.kind.dof();
        }
        debug_assert_eq!(nq, model.nq());

        let mut skel = Skeleton {
            elems: Vec::new(),
            body_elem: vec![usize::MAX; nb],
            coord_elem: vec![usize::MAX; nq],
            nq,
        };

        // Depth-first walk over the joint tree.
        let mut stack: Vec<(usize, Option<usize>)> = children[nb]
            .iter()
            .rev()
            .map(|&ji| (ji, None))
            .collect();
        let mut order = Vec::new();
        while let Some((ji, parent_elem)) = stack.pop() {
            let j = &model.joints[ji];
            let first = skel.elems.len();
            order.push(first);
            let c0 = joint_coord0[ji];
            match j.kind {
                JointKind::Revolute | JointKind::Prismatic => {
                    let kind = if j.kind == JointKind::Revolute {
                        ElemKind::Revolute
                    } else {
                        ElemKind::Prismatic
                    };
                    skel.push_elem(parent_elem, kind, j.origin, j.axis, Some(c0));
                }
                JointKind::Fixed => {
                    skel.push_elem(parent_elem, ElemKind::Fixed, j.origin, Vector3::z(), None);
                }
                JointKind::Floating6 => {
                    let ex = Vector3::x();
                    let ey = Vector3::y();
                    let ez = Vector3::z();
                    let parts = [
                        (ElemKind::Prismatic, ex, 0),
                        (ElemKind::Prismatic, ey, 1),
                        (ElemKind::Prismatic, ez, 2),
                        (ElemKind::Revolute, ez, 3),
                        (ElemKind::Revolute, ey, 4),
                        (ElemKind::Revolute, ex, 5),
                    ];
                    let mut parent = parent_elem;
                    for (i, (kind, axis, off)) in parts.into_iter().enumerate() {
                        let pre = if i == 0 { j.origin } else { Frame::identity() };
                        skel.push_elem(parent, kind, pre, axis, Some(c0 + off));
                        parent = Some(skel.elems.len() - 1);
                    }
                }
            }
            let carrier = skel.elems.len() - 1;
            skel.body_elem[j.child] = carrier;
            skel.elems[carrier].inertia = Some(body_inertia(model, j.child));
            for &cj in children[j.child].iter().rev() {
                stack.push((cj, Some(carrier)));
            }
        }

        // Subtree ends: walk backwards, extending each parent's range.
        let n = skel.elems.len();
        for i in 0..n {
            skel.elems[i].subtree_end = i + 1;
        }
        for i in (0..n).rev() {
            if let Some(p) = skel.elems[i].parent {
                let end = skel.elems[i].subtree_end;
                if end > skel.elems[p].subtree_end {
                    skel.elems[p].subtree_end = end;
                }
            }
        }
        // DFS construction makes subtrees contiguous; check in debug builds.
        debug_assert!((0..n).all(|i| {
            (i + 1..skel.elems[i].subtree_end).all(|k| {
                let p = skel.elems[k].parent.unwrap();
                i <= p && p < skel.elems[i].subtree_end
            })
        }));

        Ok(skel)
    }

    fn push_elem(
        &mut self,
        parent: Option<usize>,
        kind: ElemKind,
        pre: Frame,
        axis: Vector3<f64>,
        coord: Option<usize>,
    ) {
        let idx = self.elems.len();
        if let Some(c) = coord {
            self.coord_elem[c] = idx;
        }
        self.elems.push(Elem {
            parent,
            kind,
            pre,
            axis,
            coord,
            inertia: None,
            subtree_end: idx + 1,
        });
    }

    pub fn num_elems(&self) -> usize {
        self.elems.len()
    }

    pub fn nq(&self) -> usize {
        self.nq
    }

    /// Element carrying a model body.
    pub fn body_elem(&self, body: usize) -> usize {
        self.body_elem[body]
    }

    /// Element driven by a generalized coordinate.
    pub fn coord_elem(&self, coord: usize) -> usize {
        self.coord_elem[coord]
    }

    pub fn parent(&self, elem: usize) -> Option<usize> {
        self.elems[elem].parent
    }

    pub fn coord_of(&self, elem: usize) -> Option<usize> {
        self.elems[elem].coord
    }

    pub fn inertia_of(&self, elem: usize) -> Option<&Inertia> {
        self.elems[elem].inertia.as_ref()
    }

    /// Contiguous element range forming `elem`'s subtree (inclusive of it).
    pub fn subtree(&self, elem: usize) -> std::ops::Range<usize> {
        elem..self.elems[elem].subtree_end
    }

    /// True if `anc` is `elem` or one of its ancestors.
    pub fn is_ancestor(&self, anc: usize, elem: usize) -> bool {
        anc <= elem && elem < self.elems[anc].subtree_end
    }

    /// True if coordinate `j` moves `elem`.
    pub fn coord_affects(&self, j: usize, elem: usize) -> bool {
        self.is_ancestor(self.coord_elem[j], elem)
    }
}

fn body_inertia(model: &RobotModel, body: usize) -> Inertia {
    let b = &model.bodies[body];
    Inertia::from_com(b.mass, b.com, b.inertia)
}

/// Kinematic state of every element: world placements, world motion
/// subspaces, and (for the full pass) world velocities and accelerations.
#[derive(Clone, Debug)]
pub struct KinState {
    pub x: Vec<Frame>,
    pub s: Vec<Motion>,
    pub v: Vec<Motion>,
    pub a: Vec<Motion>,
}

impl Skeleton {
    /// Position-only forward pass: placements and motion subspaces.
    pub fn fk_pos(&self, q: &DVector<f64>) -> KinState {
        let n = self.elems.len();
        let mut st = KinState {
            x: vec![Frame::identity(); n],
            s: vec![Motion::zero(); n],
            v: vec![Motion::zero(); n],
            a: vec![Motion::zero(); n],
        };
        for (i, e) in self.elems.iter().enumerate() {
            let xp = match e.parent {
                Some(p) => st.x[p],
                None => Frame::identity(),
            };
            let joint = xp.compose(&e.pre);
            let qi = e.coord.map(|c| q[c]).unwrap_or(0.0);
            let w = joint.rot * e.axis;
            match e.kind {
                ElemKind::Revolute => {
                    st.x[i] = Frame::new(
                        crate::math::rot_axis_angle(&w, qi) * joint.rot,
                        joint.pos,
                    );
                    st.s[i] = Motion {
                        ang: w,
                        lin: joint.pos.cross(&w),
                    };
                }
                ElemKind::Prismatic => {
                    st.x[i] = Frame::new(joint.rot, joint.pos + w * qi);
                    st.s[i] = Motion {
                        ang: Vector3::zeros(),
                        lin: w,
                    };
                }
                ElemKind::Fixed => {
                    st.x[i] = joint;
                    st.s[i] = Motion::zero();
                }
            }
        }
        st
    }

    /// Full forward pass: placements, subspaces, velocities, and true
    /// accelerations.
    pub fn fk_full(&self, q: &DVector<f64>, qd: &DVector<f64>, qdd: &DVector<f64>) -> KinState {
        let mut st = self.fk_pos(q);
        for (i, e) in self.elems.iter().enumerate() {
            let (vp, ap) = match e.parent {
                Some(p) => (st.v[p], st.a[p]),
                None => (Motion::zero(), Motion::zero()),
            };
            match e.coord {
                Some(c) => {
                    let s = st.s[i];
                    let sdot = vp.cross_motion(&s);
                    st.v[i] = vp + s.scale(qd[c]);
                    st.a[i] = ap + s.scale(qdd[c]) + sdot.scale(qd[c]);
                }
                None => {
                    st.v[i] = vp;
                    st.a[i] = ap;
                }
            }
        }
        st
    }
}

impl KinState {
    /// World frame of a model body.
    pub fn body_frame(&self, skel: &Skeleton, body: usize) -> &Frame {
        &self.x[skel.body_elem(body)]
    }

    /// World position of a body-local point.
    pub fn body_point(&self, skel: &Skeleton, body: usize, local: &Vector3<f64>) -> Vector3<f64> {
        self.x[skel.body_elem(body)].transform_point(local)
    }

    /// Velocity of a body-fixed point currently at world position `p`.
    pub fn point_velocity(&self, skel: &Skeleton, body: usize, p: &Vector3<f64>) -> Vector3<f64> {
        self.v[skel.body_elem(body)].point_velocity(p)
    }

    /// Classical acceleration of a body-fixed point at world position `p`
    /// (with world velocity `pd`, as returned by [`Self::point_velocity`]).
    pub fn point_acceleration(
        &self,
        skel: &Skeleton,
        body: usize,
        p: &Vector3<f64>,
        pd: &Vector3<f64>,
    ) -> Vector3<f64> {
        let e = skel.body_elem(body);
        let a = &self.a[e];
        let w = &self.v[e].ang;
        a.lin + a.ang.cross(p) + w.cross(pd)
    }
}

/// First-order variation of the kinematic state along a coordinate-space
/// direction. `g` is the placement variation twist of each element
/// (δR = S(g.ang)·R, δp = g.ang × p + g.lin); `dv`/`da` are the variations
/// of the world velocity and true acceleration.
#[derive(Clone, Debug)]
pub struct KinTangent {
    pub g: Vec<Motion>,
    pub dv: Vec<Motion>,
    pub da: Vec<Motion>,
}

impl Skeleton {
    /// Position-level variation only (`dv`/`da` left zero). `dq` is the
    /// coordinate-space direction.
    pub fn tangent_pos(&self, st: &KinState, dq: &DVector<f64>) -> KinTangent {
        let n = self.elems.len();
        let mut t = KinTangent {
            g: vec![Motion::zero(); n],
            dv: vec![Motion::zero(); n],
            da: vec![Motion::zero(); n],
        };
        for (i, e) in self.elems.iter().enumerate() {
            let gp = match e.parent {
                Some(p) => t.g[p],
                None => Motion::zero(),
            };
            t.g[i] = match e.coord {
                Some(c) => gp + st.s[i].scale(dq[c]),
                None => gp,
            };
        }
        t
    }

    /// Full variation along `(dq, dqd, dqdd)` at the state produced by
    /// `fk_full(q, qd, qdd)`; `qd` and `qdd` are the rates the state was
    /// built with.
    #[allow(clippy::too_many_arguments)]
    pub fn tangent_full(
        &self,
        st: &KinState,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
        dq: &DVector<f64>,
        dqd: &DVector<f64>,
        dqdd: &DVector<f64>,
    ) -> KinTangent {
        let mut t = self.tangent_pos(st, dq);
        for (i, e) in self.elems.iter().enumerate() {
            let (vp, dvp, dap) = match e.parent {
                Some(p) => (st.v[p], t.dv[p], t.da[p]),
                None => (Motion::zero(), Motion::zero(), Motion::zero()),
            };
            match e.coord {
                Some(c) => {
                    let s = st.s[i];
                    let ds = t.g[i].cross_motion(&s);
                    t.dv[i] = dvp + ds.scale(qd[c]) + s.scale(dqd[c]);
                    let sdot = vp.cross_motion(&s);
                    let dsdot = dvp.cross_motion(&s) + vp.cross_motion(&ds);
                    t.da[i] = dap
                        + ds.scale(qdd[c])
                        + s.scale(dqdd[c])
                        + dsdot.scale(qd[c])
                        + sdot.scale(dqd[c]);
                }
                None => {
                    t.dv[i] = dvp;
                    t.da[i] = dap;
                }
            }
        }
        t
    }
}

impl KinTangent {
    /// Variation of the world position of a body-fixed point at `p`.
    pub fn dpoint(&self, skel: &Skeleton, body: usize, p: &Vector3<f64>) -> Vector3<f64> {
        let g = &self.g[skel.body_elem(body)];
        g.ang.cross(p) + g.lin
    }

    /// Variation of the world velocity of a body-fixed point at `p` with
    /// velocity `pd`.
    pub fn dpoint_velocity(
        &self,
        skel: &Skeleton,
        st: &KinState,
        body: usize,
        p: &Vector3<f64>,
        pd: &Vector3<f64>,
    ) -> Vector3<f64> {
        let _ = pd;
        let e = skel.body_elem(body);
        let dv = &self.dv[e];
        let w = &st.v[e].ang;
        let dp = self.g[e].ang.cross(p) + self.g[e].lin;
        dv.lin + dv.ang.cross(p) + w.cross(&dp)
    }

    /// Variation of the classical acceleration of a body-fixed point at `p`
    /// with velocity `pd`.
    pub fn dpoint_acceleration(
        &self,
        skel: &Skeleton,
        st: &KinState,
        body: usize,
        p: &Vector3<f64>,
        pd: &Vector3<f64>,
    ) -> Vector3<f64> {
        let e = skel.body_elem(body);
        let (g, dv, da) = (&self.g[e], &self.dv[e], &self.da[e]);
        let (v, a) = (&st.v[e], &st.a[e]);
        let dp = g.ang.cross(p) + g.lin;
        let dpd = dv.lin + dv.ang.cross(p) + v.ang.cross(&dp);
        da.lin + da.ang.cross(p) + a.ang.cross(&dp) + dv.ang.cross(pd) + v.ang.cross(&dpd)
    }

    /// Variation of a body's rotation matrix: δR = S(g.ang)·R.
    pub fn drot(&self, skel: &Skeleton, st: &KinState, body: usize) -> Matrix3<f64> {
        let e = skel.body_elem(body);
        crate::math::skew(&self.g[e].ang) * st.x[e].rot
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bundled::bundled_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
    }

    #[test]
    fn pendulum_fk_matches_hand_calc() {
        let m = bundled_model("pendulum").unwrap();
        let skel = Skeleton::new(&m).unwrap();
        let q = DVector::from_vec(vec![0.7]);
        let st = skel.fk_pos(&q);
        let com = st.body_point(&skel, 0, &Vector3::new(0.0, 0.0, -0.5));
        // Pivot at (0,0,1); rotation about +y swings the bob toward -x.
        let expect = Vector3::new(-0.5 * 0.7f64.sin(), 0.0, 1.0 - 0.5 * 0.7f64.cos());
        assert!((com - expect).norm() < 1e-14, "{com:?} vs {expect:?}");
    }

    #[test]
    fn floating_base_pose_convention() {
        let m = bundled_model("minibiped").unwrap();
        let skel = Skeleton::new(&m).unwrap();
        let mut q = DVector::zeros(m.nq());
        let (x, y, z, yaw, pitch, roll) = (0.3, -0.2, 0.55, 0.4, -0.25, 0.15);
        q[0] = x;
        q[1] = y;
        q[2] = z;
        q[3] = yaw;
        q[4] = pitch;
        q[5] = roll;
        let st = skel.fk_pos(&q);
        let torso = st.body_frame(&skel, m.body_index("torso").unwrap());
        assert!((torso.pos - Vector3::new(x, y, z)).norm() < 1e-14);
        assert!((torso.rot - crate::math::rot_zyx(roll, pitch, yaw)).norm() < 1e-13);
    }

    #[test]
    fn standing_minibiped_soles_on_ground() {
        let m = bundled_model("minibiped").unwrap();
        let skel = Skeleton::new(&m).unwrap();
        let mut q = DVector::zeros(m.nq());
        q[2] = 0.53;
        let st = skel.fk_pos(&q);
        for side in [crate::model::Side::Left, crate::model::Side::Right] {
            let c = m.contact(side).unwrap();
            let sole = st.body_frame(&skel, c.body).compose(&c.frame);
            assert!(
                sole.pos.z.abs() < 1e-12,
                "{} sole height {}",
                side.name(),
                sole.pos.z
            );
            assert!((sole.rot - Matrix3::identity()).norm() < 1e-12);
        }
    }

    /// Velocities and accelerations against finite differences of the
    /// position pass along the exact quadratic path q(t) = q + t qd + t²/2 qdd.
    #[test]
    fn point_rates_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ["double_pendulum", "minibiped"] {
            let m = bundled_model(name).unwrap();
            let skel = Skeleton::new(&m).unwrap();
            let n = m.nq();
            for _ in 0..5 {
                let q = rand_vec(&mut rng, n, 0.6);
                let qd = rand_vec(&mut rng, n, 1.0);
                let qdd = rand_vec(&mut rng, n, 2.0);
                let st = skel.fk_full(&q, &qd, &qdd);
                let local = Vector3::new(0.07, -0.03, 0.11);
                let body = m.bodies.len() - 1;
                let eps = 1e-6;
                // Positions and velocities along the exact quadratic path;
                // first differences of each give velocity and acceleration.
                let at = |t: f64| {
                    let qt = &q + &qd * t + &qdd * (0.5 * t * t);
                    let qdt = &qd + &qdd * t;
                    let s = skel.fk_full(&qt, &qdt, &DVector::zeros(n));
                    let pt = s.body_point(&skel, body, &local);
                    let vt = s.point_velocity(&skel, body, &pt);
                    (pt, vt)
                };
                let p = st.body_point(&skel, body, &local);
                let pd = st.point_velocity(&skel, body, &p);
                let pdd = st.point_acceleration(&skel, body, &p, &pd);
                let (pp, vp) = at(eps);
                let (pm, vm) = at(-eps);
                let fd_v = (pp - pm) / (2.0 * eps);
                let fd_a = (vp - vm) / (2.0 * eps);
                assert!((pd - fd_v).norm() < 1e-8, "{name}: vel {:?}", (pd - fd_v).norm());
                assert!((pdd - fd_a).norm() < 1e-7, "{name}: acc {:?}", (pdd - fd_a).norm());
            }
        }
    }

    /// The tangent sweep against finite differences along a random direction.
    #[test]
    fn tangent_sweep_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for name in ["double_pendulum", "fourbar", "minibiped"] {
            let m = bundled_model(name).unwrap();
            let skel = Skeleton::new(&m).unwrap();
            let n = m.nq();
            let q = rand_vec(&mut rng, n, 0.5);
            let qd = rand_vec(&mut rng, n, 1.0);
            let qdd = rand_vec(&mut rng, n, 2.0);
            let dq = rand_vec(&mut rng, n, 1.0);
            let dqd = rand_vec(&mut rng, n, 1.0);
            let dqdd = rand_vec(&mut rng, n, 1.0);
            let st = skel.fk_full(&q, &qd, &qdd);
            let t = skel.tangent_full(&st, &qd, &qdd, &dq, &dqd, &dqdd);

            let eps = 1e-6;
            let body = m.bodies.len() - 1;
            let e = skel.body_elem(body);
            let plus = skel.fk_full(&(&q + &dq * eps), &(&qd + &dqd * eps), &(&qdd + &dqdd * eps));
            let minus = skel.fk_full(&(&q - &dq * eps), &(&qd - &dqd * eps), &(&qdd - &dqdd * eps));

            // Placement variation: δR ≈ (R+ - R-) / 2ε and δp likewise.
            let fd_dr = (plus.x[e].rot - minus.x[e].rot) / (2.0 * eps);
            let an_dr = t.drot(&skel, &st, body);
            assert!((fd_dr - an_dr).norm() < 1e-7, "{name}: dR");
            let fd_dp = (plus.x[e].pos - minus.x[e].pos) / (2.0 * eps);
            let an_dp = t.dpoint(&skel, body, &st.x[e].pos);
            assert!((fd_dp - an_dp).norm() < 1e-7, "{name}: dp");

            // Velocity and acceleration variations.
            for (fd, an, label) in [
                ((plus.v[e].ang - minus.v[e].ang) / (2.0 * eps), t.dv[e].ang, "dv.ang"),
                ((plus.v[e].lin - minus.v[e].lin) / (2.0 * eps), t.dv[e].lin, "dv.lin"),
                ((plus.a[e].ang - minus.a[e].ang) / (2.0 * eps), t.da[e].ang, "da.ang"),
                ((plus.a[e].lin - minus.a[e].lin) / (2.0 * eps), t.da[e].lin, "da.lin"),
            ] {
                assert!((fd - an).norm() < 2e-6, "{name}: {label} err {}", (fd - an).norm());
            }

            // Point-level variations: position, velocity, acceleration.
            let local = Vector3::new(0.05, 0.02, -0.08);
            let p = st.body_point(&skel, body, &local);
            let pd = st.point_velocity(&skel, body, &p);
            let point = |s: &KinState| {
                let pp = s.body_point(&skel, body, &local);
                let vv = s.point_velocity(&skel, body, &pp);
                let aa = s.point_acceleration(&skel, body, &pp, &vv);
                (pp, vv, aa)
            };
            let (pp, vp, ap) = point(&plus);
            let (pm, vm, am) = point(&minus);
            let an_dp = t.dpoint(&skel, body, &p);
            let an_dv = t.dpoint_velocity(&skel, &st, body, &p, &pd);
            let an_da = t.dpoint_acceleration(&skel, &st, body, &p, &pd);
            assert!(((pp - pm) / (2.0 * eps) - an_dp).norm() < 1e-7, "{name}: dpoint");
            assert!(((vp - vm) / (2.0 * eps) - an_dv).norm() < 2e-6, "{name}: dpoint_velocity");
            assert!(((ap - am) / (2.0 * eps) - an_da).norm() < 2e-5, "{name}: dpoint_acceleration");
        }
    }

    #[test]
    fn subtrees_are_contiguous_and_ancestor_tests_work() {
        let m = bundled_model("minibiped").unwrap();
        let skel = Skeleton::new(&m).unwrap();
        // The base roll element is an ancestor of every body carrier.
        let base_last = skel.coord_elem(5);
        for b in 0..m.bodies.len() {
            assert!(skel.is_ancestor(base_last, skel.body_elem(b)));
        }
        // Left-leg coordinates do not affect right-leg bodies.
        let l_knee = m.coords().iter().position(|c| c.name == "l_knee").unwrap();
        let r_foot = m.body_index("r_foot").unwrap();
        assert!(!skel.coord_affects(l_knee, skel.body_elem(r_foot)));
        let l_foot = m.body_index("l_foot").unwrap();
        assert!(skel.coord_affects(l_knee, skel.body_elem(l_foot)));
        // Every subtree range has parents inside it for its members.
        for i in 0..skel.num_elems() {
            for k in skel.subtree(i) {
                if k > i {
                    let p = skel.parent(k).unwrap();
                    assert!(skel.is_ancestor(i, p));
                }
            }
        }
    }
}
