//! Holonomic constraint rows: loop closures plus an optional stance pose,
//! with values, Jacobians, time derivatives, and directional tangents — and
//! the Newton inverse kinematics that solves them for the unactuated
//! coordinates.
//!
//! Two Jacobian flavors exist for the stance orientation rows. The `value`
//! rows measure orientation error by the rotation log, so their exact
//! gradient carries the inverse left Jacobian of the log (`jacobian`). The
//! velocity-level rows used for impacts and reaction-wrench mapping are the
//! plain frame rows (angular velocity / point velocity), `vel_jacobian`. On
//! the constraint manifold the two coincide; reaction forces always pair
//! with the plain rows.

mod cid;
mod surrogate;

pub use cid::{cid, cid_partials, CidPartials, CidPoint};
pub use surrogate::{fit_ik, fit_ik_with, IkSurrogate};

use crate::kin::{KinState, KinTangent, Skeleton};
use crate::math::{jl_inv, jl_inv_dir, plane_basis, so3_log};
use crate::model::{ClosureKind, ModelError, RobotModel, Side};
use crate::spatial::Frame;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("inverse kinematics did not converge within {iters} iterations (|c| = {residual:.3e})")]
    IkNoConverge { iters: usize, residual: f64 },
    #[error("constraint Jacobian is singular (sigma_min/sigma_max = {ratio:.3e})")]
    Singular { ratio: f64 },
    #[error("square system required: {rows} constraint rows vs {unknowns} unactuated coordinates")]
    NotSquare { rows: usize, unknowns: usize },
    #[error("model has no contact patch on the {0} side")]
    NoContact(&'static str),
    #[error("surrogate fit grid too small: {0} sample(s) per axis, need at least 2")]
    GridTooSmall(usize),
    #[error("surrogate cache is malformed: {0}")]
    BadCache(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A foot pinned flat to the world: which side, and the target sole pose.
#[derive(Clone, Debug)]
pub struct Stance {
    pub side: Side,
    pub target: Frame,
}

#[derive(Clone, Debug)]
enum Block {
    /// Two body-fixed points coincide (3 rows): p_child − p_parent.
    Point {
        pb: usize,
        pp: Vector3<f64>,
        cb: usize,
        cp: Vector3<f64>,
    },
    /// In-plane coincidence (2 rows): e_k · (p_child − p_parent) for the two
    /// plane basis vectors e_k fixed in the parent body.
    Planar {
        pb: usize,
        pp: Vector3<f64>,
        cb: usize,
        cp: Vector3<f64>,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
    },
    /// Axis alignment (2 rows): m_k · u for basis vectors m_k ⊥ axis fixed
    /// in the parent body and the axis u fixed in the child body.
    Axis {
        pb: usize,
        m1: Vector3<f64>,
        m2: Vector3<f64>,
        cb: usize,
        u: Vector3<f64>,
    },
    /// Sole origin at a world target (3 rows).
    SolePos {
        body: usize,
        local: Vector3<f64>,
        target: Vector3<f64>,
    },
    /// Sole orientation at a world target (3 rows): Log(R_sole · R_targetᵀ).
    SoleRot {
        body: usize,
        rot_local: Matrix3<f64>,
        target: Matrix3<f64>,
    },
}

impl Block {
    fn rows(&self) -> usize {
        match self {
            Block::Point { .. } | Block::SolePos { .. } | Block::SoleRot { .. } => 3,
            Block::Planar { .. } | Block::Axis { .. } => 2,
        }
    }
}

/// The active holonomic constraints of one support phase.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    blocks: Vec<Block>,
    n_rows: usize,
    nq: usize,
    /// Row offset of the stance block, if present.
    stance_row: Option<usize>,
}

impl ConstraintSet {
    pub fn new(model: &RobotModel, stance: Option<&Stance>) -> Result<ConstraintSet, ConstraintError> {
        let mut blocks = Vec::new();
        for c in &model.closures {
            match c.kind {
                ClosureKind::Point3 => blocks.push(Block::Point {
                    pb: c.parent_body,
                    pp: c.parent_point,
                    cb: c.child_body,
                    cp: c.child_point,
                }),
                ClosureKind::PlanarPoint2 => {
                    let n = c.normal.unwrap().normalize();
                    let (e1, e2) = plane_basis(&n);
                    blocks.push(Block::Planar {
                        pb: c.parent_body,
                        pp: c.parent_point,
                        cb: c.child_body,
                        cp: c.child_point,
                        e1,
                        e2,
                    });
                }
                ClosureKind::Pin5 => {
                    let u = c.normal.unwrap().normalize();
                    let (m1, m2) = plane_basis(&u);
                    blocks.push(Block::Point {
                        pb: c.parent_body,
                        pp: c.parent_point,
                        cb: c.child_body,
                        cp: c.child_point,
                    });
                    blocks.push(Block::Axis {
                        pb: c.parent_body,
                        m1,
                        m2,
                        cb: c.child_body,
                        u,
                    });
                }
            }
        }
        let mut stance_row = None;
        if let Some(s) = stance {
            let patch = model
                .contact(s.side)
                .ok_or(ConstraintError::NoContact(s.side.name()))?;
            stance_row = Some(blocks.iter().map(Block::rows).sum());
            blocks.push(Block::SolePos {
                body: patch.body,
                local: patch.frame.pos,
                target: s.target.pos,
            });
            blocks.push(Block::SoleRot {
                body: patch.body,
                rot_local: patch.frame.rot,
                target: s.target.rot,
            });
        }
        let n_rows = blocks.iter().map(Block::rows).sum();
        Ok(ConstraintSet {
            blocks,
            n_rows,
            nq: model.nq(),
            stance_row,
        })
    }

    /// A set holding only the six pose rows of one foot's sole frame against
    /// `target` — no loop-closure rows.  Used to express where a free
    /// (non-stance) foot should be.
    pub fn sole_pose(
        model: &RobotModel,
        side: Side,
        target: &Frame,
    ) -> Result<ConstraintSet, ConstraintError> {
        let patch = model
            .contact(side)
            .ok_or(ConstraintError::NoContact(side.name()))?;
        let blocks = vec![
            Block::SolePos {
                body: patch.body,
                local: patch.frame.pos,
                target: target.pos,
            },
            Block::SoleRot {
                body: patch.body,
                rot_local: patch.frame.rot,
                target: target.rot,
            },
        ];
        Ok(ConstraintSet {
            blocks,
            n_rows: 6,
            nq: model.nq(),
            stance_row: Some(0),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Row offset of the six stance rows (position then orientation), if a
    /// stance is part of this set.
    pub fn stance_row(&self) -> Option<usize> {
        self.stance_row
    }

    /// Constraint values c(q).
    pub fn value(&self, skel: &Skeleton, st: &KinState) -> DVector<f64> {
        let mut c = DVector::zeros(self.n_rows);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let d = st.body_point(skel, *cb, cp) - st.body_point(skel, *pb, pp);
                    c.fixed_rows_mut::<3>(r).copy_from(&d);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    let d = st.body_point(skel, *cb, cp) - st.body_point(skel, *pb, pp);
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    c[r] = (rp * e1).dot(&d);
                    c[r + 1] = (rp * e2).dot(&d);
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    let uw = st.x[skel.body_elem(*cb)].rot * u;
                    c[r] = (rp * m1).dot(&uw);
                    c[r + 1] = (rp * m2).dot(&uw);
                }
                Block::SolePos { body, local, target } => {
                    let p = st.body_point(skel, *body, local);
                    c.fixed_rows_mut::<3>(r).copy_from(&(p - target));
                }
                Block::SoleRot { body, rot_local, target } => {
                    let rs = st.x[skel.body_elem(*body)].rot * rot_local;
                    let e = so3_log(&(rs * target.transpose()));
                    c.fixed_rows_mut::<3>(r).copy_from(&e);
                }
            }
            r += b.rows();
        }
        c
    }

    /// Adds the Jacobian columns of a single point row block into rows
    /// `r..r+3` with the given sign.
    fn add_point_cols(
        &self,
        skel: &Skeleton,
        st: &KinState,
        j: &mut DMatrix<f64>,
        r: usize,
        body: usize,
        p: &Vector3<f64>,
        sign: f64,
    ) {
        let mut e = Some(skel.body_elem(body));
        while let Some(i) = e {
            if let Some(c) = skel.coord_of(i) {
                let s = &st.s[i];
                let col = (s.ang.cross(p) + s.lin) * sign;
                for k in 0..3 {
                    j[(r + k, c)] += col[k];
                }
            }
            e = skel.parent(i);
        }
    }

    /// Velocity-level Jacobian: plain frame rows for the stance block,
    /// gradients of the point/plane/axis features elsewhere (those coincide
    /// with their velocity rows).
    pub fn vel_jacobian(&self, skel: &Skeleton, st: &KinState) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n_rows, self.nq);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let pcw = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    self.add_point_cols(skel, st, &mut j, r, *cb, &pcw, 1.0);
                    self.add_point_cols(skel, st, &mut j, r, *pb, &ppw, -1.0);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    let pcw = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let d = pcw - ppw;
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    let ew = [rp * e1, rp * e2];
                    // e_k · (Jc − Jp) over both chains, plus (ω × e_k) · d
                    // over the parent chain.
                    for (which, body, p, sign) in
                        [(0, *cb, pcw, 1.0), (1, *pb, ppw, -1.0)]
                    {
                        let mut e = Some(skel.body_elem(body));
                        while let Some(i) = e {
                            if let Some(c) = skel.coord_of(i) {
                                let s = &st.s[i];
                                let col = (s.ang.cross(&p) + s.lin) * sign;
                                for (k, ek) in ew.iter().enumerate() {
                                    j[(r + k, c)] += ek.dot(&col);
                                    if which == 1 {
                                        // parent chain also rotates e_k
                                        j[(r + k, c)] += s.ang.cross(ek).dot(&d);
                                    }
                                }
                            }
                            e = skel.parent(i);
                        }
                    }
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    let mw = [rp * m1, rp * m2];
                    let uw = st.x[skel.body_elem(*cb)].rot * u;
                    let mut e = Some(skel.body_elem(*cb));
                    while let Some(i) = e {
                        if let Some(c) = skel.coord_of(i) {
                            let du = st.s[i].ang.cross(&uw);
                            for (k, mk) in mw.iter().enumerate() {
                                j[(r + k, c)] += mk.dot(&du);
                            }
                        }
                        e = skel.parent(i);
                    }
                    let mut e = Some(skel.body_elem(*pb));
                    while let Some(i) = e {
                        if let Some(c) = skel.coord_of(i) {
                            for (k, mk) in mw.iter().enumerate() {
                                j[(r + k, c)] += st.s[i].ang.cross(mk).dot(&uw);
                            }
                        }
                        e = skel.parent(i);
                    }
                }
                Block::SolePos { body, local, .. } => {
                    let p = st.body_point(skel, *body, local);
                    self.add_point_cols(skel, st, &mut j, r, *body, &p, 1.0);
                }
                Block::SoleRot { body, .. } => {
                    let mut e = Some(skel.body_elem(*body));
                    while let Some(i) = e {
                        if let Some(c) = skel.coord_of(i) {
                            for k in 0..3 {
                                j[(r + k, c)] += st.s[i].ang[k];
                            }
                        }
                        e = skel.parent(i);
                    }
                }
            }
            r += b.rows();
        }
        j
    }

    /// Exact Jacobian of [`ConstraintSet::value`]: the velocity-level rows
    /// with the stance orientation block premultiplied by the inverse left
    /// Jacobian of the rotation log.
    pub fn jacobian(&self, skel: &Skeleton, st: &KinState) -> DMatrix<f64> {
        let mut j = self.vel_jacobian(skel, st);
        let mut r = 0;
        for b in &self.blocks {
            if let Block::SoleRot { body, rot_local, target } = b {
                let rs = st.x[skel.body_elem(*body)].rot * rot_local;
                let e = so3_log(&(rs * target.transpose()));
                let corr = jl_inv(&e);
                let rows = corr * j.rows(r, 3).clone_owned();
                j.rows_mut(r, 3).copy_from(&rows);
            }
            r += b.rows();
        }
        j
    }

    /// Time derivative of the constraint values, for a state with
    /// velocities. Equals `jacobian · q̇`.
    pub fn rate(&self, skel: &Skeleton, st: &KinState) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_rows);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let pp_w = st.body_point(skel, *pb, pp);
                    let dd = st.point_velocity(skel, *cb, &pc) - st.point_velocity(skel, *pb, &pp_w);
                    out.fixed_rows_mut::<3>(r).copy_from(&dd);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let d = pc - ppw;
                    let dd = st.point_velocity(skel, *cb, &pc) - st.point_velocity(skel, *pb, &ppw);
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    let wp = &st.v[skel.body_elem(*pb)].ang;
                    for (k, el) in [e1, e2].into_iter().enumerate() {
                        let ew = rp * el;
                        let edot = wp.cross(&ew);
                        out[r + k] = edot.dot(&d) + ew.dot(&dd);
                    }
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    let wp = st.v[skel.body_elem(*pb)].ang;
                    let wc = st.v[skel.body_elem(*cb)].ang;
                    let uw = st.x[skel.body_elem(*cb)].rot * u;
                    let udot = wc.cross(&uw);
                    for (k, ml) in [m1, m2].into_iter().enumerate() {
                        let mw = rp * ml;
                        out[r + k] = wp.cross(&mw).dot(&uw) + mw.dot(&udot);
                    }
                }
                Block::SolePos { body, local, .. } => {
                    let p = st.body_point(skel, *body, local);
                    out.fixed_rows_mut::<3>(r)
                        .copy_from(&st.point_velocity(skel, *body, &p));
                }
                Block::SoleRot { body, rot_local, target } => {
                    let el = skel.body_elem(*body);
                    let rs = st.x[el].rot * rot_local;
                    let e = so3_log(&(rs * target.transpose()));
                    let edot = jl_inv(&e) * st.v[el].ang;
                    out.fixed_rows_mut::<3>(r).copy_from(&edot);
                }
            }
            r += b.rows();
        }
        out
    }

    /// Plain velocity rows: same as [`ConstraintSet::rate`] except the
    /// stance orientation rows are the raw angular velocity. Equals
    /// `vel_jacobian · q̇`.
    pub fn rate_plain(&self, skel: &Skeleton, st: &KinState) -> DVector<f64> {
        let mut out = self.rate(skel, st);
        let mut r = 0;
        for b in &self.blocks {
            if let Block::SoleRot { body, .. } = b {
                let w = st.v[skel.body_elem(*body)].ang;
                out.fixed_rows_mut::<3>(r).copy_from(&w);
            }
            r += b.rows();
        }
        out
    }

    /// Second time derivative of the plain velocity rows, affine in the
    /// accelerations carried by `st` (true accelerations from `fk_full`).
    /// Stance rows are the classical point acceleration and the angular
    /// acceleration.
    pub fn accel_plain(&self, skel: &Skeleton, st: &KinState) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_rows);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let vc = st.point_velocity(skel, *cb, &pc);
                    let vp = st.point_velocity(skel, *pb, &ppw);
                    let acc = st.point_acceleration(skel, *cb, &pc, &vc)
                        - st.point_acceleration(skel, *pb, &ppw, &vp);
                    out.fixed_rows_mut::<3>(r).copy_from(&acc);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let d = pc - ppw;
                    let vc = st.point_velocity(skel, *cb, &pc);
                    let vp = st.point_velocity(skel, *pb, &ppw);
                    let dd = vc - vp;
                    let ddd = st.point_acceleration(skel, *cb, &pc, &vc)
                        - st.point_acceleration(skel, *pb, &ppw, &vp);
                    let ep = skel.body_elem(*pb);
                    let (rp, wp, ap) = (&st.x[ep].rot, &st.v[ep].ang, &st.a[ep].ang);
                    for (k, el) in [e1, e2].into_iter().enumerate() {
                        let ew = rp * el;
                        let edot = wp.cross(&ew);
                        let eddot = ap.cross(&ew) + wp.cross(&edot);
                        out[r + k] = eddot.dot(&d) + 2.0 * edot.dot(&dd) + ew.dot(&ddd);
                    }
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let ep = skel.body_elem(*pb);
                    let ec = skel.body_elem(*cb);
                    let (rp, wp, apang) = (&st.x[ep].rot, &st.v[ep].ang, &st.a[ep].ang);
                    let (wc, acang) = (&st.v[ec].ang, &st.a[ec].ang);
                    let uw = st.x[ec].rot * u;
                    let udot = wc.cross(&uw);
                    let uddot = acang.cross(&uw) + wc.cross(&udot);
                    for (k, ml) in [m1, m2].into_iter().enumerate() {
                        let mw = rp * ml;
                        let mdot = wp.cross(&mw);
                        let mddot = apang.cross(&mw) + wp.cross(&mdot);
                        out[r + k] = mddot.dot(&uw) + 2.0 * mdot.dot(&udot) + mw.dot(&uddot);
                    }
                }
                Block::SolePos { body, local, .. } => {
                    let p = st.body_point(skel, *body, local);
                    let pd = st.point_velocity(skel, *body, &p);
                    out.fixed_rows_mut::<3>(r)
                        .copy_from(&st.point_acceleration(skel, *body, &p, &pd));
                }
                Block::SoleRot { body, .. } => {
                    let wd = st.a[skel.body_elem(*body)].ang;
                    out.fixed_rows_mut::<3>(r).copy_from(&wd);
                }
            }
            r += b.rows();
        }
        out
    }

    /// Second time derivative of [`ConstraintSet::value`] (log-consistent
    /// stance rows), affine in accelerations; used for constraint
    /// stabilization in simulation.
    pub fn accel(&self, skel: &Skeleton, st: &KinState) -> DVector<f64> {
        let mut out = self.accel_plain(skel, st);
        let mut r = 0;
        for b in &self.blocks {
            if let Block::SoleRot { body, rot_local, target } = b {
                let el = skel.body_elem(*body);
                let rs = st.x[el].rot * rot_local;
                let e = so3_log(&(rs * target.transpose()));
                let w = st.v[el].ang;
                let wd = st.a[el].ang;
                let edot = jl_inv(&e) * w;
                let eddot = jl_inv_dir(&e, &edot) * w + jl_inv(&e) * wd;
                out.fixed_rows_mut::<3>(r).copy_from(&eddot);
            }
            r += b.rows();
        }
        out
    }

    /// Directional derivative of [`ConstraintSet::value`] along a kinematic
    /// tangent (position part only). Valid at any configuration.
    pub fn dvalue(&self, skel: &Skeleton, st: &KinState, tg: &KinTangent) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_rows);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let dd = tg.dpoint(skel, *cb, &pc) - tg.dpoint(skel, *pb, &ppw);
                    out.fixed_rows_mut::<3>(r).copy_from(&dd);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let d = pc - ppw;
                    let dd = tg.dpoint(skel, *cb, &pc) - tg.dpoint(skel, *pb, &ppw);
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    let gp = &tg.g[skel.body_elem(*pb)].ang;
                    for (k, el) in [e1, e2].into_iter().enumerate() {
                        let ew = rp * el;
                        out[r + k] = gp.cross(&ew).dot(&d) + ew.dot(&dd);
                    }
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let rp = &st.x[skel.body_elem(*pb)].rot;
                    let gp = &tg.g[skel.body_elem(*pb)].ang;
                    let gc = &tg.g[skel.body_elem(*cb)].ang;
                    let uw = st.x[skel.body_elem(*cb)].rot * u;
                    let du = gc.cross(&uw);
                    for (k, ml) in [m1, m2].into_iter().enumerate() {
                        let mw = rp * ml;
                        out[r + k] = gp.cross(&mw).dot(&uw) + mw.dot(&du);
                    }
                }
                Block::SolePos { body, local, .. } => {
                    let p = st.body_point(skel, *body, local);
                    out.fixed_rows_mut::<3>(r).copy_from(&tg.dpoint(skel, *body, &p));
                }
                Block::SoleRot { body, rot_local, target } => {
                    let el = skel.body_elem(*body);
                    let rs = st.x[el].rot * rot_local;
                    let e = so3_log(&(rs * target.transpose()));
                    let de = jl_inv(&e) * tg.g[el].ang;
                    out.fixed_rows_mut::<3>(r).copy_from(&de);
                }
            }
            r += b.rows();
        }
        out
    }

    /// Directional derivative of [`ConstraintSet::rate_plain`] along a
    /// kinematic tangent with position and velocity parts.
    pub fn drate_plain(&self, skel: &Skeleton, st: &KinState, tg: &KinTangent) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_rows);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let vc = st.point_velocity(skel, *cb, &pc);
                    let vp = st.point_velocity(skel, *pb, &ppw);
                    let ddd = tg.dpoint_velocity(skel, st, *cb, &pc, &vc)
                        - tg.dpoint_velocity(skel, st, *pb, &ppw, &vp);
                    out.fixed_rows_mut::<3>(r).copy_from(&ddd);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let d = pc - ppw;
                    let dd = st.point_velocity(skel, *cb, &pc) - st.point_velocity(skel, *pb, &ppw);
                    let vc = st.point_velocity(skel, *cb, &pc);
                    let vp = st.point_velocity(skel, *pb, &ppw);
                    let d_d = tg.dpoint(skel, *cb, &pc) - tg.dpoint(skel, *pb, &ppw);
                    let d_dd = tg.dpoint_velocity(skel, st, *cb, &pc, &vc)
                        - tg.dpoint_velocity(skel, st, *pb, &ppw, &vp);
                    let ep = skel.body_elem(*pb);
                    let (rp, wp) = (&st.x[ep].rot, &st.v[ep].ang);
                    let (gp, dwp) = (&tg.g[ep].ang, &tg.dv[ep].ang);
                    for (k, el) in [e1, e2].into_iter().enumerate() {
                        let ew = rp * el;
                        let de = gp.cross(&ew);
                        let edot = wp.cross(&ew);
                        let dedot = dwp.cross(&ew) + wp.cross(&de);
                        out[r + k] = dedot.dot(&d) + edot.dot(&d_d) + de.dot(&dd) + ew.dot(&d_dd);
                    }
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let ep = skel.body_elem(*pb);
                    let ec = skel.body_elem(*cb);
                    let (rp, wp) = (&st.x[ep].rot, &st.v[ep].ang);
                    let (gp, dwp) = (&tg.g[ep].ang, &tg.dv[ep].ang);
                    let (wc, gc, dwc) = (&st.v[ec].ang, &tg.g[ec].ang, &tg.dv[ec].ang);
                    let uw = st.x[ec].rot * u;
                    let du = gc.cross(&uw);
                    let udot = wc.cross(&uw);
                    let dudot = dwc.cross(&uw) + wc.cross(&du);
                    for (k, ml) in [m1, m2].into_iter().enumerate() {
                        let mw = rp * ml;
                        let dm = gp.cross(&mw);
                        let mdot = wp.cross(&mw);
                        let dmdot = dwp.cross(&mw) + wp.cross(&dm);
                        out[r + k] =
                            dmdot.dot(&uw) + mdot.dot(&du) + dm.dot(&udot) + mw.dot(&dudot);
                    }
                }
                Block::SolePos { body, local, .. } => {
                    let p = st.body_point(skel, *body, local);
                    let pd = st.point_velocity(skel, *body, &p);
                    out.fixed_rows_mut::<3>(r)
                        .copy_from(&tg.dpoint_velocity(skel, st, *body, &p, &pd));
                }
                Block::SoleRot { body, .. } => {
                    out.fixed_rows_mut::<3>(r)
                        .copy_from(&tg.dv[skel.body_elem(*body)].ang);
                }
            }
            r += b.rows();
        }
        out
    }

    /// Directional derivative of [`ConstraintSet::accel_plain`] along a full
    /// kinematic tangent (position, velocity, and acceleration parts).
    pub fn daccel_plain(&self, skel: &Skeleton, st: &KinState, tg: &KinTangent) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_rows);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let vc = st.point_velocity(skel, *cb, &pc);
                    let vp = st.point_velocity(skel, *pb, &ppw);
                    let dacc = tg.dpoint_acceleration(skel, st, *cb, &pc, &vc)
                        - tg.dpoint_acceleration(skel, st, *pb, &ppw, &vp);
                    out.fixed_rows_mut::<3>(r).copy_from(&dacc);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let d = pc - ppw;
                    let vc = st.point_velocity(skel, *cb, &pc);
                    let vp = st.point_velocity(skel, *pb, &ppw);
                    let dd = vc - vp;
                    let ddd = st.point_acceleration(skel, *cb, &pc, &vc)
                        - st.point_acceleration(skel, *pb, &ppw, &vp);
                    let d_d = tg.dpoint(skel, *cb, &pc) - tg.dpoint(skel, *pb, &ppw);
                    let d_dd = tg.dpoint_velocity(skel, st, *cb, &pc, &vc)
                        - tg.dpoint_velocity(skel, st, *pb, &ppw, &vp);
                    let d_ddd = tg.dpoint_acceleration(skel, st, *cb, &pc, &vc)
                        - tg.dpoint_acceleration(skel, st, *pb, &ppw, &vp);
                    let ep = skel.body_elem(*pb);
                    let (rp, wp, ap) = (&st.x[ep].rot, &st.v[ep].ang, &st.a[ep].ang);
                    let (gp, dwp, dap) = (&tg.g[ep].ang, &tg.dv[ep].ang, &tg.da[ep].ang);
                    for (k, el) in [e1, e2].into_iter().enumerate() {
                        let ew = rp * el;
                        let de = gp.cross(&ew);
                        let edot = wp.cross(&ew);
                        let dedot = dwp.cross(&ew) + wp.cross(&de);
                        let eddot = ap.cross(&ew) + wp.cross(&edot);
                        let deddot = dap.cross(&ew) + ap.cross(&de) + dwp.cross(&edot) + wp.cross(&dedot);
                        out[r + k] = deddot.dot(&d)
                            + eddot.dot(&d_d)
                            + 2.0 * (dedot.dot(&dd) + edot.dot(&d_dd))
                            + de.dot(&ddd)
                            + ew.dot(&d_ddd);
                    }
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let ep = skel.body_elem(*pb);
                    let ec = skel.body_elem(*cb);
                    let (rp, wp, ap) = (&st.x[ep].rot, &st.v[ep].ang, &st.a[ep].ang);
                    let (gp, dwp, dap) = (&tg.g[ep].ang, &tg.dv[ep].ang, &tg.da[ep].ang);
                    let (wc, ac) = (&st.v[ec].ang, &st.a[ec].ang);
                    let (gc, dwc, dac) = (&tg.g[ec].ang, &tg.dv[ec].ang, &tg.da[ec].ang);
                    let uw = st.x[ec].rot * u;
                    let du = gc.cross(&uw);
                    let udot = wc.cross(&uw);
                    let dudot = dwc.cross(&uw) + wc.cross(&du);
                    let uddot = ac.cross(&uw) + wc.cross(&udot);
                    let duddot = dac.cross(&uw) + ac.cross(&du) + dwc.cross(&udot) + wc.cross(&dudot);
                    for (k, ml) in [m1, m2].into_iter().enumerate() {
                        let mw = rp * ml;
                        let dm = gp.cross(&mw);
                        let mdot = wp.cross(&mw);
                        let dmdot = dwp.cross(&mw) + wp.cross(&dm);
                        let mddot = ap.cross(&mw) + wp.cross(&mdot);
                        let dmddot =
                            dap.cross(&mw) + ap.cross(&dm) + dwp.cross(&mdot) + wp.cross(&dmdot);
                        out[r + k] = dmddot.dot(&uw)
                            + mddot.dot(&du)
                            + 2.0 * (dmdot.dot(&udot) + mdot.dot(&dudot))
                            + dm.dot(&uddot)
                            + mw.dot(&duddot);
                    }
                }
                Block::SolePos { body, local, .. } => {
                    let p = st.body_point(skel, *body, local);
                    let pd = st.point_velocity(skel, *body, &p);
                    out.fixed_rows_mut::<3>(r)
                        .copy_from(&tg.dpoint_acceleration(skel, st, *body, &p, &pd));
                }
                Block::SoleRot { body, .. } => {
                    out.fixed_rows_mut::<3>(r)
                        .copy_from(&tg.da[skel.body_elem(*body)].ang);
                }
            }
            r += b.rows();
        }
        out
    }

    /// Generalized forces of the constraint reactions: `vel_jacobianᵀ · λ`,
    /// assembled without forming the matrix.
    pub fn jac_t_mul(&self, skel: &Skeleton, st: &KinState, lambda: &DVector<f64>) -> DVector<f64> {
        let j = self.vel_jacobian(skel, st);
        j.transpose() * lambda
    }

    /// Directional derivative of `vel_jacobianᵀ · λ` for fixed `λ` along a
    /// position tangent. Computed as the gradient of the bilinear form
    /// λᵀ·rate_plain(q, q̇) in q̇ = tangent trick: δ(Jᵀλ) column action via
    /// per-coordinate sweeps is O(n²); instead evaluate δ(J y) for all basis
    /// vectors is not needed — callers only ever need the full vector, which
    /// equals d/dε [J(q+ε δq)ᵀ λ]. We obtain it from the identity
    /// (δJᵀ λ)_i = λᵀ · δ(J e_i) = λᵀ · drate_plain with q̇ = e_i — but that
    /// is again O(n²). The cheap route: δ(Jᵀλ) = ∇_q (λᵀ J(q) q̇)|struct —
    /// see `djac_t_mul_fd` tests for validation of this implementation,
    /// which walks the blocks and differentiates each wrench map directly.
    pub fn djac_t_mul(
        &self,
        skel: &Skeleton,
        st: &KinState,
        tg: &KinTangent,
        lambda: &DVector<f64>,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(self.nq);
        let mut r = 0;
        for b in &self.blocks {
            match b {
                Block::Point { pb, pp, cb, cp } => {
                    let f: Vector3<f64> = lambda.fixed_rows::<3>(r).into_owned();
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    add_dpoint_force(skel, st, tg, &mut out, *cb, &pc, &f, 1.0);
                    add_dpoint_force(skel, st, tg, &mut out, *pb, &ppw, &f, -1.0);
                }
                Block::Planar { pb, pp, cb, cp, e1, e2 } => {
                    // Rows e_k·(p_c − p_p): force λ_k e_k at the child point,
                    // its negative at the parent point, plus the torque from
                    // e_k rotating with the parent.
                    let ep = skel.body_elem(*pb);
                    let rp = &st.x[ep].rot;
                    let gp = &tg.g[ep].ang;
                    let pc = st.body_point(skel, *cb, cp);
                    let ppw = st.body_point(skel, *pb, pp);
                    let d = pc - ppw;
                    let dd = tg.dpoint(skel, *cb, &pc) - tg.dpoint(skel, *pb, &ppw);
                    for (k, el) in [e1, e2].into_iter().enumerate() {
                        let lam = lambda[r + k];
                        let ew = rp * el;
                        let dew = gp.cross(&ew);
                        add_dpoint_force_full(skel, st, tg, &mut out, *cb, &pc, &(ew * lam), &(dew * lam), 1.0);
                        add_dpoint_force_full(skel, st, tg, &mut out, *pb, &ppw, &(ew * lam), &(dew * lam), -1.0);
                        // torque row term: λ (e_k × d)·ω over the parent
                        // chain (from λ d·(ω×e_k)).
                        let t = ew.cross(&d) * lam;
                        let dt = (dew.cross(&d) + ew.cross(&dd)) * lam;
                        add_dtorque(skel, st, tg, &mut out, *pb, &t, &dt);
                    }
                }
                Block::Axis { pb, m1, m2, cb, u } => {
                    let ep = skel.body_elem(*pb);
                    let ec = skel.body_elem(*cb);
                    let rp = &st.x[ep].rot;
                    let gp = &tg.g[ep].ang;
                    let gc = &tg.g[ec].ang;
                    let uw = st.x[ec].rot * u;
                    let duw = gc.cross(&uw);
                    for (k, ml) in [m1, m2].into_iter().enumerate() {
                        let lam = lambda[r + k];
                        let mw = rp * ml;
                        let dmw = gp.cross(&mw);
                        // child chain torque: λ (m × u)·ω_child →
                        // torque vector λ m×u ... sign: row = m·(ω_c×u) =
                        // (u×m)·ω_c ⇒ torque on child chain = λ (u×m)?
                        // d(m·u)/dθ_c with u rotating: (m × u)... keep the
                        // exact forms used by vel_jacobian: child term is
                        // m·(s_ang×u) = s_ang·(u×m).
                        let tc = uw.cross(&mw) * lam;
                        let dtc = (duw.cross(&mw) + uw.cross(&dmw)) * lam;
                        add_dtorque(skel, st, tg, &mut out, *cb, &tc, &dtc);
                        // parent term: (s_ang×m)·u = s_ang·(m×u).
                        let tp = mw.cross(&uw) * lam;
                        let dtp = (dmw.cross(&uw) + mw.cross(&duw)) * lam;
                        add_dtorque(skel, st, tg, &mut out, *pb, &tp, &dtp);
                    }
                }
                Block::SolePos { body, local, .. } => {
                    let f: Vector3<f64> = lambda.fixed_rows::<3>(r).into_owned();
                    let p = st.body_point(skel, *body, local);
                    add_dpoint_force(skel, st, tg, &mut out, *body, &p, &f, 1.0);
                }
                Block::SoleRot { body, .. } => {
                    let t: Vector3<f64> = lambda.fixed_rows::<3>(r).into_owned();
                    add_dtorque(skel, st, tg, &mut out, *body, &t, &Vector3::zeros());
                }
            }
            r += b.rows();
        }
        out
    }
}

/// Adds δ(Jᵀf) for a pure force `f` (constant) applied at body point `p`.
fn add_dpoint_force(
    skel: &Skeleton,
    st: &KinState,
    tg: &KinTangent,
    out: &mut DVector<f64>,
    body: usize,
    p: &Vector3<f64>,
    f: &Vector3<f64>,
    sign: f64,
) {
    add_dpoint_force_full(skel, st, tg, out, body, p, f, &Vector3::zeros(), sign);
}

/// Adds δ(Jᵀf) for a force `f` with variation `df` applied at body point `p`
/// (the point rides the body, so its variation comes from the tangent).
#[allow(clippy::too_many_arguments)]
fn add_dpoint_force_full(
    skel: &Skeleton,
    st: &KinState,
    tg: &KinTangent,
    out: &mut DVector<f64>,
    body: usize,
    p: &Vector3<f64>,
    f: &Vector3<f64>,
    df: &Vector3<f64>,
    sign: f64,
) {
    let dp = tg.dpoint(skel, body, p);
    let mut e = Some(skel.body_elem(body));
    while let Some(i) = e {
        if let Some(c) = skel.coord_of(i) {
            let s = &st.s[i];
            let ds = tg.g[i].cross_motion(s);
            // column contribution: (s.ang×p + s.lin)·f; differentiate
            // everything.
            let col = s.ang.cross(p) + s.lin;
            let dcol = ds.ang.cross(p) + s.ang.cross(&dp) + ds.lin;
            out[c] += sign * (dcol.dot(f) + col.dot(df));
        }
        e = skel.parent(i);
    }
}

/// Adds δ(Aᵀt) for a torque `t` with variation `dt` applied to a body's
/// angular rows.
fn add_dtorque(
    skel: &Skeleton,
    st: &KinState,
    tg: &KinTangent,
    out: &mut DVector<f64>,
    body: usize,
    t: &Vector3<f64>,
    dt: &Vector3<f64>,
) {
    let mut e = Some(skel.body_elem(body));
    while let Some(i) = e {
        if let Some(c) = skel.coord_of(i) {
            let s = &st.s[i];
            let ds = tg.g[i].cross_motion(s);
            out[c] += ds.ang.dot(t) + s.ang.dot(dt);
        }
        e = skel.parent(i);
    }
}

/// Result of a converged inverse-kinematics solve.
pub struct IkSolution {
    pub q: DVector<f64>,
    pub iters: usize,
    pub residual: f64,
}

/// Solves c(q) = 0 for the unactuated coordinates, holding the actuated
/// values `qa` fixed, by Newton iteration from `q_guess` (a full-length
/// vector whose actuated entries are overwritten by `qa`). Requires as many
/// constraint rows as unactuated coordinates.
pub fn solve_ik(
    rd: &crate::dynamics::RobotDyn,
    cs: &ConstraintSet,
    qa: &DVector<f64>,
    q_guess: &DVector<f64>,
    tol: f64,
) -> Result<IkSolution, ConstraintError> {
    let model = &rd.model;
    let mut q = q_guess.clone();
    for (k, &i) in model.actuated_idx().iter().enumerate() {
        q[i] = qa[k];
    }
    newton_ik(rd, cs, q, model.unactuated_idx(), tol)
}

/// Newton core: solves the constraint rows for the coordinates listed in
/// `unknowns`, all others held at the values already in `q`. The system
/// must be square.
pub(crate) fn newton_ik(
    rd: &crate::dynamics::RobotDyn,
    cs: &ConstraintSet,
    mut q: DVector<f64>,
    unknowns: &[usize],
    tol: f64,
) -> Result<IkSolution, ConstraintError> {
    if cs.n_rows() != unknowns.len() {
        return Err(ConstraintError::NotSquare {
            rows: cs.n_rows(),
            unknowns: unknowns.len(),
        });
    }
    let uidx = unknowns;
    let max_iters = 50;
    for it in 0..max_iters {
        let st = rd.skel.fk_pos(&q);
        let c = cs.value(&rd.skel, &st);
        let cnorm = c.amax();
        if cnorm <= tol {
            // One polishing step tightens the residual to solver precision.
            let j = cs.jacobian(&rd.skel, &st);
            let ju = gather_cols(&j, uidx);
            if let Some(step) = solve_square(&ju, &c)? {
                for (k, &i) in uidx.iter().enumerate() {
                    q[i] -= step[k];
                }
            }
            let st = rd.skel.fk_pos(&q);
            let resid = cs.value(&rd.skel, &st).amax();
            return Ok(IkSolution {
                q,
                iters: it,
                residual: resid,
            });
        }
        let j = cs.jacobian(&rd.skel, &st);
        let ju = gather_cols(&j, uidx);
        let Some(step) = solve_square(&ju, &c)? else {
            return Err(ConstraintError::Singular { ratio: 0.0 });
        };
        // Backtracking on the residual norm.
        let mut alpha = 1.0;
        let cn0 = c.norm();
        for _ in 0..30 {
            let mut q_try = q.clone();
            for (k, &i) in uidx.iter().enumerate() {
                q_try[i] -= alpha * step[k];
            }
            let st_try = rd.skel.fk_pos(&q_try);
            let cn = cs.value(&rd.skel, &st_try).norm();
            if cn < cn0 || cn < tol {
                q = q_try;
                break;
            }
            alpha *= 0.5;
        }
    }
    let st = rd.skel.fk_pos(&q);
    Err(ConstraintError::IkNoConverge {
        iters: max_iters,
        residual: cs.value(&rd.skel, &st).amax(),
    })
}

/// Columns of `m` at the given indices.
pub(crate) fn gather_cols(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), idx.len());
    for (k, &i) in idx.iter().enumerate() {
        out.set_column(k, &m.column(i));
    }
    out
}

/// Solves a square system via SVD, reporting singularity; `None` only for
/// degenerate zero-size systems.
pub(crate) fn solve_square(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<Option<DVector<f64>>, ConstraintError> {
    if a.nrows() == 0 {
        return Ok(Some(DVector::zeros(0)));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin < 1e-10 * smax {
        return Err(ConstraintError::Singular { ratio: smin / smax });
    }
    Ok(Some(svd.solve(b, 0.0).expect("svd solve")))
}

/// The actuated-to-full velocity projection G at an on-manifold state:
/// q̇ = G q̇_a with G rows scattering the identity over actuated coordinates
/// and −J_u⁻¹ J_a over unactuated ones.
pub fn projection(
    rd: &crate::dynamics::RobotDyn,
    cs: &ConstraintSet,
    st: &KinState,
) -> Result<DMatrix<f64>, ConstraintError> {
    let model = &rd.model;
    let j = cs.vel_jacobian(&rd.skel, st);
    let ju = gather_cols(&j, model.unactuated_idx());
    let ja = gather_cols(&j, model.actuated_idx());
    if ju.nrows() != ju.ncols() {
        return Err(ConstraintError::NotSquare {
            rows: ju.nrows(),
            unknowns: ju.ncols(),
        });
    }
    let lu = ju.lu();
    let gu = -lu.solve(&ja).ok_or(ConstraintError::Singular { ratio: 0.0 })?;
    let mut g = DMatrix::zeros(model.nq(), model.na());
    for (k, &i) in model.actuated_idx().iter().enumerate() {
        g[(i, k)] = 1.0;
    }
    for (r, &i) in model.unactuated_idx().iter().enumerate() {
        for k in 0..model.na() {
            g[(i, k)] = gu[(r, k)];
        }
    }
    Ok(g)
}
