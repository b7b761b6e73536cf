//! Robot description: bodies, joints, loop closures, contact patches.
//!
//! Models load from a line-oriented text format (see [`parse`]) or from the
//! bundled desk-scale robots. Loading validates the kinematic tree, inertia
//! realizability, closure references, and the left/right symmetry table, and
//! precomputes the generalized-coordinate layout.
//!
//! Coordinate conventions:
//! - one coordinate per revolute/prismatic joint, in joint declaration order;
//! - a `floating6` joint contributes six coordinates (x, y, z, yaw, pitch,
//!   roll) with rotation Rz(yaw)·Ry(pitch)·Rx(roll);
//! - symmetry swap tables index these coordinates, 0-based.

mod parse;
pub mod bundled;

pub use parse::{parse_model, serialize_model};

use crate::math::rot_zyx;
use crate::spatial::Frame;
use nalgebra::{DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown bundled model `{0}`")]
    UnknownBundled(String),
    #[error("model file not found: {0}")]
    FileNotFound(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Reference to a parent body: the fixed world or a model body by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyRef {
    World,
    Body(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub name: String,
    pub mass: f64,
    /// Center of mass in the body frame.
    pub com: Vector3<f64>,
    /// Rotational inertia about the com, body axes (symmetric 3×3).
    pub inertia: Matrix3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
    Floating6,
    Fixed,
}

impl JointKind {
    pub fn dof(&self) -> usize {
        match self {
            JointKind::Revolute | JointKind::Prismatic => 1,
            JointKind::Floating6 => 6,
            JointKind::Fixed => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent: BodyRef,
    pub child: usize,
    /// Fixed transform from the parent body frame to the joint frame,
    /// derived from `origin_pos` and `origin_rpy`.
    pub origin: Frame,
    /// Raw origin position as declared (kept for exact serialization).
    pub origin_pos: Vector3<f64>,
    /// Raw origin roll/pitch/yaw as declared.
    pub origin_rpy: Vector3<f64>,
    /// Motion axis in the joint frame (unit; unused for floating6/fixed).
    pub axis: Vector3<f64>,
    pub limits: Option<(f64, f64)>,
    pub vmax: Option<f64>,
    pub taumax: Option<f64>,
    pub actuated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosureKind {
    /// Two body-fixed points coincide (3 rows).
    Point3,
    /// Point coincidence projected on a body-fixed plane (2 rows).
    PlanarPoint2,
    /// Point coincidence plus axis alignment (5 rows).
    Pin5,
}

impl ClosureKind {
    pub fn rows(&self) -> usize {
        match self {
            ClosureKind::Point3 => 3,
            ClosureKind::PlanarPoint2 => 2,
            ClosureKind::Pin5 => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopClosure {
    pub name: String,
    pub kind: ClosureKind,
    pub parent_body: usize,
    pub parent_point: Vector3<f64>,
    pub child_body: usize,
    pub child_point: Vector3<f64>,
    /// Plane normal (planar_point2) or pin axis (pin5), in the parent body
    /// frame; pin5 aligns the same local direction of both bodies.
    pub normal: Option<Vector3<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(&self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(format!("expected left|right, got `{other}`")),
        }
    }
}

/// Rectangular foot sole able to carry a unilateral contact wrench.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactPatch {
    pub side: Side,
    pub body: usize,
    /// Sole frame in the foot body frame; +z is the outward ground normal,
    /// +x spans the length `la`, +y the width `lb`.
    pub frame: Frame,
    /// Raw frame position as declared (kept for exact serialization).
    pub frame_pos: Vector3<f64>,
    /// Raw frame roll/pitch/yaw as declared.
    pub frame_rpy: Vector3<f64>,
    pub la: f64,
    pub lb: f64,
    pub mu: f64,
    pub gamma: f64,
}

/// Signed permutation of generalized coordinates realizing left/right
/// symmetry. Applying it twice is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapTable {
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
}

impl SwapTable {
    pub fn apply(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(q.len());
        for (i, (&p, &s)) in self.perm.iter().zip(&self.sign).enumerate() {
            out[p] = s * q[i];
        }
        out
    }
}

/// Per-coordinate metadata derived from the joint list.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordInfo {
    pub name: String,
    pub joint: usize,
    pub limits: Option<(f64, f64)>,
    pub vmax: Option<f64>,
    pub taumax: Option<f64>,
    pub actuated: bool,
}

/// Indices of the six floating-base coordinates, when a floating6 joint is
/// present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseCoords {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub yaw: usize,
    pub pitch: usize,
    pub roll: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub bodies: Vec<Body>,
    pub joints: Vec<Joint>,
    pub closures: Vec<LoopClosure>,
    pub contacts: Vec<ContactPatch>,
    pub symmetry: Option<SwapTable>,
    pub fully_actuated_in_stance: bool,
    coords: Vec<CoordInfo>,
    actuated: Vec<usize>,
    unactuated: Vec<usize>,
    base: Option<BaseCoords>,
}

impl RobotModel {
    /// Number of generalized coordinates.
    pub fn nq(&self) -> usize {
        self.coords.len()
    }

    /// Number of actuated coordinates.
    pub fn na(&self) -> usize {
        self.actuated.len()
    }

    /// Number of unactuated coordinates.
    pub fn nu(&self) -> usize {
        self.unactuated.len()
    }

    pub fn coords(&self) -> &[CoordInfo] {
        &self.coords
    }

    /// Actuated coordinate indices, ascending.
    pub fn actuated_idx(&self) -> &[usize] {
        &self.actuated
    }

    /// Unactuated coordinate indices, ascending.
    pub fn unactuated_idx(&self) -> &[usize] {
        &self.unactuated
    }

    pub fn base_coords(&self) -> Option<BaseCoords> {
        self.base
    }

    /// Total closure constraint rows.
    pub fn closure_rows(&self) -> usize {
        self.closures.iter().map(|c| c.kind.rows()).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    pub fn contact(&self, side: Side) -> Option<&ContactPatch> {
        self.contacts.iter().find(|c| c.side == side)
    }

    /// Gathers the actuated slice of a full coordinate vector.
    pub fn select_actuated(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.na(), self.actuated.iter().map(|&i| q[i]))
    }

    /// Gathers the unactuated slice of a full coordinate vector.
    pub fn select_unactuated(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.nu(), self.unactuated.iter().map(|&i| q[i]))
    }

    /// Scatters actuated and unactuated slices back into a full vector.
    pub fn assemble_q(&self, qa: &DVector<f64>, qu: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(self.nq());
        for (k, &i) in self.actuated.iter().enumerate() {
            q[i] = qa[k];
        }
        for (k, &i) in self.unactuated.iter().enumerate() {
            q[i] = qu[k];
        }
        q
    }

    /// Actuated torque bounds, in actuated-coordinate order.
    pub fn actuated_taumax(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.na(),
            self.actuated
                .iter()
                .map(|&i| self.coords[i].taumax.unwrap_or(f64::INFINITY)),
        )
    }

    /// Applies the left/right swap to a coordinate-space vector (valid for q,
    /// q_dot, or any coordinate-indexed quantity).
    pub fn swap_legs(&self, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let table = self
            .symmetry
            .as_ref()
            .ok_or_else(|| ModelError::Invalid("model declares no symmetry table".into()))?;
        Ok(table.apply(q))
    }

    /// Builds a model from parts, validating everything. `parse_model` and
    /// the bundled loaders funnel through here.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        name: String,
        bodies: Vec<Body>,
        joints: Vec<Joint>,
        closures: Vec<LoopClosure>,
        contacts: Vec<ContactPatch>,
        symmetry_entries: Option<Vec<(usize, usize, f64)>>,
        fully_actuated_in_stance: bool,
    ) -> Result<RobotModel, ModelError> {
        let inv = |msg: String| Err(ModelError::Invalid(msg));

        // Unique names.
        for (i, b) in bodies.iter().enumerate() {
            if b.name == "world" {
                return inv("`world` is a reserved body name".into());
            }
            if bodies[..i].iter().any(|o| o.name == b.name) {
                return inv(format!("duplicate body name `{}`", b.name));
            }
        }
        for (i, j) in joints.iter().enumerate() {
            if joints[..i].iter().any(|o| o.name == j.name) {
                return inv(format!("duplicate joint name `{}`", j.name));
            }
        }

        // Bodies: inertia realizability.
        for b in &bodies {
            if !(b.mass > 0.0) {
                return inv(format!("body `{}`: mass must be positive", b.name));
            }
            if (b.inertia - b.inertia.transpose()).norm() > 1e-12 {
                return inv(format!("body `{}`: inertia must be symmetric", b.name));
            }
            let eig = b.inertia.symmetric_eigenvalues();
            let mut ev = [eig[0], eig[1], eig[2]];
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if ev[0] <= 0.0 {
                return inv(format!(
                    "body `{}`: inertia must be positive definite",
                    b.name
                ));
            }
            if ev[0] + ev[1] < ev[2] * (1.0 - 1e-9) {
                return inv(format!(
                    "body `{}`: inertia principal moments violate the triangle inequality",
                    b.name
                ));
            }
        }

        // Joints: tree structure (each body the child of exactly one joint).
        let mut child_seen = vec![false; bodies.len()];
        for j in &joints {
            if j.child >= bodies.len() {
                return inv(format!("joint `{}`: child body out of range", j.name));
            }
            if child_seen[j.child] {
                return inv(format!(
                    "body `{}` has more than one parent joint",
                    bodies[j.child].name
                ));
            }
            child_seen[j.child] = true;
            if let BodyRef::Body(p) = j.parent {
                if p >= bodies.len() {
                    return inv(format!("joint `{}`: parent body out of range", j.name));
                }
                if p == j.child {
                    return inv(format!("joint `{}`: parent equals child", j.name));
                }
            }
            match j.kind {
                JointKind::Revolute | JointKind::Prismatic => {
                    if !(j.axis.norm() > 1e-12) {
                        return inv(format!("joint `{}`: axis must be nonzero", j.name));
                    }
                }
                JointKind::Floating6 => {
                    if j.parent != BodyRef::World {
                        return inv(format!(
                            "joint `{}`: floating6 must be parented to world",
                            j.name
                        ));
                    }
                    if j.actuated {
                        return inv(format!("joint `{}`: floating6 cannot be actuated", j.name));
                    }
                }
                JointKind::Fixed => {}
            }
            if let Some((lo, hi)) = j.limits {
                if !(lo < hi) {
                    return inv(format!("joint `{}`: limits must satisfy lo < hi", j.name));
                }
            }
            if j.actuated && j.kind != JointKind::Fixed {
                match j.taumax {
                    Some(t) if t > 0.0 => {}
                    _ => {
                        return inv(format!(
                            "joint `{}`: actuated joints need taumax > 0",
                            j.name
                        ))
                    }
                }
            }
        }
        for (b, seen) in child_seen.iter().enumerate() {
            if !seen {
                return inv(format!("body `{}` is not connected by any joint", bodies[b].name));
            }
        }
        if joints.iter().filter(|j| j.kind == JointKind::Floating6).count() > 1 {
            return inv("at most one floating6 joint is supported".into());
        }

        // Reachability from world (no cycles / dangling subtrees). Walk the
        // joint list propagating "reachable" until a fixed point.
        let mut reachable = vec![false; bodies.len()];
        let mut changed = true;
        while changed {
            changed = false;
            for j in &joints {
                let parent_ok = match j.parent {
                    BodyRef::World => true,
                    BodyRef::Body(p) => reachable[p],
                };
                if parent_ok && !reachable[j.child] {
                    reachable[j.child] = true;
                    changed = true;
                }
            }
        }
        if let Some(b) = reachable.iter().position(|r| !r) {
            return inv(format!(
                "body `{}` is not reachable from world (joint cycle?)",
                bodies[b].name
            ));
        }

        // Closures.
        for c in &closures {
            for (b, which) in [(c.parent_body, "parent"), (c.child_body, "child")] {
                if b >= bodies.len() {
                    return inv(format!("closure `{}`: {which} body out of range", c.name));
                }
            }
            if c.parent_body == c.child_body {
                return inv(format!("closure `{}`: parent equals child", c.name));
            }
            match c.kind {
                ClosureKind::PlanarPoint2 | ClosureKind::Pin5 => match c.normal {
                    Some(n) if n.norm() > 1e-12 => {}
                    _ => {
                        return inv(format!(
                            "closure `{}`: {:?} requires a nonzero normal",
                            c.name, c.kind
                        ))
                    }
                },
                ClosureKind::Point3 => {}
            }
        }

        // Contacts.
        for (i, c) in contacts.iter().enumerate() {
            if c.body >= bodies.len() {
                return inv(format!("contact {}: body out of range", c.side.name()));
            }
            if contacts[..i].iter().any(|o| o.side == c.side) {
                return inv(format!("duplicate contact side {}", c.side.name()));
            }
            if !(c.la > 0.0 && c.lb > 0.0 && c.mu > 0.0 && c.gamma > 0.0) {
                return inv(format!(
                    "contact {}: la, lb, mu, gamma must be positive",
                    c.side.name()
                ));
            }
        }

        // Coordinate layout.
        let mut coords = Vec::new();
        let mut base = None;
        for (ji, j) in joints.iter().enumerate() {
            match j.kind {
                JointKind::Revolute | JointKind::Prismatic => coords.push(CoordInfo {
                    name: j.name.clone(),
                    joint: ji,
                    limits: j.limits,
                    vmax: j.vmax,
                    taumax: j.taumax,
                    actuated: j.actuated,
                }),
                JointKind::Floating6 => {
                    let first = coords.len();
                    for part in ["x", "y", "z", "yaw", "pitch", "roll"] {
                        coords.push(CoordInfo {
                            name: format!("{}.{part}", j.name),
                            joint: ji,
                            limits: None,
                            vmax: None,
                            taumax: None,
                            actuated: false,
                        });
                    }
                    base = Some(BaseCoords {
                        x: first,
                        y: first + 1,
                        z: first + 2,
                        yaw: first + 3,
                        pitch: first + 4,
                        roll: first + 5,
                    });
                }
                JointKind::Fixed => {}
            }
        }
        let actuated: Vec<usize> = coords
            .iter()
            .enumerate()
            .filter(|(_, c)| c.actuated)
            .map(|(i, _)| i)
            .collect();
        let unactuated: Vec<usize> = coords
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.actuated)
            .map(|(i, _)| i)
            .collect();

        // Symmetry table.
        let symmetry = match symmetry_entries {
            None => None,
            Some(entries) => {
                let n = coords.len();
                let mut perm: Vec<usize> = (0..n).collect();
                let mut sign = vec![1.0; n];
                let mut touched = vec![false; n];
                for (i, j, s) in entries {
                    if i >= n || j >= n {
                        return inv(format!("symmetry entry {i}:{j} out of range (n={n})"));
                    }
                    if s != 1.0 && s != -1.0 {
                        return inv(format!("symmetry entry {i}:{j}: sign must be +1 or -1"));
                    }
                    for (a, b) in [(i, j), (j, i)] {
                        if touched[a] && (perm[a] != b || sign[a] != s) {
                            return inv(format!("symmetry entry {i}:{j} conflicts with an earlier entry"));
                        }
                        perm[a] = b;
                        sign[a] = s;
                        touched[a] = true;
                    }
                }
                // Involution check: applying the signed permutation twice must
                // be the identity.
                for i in 0..n {
                    if perm[perm[i]] != i || sign[i] * sign[perm[i]] != 1.0 {
                        return inv(format!("symmetry table is not an involution at coordinate {i}"));
                    }
                }
                Some(SwapTable { perm, sign })
            }
        };

        let closure_rows: usize = closures.iter().map(|c| c.kind.rows()).sum();
        if fully_actuated_in_stance {
            if contacts.is_empty() {
                return inv("fully_actuated_in_stance requires contact patches".into());
            }
            if closure_rows + 6 != unactuated.len() {
                return inv(format!(
                    "fully_actuated_in_stance requires closure rows + 6 == n_u (got {} + 6 != {})",
                    closure_rows,
                    unactuated.len()
                ));
            }
        }

        Ok(RobotModel {
            name,
            bodies,
            joints,
            closures,
            contacts,
            symmetry,
            fully_actuated_in_stance,
            coords,
            actuated,
            unactuated,
            base,
        })
    }
}

/// Loads a model from a file path.
pub fn load_model(path: &str) -> Result<RobotModel, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ModelError::FileNotFound(path.to_string())
        } else {
            ModelError::Io {
                path: path.to_string(),
                source: e,
            }
        }
    })?;
    let stem = std::path::Path::new(path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    parse_model(&text, stem)
}

/// Builds the frame of a joint origin from position + ZYX Euler angles.
pub fn origin_frame(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Frame {
    Frame::new(rot_zyx(roll, pitch, yaw), Vector3::new(x, y, z))
}
