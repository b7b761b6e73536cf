//! World-frame spatial (Plücker) vectors and rigid-body inertia.
//!
//! Motion vectors pair angular and linear parts taken at the world origin:
//! a body's velocity field is x_dot = ang × x + lin. Force vectors pair the
//! moment about the origin with the net force.

use crate::math::skew;
use nalgebra::{Matrix3, Vector3};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Rigid placement (rotation + translation), world-from-local.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
}

impl Frame {
    pub fn identity() -> Self {
        Frame {
            rot: Matrix3::identity(),
            pos: Vector3::zeros(),
        }
    }

    pub fn new(rot: Matrix3<f64>, pos: Vector3<f64>) -> Self {
        Frame { rot, pos }
    }

    /// self ∘ other (apply `other` in `self`'s coordinates).
    pub fn compose(&self, other: &Frame) -> Frame {
        Frame {
            rot: self.rot * other.rot,
            pos: self.rot * other.pos + self.pos,
        }
    }

    pub fn inverse(&self) -> Frame {
        let rt = self.rot.transpose();
        Frame {
            rot: rt,
            pos: -(rt * self.pos),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.pos
    }
}

/// Spatial motion vector (angular; linear at the world origin).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Motion {
    pub ang: Vector3<f64>,
    pub lin: Vector3<f64>,
}

/// Spatial force vector (moment about the world origin; force).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Force {
    pub ang: Vector3<f64>,
    pub lin: Vector3<f64>,
}

impl Motion {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(ang: Vector3<f64>, lin: Vector3<f64>) -> Self {
        Motion { ang, lin }
    }

    /// Velocity of the material point currently at world position `p`.
    pub fn point_velocity(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.ang.cross(p) + self.lin
    }

    /// Spatial cross product of motion vectors (Lie bracket ad_self other).
    pub fn cross_motion(&self, other: &Motion) -> Motion {
        Motion {
            ang: self.ang.cross(&other.ang),
            lin: self.ang.cross(&other.lin) + self.lin.cross(&other.ang),
        }
    }

    /// Dual cross product against a force vector.
    pub fn cross_force(&self, f: &Force) -> Force {
        Force {
            ang: self.ang.cross(&f.ang) + self.lin.cross(&f.lin),
            lin: self.ang.cross(&f.lin),
        }
    }

    pub fn dot_force(&self, f: &Force) -> f64 {
        self.ang.dot(&f.ang) + self.lin.dot(&f.lin)
    }

    pub fn scale(&self, s: f64) -> Motion {
        Motion::new(self.ang * s, self.lin * s)
    }
}

impl Add for Motion {
    type Output = Motion;
    fn add(self, o: Motion) -> Motion {
        Motion::new(self.ang + o.ang, self.lin + o.lin)
    }
}

impl AddAssign for Motion {
    fn add_assign(&mut self, o: Motion) {
        self.ang += o.ang;
        self.lin += o.lin;
    }
}

impl Sub for Motion {
    type Output = Motion;
    fn sub(self, o: Motion) -> Motion {
        Motion::new(self.ang - o.ang, self.lin - o.lin)
    }
}

impl Neg for Motion {
    type Output = Motion;
    fn neg(self) -> Motion {
        Motion::new(-self.ang, -self.lin)
    }
}

impl Mul<f64> for Motion {
    type Output = Motion;
    fn mul(self, s: f64) -> Motion {
        Motion::new(self.ang * s, self.lin * s)
    }
}

impl Add for Force {
    type Output = Force;
    fn add(self, o: Force) -> Force {
        Force {
            ang: self.ang + o.ang,
            lin: self.lin + o.lin,
        }
    }
}

impl AddAssign for Force {
    fn add_assign(&mut self, o: Force) {
        self.ang += o.ang;
        self.lin += o.lin;
    }
}

impl Sub for Force {
    type Output = Force;
    fn sub(self, o: Force) -> Force {
        Force {
            ang: self.ang - o.ang,
            lin: self.lin - o.lin,
        }
    }
}

impl Mul<f64> for Force {
    type Output = Force;
    fn mul(self, s: f64) -> Force {
        Force {
            ang: self.ang * s,
            lin: self.lin * s,
        }
    }
}

/// Spatial inertia about the world origin.
///
/// Stored as (mass, mass-weighted com position h = m·c, rotational inertia
/// about the origin I_o), so that for v = (w; u) the momentum is
/// (I_o w + h × u; m u − h × w).
#[derive(Clone, Copy, Debug)]
pub struct Inertia {
    pub mass: f64,
    pub h: Vector3<f64>,
    pub i_o: Matrix3<f64>,
}

impl Inertia {
    pub fn zero() -> Self {
        Inertia {
            mass: 0.0,
            h: Vector3::zeros(),
            i_o: Matrix3::zeros(),
        }
    }

    /// Builds the world-frame inertia of a body with center of mass at world
    /// position `c`, mass `m`, and rotational inertia `i_c` about the com in
    /// world-aligned axes.
    pub fn from_com(m: f64, c: Vector3<f64>, i_c: Matrix3<f64>) -> Self {
        let sc = skew(&c);
        Inertia {
            mass: m,
            h: c * m,
            i_o: i_c + sc * sc.transpose() * m,
        }
    }

    /// I · v for a motion vector v.
    pub fn mul_motion(&self, v: &Motion) -> Force {
        Force {
            ang: self.i_o * v.ang + self.h.cross(&v.lin),
            lin: v.lin * self.mass - self.h.cross(&v.ang),
        }
    }

    /// Center of mass position.
    pub fn com(&self) -> Vector3<f64> {
        self.h / self.mass
    }

    /// Rotational inertia about the com (in the axes the inertia is stored
    /// in).
    pub fn about_com(&self) -> Matrix3<f64> {
        let sc = skew(&self.com());
        self.i_o - sc * sc.transpose() * self.mass
    }

    /// Re-expresses the inertia under a frame change: if this inertia is
    /// expressed relative to frame A and `x` places A in B, the result is the
    /// same body's inertia expressed relative to B.
    pub fn transform(&self, x: &Frame) -> Inertia {
        let c = self.com();
        let c_new = x.transform_point(&c);
        let i_c = x.rot * self.about_com() * x.rot.transpose();
        Inertia::from_com(self.mass, c_new, i_c)
    }

    /// Variation of I·y under a placement variation twist g (the frame the
    /// body sits in moves by g while y stays fixed):
    /// δ(I)·y = g ×* (I y) − I (g ×̂ y).
    pub fn dmul_motion(&self, g: &Motion, y: &Motion) -> Force {
        let iy = self.mul_motion(y);
        let gy = g.cross_motion(y);
        g.cross_force(&iy) - self.mul_motion(&gy)
    }
}

impl Add for Inertia {
    type Output = Inertia;
    fn add(self, o: Inertia) -> Inertia {
        Inertia {
            mass: self.mass + o.mass,
            h: self.h + o.h,
            i_o: self.i_o + o.i_o,
        }
    }
}

impl AddAssign for Inertia {
    fn add_assign(&mut self, o: Inertia) {
        self.mass += o.mass;
        self.h += o.h;
        self.i_o += o.i_o;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_matches_planar_hand_calc() {
        // Point mass m at c, translating with u: momentum (c × mu; mu).
        let m = 2.0;
        let c = Vector3::new(0.3, -0.2, 0.5);
        let inertia = Inertia::from_com(m, c, Matrix3::zeros());
        let v = Motion::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let p = inertia.mul_motion(&v);
        assert!((p.lin - v.lin * m).norm() < 1e-14);
        assert!((p.ang - c.cross(&(v.lin * m))).norm() < 1e-14);

        // Pure rotation about the origin through the com offset:
        // velocity of the mass point is w × c, momentum m (w × c).
        let w = Vector3::new(0.0, 0.0, 3.0);
        let v = Motion::new(w, Vector3::zeros());
        let p = inertia.mul_motion(&v);
        assert!((p.lin - w.cross(&c) * m).norm() < 1e-13);
        // moment about origin: c × (m w × c)
        assert!((p.ang - c.cross(&(w.cross(&c) * m))).norm() < 1e-13);
    }

    #[test]
    fn kinetic_energy_is_symmetric_quadratic() {
        let inertia = Inertia::from_com(
            1.7,
            Vector3::new(0.1, 0.2, -0.3),
            Matrix3::new(0.04, 0.0, 0.0, 0.0, 0.05, 0.0, 0.0, 0.0, 0.02),
        );
        let a = Motion::new(Vector3::new(0.3, 1.0, -0.2), Vector3::new(0.5, 0.1, 0.9));
        let b = Motion::new(Vector3::new(-0.8, 0.4, 0.6), Vector3::new(0.2, -0.7, 0.3));
        let ab = b.dot_force(&inertia.mul_motion(&a));
        let ba = a.dot_force(&inertia.mul_motion(&b));
        assert!((ab - ba).abs() < 1e-13);
    }
}
