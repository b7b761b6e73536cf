//! Small rotation and SO(3) helpers shared across the crate.

use nalgebra::{Matrix3, Vector3};

/// Skew-symmetric matrix S(v) with S(v)·w = v × w.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix from ZYX Euler angles: R = Rz(yaw)·Ry(pitch)·Rx(roll).
pub fn rot_zyx(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Rotation about the z axis.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    rot_zyx(0.0, 0.0, yaw)
}

/// Inverse of [`rot_zyx`]: recovers `(roll, pitch, yaw)` from a rotation
/// matrix. At the pitch singularity (|pitch| = π/2) the yaw is set to zero
/// and the remaining freedom absorbed into roll.
pub fn euler_zyx(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    if sp.abs() > 1.0 - 1e-9 {
        let pitch = sp.asin();
        let roll = (sp * r[(0, 1)]).atan2(r[(1, 1)]);
        return (roll, pitch, 0.0);
    }
    let pitch = sp.asin();
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    (roll, pitch, yaw)
}

/// Rotation by `angle` about a unit axis (Rodrigues).
pub fn rot_axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let k = skew(axis);
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// SO(3) logarithm: the rotation vector e with exp(S(e)) = R.
///
/// Uses the skew-part / trace formulation, which stays accurate near the
/// identity; angles near pi fall back to the diagonal method.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let s_vec = Vector3::new(
        0.5 * (r[(2, 1)] - r[(1, 2)]),
        0.5 * (r[(0, 2)] - r[(2, 0)]),
        0.5 * (r[(1, 0)] - r[(0, 1)]),
    );
    let sin_t = s_vec.norm();
    let cos_t = 0.5 * (r.trace() - 1.0);
    let theta = sin_t.atan2(cos_t);

    if cos_t > -0.999 {
        let factor = if theta < 1e-7 {
            // theta/sin(theta) expanded for small angles
            1.0 + theta * theta / 6.0
        } else {
            theta / sin_t
        };
        s_vec * factor
    } else {
        // Angle near pi: axis from the dominant diagonal of (R + I)/2.
        let a = Matrix3::identity() + r;
        let (imax, _) = [a[(0, 0)], a[(1, 1)], a[(2, 2)]]
            .iter()
            .enumerate()
            .fold((0usize, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let col = a.column(imax) / (2.0 * (1.0 + r[(imax, imax)])).sqrt().max(1e-12);
        let axis = col.normalize();
        // Resolve the sign from the skew part (which can be tiny but keeps
        // direction information unless theta is exactly pi).
        let sign = if s_vec.dot(&axis) < 0.0 { -1.0 } else { 1.0 };
        axis * (theta * sign)
    }
}

/// eta(phi) coefficient of the inverse left Jacobian of SO(3):
/// Jl^{-1}(e) = I - S(e)/2 + eta S(e)^2, phi = |e|.
fn jl_inv_eta(phi: f64) -> f64 {
    if phi < 1e-3 {
        1.0 / 12.0 + phi * phi / 720.0
    } else {
        1.0 / (phi * phi) - (1.0 + phi.cos()) / (2.0 * phi * phi.sin())
    }
}

/// d eta / d phi.
fn jl_inv_eta_d(phi: f64) -> f64 {
    if phi < 1e-3 {
        phi / 360.0 + phi * phi * phi / 7560.0
    } else {
        let (s, c) = phi.sin_cos();
        // derivative of 1/phi^2 - (1+c)/(2 phi s)
        -2.0 / (phi * phi * phi)
            - (-s * (2.0 * phi * s) - (1.0 + c) * (2.0 * s + 2.0 * phi * c))
                / (4.0 * phi * phi * s * s)
    }
}

/// Inverse left Jacobian of the SO(3) exponential at rotation vector `e`.
///
/// Maps world angular velocity to the rate of the log coordinates:
/// de/dt = Jl^{-1}(e) · omega.
pub fn jl_inv(e: &Vector3<f64>) -> Matrix3<f64> {
    let phi = e.norm();
    let se = skew(e);
    Matrix3::identity() - se * 0.5 + se * se * jl_inv_eta(phi)
}

/// Directional derivative of `jl_inv` at `e` in direction `de`.
pub fn jl_inv_dir(e: &Vector3<f64>, de: &Vector3<f64>) -> Matrix3<f64> {
    let phi = e.norm();
    let se = skew(e);
    let sde = skew(de);
    let dphi = if phi > 1e-12 { e.dot(de) / phi } else { 0.0 };
    -sde * 0.5 + se * se * (jl_inv_eta_d(phi) * dphi) + (sde * se + se * sde) * jl_inv_eta(phi)
}

/// Completes a unit normal to a right-handed orthonormal triad (e1, e2, n).
///
/// Deterministic: the seed axis is x unless the normal is nearly parallel to
/// x, in which case y is used.
pub fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = (seed - n * seed.dot(n)).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(rng: &mut impl rand::Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        )
    }

    #[test]
    fn zyx_composition_matches_axis_rotations() {
        let (r, p, y) = (0.3, -0.7, 1.2);
        let expect = rot_axis_angle(&Vector3::z(), y)
            * rot_axis_angle(&Vector3::y(), p)
            * rot_axis_angle(&Vector3::x(), r);
        assert!((rot_zyx(r, p, y) - expect).norm() < 1e-14);
    }

    #[test]
    fn log_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let e = rand_vec(&mut rng, 1.0).normalize() * rng.gen_range(1e-3..3.0);
            let r = rot_axis_angle(&e.normalize(), e.norm());
            let back = so3_log(&r);
            assert!((back - e).norm() < 1e-9, "e={e:?} back={back:?}");
        }
        // near identity
        for _ in 0..50 {
            let e = rand_vec(&mut rng, 1e-9);
            let r = Matrix3::identity() + skew(&e);
            let back = so3_log(&r);
            assert!((back - e).norm() < 1e-15);
        }
    }

    #[test]
    fn jl_inv_matches_log_rate() {
        // d/dt log(exp(S(e(t)))) with R(t+h) = exp(S(w h)) R(t)
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..50 {
            let e = rand_vec(&mut rng, 1.5);
            let w = rand_vec(&mut rng, 1.0);
            let r = rot_axis_angle(&e.normalize(), e.norm());
            let rp = rot_axis_angle(&(w * h).normalize(), (w * h).norm()) * r;
            let rm = rot_axis_angle(&(w * h).normalize(), -(w * h).norm()) * r;
            let fd = (so3_log(&rp) - so3_log(&rm)) / (2.0 * h);
            let an = jl_inv(&e) * w;
            assert!((fd - an).norm() < 1e-6 * (1.0 + an.norm()), "fd={fd:?} an={an:?}");
        }
    }

    #[test]
    fn jl_inv_dir_matches_fd() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..50 {
            let e = rand_vec(&mut rng, 1.5);
            let de = rand_vec(&mut rng, 1.0);
            let fd = (jl_inv(&(e + de * h)) - jl_inv(&(e - de * h))) / (2.0 * h);
            let an = jl_inv_dir(&e, &de);
            assert!((fd - an).norm() < 1e-6 * (1.0 + an.norm()));
        }
    }

    #[test]
    fn plane_basis_is_orthonormal() {
        let n = Vector3::new(0.2, -0.9, 0.3).normalize();
        let (e1, e2) = plane_basis(&n);
        assert!(e1.dot(&n).abs() < 1e-14);
        assert!(e2.dot(&n).abs() < 1e-14);
        assert!((e1.norm() - 1.0).abs() < 1e-14);
        assert!((e1.cross(&e2) - n).norm() < 1e-14);
    }
}
