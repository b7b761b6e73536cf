//! Bezier trajectory representation for the actuated joints, the collocation
//! grid, and the layout of the optimizer's decision vector.
//!
//! Each step parameterizes every actuated joint as a Bezier curve of fixed
//! degree on s ∈ [0, 1], with time scaled by the step duration. Values and
//! the first two derivatives are needed both pointwise (de Casteljau) and as
//! linear weights over the control points (for constraint gradients).

use nalgebra::{DMatrix, DVector};
use std::ops::Range;

/// Bernstein basis weights of degree `v` at `s`, together with the weights
/// of the first and second derivative with respect to `s`. A curve value is
/// the dot product of the weights with the control points.
pub fn bernstein_weights(v: usize, s: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let basis = |deg: usize| -> Vec<f64> {
        let mut b = vec![0.0; deg + 1];
        b[0] = 1.0;
        for d in 1..=deg {
            for i in (1..=d).rev() {
                b[i] = s * b[i - 1] + (1.0 - s) * b[i];
            }
            b[0] *= 1.0 - s;
        }
        b
    };
    let b0 = basis(v);
    let mut w1 = DVector::zeros(v + 1);
    if v >= 1 {
        let bm = basis(v - 1);
        for i in 0..=v {
            let lo = if i >= 1 { bm[i - 1] } else { 0.0 };
            let hi = if i <= v - 1 { bm[i] } else { 0.0 };
            w1[i] = v as f64 * (lo - hi);
        }
    }
    let mut w2 = DVector::zeros(v + 1);
    if v >= 2 {
        let bm = basis(v - 2);
        let c = (v * (v - 1)) as f64;
        for i in 0..=v {
            let a = if i >= 2 { bm[i - 2] } else { 0.0 };
            let b = if i >= 1 && i <= v - 1 { bm[i - 1] } else { 0.0 };
            let d = if i <= v - 2 { bm[i] } else { 0.0 };
            w2[i] = c * (a - 2.0 * b + d);
        }
    }
    (DVector::from_vec(b0), w1, w2)
}

/// A vector-valued Bezier curve: row i of `coeffs` is control point i, one
/// column per output channel.
#[derive(Clone, Debug)]
pub struct Bezier {
    pub coeffs: DMatrix<f64>,
}

impl Bezier {
    pub fn degree(&self) -> usize {
        self.coeffs.nrows() - 1
    }

    /// Curve value at `s` by de Casteljau reduction.
    pub fn eval(&self, s: f64) -> DVector<f64> {
        let mut rows: Vec<DVector<f64>> = (0..self.coeffs.nrows())
            .map(|i| self.coeffs.row(i).transpose())
            .collect();
        while rows.len() > 1 {
            for i in 0..rows.len() - 1 {
                rows[i] = &rows[i] * (1.0 - s) + &rows[i + 1] * s;
            }
            rows.pop();
        }
        rows.pop().unwrap()
    }

    /// First derivative with respect to `s`.
    pub fn deriv1(&self, s: f64) -> DVector<f64> {
        let v = self.degree();
        if v == 0 {
            return DVector::zeros(self.coeffs.ncols());
        }
        let mut d = DMatrix::zeros(v, self.coeffs.ncols());
        for i in 0..v {
            d.set_row(i, &((self.coeffs.row(i + 1) - self.coeffs.row(i)) * v as f64));
        }
        Bezier { coeffs: d }.eval(s)
    }

    /// Second derivative with respect to `s`.
    pub fn deriv2(&self, s: f64) -> DVector<f64> {
        let v = self.degree();
        if v < 2 {
            return DVector::zeros(self.coeffs.ncols());
        }
        let mut d = DMatrix::zeros(v - 1, self.coeffs.ncols());
        let c = (v * (v - 1)) as f64;
        for i in 0..v - 1 {
            d.set_row(
                i,
                &((self.coeffs.row(i + 2) - self.coeffs.row(i + 1) * 2.0 + self.coeffs.row(i)) * c),
            );
        }
        Bezier { coeffs: d }.eval(s)
    }
}

/// Chebyshev–Lobatto collocation grid on [0, 1] with `n` points: clustered
/// toward both ends, endpoints exactly 0 and 1, exactly symmetric about ½.
pub fn chebyshev_lobatto(n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least both endpoints");
    let mut s = vec![0.0; n];
    for i in 0..n / 2 {
        let v = 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / (n - 1) as f64).cos());
        s[i] = v;
        s[n - 1 - i] = 1.0 - v;
    }
    if n % 2 == 1 {
        s[n / 2] = 0.5;
    }
    s[0] = 0.0;
    s[n - 1] = 1.0;
    s
}

/// Index map of the optimizer's decision vector: per step, the Bezier
/// control points of all actuated joints, then (when steps chain into each
/// other) the post-impact velocity and the impact impulse of the boundary
/// that ends the step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionLayout {
    pub steps: usize,
    /// Bezier degree (control points per joint = degree + 1).
    pub degree: usize,
    pub na: usize,
    pub nq: usize,
    pub nu: usize,
    /// Whether boundary blocks (post-impact velocity + impulse) exist.
    pub reset: bool,
}

impl DecisionLayout {
    fn coeff_len(&self) -> usize {
        (self.degree + 1) * self.na
    }

    fn step_len(&self) -> usize {
        self.coeff_len() + if self.reset { self.nq + self.nu } else { 0 }
    }

    pub fn n_vars(&self) -> usize {
        self.steps * self.step_len()
    }

    fn step_base(&self, l: usize) -> usize {
        debug_assert!(l < self.steps);
        l * self.step_len()
    }

    /// Slice of control point row `i` (one value per actuated joint) of
    /// step `l`.
    pub fn coeff(&self, l: usize, i: usize) -> Range<usize> {
        debug_assert!(i <= self.degree);
        let base = self.step_base(l) + i * self.na;
        base..base + self.na
    }

    /// All control points of step `l`.
    pub fn coeffs(&self, l: usize) -> Range<usize> {
        let base = self.step_base(l);
        base..base + self.coeff_len()
    }

    /// Post-impact generalized velocity of the boundary ending step `l`.
    pub fn reset_qd(&self, l: usize) -> Range<usize> {
        debug_assert!(self.reset);
        let base = self.step_base(l) + self.coeff_len();
        base..base + self.nq
    }

    /// Impact impulse of the boundary ending step `l`.
    pub fn reset_lambda(&self, l: usize) -> Range<usize> {
        debug_assert!(self.reset);
        let base = self.step_base(l) + self.coeff_len() + self.nq;
        base..base + self.nu
    }

    /// Control points of step `l` as a (degree+1) × na matrix.
    pub fn coeff_matrix(&self, y: &DVector<f64>, l: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.degree + 1, self.na);
        for i in 0..=self.degree {
            let r = self.coeff(l, i);
            for (k, idx) in r.enumerate() {
                m[(i, k)] = y[idx];
            }
        }
        m
    }

    /// Writes a (degree+1) × na control point matrix into step `l`.
    pub fn set_coeff_matrix(&self, y: &mut DVector<f64>, l: usize, m: &DMatrix<f64>) {
        debug_assert_eq!(m.nrows(), self.degree + 1);
        debug_assert_eq!(m.ncols(), self.na);
        for i in 0..=self.degree {
            let r = self.coeff(l, i);
            for (k, idx) in r.enumerate() {
                y[idx] = m[(i, k)];
            }
        }
    }
}

/// Full-precision decimal formatting: 17 significant digits, enough to
/// round-trip any f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_partition_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..50 {
            let v = rng.gen_range(1..9usize);
            let s = rng.gen_range(0.0..1.0);
            let (w0, w1, w2) = bernstein_weights(v, s);
            assert!((w0.sum() - 1.0).abs() < 1e-13);
            assert!(w1.sum().abs() < 1e-11);
            assert!(w2.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn weights_match_binomial_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let binom = |n: usize, k: usize| -> f64 {
            let mut r = 1.0;
            for j in 0..k {
                r = r * (n - j) as f64 / (j + 1) as f64;
            }
            r
        };
        for _ in 0..30 {
            let v = rng.gen_range(1..8usize);
            let s: f64 = rng.gen_range(0.0..1.0);
            let (w0, _, _) = bernstein_weights(v, s);
            for i in 0..=v {
                let direct = binom(v, i) * s.powi(i as i32) * (1.0 - s).powi((v - i) as i32);
                assert!((w0[i] - direct).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn derivative_weights_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let v = rng.gen_range(2..7usize);
            let s = rng.gen_range(0.05..0.95);
            let h = 1e-6;
            let (_, w1, w2) = bernstein_weights(v, s);
            let (p0, p1, _) = bernstein_weights(v, s + h);
            let (m0, m1, _) = bernstein_weights(v, s - h);
            for i in 0..=v {
                assert!((w1[i] - (p0[i] - m0[i]) / (2.0 * h)).abs() < 1e-8);
                assert!((w2[i] - (p1[i] - m1[i]) / (2.0 * h)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn curve_eval_agrees_with_weights_and_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let v = 5;
        let nc = 3;
        let coeffs = DMatrix::from_fn(v + 1, nc, |_, _| rng.gen_range(-2.0..2.0));
        let bz = Bezier { coeffs: coeffs.clone() };
        for _ in 0..20 {
            let s = rng.gen_range(0.0..1.0);
            let (w0, w1, w2) = bernstein_weights(v, s);
            let by_w0 = coeffs.transpose() * &w0;
            let by_w1 = coeffs.transpose() * &w1;
            let by_w2 = coeffs.transpose() * &w2;
            assert!((bz.eval(s) - by_w0).amax() < 1e-12);
            assert!((bz.deriv1(s) - by_w1).amax() < 1e-11);
            assert!((bz.deriv2(s) - by_w2).amax() < 1e-10);
        }
        assert!((bz.eval(0.0) - coeffs.row(0).transpose()).amax() < 1e-15);
        assert!((bz.eval(1.0) - coeffs.row(v).transpose()).amax() < 1e-15);
        let d0 = (coeffs.row(1) - coeffs.row(0)).transpose() * v as f64;
        assert!((bz.deriv1(0.0) - d0).amax() < 1e-13);
    }

    #[test]
    fn lobatto_grid_shape() {
        for n in [2, 3, 8, 13, 21] {
            let s = chebyshev_lobatto(n);
            assert_eq!(s.len(), n);
            assert_eq!(s[0], 0.0);
            assert_eq!(s[n - 1], 1.0);
            for i in 0..n {
                assert_eq!(s[i] + s[n - 1 - i], 1.0, "exact symmetry");
            }
            for i in 1..n {
                assert!(s[i] > s[i - 1], "monotone");
            }
        }
    }

    #[test]
    fn layout_blocks_tile_the_vector() {
        for reset in [false, true] {
            let lay = DecisionLayout {
                steps: 2,
                degree: 5,
                na: 12,
                nq: 22,
                nu: 10,
                reset,
            };
            let n = lay.n_vars();
            assert_eq!(n, 2 * (6 * 12 + if reset { 32 } else { 0 }));
            let mut hit = vec![0usize; n];
            for l in 0..lay.steps {
                for i in 0..=lay.degree {
                    for k in lay.coeff(l, i) {
                        hit[k] += 1;
                    }
                }
                if reset {
                    for k in lay.reset_qd(l) {
                        hit[k] += 1;
                    }
                    for k in lay.reset_lambda(l) {
                        hit[k] += 1;
                    }
                }
            }
            assert!(hit.iter().all(|&h| h == 1), "every variable exactly once");
        }
    }

    #[test]
    fn coeff_matrix_round_trip() {
        let lay = DecisionLayout {
            steps: 2,
            degree: 4,
            na: 3,
            nq: 7,
            nu: 4,
            reset: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let y0 = DVector::from_fn(lay.n_vars(), |_, _| rng.gen_range(-1.0..1.0));
        let mut y1 = DVector::zeros(lay.n_vars());
        for l in 0..2 {
            let m = lay.coeff_matrix(&y0, l);
            lay.set_coeff_matrix(&mut y1, l, &m);
        }
        for l in 0..2 {
            for k in lay.coeffs(l) {
                assert_eq!(y0[k], y1[k]);
            }
        }
    }

    #[test]
    fn float_formatting_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-1e6..1e6) * 10f64.powi(rng.gen_range(-12..12));
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(x, back, "{s}");
        }
    }
}
