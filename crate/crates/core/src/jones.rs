//! Jones-calculus algebra for lossy reciprocal polarization channels.
//!
//! Amplitudes are written in the `{|H⟩, |V⟩}` (equivalently `{|x⟩, |y⟩}`)
//! basis of the forward-propagating frame. The backward frame shares the `y`
//! axis and flips `x`, so a reciprocal medium with forward matrix `M` acts on
//! counter-propagating light as `Z Mᵀ Z`.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, ALGEBRAIC_TOL, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Jones vector `(V_H, V_V)`. A vector with `P = |V_H|² + |V_V|² < 1`
/// stands for the mixture `(1 − P)|0⟩⟨0| + |ψ⟩⟨ψ|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationState {
    pub v_h: C64,
    pub v_v: C64,
}

impl PolarizationState {
    pub const H: Self = Self { v_h: ONE, v_v: ZERO };
    pub const V: Self = Self { v_h: ZERO, v_v: ONE };
    /// Linear polarization at +45°.
    pub const D: Self = Self {
        v_h: C64::new(FRAC_1_SQRT_2, 0.0),
        v_v: C64::new(FRAC_1_SQRT_2, 0.0),
    };
    /// Linear polarization at −45°.
    pub const D_BAR: Self = Self {
        v_h: C64::new(FRAC_1_SQRT_2, 0.0),
        v_v: C64::new(-FRAC_1_SQRT_2, 0.0),
    };

    pub fn new(v_h: C64, v_v: C64) -> Result<Self> {
        let s = Self { v_h, v_v };
        if !(v_h.is_finite() && v_v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite amplitude".into()));
        }
        if s.probability() > 1.0 + ALGEBRAIC_TOL {
            return Err(Error::InvalidParameter(format!(
                "polarization state has probability {} > 1",
                s.probability()
            )));
        }
        Ok(s)
    }

    /// Photon-presence probability `P(V_H, V_V)`.
    pub fn probability(&self) -> f64 {
        self.v_h.norm_sqr() + self.v_v.norm_sqr()
    }

    pub fn as_vector(&self) -> Vector2<C64> {
        Vector2::new(self.v_h, self.v_v)
    }

    /// Largest component difference after removing the best-fitting global
    /// phase between the two vectors.
    pub fn phase_distance(&self, other: &Self) -> f64 {
        let a = self.as_vector();
        let b = other.as_vector();
        let phase = align_phase(a.iter().zip(b.iter()));
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y * phase).norm())
            .fold(0.0, f64::max)
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.phase_distance(other) <= tol
    }
}

impl From<Vector2<C64>> for PolarizationState {
    fn from(v: Vector2<C64>) -> Self {
        Self { v_h: v[0], v_v: v[1] }
    }
}

/// Unit phase `e^{iχ}` that best maps `b` onto `a` (maximises `Re Σ a* e^{iχ} b`).
fn align_phase<'a>(pairs: impl Iterator<Item = (&'a C64, &'a C64)>) -> C64 {
    let overlap: C64 = pairs.map(|(a, b)| b.conj() * a).sum();
    if overlap.norm() == 0.0 {
        ONE
    } else {
        overlap / overlap.norm()
    }
}

/// 2×2 complex transfer matrix acting on Jones vectors, with `M†M ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferMatrix(pub Matrix2<C64>);

impl TransferMatrix {
    pub fn identity() -> Self {
        Self(Matrix2::identity())
    }

    /// Pauli `Z = diag(1, −1)`.
    pub fn pauli_z() -> Self {
        Self(Matrix2::new(ONE, ZERO, ZERO, -ONE))
    }

    /// Builds a matrix from `[m1, m2, m3, m4]` in row-major order and checks
    /// that it does not amplify.
    pub fn from_entries(entries: [C64; 4]) -> Result<Self> {
        if entries.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidParameter("non-finite matrix entry".into()));
        }
        let m = Self::from_entries_unchecked(entries);
        let s = m.largest_singular_value();
        if s > 1.0 + ALGEBRAIC_TOL {
            return Err(Error::NonPhysical(s));
        }
        Ok(m)
    }

    /// Row-major construction without the physicality check.
    pub fn from_entries_unchecked([m1, m2, m3, m4]: [C64; 4]) -> Self {
        Self(Matrix2::new(m1, m2, m3, m4))
    }

    /// `[m1, m2, m3, m4]` in row-major order.
    pub fn entries(&self) -> [C64; 4] {
        [self.0[(0, 0)], self.0[(0, 1)], self.0[(1, 0)], self.0[(1, 1)]]
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self(self.0 * factor)
    }

    /// Singular values, largest first.
    pub fn singular_values(&self) -> [f64; 2] {
        // eigenvalues of the Hermitian matrix M†M
        let g = self.0.adjoint() * self.0;
        let a = g[(0, 0)].re;
        let d = g[(1, 1)].re;
        let b = g[(0, 1)];
        let mean = 0.5 * (a + d);
        let radius = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        [
            (mean + radius).max(0.0).sqrt(),
            (mean - radius).max(0.0).sqrt(),
        ]
    }

    pub fn largest_singular_value(&self) -> f64 {
        self.singular_values()[0]
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        let g = self.0.adjoint() * self.0 - Matrix2::identity();
        g.iter().all(|z| z.norm() <= tol)
    }

    /// Largest entry difference after removing the best-fitting global phase.
    pub fn phase_distance(&self, other: &Self) -> f64 {
        let phase = align_phase(self.0.iter().zip(other.0.iter()));
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b * phase).norm())
            .fold(0.0, f64::max)
    }

    /// Plain entrywise max-abs difference (no phase freedom).
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.0 - other.0).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Physical equality: `M` and `e^{iφ}M` compare equal.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.phase_distance(other) <= tol
    }
}

impl Mul for TransferMatrix {
    type Output = TransferMatrix;

    fn mul(self, rhs: TransferMatrix) -> TransferMatrix {
        TransferMatrix(self.0 * rhs.0)
    }
}

impl fmt::Display for TransferMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [m1, m2, m3, m4] = self.entries();
        write!(f, "[[{m1}, {m2}], [{m3}, {m4}]]")
    }
}

/// `R(θ) = [[cos θ, −sin θ], [sin θ, cos θ]]`.
pub fn rotation_matrix(theta: f64) -> TransferMatrix {
    let (s, c) = theta.sin_cos();
    TransferMatrix(Matrix2::new(
        C64::from(c),
        C64::from(-s),
        C64::from(s),
        C64::from(c),
    ))
}

/// `W(γs, γf, φ) = diag(γs e^{−iφ}, γf e^{iφ})` in the slow/fast basis.
pub fn waveplate_matrix(gamma_s: f64, gamma_f: f64, phi: f64) -> Result<TransferMatrix> {
    check_gamma("gamma_s", gamma_s)?;
    check_gamma("gamma_f", gamma_f)?;
    if !phi.is_finite() {
        return Err(Error::InvalidParameter("phi must be finite".into()));
    }
    Ok(TransferMatrix(Matrix2::new(
        C64::from_polar(gamma_s, -phi),
        ZERO,
        ZERO,
        C64::from_polar(gamma_f, phi),
    )))
}

fn check_gamma(name: &str, g: f64) -> Result<()> {
    if (0.0..=1.0).contains(&g) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {g} outside [0, 1]")))
    }
}

/// Lossy birefringent element. `theta` is the angle of the fast axis from
/// the `y` axis, counter-clockwise positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirefringentElement {
    pub theta: f64,
    pub gamma_s: f64,
    pub gamma_f: f64,
    pub phi: f64,
}

impl BirefringentElement {
    pub fn new(theta: f64, gamma_s: f64, gamma_f: f64, phi: f64) -> Result<Self> {
        let e = Self {
            theta,
            gamma_s,
            gamma_f,
            phi,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma("gamma_s", self.gamma_s)?;
        check_gamma("gamma_f", self.gamma_f)?;
        if !(self.theta.is_finite() && self.phi.is_finite()) {
            return Err(Error::InvalidParameter("theta and phi must be finite".into()));
        }
        Ok(())
    }

    /// Uniform random element: angles in `[0, 2π)`, transmissions in `[0, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            theta: rng.random_range(0.0..TAU),
            gamma_s: rng.random_range(0.0..=1.0),
            gamma_f: rng.random_range(0.0..=1.0),
            phi: rng.random_range(0.0..TAU),
        }
    }

    /// Forward transfer matrix `R(θ) W(γs, γf, φ) R(−θ)`.
    pub fn matrix(&self) -> Result<TransferMatrix> {
        let w = waveplate_matrix(self.gamma_s, self.gamma_f, self.phi)?;
        Ok(rotation_matrix(self.theta) * w * rotation_matrix(-self.theta))
    }

    /// Backward transfer matrix, built directly from the mirrored geometry:
    /// the fast axis sits at `−θ` in the backward frame, `W` is unchanged.
    pub fn backward_matrix(&self) -> Result<TransferMatrix> {
        let w = waveplate_matrix(self.gamma_s, self.gamma_f, self.phi)?;
        Ok(rotation_matrix(-self.theta) * w * rotation_matrix(self.theta))
    }
}

pub fn element_matrix(e: &BirefringentElement) -> Result<TransferMatrix> {
    e.matrix()
}

/// A fibre modelled as a sequence of birefringent elements, listed in
/// forward traversal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub elements: Vec<BirefringentElement>,
}

impl ChannelSpec {
    pub fn new(elements: Vec<BirefringentElement>) -> Result<Self> {
        let spec = Self { elements };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::InvalidParameter("channel has no elements".into()));
        }
        self.elements.iter().try_for_each(BirefringentElement::validate)
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self {
            elements: (0..n.max(1)).map(|_| BirefringentElement::random(rng)).collect(),
        }
    }

    /// Forward composite `M_N ⋯ M_1`.
    pub fn forward_matrix(&self) -> Result<TransferMatrix> {
        self.validate()?;
        let mats = self
            .elements
            .iter()
            .map(BirefringentElement::matrix)
            .collect::<Result<Vec<_>>>()?;
        compose(&mats)
    }

    /// Backward composite `M̄_1 M̄_2 ⋯ M̄_N` from the per-element backward
    /// matrices (no use of the composite reciprocity identity).
    pub fn backward_matrix(&self) -> Result<TransferMatrix> {
        self.validate()?;
        let mut acc = TransferMatrix::identity();
        for e in &self.elements {
            acc = acc * e.backward_matrix()?;
        }
        Ok(acc)
    }
}

/// Product of transfer matrices given in traversal order: `[M1, M2, M3]`
/// yields `M3 M2 M1`.
pub fn compose(in_traversal_order: &[TransferMatrix]) -> Result<TransferMatrix> {
    let (first, rest) = in_traversal_order
        .split_first()
        .ok_or_else(|| Error::InvalidParameter("compose needs at least one matrix".into()))?;
    Ok(rest.iter().fold(*first, |acc, m| *m * acc))
}

/// Matrix for the counter-propagating direction: `Z Mᵀ Z`, i.e.
/// `[[m1, −m3], [−m2, m4]]`.
pub fn backward_matrix(m: &TransferMatrix) -> TransferMatrix {
    let [m1, m2, m3, m4] = m.entries();
    TransferMatrix::from_entries_unchecked([m1, -m3, -m2, m4])
}

/// Polarization-averaged transmittance `Tr(M†M)/2`.
pub fn avg_transmittance(m: &TransferMatrix) -> f64 {
    0.5 * m.0.iter().map(|z| z.norm_sqr()).sum::<f64>()
}

/// Haar-distributed 2×2 unitary.
///
/// Uses `U = e^{iδ} [[a, −b*], [b, a*]]` with `(a, b)` uniform on the unit
/// 3-sphere and `δ` uniform, which is the Haar measure on U(2).
pub fn haar_random_unitary<R: Rng + ?Sized>(rng: &mut R) -> TransferMatrix {
    let mut g = [0.0f64; 4];
    let norm = loop {
        for x in g.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-300 {
            break n;
        }
    };
    let a = C64::new(g[0], g[1]) / norm;
    let b = C64::new(g[2], g[3]) / norm;
    let delta = rng.random_range(0.0..TAU);
    let phase = C64::from_polar(1.0, delta);
    TransferMatrix(Matrix2::new(a, -b.conj(), b, a.conj()) * phase)
}

/// `U_out · M · U_in` with independent Haar draws.
pub fn randomized_channel<R: Rng + ?Sized>(m: &TransferMatrix, rng: &mut R) -> TransferMatrix {
    let u_in = haar_random_unitary(rng);
    let u_out = haar_random_unitary(rng);
    u_out * *m * u_in
}

pub fn apply(m: &TransferMatrix, s: &PolarizationState) -> PolarizationState {
    (m.0 * s.as_vector()).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn rotation_special_angles() {
        assert!(rotation_matrix(0.0).max_abs_diff(&TransferMatrix::identity()) < 1e-15);
        let q = rotation_matrix(FRAC_PI_2);
        let expected =
            TransferMatrix::from_entries_unchecked([c(0., 0.), c(-1., 0.), c(1., 0.), c(0., 0.)]);
        assert!(q.max_abs_diff(&expected) < 1e-15);
        // rotations are fixed points of the backward map
        let r = rotation_matrix(0.3);
        assert!(backward_matrix(&r).max_abs_diff(&r) < 1e-15);
    }

    #[test]
    fn waveplate_cases() {
        let w = waveplate_matrix(1.0, 1.0, 0.0).unwrap();
        assert!(w.max_abs_diff(&TransferMatrix::identity()) < 1e-15);

        let phi = 0.7;
        let w = waveplate_matrix(1.0, 1.0, phi).unwrap();
        let expected = TransferMatrix::from_entries_unchecked([
            C64::from_polar(1.0, -phi),
            c(0., 0.),
            c(0., 0.),
            C64::from_polar(1.0, phi),
        ]);
        assert!(w.max_abs_diff(&expected) < 1e-15);

        let w = waveplate_matrix(0.5, 1.0, 0.0).unwrap();
        let [s0, s1] = w.singular_values();
        assert!((s0 - 1.0).abs() < 1e-15 && (s1 - 0.5).abs() < 1e-15);

        assert!(waveplate_matrix(1.1, 1.0, 0.0).is_err());
        assert!(waveplate_matrix(1.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn quarter_turn_half_wave_element_is_minus_i_x() {
        let e = BirefringentElement::new(FRAC_PI_4, 1.0, 1.0, FRAC_PI_2).unwrap();
        let m = e.matrix().unwrap();
        // R(π/4) diag(−i, i) R(−π/4), multiplied out by hand
        let expected =
            TransferMatrix::from_entries_unchecked([c(0., 0.), c(0., -1.), c(0., -1.), c(0., 0.)]);
        assert!(m.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn element_at_zero_angle_is_waveplate() {
        let e = BirefringentElement::new(0.0, 0.3, 0.8, 1.1).unwrap();
        let w = waveplate_matrix(0.3, 0.8, 1.1).unwrap();
        assert!(e.matrix().unwrap().max_abs_diff(&w) < 1e-15);
    }

    #[test]
    fn opaque_element_is_zero() {
        let e = BirefringentElement::new(0.4, 0.0, 0.0, 0.2).unwrap();
        let m = e.matrix().unwrap();
        assert_eq!(avg_transmittance(&m), 0.0);
        assert!(m.largest_singular_value() < 1e-15);
    }

    #[test]
    fn compose_order_and_diagonal_product() {
        assert!(compose(&[TransferMatrix::identity(), TransferMatrix::identity()])
            .unwrap()
            .max_abs_diff(&TransferMatrix::identity())
            < 1e-15);
        let a = waveplate_matrix(1.0, 1.0, 0.2).unwrap();
        let b = waveplate_matrix(1.0, 1.0, 0.5).unwrap();
        let ab = compose(&[a, b]).unwrap();
        assert!(ab.max_abs_diff(&waveplate_matrix(1.0, 1.0, 0.7).unwrap()) < 1e-15);
        // last traversed applied last
        let r = rotation_matrix(0.3);
        let w = waveplate_matrix(0.5, 1.0, 0.0).unwrap();
        assert!(compose(&[r, w]).unwrap().max_abs_diff(&(w * r)) < 1e-15);
        assert!(compose(&[]).is_err());
    }

    #[test]
    fn backward_entries() {
        let m = TransferMatrix::from_entries_unchecked([c(0.1, 0.2), c(0.3, 0.), c(0., 0.4), c(0.5, -0.1)]);
        let b = backward_matrix(&m);
        let [b1, b2, b3, b4] = b.entries();
        assert_eq!(b1, c(0.1, 0.2));
        assert_eq!(b2, -c(0., 0.4));
        assert_eq!(b3, -c(0.3, 0.));
        assert_eq!(b4, c(0.5, -0.1));
        assert_eq!(backward_matrix(&TransferMatrix::identity()), TransferMatrix::identity());
    }

    #[test]
    fn backward_of_composite_matches_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ch = ChannelSpec::random(20, &mut rng);
        let fwd = ch.forward_matrix().unwrap();
        let bwd = ch.backward_matrix().unwrap();
        assert!(backward_matrix(&fwd).max_abs_diff(&bwd) < 1e-12);
    }

    #[test]
    fn transmittance_cases() {
        assert_eq!(avg_transmittance(&TransferMatrix::identity()), 1.0);
        let w = waveplate_matrix(0.6, 0.9, 1.3).unwrap();
        assert!((avg_transmittance(&w) - (0.36 + 0.81) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn apply_cases() {
        let s = PolarizationState::new(c(0.6, 0.0), c(0.0, 0.8)).unwrap();
        assert_eq!(apply(&TransferMatrix::identity(), &s), s);

        let phi = 0.4;
        let out = apply(&waveplate_matrix(1.0, 1.0, phi).unwrap(), &PolarizationState::D);
        let expected = PolarizationState {
            v_h: C64::from_polar(FRAC_1_SQRT_2, -phi),
            v_v: C64::from_polar(FRAC_1_SQRT_2, phi),
        };
        assert!(out.phase_distance(&expected) < 1e-15);

        let out = apply(&waveplate_matrix(0.5, 1.0, 0.0).unwrap(), &PolarizationState::H);
        assert!((out.probability() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn global_phase_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ChannelSpec::random(4, &mut rng).forward_matrix().unwrap();
        let shifted = m.scale(C64::from_polar(1.0, 2.1));
        assert!(m.approx_eq(&shifted, 1e-12));
        assert!(m.max_abs_diff(&shifted) > 1e-3);
        assert!(!m.approx_eq(&backward_matrix(&m).scale(c(0.5, 0.0)), 1e-6));

        let s = PolarizationState::D;
        let t = PolarizationState {
            v_h: s.v_h * C64::from_polar(1.0, 0.9),
            v_v: s.v_v * C64::from_polar(1.0, 0.9),
        };
        assert!(s.approx_eq(&t, 1e-15));
        assert!(!s.approx_eq(&PolarizationState::D_BAR, 1e-3));
    }

    #[test]
    fn state_probability_bound() {
        assert!(PolarizationState::new(c(1.0, 0.0), c(0.5, 0.0)).is_err());
        assert!(PolarizationState::new(c(0.5, 0.0), c(0.0, 0.0)).is_ok());
    }

    #[test]
    fn from_entries_rejects_gain() {
        assert!(matches!(
            TransferMatrix::from_entries([c(1.5, 0.), c(0., 0.), c(0., 0.), c(1., 0.)]),
            Err(Error::NonPhysical(_))
        ));
    }

    #[test]
    fn haar_draws_are_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let u = haar_random_unitary(&mut rng);
            assert!(u.is_unitary(1e-12));
            assert!((u.0.determinant().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn randomized_channel_keeps_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = ChannelSpec::random(6, &mut rng).forward_matrix().unwrap();
        for _ in 0..100 {
            let r = randomized_channel(&m, &mut rng);
            assert!((avg_transmittance(&r) - avg_transmittance(&m)).abs() < 1e-13);
        }
    }
}
