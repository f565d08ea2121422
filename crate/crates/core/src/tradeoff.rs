//! Efficiency/fidelity trade-off of the weak-coherent-pulse reference.
//!
//! With `a = |α|²`, `m = |m1|²` and `l = |l4|²`, a single `D1` click with a
//! non-empty output has probability [`g_prob`] and leaves `|φ⁺⟩` with
//! probability [`h_prob`]. Averaging over `m ~ U[0, 2T₁]`, `l ~ U[0, 2T₂]`
//! gives `G` and `H`, and `F = H / G`.
//!
//! Closed forms use
//!
//! ```text
//! A(x) = 1 − e^{−x}(1 + x)          = Σ_{n≥2} (−1)ⁿ (n−1) xⁿ / n!
//! B(x) = e^{−x} − 1 + x + x²/2      = x² + Σ_{n≥3} (−x)ⁿ / n!
//! G    = A(aT₁) B(aT₂) / (2 a³ T₁ T₂)
//! F    = 2 A(aT₂) / B(aT₂)
//! ```
//!
//! The quadrature route integrates `g` and `h` directly and shares no code
//! with the closed forms.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::fock::{FockKet, ModeId, ModeTransform, Port};
use crate::{Error, Result, C64};

/// Below this argument `A` and `B` are summed as power series.
pub const SERIES_THRESHOLD: f64 = 1e-3;

pub fn g_prob(m1_sq: f64, l4_sq: f64, alpha_sq: f64) -> f64 {
    let (m, l, a) = (m1_sq, l4_sq, alpha_sq);
    let y = a * l / 2.0;
    // 1 + y − e^{−y} = y − expm1(−y), both terms non-negative
    (-a * m / 2.0).exp() * (m / 4.0) * (y - (-y).exp_m1())
}

pub fn h_prob(m1_sq: f64, l4_sq: f64, alpha_sq: f64) -> f64 {
    let (m, l, a) = (m1_sq, l4_sq, alpha_sq);
    (-a * (m + l) / 2.0).exp() * a * m * l / 4.0
}

/// `1 − e^{−x}(1 + x)`.
pub fn a_fn(x: f64) -> f64 {
    if x < SERIES_THRESHOLD {
        let mut term = -x;
        let mut sum = 0.0;
        for n in 2..20 {
            term *= -x / n as f64;
            sum += term * (n - 1) as f64;
        }
        sum
    } else {
        -(-x).exp_m1() - x * (-x).exp()
    }
}

/// `e^{−x} − 1 + x + x²/2`.
pub fn b_fn(x: f64) -> f64 {
    if x < SERIES_THRESHOLD {
        let mut term = x * x / 2.0;
        let mut sum = x * x;
        for n in 3..20 {
            term *= -x / n as f64;
            sum += term;
        }
        sum
    } else {
        (-x).exp_m1() + x + x * x / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppendixParams {
    pub alpha_sq: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T2")]
    pub t2: f64,
}

impl AppendixParams {
    pub fn new(alpha_sq: f64, t1: f64, t2: f64) -> Result<Self> {
        let p = Self { alpha_sq, t1, t2 };
        p.validate()?;
        Ok(p)
    }

    /// Parameters for `μ = T|α|²` with `T₁ = T₂ = T`.
    pub fn from_mu(mu: f64, t: f64) -> Result<Self> {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::InvalidParameter(format!("T = {t} must be > 0")));
        }
        Self::new(mu / t, t, t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_sq.is_finite() && self.alpha_sq >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha_sq = {} must be >= 0",
                self.alpha_sq
            )));
        }
        for (name, t) in [("T1", self.t1), ("T2", self.t2)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidParameter(format!("{name} = {t} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn g_closed(p: &AppendixParams) -> Result<f64> {
    p.validate()?;
    let a = p.alpha_sq;
    if a == 0.0 {
        return Ok(0.0);
    }
    let (x1, x2) = (a * p.t1, a * p.t2);
    // A(x₁)/x₁² and B(x₂)/x₂² are O(1), which keeps small a finite
    Ok(a * p.t1 * p.t2 * (a_fn(x1) / (x1 * x1)) * (b_fn(x2) / (x2 * x2)) / 2.0)
}

pub fn f_closed(p: &AppendixParams) -> Result<f64> {
    p.validate()?;
    let x = p.alpha_sq * p.t2;
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * a_fn(x) / b_fn(x)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-15,
            rel_tol: 1e-13,
            max_depth: 40,
        }
    }
}

// 15-point Kronrod nodes on [−1, 1] (non-negative half) with the weights of
// the embedded 7-point Gauss rule at the odd indices.
const XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let fc = f(c);
    let mut k = WK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let (f1, f2) = (f(c - h * XK[i]), f(c + h * XK[i]));
        k += WK[i] * (f1 + f2);
        if i % 2 == 1 {
            g += WG[i / 2] * (f1 + f2);
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integral of `f` over `[lo, hi]`.
pub fn integrate(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, opts: &QuadratureOptions) -> f64 {
    fn recurse(
        f: &impl Fn(f64) -> f64,
        lo: f64,
        hi: f64,
        whole: (f64, f64),
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (value, err) = whole;
        if err <= tol || depth == 0 {
            return value;
        }
        let mid = 0.5 * (lo + hi);
        let left = gk15(f, lo, mid);
        let right = gk15(f, mid, hi);
        recurse(f, lo, mid, left, 0.5 * tol, depth - 1)
            + recurse(f, mid, hi, right, 0.5 * tol, depth - 1)
    }
    let whole = gk15(f, lo, hi);
    let tol = opts.abs_tol.max(opts.rel_tol * whole.0.abs());
    recurse(f, lo, hi, whole, tol, opts.max_depth)
}

/// Mean of `f(m, l)` over `m ~ U[0, 2T₁]`, `l ~ U[0, 2T₂]`, by nested
/// quadrature on the unit square.
fn uniform_mean(
    f: impl Fn(f64, f64) -> f64,
    p: &AppendixParams,
    opts: &QuadratureOptions,
) -> f64 {
    let inner_opts = QuadratureOptions {
        abs_tol: opts.abs_tol * 1e-2,
        rel_tol: opts.rel_tol * 1e-2,
        ..*opts
    };
    let outer = |u: f64| {
        let m = 2.0 * p.t1 * u;
        integrate(&|v: f64| f(m, 2.0 * p.t2 * v), 0.0, 1.0, &inner_opts)
    };
    integrate(&outer, 0.0, 1.0, opts)
}

pub fn g_quad(p: &AppendixParams, opts: &QuadratureOptions) -> Result<f64> {
    p.validate()?;
    let a = p.alpha_sq;
    Ok(uniform_mean(|m, l| g_prob(m, l, a), p, opts))
}

pub fn h_quad(p: &AppendixParams, opts: &QuadratureOptions) -> Result<f64> {
    p.validate()?;
    let a = p.alpha_sq;
    Ok(uniform_mean(|m, l| h_prob(m, l, a), p, opts))
}

/// `H / G` by quadrature; the `a → 0` limit is 1.
pub fn f_quad(p: &AppendixParams, opts: &QuadratureOptions) -> Result<f64> {
    let g = g_quad(p, opts)?;
    if g == 0.0 {
        return Ok(1.0);
    }
    Ok(h_quad(p, opts)? / g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub mu: f64,
    #[serde(rename = "F")]
    pub fidelity: f64,
    /// `2G/T`.
    pub efficiency: f64,
    #[serde(rename = "G")]
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffSweep {
    pub t: f64,
    pub points: Vec<TradeoffPoint>,
    /// `F` never increases along the grid (checked for ascending `μ` only).
    pub fidelity_monotone: bool,
    pub mu_ascending: bool,
}

pub fn sweep_tradeoff(t: f64, mu_grid: &[f64]) -> Result<TradeoffSweep> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter(format!("T = {t} outside (0, 1]")));
    }
    if mu_grid.is_empty() {
        return Err(Error::InvalidParameter("empty mu grid".into()));
    }
    let points = mu_grid
        .iter()
        .map(|&mu| {
            let p = AppendixParams::from_mu(mu, t)?;
            let g = g_closed(&p)?;
            Ok(TradeoffPoint {
                mu,
                fidelity: f_closed(&p)?,
                efficiency: 2.0 * g / t,
                g,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mu_ascending = mu_grid.windows(2).all(|w| w[0] < w[1]);
    let fidelity_monotone = mu_ascending && points.windows(2).all(|w| w[1].fidelity <= w[0].fidelity);
    Ok(TradeoffSweep {
        t,
        points,
        fidelity_monotone,
        mu_ascending,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleValues {
    pub g: f64,
    pub h: f64,
    /// Probability mass of the coherent reference cut by the photon-number
    /// cutoff.
    pub truncation_deficit: f64,
}

/// Brute-force Fock evaluation of `g` and `h`.
///
/// The pair `(m1|H_A H_S⟩ + l4|V_A V_S⟩)/√2` meets a coherent reference
/// with amplitudes `(m1 α, l4 α)/√2` on `Y`. The reference goes through a
/// `π/4` half-wave plate and a PBS with `A`; `A` is then measured in the
/// diagonal basis through a `π/8` half-wave plate and a PBS with the spare
/// port. `g` is the probability of exactly one photon in `A_H` with every
/// other detector dark and `Y` occupied; `h` is the weight of `|φ⁺⟩_{YS}` in
/// that branch.
pub fn fock_oracle(m1_sq: f64, l4_sq: f64, alpha_sq: f64, cutoff: usize) -> Result<OracleValues> {
    for (name, v) in [("m1_sq", m1_sq), ("l4_sq", l4_sq)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParameter(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if !(alpha_sq.is_finite() && alpha_sq >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha_sq = {alpha_sq} must be >= 0")));
    }
    if cutoff < 2 {
        return Err(Error::InvalidParameter("cutoff must allow the photon pair".into()));
    }
    let (y, a, s, e) = (Port(1), Port(10), Port(3), Port(11));
    let (m1, l4) = (m1_sq.sqrt(), l4_sq.sqrt());
    let alpha = alpha_sq.sqrt();

    let pair = FockKet::from_terms(
        &[a.h(), a.v(), s.h(), s.v()],
        [
            (vec![1, 0, 1, 0], C64::from(m1 * FRAC_1_SQRT_2)),
            (vec![0, 1, 0, 1], C64::from(l4 * FRAC_1_SQRT_2)),
        ],
        cutoff,
    )?;
    let reference = FockKet::coherent_product(
        &[
            (y.h(), C64::from(m1 * alpha * FRAC_1_SQRT_2)),
            (y.v(), C64::from(l4 * alpha * FRAC_1_SQRT_2)),
        ],
        cutoff - 2,
    )?;
    let deficit = reference.truncation_deficit();
    let mut ket = pair.tensor(&reference)?;
    for t in [
        ModeTransform::hwp(y, std::f64::consts::FRAC_PI_4)?,
        ModeTransform::pbs(a, y)?,
        ModeTransform::hwp(a, std::f64::consts::FRAC_PI_8)?,
        ModeTransform::pbs(a, e)?,
    ] {
        ket = ket.apply_linear(&t)?;
    }

    let modes = ket.modes().to_vec();
    let at = |m: ModeId| modes.iter().position(|x| *x == m).unwrap();
    let det = [at(a.h()), at(a.v()), at(e.h()), at(e.v())];
    let (yh, yv, sh, sv) = (at(y.h()), at(y.v()), at(s.h()), at(s.v()));

    let mut g = 0.0;
    let mut overlap = C64::new(0.0, 0.0);
    for (occ, amp) in ket.terms() {
        if det.map(|i| occ[i]) != [1, 0, 0, 0] || occ[yh] + occ[yv] == 0 {
            continue;
        }
        g += amp.norm_sqr();
        let others = occ.iter().enumerate().all(|(i, &n)| {
            n == 0 || det.contains(&i) || [yh, yv, sh, sv].contains(&i)
        });
        let pair_term = others
            && occ[yh] + occ[yv] == 1
            && occ[sh] + occ[sv] == 1
            && occ[yh] == occ[sh];
        if pair_term {
            overlap += amp * FRAC_1_SQRT_2;
        }
    }
    Ok(OracleValues {
        g,
        h: overlap.norm_sqr(),
        truncation_deficit: deficit,
    })
}
