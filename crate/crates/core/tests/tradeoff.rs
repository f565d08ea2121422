use dfsim::jones::TransferMatrix;
use dfsim::protocols::{protocol_general_backward, ProtocolConfig, Reference};
use dfsim::tradeoff::*;
use dfsim::C64;
use proptest::prelude::*;

const GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.8, 1.0];

#[test]
fn formulas_match_fock_oracle() {
    let mut worst: f64 = 0.0;
    for &m in &GRID {
        for &l in &GRID {
            for a in [0.02, 0.1, 0.2] {
                let o = fock_oracle(m, l, a, 8).unwrap();
                worst = worst
                    .max((o.g - g_prob(m, l, a)).abs())
                    .max((o.h - h_prob(m, l, a)).abs());
            }
        }
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn oracle_example_point() {
    let o = fock_oracle(0.5, 0.5, 0.1, 8).unwrap();
    assert!((o.g - g_prob(0.5, 0.5, 0.1)).abs() < 1e-8);
    assert!((o.h - h_prob(0.5, 0.5, 0.1)).abs() < 1e-8);
    assert!(o.truncation_deficit < 1e-12);
}

#[test]
fn oracle_vacuum_reference_is_exactly_zero() {
    let o = fock_oracle(0.5, 0.8, 0.0, 8).unwrap();
    assert_eq!(o.g, 0.0);
    assert_eq!(o.h, 0.0);
    assert_eq!(g_prob(0.5, 0.8, 0.0), 0.0);
}

#[test]
fn low_cutoff_reports_truncation() {
    let o = fock_oracle(1.0, 1.0, 0.5, 2).unwrap();
    assert!(o.truncation_deficit > 1e-3);
}

#[test]
fn closed_forms_match_quadrature() {
    let opts = QuadratureOptions::default();
    for mu in [0.01, 0.1, 0.5, 1.0] {
        for t in [0.01, 0.1, 1.0] {
            let p = AppendixParams::from_mu(mu, t).unwrap();
            let (gc, gq) = (g_closed(&p).unwrap(), g_quad(&p, &opts).unwrap());
            let (fc, fq) = (f_closed(&p).unwrap(), f_quad(&p, &opts).unwrap());
            assert!(((gc - gq) / gc).abs() < 1e-8, "G mu={mu} T={t}: {gc} vs {gq}");
            assert!(((fc - fq) / fc).abs() < 1e-8, "F mu={mu} T={t}: {fc} vs {fq}");
        }
    }
}

#[test]
fn asymmetric_channels_match_quadrature() {
    let opts = QuadratureOptions::default();
    let p = AppendixParams::new(3.0, 0.05, 0.3).unwrap();
    let (gc, gq) = (g_closed(&p).unwrap(), g_quad(&p, &opts).unwrap());
    assert!(((gc - gq) / gc).abs() < 1e-8);
    let fc = f_closed(&p).unwrap();
    let fq = f_quad(&p, &opts).unwrap();
    assert!(((fc - fq) / fc).abs() < 1e-8);
}

#[test]
fn fidelity_small_x_limit_and_monotonicity() {
    let p = AppendixParams::new(1e-4, 1.0, 1.0).unwrap();
    assert!(f_closed(&p).unwrap() >= 1.0 - 1e-4);
    let mut last = f64::INFINITY;
    for i in 1..=10_000 {
        let x = 10.0 * i as f64 / 10_000.0;
        let f = f_closed(&AppendixParams::new(x, 1.0, 1.0).unwrap()).unwrap();
        assert!(f < last, "F not decreasing at x={x}");
        last = f;
    }
}

#[test]
fn fidelity_ignores_first_channel() {
    let a = f_closed(&AppendixParams::new(2.0, 0.1, 0.4).unwrap()).unwrap();
    let b = f_closed(&AppendixParams::new(2.0, 0.9, 0.4).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_rows_and_limits() {
    let grid = [0.0, 0.001, 0.01, 0.1, 0.5, 1.0, 2.0];
    let s = sweep_tradeoff(0.1, &grid).unwrap();
    assert!(s.fidelity_monotone);
    assert_eq!(s.points[0].fidelity, 1.0);
    assert_eq!(s.points[0].efficiency, 0.0);
    for p in &s.points {
        assert!((0.0..=1.0).contains(&p.fidelity));
        assert!((p.efficiency - 2.0 * p.g / 0.1).abs() < 1e-18);
    }
    let rev = sweep_tradeoff(0.1, &[1.0, 0.5]).unwrap();
    assert!(!rev.fidelity_monotone);
}

/// Channels with `|m1|² = m`, `|l4|² = l` and polarization-independent loss.
fn diag_channel(t: f64) -> TransferMatrix {
    TransferMatrix::from_entries([
        C64::from(t.sqrt()),
        C64::from(0.0),
        C64::from(0.0),
        C64::from(t.sqrt()),
    ])
    .unwrap()
}

fn protocol_point(m: f64, l: f64, a: f64, cutoff: usize) -> (f64, f64) {
    // the reference mean at Alice is set so that the launched |α|² is `a`
    let mu = a * (m + l) / 2.0;
    let cfg = ProtocolConfig::new(diag_channel(m))
        .with_channel_2(diag_channel(l))
        .with_reference(Reference::Coherent { mu })
        .with_cutoff(cutoff);
    let r = protocol_general_backward(&cfg).unwrap();
    (r.success_probability, r.decoded_fidelity.unwrap_or(0.0))
}

#[test]
fn protocol_simulation_reproduces_g_and_h() {
    for (m, l, a) in [(0.5, 0.5, 0.1), (0.2, 0.9, 0.3), (0.8, 0.1, 0.05)] {
        let (p, f) = protocol_point(m, l, a, 8);
        // both detectors contribute equally
        assert!((p - 2.0 * g_prob(m, l, a)).abs() < 1e-7, "{p}");
        assert!((f - h_prob(m, l, a) / g_prob(m, l, a)).abs() < 1e-6, "{f}");
    }
}

/// Gauss–Legendre nodes and weights on [0, 1].
fn gauss_legendre_01(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out
}

#[test]
fn averaged_protocol_matches_closed_fidelity() {
    let (mu, t) = (0.05, 0.1);
    let a = mu / t;
    let nodes = gauss_legendre_01(6);
    let (mut num, mut den) = (0.0, 0.0);
    for &(u, wu) in &nodes {
        for &(v, wv) in &nodes {
            let (p, f) = protocol_point(2.0 * t * u, 2.0 * t * v, a, 6);
            num += wu * wv * p * f;
            den += wu * wv * p;
        }
    }
    let expected = f_closed(&AppendixParams::from_mu(mu, t).unwrap()).unwrap();
    assert!((num / den - expected).abs() < 1e-4, "{} vs {expected}", num / den);
}

proptest! {
    #[test]
    fn h_never_exceeds_g(m in 0.0..=1.0f64, l in 0.0..=1.0f64, a in 0.0..50.0f64) {
        let (g, h) = (g_prob(m, l, a), h_prob(m, l, a));
        prop_assert!(h >= 0.0);
        prop_assert!(h <= g * (1.0 + 1e-12));
    }

    #[test]
    fn closed_fidelity_is_a_probability(a in 0.0..1e3f64, t1 in 1e-3..=1.0f64, t2 in 1e-3..=1.0f64) {
        let p = AppendixParams::new(a, t1, t2).unwrap();
        let f = f_closed(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!(g_closed(&p).unwrap() >= 0.0);
    }

    #[test]
    fn integrand_is_finite_at_corners(t1 in 1e-3..=1.0f64, t2 in 1e-3..=1.0f64, a in 0.0..100.0f64) {
        for (m, l) in [(0.0, 0.0), (2.0 * t1, 0.0), (0.0, 2.0 * t2), (2.0 * t1, 2.0 * t2)] {
            let g = g_prob(m, l, a);
            prop_assert!(g.is_finite() && g >= 0.0);
        }
    }
}
