//! Sparse multimode bosonic state engine.
//!
//! A [`FockKet`] stores amplitudes keyed by occupation vectors over a
//! canonically ordered list of [`ModeId`]s (port, then `H` before `V`).
//! Linear optics acts through [`ModeTransform`]s: creation operators map as
//! `a†_j → Σ_k S_kj a†_k`. A sub-unitary `S` is dilated with environment
//! modes, which are measured in the number basis right away; each
//! environment outcome becomes a branch of a [`StateEnsemble`]. All figures
//! of merit used downstream (probabilities, fidelity to a pure target) are
//! linear in the density operator, so the ensemble is an exact stand-in for
//! the lossy mixed state.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::jones::{PolarizationState, TransferMatrix};
use crate::{Error, Result, ALGEBRAIC_TOL, C64};

/// Spatial port label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Port(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pol {
    H,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModeId {
    pub port: Port,
    pub pol: Pol,
}

impl ModeId {
    pub const fn new(port: Port, pol: Pol) -> Self {
        Self { port, pol }
    }

    pub const fn h(port: u16) -> Self {
        Self::new(Port(port), Pol::H)
    }

    pub const fn v(port: u16) -> Self {
        Self::new(Port(port), Pol::V)
    }
}

impl Port {
    pub const fn h(self) -> ModeId {
        ModeId::new(self, Pol::H)
    }

    pub const fn v(self) -> ModeId {
        ModeId::new(self, Pol::V)
    }

    pub const fn modes(self) -> [ModeId; 2] {
        [self.h(), self.v()]
    }
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.port.0, self.pol)
    }
}

/// Occupation numbers, one per mode, in the ket's canonical mode order.
pub type Occupation = Vec<u8>;

const MAX_PHOTONS: usize = 64;

fn sqrt_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).sqrt()).product()
}

/// Sparse, possibly sub-normalized, pure state of a set of bosonic modes.
#[derive(Debug, Clone, PartialEq)]
pub struct FockKet {
    modes: Vec<ModeId>,
    amps: BTreeMap<Occupation, C64>,
    cutoff: usize,
    truncation_deficit: f64,
}

impl FockKet {
    pub fn vacuum(modes: &[ModeId], cutoff: usize) -> Result<Self> {
        let modes = canonical_modes(modes)?;
        let mut amps = BTreeMap::new();
        amps.insert(vec![0; modes.len()], C64::new(1.0, 0.0));
        Ok(Self {
            modes,
            amps,
            cutoff,
            truncation_deficit: 0.0,
        })
    }

    /// Coherent state `|α⟩` truncated to `n ≤ cutoff` photons.
    pub fn coherent(mode: ModeId, alpha: C64, cutoff: usize) -> Result<Self> {
        Self::coherent_product(&[(mode, alpha)], cutoff)
    }

    /// Product of coherent states on distinct modes, truncated to a total of
    /// at most `cutoff` photons. The discarded tail is
    /// `Σ_{n > cutoff} e^{−N} Nⁿ/n!` with `N = Σ|α_k|²`.
    pub fn coherent_product(amplitudes: &[(ModeId, C64)], cutoff: usize) -> Result<Self> {
        if cutoff > MAX_PHOTONS {
            return Err(Error::InvalidParameter(format!(
                "cutoff {cutoff} exceeds {MAX_PHOTONS}"
            )));
        }
        if amplitudes.iter().any(|(_, a)| !a.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coherent amplitude".into()));
        }
        let ids: Vec<ModeId> = amplitudes.iter().map(|(m, _)| *m).collect();
        let modes = canonical_modes(&ids)?;
        let alphas: Vec<C64> = modes
            .iter()
            .map(|m| amplitudes.iter().find(|(id, _)| id == m).unwrap().1)
            .collect();
        let mean: f64 = alphas.iter().map(|a| a.norm_sqr()).sum();
        let envelope = (-0.5 * mean).exp();

        let mut amps = BTreeMap::new();
        for occ in occupations_up_to(modes.len(), cutoff) {
            let mut amp = C64::new(envelope, 0.0);
            for (a, &n) in alphas.iter().zip(&occ) {
                amp *= a.powu(n as u32) / sqrt_factorial(n as usize);
            }
            if amp != C64::new(0.0, 0.0) {
                amps.insert(occ, amp);
            }
        }
        Ok(Self {
            modes,
            amps,
            cutoff,
            truncation_deficit: poisson_tail(mean, cutoff),
        })
    }

    /// One photon on `port` with polarization amplitudes `pol`; the vacuum
    /// carries the remaining `1 − P` probability.
    pub fn single_photon(port: Port, pol: &PolarizationState, cutoff: usize) -> Result<Self> {
        let p = pol.probability();
        if p > 1.0 + ALGEBRAIC_TOL {
            return Err(Error::InvalidParameter(format!(
                "polarization probability {p} > 1"
            )));
        }
        if cutoff < 1 {
            return Err(Error::InvalidParameter("cutoff must allow one photon".into()));
        }
        let mut terms = vec![(vec![1, 0], pol.v_h), (vec![0, 1], pol.v_v)];
        if p < 1.0 - ALGEBRAIC_TOL {
            terms.push((vec![0, 0], C64::new((1.0 - p).sqrt(), 0.0)));
        }
        Self::from_terms(&port.modes(), terms, cutoff)
    }

    /// Builds a ket from explicit `(occupation, amplitude)` terms, with
    /// occupations listed in the order of `modes`.
    pub fn from_terms(
        modes: &[ModeId],
        terms: impl IntoIterator<Item = (Vec<u8>, C64)>,
        cutoff: usize,
    ) -> Result<Self> {
        let canon = canonical_modes(modes)?;
        let perm: Vec<usize> = canon
            .iter()
            .map(|m| modes.iter().position(|x| x == m).unwrap())
            .collect();
        let mut amps = BTreeMap::new();
        for (occ, amp) in terms {
            if occ.len() != modes.len() {
                return Err(Error::InvalidParameter(format!(
                    "occupation has {} entries for {} modes",
                    occ.len(),
                    modes.len()
                )));
            }
            let total: usize = occ.iter().map(|&n| n as usize).sum();
            if total > cutoff {
                return Err(Error::InvalidParameter(format!(
                    "term with {total} photons exceeds cutoff {cutoff}"
                )));
            }
            let key: Occupation = perm.iter().map(|&i| occ[i]).collect();
            *amps.entry(key).or_insert(C64::new(0.0, 0.0)) += amp;
        }
        amps.retain(|_, a| *a != C64::new(0.0, 0.0));
        Ok(Self {
            modes: canon,
            amps,
            cutoff,
            truncation_deficit: 0.0,
        })
    }

    pub fn modes(&self) -> &[ModeId] {
        &self.modes
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    /// Probability mass discarded by photon-number truncation so far (an
    /// additive upper bound once kets are combined).
    pub fn truncation_deficit(&self) -> f64 {
        self.truncation_deficit
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u8], C64)> + '_ {
        self.amps.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm_sqr().sqrt();
        let mut out = self.clone();
        if n > 0.0 {
            out.amps.values_mut().for_each(|a| *a /= n);
        }
        out
    }

    pub fn scaled(&self, factor: C64) -> Self {
        let mut out = self.clone();
        out.amps.values_mut().for_each(|a| *a *= factor);
        out
    }

    pub fn contains_mode(&self, mode: ModeId) -> bool {
        self.modes.binary_search(&mode).is_ok()
    }

    fn index_of(&self, mode: ModeId) -> Option<usize> {
        self.modes.binary_search(&mode).ok()
    }

    /// Amplitude of the basis state with the listed occupations; unlisted
    /// modes are taken to be empty.
    pub fn amplitude(&self, occupied: &[(ModeId, u8)]) -> C64 {
        let mut key = vec![0u8; self.modes.len()];
        for &(m, n) in occupied {
            match self.index_of(m) {
                Some(i) => key[i] = n,
                None if n == 0 => {}
                None => return C64::new(0.0, 0.0),
            }
        }
        self.amps.get(&key).copied().unwrap_or_default()
    }

    /// Returns a copy that also carries `extra` modes in the vacuum.
    pub fn with_modes(&self, extra: &[ModeId]) -> Self {
        let missing: Vec<ModeId> = extra
            .iter()
            .copied()
            .filter(|m| !self.contains_mode(*m))
            .collect();
        if missing.is_empty() {
            return self.clone();
        }
        let mut modes = self.modes.clone();
        modes.extend(missing);
        modes.sort();
        modes.dedup();
        let src: Vec<Option<usize>> = modes.iter().map(|m| self.index_of(*m)).collect();
        let amps = self
            .amps
            .iter()
            .map(|(occ, a)| {
                let key: Occupation = src.iter().map(|s| s.map_or(0, |i| occ[i])).collect();
                (key, *a)
            })
            .collect();
        Self {
            modes,
            amps,
            cutoff: self.cutoff,
            truncation_deficit: self.truncation_deficit,
        }
    }

    /// Tensor product of kets on disjoint modes. The result keeps the larger
    /// cutoff; product terms beyond it are dropped and counted as deficit.
    pub fn tensor(&self, other: &Self) -> Result<Self> {
        if let Some(m) = self.modes.iter().find(|m| other.contains_mode(**m)) {
            return Err(Error::ModeOverlap(*m));
        }
        let cutoff = self.cutoff.max(other.cutoff);
        let mut modes = self.modes.clone();
        modes.extend(other.modes.iter().copied());
        modes.sort();
        let src: Vec<(bool, usize)> = modes
            .iter()
            .map(|m| match self.index_of(*m) {
                Some(i) => (true, i),
                None => (false, other.index_of(*m).unwrap()),
            })
            .collect();
        let mut amps = BTreeMap::new();
        let mut dropped = 0.0;
        for (oa, a) in &self.amps {
            let na: usize = oa.iter().map(|&n| n as usize).sum();
            for (ob, b) in &other.amps {
                let nb: usize = ob.iter().map(|&n| n as usize).sum();
                if na + nb > cutoff {
                    dropped += (a * b).norm_sqr();
                    continue;
                }
                let key: Occupation = src
                    .iter()
                    .map(|&(left, i)| if left { oa[i] } else { ob[i] })
                    .collect();
                amps.insert(key, a * b);
            }
        }
        Ok(Self {
            modes,
            amps,
            cutoff,
            truncation_deficit: self.truncation_deficit + other.truncation_deficit + dropped,
        })
    }

    /// Inner product `⟨self|other⟩`; modes missing from either side are
    /// treated as empty.
    pub fn inner(&self, other: &Self) -> C64 {
        let a = self.with_modes(&other.modes);
        let b = other.with_modes(&self.modes);
        a.amps
            .iter()
            .filter_map(|(k, x)| b.amps.get(k).map(|y| x.conj() * y))
            .sum()
    }

    /// Largest amplitude difference after removing the best-fitting global
    /// phase (`other` is rotated onto `self`).
    pub fn max_abs_diff_up_to_phase(&self, other: &Self) -> f64 {
        let a = self.with_modes(&other.modes);
        let b = other.with_modes(&self.modes);
        let overlap = b.inner(&a);
        let phase = if overlap.norm() > 0.0 {
            overlap / overlap.norm()
        } else {
            C64::new(1.0, 0.0)
        };
        let zero = C64::new(0.0, 0.0);
        let mut worst: f64 = 0.0;
        for (k, x) in &a.amps {
            let y = b.amps.get(k).copied().unwrap_or(zero) * phase;
            worst = worst.max((x - y).norm());
        }
        for (k, y) in &b.amps {
            if !a.amps.contains_key(k) {
                worst = worst.max(y.norm());
            }
        }
        worst
    }

    /// Keeps only the terms whose occupations on `modes` satisfy `accept`
    /// (an unnormalized projection).
    pub fn project(&self, modes: &[ModeId], accept: impl Fn(&[u8]) -> bool) -> Result<Self> {
        let idx = self.indices(modes)?;
        let mut out = self.clone();
        let mut sel = vec![0u8; idx.len()];
        out.amps.retain(|occ, _| {
            for (s, &i) in sel.iter_mut().zip(&idx) {
                *s = occ[i];
            }
            accept(&sel)
        });
        Ok(out)
    }

    fn indices(&self, modes: &[ModeId]) -> Result<Vec<usize>> {
        modes
            .iter()
            .map(|m| self.index_of(*m).ok_or(Error::MissingMode(*m)))
            .collect()
    }

    /// Applies only the no-loss Kraus branch of a transform: creation
    /// operators map through `S` and any amplitude leaking to the environment
    /// is dropped. For a unitary `S` this is the full evolution.
    pub fn apply_linear(&self, t: &ModeTransform) -> Result<Self> {
        let columns = t.system_columns();
        let branches = self.evolve(t, &columns, 0)?;
        Ok(branches
            .into_iter()
            .next()
            .map(|(_, k)| k)
            .unwrap_or_else(|| {
                let mut k = self.with_modes(&t.modes);
                k.amps.clear();
                k
            }))
    }

    /// Applies a (possibly lossy) transform. Lost photons land in dilation
    /// modes that are measured in the number basis; every environment
    /// outcome becomes one branch of the returned ensemble.
    pub fn apply_transform(&self, t: &ModeTransform) -> Result<StateEnsemble> {
        let (columns, env) = t.dilated_columns();
        let branches = self.evolve(t, &columns, env)?;
        Ok(StateEnsemble::from_kets(branches.into_values()))
    }

    /// Core expansion. Output indices `< K` are the transform's system modes,
    /// indices `≥ K` are environment modes. Returns kets keyed by the
    /// environment occupation.
    fn evolve(
        &self,
        t: &ModeTransform,
        columns: &[Vec<(usize, C64)>],
        env: usize,
    ) -> Result<BTreeMap<Occupation, FockKet>> {
        let state = self.with_modes(&t.modes);
        let idx = state.indices(&t.modes)?;
        let k = idx.len();
        let mut cache: HashMap<Occupation, Vec<(Occupation, C64)>> = HashMap::new();
        let mut out: BTreeMap<Occupation, BTreeMap<Occupation, C64>> = BTreeMap::new();

        for (occ, amp) in &state.amps {
            let input: Occupation = idx.iter().map(|&i| occ[i]).collect();
            let expansion = cache
                .entry(input.clone())
                .or_insert_with(|| expand_creation(&input, columns, k + env));
            for (out_occ, coeff) in expansion.iter() {
                let mut key = occ.clone();
                for (j, &i) in idx.iter().enumerate() {
                    key[i] = out_occ[j];
                }
                let env_key = out_occ[k..].to_vec();
                *out.entry(env_key)
                    .or_default()
                    .entry(key)
                    .or_insert(C64::new(0.0, 0.0)) += amp * coeff;
            }
        }

        Ok(out
            .into_iter()
            .map(|(env_key, mut amps)| {
                amps.retain(|_, a| a.norm_sqr() > 0.0);
                let ket = FockKet {
                    modes: state.modes.clone(),
                    amps,
                    cutoff: state.cutoff,
                    truncation_deficit: state.truncation_deficit,
                };
                (env_key, ket)
            })
            .collect())
    }

    fn remove_modes(&self, modes: &[ModeId]) -> (Vec<usize>, Vec<ModeId>) {
        let keep: Vec<usize> = (0..self.modes.len())
            .filter(|&i| !modes.contains(&self.modes[i]))
            .collect();
        let kept_modes = keep.iter().map(|&i| self.modes[i]).collect();
        (keep, kept_modes)
    }
}

/// Applies `Π_j (Σ_k c_kj b†_k)^{n_j} / √(n_j!)` to the vacuum.
fn expand_creation(input: &[u8], columns: &[Vec<(usize, C64)>], outputs: usize) -> Vec<(Occupation, C64)> {
    let mut poly: HashMap<Occupation, C64> = HashMap::new();
    poly.insert(vec![0; outputs], C64::new(1.0, 0.0));
    for (j, &n) in input.iter().enumerate() {
        for _ in 0..n {
            let mut next: HashMap<Occupation, C64> = HashMap::with_capacity(poly.len() * 2);
            for (occ, c) in &poly {
                for &(k, s) in &columns[j] {
                    let mut o = occ.clone();
                    o[k] += 1;
                    *next.entry(o).or_insert(C64::new(0.0, 0.0)) += c * s;
                }
            }
            poly = next;
        }
    }
    let in_norm: f64 = input.iter().map(|&n| sqrt_factorial(n as usize)).product();
    let mut out: Vec<(Occupation, C64)> = poly
        .into_iter()
        .filter(|(_, c)| c.norm_sqr() > 0.0)
        .map(|(occ, c)| {
            let out_norm: f64 = occ.iter().map(|&m| sqrt_factorial(m as usize)).product();
            (occ, c * (out_norm / in_norm))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn canonical_modes(modes: &[ModeId]) -> Result<Vec<ModeId>> {
    let mut m = modes.to_vec();
    m.sort();
    for w in m.windows(2) {
        if w[0] == w[1] {
            return Err(Error::ModeOverlap(w[0]));
        }
    }
    Ok(m)
}

/// All occupation vectors over `n_modes` modes with total `≤ max_total`.
fn occupations_up_to(n_modes: usize, max_total: usize) -> Vec<Occupation> {
    let mut out = vec![Vec::new()];
    for _ in 0..n_modes {
        let mut next = Vec::new();
        for occ in &out {
            let used: usize = occ.iter().map(|&n: &u8| n as usize).sum();
            for n in 0..=(max_total - used) {
                let mut o = occ.clone();
                o.push(n as u8);
                next.push(o);
            }
        }
        out = next;
    }
    out
}

/// `Σ_{n > cutoff} e^{−mean} meanⁿ / n!`, summed directly so small tails are
/// not lost to cancellation.
pub fn poisson_tail(mean: f64, cutoff: usize) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    // log of the first omitted term
    let n0 = cutoff + 1;
    let log_first = -mean + n0 as f64 * mean.ln() - (1..=n0).map(|k| (k as f64).ln()).sum::<f64>();
    let mut term = log_first.exp();
    let mut sum = 0.0;
    let mut n = n0;
    while term > sum * 1e-17 && n < n0 + 10_000 {
        sum += term;
        n += 1;
        term *= mean / n as f64;
    }
    sum.min(1.0)
}

/// Linear map on a subset of modes. Column `j` holds the image of the
/// creation operator of `modes[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTransform {
    modes: Vec<ModeId>,
    matrix: DMatrix<C64>,
    lossless: bool,
}

impl ModeTransform {
    pub fn new(modes: Vec<ModeId>, matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != modes.len() || matrix.ncols() != modes.len() {
            return Err(Error::InvalidParameter(format!(
                "transform matrix is {}x{} for {} modes",
                matrix.nrows(),
                matrix.ncols(),
                modes.len()
            )));
        }
        canonical_modes(&modes)?;
        let n = modes.len();
        let gram = matrix.adjoint() * &matrix - DMatrix::<C64>::identity(n, n);
        let lossless = gram.iter().all(|z| z.norm() <= 1e-13);
        let t = Self {
            modes,
            matrix,
            lossless,
        };
        let s = t.largest_singular_value();
        if s > 1.0 + ALGEBRAIC_TOL {
            return Err(Error::NonPhysical(s));
        }
        Ok(t)
    }

    pub fn identity(modes: Vec<ModeId>) -> Result<Self> {
        let n = modes.len();
        Self::new(modes, DMatrix::identity(n, n))
    }

    pub fn modes(&self) -> &[ModeId] {
        &self.modes
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    /// True when `S†S = 1` to rounding, i.e. nothing leaks to the environment.
    pub fn is_lossless(&self) -> bool {
        self.lossless
    }

    pub fn largest_singular_value(&self) -> f64 {
        if self.modes.is_empty() {
            return 0.0;
        }
        self.matrix
            .clone()
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    /// Polarizing beam splitter: `H` stays in its port, `V` swaps ports.
    /// No reflection phase.
    pub fn pbs(a: Port, b: Port) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidParameter("PBS needs two distinct ports".into()));
        }
        let one = C64::new(1.0, 0.0);
        // order: aH, aV, bH, bV
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = one;
        m[(2, 2)] = one;
        m[(3, 1)] = one; // aV -> bV
        m[(1, 3)] = one; // bV -> aV
        Self::new(vec![a.h(), a.v(), b.h(), b.v()], m)
    }

    /// Half-wave plate with its axis at `theta`:
    /// `[[cos 2θ, sin 2θ], [sin 2θ, −cos 2θ]]` on `(H, V)`.
    pub fn hwp(port: Port, theta: f64) -> Result<Self> {
        let (s, c) = (2.0 * theta).sin_cos();
        let m = TransferMatrix::from_entries_unchecked([
            C64::from(c),
            C64::from(s),
            C64::from(s),
            C64::from(-c),
        ]);
        Self::jones(port, &m)
    }

    /// A Jones matrix acting on the two polarization modes of `port`.
    pub fn jones(port: Port, m: &TransferMatrix) -> Result<Self> {
        let mut d = DMatrix::zeros(2, 2);
        for r in 0..2 {
            for c in 0..2 {
                d[(r, c)] = m.0[(r, c)];
            }
        }
        Self::new(port.modes().to_vec(), d)
    }

    /// Polarization-independent loss with power transmission `tau`.
    pub fn loss(port: Port, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidParameter(format!("transmission {tau} outside [0, 1]")));
        }
        let s = C64::from(tau.sqrt());
        Self::jones(
            port,
            &TransferMatrix::from_entries_unchecked([s, C64::default(), C64::default(), s]),
        )
    }

    fn system_columns(&self) -> Vec<Vec<(usize, C64)>> {
        let k = self.modes.len();
        (0..k)
            .map(|j| {
                (0..k)
                    .filter(|&r| self.matrix[(r, j)].norm_sqr() > 0.0)
                    .map(|r| (r, self.matrix[(r, j)]))
                    .collect()
            })
            .collect()
    }

    /// Columns of an isometry `[S; C]` with `C†C = 1 − S†S`, plus the number
    /// of environment modes. From `S = U Σ V†`, `C = √(1 − Σ²) V†`, keeping
    /// only the rows with non-negligible loss.
    fn dilated_columns(&self) -> (Vec<Vec<(usize, C64)>>, usize) {
        let k = self.modes.len();
        let mut columns = self.system_columns();
        if k == 0 || self.lossless {
            return (columns, 0);
        }
        let svd = self.matrix.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut env = 0;
        for (e, sigma) in svd.singular_values.iter().enumerate() {
            let leak = 1.0 - sigma.min(1.0).powi(2);
            if leak <= 1e-14 {
                continue;
            }
            let scale = leak.sqrt();
            for (j, col) in columns.iter_mut().enumerate() {
                let c = v_t[(e, j)] * scale;
                if c.norm_sqr() > 0.0 {
                    col.push((k + env, c));
                }
            }
            env += 1;
        }
        (columns, env)
    }
}

/// One weighted pure component of an ensemble; `state` is normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub weight: f64,
    pub state: FockKet,
}

/// Mixed state written as a weighted list of normalized kets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateEnsemble {
    branches: Vec<Branch>,
}

/// Result of a photon-number-resolving measurement for one outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOutcome {
    /// Counts in the order the measured modes were requested.
    pub occupations: Vec<u8>,
    pub probability: f64,
    /// Normalized post-measurement state with the measured modes removed.
    pub state: StateEnsemble,
}

impl StateEnsemble {
    pub fn new() -> Self {
        Self::default()
    }

    /// Single-branch ensemble; the weight is the ket's squared norm.
    pub fn pure(ket: FockKet) -> Self {
        Self::from_kets([ket])
    }

    /// Each (unnormalized) ket contributes a branch weighted by its norm.
    pub fn from_kets(kets: impl IntoIterator<Item = FockKet>) -> Self {
        let branches = kets
            .into_iter()
            .filter_map(|k| {
                let w = k.norm_sqr();
                (w > 0.0).then(|| Branch {
                    weight: w,
                    state: k.normalized(),
                })
            })
            .collect();
        Self { branches }
    }

    pub fn from_branches(branches: Vec<Branch>) -> Result<Self> {
        if branches.iter().any(|b| b.weight.is_nan() || b.weight < 0.0) {
            return Err(Error::InvalidParameter("negative branch weight".into()));
        }
        Ok(Self { branches })
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.branches.iter().map(|b| b.weight).sum()
    }

    /// Largest truncation deficit carried by any branch.
    pub fn truncation_deficit(&self) -> f64 {
        self.branches
            .iter()
            .map(|b| b.state.truncation_deficit)
            .fold(0.0, f64::max)
    }

    /// Same branches rescaled to unit total weight.
    pub fn normalized(&self) -> Self {
        self.scaled(1.0 / self.total_weight())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let branches = if factor.is_finite() {
            self.branches
                .iter()
                .map(|b| Branch {
                    weight: b.weight * factor,
                    state: b.state.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { branches }
    }

    pub fn extend(&mut self, other: StateEnsemble) {
        self.branches.extend(other.branches);
    }

    pub fn apply_transform(&self, t: &ModeTransform) -> Result<Self> {
        let mut out = Self::new();
        for b in &self.branches {
            out.extend(b.state.apply_transform(t)?.scaled(b.weight));
        }
        Ok(out)
    }

    /// Applies the same ket-level map to every branch and reweights by the
    /// resulting norms.
    pub fn map_kets(&self, f: impl Fn(&FockKet) -> Result<FockKet>) -> Result<Self> {
        let mut branches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let k = f(&b.state)?;
            let n = k.norm_sqr();
            if n > 0.0 {
                branches.push(Branch {
                    weight: b.weight * n,
                    state: k.normalized(),
                });
            }
        }
        Ok(Self { branches })
    }

    /// Photon-number-resolving measurement of `modes`. Outcomes are listed in
    /// lexicographic order of the counts; probabilities sum to the total
    /// weight.
    pub fn measure_pnr(&self, modes: &[ModeId]) -> Result<Vec<MeasurementOutcome>> {
        let mut grouped: BTreeMap<Vec<u8>, Vec<FockKet>> = BTreeMap::new();
        for b in &self.branches {
            let idx = b.state.indices(modes)?;
            let (keep, kept_modes) = b.state.remove_modes(modes);
            let mut parts: BTreeMap<Vec<u8>, BTreeMap<Occupation, C64>> = BTreeMap::new();
            let scale = b.weight.sqrt();
            for (occ, a) in &b.state.amps {
                let outcome: Vec<u8> = idx.iter().map(|&i| occ[i]).collect();
                let rest: Occupation = keep.iter().map(|&i| occ[i]).collect();
                parts.entry(outcome).or_default().insert(rest, a * scale);
            }
            for (outcome, amps) in parts {
                grouped.entry(outcome).or_default().push(FockKet {
                    modes: kept_modes.clone(),
                    amps,
                    cutoff: b.state.cutoff,
                    truncation_deficit: b.state.truncation_deficit,
                });
            }
        }
        Ok(grouped
            .into_iter()
            .filter_map(|(occupations, kets)| {
                let ens = StateEnsemble::from_kets(kets);
                let p = ens.total_weight();
                (p > 0.0).then(|| MeasurementOutcome {
                    occupations,
                    probability: p,
                    state: ens.normalized(),
                })
            })
            .collect())
    }

    /// Projects every branch onto the occupations of `modes` that satisfy
    /// `accept`, without resolving them further. Returns the acceptance
    /// probability and the renormalized surviving ensemble.
    pub fn postselect(
        &self,
        modes: &[ModeId],
        accept: impl Fn(&[u8]) -> bool,
    ) -> Result<(f64, StateEnsemble)> {
        let filtered = self.map_kets(|k| k.project(modes, &accept))?;
        let p = filtered.total_weight();
        if p > 0.0 {
            Ok((p, filtered.normalized()))
        } else {
            Ok((0.0, StateEnsemble::new()))
        }
    }

    /// Discards `modes` (number-basis measurement with the result forgotten).
    pub fn trace_out(&self, modes: &[ModeId]) -> Result<Self> {
        let total = self.total_weight();
        let mut out = Self::new();
        for o in self.measure_pnr(modes)? {
            out.extend(o.state.scaled(o.probability));
        }
        // keep the original normalization convention
        let w = out.total_weight();
        Ok(if w > 0.0 { out.scaled(total / w) } else { out })
    }

    /// `Σ w |⟨target|ψ⟩|² / Σ w`, with every mode outside the target traced
    /// out. The target is normalized first. `None` for an empty ensemble.
    pub fn fidelity(&self, target: &FockKet) -> Option<f64> {
        let total = self.total_weight();
        if total <= 0.0 || target.norm_sqr() == 0.0 {
            return None;
        }
        let t = target.normalized();
        let mut acc = 0.0;
        for b in &self.branches {
            let psi = b.state.with_modes(&t.modes);
            let t_idx: Vec<usize> = t.modes.iter().map(|m| psi.index_of(*m).unwrap()).collect();
            let (rest_idx, _) = psi.remove_modes(&t.modes);
            let mut by_rest: BTreeMap<Occupation, C64> = BTreeMap::new();
            for (occ, a) in &psi.amps {
                let sys: Occupation = t_idx.iter().map(|&i| occ[i]).collect();
                if let Some(ta) = t.amps.get(&sys) {
                    let rest: Occupation = rest_idx.iter().map(|&i| occ[i]).collect();
                    *by_rest.entry(rest).or_insert(C64::new(0.0, 0.0)) += ta.conj() * a;
                }
            }
            acc += b.weight * by_rest.values().map(|z| z.norm_sqr()).sum::<f64>();
        }
        Some((acc / total).clamp(0.0, 1.0))
    }

    /// Merges branches whose states coincide up to a global phase
    /// (`|⟨a|b⟩|² ≥ 1 − tol`).
    pub fn coalesce(&self, tol: f64) -> Self {
        let mut out: Vec<Branch> = Vec::new();
        for b in &self.branches {
            match out
                .iter_mut()
                .find(|o| o.state.inner(&b.state).norm_sqr() >= 1.0 - tol)
            {
                Some(o) => o.weight += b.weight,
                None => out.push(b.clone()),
            }
        }
        Self { branches: out }
    }
}

impl From<FockKet> for StateEnsemble {
    fn from(k: FockKet) -> Self {
        Self::pure(k)
    }
}
