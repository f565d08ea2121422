//! The four DFS distribution schemes and the linear-optical parity check.
//!
//! Port layout shared by every scheme (all labels are [`Port`]s):
//!
//! | port | meaning |
//! |------|---------|
//! | 1, 2 | reference photon `R`; in the two-channel schemes port 1 rides channel 1̄ and port 2 rides channel 2̄ until the final PBS, after which they are output ports 1 and 2 |
//! | 3, 4 | signal photon `S`, same convention with channels 1̄/2̄ and output ports 3/4 |
//! | 10   | Alice's retained photon `A` of the pair `|φ⁺⟩` |
//! | 11   | spare input of the detection PBS inside the parity check |
//!
//! Forward and backward photons occupy distinct labels, which stands in for
//! their separation in time or direction. A PBS keeps `H` in its port and
//! swaps `V` between ports, so after the final PBS port 1 collects `H` from
//! 1̄ and `V` from 2̄.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, FRAC_PI_8};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fock::{FockKet, ModeTransform, Port, StateEnsemble};
use crate::jones::{
    avg_transmittance, backward_matrix, haar_random_unitary, ChannelSpec, PolarizationState,
    TransferMatrix,
};
use crate::{Error, Result, C64};

pub const PORT_1: Port = Port(1);
pub const PORT_2: Port = Port(2);
pub const PORT_3: Port = Port(3);
pub const PORT_4: Port = Port(4);
pub const PORT_A: Port = Port(10);
pub const PORT_SPARE: Port = Port(11);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolId {
    /// Single-qubit transfer over one collective phase-noise channel.
    #[serde(rename = "a")]
    PhaseForward,
    /// Single-qubit transfer over two general channels joined by PBSs.
    #[serde(rename = "b")]
    GeneralForward,
    /// Entanglement distribution with a counter-propagating reference over
    /// one phase-noise channel.
    #[serde(rename = "c")]
    PhaseBackward,
    /// Entanglement distribution with a counter-propagating reference over
    /// two general channels.
    #[serde(rename = "d")]
    GeneralBackward,
}

impl ProtocolId {
    pub fn letter(self) -> char {
        match self {
            Self::PhaseForward => 'a',
            Self::GeneralForward => 'b',
            Self::PhaseBackward => 'c',
            Self::GeneralBackward => 'd',
        }
    }

    pub fn needs_second_channel(self) -> bool {
        matches!(self, Self::GeneralForward | Self::GeneralBackward)
    }

    fn backward_reference(self) -> bool {
        matches!(self, Self::PhaseBackward | Self::GeneralBackward)
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for ProtocolId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::PhaseForward),
            "b" => Ok(Self::GeneralForward),
            "c" => Ok(Self::PhaseBackward),
            "d" => Ok(Self::GeneralBackward),
            other => Err(Error::InvalidParameter(format!("unknown protocol '{other}'"))),
        }
    }
}

/// A channel either as its element list or as a bare transfer matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Channel {
    Elements(ChannelSpec),
    Matrix(TransferMatrix),
}

impl Channel {
    pub fn forward(&self) -> Result<TransferMatrix> {
        match self {
            Self::Elements(spec) => spec.forward_matrix(),
            Self::Matrix(m) => Ok(*m),
        }
    }

    /// Backward matrix: per-element for an element list, `Z Mᵀ Z` for a bare
    /// matrix.
    pub fn backward(&self) -> Result<TransferMatrix> {
        match self {
            Self::Elements(spec) => spec.backward_matrix(),
            Self::Matrix(m) => Ok(backward_matrix(m)),
        }
    }

    pub fn transmittance(&self) -> Result<f64> {
        Ok(avg_transmittance(&self.forward()?))
    }
}

impl From<TransferMatrix> for Channel {
    fn from(m: TransferMatrix) -> Self {
        Self::Matrix(m)
    }
}

impl From<ChannelSpec> for Channel {
    fn from(s: ChannelSpec) -> Self {
        Self::Elements(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    SinglePhoton,
    /// Weak coherent pulse; `mu` is the mean photon number reaching Alice,
    /// i.e. `T|α|²` with `T` the configured polarization-averaged
    /// transmittance.
    Coherent { mu: f64 },
}

/// How random unitaries at the channel ends are averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingConvention {
    /// `U_out · M · U_in` with independent Haar unitaries.
    Haar,
    /// `√(2T) · U` with Haar `U`, so that `|m1|²` and `|l4|²` are uniform on
    /// `[0, 2T]` as assumed by the closed-form trade-off.
    AppendixUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub channel_1: Channel,
    pub channel_2: Option<Channel>,
    pub reference: Reference,
    /// Qubit sent by the forward schemes (a, b).
    pub signal: PolarizationState,
    pub randomize: bool,
    pub sampling: SamplingConvention,
    /// Use the same random unitaries on both channels.
    pub shared_randomization: bool,
    pub samples: usize,
    pub cutoff: usize,
    pub seed: u64,
}

pub const DEFAULT_CUTOFF: usize = 6;

/// Accepted branches below this probability are rounding residue of the
/// wave-plate matrices and are dropped.
pub const PROBABILITY_FLOOR: f64 = 1e-24;

impl ProtocolConfig {
    pub fn new(channel_1: impl Into<Channel>) -> Self {
        Self {
            channel_1: channel_1.into(),
            channel_2: None,
            reference: Reference::SinglePhoton,
            signal: PolarizationState::D,
            randomize: false,
            sampling: SamplingConvention::Haar,
            shared_randomization: false,
            samples: 1000,
            cutoff: DEFAULT_CUTOFF,
            seed: 0,
        }
    }

    pub fn with_channel_2(mut self, c: impl Into<Channel>) -> Self {
        self.channel_2 = Some(c.into());
        self
    }

    pub fn with_reference(mut self, r: Reference) -> Self {
        self.reference = r;
        self
    }

    pub fn with_signal(mut self, s: PolarizationState) -> Self {
        self.signal = s;
        self
    }

    pub fn with_randomization(mut self, sampling: SamplingConvention, samples: usize) -> Self {
        self.randomize = true;
        self.sampling = sampling;
        self.samples = samples;
        self
    }

    pub fn with_cutoff(mut self, cutoff: usize) -> Self {
        self.cutoff = cutoff;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, protocol: ProtocolId) -> Result<()> {
        if protocol.needs_second_channel() && self.channel_2.is_none() {
            return Err(Error::InvalidConfig(format!(
                "protocol {protocol} requires a second channel"
            )));
        }
        if !protocol.backward_reference() && self.reference != Reference::SinglePhoton {
            return Err(Error::InvalidConfig(format!(
                "protocol {protocol} uses a forward single-photon reference"
            )));
        }
        if let Reference::Coherent { mu } = self.reference {
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(Error::InvalidConfig(format!("mu = {mu} must be >= 0")));
            }
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be >= 1".into()));
        }
        let photons = if protocol.backward_reference() { 3 } else { 2 };
        let needed = match self.reference {
            Reference::SinglePhoton => photons,
            Reference::Coherent { .. } => 2,
        };
        if self.cutoff < needed {
            return Err(Error::InvalidConfig(format!(
                "cutoff {} cannot hold the {needed} photons of protocol {protocol}",
                self.cutoff
            )));
        }
        let s = self.signal.probability();
        if !(s > 0.0 && s <= 1.0 + 1e-12) {
            return Err(Error::InvalidConfig("signal state must be non-vacuum".into()));
        }
        Ok(())
    }
}

/// Checkpoints exposed by [`intermediate_state`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PreChannel,
    PostChannel,
    PostPbs,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-channel" => Ok(Self::PreChannel),
            "post-channel" => Ok(Self::PostChannel),
            "post-pbs" => Ok(Self::PostPbs),
            other => Err(Error::InvalidParameter(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    D1,
    D2,
}

/// Ports used by one parity-check device. `reference` becomes the output
/// port; `partner` is routed to the diagonal-basis detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityCheckPorts {
    pub reference: Port,
    pub partner: Port,
    pub spare: Port,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBranch {
    pub detector: Detector,
    pub probability: f64,
    /// Normalized output state (detector modes removed).
    pub state: StateEnsemble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityCheckOutcome {
    pub branches: Vec<DecodedBranch>,
    pub rejected_probability: f64,
}

impl ParityCheckOutcome {
    pub fn accepted_probability(&self) -> f64 {
        self.branches.iter().map(|b| b.probability).sum()
    }
}

fn apply_unitary(ens: &StateEnsemble, t: &ModeTransform) -> Result<StateEnsemble> {
    ens.map_kets(|k| k.apply_linear(t))
}

fn non_vacuum(occ: &[u8]) -> bool {
    occ.iter().any(|&n| n > 0)
}

/// Linear-optical parity check and decoder.
///
/// `HWP(π/4)` on the reference, `PBS(partner, reference)`, then a
/// diagonal-basis measurement of the partner port (`HWP(π/8)`, a second PBS
/// into `spare`, number-resolving detectors `D1 = partner H`,
/// `D2 = spare V`). Exactly one detected photon and a non-empty output port
/// are accepted; a `D2` click is followed by a π phase on `V` of the output.
/// The returned probabilities are absolute (relative to the input weight).
pub fn parity_check_decode(input: &StateEnsemble, ports: ParityCheckPorts) -> Result<ParityCheckOutcome> {
    let ParityCheckPorts {
        reference,
        partner,
        spare,
    } = ports;
    for b in input.branches() {
        for m in reference.modes().into_iter().chain(partner.modes()) {
            if !b.state.contains_mode(m) {
                return Err(Error::MissingMode(m));
            }
        }
    }
    let total = input.total_weight();

    let mut ens = apply_unitary(input, &ModeTransform::hwp(reference, FRAC_PI_4)?)?;
    ens = apply_unitary(&ens, &ModeTransform::pbs(partner, reference)?)?;
    ens = apply_unitary(&ens, &ModeTransform::hwp(partner, FRAC_PI_8)?)?;
    ens = apply_unitary(&ens, &ModeTransform::pbs(partner, spare)?)?;

    let detectors = [partner.h(), partner.v(), spare.h(), spare.v()];
    let phase_flip = ModeTransform::hwp(reference, 0.0)?;
    let mut branches = Vec::new();
    for outcome in ens.measure_pnr(&detectors)? {
        let detector = match outcome.occupations.as_slice() {
            [1, 0, 0, 0] => Detector::D1,
            [0, 0, 0, 1] => Detector::D2,
            _ => continue,
        };
        let (p_out, state) = outcome.state.postselect(&reference.modes(), non_vacuum)?;
        let probability = outcome.probability * p_out;
        if probability <= PROBABILITY_FLOOR {
            continue;
        }
        let state = match detector {
            Detector::D1 => state,
            Detector::D2 => apply_unitary(&state, &phase_flip)?,
        };
        branches.push(DecodedBranch {
            detector,
            probability,
            state,
        });
    }
    branches.sort_by_key(|b| b.detector);
    let accepted: f64 = branches.iter().map(|b| b.probability).sum();
    Ok(ParityCheckOutcome {
        branches,
        rejected_probability: (total - accepted).max(0.0),
    })
}

/// One detection pattern of a protocol run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchRecord {
    /// e.g. `"port1/D1"`, `"ports13/D2"`.
    pub label: String,
    /// Whether the protocol keeps this pattern. Diagnostic patterns (the
    /// unprotected ports 2 and 4 of scheme d) are reported but not accepted.
    pub accepted: bool,
    pub probability: f64,
    pub fidelity: Option<f64>,
    #[serde(skip)]
    pub state: Option<StateEnsemble>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub samples: usize,
    pub sampling: SamplingConvention,
    pub shared_randomization: bool,
    pub success_std_error: f64,
    pub fidelity_std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolResult {
    pub protocol: ProtocolId,
    pub branches: Vec<BranchRecord>,
    pub success_probability: f64,
    /// Fidelity of the accepted output to the intended state, `None` if
    /// nothing was accepted.
    pub decoded_fidelity: Option<f64>,
    /// Probability of every outcome that is not accepted (loss included).
    pub rejected_probability: f64,
    pub truncation_deficit: f64,
    pub monte_carlo: Option<MonteCarloSummary>,
}

impl ProtocolResult {
    pub fn branch(&self, label: &str) -> Option<&BranchRecord> {
        self.branches.iter().find(|b| b.label == label)
    }

    /// Total accepted probability of the branches whose label starts with
    /// `prefix`.
    pub fn probability_with_prefix(&self, prefix: &str) -> f64 {
        self.branches
            .iter()
            .filter(|b| b.label.starts_with(prefix))
            .map(|b| b.probability)
            .sum()
    }

    /// Probability-weighted fidelity of the branches whose label starts
    /// with `prefix`.
    pub fn fidelity_with_prefix(&self, prefix: &str) -> Option<f64> {
        weighted_fidelity(self.branches.iter().filter(|b| b.label.starts_with(prefix)))
    }
}

fn weighted_fidelity<'a>(branches: impl Iterator<Item = &'a BranchRecord>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for b in branches {
        if let Some(f) = b.fidelity {
            num += b.probability * f;
            den += b.probability;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Concrete forward and backward matrices of the channels for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMatrices {
    pub m: TransferMatrix,
    pub m_backward: TransferMatrix,
    pub l: TransferMatrix,
    pub l_backward: TransferMatrix,
}

impl ChannelMatrices {
    fn from_config(cfg: &ProtocolConfig) -> Result<Self> {
        let m = cfg.channel_1.forward()?;
        let m_backward = cfg.channel_1.backward()?;
        let (l, l_backward) = match &cfg.channel_2 {
            Some(c) => (c.forward()?, c.backward()?),
            None => (TransferMatrix::identity(), TransferMatrix::identity()),
        };
        Ok(Self {
            m,
            m_backward,
            l,
            l_backward,
        })
    }

    fn randomized<R: Rng + ?Sized>(&self, cfg: &ProtocolConfig, rng: &mut R) -> Result<Self> {
        match cfg.sampling {
            SamplingConvention::Haar => {
                let (u_in, u_out) = (haar_random_unitary(rng), haar_random_unitary(rng));
                let (v_in, v_out) = if cfg.shared_randomization {
                    (u_in, u_out)
                } else {
                    (haar_random_unitary(rng), haar_random_unitary(rng))
                };
                // the random elements are reciprocal, so the backward path
                // sees their backward matrices in reverse order
                Ok(Self {
                    m: u_out * self.m * u_in,
                    m_backward: backward_matrix(&u_in) * self.m_backward * backward_matrix(&u_out),
                    l: v_out * self.l * v_in,
                    l_backward: backward_matrix(&v_in) * self.l_backward * backward_matrix(&v_out),
                })
            }
            SamplingConvention::AppendixUniform => {
                let u = haar_random_unitary(rng);
                let v = if cfg.shared_randomization {
                    u
                } else {
                    haar_random_unitary(rng)
                };
                let m = uniform_scaled(avg_transmittance(&self.m), &u)?;
                let l = uniform_scaled(avg_transmittance(&self.l), &v)?;
                Ok(Self {
                    m,
                    m_backward: backward_matrix(&m),
                    l,
                    l_backward: backward_matrix(&l),
                })
            }
        }
    }
}

fn uniform_scaled(t: f64, u: &TransferMatrix) -> Result<TransferMatrix> {
    if 2.0 * t > 1.0 + 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "appendix-uniform sampling needs T <= 1/2 (got {t})"
        )));
    }
    Ok(u.scale(C64::from((2.0 * t).min(1.0).sqrt())))
}

fn phi_plus(a: Port, s: Port, cutoff: usize) -> Result<FockKet> {
    let amp = C64::from(FRAC_1_SQRT_2);
    FockKet::from_terms(
        &[a.h(), a.v(), s.h(), s.v()],
        [(vec![1, 0, 1, 0], amp), (vec![0, 1, 0, 1], amp)],
        cutoff,
    )
}

fn normalized_signal(s: &PolarizationState) -> PolarizationState {
    let n = s.probability().sqrt();
    PolarizationState {
        v_h: s.v_h / n,
        v_v: s.v_v / n,
    }
}

/// Launch amplitude `|α|` for a coherent reference of mean `mu` at Alice.
fn launch_amplitude(mu: f64, transmittance: f64) -> Result<f64> {
    if mu == 0.0 {
        return Ok(0.0);
    }
    if transmittance <= 0.0 {
        return Err(Error::InvalidConfig(
            "coherent reference needs a channel with non-zero transmittance".into(),
        ));
    }
    Ok((mu / transmittance).sqrt())
}

/// Initial ket plus the transforms applied at each checkpoint.
struct Layout {
    initial: FockKet,
    stages: Vec<(Stage, Vec<ModeTransform>)>,
}

fn layout(
    protocol: ProtocolId,
    cfg: &ProtocolConfig,
    ch: &ChannelMatrices,
    nominal_t: f64,
) -> Result<Layout> {
    let cutoff = cfg.cutoff;
    let jones = ModeTransform::jones;
    let pbs = ModeTransform::pbs;
    let d_photon = |port| FockKet::single_photon(port, &PolarizationState::D, cutoff);
    let layout = match protocol {
        ProtocolId::PhaseForward => Layout {
            initial: d_photon(PORT_1)?.tensor(&FockKet::single_photon(
                PORT_3,
                &normalized_signal(&cfg.signal),
                cutoff,
            )?)?,
            stages: vec![
                (Stage::PreChannel, vec![]),
                (Stage::PostChannel, vec![jones(PORT_1, &ch.m)?, jones(PORT_3, &ch.m)?]),
            ],
        },
        ProtocolId::GeneralForward => Layout {
            initial: d_photon(PORT_1)?.tensor(&FockKet::single_photon(
                PORT_3,
                &normalized_signal(&cfg.signal),
                cutoff,
            )?)?,
            stages: vec![
                (Stage::PreChannel, vec![pbs(PORT_1, PORT_2)?, pbs(PORT_3, PORT_4)?]),
                (
                    Stage::PostChannel,
                    vec![
                        jones(PORT_1, &ch.m)?,
                        jones(PORT_2, &ch.l)?,
                        jones(PORT_3, &ch.m)?,
                        jones(PORT_4, &ch.l)?,
                    ],
                ),
                (Stage::PostPbs, vec![pbs(PORT_1, PORT_2)?, pbs(PORT_3, PORT_4)?]),
            ],
        },
        ProtocolId::PhaseBackward => {
            let pair = phi_plus(PORT_A, PORT_3, cutoff)?;
            match cfg.reference {
                Reference::SinglePhoton => Layout {
                    initial: pair.tensor(&d_photon(PORT_1)?)?,
                    stages: vec![
                        (Stage::PreChannel, vec![]),
                        (
                            Stage::PostChannel,
                            vec![jones(PORT_3, &ch.m)?, jones(PORT_1, &ch.m_backward)?],
                        ),
                    ],
                },
                Reference::Coherent { mu } => {
                    // coherent light stays a product of coherent states under
                    // lossy linear optics, so the reference is propagated
                    // through the backward channel at the amplitude level
                    let a = launch_amplitude(mu, nominal_t)? * FRAC_1_SQRT_2;
                    let launched = PolarizationState {
                        v_h: C64::from(a),
                        v_v: C64::from(a),
                    };
                    let at_alice = crate::jones::apply(&ch.m_backward, &launched);
                    let coh = FockKet::coherent_product(
                        &[(PORT_1.h(), at_alice.v_h), (PORT_1.v(), at_alice.v_v)],
                        cutoff - 2,
                    )?;
                    Layout {
                        initial: pair.tensor(&coh)?,
                        stages: vec![
                            (Stage::PreChannel, vec![]),
                            (Stage::PostChannel, vec![jones(PORT_3, &ch.m)?]),
                        ],
                    }
                }
            }
        }
        ProtocolId::GeneralBackward => {
            let pair = phi_plus(PORT_A, PORT_3, cutoff)?;
            match cfg.reference {
                Reference::SinglePhoton => Layout {
                    initial: pair.tensor(&d_photon(PORT_1)?)?,
                    stages: vec![
                        (Stage::PreChannel, vec![pbs(PORT_1, PORT_2)?, pbs(PORT_3, PORT_4)?]),
                        (
                            Stage::PostChannel,
                            vec![
                                jones(PORT_3, &ch.m)?,
                                jones(PORT_4, &ch.l)?,
                                jones(PORT_1, &ch.m_backward)?,
                                jones(PORT_2, &ch.l_backward)?,
                            ],
                        ),
                        (Stage::PostPbs, vec![pbs(PORT_1, PORT_2)?, pbs(PORT_3, PORT_4)?]),
                    ],
                },
                Reference::Coherent { mu } => {
                    // only Alice's port 1 feeds the parity check; the light
                    // leaving port 2 is an independent coherent factor
                    let a = launch_amplitude(mu, nominal_t)? * FRAC_1_SQRT_2;
                    let h = ch.m_backward.0[(0, 0)] * a;
                    let v = ch.l_backward.0[(1, 1)] * a;
                    let coh =
                        FockKet::coherent_product(&[(PORT_1.h(), h), (PORT_1.v(), v)], cutoff - 2)?;
                    Layout {
                        initial: pair.tensor(&coh)?,
                        stages: vec![
                            (Stage::PreChannel, vec![pbs(PORT_3, PORT_4)?]),
                            (
                                Stage::PostChannel,
                                vec![jones(PORT_3, &ch.m)?, jones(PORT_4, &ch.l)?],
                            ),
                            (Stage::PostPbs, vec![pbs(PORT_3, PORT_4)?]),
                        ],
                    }
                }
            }
        }
    };
    Ok(layout)
}

fn nominal_transmittance(protocol: ProtocolId, cfg: &ProtocolConfig) -> Result<f64> {
    let t1 = cfg.channel_1.transmittance()?;
    Ok(match (&cfg.channel_2, protocol.needs_second_channel()) {
        (Some(c2), true) => 0.5 * (t1 + c2.transmittance()?),
        _ => t1,
    })
}

/// State at a checkpoint, keeping only the component in which no photon has
/// been lost (the amplitudes written out for each scheme). Requires a
/// single-photon reference; random unitaries are not applied.
pub fn intermediate_state(protocol: ProtocolId, cfg: &ProtocolConfig, stage: Stage) -> Result<FockKet> {
    cfg.validate(protocol)?;
    if cfg.reference != Reference::SinglePhoton {
        return Err(Error::InvalidConfig(
            "checkpoints are defined for a single-photon reference".into(),
        ));
    }
    let ch = ChannelMatrices::from_config(cfg)?;
    let lay = layout(protocol, cfg, &ch, nominal_transmittance(protocol, cfg)?)?;
    if !lay.stages.iter().any(|(s, _)| *s == stage) {
        return Err(Error::InvalidParameter(format!(
            "protocol {protocol} has no {stage:?} checkpoint"
        )));
    }
    let mut ket = lay.initial;
    for (s, transforms) in &lay.stages {
        for t in transforms {
            ket = ket.apply_linear(t)?;
        }
        if *s == stage {
            break;
        }
    }
    Ok(ket)
}

fn decoded_records(
    label: &str,
    accepted: bool,
    outcome: ParityCheckOutcome,
    weight: f64,
    correction: Option<&ModeTransform>,
    target: &FockKet,
) -> Result<Vec<BranchRecord>> {
    outcome
        .branches
        .into_iter()
        .map(|b| {
            let state = match correction {
                Some(t) => apply_unitary(&b.state, t)?,
                None => b.state,
            };
            Ok(BranchRecord {
                label: format!("{label}/{:?}", b.detector),
                accepted,
                probability: weight * b.probability,
                fidelity: state.fidelity(target),
                state: Some(state),
            })
        })
        .collect()
}

fn pair_target(y: Port, s: Port) -> Result<FockKet> {
    phi_plus(y, s, 2)
}

fn qubit_target(y: Port, signal: &PolarizationState) -> Result<FockKet> {
    FockKet::single_photon(y, &normalized_signal(signal), 1)
}

/// Runs one protocol on fixed channel matrices.
pub fn run_fixed(protocol: ProtocolId, cfg: &ProtocolConfig, ch: &ChannelMatrices) -> Result<ProtocolResult> {
    cfg.validate(protocol)?;
    let lay = layout(protocol, cfg, ch, nominal_transmittance(protocol, cfg)?)?;
    let deficit = lay.initial.truncation_deficit();
    let mut ens = StateEnsemble::pure(lay.initial);
    for (_, transforms) in &lay.stages {
        for t in transforms {
            ens = ens.apply_transform(t)?;
        }
    }
    let total = ens.total_weight();

    let check = |reference, partner| ParityCheckPorts {
        reference,
        partner,
        spare: PORT_SPARE,
    };
    let bit_flip = |port| ModeTransform::hwp(port, FRAC_PI_4);

    let mut branches = Vec::new();
    match protocol {
        ProtocolId::PhaseForward => {
            let out = parity_check_decode(&ens, check(PORT_1, PORT_3))?;
            let target = qubit_target(PORT_1, &cfg.signal)?;
            branches.extend(decoded_records("out", true, out, 1.0, None, &target)?);
        }
        ProtocolId::GeneralForward => {
            for (label, r, s) in [("port1", PORT_1, PORT_3), ("port2", PORT_2, PORT_4)] {
                let (p, sub) = ens.postselect(&s.modes(), non_vacuum)?;
                if p == 0.0 {
                    continue;
                }
                let out = parity_check_decode(&sub, check(r, s))?;
                let target = qubit_target(r, &cfg.signal)?;
                // the port-2 pair decodes with the qubit roles exchanged
                let fix = if r == PORT_2 { Some(bit_flip(r)?) } else { None };
                branches.extend(decoded_records(label, true, out, p, fix.as_ref(), &target)?);
            }
        }
        ProtocolId::PhaseBackward => {
            let (p, sub) = ens.postselect(&PORT_3.modes(), non_vacuum)?;
            if p > 0.0 {
                let out = parity_check_decode(&sub, check(PORT_1, PORT_A))?;
                let target = pair_target(PORT_1, PORT_3)?;
                branches.extend(decoded_records("out", true, out, p, None, &target)?);
            }
        }
        ProtocolId::GeneralBackward => {
            let (p, sub) = ens.postselect(&PORT_3.modes(), non_vacuum)?;
            if p > 0.0 {
                let out = parity_check_decode(&sub, check(PORT_1, PORT_A))?;
                let target = pair_target(PORT_1, PORT_3)?;
                branches.extend(decoded_records("ports13", true, out, p, None, &target)?);
            }
            if cfg.reference == Reference::SinglePhoton {
                // what a parity check fed from port 2 would yield, with the
                // same bit-flip decoding as the forward scheme's port 2
                let (p, sub) = ens.postselect(&PORT_4.modes(), non_vacuum)?;
                if p > 0.0 {
                    let out = parity_check_decode(&sub, check(PORT_2, PORT_A))?;
                    let target = pair_target(PORT_2, PORT_4)?;
                    let fix = bit_flip(PORT_2)?;
                    branches.extend(decoded_records("ports24", false, out, p, Some(&fix), &target)?);
                }
            }
        }
    }

    let success: f64 = branches.iter().filter(|b| b.accepted).map(|b| b.probability).sum();
    let fidelity = weighted_fidelity(branches.iter().filter(|b| b.accepted));
    Ok(ProtocolResult {
        protocol,
        branches,
        success_probability: success,
        decoded_fidelity: fidelity,
        rejected_probability: (total - success).max(0.0),
        truncation_deficit: deficit,
        monte_carlo: None,
    })
}

/// Runs a protocol, averaging over random unitaries when `cfg.randomize`.
///
/// Monte-Carlo sample `i` draws from a ChaCha8 stream `i` seeded with
/// `cfg.seed`; samples are evaluated in parallel and reduced in index order,
/// so results are bit-reproducible.
pub fn run(protocol: ProtocolId, cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    cfg.validate(protocol)?;
    let base = ChannelMatrices::from_config(cfg)?;
    if !cfg.randomize {
        return run_fixed(protocol, cfg, &base);
    }
    let samples: Vec<ProtocolResult> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, i as u64);
            let ch = base.randomized(cfg, &mut rng)?;
            run_fixed(protocol, cfg, &ch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(protocol, cfg, &samples))
}

pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn aggregate(protocol: ProtocolId, cfg: &ProtocolConfig, samples: &[ProtocolResult]) -> ProtocolResult {
    let n = samples.len() as f64;
    let mut labels: Vec<(String, bool)> = Vec::new();
    for s in samples {
        for b in &s.branches {
            if !labels.iter().any(|(l, _)| *l == b.label) {
                labels.push((b.label.clone(), b.accepted));
            }
        }
    }
    let branches = labels
        .into_iter()
        .map(|(label, accepted)| {
            let (mut p_sum, mut pf_sum) = (0.0, 0.0);
            for s in samples {
                if let Some(b) = s.branch(&label) {
                    p_sum += b.probability;
                    pf_sum += b.probability * b.fidelity.unwrap_or(0.0);
                }
            }
            BranchRecord {
                label,
                accepted,
                probability: p_sum / n,
                fidelity: (p_sum > 0.0).then(|| pf_sum / p_sum),
                state: None,
            }
        })
        .collect::<Vec<_>>();

    let success: Vec<f64> = samples.iter().map(|s| s.success_probability).collect();
    let mean_success = success.iter().sum::<f64>() / n;
    let success_var = if samples.len() > 1 {
        success.iter().map(|p| (p - mean_success).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let weighted: f64 = samples
        .iter()
        .map(|s| s.success_probability * s.decoded_fidelity.unwrap_or(0.0))
        .sum();
    let fidelity = (mean_success > 0.0).then(|| weighted / (mean_success * n));
    // delta-method error of the ratio estimator Σ p f / Σ p
    let fidelity_std_error = fidelity.map(|f| {
        let z2: f64 = samples
            .iter()
            .map(|s| (s.success_probability * (s.decoded_fidelity.unwrap_or(0.0) - f)).powi(2))
            .sum();
        let var_z = if samples.len() > 1 { z2 / (n - 1.0) } else { 0.0 };
        (var_z / n).sqrt() / mean_success
    });

    ProtocolResult {
        protocol,
        branches,
        success_probability: mean_success,
        decoded_fidelity: fidelity,
        rejected_probability: samples.iter().map(|s| s.rejected_probability).sum::<f64>() / n,
        truncation_deficit: samples.iter().map(|s| s.truncation_deficit).fold(0.0, f64::max),
        monte_carlo: Some(MonteCarloSummary {
            samples: samples.len(),
            sampling: cfg.sampling,
            shared_randomization: cfg.shared_randomization,
            success_std_error: (success_var / n).sqrt(),
            fidelity_std_error,
        }),
    }
}

pub fn protocol_phase_forward(cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    run(ProtocolId::PhaseForward, cfg)
}

pub fn protocol_general_forward(cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    run(ProtocolId::GeneralForward, cfg)
}

pub fn protocol_phase_backward(cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    run(ProtocolId::PhaseBackward, cfg)
}

pub fn protocol_general_backward(cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    run(ProtocolId::GeneralBackward, cfg)
}

/// Rescales a channel to polarization-averaged transmittance `t`, keeping
/// its polarization action.
pub fn attenuate(channel: &Channel, t: f64) -> Result<Channel> {
    let m = channel.forward()?;
    let t0 = avg_transmittance(&m);
    if t0 <= 0.0 {
        return Err(Error::InvalidParameter("cannot rescale an opaque channel".into()));
    }
    let scaled = m.scale(C64::from((t / t0).sqrt()));
    let s = scaled.largest_singular_value();
    if s > 1.0 + 1e-12 {
        return Err(Error::NonPhysical(s));
    }
    Ok(Channel::Matrix(scaled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub transmittance: f64,
    pub success: f64,
    pub fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<SweepPoint>,
}

/// Least-squares line through `(ln x, ln y)`; returns `(slope, intercept)`.
pub fn fit_log_log(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter("need at least two points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidParameter("log-log fit needs positive data".into()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("x values are all equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Success probability versus channel transmittance and its log-log slope.
/// Every channel of `cfg` is rescaled to each grid value; a coherent
/// reference keeps its `mu` at Alice.
pub fn scaling_exponent(protocol: ProtocolId, cfg: &ProtocolConfig, t_grid: &[f64]) -> Result<ScalingFit> {
    cfg.validate(protocol)?;
    if t_grid.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "scaling fit needs at least 4 transmittances, got {}",
            t_grid.len()
        )));
    }
    if t_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::InvalidParameter("transmittances must lie in (0, 1]".into()));
    }
    let lo = t_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t_grid.iter().cloned().fold(0.0, f64::max);
    if hi / lo < 100.0 * (1.0 - 1e-9) {
        return Err(Error::InvalidParameter(
            "transmittance grid must span at least two decades".into(),
        ));
    }
    let points = t_grid
        .par_iter()
        .map(|&t| {
            let mut c = cfg.clone();
            c.channel_1 = attenuate(&cfg.channel_1, t)?;
            if let Some(c2) = &cfg.channel_2 {
                c.channel_2 = Some(attenuate(c2, t)?);
            }
            let r = run(protocol, &c)?;
            Ok(SweepPoint {
                transmittance: t,
                success: r.success_probability,
                fidelity: r.decoded_fidelity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.transmittance, p.success)).collect();
    let (slope, intercept) = fit_log_log(&xy)?;
    Ok(ScalingFit {
        slope,
        intercept,
        points,
    })
}
