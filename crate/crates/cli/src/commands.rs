//! Resolved command configurations and their execution.
//!
//! Each command is resolved from its arguments into a serializable config
//! (channel files inlined) that is embedded in the output manifest, so a run
//! can be replayed from its output alone.

use anyhow::{bail, Result};
use dfsim::jones::{backward_matrix, ChannelSpec, PolarizationState};
use dfsim::protocols::{
    run, sample_rng, scaling_exponent, ProtocolConfig, ProtocolId, Reference, SamplingConvention,
};
use dfsim::tradeoff::{fock_oracle, g_prob, h_prob, sweep_tradeoff};
use dfsim::C64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{matrix_from_pairs, ChannelFile};
use crate::output::{num, opt_num, Report, RunManifest};

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    CheckFailed,
}

pub struct Output {
    pub text: String,
    pub verdict: Verdict,
    pub warnings: Vec<String>,
}

impl Output {
    fn pass(text: String) -> Self {
        Self {
            text,
            verdict: Verdict::Pass,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReciprocitySource {
    Random { max_elements: usize, trials: usize },
    File { channel: ChannelFile },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReciprocityConfig {
    pub source: ReciprocitySource,
    /// Replaces the element-wise backward composite in the comparison.
    pub backward_override: Option<[[f64; 2]; 4]>,
    pub tolerance: f64,
}

pub fn reciprocity(cfg: &ReciprocityConfig, seed: u64) -> Result<Output> {
    let declared = cfg
        .backward_override
        .map(|m| {
            let e = m.map(|[re, im]| C64::new(re, im));
            dfsim::jones::TransferMatrix::from_entries_unchecked(e)
        });
    let deviation = |spec: &ChannelSpec| -> Result<f64> {
        let forward = spec.forward_matrix()?;
        let reference = match declared {
            Some(m) => m,
            None => spec.backward_matrix()?,
        };
        Ok(backward_matrix(&forward).max_abs_diff(&reference))
    };
    let (trials, max_elements, worst) = match &cfg.source {
        ReciprocitySource::Random {
            max_elements,
            trials,
        } => {
            if *max_elements == 0 || *trials == 0 {
                bail!("--random and --trials must be >= 1");
            }
            let worst = (0..*trials)
                .into_par_iter()
                .map(|i| {
                    let mut rng = sample_rng(seed, i as u64);
                    let n = rng.random_range(1..=*max_elements);
                    deviation(&ChannelSpec::random(n, &mut rng))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            (*trials, *max_elements, worst)
        }
        ReciprocitySource::File { channel } => match (&channel.elements, &channel.matrix) {
            (Some(e), _) => {
                let spec = ChannelSpec::new(e.clone())?;
                (1, e.len(), deviation(&spec)?)
            }
            (None, Some(m)) => {
                let forward = matrix_from_pairs(m)?;
                let reference = declared.unwrap_or_else(|| backward_matrix(&forward));
                (1, 1, backward_matrix(&forward).max_abs_diff(&reference))
            }
            (None, None) => bail!("channel file has neither elements nor matrix"),
        },
    };
    let pass = worst <= cfg.tolerance;
    let mut report = Report::new(
        RunManifest::new("reciprocity", cfg, seed)?,
        &["trials", "max_elements", "max_abs_deviation", "tolerance", "pass"],
    )?;
    report.row([
        trials.to_string(),
        max_elements.to_string(),
        num(worst),
        num(cfg.tolerance),
        pass.to_string(),
    ])?;
    Ok(Output {
        text: report.render()?,
        verdict: if pass { Verdict::Pass } else { Verdict::CheckFailed },
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub protocol: ProtocolId,
    pub channel_1: ChannelFile,
    pub channel_2: Option<ChannelFile>,
    pub reference: Reference,
    /// `[re_h, im_h, re_v, im_v]` of the forward-scheme signal.
    pub signal: [f64; 4],
    pub sampling: Option<SamplingConvention>,
    pub samples: usize,
    pub shared_randomization: bool,
    pub cutoff: usize,
}

impl RunSettings {
    pub fn to_config(&self, seed: u64) -> Result<ProtocolConfig> {
        if self.protocol.needs_second_channel() && self.channel_2.is_none() {
            bail!("protocol {} needs a second channel (--channel2)", self.protocol);
        }
        let [a, b, c, d] = self.signal;
        let signal = PolarizationState::new(C64::new(a, b), C64::new(c, d))?;
        let mut cfg = ProtocolConfig::new(self.channel_1.to_channel()?)
            .with_reference(self.reference)
            .with_signal(signal)
            .with_cutoff(self.cutoff)
            .with_seed(seed);
        if let Some(c2) = &self.channel_2 {
            cfg = cfg.with_channel_2(c2.to_channel()?);
        }
        if let Some(s) = self.sampling {
            cfg = cfg.with_randomization(s, self.samples);
            cfg.shared_randomization = self.shared_randomization;
        }
        cfg.validate(self.protocol)?;
        Ok(cfg)
    }
}

pub fn protocol(settings: &RunSettings, seed: u64) -> Result<Output> {
    let cfg = settings.to_config(seed)?;
    let r = run(settings.protocol, &cfg)?;
    let mut report = Report::new(
        RunManifest::new("protocol", settings, seed)?,
        &["branch", "accepted", "probability", "fidelity"],
    )?;
    for b in &r.branches {
        report.row([
            b.label.clone(),
            b.accepted.to_string(),
            num(b.probability),
            opt_num(b.fidelity),
        ])?;
    }
    report.footer("success_probability", num(r.success_probability));
    report.footer("decoded_fidelity", opt_num(r.decoded_fidelity));
    report.footer("rejected_probability", num(r.rejected_probability));
    report.footer("truncation_deficit", num(r.truncation_deficit));
    if let Some(mc) = &r.monte_carlo {
        report.footer("samples", mc.samples.to_string());
        report.footer("success_std_error", num(mc.success_std_error));
        report.footer("fidelity_std_error", opt_num(mc.fidelity_std_error));
    }
    Ok(Output::pass(report.render()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub run: RunSettings,
    pub t_grid: Vec<f64>,
}

pub fn sweep(cfg: &SweepConfig, seed: u64) -> Result<Output> {
    if cfg.t_grid.len() < 4 {
        bail!("a sweep needs at least 4 transmittance values, got {}", cfg.t_grid.len());
    }
    let pc = cfg.run.to_config(seed)?;
    let fit = scaling_exponent(cfg.run.protocol, &pc, &cfg.t_grid)?;
    let mut report = Report::new(
        RunManifest::new("sweep", cfg, seed)?,
        &["T", "success", "fidelity"],
    )?;
    for p in &fit.points {
        report.row([num(p.transmittance), num(p.success), opt_num(p.fidelity)])?;
    }
    report.footer("slope", num(fit.slope));
    report.footer("intercept", num(fit.intercept));
    Ok(Output::pass(report.render()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffConfig {
    #[serde(rename = "T")]
    pub t: f64,
    pub mu_grid: Vec<f64>,
}

pub fn tradeoff(cfg: &TradeoffConfig, seed: u64) -> Result<Output> {
    if cfg.mu_grid.iter().any(|&m| !(m.is_finite() && m >= 0.0)) {
        bail!("mu values must be finite and >= 0");
    }
    let s = sweep_tradeoff(cfg.t, &cfg.mu_grid)?;
    let mut report = Report::new(
        RunManifest::new("tradeoff", cfg, seed)?,
        &["mu", "F", "efficiency", "G"],
    )?;
    for p in &s.points {
        report.row([num(p.mu), num(p.fidelity), num(p.efficiency), num(p.g)])?;
    }
    report.footer("fidelity_monotone", s.fidelity_monotone.to_string());
    Ok(Output::pass(report.render()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub m_grid: Vec<f64>,
    pub l_grid: Vec<f64>,
    pub a_grid: Vec<f64>,
    pub cutoff: usize,
    pub tolerance: f64,
}

pub fn oracle_check(cfg: &OracleConfig, seed: u64) -> Result<Output> {
    if cfg.cutoff < 2 {
        bail!("cutoff must be >= 2");
    }
    let grid: Vec<(f64, f64, f64)> = cfg
        .m_grid
        .iter()
        .flat_map(|&m| {
            cfg.l_grid
                .iter()
                .flat_map(move |&l| cfg.a_grid.iter().map(move |&a| (m, l, a)))
        })
        .collect();
    if grid.is_empty() {
        bail!("empty oracle grid");
    }
    let rows = grid
        .par_iter()
        .map(|&(m, l, a)| Ok((m, l, a, fock_oracle(m, l, a, cfg.cutoff)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut report = Report::new(
        RunManifest::new("oracle-check", cfg, seed)?,
        &[
            "m", "l", "a", "g_closed", "g_oracle", "h_closed", "h_oracle", "deviation",
            "truncation_deficit",
        ],
    )?;
    let mut worst: f64 = 0.0;
    let mut warnings = Vec::new();
    for (m, l, a, o) in rows {
        let (g, h) = (g_prob(m, l, a), h_prob(m, l, a));
        let dev = (g - o.g).abs().max((h - o.h).abs());
        worst = worst.max(dev);
        if o.truncation_deficit > cfg.tolerance {
            warnings.push(format!(
                "truncation: cutoff {} drops {:.3e} of the reference at m={m} l={l} a={a}",
                cfg.cutoff, o.truncation_deficit
            ));
        }
        report.row([
            num(m),
            num(l),
            num(a),
            num(g),
            num(o.g),
            num(h),
            num(o.h),
            num(dev),
            num(o.truncation_deficit),
        ])?;
    }
    let pass = worst <= cfg.tolerance;
    report.footer("max_deviation", num(worst));
    report.footer("pass", pass.to_string());
    if !warnings.is_empty() {
        report.footer("truncation_warnings", warnings.len().to_string());
    }
    Ok(Output {
        text: report.render()?,
        verdict: if pass { Verdict::Pass } else { Verdict::CheckFailed },
        warnings,
    })
}

/// Re-executes the command recorded in a manifest.
pub fn replay(manifest: &RunManifest) -> Result<Output> {
    let seed = manifest.seed;
    let config = manifest.config.clone();
    match manifest.command.as_str() {
        "reciprocity" => reciprocity(&serde_json::from_value(config)?, seed),
        "protocol" => protocol(&serde_json::from_value(config)?, seed),
        "sweep" => sweep(&serde_json::from_value(config)?, seed),
        "tradeoff" => tradeoff(&serde_json::from_value(config)?, seed),
        "oracle-check" => oracle_check(&serde_json::from_value(config)?, seed),
        other => bail!("unknown command '{other}' in manifest"),
    }
}
