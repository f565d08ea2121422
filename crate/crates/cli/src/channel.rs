//! Channel description files.
//!
//! ```toml
//! [[elements]]
//! theta = 0.3
//! gamma_s = 0.9
//! gamma_f = 0.8
//! phi = 1.2
//! ```
//!
//! or a bare transfer matrix as four `[re, im]` entries in the order
//! `m1, m2, m3, m4`:
//!
//! ```toml
//! matrix = [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use dfsim::jones::{BirefringentElement, ChannelSpec, TransferMatrix};
use dfsim::protocols::Channel;
use dfsim::C64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<Vec<BirefringentElement>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<[[f64; 2]; 4]>,
}

impl ChannelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading channel file {}", path.display()))?;
        let file: Self = toml::from_str(&text)
            .with_context(|| format!("parsing channel file {}", path.display()))?;
        file.to_channel()
            .with_context(|| format!("invalid channel in {}", path.display()))?;
        Ok(file)
    }

    pub fn to_channel(&self) -> Result<Channel> {
        match (&self.elements, &self.matrix) {
            (Some(e), None) => Ok(Channel::Elements(ChannelSpec::new(e.clone())?)),
            (None, Some(m)) => Ok(Channel::Matrix(matrix_from_pairs(m)?)),
            _ => bail!("a channel needs exactly one of `elements` or `matrix`"),
        }
    }
}

pub fn matrix_from_pairs(m: &[[f64; 2]; 4]) -> Result<TransferMatrix> {
    let e = m.map(|[re, im]| C64::new(re, im));
    Ok(TransferMatrix::from_entries(e)?)
}

/// Parses `re,im,re,im,re,im,re,im`. The matrix is not checked for
/// passivity so that deliberately unphysical overrides can be injected.
pub fn parse_matrix_arg(s: &str) -> Result<[[f64; 2]; 4]> {
    let v = parse_list(s)?;
    if v.len() != 8 {
        bail!("expected 8 numbers (re,im for m1..m4), got {}", v.len());
    }
    Ok([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]])
}

pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .with_context(|| format!("'{x}' is not a number"))
        })
        .collect()
}
