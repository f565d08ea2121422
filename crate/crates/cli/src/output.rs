use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = concat!("dfsim ", env!("CARGO_PKG_VERSION"));

/// Written as the first line of every output, prefixed with `# `.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            tool_version: TOOL_VERSION.to_string(),
        })
    }

    pub fn header_line(&self) -> Result<String> {
        Ok(format!("# {}\n", serde_json::to_string(self)?))
    }

    pub fn parse_header(text: &str) -> Result<Self> {
        let first = text.lines().next().context("empty file")?;
        let json = first
            .strip_prefix("# ")
            .context("first line is not a manifest header")?;
        serde_json::from_str(json).context("malformed manifest header")
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Manifest line, a CSV table, then `# key=value` footer lines.
pub struct Report {
    manifest: RunManifest,
    table: csv::Writer<Vec<u8>>,
    footer: Vec<(String, String)>,
}

impl Report {
    pub fn new(manifest: RunManifest, header: &[&str]) -> Result<Self> {
        let mut table = csv::Writer::from_writer(Vec::new());
        table.write_record(header)?;
        Ok(Self {
            manifest,
            table,
            footer: Vec::new(),
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.table.write_record(fields)?;
        Ok(())
    }

    pub fn footer(&mut self, key: &str, value: impl Into<String>) {
        self.footer.push((key.to_string(), value.into()));
    }

    pub fn render(self) -> Result<String> {
        let mut out = self.manifest.header_line()?;
        out.push_str(&String::from_utf8(self.table.into_inner()?)?);
        for (k, v) in &self.footer {
            out.push_str(&format!("# {k}={v}\n"));
        }
        Ok(out)
    }
}

pub fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}
