//! Run reports and their CSV files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use glance_core::metrics::DciReport;
use glance_core::osr::OsrThresholds;
use glance_core::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// One row of `leakage.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakageRow {
    pub variant: String,
    pub leakage: f64,
    pub rejection_rate: f64,
}

/// Encoder means with the identifiers needed to line them up with a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDump {
    pub z: Tensor,
    pub conditions: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// Named scalars in insertion order.
    pub values: Vec<(String, f64)>,
    pub dci: Option<DciReport>,
    pub latents: Option<LatentDump>,
    pub thresholds: Option<OsrThresholds>,
    pub leakage: Vec<LeakageRow>,
    /// Printed to stderr only, so report files stay byte-identical.
    pub elapsed: Duration,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunReport {
            config: config.clone(),
            values: Vec::new(),
            dci: None,
            latents: None,
            thresholds: None,
            leakage: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.values.push((key.into(), value));
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn leakage_of(&self, variant: &str) -> Option<&LeakageRow> {
        self.leakage.iter().find(|r| r.variant == variant)
    }

    /// Flat `key,value` text: the config echo, the seed, then every scalar.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in self.config.entries() {
            let _ = writeln!(out, "config.{k},{}", csv_field(&v));
        }
        let _ = writeln!(out, "seed,{}", self.config.seed);
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k},{v}");
        }
        if let Some(d) = &self.dci {
            let _ = writeln!(out, "dci.alignment,{}", d.alignment);
            let _ = writeln!(out, "dci.completeness,{}", d.completeness);
            let _ = writeln!(out, "dci.explicitness,{}", d.explicitness);
        }
        if let Some(t) = &self.thresholds {
            let _ = writeln!(out, "osr.quantile,{}", t.quantile);
            let _ = writeln!(out, "osr.eta_r,{}", t.eta_r);
            for (c, e) in &t.eta_y {
                let _ = writeln!(out, "osr.eta_y.{c},{e}");
            }
        }
        for r in &self.leakage {
            let _ = writeln!(out, "leakage.{},{}", r.variant, r.leakage);
            let _ = writeln!(out, "rejection_rate.{},{}", r.variant, r.rejection_rate);
        }
        out
    }

    /// Summary metrics, then `B` as a labeled block.
    pub fn dci_csv(&self) -> Option<String> {
        let d = self.dci.as_ref()?;
        Some(dci_csv(d))
    }

    pub fn latents_csv(&self) -> Option<String> {
        let l = self.latents.as_ref()?;
        let mut out = String::from("id");
        for j in 0..l.z.cols() {
            let _ = write!(out, ",z{j}");
        }
        out.push_str(",condition,label\n");
        for i in 0..l.z.rows() {
            let _ = write!(out, "{i}");
            for v in l.z.row(i) {
                let _ = write!(out, ",{v}");
            }
            let label = l.labels[i].map(|y| y.to_string()).unwrap_or_default();
            let _ = writeln!(out, ",{},{label}", l.conditions[i]);
        }
        Some(out)
    }

    pub fn thresholds_csv(&self) -> Option<String> {
        let t = self.thresholds.as_ref()?;
        let mut out = String::from("class,eta_y\n");
        for (c, e) in &t.eta_y {
            let _ = writeln!(out, "{c},{e}");
        }
        let _ = writeln!(out, "eta_r,{}", t.eta_r);
        let _ = writeln!(out, "quantile,{}", t.quantile);
        Some(out)
    }

    pub fn leakage_csv(&self) -> Option<String> {
        if self.leakage.is_empty() {
            return None;
        }
        let mut out = String::from("variant,leakage,rejection_rate\n");
        for r in &self.leakage {
            let _ = writeln!(out, "{},{},{}", r.variant, r.leakage, r.rejection_rate);
        }
        Some(out)
    }

    /// Writes `report.csv` and whichever of the other files apply.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_file(&dir.join("report.csv"), &self.report_csv())?;
        for (name, body) in [
            ("dci.csv", self.dci_csv()),
            ("latents.csv", self.latents_csv()),
            ("thresholds.csv", self.thresholds_csv()),
            ("leakage.csv", self.leakage_csv()),
        ] {
            if let Some(body) = body {
                write_file(&dir.join(name), &body)?;
            }
        }
        Ok(())
    }
}

pub fn dci_csv(d: &DciReport) -> String {
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "alignment,{}", d.alignment);
    let _ = writeln!(out, "completeness,{}", d.completeness);
    let _ = writeln!(out, "explicitness,{}", d.explicitness);
    out.push('\n');
    let b = &d.importance;
    out.push_str("latent");
    for f in &b.factor_names {
        let _ = write!(out, ",{}", csv_field(f));
    }
    out.push_str(",rho,entropy\n");
    for (i, name) in b.latent_names.iter().enumerate() {
        out.push_str(&csv_field(name));
        for v in b.weights.row(i) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{}", d.latent_weights[i], d.latent_entropies[i]);
    }
    out
}

pub(crate) fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parses `report.csv` back into `(key, value)` text pairs.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text.lines();
    if lines.next() != Some("key,value") {
        return Err(CliError::Data("report.csv must start with key,value".into()));
    }
    lines
        .map(|l| {
            let (k, v) = l.split_once(',').ok_or_else(|| CliError::Data(format!("malformed report line {l:?}")))?;
            let v = match v.strip_prefix('"').and_then(|v| v.strip_suffix('"')) {
                Some(inner) => inner.replace("\"\"", "\""),
                None => v.to_string(),
            };
            Ok((k.to_string(), v))
        })
        .collect()
}

/// Recovers the config echoed in `report.csv`.
pub fn config_from_report(text: &str) -> Result<ExperimentConfig> {
    let pairs = parse_report_csv(text)?;
    let kind = pairs
        .iter()
        .find(|(k, _)| k == "config.experiment")
        .ok_or_else(|| CliError::Data("report has no config echo".into()))?
        .1
        .parse()
        .map_err(|e| CliError::config("experiment", e))?;
    let mut cfg = ExperimentConfig::defaults(kind);
    for (k, v) in &pairs {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}
