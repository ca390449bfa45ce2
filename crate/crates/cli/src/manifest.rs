//! Per-run manifest written as TOML.

use std::path::Path;

use moep_lrmf::bench::Measures;
use moep_lrmf::em::{EmConfig, EmDiagnostics, EmResult};
use moep_lrmf::mrf::{GridShape, MrfConfig};
use serde::{Deserialize, Serialize};

use crate::io::write_text;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch when the manifest was written.
    pub created: u64,
    pub config: EmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrf: Option<MrfSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection: Vec<SelectionRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunRecord>,
    #[serde(default)]
    pub timings: Vec<Timing>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrfSection {
    pub grid: GridShape,
    pub settings: MrfConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub regimes: Vec<String>,
    pub methods: Vec<String>,
    pub replicates: usize,
    /// Penalty used per regime, in the order of `regimes`.
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub lambda: f64,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_hat: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub p: f64,
    pub eta: f64,
    pub pi: f64,
    /// Sum of the responsibilities of this component.
    pub mass: f64,
    /// Entries whose largest responsibility is this component.
    pub hard_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub k_final: usize,
    pub converged: bool,
    pub restart: usize,
    pub log_likelihood: f64,
    pub components: Vec<ComponentRecord>,
    pub objective_trace: Vec<f64>,
    pub k_trace: Vec<usize>,
    pub diagnostics: EmDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measures: Option<Measures>,
}

impl RunRecord {
    pub fn from_result(label: &str, seed: u64, result: &EmResult) -> Self {
        let mass = result.resp.component_sums();
        let k = result.resp.n_components();
        let mut hard = vec![0usize; k];
        for idx in 0..result.resp.n_entries() {
            let row = result.resp.row(idx);
            let best = (0..k)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .expect("at least one component");
            hard[best] += 1;
        }
        let components = result
            .model
            .components()
            .iter()
            .zip(mass.iter().zip(&hard))
            .map(|(c, (&mass, &hard_count))| ComponentRecord {
                p: c.p,
                eta: c.eta,
                pi: c.pi,
                mass,
                hard_count,
            })
            .collect();
        Self {
            label: label.to_string(),
            seed,
            k_final: result.k_final(),
            converged: result.converged,
            restart: result.restart,
            log_likelihood: result.log_likelihood,
            components,
            objective_trace: result.objective_trace.clone(),
            k_trace: result.k_trace.clone(),
            diagnostics: result.diagnostics.clone(),
            measures: None,
        }
    }
}

impl RunManifest {
    pub fn new(command: &str, config: &EmConfig) -> Self {
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            created,
            config: config.clone(),
            mrf: None,
            bench: None,
            selection: Vec::new(),
            runs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Io(format!("cannot encode manifest: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("cannot parse manifest: {e}")))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_text(&dir.join("manifest.toml"), &self.to_toml()?)
    }
}
