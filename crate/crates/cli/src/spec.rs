//! Declarative experiment specification: a JSON document naming the runs
//! (workload, instance, machine configuration, placement) plus output
//! options. Command-line flags override individual fields.

use anyhow::{bail, Context, Result};
use nexus_core::engine::Mode;
use nexus_core::workloads::Placement;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Json,
    Csv,
    Svg,
    Trace,
}

impl std::str::FromStr for Emit {
    type Err = String;
    fn from_str(s: &str) -> Result<Emit, String> {
        match s {
            "json" => Ok(Emit::Json),
            "csv" => Ok(Emit::Csv),
            "svg" => Ok(Emit::Svg),
            "trace" => Ok(Emit::Trace),
            other => Err(format!("unknown emit kind {other:?} (json|csv|svg|trace)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Spmv,
    Spmspm,
    Spadd,
    Sddmm,
    Matmul,
    /// The crafted load-imbalance SpMV instance: one output row receives
    /// more than half of all accumulations.
    SkewSpmv,
}

impl std::str::FromStr for Workload {
    type Err = String;
    fn from_str(s: &str) -> Result<Workload, String> {
        match s {
            "spmv" => Ok(Workload::Spmv),
            "spmspm" => Ok(Workload::Spmspm),
            "spadd" | "spm+spm" => Ok(Workload::Spadd),
            "sddmm" => Ok(Workload::Sddmm),
            "matmul" => Ok(Workload::Matmul),
            "skew_spmv" | "skew-spmv" => Ok(Workload::SkewSpmv),
            other => Err(format!(
                "unknown workload {other:?} (spmv|spmspm|spadd|sddmm|matmul|skew_spmv)"
            )),
        }
    }
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Spmv => "spmv",
            Workload::Spmspm => "spmspm",
            Workload::Spadd => "spadd",
            Workload::Sddmm => "sddmm",
            Workload::Matmul => "matmul",
            Workload::SkewSpmv => "skew_spmv",
        }
    }
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Nexus, Mode::Tia, Mode::TiaValiant]
}

fn default_mesh() -> String {
    "4x4".to_string()
}

fn default_rows() -> usize {
    32
}

fn default_cols() -> usize {
    32
}

fn default_depth() -> usize {
    8
}

fn default_density() -> f64 {
    0.2
}

fn default_ceiling() -> u64 {
    10_000_000
}

/// One experiment run; every mode listed expands into its own simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub workload: Workload,
    /// First (or mask) tensor from a Matrix Market file instead of the
    /// seeded random generator.
    #[serde(default)]
    pub mtx: Option<PathBuf>,
    /// Second CSR tensor for spmspm / spadd.
    #[serde(default)]
    pub mtx_b: Option<PathBuf>,
    #[serde(default = "default_rows")]
    pub rows: usize,
    #[serde(default = "default_cols")]
    pub cols: usize,
    /// Inner dimension for sddmm (the dense factor depth).
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_density")]
    pub density_b: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_mesh")]
    pub mesh: String,
    #[serde(default)]
    pub placement: Option<Placement>,
    #[serde(default)]
    pub tile_rows: Option<usize>,
    /// Off-chip loading bandwidth in bytes/cycle; absent is instantaneous.
    #[serde(default)]
    pub bandwidth: Option<u64>,
    #[serde(default = "default_ceiling")]
    pub cycle_ceiling: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub emit: Vec<Emit>,
    pub runs: Vec<RunSpec>,
}

pub fn parse_mesh(mesh: &str) -> Result<(usize, usize)> {
    let (w, h) = mesh
        .split_once(['x', 'X'])
        .with_context(|| format!("mesh must look like 4x4, got {mesh:?}"))?;
    let w: usize = w.trim().parse().context("mesh width")?;
    let h: usize = h.trim().parse().context("mesh height")?;
    Ok((w, h))
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<ExperimentSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read spec {}", path.display()))?;
        let spec: ExperimentSpec = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse spec {}", path.display()))?;
        Ok(spec)
    }

    /// Full validation before any simulation starts.
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            bail!("spec declares no runs");
        }
        for (i, run) in self.runs.iter().enumerate() {
            let tag = run
                .name
                .clone()
                .unwrap_or_else(|| format!("run {i} ({})", run.workload.name()));
            let (w, h) = parse_mesh(&run.mesh).with_context(|| tag.clone())?;
            if w == 0 || h == 0 || w * h > 16 {
                bail!("{tag}: mesh {w}x{h} is outside the 1..=16 PE range");
            }
            if run.rows == 0 || run.cols == 0 {
                bail!("{tag}: dimensions must be positive");
            }
            if !(run.density > 0.0 && run.density <= 1.0)
                || !(run.density_b > 0.0 && run.density_b <= 1.0)
            {
                bail!("{tag}: densities must lie in (0, 1]");
            }
            if run.modes.is_empty() {
                bail!("{tag}: no modes listed");
            }
            if run.cycle_ceiling == 0 {
                bail!("{tag}: cycle ceiling must be positive");
            }
            if let Some(t) = run.tile_rows {
                if t == 0 {
                    bail!("{tag}: tile_rows must be positive");
                }
                if run.workload != Workload::Spmv {
                    bail!("{tag}: row tiling is only wired up for spmv");
                }
            }
            if let Some(b) = run.bandwidth {
                if b == 0 {
                    bail!("{tag}: bandwidth must be positive");
                }
            }
            for path in [&run.mtx, &run.mtx_b].into_iter().flatten() {
                if !path.exists() {
                    bail!("{tag}: matrix file {} does not exist", path.display());
                }
            }
            if run.mtx_b.is_some()
                && !matches!(run.workload, Workload::Spmspm | Workload::Spadd)
            {
                bail!("{tag}: mtx_b only applies to spmspm and spadd");
            }
            if run.workload == Workload::SkewSpmv && run.mtx.is_some() {
                bail!("{tag}: skew_spmv builds its own matrix");
            }
        }
        Ok(())
    }
}
