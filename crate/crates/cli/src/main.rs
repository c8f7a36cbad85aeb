//! Experiment runner: builds workload instances, compiles and simulates
//! them across execution modes, and emits the metric documents the
//! evaluation figures are drawn from.

mod spec;
mod svg;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use nexus_core::engine::{run_tiled, Machine, Mode, Outcome, SimConfig, SimStats};
use nexus_core::tensor::mtx::read_mtx;
use nexus_core::tensor::CsrMatrix;
use nexus_core::workloads::{
    build_dense_matmul, build_sddmm, build_spadd, build_spmspm, build_spmv, build_spmv_tiles,
    random_csr, random_dense, random_vector, seeded_rng, skew_spmv_instance, BuiltKernel,
    Placement,
};
use rayon::prelude::*;
use serde::Serialize;
use spec::{parse_mesh, Emit, ExperimentSpec, RunSpec, Workload};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "nexus",
    about = "Cycle-accurate Nexus Machine simulator and experiment runner"
)]
struct Cli {
    /// Experiment spec (JSON). Flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,

    /// Workload for a single ad-hoc run (spmv|spmspm|spadd|sddmm|matmul|skew_spmv).
    #[arg(long)]
    workload: Option<Workload>,

    /// Execution mode(s), comma separated (nexus|tia|tia_valiant).
    #[arg(long, value_delimiter = ',')]
    mode: Option<Vec<Mode>>,

    /// Mesh as WxH, at most 16 PEs.
    #[arg(long)]
    mesh: Option<String>,

    /// First-tensor density for random instances.
    #[arg(long)]
    density: Option<f64>,

    /// Second-tensor density for random instances.
    #[arg(long)]
    density_b: Option<f64>,

    /// Base RNG seed; NEXUS_SEED supplies it when unset.
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    rows: Option<usize>,

    #[arg(long)]
    cols: Option<usize>,

    /// Dense factor depth for sddmm.
    #[arg(long)]
    depth: Option<usize>,

    /// First (or mask) tensor from a Matrix Market file.
    #[arg(long)]
    mtx: Option<PathBuf>,

    /// Second tensor from a Matrix Market file (spmspm, spadd).
    #[arg(long)]
    mtx_b: Option<PathBuf>,

    /// Placement strategy (nnz_balanced|dissimilarity).
    #[arg(long)]
    placement: Option<Placement>,

    /// Rows per tile; runs the tiled engine path (spmv).
    #[arg(long)]
    tile_rows: Option<usize>,

    /// Off-chip loading bandwidth in bytes/cycle (default instantaneous).
    #[arg(long)]
    bandwidth: Option<u64>,

    /// Output directory for stats documents.
    #[arg(long, default_value = "nexus-out")]
    out: PathBuf,

    /// Outputs to write, comma separated (json|csv|svg|trace).
    #[arg(long, value_delimiter = ',')]
    emit: Option<Vec<Emit>>,

    #[arg(long)]
    cycle_ceiling: Option<u64>,
}

impl Cli {
    /// Assembles the effective spec: loaded from --spec with flag
    /// overrides, or a single run built from flags.
    fn to_spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => {
                let workload = self
                    .workload
                    .ok_or_else(|| anyhow!("either --spec or --workload is required"))?;
                ExperimentSpec {
                    out_dir: self.out.clone(),
                    emit: vec![Emit::Json],
                    runs: vec![RunSpec {
                        name: None,
                        workload,
                        mtx: None,
                        mtx_b: None,
                        rows: 32,
                        cols: 32,
                        depth: 8,
                        density: 0.2,
                        density_b: 0.2,
                        seed: None,
                        modes: vec![Mode::Nexus, Mode::Tia, Mode::TiaValiant],
                        mesh: "4x4".into(),
                        placement: None,
                        tile_rows: None,
                        bandwidth: None,
                        cycle_ceiling: 10_000_000,
                    }],
                }
            }
        };
        if self.spec.is_some() {
            spec.out_dir = self.out.clone();
        }
        if let Some(emit) = &self.emit {
            spec.emit = emit.clone();
        }
        let env_seed = std::env::var("NEXUS_SEED")
            .ok()
            .map(|s| s.parse::<u64>().context("NEXUS_SEED must be an integer"))
            .transpose()?;
        for run in &mut spec.runs {
            if let Some(w) = self.workload {
                run.workload = w;
            }
            if let Some(m) = &self.mode {
                run.modes = m.clone();
            }
            if let Some(mesh) = &self.mesh {
                run.mesh = mesh.clone();
            }
            if let Some(d) = self.density {
                run.density = d;
            }
            if let Some(d) = self.density_b {
                run.density_b = d;
            }
            if let Some(r) = self.rows {
                run.rows = r;
            }
            if let Some(c) = self.cols {
                run.cols = c;
            }
            if let Some(d) = self.depth {
                run.depth = d;
            }
            if let Some(p) = &self.mtx {
                run.mtx = Some(p.clone());
            }
            if let Some(p) = &self.mtx_b {
                run.mtx_b = Some(p.clone());
            }
            if let Some(p) = self.placement {
                run.placement = Some(p);
            }
            if let Some(t) = self.tile_rows {
                run.tile_rows = Some(t);
            }
            if let Some(b) = self.bandwidth {
                run.bandwidth = Some(b);
            }
            if let Some(c) = self.cycle_ceiling {
                run.cycle_ceiling = c;
            }
            if let Some(s) = self.seed {
                run.seed = Some(s);
            } else if run.seed.is_none() {
                run.seed = env_seed;
            }
        }
        Ok(spec)
    }
}

/// Resolved parameters recorded next to the stats so every run reproduces
/// from its document alone.
#[derive(Debug, Clone, Serialize)]
struct RunRecord {
    name: String,
    workload: &'static str,
    mode: Mode,
    mesh: String,
    rows: usize,
    cols: usize,
    depth: usize,
    density: f64,
    density_b: f64,
    seed: u64,
    placement: Placement,
    tile_rows: Option<usize>,
    bandwidth: Option<u64>,
    mtx: Option<PathBuf>,
    mtx_b: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunDocument {
    schema: &'static str,
    run: RunRecord,
    stats: SimStats,
}

struct Job {
    group: usize,
    record: RunRecord,
    run: RunSpec,
    mode: Mode,
}

struct JobOutput {
    record: RunRecord,
    stats: SimStats,
}

fn first_tensor(run: &RunSpec, seed: u64) -> Result<CsrMatrix> {
    match &run.mtx {
        Some(path) => Ok(read_mtx(path)?),
        None => {
            let mut rng = seeded_rng(seed);
            Ok(random_csr(&mut rng, run.rows, run.cols, run.density))
        }
    }
}

fn second_tensor(run: &RunSpec, rows: usize, cols: usize, seed: u64) -> Result<CsrMatrix> {
    match &run.mtx_b {
        Some(path) => Ok(read_mtx(path)?),
        None => {
            let mut rng = seeded_rng(seed ^ 0x9e37_79b9);
            Ok(random_csr(&mut rng, rows, cols, run.density_b))
        }
    }
}

fn build_kernel(
    run: &RunSpec,
    seed: u64,
    pes: usize,
    mem_words: usize,
    placement: Placement,
) -> Result<BuiltKernel> {
    match run.workload {
        Workload::Spmv => {
            let x = first_tensor(run, seed)?;
            let mut rng = seeded_rng(seed ^ 0x5eed);
            let y = random_vector(&mut rng, x.cols);
            Ok(build_spmv(&x, &y, pes, mem_words, placement)?)
        }
        Workload::SkewSpmv => {
            let (x, y) = skew_spmv_instance(seed);
            Ok(build_spmv(&x, &y, pes, mem_words, placement)?)
        }
        Workload::Spmspm => {
            let a = first_tensor(run, seed)?;
            let b = second_tensor(run, a.cols, run.cols, seed)?;
            Ok(build_spmspm(&a, &b, pes, mem_words, placement)?)
        }
        Workload::Spadd => {
            let a = first_tensor(run, seed)?;
            let b = second_tensor(run, a.rows, a.cols, seed)?;
            Ok(build_spadd(&a, &b, pes, mem_words, placement)?)
        }
        Workload::Sddmm => {
            let s = first_tensor(run, seed)?;
            let mut rng = seeded_rng(seed ^ 0xdd);
            let u = random_dense(&mut rng, s.rows, run.depth);
            let v = random_dense(&mut rng, run.depth, s.cols);
            Ok(build_sddmm(&s, &u, &v, pes, mem_words, placement)?)
        }
        Workload::Matmul => {
            let mut rng = seeded_rng(seed);
            let a = random_dense(&mut rng, run.rows, run.cols);
            let b = random_dense(&mut rng, run.cols, run.cols);
            Ok(build_dense_matmul(&a, &b, pes, mem_words, placement)?)
        }
    }
}

fn execute(job: &Job, emit: &[Emit], out_dir: &Path) -> Result<JobOutput> {
    let run = &job.run;
    let (w, h) = parse_mesh(&run.mesh)?;
    let config = SimConfig {
        width: w,
        height: h,
        mode: job.mode,
        seed: job.record.seed,
        cycle_ceiling: run.cycle_ceiling,
        bandwidth: run.bandwidth,
        tile_rows: run.tile_rows,
        trace: emit.contains(&Emit::Trace),
        ..SimConfig::default()
    };

    let mem_words = config.data_words;
    let pes = config.pe_count();
    let placement = job.record.placement;

    let (stats, trace_text) = if let Some(tile_rows) = run.tile_rows {
        let x = match run.workload {
            Workload::SkewSpmv => skew_spmv_instance(job.record.seed).0,
            _ => first_tensor(run, job.record.seed)?,
        };
        let y = match run.workload {
            Workload::SkewSpmv => skew_spmv_instance(job.record.seed).1,
            _ => {
                let mut rng = seeded_rng(job.record.seed ^ 0x5eed);
                random_vector(&mut rng, x.cols)
            }
        };
        let tiles = build_spmv_tiles(&x, &y, tile_rows, pes, mem_words, placement)?;
        let programs: Vec<_> = tiles.iter().map(|t| t.program.clone()).collect();
        let mut verify_err = None;
        let stats = run_tiled(&programs, &config, |i, machine| {
            if let Err(e) = tiles[i].verify(machine) {
                verify_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = verify_err {
            bail!("tile output mismatch: {e}");
        }
        if stats.outcome == Outcome::Timeout {
            bail!("hit the {}-cycle ceiling", run.cycle_ceiling);
        }
        (stats, String::new())
    } else {
        let built = build_kernel(run, job.record.seed, pes, mem_words, placement)?;
        let mut machine = Machine::new(config, &built.program);
        let outcome = machine.run_until_idle()?;
        if outcome == Outcome::Timeout {
            bail!("hit the {}-cycle ceiling", run.cycle_ceiling);
        }
        built.verify(&machine).map_err(|e| anyhow!(e))?;
        (machine.collect_stats(outcome), machine.trace_text())
    };

    let stem = format!("{}-{}", job.record.name, job.mode.name());
    let doc = RunDocument {
        schema: "nexus-run/1",
        run: job.record.clone(),
        stats: stats.clone(),
    };
    if emit.contains(&Emit::Json) {
        let path = out_dir.join(format!("{stem}.stats.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if emit.contains(&Emit::Csv) {
        std::fs::write(out_dir.join(format!("{stem}.busy.csv")), stats.busy_csv())?;
    }
    if emit.contains(&Emit::Svg) {
        std::fs::write(out_dir.join(format!("{stem}.heat.svg")), svg::emit_heatmap(&stats))?;
    }
    if emit.contains(&Emit::Trace) {
        std::fs::write(out_dir.join(format!("{stem}.trace.txt")), trace_text)?;
    }

    Ok(JobOutput {
        record: job.record.clone(),
        stats,
    })
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    mode: Mode,
    cycles: u64,
    utilization: f64,
    in_network_fraction: f64,
    congestion_stalls: u64,
    traffic_bits: u64,
    /// Cycles normalized to this group's nexus run.
    cycles_vs_nexus: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SummaryGroup {
    name: String,
    workload: String,
    rows: Vec<SummaryRow>,
    errors: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Summary {
    schema: &'static str,
    groups: Vec<SummaryGroup>,
}

fn summarize(spec: &ExperimentSpec, outputs: &[(usize, Result<JobOutput, String>)]) -> Summary {
    let mut groups = Vec::new();
    for (g, run) in spec.runs.iter().enumerate() {
        let name = run
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-{g}", run.workload.name()));
        let mut rows = Vec::new();
        let mut errors = Vec::new();
        let nexus_cycles = outputs.iter().find_map(|(grp, res)| match res {
            Ok(out) if *grp == g && out.record.mode == Mode::Nexus => Some(out.stats.cycles),
            _ => None,
        });
        for (grp, res) in outputs {
            if *grp != g {
                continue;
            }
            match res {
                Ok(out) => rows.push(SummaryRow {
                    mode: out.record.mode,
                    cycles: out.stats.cycles,
                    utilization: out.stats.fabric_utilization,
                    in_network_fraction: out.stats.in_network_fraction,
                    congestion_stalls: out.stats.stall_total,
                    traffic_bits: out.stats.traffic_bits,
                    cycles_vs_nexus: nexus_cycles
                        .map(|n| out.stats.cycles as f64 / n as f64),
                }),
                Err(e) => errors.push(e.clone()),
            }
        }
        groups.push(SummaryGroup {
            name,
            workload: run.workload.name().to_string(),
            rows,
            errors,
        });
    }
    Summary {
        schema: "nexus-summary/1",
        groups,
    }
}

fn print_summary(summary: &Summary) {
    for group in &summary.groups {
        println!("== {} ({})", group.name, group.workload);
        println!(
            "   {:<12} {:>10} {:>8} {:>10} {:>10} {:>12} {:>10}",
            "mode", "cycles", "vs nexus", "util", "in-net", "stalls", "traffic"
        );
        for row in &group.rows {
            println!(
                "   {:<12} {:>10} {:>8} {:>9.1}% {:>9.1}% {:>12} {:>10}",
                row.mode.name(),
                row.cycles,
                row.cycles_vs_nexus
                    .map_or_else(|| "-".into(), |r| format!("{r:.2}x")),
                row.utilization * 100.0,
                row.in_network_fraction * 100.0,
                row.congestion_stalls,
                row.traffic_bits
            );
        }
        for e in &group.errors {
            println!("   error: {e}");
        }
    }
}

fn run_experiment(spec: &ExperimentSpec) -> Result<bool> {
    std::fs::create_dir_all(&spec.out_dir)
        .with_context(|| format!("creating {}", spec.out_dir.display()))?;
    let emit = if spec.emit.is_empty() {
        vec![Emit::Json]
    } else {
        spec.emit.clone()
    };

    let mut jobs = Vec::new();
    for (g, run) in spec.runs.iter().enumerate() {
        let name = run
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-{g}", run.workload.name()));
        for &mode in &run.modes {
            let record = RunRecord {
                name: name.clone(),
                workload: run.workload.name(),
                mode,
                mesh: run.mesh.clone(),
                rows: run.rows,
                cols: run.cols,
                depth: run.depth,
                density: run.density,
                density_b: run.density_b,
                seed: run.seed.unwrap_or(1),
                placement: run.placement.unwrap_or(Placement::NnzBalanced),
                tile_rows: run.tile_rows,
                bandwidth: run.bandwidth,
                mtx: run.mtx.clone(),
                mtx_b: run.mtx_b.clone(),
            };
            jobs.push(Job {
                group: g,
                record,
                run: run.clone(),
                mode,
            });
        }
    }

    // Runs are independent machines; only the summary joins them.
    let outputs: Vec<(usize, Result<JobOutput, String>)> = jobs
        .par_iter()
        .map(|job| {
            let res = execute(job, &emit, &spec.out_dir).map_err(|e| {
                format!("{} [{}]: {e:#}", job.record.name, job.mode.name())
            });
            (job.group, res)
        })
        .collect();

    let summary = summarize(spec, &outputs);
    std::fs::write(
        spec.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    print_summary(&summary);

    let failures: Vec<_> = outputs.iter().filter_map(|(_, r)| r.as_ref().err()).collect();
    for f in &failures {
        eprintln!("run failed: {f}");
    }
    Ok(failures.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let spec = match cli.to_spec().and_then(|s| {
        s.validate()?;
        Ok(s)
    }) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("invalid experiment spec: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&spec) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("experiment failed: {e:#}");
            ExitCode::from(1)
        }
    }
}
