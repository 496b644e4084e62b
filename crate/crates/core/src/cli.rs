//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 internal failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, generate, random_filter};
use crate::ecr::{ecr_convert_with, ecr_spmv_conv_with};
use crate::execmodel::{
    plan_ecr, plan_pecr, CapacityWarning, ExecConfig, Grid, DEFAULT_SHARED_MEMORY_BUDGET,
    WORKERS_ENV,
};
use crate::metrics::{
    theta, traffic_fused, traffic_separate, OpCount, TrafficReport, ELEMENT_BYTES,
};
use crate::pecr::{pecr_conv_pool_with, pecr_convert_with, pecr_tiling};
use crate::pipeline::{forward, load_network, Method};
use crate::tensor::{
    dense_conv, im2col_extend, pool, relu, sparsity, ConvConfig, ConvGeometry, ConvPoolGeometry,
    FeatureMap, Filter, PoolConfig, PoolMode,
};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "sparseconv",
    version,
    about = "Sparse convolution with ECR/PECR formats"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sparse feature map.
    Gen(GenArgs),
    /// Run one convolution layer.
    Conv(ConvArgs),
    /// Run convolution + ReLU + pooling, fused or as separate passes.
    Convpool(ConvPoolArgs),
    /// Run a grid of benchmark points and write a CSV.
    Sweep(SweepArgs),
    /// Raw and im2col sparsity of every map in a directory.
    Analyze(AnalyzeArgs),
    /// Run a network described by a JSON file.
    Forward(ForwardArgs),
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    /// Worker threads for the simulated grid.
    #[arg(long, env = WORKERS_ENV, default_value_t = 1)]
    pub workers: usize,
    /// Shared-memory budget per block in bytes.
    #[arg(long, default_value_t = DEFAULT_SHARED_MEMORY_BUDGET)]
    pub shared_memory: u64,
}

impl ExecArgs {
    fn config(&self) -> Result<ExecConfig> {
        Ok(ExecConfig::new(self.workers)?.with_budget(self.shared_memory))
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path (`.csv` writes CSV); FMAP bytes go to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvMethodArg {
    Dense,
    Ecr,
}

#[derive(Debug, Args)]
pub struct ConvArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Kernel stored as a feature map (channels must match the input).
    #[arg(long)]
    pub kernel: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_enum, default_value_t = ConvMethodArg::Ecr)]
    pub method: ConvMethodArg,
    #[command(flatten)]
    pub exec: ExecArgs,
    /// JSON run report; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvPoolMethodArg {
    DenseSeparate,
    Pecr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolModeArg {
    Max,
    Mean,
}

impl From<PoolModeArg> for PoolMode {
    fn from(m: PoolModeArg) -> Self {
        match m {
            PoolModeArg::Max => PoolMode::Max,
            PoolModeArg::Mean => PoolMode::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConvPoolArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub kernel: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 2)]
    pub pool_h: usize,
    #[arg(long, default_value_t = 2)]
    pub pool_w: usize,
    #[arg(long, default_value_t = 1)]
    pub pool_stride: usize,
    #[arg(long, value_enum, default_value_t = PoolModeArg::Max)]
    pub pool_mode: PoolModeArg,
    #[arg(long, value_enum, default_value_t = ConvPoolMethodArg::Pecr)]
    pub method: ConvPoolMethodArg,
    #[command(flatten)]
    pub exec: ExecArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Directory of `.fmap` / `.csv` maps.
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Dense,
    Ecr,
    Pecr,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Dense => Method::Dense,
            MethodArg::Ecr => Method::Ecr,
            MethodArg::Pecr => Method::Pecr,
        }
    }
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Pecr)]
    pub method: MethodArg,
    #[command(flatten)]
    pub exec: ExecArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDims {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolConfig>,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// JSON summary of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub method: String,
    pub dims: ReportDims,
    pub workers: usize,
    /// Informational only; depends on the host.
    pub wall_time_ns: u64,
    pub ops: OpCount,
    pub traffic: TrafficReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_warning: Option<CapacityWarning>,
    /// SHA-256 over the output shape and values (zeros canonicalized).
    pub checksum: String,
    pub output_sparsity: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Hex SHA-256 of `channels, height, width` (u32 LE) followed by the values
/// as f32 LE with `-0.0` folded into `+0.0`.
pub fn output_checksum(map: &FeatureMap<f32>) -> String {
    let mut h = Sha256::new();
    for d in [map.channels(), map.height(), map.width()] {
        h.update((d as u32).to_le_bytes());
    }
    for &v in map.values() {
        let v = if v == 0.0 { 0.0f32 } else { v };
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Conv(a) => cmd_conv(&a).map(|_| 0),
        Command::Convpool(a) => cmd_convpool(&a).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| 0),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Forward(a) => cmd_forward(&a).map(|_| 0),
    }
}

fn write_report(report: &RunReport, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::from(e).at_path(p)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_map(map: &FeatureMap<f32>, path: &Path) -> Result<()> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        let file = std::fs::File::create(path).map_err(|e| Error::from(e).at_path(path))?;
        dataset::write_csv(file, map)
    } else {
        dataset::save(map, path)
    }
}

fn load_pair(input: &Path, kernel: &Path) -> Result<(FeatureMap<f32>, Filter<f32>)> {
    let map = dataset::load(input)?;
    let kernel = Filter::from_map(&dataset::load(kernel)?);
    Ok((map, kernel))
}

#[derive(Debug, Serialize)]
struct GenSummary {
    path: Option<PathBuf>,
    channels: usize,
    height: usize,
    width: usize,
    elements: usize,
    zeros: usize,
    sparsity: f64,
    seed: u64,
}

pub fn cmd_gen(a: &GenArgs) -> Result<i32> {
    let map = generate(a.height, a.width, a.channels, a.sparsity, a.seed)?;
    let summary = GenSummary {
        path: a.out.clone(),
        channels: map.channels(),
        height: map.height(),
        width: map.width(),
        elements: map.len(),
        zeros: map.len() - map.nonzero_count(),
        sparsity: sparsity(&map),
        seed: a.seed,
    };
    match &a.out {
        Some(p) => {
            write_map(&map, p)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        None => {
            let mut buf = Vec::new();
            dataset::write_fmap(&mut buf, &map)?;
            std::io::stdout().lock().write_all(&buf)?;
            eprintln!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(0)
}

fn warning_for(grid: &Grid, exec: &ExecConfig) -> Option<CapacityWarning> {
    (grid.shared_bytes_per_block > exec.shared_memory_budget).then_some(CapacityWarning {
        required_bytes: grid.shared_bytes_per_block,
        budget_bytes: exec.shared_memory_budget,
    })
}

pub fn cmd_conv(a: &ConvArgs) -> Result<RunReport> {
    let exec = a.exec.config()?;
    let (map, filter) = load_pair(&a.input, &a.kernel)?;
    let cfg = ConvConfig::new(a.stride)?;
    let g = ConvGeometry::of(&map, &filter, cfg)?;
    let grid = plan_ecr(&g)?;
    let mut ops = OpCount::ZERO;
    let start = Instant::now();
    let out = match a.method {
        ConvMethodArg::Dense => dense_conv(&map, &filter, cfg, Some(&mut ops))?,
        ConvMethodArg::Ecr => {
            let ecr = ecr_convert_with(&map, &filter, cfg, &exec)?;
            ecr_spmv_conv_with(&ecr, Some(&mut ops), &exec)?
        }
    };
    let wall = start.elapsed().as_nanos() as u64;
    let (inputs, outputs) = ((g.input_len() + g.window_len()) as u64, out.len() as u64);
    let traffic = TrafficReport {
        host_to_device_bytes: inputs * ELEMENT_BYTES,
        device_to_host_bytes: outputs * ELEMENT_BYTES,
        global_loads_bytes: inputs * ELEMENT_BYTES,
        global_stores_bytes: outputs * ELEMENT_BYTES,
    };
    if let Some(p) = &a.out {
        write_map(&out, p)?;
    }
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "conv".into(),
        method: format!("{:?}", a.method).to_lowercase(),
        dims: ReportDims {
            channels: g.channels,
            in_h: g.in_h,
            in_w: g.in_w,
            k_h: Some(g.k_h),
            k_w: Some(g.k_w),
            stride: Some(g.stride),
            pool: None,
            out_channels: out.channels(),
            out_h: out.height(),
            out_w: out.width(),
        },
        workers: exec.workers(),
        wall_time_ns: wall,
        ops,
        traffic,
        grid: Some(grid),
        capacity_warning: warning_for(&grid, &exec),
        checksum: output_checksum(&out),
        output_sparsity: sparsity(&out),
        notes: Vec::new(),
    };
    write_report(&report, a.report.as_deref())?;
    Ok(report)
}

pub fn cmd_convpool(a: &ConvPoolArgs) -> Result<RunReport> {
    let exec = a.exec.config()?;
    let (map, filter) = load_pair(&a.input, &a.kernel)?;
    let cfg = ConvConfig::new(a.stride)?;
    let pool_cfg = PoolConfig::new(a.pool_w, a.pool_h, a.pool_stride, a.pool_mode.into())?;
    let geom = ConvPoolGeometry {
        conv: ConvGeometry::of(&map, &filter, cfg)?,
        pool: pool_cfg,
    };
    geom.validate()?;
    let mut ops = OpCount::ZERO;
    let start = Instant::now();
    let (out, grid, traffic, method) = match a.method {
        ConvPoolMethodArg::DenseSeparate => {
            let conv = dense_conv(&map, &filter, cfg, Some(&mut ops))?;
            let out = pool(&relu(&conv), pool_cfg)?;
            (
                out,
                plan_ecr(&geom.conv)?,
                traffic_separate(&geom)?,
                "dense-separate",
            )
        }
        ConvPoolMethodArg::Pecr => {
            pecr_tiling(&geom)?;
            let p = pecr_convert_with(&map, &filter, cfg, pool_cfg, &exec)?;
            let out = pecr_conv_pool_with(&p, true, Some(&mut ops), &exec)?;
            (out, plan_pecr(&geom)?, traffic_fused(&geom)?, "pecr")
        }
    };
    let wall = start.elapsed().as_nanos() as u64;
    if let Some(p) = &a.out {
        write_map(&out, p)?;
    }
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "convpool".into(),
        method: method.into(),
        dims: ReportDims {
            channels: geom.conv.channels,
            in_h: geom.conv.in_h,
            in_w: geom.conv.in_w,
            k_h: Some(geom.conv.k_h),
            k_w: Some(geom.conv.k_w),
            stride: Some(geom.conv.stride),
            pool: Some(pool_cfg),
            out_channels: out.channels(),
            out_h: out.height(),
            out_w: out.width(),
        },
        workers: exec.workers(),
        wall_time_ns: wall,
        ops,
        traffic,
        grid: Some(grid),
        capacity_warning: warning_for(&grid, &exec),
        checksum: output_checksum(&out),
        output_sparsity: sparsity(&out),
        notes: Vec::new(),
    };
    write_report(&report, a.report.as_deref())?;
    Ok(report)
}

pub fn cmd_forward(a: &ForwardArgs) -> Result<RunReport> {
    let exec = a.exec.config()?;
    let net = load_network::<f32>(&a.net)?;
    let input = dataset::load(&a.input)?;
    let start = Instant::now();
    let r = forward(&net, &input, a.method.into(), &exec)?;
    let wall = start.elapsed().as_nanos() as u64;
    if let Some(p) = &a.out {
        write_map(&r.output, p)?;
    }
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "forward".into(),
        method: format!("{:?}", a.method).to_lowercase(),
        dims: ReportDims {
            channels: input.channels(),
            in_h: input.height(),
            in_w: input.width(),
            k_h: None,
            k_w: None,
            stride: None,
            pool: None,
            out_channels: r.output.channels(),
            out_h: r.output.height(),
            out_w: r.output.width(),
        },
        workers: exec.workers(),
        wall_time_ns: wall,
        ops: r.ops,
        traffic: r.traffic,
        grid: None,
        capacity_warning: None,
        checksum: output_checksum(&r.output),
        output_sparsity: sparsity(&r.output),
        notes: r
            .fallbacks
            .iter()
            .map(|i| format!("layer {i} ran with ecr"))
            .collect(),
    };
    write_report(&report, a.report.as_deref())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolPoint {
    pub size: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    pub sparsity: f64,
    #[serde(default = "default_one")]
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolPoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub sizes: Vec<usize>,
    pub kernels: Vec<usize>,
    #[serde(default = "one_vec")]
    pub strides: Vec<usize>,
    pub sparsities: Vec<f64>,
    #[serde(default = "one_vec")]
    pub channels: Vec<usize>,
    /// Pooling configs; an empty list means convolution only.
    #[serde(default)]
    pub pools: Vec<PoolPoint>,
}

fn one_vec() -> Vec<usize> {
    vec![1]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one")]
    pub repeats: usize,
    #[serde(default)]
    pub points: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<SweepGrid>,
}

impl SweepConfig {
    /// Explicit points first, then the grid in nested order
    /// size, kernel, stride, sparsity, channels, pool.
    pub fn expand(&self) -> Vec<SweepPoint> {
        let mut pts = self.points.clone();
        if let Some(g) = &self.grid {
            let pools: Vec<Option<PoolPoint>> = if g.pools.is_empty() {
                vec![None]
            } else {
                g.pools.iter().copied().map(Some).collect()
            };
            for &size in &g.sizes {
                for &kernel in &g.kernels {
                    for &stride in &g.strides {
                        for &sparsity in &g.sparsities {
                            for &channels in &g.channels {
                                for &pool in &pools {
                                    pts.push(SweepPoint {
                                        size,
                                        kernel,
                                        stride,
                                        sparsity,
                                        channels,
                                        pool,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        pts
    }
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub sparsity: f64,
    pub channels: usize,
    pub pool_size: Option<usize>,
    pub pool_stride: Option<usize>,
    pub seed: u64,
    pub dense_ns: u64,
    pub ecr_ns: u64,
    pub pecr_ns: Option<u64>,
    pub dense_muls: u64,
    pub dense_adds: u64,
    pub ecr_muls: u64,
    pub ecr_adds: u64,
    pub pecr_muls: Option<u64>,
    pub pecr_adds: Option<u64>,
    pub separate_transfer_bytes: u64,
    pub fused_transfer_bytes: Option<u64>,
    pub ecr_speedup: f64,
    pub pecr_speedup: Option<f64>,
    pub ecr_max_abs_diff: f64,
    pub pecr_max_abs_diff: Option<f64>,
}

fn timed<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<(R, u64)> {
    let mut best = u64::MAX;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = f()?;
        best = best.min(t.elapsed().as_nanos() as u64);
        last = Some(r);
    }
    Ok((last.expect("at least one repeat"), best.max(1)))
}

pub fn run_sweep_point(
    p: &SweepPoint,
    seed: u64,
    repeats: usize,
    exec: &ExecConfig,
) -> Result<SweepRow> {
    let map = generate(p.size, p.size, p.channels, p.sparsity, seed)?;
    let filter = random_filter(p.channels, p.kernel, p.kernel, seed ^ 0x5eed)?;
    let cfg = ConvConfig::new(p.stride)?;
    let conv = ConvGeometry::of(&map, &filter, cfg)?;
    let pool_cfg = p
        .pool
        .map(|q| PoolConfig::max(q.size, q.size, q.stride))
        .transpose()?;
    let geom = pool_cfg.map(|pool| ConvPoolGeometry { conv, pool });
    if let Some(g) = &geom {
        g.validate()?;
    }

    let finish = |conv_out: FeatureMap<f32>| -> Result<FeatureMap<f32>> {
        match pool_cfg {
            Some(c) => pool(&relu(&conv_out), c),
            None => Ok(conv_out),
        }
    };

    let ((dense_out, dense_ops), dense_ns) = timed(repeats, || {
        let mut ops = OpCount::ZERO;
        let out = finish(dense_conv(&map, &filter, cfg, Some(&mut ops))?)?;
        Ok((out, ops))
    })?;
    let ((ecr_out, ecr_ops), ecr_ns) = timed(repeats, || {
        let mut ops = OpCount::ZERO;
        let ecr = ecr_convert_with(&map, &filter, cfg, exec)?;
        let out = finish(ecr_spmv_conv_with(&ecr, Some(&mut ops), exec)?)?;
        Ok((out, ops))
    })?;
    let pecr = match &geom {
        Some(g) if pecr_tiling(g).is_ok() => Some(timed(repeats, || {
            let mut ops = OpCount::ZERO;
            let pm = pecr_convert_with(&map, &filter, cfg, g.pool, exec)?;
            let out = pecr_conv_pool_with(&pm, true, Some(&mut ops), exec)?;
            Ok((out, ops))
        })?),
        _ => None,
    };

    let separate_transfer_bytes = match &geom {
        Some(g) => traffic_separate(g)?.transfer_bytes(),
        None => {
            ((conv.input_len() + conv.window_len() + conv.out_w() * conv.out_h()) as u64)
                * ELEMENT_BYTES
        }
    };
    let fused_transfer_bytes = geom
        .as_ref()
        .map(|g| traffic_fused(g).map(|t| t.transfer_bytes()))
        .transpose()?;

    Ok(SweepRow {
        size: p.size,
        kernel: p.kernel,
        stride: p.stride,
        sparsity: p.sparsity,
        channels: p.channels,
        pool_size: p.pool.map(|q| q.size),
        pool_stride: p.pool.map(|q| q.stride),
        seed,
        dense_ns,
        ecr_ns,
        pecr_ns: pecr.as_ref().map(|(_, ns)| *ns),
        dense_muls: dense_ops.multiplications,
        dense_adds: dense_ops.additions,
        ecr_muls: ecr_ops.multiplications,
        ecr_adds: ecr_ops.additions,
        pecr_muls: pecr.as_ref().map(|((_, o), _)| o.multiplications),
        pecr_adds: pecr.as_ref().map(|((_, o), _)| o.additions),
        separate_transfer_bytes,
        fused_transfer_bytes,
        ecr_speedup: dense_ns as f64 / ecr_ns as f64,
        pecr_speedup: pecr.as_ref().map(|(_, ns)| dense_ns as f64 / *ns as f64),
        ecr_max_abs_diff: dense_out.max_abs_diff(&ecr_out)?,
        pecr_max_abs_diff: pecr
            .as_ref()
            .map(|((o, _), _)| dense_out.max_abs_diff(o))
            .transpose()?,
    })
}

const SWEEP_HEADER: [&str; 23] = [
    "size",
    "kernel",
    "stride",
    "sparsity",
    "channels",
    "pool_size",
    "pool_stride",
    "seed",
    "dense_ns",
    "ecr_ns",
    "pecr_ns",
    "dense_muls",
    "dense_adds",
    "ecr_muls",
    "ecr_adds",
    "pecr_muls",
    "pecr_adds",
    "separate_transfer_bytes",
    "fused_transfer_bytes",
    "ecr_speedup",
    "pecr_speedup",
    "ecr_max_abs_diff",
    "pecr_max_abs_diff",
];

pub fn cmd_sweep(a: &SweepArgs) -> Result<Vec<SweepRow>> {
    let exec = a.exec.config()?;
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::from(e).at_path(&a.config))?;
    let config: SweepConfig =
        serde_json::from_str(&text).map_err(|e| Error::from(e).at_path(&a.config))?;
    let points = config.expand();
    let rows = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            run_sweep_point(p, config.seed.wrapping_add(i as u64), config.repeats, &exec)
                .map_err(|e| Error::Config(format!("sweep point {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let file = std::fs::File::create(&a.out).map_err(|e| Error::from(e).at_path(&a.out))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub file: String,
    pub channels: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub raw_sparsity: Option<f64>,
    pub im2col_sparsity: Option<f64>,
    pub theta: Option<f64>,
    pub error: Option<String>,
}

fn profile_file(path: &Path, kernel: usize, cfg: ConvConfig) -> Result<ProfileRow> {
    let map = dataset::load(path)?;
    let raw = sparsity(&map);
    let extended = im2col_extend(&map, kernel, kernel, cfg)?.zero_fraction();
    Ok(ProfileRow {
        file: String::new(),
        channels: Some(map.channels()),
        height: Some(map.height()),
        width: Some(map.width()),
        raw_sparsity: Some(raw),
        im2col_sparsity: Some(extended),
        theta: Some(theta(raw, map.width())?),
        error: None,
    })
}

/// Returns 1 when every file failed, 0 otherwise.
pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<i32> {
    let cfg = ConvConfig::new(a.stride)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.inputs)
        .map_err(|e| Error::from(e).at_path(&a.inputs))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let row = match profile_file(path, a.kernel_size, cfg) {
            Ok(r) => ProfileRow { file: name, ..r },
            Err(e) => ProfileRow {
                file: name,
                channels: None,
                height: None,
                width: None,
                raw_sparsity: None,
                im2col_sparsity: None,
                theta: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }

    let file = std::fs::File::create(&a.out).map_err(|e| Error::from(e).at_path(&a.out))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record([
        "file",
        "channels",
        "height",
        "width",
        "raw_sparsity",
        "im2col_sparsity",
        "theta",
        "error",
    ])
    .map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;

    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} files could not be analyzed", rows.len());
    }
    Ok(if !rows.is_empty() && failed == rows.len() {
        1
    } else {
        0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_folds_negative_zero() {
        let a = FeatureMap::from_rows(&[&[0.0f32, 1.0]]).unwrap();
        let b = FeatureMap::from_rows(&[&[-0.0f32, 1.0]]).unwrap();
        assert_eq!(output_checksum(&a), output_checksum(&b));
        let c = FeatureMap::from_rows(&[&[0.0f32], &[1.0]]).unwrap();
        assert_ne!(output_checksum(&a), output_checksum(&c));
        assert_eq!(output_checksum(&a).len(), 64);
    }

    #[test]
    fn sweep_expansion_order() {
        let cfg: SweepConfig = serde_json::from_str(
            r#"{"points": [{"size": 8, "kernel": 3, "sparsity": 0.5}],
                "grid": {"sizes": [10, 12], "kernels": [3], "sparsities": [0.5, 0.9], "pools": [{"size": 2}]}}"#,
        )
        .unwrap();
        let pts = cfg.expand();
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0].size, 8);
        assert!(pts[0].pool.is_none());
        assert_eq!((pts[1].size, pts[1].sparsity), (10, 0.5));
        assert_eq!((pts[2].size, pts[2].sparsity), (10, 0.9));
        assert_eq!(pts[4].pool, Some(PoolPoint { size: 2, stride: 1 }));
    }

    #[test]
    fn sweep_point_counters() {
        let exec = ExecConfig::default();
        let p = |s| SweepPoint {
            size: 16,
            kernel: 3,
            stride: 1,
            sparsity: s,
            channels: 1,
            pool: Some(PoolPoint { size: 2, stride: 2 }),
        };
        let half = run_sweep_point(&p(0.5), 3, 1, &exec).unwrap();
        let dense = run_sweep_point(&p(0.9), 3, 1, &exec).unwrap();
        assert!(dense.ecr_muls < half.ecr_muls);
        assert_eq!(half.dense_muls, 14 * 14 * 9);
        assert!(half.ecr_max_abs_diff <= 1e-5);
        assert!(half.pecr_max_abs_diff.unwrap() <= 1e-5);
        assert!(half.fused_transfer_bytes.unwrap() < half.separate_transfer_bytes);
    }
}
