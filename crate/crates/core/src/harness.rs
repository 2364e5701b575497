//! Benchmark front end: command-line parameters, GEMM runs, sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::accel::{AccelModel, CostModel, WaitDiscipline};
use crate::batch::{self, Execution};
use crate::energy::{compute_energy, PowerModel};
use crate::engine::{parallel_for, ClockMode, EngineError, ExecConfig, RunReport};
use crate::kernels::{gemm_reference, verify, GemmProblem, KernelError, Matrix, TILE_COLS_ULTRASCALE, TILE_COLS_ZYNQ};
use crate::partitioner::SchedulerConfig;
use crate::trace::{write_trace, TraceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClockKind {
    Wall,
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WaitKind {
    Spin,
    Interrupt,
}

impl From<WaitKind> for WaitDiscipline {
    fn from(w: WaitKind) -> Self {
        match w {
            WaitKind::Spin => WaitDiscipline::Spin,
            WaitKind::Interrupt => WaitDiscipline::Interrupt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetName {
    Zynq,
    ZynqUltrascale,
}

/// Named modeled platform. Rates are multiply-accumulates per second so they
/// translate into iterations per second for any matrix shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub cpu_cores: usize,
    pub fc_units: usize,
    pub fc_macs_per_sec: f64,
    pub fc_overhead: f64,
    pub cc_macs_per_sec: f64,
    pub tile_cols: usize,
    pub power: PowerModel,
}

impl Preset {
    /// Modeled: one FC twice as fast as one of two CPU cores.
    pub const ZYNQ: Preset = Preset {
        name: "zynq",
        cpu_cores: 2,
        fc_units: 1,
        fc_macs_per_sec: 2.0e8,
        fc_overhead: 2.0e-4,
        cc_macs_per_sec: 1.0e8,
        tile_cols: TILE_COLS_ZYNQ,
        power: PowerModel::ZYNQ,
    };

    /// Modeled: four FCs, each twice as fast as one of four CPU cores. Units
    /// scale linearly; shared-bandwidth effects are not modeled.
    pub const ZYNQ_ULTRASCALE: Preset = Preset {
        name: "zynq-ultrascale",
        cpu_cores: 4,
        fc_units: 4,
        fc_macs_per_sec: 8.0e8,
        fc_overhead: 1.0e-4,
        cc_macs_per_sec: 4.0e8,
        tile_cols: TILE_COLS_ULTRASCALE,
        power: PowerModel::ZYNQ_ULTRASCALE,
    };

    pub fn get(name: PresetName) -> Preset {
        match name {
            PresetName::Zynq => Preset::ZYNQ,
            PresetName::ZynqUltrascale => Preset::ZYNQ_ULTRASCALE,
        }
    }
}

/// `CC:FC` pairs, comma separated.
#[derive(Debug, Clone, PartialEq)]
struct ConfigList(Vec<(usize, usize)>);

fn parse_configs(s: &str) -> Result<ConfigList, String> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (c, f) = pair
                .split_once(':')
                .ok_or_else(|| format!("`{pair}` is not CC:FC"))?;
            let c = c.trim().parse().map_err(|_| format!("bad CC count in `{pair}`"))?;
            let f = f.trim().parse().map_err(|_| format!("bad FC count in `{pair}`"))?;
            Ok((c, f))
        })
        .collect::<Result<_, String>>()
        .map(ConfigList)
}

#[derive(Debug, Parser)]
#[command(
    name = "hetfor",
    about = "Heterogeneous CPU + modeled-FPGA GEMM benchmark",
    long_about = None
)]
struct Cli {
    /// CPU tokens (cores).
    num_cpu_t: usize,
    /// Accelerator tokens (FPGA compute units); 0 disables the accelerator.
    num_fpga_t: usize,
    /// Iterations per accelerator chunk.
    fpga_chunksize: usize,
    /// Rows of A and C (the iteration count); also the default for --inner and --cols.
    #[arg(long, default_value_t = 1024)]
    matrix: usize,
    /// Columns of A / rows of B.
    #[arg(long)]
    inner: Option<usize>,
    /// Columns of B and C.
    #[arg(long)]
    cols: Option<usize>,
    /// Accelerator column-tile width [default: from preset].
    #[arg(long)]
    tile_cols: Option<usize>,
    #[arg(long, value_enum, default_value_t = ClockKind::Wall)]
    clock: ClockKind,
    #[arg(long, value_enum, default_value_t = WaitKind::Interrupt)]
    wait: WaitKind,
    /// FC iterations per second [default: from preset and matrix shape].
    #[arg(long)]
    fc_throughput: Option<f64>,
    /// FC seconds per offload [default: from preset].
    #[arg(long)]
    fc_overhead: Option<f64>,
    /// FC units available [default: from preset].
    #[arg(long)]
    fc_units: Option<usize>,
    /// CPU iterations per second in virtual time [default: from preset and matrix shape].
    #[arg(long)]
    cc_throughput: Option<f64>,
    /// CPU seconds per chunk in virtual time.
    #[arg(long, default_value_t = 0.0)]
    cc_overhead: f64,
    /// Whether FC units fire completion notifications.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    enable_irq: u8,
    #[arg(long, default_value_t = 1.0)]
    f_init: f64,
    #[arg(long, default_value_t = 0.5)]
    f_alpha: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trace CSV output.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetName::Zynq)]
    preset: PresetName,
    /// Sweep these accelerator chunk sizes instead of a single run (comma separated).
    #[arg(long, value_delimiter = ',')]
    sweep_chunks: Option<Vec<usize>>,
    /// Sweep these CC:FC token pairs, e.g. `2:0,0:1,2:1` [default: the positional pair].
    #[arg(long, value_parser = parse_configs)]
    sweep_configs: Option<ConfigList>,
    /// Sweep results CSV [default: stdout].
    #[arg(long)]
    sweep_out: Option<PathBuf>,
}

/// Validated parameters of one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    pub num_cpu_t: usize,
    pub num_fpga_t: usize,
    pub fpga_chunksize: usize,
    pub matrix_size: usize,
    pub inner: usize,
    pub cols: usize,
    pub tile_cols: usize,
    pub clock: ClockKind,
    pub wait: WaitDiscipline,
    pub fc_units: usize,
    /// Overrides the preset-derived FC rate (iterations per second).
    pub fc_throughput: Option<f64>,
    pub fc_overhead: f64,
    pub enable_irq: bool,
    /// Overrides the preset-derived CPU rate (iterations per second).
    pub cc_throughput: Option<f64>,
    pub cc_overhead: f64,
    pub f_init: f64,
    pub f_alpha: f64,
    pub seed: u64,
    pub trace: Option<PathBuf>,
    pub preset: Preset,
    pub power: PowerModel,
}

/// Parsed command line: one run, or a sweep around a base run.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Run(RunParams),
    Sweep {
        base: RunParams,
        grid: SweepGrid,
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum UsageError {
    /// `--help` output; not an error for the caller to report.
    #[error("{0}")]
    Help(String),
    #[error("{0}")]
    Clap(String),
    #[error("{0}")]
    Invalid(String),
}

impl UsageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            UsageError::Help(_) => 0,
            _ => 2,
        }
    }
}

impl RunParams {
    /// Defaults of `preset` with the given token counts.
    pub fn new(preset: Preset, num_cpu_t: usize, num_fpga_t: usize, fpga_chunksize: usize) -> Self {
        Self {
            num_cpu_t,
            num_fpga_t,
            fpga_chunksize,
            matrix_size: 1024,
            inner: 1024,
            cols: 1024,
            tile_cols: preset.tile_cols,
            clock: ClockKind::Wall,
            wait: WaitDiscipline::Interrupt,
            fc_units: preset.fc_units,
            fc_throughput: None,
            fc_overhead: preset.fc_overhead,
            enable_irq: true,
            cc_throughput: None,
            cc_overhead: 0.0,
            f_init: 1.0,
            f_alpha: 0.5,
            seed: 1,
            trace: None,
            preset,
            power: preset.power,
        }
    }

    /// Square `n x n` problem.
    pub fn with_matrix(mut self, n: usize) -> Self {
        self.matrix_size = n;
        self.inner = n;
        self.cols = n;
        self
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError::Invalid(m));
        if self.num_cpu_t + self.num_fpga_t == 0 {
            return bad("no resources: num_cpu_t + num_fpga_t must be >= 1".into());
        }
        if self.num_fpga_t > self.fc_units {
            return bad(format!(
                "num_fpga_t = {} exceeds the {} available FC units",
                self.num_fpga_t, self.fc_units
            ));
        }
        if self.num_fpga_t > 0 && self.fpga_chunksize == 0 {
            return bad("fpga_chunksize must be >= 1 when num_fpga_t > 0".into());
        }
        if self.matrix_size == 0 || self.inner == 0 || self.cols == 0 {
            return bad("matrix dimensions must be >= 1".into());
        }
        if self.tile_cols == 0 {
            return bad("tile-cols must be >= 1".into());
        }
        if self.wait == WaitDiscipline::Interrupt && !self.enable_irq {
            return bad("--wait=interrupt requires --enable-irq=1".into());
        }
        if !(self.f_init.is_finite() && self.f_init > 0.0) {
            return bad(format!("f-init must be > 0, got {}", self.f_init));
        }
        if !(0.0..=1.0).contains(&self.f_alpha) {
            return bad(format!("f-alpha must be in [0, 1], got {}", self.f_alpha));
        }
        for (name, v) in [
            ("fc-throughput", self.fc_throughput),
            ("cc-throughput", self.cc_throughput),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return bad(format!("{name} must be > 0, got {v}"));
                }
            }
        }
        for (name, v) in [("fc-overhead", self.fc_overhead), ("cc-overhead", self.cc_overhead)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.fc_units == 0 {
            return bad("fc-units must be >= 1".into());
        }
        Ok(())
    }

    fn macs_per_row(&self) -> f64 {
        (self.inner * self.cols) as f64
    }

    pub fn fc_cost(&self) -> CostModel {
        CostModel::new(
            self.fc_throughput
                .unwrap_or(self.preset.fc_macs_per_sec / self.macs_per_row()),
            self.fc_overhead,
        )
    }

    pub fn cc_cost(&self) -> CostModel {
        CostModel::new(
            self.cc_throughput
                .unwrap_or(self.preset.cc_macs_per_sec / self.macs_per_row()),
            self.cc_overhead,
        )
    }

    pub fn accel_model(&self) -> AccelModel {
        AccelModel {
            units: self.fc_units,
            cost: self.fc_cost(),
            enable: self.enable_irq,
        }
    }

    pub fn exec_config(&self) -> ExecConfig {
        let clock = match self.clock {
            ClockKind::Wall => ClockMode::WallClock,
            ClockKind::Virtual => ClockMode::VirtualTime { cpu: self.cc_cost() },
        };
        ExecConfig {
            clock,
            accel: self.accel_model(),
            wait: self.wait,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            f_init: self.f_init,
            f_alpha: self.f_alpha,
            ..SchedulerConfig::new(
                self.matrix_size,
                self.num_cpu_t,
                self.num_fpga_t,
                self.fpga_chunksize,
            )
        }
    }
}

/// Parses `argv` (including the program name).
pub fn parse_command<I, T>(argv: I) -> Result<Command, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            UsageError::Help(e.render().to_string())
        }
        _ => UsageError::Clap(e.render().to_string()),
    })?;
    let preset = Preset::get(cli.preset);
    let matrix = cli.matrix;
    let params = RunParams {
        num_cpu_t: cli.num_cpu_t,
        num_fpga_t: cli.num_fpga_t,
        fpga_chunksize: cli.fpga_chunksize,
        matrix_size: matrix,
        inner: cli.inner.unwrap_or(matrix),
        cols: cli.cols.unwrap_or(matrix),
        tile_cols: cli.tile_cols.unwrap_or(preset.tile_cols),
        clock: cli.clock,
        wait: cli.wait.into(),
        fc_units: cli.fc_units.unwrap_or(preset.fc_units),
        fc_throughput: cli.fc_throughput,
        fc_overhead: cli.fc_overhead.unwrap_or(preset.fc_overhead),
        enable_irq: cli.enable_irq == 1,
        cc_throughput: cli.cc_throughput,
        cc_overhead: cli.cc_overhead,
        f_init: cli.f_init,
        f_alpha: cli.f_alpha,
        seed: cli.seed,
        trace: cli.trace,
        preset,
        power: preset.power,
    };
    params.validate()?;
    match (cli.sweep_chunks, cli.sweep_configs) {
        (None, None) => Ok(Command::Run(params)),
        (chunks, configs) => {
            let grid = SweepGrid {
                chunk_sizes: chunks.unwrap_or_else(|| vec![params.fpga_chunksize]),
                configs: configs.map(|c| c.0).unwrap_or_else(|| vec![(params.num_cpu_t, params.num_fpga_t)]),
            };
            if grid.chunk_sizes.is_empty() || grid.configs.is_empty() {
                return Err(UsageError::Invalid("sweep grid must be nonempty".into()));
            }
            Ok(Command::Sweep {
                base: params,
                grid,
                out: cli.sweep_out,
            })
        }
    }
}

/// Parses a single-run command line.
pub fn parse_params<I, T>(argv: I) -> Result<RunParams, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match parse_command(argv)? {
        Command::Run(p) => Ok(p),
        Command::Sweep { base, .. } => Ok(base),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Output matrix elements per second.
    pub throughput: f64,
    pub wall_time: Duration,
    /// Joules, from the parametric power model.
    pub energy: f64,
    pub max_abs_diff: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub report: RunReport,
    pub metrics: Metrics,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Usage(#[from] UsageError),
    #[error("problem setup failed: {0}")]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("verification failed: max |C - C_ref| = {max_abs_diff}")]
    Verification {
        max_abs_diff: f32,
        report: Box<RunReport>,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Seeded GEMM inputs and their reference product.
pub struct Workload {
    pub a: Matrix,
    pub b: Matrix,
    pub reference: Matrix,
}

impl Workload {
    pub fn new(params: &RunParams) -> Result<Self, KernelError> {
        let a = Matrix::random(params.matrix_size, params.inner, params.seed)?;
        let b = Matrix::random(params.inner, params.cols, params.seed.wrapping_add(1))?;
        let reference = gemm_reference(&a, &b)?;
        Ok(Self { a, b, reference })
    }
}

/// Builds the GEMM problem, runs it, verifies it against the oracle, computes
/// metrics and writes the trace (also on failure, with whatever completed).
pub fn run_benchmark(params: &RunParams) -> Result<BenchOutcome, BenchError> {
    params.validate()?;
    let workload = Workload::new(params)?;
    run_on(params, &workload)
}

/// [`run_benchmark`] with inputs prepared once by the caller.
pub fn run_on(params: &RunParams, workload: &Workload) -> Result<BenchOutcome, BenchError> {
    params.validate()?;
    let tile = params.tile_cols.min(params.cols);
    let problem = GemmProblem::new(workload.a.clone(), workload.b.clone(), tile)?;
    let result = parallel_for(
        0,
        problem.rows(),
        &problem,
        &params.scheduler_config(),
        &params.exec_config(),
    );
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            if let (Some(path), EngineError::OperatorFailed(f)) = (&params.trace, &e) {
                write_trace(&f.partial.trace, path)?;
            }
            return Err(e.into());
        }
    };
    if let Some(path) = &params.trace {
        write_trace(&report.trace, path)?;
    }
    let max_abs_diff = verify(&problem.output(), &workload.reference)?;
    if max_abs_diff != 0.0 {
        return Err(BenchError::Verification {
            max_abs_diff,
            report: Box::new(report),
        });
    }
    let secs = report.wall_time.as_secs_f64();
    let elements = (params.matrix_size * params.cols) as f64;
    let metrics = Metrics {
        throughput: if secs > 0.0 { elements / secs } else { f64::INFINITY },
        wall_time: report.wall_time,
        energy: compute_energy(&report, &params.power),
        max_abs_diff,
    };
    Ok(BenchOutcome { report, metrics })
}

/// Cartesian grid of accelerator chunk sizes and `(CC, FC)` token pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub chunk_sizes: Vec<usize>,
    pub configs: Vec<(usize, usize)>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        self.chunk_sizes
            .iter()
            .flat_map(|&s| self.configs.iter().map(move |&(c, f)| (s, c, f)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fpga_chunksize: usize,
    pub num_cpu_t: usize,
    pub num_fpga_t: usize,
    /// `Ok(metrics, final_f)` or the error message of a failed cell.
    pub outcome: Result<(Metrics, f64), String>,
}

pub const SWEEP_HEADER: [&str; 9] = [
    "fpga_chunksize",
    "num_cpu_t",
    "num_fpga_t",
    "status",
    "wall_time",
    "throughput",
    "energy",
    "final_f",
    "error",
];

/// Runs every grid cell. Virtual-time cells are independent and go through
/// [`batch::map`]; wall-clock cells always run one at a time so they do not
/// disturb each other's timings. Failed cells become error rows.
pub fn sweep(grid: &SweepGrid, base: &RunParams, exec: Execution) -> Result<Vec<SweepRow>, BenchError> {
    let workload = Workload::new(base)?;
    let exec = match base.clock {
        ClockKind::Virtual => exec,
        ClockKind::Wall => Execution::Sequential,
    };
    let cells = grid.cells();
    Ok(batch::map(&cells, exec, |&(s_f, cc, fc)| {
        let params = RunParams {
            fpga_chunksize: s_f,
            num_cpu_t: cc,
            num_fpga_t: fc,
            trace: None,
            ..base.clone()
        };
        SweepRow {
            fpga_chunksize: s_f,
            num_cpu_t: cc,
            num_fpga_t: fc,
            outcome: run_on(&params, &workload)
                .map(|o| (o.metrics, o.report.final_f))
                .map_err(|e| e.to_string()),
        }
    }))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let head = [
            r.fpga_chunksize.to_string(),
            r.num_cpu_t.to_string(),
            r.num_fpga_t.to_string(),
        ];
        let tail = match &r.outcome {
            Ok((m, f)) => [
                "ok".to_string(),
                crate::trace::format_seconds(m.wall_time),
                m.throughput.to_string(),
                m.energy.to_string(),
                f.to_string(),
                String::new(),
            ],
            Err(e) => [
                "error".to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ],
        };
        w.write_record(head.iter().chain(tail.iter()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<(), BenchError> {
    let file = std::fs::File::create(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_sweep_csv(rows, std::io::BufWriter::new(file)).map_err(TraceError::from)?;
    Ok(())
}
