use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use countless::bounds::{compute_bounds, BoundInputs};
use countless::experiment::{self, ReportWriter, RunError, RunSpec, TraceSource};
use countless::metrics::{self, FORMAT_VERSION};
use countless::pipeline::{self, PipelineError, StageProgram};
use countless::sketch::{Scheme, Sketch, SketchConfig, DEFAULT_TOP_BITS};
use countless::traces::{self, KeyStyle, PacketRecord, Sampling, TraceError, ZipfSpec};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRACE: u8 = 3;

#[derive(Parser)]
#[command(name = "countless", version, about = "Split-counter sketch experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Zipf trace as CSV.
    Gen(GenArgs),
    /// Run the measurement grid and write per-epoch reports.
    Run(RunArgs),
    /// Measure update throughput.
    Bench(BenchArgs),
    /// Print the error-bound quantities for a sketch shape.
    Bounds(BoundsArgs),
    /// Check a stage program against the pipeline access rules.
    PipelineCheck(PipelineArgs),
    /// Report unused counter bits after encoding a trace.
    WastedBits(WastedArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KeyStyleArg {
    Sequential,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Apportioned,
    Iid,
}

#[derive(Args)]
struct ZipfArgs {
    /// Number of flows in the synthetic workload.
    #[arg(long, default_value_t = 200_000)]
    flows: u64,
    /// Packets in the synthetic workload.
    #[arg(long, default_value_t = 2_000_000)]
    packets: u64,
    /// Zipf skew.
    #[arg(long, default_value_t = 1.0)]
    skew: f64,
    #[arg(long, value_enum, default_value = "sequential")]
    key_style: KeyStyleArg,
    #[arg(long, value_enum, default_value = "apportioned")]
    sampling: SamplingArg,
}

impl ZipfArgs {
    fn spec(&self, seed: u64) -> ZipfSpec {
        ZipfSpec {
            n_flows: self.flows,
            total_packets: self.packets,
            skew: self.skew,
            seed,
            key_style: match self.key_style {
                KeyStyleArg::Sequential => KeyStyle::Sequential,
                KeyStyleArg::Random => KeyStyle::Random,
            },
            sampling: match self.sampling {
                SamplingArg::Apportioned => Sampling::Apportioned,
                SamplingArg::Iid => Sampling::Iid,
            },
        }
    }
}

#[derive(Args)]
struct TraceArgs {
    /// CSV packet trace (`.gz` accepted); a synthetic Zipf trace otherwise.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    zipf: ZipfArgs,
}

impl TraceArgs {
    fn source(&self) -> TraceSource {
        match &self.trace {
            Some(p) => TraceSource::Csv(p.clone()),
            None => TraceSource::Zipf(self.zipf.spec(0)),
        }
    }
}

#[derive(Args)]
struct ShapeArgs {
    /// Number of layers `d`.
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Expansion factor `r` between adjacent layers.
    #[arg(long, default_value_t = 4)]
    expansion: u64,
    /// Counter width of the top layer in bits.
    #[arg(long, default_value_t = DEFAULT_TOP_BITS)]
    top_bits: u32,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    zipf: ZipfArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path (`.gz` to compress).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Schemes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "SplitMU")]
    scheme: Vec<Scheme>,
    /// Sketch memory points in MB, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.6")]
    memory_mb: Vec<f64>,
    #[command(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    trace: TraceArgs,
    /// Seeds, comma separated; each seed re-draws hashes and the synthetic trace.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seed: Vec<u64>,
    /// Packets per epoch; the whole trace is one epoch when omitted.
    #[arg(long)]
    epoch_packets: Option<usize>,
    /// Heavy-hitter threshold as a fraction of epoch packets.
    #[arg(long, default_value_t = 0.001)]
    hh_fraction: f64,
    /// Heavy-changer threshold as a fraction of both epochs' packets.
    #[arg(long, default_value_t = 0.001)]
    hc_fraction: f64,
    /// Label-table budget in bytes.
    #[arg(long, default_value_t = countless::apps::DEFAULT_TABLE_BYTES)]
    table_bytes: usize,
    /// Output directory for reports.csv and reports.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "SplitMU,SplitCM,SplitCU,FlatCM,FlatCU,Cascade")]
    scheme: Vec<Scheme>,
    #[arg(long, default_value_t = 0.6)]
    memory_mb: f64,
    #[command(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    trace: TraceArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Timed repetitions (at least 3).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    expansion: u64,
    /// Top-layer width `w_d`.
    #[arg(long, required_unless_present = "memory_mb")]
    top_width: Option<usize>,
    /// Derive `w_d` from a memory budget instead.
    #[arg(long, conflicts_with = "top_width")]
    memory_mb: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOP_BITS)]
    top_bits: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Stage program JSON file.
    program: PathBuf,
}

#[derive(Args)]
struct WastedArgs {
    #[arg(long, value_delimiter = ',', default_value = "SplitMU,FlatCM")]
    scheme: Vec<Scheme>,
    #[arg(long, default_value_t = 0.6)]
    memory_mb: f64,
    #[command(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    trace: TraceArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn trace(e: TraceError) -> Self {
        let code = match e {
            TraceError::BadSpec(_) | TraceError::ZeroEpoch => EXIT_CONFIG,
            _ => EXIT_TRACE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }

    fn other(message: impl ToString) -> Self {
        Failure {
            code: EXIT_FAILURE,
            message: message.to_string(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) => Failure::config(e),
            RunError::Trace(t) => Failure::trace(t),
            RunError::Cell { .. } | RunError::Output { .. } => Failure::other(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::PipelineCheck(a) => cmd_pipeline_check(a),
        Command::WastedBits(a) => cmd_wasted_bits(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn emit_json(value: &serde_json::Value, out: Option<&PathBuf>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes") + "\n";
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::other(format!("{}: {e}", p.display()))),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(Failure::other),
    }
}

fn load_trace(args: &TraceArgs, seed: u64) -> Result<Vec<PacketRecord>, Failure> {
    let spec = RunSpec {
        source: args.source(),
        ..RunSpec::default()
    };
    spec.load_trace(seed).map_err(Failure::trace)
}

fn sketch_config(scheme: Scheme, mb: f64, shape: &ShapeArgs, seed: u64) -> Result<SketchConfig, Failure> {
    if !(mb > 0.0 && mb.is_finite()) {
        return Err(Failure::config(format!("memory must be positive, got {mb} MB")));
    }
    let cfg = SketchConfig::new(scheme, experiment::memory_bytes(mb), shape.layers, shape.expansion, seed)
        .with_top_bits(shape.top_bits);
    cfg.layout().map_err(|e| Failure::config(format!("{scheme} at {mb} MB: {e}")))?;
    Ok(cfg)
}

fn cmd_gen(a: GenArgs) -> Result<u8, Failure> {
    let stream = traces::zipf_generate(&a.zipf.spec(a.seed)).map_err(Failure::trace)?;
    traces::write_csv_file(&a.out, &stream).map_err(Failure::trace)?;
    eprintln!("wrote {} packets to {}", stream.len(), a.out.display());
    Ok(0)
}

fn cmd_run(a: RunArgs) -> Result<u8, Failure> {
    let spec = RunSpec {
        schemes: a.scheme,
        memory_mb: a.memory_mb,
        layers: a.shape.layers,
        expansion: a.shape.expansion,
        top_bits: a.shape.top_bits,
        source: a.trace.source(),
        epoch_packets: a.epoch_packets,
        seeds: a.seed,
        params: experiment::EvalParams {
            hh_fraction: a.hh_fraction,
            hc_fraction: a.hc_fraction,
            table_capacity: countless::apps::LabelTable::capacity_for_bytes(a.table_bytes),
            ..experiment::EvalParams::default()
        },
    };
    let cells = spec.cells()?;
    println!("# format_version {FORMAT_VERSION}, {} cells", cells.len());
    for c in &cells {
        println!("# {}", c.describe());
    }
    let mut writer = ReportWriter::create(&a.out)?;
    experiment::run_grid(&spec, |r| {
        writer.write_cell(r)?;
        for rep in &r.reports {
            println!(
                "{} {} bytes seed {} epoch {}: ARE {:.4} WMRE {:.4} HH F1 {:.3}",
                rep.scheme, rep.memory_bytes, rep.seed, rep.epoch, rep.are, rep.wmre, rep.hh.f1
            );
        }
        Ok(())
    })?;
    println!(
        "# wrote {} and {}",
        a.out.join(experiment::CSV_FILE).display(),
        a.out.join(experiment::JSON_FILE).display()
    );
    Ok(0)
}

fn cmd_bench(a: BenchArgs) -> Result<u8, Failure> {
    let trace = load_trace(&a.trace, a.seed)?;
    let mut results = Vec::new();
    for &scheme in &a.scheme {
        let cfg = sketch_config(scheme, a.memory_mb, &a.shape, a.seed)?;
        let r = metrics::throughput_bench(&cfg, &trace, a.reps).map_err(Failure::config)?;
        eprintln!(
            "{scheme}: {:.2} Mpps median, {:.4} writes/packet",
            r.mpps_median, r.writes_per_packet
        );
        results.push(r);
    }
    emit_json(
        &json!({
            "format_version": FORMAT_VERSION,
            "memory_bytes": experiment::memory_bytes(a.memory_mb),
            "results": results,
        }),
        a.out.as_ref(),
    )?;
    Ok(0)
}

fn cmd_bounds(a: BoundsArgs) -> Result<u8, Failure> {
    if a.layers == 0 {
        return Err(Failure::config("layers must be positive"));
    }
    if a.expansion < 2 {
        return Err(Failure::config(format!("expansion must be at least 2, got {}", a.expansion)));
    }
    let top_width = match (a.top_width, a.memory_mb) {
        (Some(w), _) => w,
        (None, Some(mb)) => {
            let shape = ShapeArgs {
                layers: a.layers,
                expansion: a.expansion,
                top_bits: a.top_bits,
            };
            let cfg = sketch_config(Scheme::SplitMU, mb, &shape, 0)?;
            let layout = cfg.layout().map_err(Failure::config)?;
            layout.widths[a.layers - 1]
        }
        (None, None) => unreachable!("clap requires one of the two"),
    };
    if top_width == 0 {
        return Err(Failure::config("top width must be positive"));
    }
    let out = compute_bounds(&BoundInputs {
        layers: a.layers,
        expansion: a.expansion,
        top_width,
    });
    let mut value = serde_json::to_value(&out).expect("bounds serialize");
    value["format_version"] = json!(FORMAT_VERSION);
    emit_json(&value, a.out.as_ref())?;
    Ok(0)
}

fn cmd_pipeline_check(a: PipelineArgs) -> Result<u8, Failure> {
    let text = fs::read_to_string(&a.program)
        .map_err(|e| Failure::config(format!("{}: {e}", a.program.display())))?;
    let program = StageProgram::from_json(&text).map_err(Failure::config)?;
    match pipeline::check(&program) {
        Ok(v) if v.is_empty() => {
            println!("{}: feasible", program.name);
            Ok(0)
        }
        Ok(v) => {
            println!("{}: infeasible", program.name);
            for violation in v {
                println!("  {violation}");
            }
            Ok(EXIT_FAILURE)
        }
        Err(e @ PipelineError::MalformedProgram(_)) => Err(Failure::config(e)),
        Err(e) => Err(Failure::other(e)),
    }
}

fn cmd_wasted_bits(a: WastedArgs) -> Result<u8, Failure> {
    let trace = load_trace(&a.trace, a.seed)?;
    let mut results = Vec::new();
    for &scheme in &a.scheme {
        let cfg = sketch_config(scheme, a.memory_mb, &a.shape, a.seed)?;
        let mut s = Sketch::new(cfg).map_err(Failure::config)?;
        for p in &trace {
            let _ = s.encode(&p.key);
        }
        let w = metrics::wasted_bits(&s);
        eprintln!("{scheme}: {:.2}% of counter bits unused", 100.0 * w.wasted_fraction());
        results.push(json!({
            "scheme": scheme,
            "widths": s.layout().widths,
            "wasted_fraction": w.wasted_fraction(),
            "layers": w.layers,
        }));
    }
    emit_json(
        &json!({
            "format_version": FORMAT_VERSION,
            "memory_bytes": experiment::memory_bytes(a.memory_mb),
            "packets": trace.len(),
            "results": results,
        }),
        a.out.as_ref(),
    )?;
    Ok(0)
}
