use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use ndp::config::ConfigError;
use ndp::io::{self, CloudFormat, IoError, RunReport};
use ndp::metrics::{self, FlowMetrics, MetricsError};
use ndp::pyramid::RegistrationError;
use ndp::synth::{self, Deformation, InstanceOptions, Shape, SynthError};
use ndp::types::{self, PointCloud, WarpFieldType};
use ndp::{register, PyramidConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("registration failed: {0}")]
    Registration(#[from] RegistrationError),
    #[error("evaluation failed: {0}")]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Registration(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Non-rigid point cloud registration with a neural deformation pyramid.
#[derive(Debug, Parser)]
#[command(name = "ndp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Score a warped cloud against ground-truth flow.
    Eval(EvalArgs),
    /// Generate a synthetic problem with exact ground truth.
    Synth(SynthArgs),
    /// Sim(3) registration followed by re-querying the pyramid at new points.
    Transfer(TransferArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda_reg=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PyramidConfig> {
        let mut cfg = match &self.config {
            Some(path) => PyramidConfig::from_kv(&io::read_text(path)?)?,
            None => PyramidConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg.validate()?)
    }
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long, required_unless_present = "manifest")]
    source: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    target: Option<PathBuf>,
    /// Correspondences, one `u v [confidence]` per line.
    #[arg(long)]
    corr: Option<PathBuf>,
    /// Ground-truth flow; adds metrics to the report.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory receiving the warped source after every level.
    #[arg(long)]
    dump_levels: Option<PathBuf>,
    /// File of `source target out [report]` lines registered independently.
    #[arg(long, conflicts_with_all = ["source", "target", "corr", "gt", "out", "report", "dump_levels"])]
    manifest: Option<PathBuf>,
    /// Worker threads for --manifest.
    #[arg(long, default_value_t = 1, requires = "manifest")]
    jobs: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    warped: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    shape: Shape,
    /// Deformation, e.g. `twist:axis=0,0,1:rate=0.5` or `sine:amplitude=0.1:frequency=6`.
    #[arg(long)]
    deform: Deformation,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Fraction of the target kept by a half-space crop.
    #[arg(long)]
    overlap: Option<f64>,
    /// `ratio,radius` ball noise on the target.
    #[arg(long, value_parser = parse_noise)]
    noise: Option<(f64, f64)>,
    /// Bounding-box diagonal of the source.
    #[arg(long, default_value_t = 1.0)]
    diagonal: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Points to deform with the fitted pyramid; defaults to the source.
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn parse_noise(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected RATIO,RADIUS")?;
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| format!("'{t}' is not a number"))
    };
    Ok((num(a)?, num(b)?))
}

fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    Ok(io::write_point_cloud(
        cloud,
        path,
        CloudFormat::from_path(path)?,
    )?)
}

fn print_levels(report: &RunReport) {
    for l in &report.levels {
        println!(
            "level {:>2}  iterations {:>3}  stop {:<14}  cost {:.6e}  alpha {:.3}",
            l.k,
            l.iterations,
            l.stop_reason.name(),
            l.final_cost,
            l.mean_alpha
        );
    }
    println!(
        "total iterations {}  wall {:.2}s",
        report.totals.iterations, report.totals.wall_seconds
    );
}

struct Pair<'a> {
    source: &'a Path,
    target: &'a Path,
    corr: Option<&'a Path>,
    gt: Option<&'a Path>,
    out: Option<&'a Path>,
    report: Option<&'a Path>,
    dump_levels: Option<&'a Path>,
}

fn register_pair(pair: &Pair, cfg: &PyramidConfig) -> Result<RunReport> {
    let source = io::read_point_cloud(pair.source)?;
    let target = io::read_point_cloud(pair.target)?;
    let matches = pair
        .corr
        .map(|p| io::read_correspondences(p, cfg.corr_conf_threshold))
        .transpose()?;
    let gt = pair.gt.map(io::read_flow).transpose()?;
    let result = register(&source, &target, cfg, matches.as_ref())?;
    let metrics = gt
        .map(|gt| metrics::compute_metrics(&result.flow(&source), &gt))
        .transpose()?;
    let report = RunReport::from_result(
        "register",
        cfg,
        source.len(),
        target.len(),
        matches.as_ref().map_or(0, |m| m.len()),
        &result,
        metrics,
    );
    if let Some(path) = pair.out {
        write_cloud(&result.warped, path)?;
    }
    if let Some(dir) = pair.dump_levels {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for level in &result.levels {
            let cloud = source
                .with_points(level.warped.clone())
                .map_err(IoError::from)?;
            write_cloud(&cloud, &dir.join(format!("level_{}.ply", level.level)))?;
        }
    }
    if let Some(path) = pair.report {
        report.write(path)?;
    }
    Ok(report)
}

fn run_register(args: RegisterArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let Some(manifest) = &args.manifest else {
        let pair = Pair {
            source: args.source.as_deref().expect("required by clap"),
            target: args.target.as_deref().expect("required by clap"),
            corr: args.corr.as_deref(),
            gt: args.gt.as_deref(),
            out: args.out.as_deref(),
            report: args.report.as_deref(),
            dump_levels: args.dump_levels.as_deref(),
        };
        let report = register_pair(&pair, &cfg)?;
        print_levels(&report);
        if let Some(m) = report.metrics {
            print_metrics(&m);
        }
        return Ok(());
    };
    let rows = parse_manifest(&io::read_text(manifest)?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Result<RunReport>> = pool.install(|| {
        rows.par_iter()
            .map(|row| {
                let pair = Pair {
                    source: &row[0],
                    target: &row[1],
                    corr: None,
                    gt: None,
                    out: Some(&row[2]),
                    report: row.get(3).map(PathBuf::as_path),
                    dump_levels: None,
                };
                register_pair(&pair, &cfg)
            })
            .collect()
    });
    let mut first_error = None;
    for (row, result) in rows.iter().zip(results) {
        match result {
            Ok(r) => println!(
                "{} -> {}: {} iterations, {:.2}s",
                row[0].display(),
                row[2].display(),
                r.totals.iterations,
                r.totals.wall_seconds
            ),
            Err(e) => {
                eprintln!("{}: {e}", row[0].display());
                first_error.get_or_insert(e);
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

fn parse_manifest(text: &str) -> Result<Vec<Vec<PathBuf>>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<PathBuf> = line.split_whitespace().map(PathBuf::from).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(CliError::Usage(format!(
                "manifest line {}: expected 'source target out [report]'",
                i + 1
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn print_metrics(m: &FlowMetrics) {
    println!(
        "EPE {:.6}  AccS {:.2}%  AccR {:.2}%  Outlier {:.2}%  ({} points)",
        m.epe, m.acc_s, m.acc_r, m.outlier, m.count
    );
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let warped = io::read_point_cloud(&args.warped)?;
    let source = io::read_point_cloud(&args.source)?;
    let gt = io::read_flow(&args.gt)?;
    if warped.len() != source.len() {
        return Err(MetricsError::CountMismatch {
            predicted: warped.len(),
            truth: source.len(),
        }
        .into());
    }
    let flow: Vec<_> = warped
        .points()
        .iter()
        .zip(source.points())
        .map(|(&w, &s)| types::sub(w, s))
        .collect();
    let m = metrics::compute_metrics(&flow, &gt)?;
    print_metrics(&m);
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&m).map_err(|e| IoError::Report(e.to_string()))?;
        io::write_text(path, &json)?;
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let opts = InstanceOptions {
        points: args.n,
        diagonal: args.diagonal,
        overlap: args.overlap,
        noise: args.noise,
    };
    let inst = synth::make_instance(args.shape, args.deform.clone(), &opts, args.seed)?;
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.clone(),
        source,
    })?;
    io::write_point_cloud(
        &inst.source,
        &dir.join("source.ply"),
        CloudFormat::PlyBinary,
    )?;
    io::write_point_cloud(
        &inst.target,
        &dir.join("target.ply"),
        CloudFormat::PlyBinary,
    )?;
    io::write_flow(&inst.gt, &dir.join("gt.warp"))?;
    let mut spec = format!(
        "shape = {}\ndeform = {}\nn = {}\ndiagonal = {}\nseed = {}\n",
        args.shape, args.deform, args.n, args.diagonal, args.seed
    );
    if let Some(f) = args.overlap {
        spec.push_str(&format!("overlap = {f}\n"));
    }
    if let Some((ratio, radius)) = args.noise {
        spec.push_str(&format!("noise = {ratio},{radius}\n"));
    }
    io::write_text(&dir.join("spec.txt"), &spec)?;
    println!(
        "{}: source {} points, target {} points",
        inst.name,
        inst.source.len(),
        inst.target.len()
    );
    Ok(())
}

fn run_transfer(args: TransferArgs) -> Result<()> {
    let mut cfg = args.cfg.load()?;
    cfg.warp_type = WarpFieldType::Sim3;
    cfg.levels = 9;
    cfg.k0 = -8;
    let source = io::read_point_cloud(&args.source)?;
    let target = io::read_point_cloud(&args.target)?;
    let query = match &args.query {
        Some(path) => io::read_point_cloud(path)?,
        None => source.clone(),
    };
    let result = register(&source, &target, &cfg, None)?;
    let moved = result.pyramid.query(query.points())?;
    write_cloud(&query.with_points(moved).map_err(IoError::from)?, &args.out)?;
    let report = RunReport::from_result(
        "transfer",
        &cfg,
        source.len(),
        target.len(),
        0,
        &result,
        None,
    );
    if let Some(path) = &args.report {
        report.write(path)?;
    }
    print_levels(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Register(a) => run_register(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Transfer(a) => run_transfer(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
