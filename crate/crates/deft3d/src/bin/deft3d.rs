//! Command-line surface: gradient checks, complexity benchmarks,
//! hyperparameter sweeps, the toy training demo, positional-encoding dumps
//! and tensor-file utilities.
//!
//! Exit codes: 0 = pass, 1 = check failure, 2 = usage/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use deft3d::bench::{bench_suite, records_to_csv};
use deft3d::gradcheck;
use deft3d::pe::build_pe;
use deft3d::scalar::Dtype;
use deft3d::seq::LevelLayout;
use deft3d::toy::{overfit_config, train_toy, visit_params_named, ToyConfig};
use deft3d::vten::Vten;
use deft3d::{Error, Result};

#[derive(Parser)]
#[command(name = "deft3d", version, about = "3D deformable-attention reference kernels")]
struct Cli {
    /// Base RNG seed; every command is deterministic given it (benchmark
    /// timings excepted, their outputs are not).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Numeric precision for data-producing commands. Gradient checks
    /// always run in f64.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Output file or directory, command-dependent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// One of: tensor-core, msdmsa, detrans, loss, toy-net, all
        /// (plus `corrupted`, a negative-control fixture that must fail).
        #[arg(long)]
        module: String,
        /// Number of independent seeds to fold into the report.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Time both attention mechanisms across sequence lengths and fit the
    /// scaling exponents.
    Bench(BenchArgs),
    /// Train the toy task across one hyperparameter axis.
    Sweep(SweepArgs),
    /// Overfit the synthetic sphere task and write the artifacts.
    TrainDemo {
        /// Plain-text `key = value` config; unknown keys are rejected.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the positional-encoding table for inspection.
    PeDump {
        /// Comma-separated D,H,W of the (single) level.
        #[arg(long)]
        dims: String,
        #[arg(long)]
        channels: usize,
    },
    /// Inspect or convert a .vten tensor file.
    Tensor {
        #[command(subcommand)]
        op: TensorOp,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "512,1024,2048,4096")]
    sizes: String,
    #[arg(long, default_value_t = 96)]
    channels: usize,
    #[arg(long, default_value_t = 6)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 4)]
    points: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// One of: K, H, L_D, scales.
    #[arg(long)]
    axis: String,
    /// Comma-separated values (for `scales`: single,multi).
    #[arg(long)]
    values: String,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Optional `key = value` base config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TensorOp {
    /// Print dtype, dims and basic statistics.
    Inspect { file: PathBuf },
    /// Re-encode at the precision given by --precision.
    Convert { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Ok(true) = pass, Ok(false) = a check failed.
fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Gradcheck { module, seeds } => cmd_gradcheck(module, cli.seed, *seeds),
        Cmd::Bench(args) => cmd_bench(cli, args),
        Cmd::Sweep(args) => cmd_sweep(cli, args),
        Cmd::TrainDemo { config } => cmd_train_demo(cli, config.as_deref()),
        Cmd::PeDump { dims, channels } => cmd_pe_dump(cli, dims, *channels),
        Cmd::Tensor { op } => cmd_tensor(cli, op),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("bad {what} entry {v:?}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(module: &str, seed: u64, seeds: usize) -> Result<bool> {
    let check: fn(u64) -> gradcheck::GradCheckReport = match module {
        "tensor-core" => gradcheck::check_tensor_core,
        "msdmsa" => gradcheck::check_msdmsa,
        "detrans" => gradcheck::check_detrans,
        "loss" => gradcheck::check_loss,
        "toy-net" => gradcheck::check_toy_net,
        "corrupted" => gradcheck::check_corrupted,
        "all" => |s| {
            let mut r = gradcheck::check_tensor_core(s);
            r.merge(gradcheck::check_msdmsa(s));
            r.merge(gradcheck::check_detrans(s));
            r.merge(gradcheck::check_loss(s));
            r.merge(gradcheck::check_toy_net(s));
            r
        },
        other => {
            return Err(Error::config(format!(
                "unknown gradcheck module {other:?} (expected tensor-core, msdmsa, detrans, loss, toy-net or all)"
            )))
        }
    };
    let report = gradcheck::check_many(check, seed.max(1), seeds.max(1))?;
    print!("{}", report.render());
    if report.all_pass() {
        println!("gradcheck {module}: all {} groups pass", report.groups.len());
        Ok(true)
    } else {
        println!("gradcheck {module}: FAILED");
        Ok(false)
    }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<bool> {
    let sizes: Vec<usize> = parse_list(&args.sizes, "size")?;
    if sizes.len() < 2 {
        return Err(Error::config("bench needs at least 2 sizes"));
    }
    if args.repeats < 3 {
        return Err(Error::config("bench needs repeats >= 3"));
    }
    let summary = bench_suite(
        &sizes,
        args.channels,
        args.heads,
        args.levels,
        args.points,
        args.repeats,
        cli.seed,
    )?;
    let csv = records_to_csv(&summary.records);
    match &cli.out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    println!("slope msdmsa  = {:.3}", summary.slope_msdmsa);
    println!("slope vanilla = {:.3}", summary.slope_vanilla);
    println!("workspace ratio (vanilla/msdmsa) at N={} = {:.1}x", sizes.iter().max().unwrap(), summary.workspace_ratio);
    Ok(true)
}

// ---------------------------------------------------------------------------
// config files
// ---------------------------------------------------------------------------

fn parse_config_file(path: &Path, base: ToyConfig) -> Result<ToyConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = base;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| Error::config(format!("line {}: bad {what} value {value:?}", lineno + 1));
        match key {
            "dims" => {
                let v: Vec<usize> = parse_list(value, "dims")?;
                if v.len() != 3 {
                    return Err(bad("dims"));
                }
                cfg.dims = [v[0], v[1], v[2]];
            }
            "base" => cfg.base = value.parse().map_err(|_| bad("base"))?,
            "token_width" => cfg.token_width = value.parse().map_err(|_| bad("token_width"))?,
            "levels" => cfg.levels = value.parse().map_err(|_| bad("levels"))?,
            "depth" => cfg.depth = value.parse().map_err(|_| bad("depth"))?,
            "heads" => cfg.heads = value.parse().map_err(|_| bad("heads"))?,
            "points" => cfg.points = value.parse().map_err(|_| bad("points"))?,
            "hidden" => cfg.hidden = value.parse().map_err(|_| bad("hidden"))?,
            "classes" => cfg.classes = value.parse().map_err(|_| bad("classes"))?,
            "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
            "momentum" => cfg.momentum = value.parse().map_err(|_| bad("momentum"))?,
            "iterations" => cfg.iterations = value.parse().map_err(|_| bad("iterations"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "multi_scale" => cfg.multi_scale = value.parse().map_err(|_| bad("multi_scale"))?,
            "ds_weights" => cfg.ds_weights = parse_list(value, "ds_weights")?,
            other => {
                return Err(Error::config(format!(
                    "line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(cfg)
}

fn echo_config(cfg: &ToyConfig) -> String {
    format!(
        "dims = {},{},{}\nbase = {}\ntoken_width = {}\nlevels = {}\ndepth = {}\nheads = {}\npoints = {}\nhidden = {}\nclasses = {}\nlr = {}\nmomentum = {}\niterations = {}\nseed = {}\nmulti_scale = {}\nds_weights = {}\n",
        cfg.dims[0], cfg.dims[1], cfg.dims[2],
        cfg.base, cfg.token_width, cfg.levels, cfg.depth, cfg.heads, cfg.points,
        cfg.hidden, cfg.classes, cfg.lr, cfg.momentum, cfg.iterations, cfg.seed,
        cfg.multi_scale,
        if cfg.ds_weights.is_empty() {
            "uniform".to_string()
        } else {
            cfg.ds_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        }
    )
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub const SWEEP_CSV_HEADER: &str = "# deft3d sweep v1\nparam,value,seed,iterations,final_dice";

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<bool> {
    let mut base = overfit_config(cli.seed);
    // sweep runs many configs; keep each one modest unless overridden
    base.iterations = 60;
    if let Some(path) = &args.config {
        base = parse_config_file(path, base)?;
    }
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    let values: Vec<String> = args.values.split(',').map(|v| v.trim().to_string()).collect();
    for value in &values {
        let mut cfg = base.clone();
        match args.axis.as_str() {
            "K" => cfg.points = value.parse().map_err(|_| Error::config(format!("bad K value {value:?}")))?,
            "H" => cfg.heads = value.parse().map_err(|_| Error::config(format!("bad H value {value:?}")))?,
            "L_D" => cfg.depth = value.parse().map_err(|_| Error::config(format!("bad L_D value {value:?}")))?,
            "scales" => {
                cfg.multi_scale = match value.as_str() {
                    "multi" => true,
                    "single" => false,
                    _ => return Err(Error::config(format!("bad scales value {value:?} (single|multi)"))),
                }
            }
            other => return Err(Error::config(format!("unknown sweep axis {other:?} (K, H, L_D, scales)"))),
        }
        cfg.validate()?;
        for s in 0..args.seeds {
            cfg.seed = cli.seed + s as u64;
            let result = train_toy::<f64>(&cfg)?;
            csv.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                args.axis, value, cfg.seed, cfg.iterations, result.final_dice
            ));
        }
    }
    match &cli.out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// train-demo
// ---------------------------------------------------------------------------

fn cmd_train_demo(cli: &Cli, config: Option<&Path>) -> Result<bool> {
    let mut cfg = overfit_config(cli.seed);
    if let Some(path) = config {
        cfg = parse_config_file(path, cfg)?;
    }
    cfg.validate()?;
    let out_dir = cli
        .out
        .clone()
        .ok_or_else(|| Error::config("train-demo requires --out <dir>"))?;
    std::fs::create_dir_all(&out_dir)?;

    match cli.precision {
        Precision::F64 => run_train_demo::<f64>(&cfg, &out_dir),
        Precision::F32 => run_train_demo::<f32>(&cfg, &out_dir),
    }
}

fn run_train_demo<T: deft3d::Scalar>(cfg: &ToyConfig, out_dir: &Path) -> Result<bool> {
    let mut result = train_toy::<T>(cfg)?;
    std::fs::write(out_dir.join("config.txt"), echo_config(cfg))?;

    let mut csv = String::from("# deft3d train v1\niter,loss,dice\n");
    for r in &result.trace {
        csv.push_str(&format!("{},{:.8},{:.6}\n", r.iter, r.loss, r.dice));
    }
    std::fs::write(out_dir.join("trace.csv"), csv)?;

    let params_dir = out_dir.join("params");
    std::fs::create_dir_all(&params_dir)?;
    let mut err = None;
    visit_params_named(&mut result.net.params, &mut |name, value, _| {
        if err.is_some() {
            return;
        }
        let file = params_dir.join(format!("{name}.vten"));
        if let Err(e) = Vten::from_slice(vec![value.len()], value).and_then(|t| t.write(file)) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    let mask: Vec<f32> = result.prediction.iter().map(|l| *l as f32).collect();
    Vten::from_slice(cfg.dims.to_vec(), &mask)?.write(out_dir.join("prediction.vten"))?;

    println!("final dice = {:.4} after {} iterations", result.final_dice, cfg.iterations);
    Ok(true)
}

// ---------------------------------------------------------------------------
// pe-dump and tensor utilities
// ---------------------------------------------------------------------------

fn cmd_pe_dump(cli: &Cli, dims: &str, channels: usize) -> Result<bool> {
    let d: Vec<usize> = parse_list(dims, "dims")?;
    if d.len() != 3 {
        return Err(Error::config("pe-dump expects --dims D,H,W"));
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::config("pe-dump requires --out <file.vten>"))?;
    let layout = LevelLayout::new(vec![[d[0], d[1], d[2]]]);
    let table = match cli.precision {
        Precision::F64 => {
            let pe = build_pe::<f64>(&layout, channels)?;
            Vten::from_slice(vec![layout.total, channels], &pe.table.data)?
        }
        Precision::F32 => {
            let pe = build_pe::<f32>(&layout, channels)?;
            Vten::from_slice(vec![layout.total, channels], &pe.table.data)?
        }
    };
    table.write(&out)?;
    println!("wrote {} x {} table to {}", layout.total, channels, out.display());
    Ok(true)
}

fn cmd_tensor(cli: &Cli, op: &TensorOp) -> Result<bool> {
    match op {
        TensorOp::Inspect { file } => {
            let t = Vten::read(file)?;
            println!("{}", t.summary());
            Ok(true)
        }
        TensorOp::Convert { file } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::config("tensor convert requires --out <file.vten>"))?;
            let t = Vten::read(file)?;
            let dtype = match cli.precision {
                Precision::F32 => Dtype::F32,
                Precision::F64 => Dtype::F64,
            };
            t.convert(dtype).write(&out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
    }
}
