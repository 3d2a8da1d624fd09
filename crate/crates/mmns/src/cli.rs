use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::assembly::{Convection, Scheme};
use crate::cases::config::Config;
use crate::cases::obstacle_opt::{run_obstacle_opt, ObstacleOptConfig, OptTrace};
use crate::cases::taylor_green::{run_taylor_green, TaylorGreenConfig};
use crate::cases::turek::{run_turek, TurekConfig};
use crate::error::{Error, Result};
use crate::postproc::{eoc, write_report, ErrorRecord, SeriesDeviation};

#[derive(Parser)]
#[command(
    name = "mmns",
    version,
    about = "Incompressible flow on stacks of overlapping meshes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vortex-decay convergence study with error and rate tables
    Converge {
        #[command(flatten)]
        common: Common,
        /// Spatial refinement levels beyond the coarsest stack
        #[arg(long)]
        levels_x: Option<usize>,
        /// Time-step halvings beyond the coarsest step
        #[arg(long)]
        levels_t: Option<usize>,
    },
    /// Cylinder-in-channel benchmark producing a drag/lift/Δp series
    Turek {
        #[command(flatten)]
        common: Common,
        /// Reference series CSV (t,cd,cl,dp) to compare against
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Obstacle-placement ascent maximizing total drag
    Optimize {
        #[command(flatten)]
        common: Common,
    },
    /// Run the case named by `case = ...` in a configuration file
    Run {
        #[command(flatten)]
        common: Common,
        /// Reference series CSV for the cylinder case
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV reports
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all available cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Time-stepping scheme
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Convection treatment
    #[arg(long, value_enum)]
    convection: Option<ConvectionArg>,
    /// Time step (coarsest step for the convergence study)
    #[arg(long)]
    dt: Option<f64>,
    /// Final time
    #[arg(long)]
    t_end: Option<f64>,
    /// Config override as key=value; repeatable, beats the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Bdf2,
    Cn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvectionArg {
    Explicit,
    Implicit,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) => Failure::Config(e),
        other => Failure::Runtime(other),
    }
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Converge {
            common,
            levels_x,
            levels_t,
        } => {
            let mut cfg = prepare(&common)?;
            if let Some(lx) = levels_x {
                cfg.set("tg.levels_x", &lx.to_string());
            }
            if let Some(lt) = levels_t {
                cfg.set("tg.levels_t", &lt.to_string());
            }
            converge_cmd(&cfg, &common.out).map_err(classify)
        }
        Command::Turek { common, reference } => {
            let cfg = prepare(&common)?;
            turek_cmd(&cfg, &common.out, reference.as_deref()).map_err(classify)
        }
        Command::Optimize { common } => {
            let cfg = prepare(&common)?;
            optimize_cmd(&cfg, &common.out).map_err(classify)
        }
        Command::Run { common, reference } => {
            if common.config.is_none() {
                return Err(Failure::Config(Error::Config(
                    "the run command needs --config with a `case = ...` entry".into(),
                )));
            }
            let cfg = prepare(&common)?;
            match cfg.string("case", "").as_str() {
                "converge" => converge_cmd(&cfg, &common.out).map_err(classify),
                "turek" => {
                    turek_cmd(&cfg, &common.out, reference.as_deref()).map_err(classify)
                }
                "optimize" => optimize_cmd(&cfg, &common.out).map_err(classify),
                "" => Err(Failure::Config(Error::Config(
                    "configuration file has no `case = ...` entry".into(),
                ))),
                other => Err(Failure::Config(Error::Config(format!(
                    "unknown case `{other}` (expected converge, turek, or optimize)"
                )))),
            }
        }
    }
}

fn prepare(common: &Common) -> std::result::Result<Config, Failure> {
    if let Some(n) = common.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    load_config(common).map_err(Failure::Config)
}

/// Defaults, then the config file, then repeatable --set pairs, then
/// dedicated flags; later sources win.
fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::new(),
    };
    for kv in &common.set {
        cfg.set_pair(kv)?;
    }
    if let Some(s) = common.scheme {
        cfg.set(
            "ipcs.scheme",
            match s {
                SchemeArg::Bdf2 => "bdf2",
                SchemeArg::Cn => "cn",
            },
        );
    }
    if let Some(c) = common.convection {
        cfg.set(
            "ipcs.convection",
            match c {
                ConvectionArg::Explicit => "explicit",
                ConvectionArg::Implicit => "implicit",
            },
        );
    }
    if let Some(dt) = common.dt {
        cfg.set("ipcs.dt", &dt.to_string());
    }
    if let Some(te) = common.t_end {
        cfg.set("ipcs.t_end", &te.to_string());
    }
    Ok(cfg)
}

const CONVERGE_KEYS: &[&str] = &[
    "case",
    "ipcs.scheme",
    "ipcs.convection",
    "ipcs.dt",
    "ipcs.t_end",
    "tg.study",
    "tg.levels_x",
    "tg.levels_t",
    "tg.degree_v",
    "tg.degree_q",
    "tg.nu",
    "tg.n_meshes",
];

fn converge_cmd(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_known(CONVERGE_KEYS)?;
    let scheme = cfg.scheme("ipcs.scheme", Scheme::Bdf2)?;
    let convection = cfg.convection("ipcs.convection", Convection::Implicit)?;
    let mut tg = match cfg.string("tg.study", "spatial").as_str() {
        "spatial" => TaylorGreenConfig::spatial_study(scheme, convection),
        "temporal" => TaylorGreenConfig::temporal_study(scheme, convection),
        other => {
            return Err(Error::Config(format!(
                "tg.study: unknown study `{other}` (expected spatial or temporal)"
            )))
        }
    };
    tg.dt0 = cfg.f64("ipcs.dt", tg.dt0)?;
    tg.t_end = cfg.f64("ipcs.t_end", tg.t_end)?;
    tg.levels_x = cfg.usize("tg.levels_x", tg.levels_x)?;
    tg.levels_t = cfg.usize("tg.levels_t", tg.levels_t)?;
    tg.degree_v = cfg.usize("tg.degree_v", tg.degree_v)?;
    tg.degree_q = cfg.usize("tg.degree_q", tg.degree_q)?;
    tg.nu = cfg.f64("tg.nu", tg.nu)?;
    tg.n_meshes = cfg.usize("tg.n_meshes", tg.n_meshes)?;
    let report = run_taylor_green(&tg)?;
    write_report(&report, out)?;
    print!("{}", convergence_text(&report.errors));
    println!("report written to {}", out.display());
    Ok(())
}

fn convergence_text(errors: &[ErrorRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>4} {:>4} {:>12} {:>6} {:>12} {:>6} {:>12} {:>6}",
        "lx", "lt", "u_l2", "rate", "u_h1", "rate", "p_l2", "rate"
    );
    let rates: Vec<Vec<f64>> = [
        |r: &ErrorRecord| r.velocity_l2,
        |r: &ErrorRecord| r.velocity_h1,
        |r: &ErrorRecord| r.pressure_l2,
    ]
    .iter()
    .map(|get| eoc(&errors.iter().map(get).collect::<Vec<_>>()))
    .collect();
    for (i, r) in errors.iter().enumerate() {
        let rate = |k: usize| {
            if i == 0 {
                "-".to_string()
            } else {
                format!("{:.2}", rates[k][i - 1])
            }
        };
        let _ = writeln!(
            s,
            "{:>4} {:>4} {:>12.4e} {:>6} {:>12.4e} {:>6} {:>12.4e} {:>6}",
            r.level_x,
            r.level_t,
            r.velocity_l2,
            rate(0),
            r.velocity_h1,
            rate(1),
            r.pressure_l2,
            rate(2),
        );
    }
    s
}

const TUREK_KEYS: &[&str] = &[
    "case",
    "ipcs.scheme",
    "ipcs.convection",
    "ipcs.dt",
    "ipcs.t_end",
    "turek.refine",
    "turek.nu",
    "turek.output_every",
];

fn turek_cmd(cfg: &Config, out: &Path, reference: Option<&Path>) -> Result<()> {
    cfg.check_known(TUREK_KEYS)?;
    let scheme = cfg.scheme("ipcs.scheme", Scheme::Cn)?;
    let convection = cfg.convection("ipcs.convection", Convection::Implicit)?;
    let mut tc = TurekConfig::benchmark(scheme, convection);
    tc.dt = cfg.f64("ipcs.dt", tc.dt)?;
    tc.t_end = cfg.f64("ipcs.t_end", tc.t_end)?;
    tc.refine = cfg.usize("turek.refine", tc.refine)?;
    tc.nu = cfg.f64("turek.nu", tc.nu)?;
    tc.output_every = cfg.usize("turek.output_every", tc.output_every)?;
    let (report, deviation) = run_turek(&tc, reference)?;
    write_report(&report, out)?;
    if let Some(last) = report.rows.last() {
        println!(
            "t = {:.4}: cd = {:.6}, cl = {:.6}, dp = {:.6}",
            last.t, last.cd, last.cl, last.dp
        );
    }
    if let Some(dev) = deviation {
        print_deviation(&dev);
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn print_deviation(dev: &SeriesDeviation) {
    println!(
        "deviation from reference over {} samples:",
        dev.compared
    );
    println!("  cd: max {:.6e}, l2 {:.6e}", dev.cd, dev.cd_l2);
    println!("  cl: max {:.6e}, l2 {:.6e}", dev.cl, dev.cl_l2);
    println!("  dp: max {:.6e}, l2 {:.6e}", dev.dp, dev.dp_l2);
}

const OPT_KEYS: &[&str] = &[
    "case",
    "ipcs.scheme",
    "ipcs.convection",
    "ipcs.dt",
    "ipcs.t_end",
    "opt.variant",
    "opt.iterations",
    "opt.step0",
    "opt.fd_step",
    "opt.max_backtracks",
    "opt.t_start_j",
];

fn optimize_cmd(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_known(OPT_KEYS)?;
    let mut oc = match cfg.string("opt.variant", "six").as_str() {
        "six" => ObstacleOptConfig::six_obstacles(),
        "smoke" => ObstacleOptConfig::two_obstacle_smoke(10),
        other => {
            return Err(Error::Config(format!(
                "opt.variant: unknown variant `{other}` (expected six or smoke)"
            )))
        }
    };
    oc.scheme = cfg.scheme("ipcs.scheme", oc.scheme)?;
    oc.convection = cfg.convection("ipcs.convection", oc.convection)?;
    oc.dt = cfg.f64("ipcs.dt", oc.dt)?;
    oc.t_end = cfg.f64("ipcs.t_end", oc.t_end)?;
    oc.iterations = cfg.usize("opt.iterations", oc.iterations)?;
    oc.step0 = cfg.f64("opt.step0", oc.step0)?;
    oc.fd_step = cfg.f64("opt.fd_step", oc.fd_step)?;
    oc.max_backtracks = cfg.usize("opt.max_backtracks", oc.max_backtracks)?;
    oc.t_start_j = cfg.f64("opt.t_start_j", oc.t_start_j)?;
    let trace = run_obstacle_opt(&oc)?;
    for (i, j) in trace.j_values.iter().enumerate() {
        println!("iterate {i}: J = {j:.6}");
    }
    let first = trace.j_values.first().copied().unwrap_or(f64::NAN);
    let last = trace.j_values.last().copied().unwrap_or(f64::NAN);
    println!(
        "J changed from {first:.6} to {last:.6} over {} evaluations",
        trace.evaluations
    );
    write_opt_trace(&trace, &out.join("optimization.csv"))?;
    println!("report written to {}", out.display());
    Ok(())
}

fn write_opt_trace(trace: &OptTrace, path: &Path) -> Result<()> {
    let dim = trace.designs.first().map_or(0, Vec::len);
    let mut s = String::from("iteration,j");
    for k in 0..dim {
        let _ = write!(s, ",x{k}");
    }
    s.push('\n');
    for (i, (j, x)) in trace.j_values.iter().zip(&trace.designs).enumerate() {
        let _ = write!(s, "{i},{j:.16e}");
        for v in x {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
