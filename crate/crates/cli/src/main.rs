use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ppde_core::config::ExperimentConfig;
use ppde_core::logsig::{logsig, LyndonBasis, PiecewisePath};
use ppde_core::net::Checkpoint;
use ppde_core::nrde::NrdeModel;
use ppde_core::problems::{json_hash, mc_oracle, OracleCache};
use ppde_core::rng::{derive_seed, stream_rng};
use ppde_core::sde::{read_paths_csv, simulate_batch, write_paths_csv};
use ppde_core::train::{evaluate, train, EvalReport, OraclePredictor, Predictor};
use ppde_core::Error;

const TAG_SIMULATE: u64 = 0x73_696d;
const TAG_ORACLE_CMD: u64 = 0x6f_7263;

#[derive(Parser)]
#[command(
    name = "ppde-nrde",
    version,
    about = "Neural rough differential equation solver for path-dependent PDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print log-signature coefficients of each path in a CSV file.
    Logsig {
        #[command(flatten)]
        common: Common,
        /// Path CSV with columns `t,x_0,...` or `path_id,t,x_0,...`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
    /// Train a model and write a checkpoint plus the learning curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint against reference solutions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use an independent reference estimate as the prediction.
        #[arg(long)]
        oracle_self_test: bool,
    },
    /// Monte-Carlo estimate of the solution given a path prefix.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        n_sims: usize,
        /// Prefix CSV ending on a coarse node; defaults to the initial state at t = 0.
        #[arg(long)]
        prefix: Option<PathBuf>,
    },
    /// Simulate paths of the configured dynamics on the fine grid.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        n_paths: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } | Error::NonFiniteHidden { .. } | Error::NonFiniteState { .. } => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> ppde_core::Result<()> {
    match cli.command {
        Command::Logsig { common, input, depth } => {
            setup_threads(&common)?;
            cmd_logsig(&common, &input, depth)
        }
        Command::Train { common } => cmd_train(&common),
        Command::Eval {
            common,
            checkpoint,
            oracle_self_test,
        } => cmd_eval(&common, checkpoint, oracle_self_test),
        Command::Oracle { common, n_sims, prefix } => cmd_oracle(&common, n_sims, prefix),
        Command::Simulate { common, n_paths } => cmd_simulate(&common, n_paths),
    }
}

fn setup_threads(common: &Common) -> ppde_core::Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn load_config(common: &Common) -> ppde_core::Result<ExperimentConfig> {
    setup_threads(common)?;
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    match common.seed {
        Some(s) => cfg.with_seed(s),
        None => Ok(cfg),
    }
}

fn out_dir(common: &Common) -> ppde_core::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_config_echo(dir: &Path, cfg: &ExperimentConfig) -> ppde_core::Result<()> {
    fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
    Ok(())
}

/// Short decimal rendering: integers without a fraction, otherwise six decimals without trailing zeros.
fn fmt_coeff(x: f64) -> String {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        return "0".into();
    }
    let s = format!("{r:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn cmd_logsig(common: &Common, input: &Path, depth: usize) -> ppde_core::Result<()> {
    let file = File::open(input).map_err(|e| Error::Config(format!("cannot open {}: {e}", input.display())))?;
    let paths = read_paths_csv(BufReader::new(file))?;
    let mut lines = Vec::with_capacity(paths.len());
    for (id, path) in &paths {
        let basis = LyndonBasis::shared(path.dim(), depth)?;
        let coeffs = logsig(path, depth)?.into_coeffs();
        let body = basis
            .labels()
            .iter()
            .zip(&coeffs)
            .map(|(l, c)| format!("{l}: {}", fmt_coeff(*c)))
            .collect::<Vec<_>>()
            .join(", ");
        lines.push(if paths.len() > 1 {
            format!("{id}: {{{body}}}")
        } else {
            body
        });
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("logsig.txt"), &text)?;
    }
    Ok(())
}

fn cmd_train(common: &Common) -> ppde_core::Result<()> {
    let cfg = load_config(common)?;
    let problem = cfg.problem_spec()?;
    let dir = out_dir(common)?;
    write_config_echo(&dir, &cfg)?;
    let mut model = NrdeModel::new(cfg.model.clone(), cfg.seed)?;
    let epochs = cfg.train.epochs;
    let start = Instant::now();
    let outcome = train(&mut model, &problem, &cfg.train, |epoch, loss| {
        if (epoch + 1) % 50 == 0 || epoch + 1 == epochs {
            eprintln!(
                "epoch {:>5}  loss {loss:.6}  {:.1}s",
                epoch + 1,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let mut w = BufWriter::new(File::create(dir.join("learning_curve.csv"))?);
    writeln!(w, "epoch,loss")?;
    for (i, l) in outcome.curve.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    if !outcome.terminal_curve.is_empty() {
        let mut w = BufWriter::new(File::create(dir.join("terminal_curve.csv"))?);
        writeln!(w, "epoch,terminal")?;
        for (i, l) in outcome.terminal_curve.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        w.flush()?;
    }
    model.to_checkpoint().save(&dir.join("checkpoint.json"))?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: Option<PathBuf>, oracle_self_test: bool) -> ppde_core::Result<()> {
    let cfg = load_config(common)?;
    let problem = cfg.problem_spec()?;
    let dir = out_dir(common)?;
    let eval_cfg = cfg.eval_config();
    let cache = match &cfg.oracle_cache {
        Some(p) => Some(OracleCache::load(Path::new(p))?),
        None => None,
    };
    let start = Instant::now();
    let oracle;
    let model;
    let predictor: &dyn Predictor = if oracle_self_test {
        oracle = OraclePredictor {
            problem: &problem,
            n_sims: eval_cfg.n_sims,
            seed: derive_seed(cfg.seed, &[TAG_ORACLE_CMD]),
        };
        &oracle
    } else {
        let path = checkpoint.unwrap_or_else(|| dir.join("checkpoint.json"));
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} not found", path.display())));
        }
        model = NrdeModel::from_checkpoint(Checkpoint::load(&path)?)?;
        if model.config().input_dim != problem.dim() {
            return Err(Error::Config(format!(
                "checkpoint expects {}-dimensional paths, problem has {}",
                model.config().input_dim,
                problem.dim()
            )));
        }
        &model
    };
    let report = evaluate(predictor, &problem, &eval_cfg, cache.as_ref())?;
    let runtime = start.elapsed().as_secs_f64();
    if let (Some(c), Some(p)) = (&cache, &cfg.oracle_cache) {
        c.save(Path::new(p))?;
    }
    write_config_echo(&dir, &cfg)?;
    write_report(&dir, &cfg, &report, runtime, problem.grid.dt_coarse())?;
    println!(
        "abs_err {:.6} ± {:.6}  rel_err {:.6} ± {:.6}",
        report.abs_err.mean, report.abs_err.std, report.rel_err.mean, report.rel_err.std
    );
    Ok(())
}

fn write_report(dir: &Path, cfg: &ExperimentConfig, r: &EvalReport, runtime: f64, dt: f64) -> ppde_core::Result<()> {
    let json = serde_json::json!({
        "config_hash": json_hash(cfg)?,
        "abs_err": { "mean": r.abs_err.mean, "std": r.abs_err.std },
        "rel_err": { "mean": r.rel_err.mean, "std": r.rel_err.std },
        "runtime_s": runtime,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    let mut w = BufWriter::new(File::create(dir.join("eval.csv"))?);
    writeln!(w, "batch,abs_err,rel_err")?;
    for (b, (a, rel)) in r.batches.iter().enumerate() {
        writeln!(w, "{b},{a},{rel}")?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("rel_profile.csv"))?);
    writeln!(w, "t,rel_err")?;
    for (j, rel) in r.rel_profile.iter().enumerate() {
        writeln!(w, "{},{rel}", j as f64 * dt)?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("traces.csv"))?);
    writeln!(w, "path_id,t,u_true,u_hat")?;
    for tr in &r.traces {
        for ((t, u), uh) in tr.times.iter().zip(&tr.u_true).zip(&tr.u_hat) {
            writeln!(w, "{},{t},{u},{uh}", tr.path_id)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_oracle(common: &Common, n_sims: usize, prefix: Option<PathBuf>) -> ppde_core::Result<()> {
    let cfg = load_config(common)?;
    let problem = cfg.problem_spec()?;
    let seed = derive_seed(cfg.seed, &[TAG_ORACLE_CMD]);
    let values = match prefix {
        Some(p) => {
            let file = File::open(&p).map_err(|e| Error::Config(format!("cannot open {}: {e}", p.display())))?;
            let mut paths = read_paths_csv(BufReader::new(file))?;
            if paths.len() != 1 {
                return Err(Error::Config(format!(
                    "prefix file holds {} paths, expected 1",
                    paths.len()
                )));
            }
            let (_, path): (u64, PiecewisePath) = paths.remove(0);
            path.values().to_vec()
        }
        None => problem.init.sample(problem.dim(), &mut stream_rng(seed, 0))?,
    };
    let est = mc_oracle(&problem, &values, n_sims, seed)?;
    let text = format!("mean,std_err\n{},{}\n", est.mean, est.std_err);
    print!("{text}");
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("oracle.csv"), &text)?;
        write_config_echo(dir, &cfg)?;
    }
    Ok(())
}

fn cmd_simulate(common: &Common, n_paths: usize) -> ppde_core::Result<()> {
    let cfg = load_config(common)?;
    let problem = cfg.problem_spec()?;
    let dir = out_dir(common)?;
    let seed = derive_seed(cfg.seed, &[TAG_SIMULATE]);
    let paths = simulate_batch(&problem.dynamics, &problem.init, &problem.grid, n_paths, seed)?;
    let mut w = BufWriter::new(File::create(dir.join("paths.csv"))?);
    write_paths_csv(&mut w, &paths)?;
    w.flush()?;
    write_config_echo(&dir, &cfg)?;
    eprintln!("wrote {} paths to {}", n_paths, dir.join("paths.csv").display());
    Ok(())
}
