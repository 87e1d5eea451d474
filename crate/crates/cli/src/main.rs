use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;
use splap_core::cli_io::{
    parse_config_with, read_config, run_measure_lab, run_stages, run_sweep, write_measure_lab, write_outputs, Outcome,
    RunConfig, RunReport, Stage, DEMO_CONFIG,
};
use splap_core::Error;

#[derive(Parser)]
#[command(name = "splap", version, about = "Finite-element runs for −Δ_p u = f(u) + g(∇u) on planar polygons")]
struct Cli {
    /// TOML run configuration; the built-in demo problem when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: `output` from the config, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allows p ≥ 2 and other settings outside the theory.
    #[arg(long, global = true)]
    validation_mode: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hypotheses, growth conditions and the small-solution branch.
    Check,
    /// First eigenpair only.
    Eig,
    /// Up to the sub-solution.
    Subsol,
    /// The whole pipeline.
    Solve,
    /// Null-projection, counterexample and plateau records.
    MeasureLab {
        /// Exponent of the power map.
        #[arg(long, default_value_t = 1.5)]
        p: f64,
    },
    /// Full runs of several configurations in parallel, each written to
    /// `<out>/<file stem>/`.
    Sweep {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Prints the gates of an existing `report.json`.
    Report {
        /// A report file or a directory holding `report.json`.
        path: Option<PathBuf>,
    },
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => read_config(path, cli.validation_mode)?,
        None => parse_config_with(DEMO_CONFIG, cli.validation_mode)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn print_report(rep: &RunReport) {
    if let Some(e) = &rep.eigenpair {
        println!("lambda1 = {:.6} ({} iterations)", e.lambda1, e.iterations);
    }
    if let Some(s) = &rep.subsolution {
        println!(
            "subsolution: k = {:.4e}, delta = {:.4e}, {:?}, margin {:.3e}",
            s.summary.k, s.summary.delta, s.summary.branch, s.margin
        );
    }
    if let Some(t) = &rep.trace {
        for r in &t.records {
            println!(
                "eps {:.4e}: sup {:.6}, grad sup {:.6}, {} iterations",
                r.epsilon, r.sup_norm, r.grad_sup_norm, r.iterations
            );
        }
    }
    for g in &rep.gates {
        println!("{:<15} {} {}", g.name, if g.passed { "PASS" } else { "FAIL" }, g.detail);
    }
    if let Some(r) = &rep.strong_residual {
        println!("strong residual: p90 {:.4e}, median {:.4e} over {} vertices", r.percentile90, r.median, r.evaluated);
    }
    match &rep.outcome {
        Outcome::Pass => println!("outcome: pass"),
        Outcome::GateFailure { gate } => println!("outcome: gate `{gate}` failed"),
        Outcome::SolverFailure { message } => println!("outcome: solver failure: {message}"),
    }
}

fn code_for(outcome: &Outcome) -> ExitCode {
    match outcome {
        Outcome::Pass => ExitCode::SUCCESS,
        _ => ExitCode::from(2),
    }
}

fn show_saved(path: &Path) -> Result<ExitCode, Error> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::Argument(format!("{}: {e}", file.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Argument(format!("{}: {e}", file.display())))?;
    for g in v["gates"].as_array().into_iter().flatten() {
        let passed = g["passed"].as_bool().unwrap_or(false);
        println!(
            "{:<15} {} {}",
            g["name"].as_str().unwrap_or("?"),
            if passed { "PASS" } else { "FAIL" },
            g["detail"].as_str().unwrap_or("")
        );
    }
    let status = v["outcome"]["status"].as_str().unwrap_or("unknown");
    println!("outcome: {status}");
    Ok(if status == "pass" { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let stage = match &cli.command {
        Command::Check => Stage::Check,
        Command::Eig => Stage::Eig,
        Command::Subsol => Stage::Subsol,
        Command::Solve => Stage::Solve,
        Command::MeasureLab { p } => {
            let seed = match &cli.config {
                Some(_) => load(cli)?.seed,
                None => cli.seed.unwrap_or(0),
            };
            let records = run_measure_lab(*p, seed)?;
            let dir = out_dir(cli, None);
            let manifest = write_measure_lab(&records, &dir)?;
            let np = &records.null_projection;
            println!(
                "null projection: {} runs, all below N·Lip·eps: {}, scaling deviation {:.3}",
                np.runs.len(),
                np.all_below_bound,
                np.scaling_deviation
            );
            for l in &records.locality.levels {
                println!("plateau n = {}: {:?}", l.n, l.result);
            }
            println!("wrote {} files under {}", manifest.files.len(), dir.display());
            let ok = np.all_below_bound && np.scaling_deviation <= 0.1;
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) });
        }
        Command::Sweep { configs } => {
            let cfgs = configs
                .iter()
                .map(|p| {
                    let mut c = read_config(p, cli.validation_mode)?;
                    if let Some(seed) = cli.seed {
                        c.seed = seed;
                    }
                    Ok(c)
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let root = out_dir(cli, None);
            let mut code = ExitCode::SUCCESS;
            for (path, result) in configs.iter().zip(run_sweep(&cfgs)) {
                let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
                match result {
                    Ok(report) => {
                        write_outputs(&report, &root.join(&stem))?;
                        println!("{stem}: {:?}", report.outcome);
                        if !report.passed() && code == ExitCode::SUCCESS {
                            code = ExitCode::from(2);
                        }
                    }
                    Err(e) => {
                        println!("{stem}: error: {e}");
                        code = ExitCode::from(1);
                    }
                }
            }
            return Ok(code);
        }
        Command::Report { path } => {
            let p = path.clone().unwrap_or_else(|| out_dir(cli, None));
            return show_saved(&p);
        }
    };
    let cfg = load(cli)?;
    let report = run_stages(&cfg, stage)?;
    print_report(&report);
    let dir = out_dir(cli, Some(&cfg));
    let manifest = write_outputs(&report, &dir)?;
    println!("wrote {} files under {}", manifest.files.len(), dir.display());
    Ok(code_for(&report.outcome))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
