use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpsda::config::{epsilon_label, ConfigError, RunConfig};
use dpsda::engine::{period_matrices, EngineKind};
use dpsda::experiment::{
    load_schedule, render_report, run_experiment, run_privacy_audit, simulate_experiment,
    ExperimentError,
};

/// Differentially private distributed online dual averaging experiments.
#[derive(Parser)]
#[command(name = "dpsda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo regret experiment; writes rounds, aggregate, bounds (and accuracy) CSVs.
    Run(Common),
    /// Adjacent-stream privacy audit; writes audit CSVs.
    Audit(Common),
    /// Render report.md and regret.dat from the CSVs in --out.
    Report(Common),
    /// Evaluate the theoretical bounds from one replicate and print them.
    Bounds(Common),
    /// Check the topology schedule and print its mixing constants.
    CheckGraph(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated privacy levels, `inf` for non-private.
    #[arg(long)]
    epsilon: Option<String>,
    /// `C` or `PS`.
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// Any other config key as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(ConfigError::Invalid {
                key: a.clone(),
                value: String::new(),
                msg: "expected --key value".into(),
            });
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it.next().ok_or_else(|| ConfigError::Invalid {
            key: key.to_string(),
            value: String::new(),
            msg: "missing value".into(),
        })?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

impl Common {
    fn load(&self) -> Result<RunConfig, ExperimentError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
                path: path.clone(),
                source,
            })?;
            cfg.apply_text(&text)?;
        }
        let named = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("epsilon", &self.epsilon),
            ("engine", &self.engine),
            ("dataset", &self.dataset),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in parse_overrides(&self.overrides)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Run(c) => {
            let cfg = c.load()?;
            let out = run_experiment(&cfg)?;
            for s in &out.summaries {
                let t = s.mean_cost.len();
                println!(
                    "epsilon={} regret/T={} consensus={}",
                    epsilon_label(s.epsilon),
                    s.mean_regret_over_t[t - 1].map_or("n/a".into(), |v| format!("{v:.6}")),
                    s.mean_consensus[t - 1]
                );
            }
            eprintln!("wrote {}", cfg.out.display());
        }
        Command::Audit(c) => {
            let cfg = c.load()?;
            let out = run_privacy_audit(&cfg)?;
            for s in &out.summaries {
                println!(
                    "epsilon={} mean |x-x'| at t={}: {:.6e} (se {:.2e})",
                    epsilon_label(s.epsilon),
                    out.t0,
                    s.mean_diff,
                    s.se_diff
                );
            }
            eprintln!("wrote {}", cfg.out.display());
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            let report = render_report(&cfg.out)?;
            write(&cfg.out.join("report.md"), &report.markdown)?;
            if !report.curves.is_empty() {
                write(&cfg.out.join("regret.dat"), &report.curves)?;
            }
            print!("{}", report.markdown);
        }
        Command::Bounds(c) => {
            let mut cfg = c.load()?;
            cfg.replicates = 1;
            let out = simulate_experiment(&cfg)?;
            println!("epsilon,engine,consensus_bound,M,M_sqrt_T,empirical_regret_at_T,vacuous");
            for s in &out.summaries {
                let t = s.mean_cost.len();
                let b = &s.bounds;
                println!(
                    "{},{:?},{},{},{},{},{}",
                    epsilon_label(s.epsilon),
                    b.engine,
                    b.consensus_bound,
                    b.m,
                    b.regret_bound(t),
                    s.mean_regret(t).map_or(String::new(), |v| v.to_string()),
                    b.vacuous()
                );
            }
        }
        Command::CheckGraph(c) => {
            let cfg = c.load()?;
            let sched = load_schedule(&cfg)?;
            let connected = sched.check_window_connectivity();
            println!("nodes {}", sched.n());
            println!("period {}", sched.period());
            println!("window {}", sched.window());
            println!("directed {}", sched.is_directed());
            println!("window-connected {connected}");
            println!("rounds individually connected {}", sched.rounds_individually_connected());
            if !connected {
                return Err(dpsda::engine::EngineError::Disconnected(sched.window()).into());
            }
            let kind = cfg.engine;
            let mats = period_matrices(&sched, kind, cfg.weights);
            let phi = mats.iter().map(|m| m.phi()).fold(1.0, f64::min);
            let defect = mats.iter().map(|m| m.stochastic_defect()).fold(0.0, f64::max);
            let label = match kind {
                EngineKind::Circulation => "row",
                EngineKind::PushSum => "column",
            };
            println!("phi {phi}");
            println!("max {label}-sum defect {defect:e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 3 {
                eprintln!(
                    "datasets are not downloaded automatically; see README.md for where to get them"
                );
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_accept_both_forms() {
        let args: Vec<String> = ["--T", "20", "--n=5"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            parse_overrides(&args).unwrap(),
            vec![("T".into(), "20".into()), ("n".into(), "5".into())]
        );
        assert!(parse_overrides(&["--T".to_string()]).is_err());
        assert!(parse_overrides(&["T".to_string()]).is_err());
    }
}
