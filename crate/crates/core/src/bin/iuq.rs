//! Command-line front end for scenario runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use iuq::harness::config::{Method, ScenarioConfig};
use iuq::harness::report::{bands_csv, build_report, render, stamp, write_text, BANDS_FILE, REPORT_FILE};
use iuq::harness::run::Scenario;
use iuq::IuqError;

#[derive(Parser)]
#[command(name = "iuq", version, about = "Inverse uncertainty quantification scenarios")]
struct Cli {
    /// Scenario configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `output.dir` or `./out`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for model evaluations.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the experiment data set to `experiments.csv`.
    Generate,
    /// Run one IUQ method and write its result block.
    Iuq {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Propagate each configured method's result and write `bands.csv`.
    Fuq,
    /// Envelope check of the data for each configured method.
    Envelope,
    /// Full run: data, methods, propagation, envelope, `report.json` and `bands.csv`.
    Report,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

/// 2 for bad input or configuration, 3 for numerical or method failures.
fn exit_code(e: &IuqError) -> u8 {
    match e {
        IuqError::InvalidInput(_) | IuqError::DimensionMismatch { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> iuq::Result<()> {
    let path = cli.config.as_deref().ok_or_else(|| IuqError::invalid("--config is required"))?;
    let loaded = ScenarioConfig::load(path)?;
    let out = out_dir(cli, &loaded.config, path);
    let sc = Scenario::new(loaded, cli.seed)?;
    match &cli.command {
        Command::Generate => {
            let recs = sc.experiments()?;
            let mut buf = Vec::new();
            iuq::harness::data::write_experiments(sc.model.as_ref(), &recs, &mut buf)?;
            let p = out.join("experiments.csv");
            write_text(&p, &String::from_utf8_lossy(&buf))?;
            println!("{}", p.display());
        }
        Command::Iuq { method } => {
            let recs = sc.experiments()?;
            let outcome = sc.run_method(*method, &recs)?;
            let mut root = stamp(&sc);
            root.insert("method".into(), json!(method.name()));
            root.insert("result".into(), outcome.result);
            let p = out.join(format!("iuq-{}.json", method.name()));
            write_text(&p, &render(&serde_json::Value::Object(root))?)?;
            println!("{}", p.display());
        }
        Command::Fuq => {
            let run = sc.run(&sc.config.methods)?;
            let p = out.join(BANDS_FILE);
            write_text(&p, &bands_csv(sc.model.as_ref(), &run)?)?;
            println!("{}", p.display());
        }
        Command::Envelope => {
            let run = sc.run(&sc.config.methods)?;
            let mut root = stamp(&sc);
            let mut env = serde_json::Map::new();
            if let Some(b) = &run.baseline {
                println!("truth: coverage {:.4} ({})", b.envelope.fraction, verdict(b.envelope.pass));
                env.insert("truth".into(), serde_json::to_value(&b.envelope).expect("envelope serialises"));
            }
            for m in &run.methods {
                let e = &m.propagation.envelope;
                println!("{}: coverage {:.4} ({})", m.outcome.method.name(), e.fraction, verdict(e.pass));
                env.insert(m.outcome.method.name().into(), serde_json::to_value(e).expect("envelope serialises"));
            }
            root.insert("envelopes".into(), serde_json::Value::Object(env));
            write_text(&out.join("envelope.json"), &render(&serde_json::Value::Object(root))?)?;
        }
        Command::Report => {
            let run = sc.run(&sc.config.methods)?;
            let report = build_report(&sc, &run)?;
            let rp = out.join(REPORT_FILE);
            write_text(&rp, &render(&report)?)?;
            write_text(&out.join(BANDS_FILE), &bands_csv(sc.model.as_ref(), &run)?)?;
            println!("{}", rp.display());
        }
    }
    Ok(())
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

fn out_dir(cli: &Cli, cfg: &ScenarioConfig, config_path: &Path) -> PathBuf {
    if let Some(d) = &cli.out_dir {
        return d.clone();
    }
    match &cfg.output.dir {
        Some(d) if d.is_relative() => config_path.parent().unwrap_or(Path::new(".")).join(d),
        Some(d) => d.clone(),
        None => PathBuf::from("out"),
    }
}
