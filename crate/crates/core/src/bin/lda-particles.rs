use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lda_particles::error::{Error, Result};
use lda_particles::harness::{
    render_report, reproduce_table1, run_experiment, ExperimentConfig, Method, MethodConfig, OutputFormat, RiskReport,
    Table1Preset,
};

#[derive(Parser)]
#[command(
    name = "lda-particles",
    version,
    about = "Compound loss risk measures by simulation, recursion and particle methods"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report format; overrides the config.
    #[arg(long, global = true, value_parser = parse_format)]
    out: Option<OutputFormat>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Reduce partial sums in a fixed order. Every estimator already does,
    /// so results never depend on --threads; the flag is kept for scripts.
    #[arg(long, global = true)]
    deterministic_reduction: bool,
    /// Record wall-clock seconds in the report metadata.
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Crude Monte Carlo.
    Simulate {
        /// Also write the simulated annual losses as CSV.
        #[arg(long)]
        samples_out: Option<PathBuf>,
    },
    /// Single-loss approximation.
    Sla,
    /// Discretized Panjer recursion.
    Panjer,
    /// Particle solution of the Panjer recursion.
    Particle,
    /// Multilevel splitting for tail probabilities.
    RareEvent,
    /// MC, particle and SLA columns for one of the two reference models.
    Table1 {
        #[arg(long, value_enum, default_value = "sigma05")]
        preset: Table1Preset,
        /// Fraction of the reference budgets (5e7 samples, 5e4 particles per point).
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
    },
}

fn parse_format(s: &str) -> std::result::Result<OutputFormat, String> {
    match s {
        "csv" => Ok(OutputFormat::Csv),
        "json" => Ok(OutputFormat::Json),
        _ => Err(format!("expected csv or json, got {s}")),
    }
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// Loads the config, filling in or checking the method block for `method`.
fn load_config(g: &Global, method: Method) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| config_error("--config", "this subcommand needs a config file"))?;
    let mut doc: Value =
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| config_error("<document>", e.to_string()))?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| config_error("<document>", "expected a JSON object"))?;
    match obj.get("method") {
        None => {
            let default = MethodConfig::default_for(method)
                .ok_or_else(|| config_error("method", format!("{} needs an explicit method block", method.as_str())))?;
            obj.insert(
                "method".into(),
                serde_json::to_value(default).expect("method serializes"),
            );
        }
        Some(m) => {
            let kind = m.get("kind").and_then(Value::as_str).unwrap_or("");
            if kind != method.as_str() {
                return Err(config_error(
                    "method.kind",
                    format!("config asks for `{kind}` but the subcommand runs `{}`", method.as_str()),
                ));
            }
        }
    }
    if let Some(seed) = g.seed {
        obj.insert("seed".into(), json!(seed));
    }
    ExperimentConfig::from_json(&doc.to_string())
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_error("--threads", e.to_string()))?;
    }
    let started = Instant::now();
    let (mut report, format): (RiskReport, OutputFormat) = match &cli.command {
        Command::Table1 { preset, scale } => (
            reproduce_table1(*preset, *scale, g.seed.unwrap_or(0))?,
            g.out.unwrap_or_default(),
        ),
        cmd => {
            let method = match cmd {
                Command::Simulate { .. } => Method::Mc,
                Command::Sla => Method::Sla,
                Command::Panjer => Method::Panjer,
                Command::Particle => Method::Particle,
                Command::RareEvent => Method::RareEvent,
                Command::Table1 { .. } => unreachable!(),
            };
            let cfg = load_config(g, method)?;
            if let (Command::Simulate { samples_out: Some(p) }, MethodConfig::Mc { samples, .. }) = (cmd, &cfg.method) {
                let batch = cfg.model.simulate(*samples, cfg.seed)?;
                batch.write_csv(std::io::BufWriter::new(std::fs::File::create(p)?))?;
            }
            (run_experiment(&cfg)?, g.out.unwrap_or(cfg.output))
        }
    };
    if g.timing {
        report.meta.runtime = Some(started.elapsed().as_secs_f64());
    }
    let text = render_report(&report, format);
    match &g.output {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut body = json!({"kind": e.kind(), "message": e.to_string()});
            if let Error::Config { field, .. } = &e {
                body["field"] = json!(field);
            }
            eprintln!("{}", json!({ "error": body }));
            ExitCode::from(if matches!(e, Error::Config { .. }) { 2 } else { 1 })
        }
    }
}
