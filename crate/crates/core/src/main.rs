use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use conormal_lab::charts::{ModelName, ModelParams, ModelSpec};
use conormal_lab::conormal::SigmaSpec;
use conormal_lab::error::{LabError, Result};
use conormal_lab::scenarios::ops::{
    BreakLoopOp, FlowTrajectory, ReturnsScan, Separation, SphereKuznecov, TorusKuznecov, Transversality,
};
use conormal_lab::scenarios::{self, builtin, hash_manifest, list_builtin, OpSpec, Report, Scenario, Threshold, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "conormal-lab", version, about = "Conormal returns, transversality certificates and Kuznecov sums on model manifolds")]
struct Cli {
    /// Output root; every file is written below it
    #[arg(long, global = true, env = "CONORMAL_LAB_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads [default: available parallelism]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the seed of the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one orbit and write trajectory.csv
    Flow(FlowArgs),
    /// Conormal return table of Σ (returns.csv)
    Returns(ConfigArg),
    /// Transversality defects of the returns of Σ (transversality.csv)
    Transversality(ConfigArg),
    /// Apply a perturbation and verify its effect
    #[command(subcommand)]
    Perturb(PerturbCmd),
    /// Period-integral series, leading-term fit and remainder spectrum
    #[command(subcommand)]
    Kuznecov(KuznecovCmd),
    /// Run or list scenarios
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Verification suites
    #[command(subcommand)]
    Verify(VerifyCmd),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML file with optional `seed`, `[model]`, `[sigma]`, `[options]` and `[[thresholds]]`
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FlowArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Model name (overrides the config)
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelName>,
    /// Start point, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    /// Start covector, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    xi: Option<Vec<f64>>,
    /// Flow time
    #[arg(long)]
    t: Option<f64>,
}

#[derive(Subcommand)]
enum PerturbCmd {
    /// Diffeomorphism search that opens a closed conormal branch
    Diffeo(ConfigArg),
    /// Conformal tail perturbation that breaks a degenerate return
    Conformal(ConfigArg),
}

#[derive(Subcommand)]
enum KuznecovCmd {
    /// Closed line on a flat torus
    Torus(ConfigArg),
    /// Circle on the round sphere
    Sphere(ConfigArg),
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run a builtin scenario by name, or a scenario file by path
    Run {
        /// Builtin name (see `scenario list`) or path to a scenario TOML
        target: String,
    },
    /// List builtin scenarios
    List,
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Run every builtin scenario and write verify_manifest.txt
    All,
}

fn parse_model(s: &str) -> std::result::Result<ModelName, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        let names: Vec<&str> = ModelName::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown model `{s}` (one of: {})", names.join(", "))
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: DeserializeOwned + Default"))]
struct CommandConfig<T> {
    #[serde(default)]
    seed: u64,
    model: Option<ModelSpec>,
    sigma: Option<SigmaSpec>,
    #[serde(default)]
    options: T,
    #[serde(default)]
    thresholds: Vec<Threshold>,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<CommandConfig<T>> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    toml::from_str(&text).map_err(|e| {
        let file = path.map(|p| p.display().to_string()).unwrap_or_default();
        LabError::Config(format!("{file}: {e}"))
    })
}

fn torus_line() -> SigmaSpec {
    let p = 2.0 * std::f64::consts::PI;
    SigmaSpec::TorusLine { value: 0.0, period: p, sheet_period: p }
}

fn model(name: ModelName) -> ModelSpec {
    ModelSpec { name, params: ModelParams::default() }
}

/// Wrap a single op into an ad hoc scenario named after the subcommand.
fn command_scenario<T>(
    name: &str,
    cfg: CommandConfig<T>,
    default_model: Option<ModelSpec>,
    default_sigma: Option<SigmaSpec>,
    op: impl FnOnce(T) -> OpSpec,
) -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        claim: format!("{name} command"),
        seed: cfg.seed,
        model: cfg.model.or(default_model),
        sigma: cfg.sigma.or(default_sigma),
        pipeline: vec![op(cfg.options)],
        thresholds: cfg.thresholds,
    }
}

fn scenario_for(cmd: &Command) -> Result<Option<Scenario>> {
    let s = match cmd {
        Command::Flow(a) => {
            let mut cfg: CommandConfig<FlowTrajectory> = read_config(a.cfg.config.as_deref())?;
            if let Some(m) = a.model {
                cfg.model = Some(model(m));
            }
            if let Some(x) = &a.x {
                cfg.options.x = x.clone();
            }
            if let Some(xi) = &a.xi {
                cfg.options.xi = xi.clone();
            }
            if let Some(t) = a.t {
                cfg.options.t = t;
            }
            command_scenario("flow", cfg, Some(model(ModelName::FlatTorus)), None, OpSpec::FlowTrajectory)
        }
        Command::Returns(a) => {
            let cfg: CommandConfig<ReturnsScan> = read_config(a.config.as_deref())?;
            command_scenario("returns", cfg, Some(model(ModelName::FlatTorus)), Some(torus_line()), OpSpec::ReturnsScan)
        }
        Command::Transversality(a) => {
            let cfg: CommandConfig<Transversality> = read_config(a.config.as_deref())?;
            let (m, s) = (Some(model(ModelName::FlatTorus)), Some(torus_line()));
            command_scenario("transversality", cfg, m, s, OpSpec::Transversality)
        }
        Command::Perturb(PerturbCmd::Diffeo(a)) => {
            let cfg: CommandConfig<Separation> = read_config(a.config.as_deref())?;
            let (m, s) = (Some(model(ModelName::FlatTorus)), Some(torus_line()));
            command_scenario("perturb_diffeo", cfg, m, s, OpSpec::ClosedNormalSeparation)
        }
        Command::Perturb(PerturbCmd::Conformal(a)) => {
            let cfg: CommandConfig<BreakLoopOp> = read_config(a.config.as_deref())?;
            command_scenario("perturb_conformal", cfg, None, None, OpSpec::BreakLoop)
        }
        Command::Kuznecov(KuznecovCmd::Torus(a)) => {
            let cfg: CommandConfig<TorusKuznecov> = read_config(a.config.as_deref())?;
            let (m, s) = (Some(model(ModelName::FlatTorus)), Some(torus_line()));
            command_scenario("kuznecov_torus", cfg, m, s, OpSpec::KuznecovTorus)
        }
        Command::Kuznecov(KuznecovCmd::Sphere(a)) => {
            let cfg: CommandConfig<SphereKuznecov> = read_config(a.config.as_deref())?;
            let (m, s) = (Some(model(ModelName::RoundSphere)), Some(SigmaSpec::PolarGreatCircle { u_max: 1.2 }));
            command_scenario("kuznecov_sphere", cfg, m, s, OpSpec::KuznecovSphere)
        }
        Command::Scenario(ScenarioCmd::Run { target }) => {
            if list_builtin().contains(&target.as_str()) {
                builtin(target)?
            } else {
                let text = std::fs::read_to_string(target)
                    .map_err(|e| LabError::Config(format!("`{target}` is neither a builtin scenario nor a readable file: {e}")))?;
                Scenario::from_toml(&text).map_err(|e| LabError::Config(format!("{target}: {e}")))?
            }
        }
        Command::Scenario(ScenarioCmd::List) | Command::Verify(_) => return Ok(None),
    };
    Ok(Some(s))
}

fn run_one(mut s: Scenario, seed: Option<u64>, out: &Path) -> Result<Report> {
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let r = scenarios::run(&s, out)?;
    print!("{}", r.summary());
    Ok(r)
}

fn verify_all(out: &Path) -> Result<bool> {
    let runs = scenarios::verify_all(out);
    let mut ok = true;
    let mut reports = Vec::new();
    for (name, r) in runs {
        match r {
            Ok(r) => {
                println!("{} {name}", if r.pass { "PASS" } else { "FAIL" });
                ok &= r.pass;
                reports.push(r);
            }
            Err(e) => {
                println!("FAIL {name}: {e}");
                ok = false;
            }
        }
    }
    std::fs::write(out.join("verify_manifest.txt"), hash_manifest(out, &reports)?)?;
    Ok(ok)
}

fn real_main(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::Config(format!("worker pool: {e}")))?;
    }
    match &cli.command {
        Command::Scenario(ScenarioCmd::List) => {
            for n in list_builtin() {
                println!("{n}");
            }
            return Ok(true);
        }
        Command::Verify(VerifyCmd::All) => {
            std::fs::create_dir_all(&cli.out)?;
            return verify_all(&cli.out);
        }
        _ => {}
    }
    let s = scenario_for(&cli.command)?.expect("runnable command");
    Ok(run_one(s, cli.seed, &cli.out)?.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
