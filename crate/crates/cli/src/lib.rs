// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: `simulate`, `tune`, `evaluate`, `verify`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pidgrad::config::{resolve_config, ExperimentConfig, SHIPPED};
use pidgrad::experiment::{
    controller_from_params, learning_curve_csv, read_params, write_atomic, write_params, write_trajectory_csv,
    Comparison, ControllerKind, Experiment,
};
use pidgrad::verify::{table, verify_all};
use pidgrad::Controller;

#[derive(Debug, Parser)]
#[command(name = "pidgrad", version, about = "Tune saturated PID loops by differentiating through the simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one closed-loop episode and write its trajectory CSV.
    Simulate(SimulateArgs),
    /// Tune the controller and write parameters and the learning curve.
    Tune(TuneArgs),
    /// Compare the four controllers on the train and test references.
    Evaluate(EvaluateArgs),
    /// Run the augmented-state / disturbance-feedback equivalence checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Config file, or the name of a shipped config (system1 … system4, system4-ramp).
    #[arg(long)]
    config: String,
    /// Reference seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tuning epochs; overrides the config.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "backcalc", value_parser = parse_kind)]
    controller: ControllerKind,
    /// `default` for the configured gains, or a parameter file written by `tune`.
    #[arg(long, default_value = "default")]
    gains: String,
    /// Index into the test references.
    #[arg(long, default_value_t = 0)]
    reference: usize,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    /// `optimized` tunes the static gains; `dynamic` also tunes the gain network.
    #[arg(long, default_value = "optimized", value_parser = parse_kind)]
    controller: ControllerKind,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Configs to check; all shipped systems when omitted.
    #[arg(long)]
    config: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_kind(s: &str) -> Result<ControllerKind, String> {
    s.parse()
}

type Failure = Box<dyn std::error::Error>;

/// Runs the CLI and returns the process exit code: 0 on success, 2 for usage
/// errors, 1 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Tune(a) => tune(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Verify(a) => verify(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn setup(common: &Common) -> Result<(Experiment, PathBuf), Failure> {
    let cfg = resolve_config(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((Experiment::new(cfg, common.seed)?, out))
}

fn comments(exp: &Experiment, kind: ControllerKind, epochs: usize) -> Vec<String> {
    vec![
        format!("controller = {kind}"),
        format!("config = {}", exp.config.name),
        format!("seed = {}", exp.seed),
        format!("epochs = {epochs}"),
    ]
}

fn simulate(a: SimulateArgs) -> Result<i32, Failure> {
    let (exp, out) = setup(&a.common)?;
    let reference = exp.test.get(a.reference).ok_or_else(|| {
        format!(
            "reference index {} out of range ({} test references)",
            a.reference,
            exp.test.len()
        )
    })?;
    let controller = if a.gains == "default" {
        match a.controller {
            ControllerKind::Initial => exp.initial_controller(),
            ControllerKind::Backcalc => exp.backcalc_controller(),
            ControllerKind::Optimized => exp.tune_static(a.common.epochs)?.tuned,
            ControllerKind::Dynamic => {
                let tuned = exp.tune_static(a.common.epochs)?.tuned;
                exp.tune_dynamic(&tuned, a.common.epochs)?.tuned
            }
        }
    } else {
        let params = read_params(Path::new(&a.gains))?;
        let template = match a.controller {
            ControllerKind::Initial => exp.initial.with_b(0.0),
            _ => exp.initial,
        };
        controller_from_params(template, exp.layout, &params)?
    };
    let res = exp.simulate(&controller, reference)?;
    let path = out.join(format!("trajectory_{}.csv", a.controller));
    write_trajectory_csv(&path, reference, &res)?;
    let saturated = res.saturated.iter().filter(|&&s| s).count();
    println!(
        "{}: {} steps, {saturated} saturated -> {}",
        exp.config.name,
        res.len(),
        path.display()
    );
    Ok(0)
}

fn tune(a: TuneArgs) -> Result<i32, Failure> {
    if !matches!(a.controller, ControllerKind::Optimized | ControllerKind::Dynamic) {
        return Err(format!("tune accepts --controller optimized or dynamic, not {}", a.controller).into());
    }
    let (exp, out) = setup(&a.common)?;
    let epochs = exp.static_tune_config(a.common.epochs).epochs;
    let report = exp.tune_static(a.common.epochs)?;
    write_outputs(&exp, &out, ControllerKind::Optimized, &report.tuned, &report, epochs)?;
    println!("{}: optimized train cost {}", exp.config.name, report.train);
    print_params(&report.tuned);
    if a.controller == ControllerKind::Dynamic {
        let epochs = exp.dynamic_tune_config(a.common.epochs).epochs;
        let dynamic = exp.tune_dynamic(&report.tuned, a.common.epochs)?;
        write_outputs(&exp, &out, ControllerKind::Dynamic, &dynamic.tuned, &dynamic, epochs)?;
        println!("{}: dynamic train cost {}", exp.config.name, dynamic.train);
    }
    println!("artifacts in {}", out.display());
    Ok(0)
}

fn write_outputs(
    exp: &Experiment,
    out: &Path,
    kind: ControllerKind,
    controller: &Controller<f64>,
    report: &pidgrad::TuneReport,
    epochs: usize,
) -> Result<(), Failure> {
    write_params(
        &out.join(format!("params_{kind}.txt")),
        controller,
        &comments(exp, kind, epochs),
    )?;
    write_atomic(
        &out.join(format!("learning_curve_{kind}.csv")),
        learning_curve_csv(report).as_bytes(),
    )?;
    Ok(())
}

fn print_params(c: &Controller<f64>) {
    let line = c
        .param_names()
        .iter()
        .zip(c.params())
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("  {line}");
}

fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from("controller,train_mean,train_std,test_mean,test_std\n");
    for r in &cmp.rows {
        let _ = writeln!(
            out,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.kind, r.train.mean, r.train.std, r.test.mean, r.test.std
        );
    }
    out
}

fn evaluate(a: EvaluateArgs) -> Result<i32, Failure> {
    let (exp, out) = setup(&a.common)?;
    let cmp = exp.compare(a.common.epochs)?;
    println!("{}", exp.config);
    print!("{}", cmp.table());
    write_atomic(&out.join("comparison.csv"), comparison_csv(&cmp).as_bytes())?;
    let static_epochs = exp.static_tune_config(a.common.epochs).epochs;
    let dynamic_epochs = exp.dynamic_tune_config(a.common.epochs).epochs;
    write_outputs(
        &exp,
        &out,
        ControllerKind::Optimized,
        &cmp.static_report.tuned,
        &cmp.static_report,
        static_epochs,
    )?;
    write_outputs(
        &exp,
        &out,
        ControllerKind::Dynamic,
        &cmp.dynamic_report.tuned,
        &cmp.dynamic_report,
        dynamic_epochs,
    )?;
    // Trajectories of the first test reference, one file per controller.
    let controllers = [
        exp.initial_controller(),
        exp.backcalc_controller(),
        cmp.static_report.tuned.clone(),
        cmp.dynamic_report.tuned.clone(),
    ];
    for (kind, c) in ControllerKind::ALL.into_iter().zip(&controllers) {
        match exp.simulate(c, &exp.test[0]) {
            Ok(res) => write_trajectory_csv(&out.join(format!("trajectory_{kind}.csv")), &exp.test[0], &res)?,
            Err(e) => eprintln!("trajectory for {kind} skipped: {e}"),
        }
    }
    println!("artifacts in {}", out.display());
    Ok(0)
}

fn verify(a: VerifyArgs) -> Result<i32, Failure> {
    let names: Vec<String> = if a.config.is_empty() {
        SHIPPED
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n != "system4-ramp")
            .collect()
    } else {
        a.config
    };
    let configs = names
        .iter()
        .map(|n| resolve_config(n))
        .collect::<Result<Vec<ExperimentConfig>, _>>()?;
    let checks = verify_all(&configs, a.seed)?;
    print!("{}", table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}
