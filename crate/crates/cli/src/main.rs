use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use specshare::baselines::stationary_solve;
use specshare::checks::run_checks;
use specshare::config::{InstanceConfig, Scenario};
use specshare::dynamics::{check_epochwise_bound, membership_scenario, run_dynamic};
use specshare::harness::{run_experiment, write_csv, ExperimentSpec};
use specshare::its::its_solve;
use specshare::ldf::{run_ldf, write_decisions_jsonl};
use specshare::oracle::optimal_schedule_oracle;
use specshare::policy::discounted_metrics;
use specshare::rng::UserStreams;
use specshare::{Error, ErrorClass, Result};

/// Energy-efficient TDMA spectrum sharing: solve, schedule and simulate.
#[derive(Debug, Parser)]
#[command(name = "specshare", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Instance (or experiment) JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Number of slots to simulate (or prefix length for `oracle`).
    #[arg(long, global = true)]
    horizon: Option<usize>,

    /// Stopping tolerance of the rate bisection.
    #[arg(long, global = true)]
    precision: Option<f64>,

    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Worker threads for experiments (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimal instantaneous rates and deviation constants.
    Its,
    /// Simulate the longest-distance-first schedule.
    Ldf,
    /// Constant powers meeting every floor.
    Stationary,
    /// Monte-Carlo policy comparison from an experiment file.
    Compare,
    /// Users entering and leaving; without --config, the built-in scenario.
    Dynamic {
        /// Mean cross gain of the built-in scenario.
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
    },
    /// Exhaustive search over schedule prefixes.
    Oracle {
        /// Also report whether this prefix is optimal up to relabeling.
        #[arg(long)]
        expect: Option<String>,
    },
    /// Run the built-in invariant suite.
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Jsonl,
}

/// Success, or a reported outcome that still warrants a nonzero exit.
enum Outcome {
    Done,
    Infeasible,
    Failed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPECSHARE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => ExitCode::from(1),
        Ok(Outcome::Failed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Infeasible => 1,
                ErrorClass::Usage => 2,
                ErrorClass::Fault => 3,
            })
        }
    }
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(cli: &Cli, value: &serde_json::Value) -> Result<()> {
    let mut out = output(cli)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn scenario(cli: &Cli) -> Result<Scenario> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut s = InstanceConfig::load(path)?.build()?;
    if let Some(p) = cli.precision {
        s.precision = p;
    }
    Ok(s)
}

fn format(cli: &Cli, default: Format, allowed: &[Format]) -> Result<Format> {
    let f = cli.format.unwrap_or(default);
    if allowed.contains(&f) {
        Ok(f)
    } else {
        Err(Error::Config(format!("format {f:?} is not available for this command")))
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Its => its(cli),
        Command::Ldf => ldf(cli),
        Command::Stationary => stationary(cli),
        Command::Compare => compare(cli),
        Command::Dynamic { alpha } => dynamic(cli, *alpha),
        Command::Oracle { expect } => oracle(cli, expect.as_deref()),
        Command::Check => check(cli),
    }
}

fn its(cli: &Cli) -> Result<Outcome> {
    let fmt = format(cli, Format::Json, &[Format::Json, Format::Csv])?;
    let s = scenario(cli)?;
    let report = its_solve(&s.net, &s.sensing, &s.criterion, s.precision, s.monitoring)?;
    if fmt == Format::Json {
        write_json(cli, &report.to_json())?;
        return Ok(Outcome::Done);
    }
    let mut w = csv::Writer::from_writer(output(cli)?);
    w.write_record(["user", "r_star", "p_star", "mu_lower", "rate_cap", "kkt_multiplier"])?;
    let (sol, c) = (&report.solution, &report.constants);
    for i in 0..s.net.users() {
        w.write_record([
            i.to_string(),
            sol.rates[i].to_string(),
            sol.powers[i].to_string(),
            c.mu_lower[i].to_string(),
            c.rate_cap[i].to_string(),
            sol.kkt_multipliers[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(Outcome::Done)
}

fn ldf(cli: &Cli) -> Result<Outcome> {
    let fmt = format(cli, Format::Jsonl, &[Format::Jsonl, Format::Json, Format::Csv])?;
    let s = scenario(cli)?;
    let horizon = cli.horizon.unwrap_or(200);
    let report = its_solve(&s.net, &s.sensing, &s.criterion, s.precision, s.monitoring)?;
    let run = run_ldf(
        &s.net,
        &s.sensing,
        &report.solution,
        &report.constants,
        horizon,
        &mut UserStreams::new(cli.seed, &[]),
        s.form,
    )?;
    match fmt {
        Format::Jsonl => {
            let mut out = output(cli)?;
            write_decisions_jsonl(&run.decisions, &mut out)?;
            out.flush()?;
        }
        Format::Json => {
            let m = discounted_metrics(&run.trace, s.net.discount())?;
            let transmitters: Vec<Option<usize>> = (0..horizon).map(|t| run.trace.transmitter(t)).collect();
            write_json(
                cli,
                &json!({
                    "r_star": report.solution.rates,
                    "p_star": report.solution.powers,
                    "transmitters": transmitters,
                    "signals": run.trace.signals,
                    "throughput": m.throughput,
                    "power": m.power,
                    "tail_residual": m.tail_residual,
                    "worst_slack": run.worst_slack,
                    "clamp_events": run.clamp_events,
                }),
            )?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(output(cli)?);
            w.write_record(["t", "transmitter", "power", "y"])?;
            for t in 0..horizon {
                let i = run.trace.transmitter(t);
                w.write_record([
                    t.to_string(),
                    i.map(|i| (i + 1).to_string()).unwrap_or_default(),
                    i.map_or(0.0, |i| run.trace.profiles[t].power(i)).to_string(),
                    u8::from(run.trace.signals[t]).to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(Outcome::Done)
}

fn stationary(cli: &Cli) -> Result<Outcome> {
    let fmt = format(cli, Format::Json, &[Format::Json, Format::Csv])?;
    let s = scenario(cli)?;
    let sol = stationary_solve(&s.net);
    if fmt == Format::Json {
        let powers: Option<&[f64]> = sol.feasible.then_some(&sol.powers);
        write_json(cli, &json!({"feasible": sol.feasible, "powers": powers, "reason": sol.reason}))?;
    } else {
        let mut w = csv::Writer::from_writer(output(cli)?);
        w.write_record(["user", "power"])?;
        if sol.feasible {
            for (i, p) in sol.powers.iter().enumerate() {
                w.write_record([i.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
    }
    if !sol.feasible {
        eprintln!("infeasible: {}", sol.reason.as_deref().unwrap_or("no constant powers meet the floors"));
        return Ok(Outcome::Infeasible);
    }
    Ok(Outcome::Done)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn compare(cli: &Cli) -> Result<Outcome> {
    let fmt = format(cli, Format::Csv, &[Format::Csv, Format::Json])?;
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut spec = ExperimentSpec::from_json(&text)?;
    if let Some(h) = cli.horizon {
        spec.horizon = h;
    }
    if let Some(p) = cli.precision {
        spec.defaults.precision = p;
    }
    let result = run_experiment(&spec, cli.threads)?;
    match fmt {
        Format::Csv => {
            let mut out = output(cli)?;
            write_csv(&result, &mut out)?;
            out.flush()?;
        }
        _ => write_json(cli, &serde_json::to_value(&result)?)?,
    }
    if let Some(out) = &cli.out {
        let file = File::create(manifest_path(out))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &result.manifest)?;
    }
    Ok(Outcome::Done)
}

fn dynamic(cli: &Cli, alpha: f64) -> Result<Outcome> {
    let fmt = format(cli, Format::Json, &[Format::Json, Format::Jsonl, Format::Csv])?;
    let horizon = cli.horizon.unwrap_or(400);
    let scenario = match &cli.config {
        Some(_) => scenario(cli)?.dynamic(horizon),
        None => {
            let mut s = membership_scenario(cli.seed, alpha, horizon)?;
            if let Some(p) = cli.precision {
                s.precision = p;
            }
            s
        }
    };
    let run = run_dynamic(&scenario, &mut UserStreams::new(cli.seed, &[]))?;
    let report = check_epochwise_bound(&scenario.universe, &run.log, &run.trace);
    match fmt {
        Format::Json => write_json(
            cli,
            &json!({
                "epochs": run.log.to_json(),
                "rejected": run.log.rejected,
                "bounds_hold": report.holds(),
                "telescoping_error": report.telescoping_error,
                "violations": report.violations().collect::<Vec<_>>(),
            }),
        )?,
        Format::Jsonl => {
            let mut out = output(cli)?;
            run.trace.write_jsonl(&mut out)?;
            out.flush()?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(output(cli)?);
            w.write_record(["epoch", "t_k", "user", "gamma", "r_k", "p_k"])?;
            for (k, e) in run.log.epochs.iter().enumerate() {
                for (j, u) in e.users.iter().enumerate() {
                    w.write_record([
                        k.to_string(),
                        e.t_k.to_string(),
                        u.to_string(),
                        e.gamma[j].to_string(),
                        e.r_k[j].to_string(),
                        e.p_k[j].to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
    }
    if !report.holds() {
        eprintln!("epoch bound violated");
        return Ok(Outcome::Failed);
    }
    Ok(Outcome::Done)
}

fn oracle(cli: &Cli, expect: Option<&str>) -> Result<Outcome> {
    format(cli, Format::Json, &[Format::Json])?;
    let s = scenario(cli)?;
    let horizon = cli.horizon.unwrap_or(10);
    let res = optimal_schedule_oracle(&s.net, horizon)?;
    let expected = expect.map(|p| json!({"prefix": p, "optimal": res.contains_up_to_relabeling(p)}));
    write_json(
        cli,
        &json!({
            "prefix": res.best,
            "energy": res.energy,
            "shares": res.shares,
            "optimal_prefixes": res.optimal.len(),
            "evaluated": res.evaluated,
            "distinct_up_to_relabeling": res.classes(),
            "relaxation_exact": res.relaxation_exact,
            "expected": expected,
        }),
    )?;
    match expect {
        Some(p) if !res.contains_up_to_relabeling(p) => {
            eprintln!("{p} is not an optimal prefix");
            Ok(Outcome::Failed)
        }
        _ => Ok(Outcome::Done),
    }
}

fn check(cli: &Cli) -> Result<Outcome> {
    let fmt = format(cli, Format::Csv, &[Format::Csv, Format::Json])?;
    let results = run_checks();
    if fmt == Format::Json {
        write_json(cli, &serde_json::to_value(&results)?)?;
    } else {
        let mut out = output(cli)?;
        for r in &results {
            writeln!(out, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
        }
        out.flush()?;
    }
    if results.iter().all(|r| r.passed) {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::Failed)
    }
}
