//! Command-line front end: synthesis, simulation campaigns and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use iqctube::config::ProjectConfig;
use iqctube::mpc::NuMode;
use iqctube::pipeline::{synthesize, CertificateFile};
use iqctube::report::{ordering, write_tube_csv, Report, SchemeColumn};
use iqctube::sim::{run_batch, summarize, write_csv, BatchSummary, RunLog, RunOutcome};
use iqctube::Error;

const CERTIFICATE: &str = "certificate.json";
const CONFIG: &str = "config.json";

#[derive(Parser)]
#[command(name = "iqctube", version, about = "Output-feedback tube MPC with IQC-described uncertainties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in example configuration.
    Init {
        #[arg(long, default_value = "config.json")]
        path: PathBuf,
    },
    /// Run the offline design and write the certificate file.
    Synthesize(Common),
    /// Load (or synthesize) the design and run the scenario batch.
    Simulate(Common),
    /// Run both interpolation modes on matched seeds and write the
    /// comparison table and plot data.
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file; the built-in example when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    nu: Option<NuArg>,
    #[arg(long, value_enum)]
    rowwise: Option<Switch>,
    /// Strictness margin of the LMIs.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NuArg {
    Fixed1,
    Optimize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Common {
    fn config(&self) -> Result<ProjectConfig> {
        let mut cfg = match &self.config {
            Some(p) => ProjectConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
                other => other,
            })?,
            None => ProjectConfig::example(),
        };
        if let Some(r) = self.rho {
            cfg.rho = r;
        }
        if let Some(n) = self.horizon {
            cfg.horizon = n;
        }
        if let Some(s) = self.seeds {
            cfg.scenario.seeds = s;
        }
        if let Some(s) = self.steps {
            cfg.scenario.steps = s;
        }
        if let Some(nu) = self.nu {
            cfg.scenario.nu = match nu {
                NuArg::Fixed1 => NuMode::Fixed1,
                NuArg::Optimize => NuMode::Optimize,
            };
        }
        if let Some(r) = self.rowwise {
            cfg.rowwise = matches!(r, Switch::On);
        }
        if let Some(e) = self.eps {
            cfg.solver.strict_eps = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_design(file: &CertificateFile) {
    println!("gamma   = {:.6}", file.analysis.gamma);
    println!("gamma_o = {:.6}", file.estimator_certificate.gamma_o);
    if file.rowwise.is_some() {
        for (i, (g, go)) in file.row_gammas().iter().zip(file.row_gammas_o()).enumerate() {
            let r = &file.rows[i];
            println!("row {i} (signal {}, bound {:+}): gamma_i = {g:.6}, gamma_o_i = {go:.6}", r.source, r.bound);
        }
    }
    println!("terminal theta_f = {:.6e}", file.terminal.theta_f);
}

/// Synthesizes the design and writes it with the effective configuration.
fn design(cfg: &ProjectConfig, out: &Path) -> Result<(CertificateFile, f64)> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let file = synthesize(cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    file.save(&out.join(CERTIFICATE))?;
    fs::write(out.join(CONFIG), cfg.to_json()?)?;
    Ok((file, seconds))
}

/// Reuses a certificate in `out` when it matches the configuration.
fn load_or_design(cfg: &ProjectConfig, out: &Path) -> Result<(CertificateFile, f64)> {
    let path = out.join(CERTIFICATE);
    if path.exists() {
        match CertificateFile::load_verified(&path, cfg) {
            Ok((file, _)) => return Ok((file, 0.0)),
            Err(e) if matches!(e.root(), Error::CertificateInvalid(_)) => {
                eprintln!("stored certificate does not match the configuration ({e}); synthesizing");
            }
            Err(e) => return Err(e.into()),
        }
    }
    design(cfg, out)
}

fn write_runs(logs: &[RunLog], dir: &Path, tag: &str) -> Result<()> {
    let dir = dir.join(format!("runs_{tag}"));
    fs::create_dir_all(&dir)?;
    for log in logs {
        write_csv(log, fs::File::create(dir.join(format!("seed_{:04}.csv", log.seed)))?)?;
    }
    Ok(())
}

fn campaign(cfg: &ProjectConfig, file: &CertificateFile, out: &Path, tag: &str) -> Result<(Vec<RunLog>, BatchSummary)> {
    let logs = run_batch(cfg, file)?;
    write_runs(&logs, out, tag)?;
    let summary = summarize(&logs, &file.q_weight, cfg.scenario.report_time);
    fs::write(out.join(format!("summary_{tag}.json")), serde_json::to_string_pretty(&summary)?)?;
    Ok((logs, summary))
}

fn print_summary(tag: &str, s: &BatchSummary) {
    println!(
        "{tag}: {} runs, mean cost {:.2}, infeasible starts {}, late infeasibilities {}, runs with violations {}",
        s.runs.len(),
        s.mean_cost.unwrap_or(f64::NAN),
        s.infeasible_starts,
        s.late_infeasibilities,
        s.violations
    );
}

fn check_runs(logs: &[RunLog]) -> Result<()> {
    for log in logs {
        log.check()?;
    }
    let starts: Vec<u64> = logs.iter().filter(|l| matches!(l.outcome, RunOutcome::Infeasible { t: 0, .. })).map(|l| l.seed).collect();
    if !starts.is_empty() {
        return Err(Error::Infeasible(format!("MPC infeasible at t = 0 for seeds {starts:?}")).into());
    }
    Ok(())
}

fn mode_tag(mode: NuMode) -> String {
    match mode {
        NuMode::Fixed1 => "fixed1".into(),
        NuMode::Optimize => "optimize".into(),
        NuMode::Grid(n) => format!("grid{n}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { path } => {
            fs::write(&path, ProjectConfig::example().to_json()?)?;
            println!("wrote {}", path.display());
        }
        Command::Synthesize(c) => {
            let cfg = c.config()?;
            let (file, seconds) = design(&cfg, &c.out)?;
            print_design(&file);
            println!("synthesis took {seconds:.2}s; wrote {}", c.out.join(CERTIFICATE).display());
        }
        Command::Simulate(c) => {
            let cfg = c.config()?;
            let (file, _) = load_or_design(&cfg, &c.out)?;
            let tag = mode_tag(cfg.scenario.nu);
            let (logs, summary) = campaign(&cfg, &file, &c.out, &tag)?;
            print_summary(&tag, &summary);
            check_runs(&logs)?;
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let (file, offline) = design(&cfg, &c.out)?;
            print_design(&file);
            let mut batches = Vec::new();
            for mode in [NuMode::Fixed1, NuMode::Optimize] {
                let mut m = cfg.clone();
                m.scenario.nu = mode;
                let tag = mode_tag(mode);
                let (logs, summary) = campaign(&m, &file, &c.out, &tag)?;
                print_summary(&tag, &summary);
                if let Some(first) = logs.first() {
                    write_tube_csv(first, &file.rows, fs::File::create(c.out.join(format!("tube_{tag}.csv")))?)?;
                }
                batches.push((tag, logs, summary));
            }
            let columns = batches.iter().map(|(t, _, s)| SchemeColumn::from_summary(&format!("nu {t}"), s, offline)).collect();
            let order = ordering(("nu fixed1", &batches[0].2), ("nu optimize", &batches[1].2), 0.0)?;
            let report = Report { report_time: cfg.scenario.report_time, columns, orderings: vec![order] };
            let md = report.to_markdown();
            fs::write(c.out.join("report.md"), &md)?;
            fs::write(c.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{md}");
            for (_, logs, _) in &batches {
                check_runs(logs)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(
            Error::Infeasible(_)
            | Error::NumericalFailure(_)
            | Error::NoStabilizingController(_)
            | Error::PreconditionViolated(_)
            | Error::InfeasibleTerminal(_)
            | Error::ReconstructionIllConditioned(_)
            | Error::CertificateInvalid(_),
        ) => 2,
        Some(Error::ViolationFound(_)) => 3,
        Some(Error::Config(_) | Error::Json(_) | Error::InvalidParameter(_) | Error::DimensionMismatch(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
