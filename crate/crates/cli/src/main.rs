use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use unitflow::harness::{
    convergence_driver, fmt17, preset, robustness_driver, run_experiment, scheme_by_name, work_precision_csv,
    work_precision_driver, write_text, ExperimentConfig, ReferencePolicy, RobustnessCell,
};
use unitflow::stability::{sample_region, PlaneSlice, RegionSpec};
use unitflow::tableau::{certify, order_condition_residuals, satisfied_order, validate, CertificateStatus, PSD_TOL};
use unitflow::{PrkTableau, Scheme};

/// Structure-preserving integrators for unit vector fields.
#[derive(Parser, Debug)]
#[command(name = "unitflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a tableau's structure, order conditions and dissipation certificate.
    CheckTableau(CheckTableau),
    /// Sample an absolute-stability region into a CSV mask.
    StabilityRegion(StabilityRegion),
    /// Run one experiment from a JSON config.
    Run(RunCmd),
    /// Temporal convergence table.
    Convergence(ConvergenceCmd),
    /// Errors at several checkpoints for a few large step sizes.
    Robustness(RobustnessCmd),
    /// Wall-clock time against error.
    WorkPrecision(WorkPrecisionCmd),
    /// Print a preset as a JSON config.
    DumpConfig {
        #[arg(long)]
        preset: String,
    },
}

#[derive(Args, Debug)]
struct CheckTableau {
    file: PathBuf,
    /// Order whose conditions must hold.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
    order: u8,
    /// Also require the energy-dissipation certificate.
    #[arg(long)]
    certify: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SliceArg {
    Z1,
    Z2,
    Both,
}

#[derive(Args, Debug)]
struct StabilityRegion {
    tableau: PathBuf,
    /// `re0,re1,im0,im1`
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-6.0, 2.0, -4.0, 4.0])]
    window: Vec<f64>,
    /// `NX,NY`
    #[arg(long, value_delimiter = ',', default_values_t = [400, 400])]
    res: Vec<usize>,
    /// Wedge half-angle in radians.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "z1")]
    slice: SliceArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunCmd {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Where the experiment comes from, plus common overrides.
#[derive(Args, Debug)]
struct Source {
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Intervals per axis.
    #[arg(long)]
    k: Option<usize>,
    /// Step size of the BDF4 reference.
    #[arg(long)]
    reference_tau: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
}

impl Source {
    fn load(&self, default_preset: &str) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (_, Some(path)) => ExperimentConfig::from_json(&read(path)?)?,
            (Some(name), None) => preset(name)?,
            (None, None) => preset(default_preset)?,
        };
        if let Some(k) = self.k {
            cfg.grid.k = k;
        }
        if let Some(tau) = self.reference_tau {
            cfg.reference = ReferencePolicy::Bdf4 { tau };
        }
        Ok(cfg)
    }

    fn schemes(&self, default: &[&str]) -> Result<Vec<(String, Scheme)>> {
        let names: Vec<String> = match &self.schemes {
            Some(v) => v.clone(),
            None => default.iter().map(|s| s.to_string()).collect(),
        };
        names
            .into_iter()
            .map(|n| Ok((n.clone(), scheme_by_name(&n)?)))
            .collect()
    }
}

#[derive(Args, Debug)]
struct ConvergenceCmd {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 3.2e-4)]
    tau0: f64,
    #[arg(long, default_value_t = 5)]
    halvings: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RobustnessCmd {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 2e-4])]
    taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.002, 0.004, 0.006, 0.008, 0.12, 0.2])]
    checkpoints: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WorkPrecisionCmd {
    #[command(flatten)]
    source: Source,
    /// `τ = tau0 / 2^j` for `j = 1..=levels`.
    #[arg(long, default_value_t = 2e-3)]
    tau0: f64,
    #[arg(long, default_value_t = 7)]
    levels: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.02, 0.08, 0.2])]
    times: Vec<f64>,
    /// Directory for one CSV per terminal time; stdout when absent.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            write_text(path, text)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn check_tableau(args: &CheckTableau) -> Result<bool> {
    let t = PrkTableau::from_json(&read(&args.file)?)?;
    let mut ok = true;
    println!("{}: {} stages", args.file.display(), t.stages());

    let report = validate(&t);
    if report.is_valid() {
        println!("structure: ok");
    } else {
        for v in &report.violations {
            println!("structure: {v}");
        }
        return Ok(false);
    }

    for r in order_condition_residuals(&t, args.order)? {
        println!("order {} {:<24} {:+.3e}", r.order, r.name, r.residual);
    }
    let achieved = satisfied_order(&t)?;
    println!("satisfied order: {achieved} (requested {})", args.order);
    if achieved < args.order {
        ok = false;
    }

    if args.certify {
        let c = certify(&t, PSD_TOL)?;
        println!("Q eigenvalues: {:?}", c.q_eigenvalues);
        println!("R eigenvalues: {:?}", c.r_eigenvalues);
        println!("b nonnegative: {}", c.b_nonnegative);
        let verdict = match c.status {
            CertificateStatus::Satisfied => "satisfied",
            CertificateStatus::Violated => "violated",
            CertificateStatus::Indeterminate => "indeterminate",
        };
        println!("dissipation certificate: {verdict}");
        ok &= c.satisfies_theorem;
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn stability_region(args: &StabilityRegion) -> Result<bool> {
    if args.window.len() != 4 || args.res.len() != 2 {
        bail!("--window takes re0,re1,im0,im1 and --res takes nx,ny");
    }
    let t = PrkTableau::from_json(&read(&args.tableau)?)?;
    let mut spec = RegionSpec::figure_preset();
    spec.re_min = args.window[0];
    spec.re_max = args.window[1];
    spec.im_min = args.window[2];
    spec.im_max = args.window[3];
    spec.nx = args.res[0];
    spec.ny = args.res[1];
    spec.alpha = args.alpha;
    spec.slice = match args.slice {
        SliceArg::Z1 => PlaneSlice::Z1,
        SliceArg::Z2 => PlaneSlice::Z2,
        SliceArg::Both => PlaneSlice::Both,
    };
    let region = sample_region(&t, &spec)?;
    let mut csv = String::from("re,im,inside,max_abs_R\n");
    for j in 0..spec.ny {
        for i in 0..spec.nx {
            let k = j * spec.nx + i;
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                fmt17(spec.re(i)),
                fmt17(spec.im(j)),
                region.mask[k] as u8,
                fmt17(region.max_abs_r[k])
            );
        }
    }
    write_text(&args.out, &csv)?;
    println!(
        "{} of {} points inside; wrote {}",
        region.inside_count(),
        spec.nx * spec.ny,
        args.out.display()
    );
    Ok(true)
}

fn run_cmd(args: &RunCmd) -> Result<bool> {
    let mut cfg = ExperimentConfig::from_json(&read(&args.config)?)?;
    if let Some(dir) = &args.output {
        cfg.output_dir = Some(dir.clone());
    }
    let out = run_experiment(&cfg)?;
    let trace = &out.output.trace;
    let last = trace.records.last();
    println!(
        "{}: {} steps of tau = {}, energy {} -> {}",
        trace.scheme,
        trace.records.len(),
        trace.tau,
        trace.initial_energy,
        last.map_or(trace.initial_energy, |r| r.energy)
    );
    let dev = trace.records.iter().map(|r| r.max_unit_dev).fold(0.0, f64::max);
    println!("max unit deviation {dev:e}");
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    if let Some(e) = &out.output.failure {
        println!("run stopped early: {e}");
        return Ok(false);
    }
    Ok(true)
}

fn convergence(args: &ConvergenceCmd) -> Result<bool> {
    let cfg = args.source.load("convergence41")?;
    let schemes = args.source.schemes(&["sip1", "prk2", "prk_alt", "lm2"])?;
    let table = convergence_driver(&cfg, &schemes, args.tau0, args.halvings, None)?;
    emit(&args.out, &table.to_csv())?;
    Ok(table.rows.iter().all(|r| r.error.is_some()))
}

fn robustness(args: &RobustnessCmd) -> Result<bool> {
    let mut cfg = args.source.load("llg_blowup42")?;
    if args.source.k.is_none() && args.source.config.is_none() {
        cfg.grid.k = 48;
    }
    if args.source.reference_tau.is_none() && args.source.config.is_none() {
        cfg.reference = ReferencePolicy::Bdf4 { tau: 1e-5 };
    }
    let schemes = args.source.schemes(&["lm2", "prk2", "prk_alt"])?;
    let table = robustness_driver(&cfg, &schemes, &args.taus, &args.checkpoints, None)?;
    emit(&args.out, &table.to_csv())?;
    // failures are data here, not errors
    let failed = table
        .rows
        .iter()
        .filter(|r| r.cells.iter().any(|c| !matches!(c, RobustnessCell::Error(_))))
        .count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed before the last checkpoint");
    }
    Ok(true)
}

fn work_precision(args: &WorkPrecisionCmd) -> Result<bool> {
    let mut cfg = args.source.load("llg_blowup42")?;
    if args.source.reference_tau.is_none() && args.source.config.is_none() {
        cfg.reference = ReferencePolicy::Bdf4 { tau: 1e-5 };
    }
    if args.levels == 0 {
        bail!("--levels must be at least 1");
    }
    let schemes = args.source.schemes(&["prk2", "prk_alt", "sip1"])?;
    let taus: Vec<f64> = (1..=args.levels).map(|j| args.tau0 / 2f64.powi(j as i32)).collect();
    let rows = work_precision_driver(&cfg, &schemes, &taus, &args.times, None)?;
    match &args.out_dir {
        Some(dir) => {
            for &t in &args.times {
                let subset: Vec<_> = rows.iter().filter(|r| r.t_end == t).cloned().collect();
                let path = dir.join(format!("work_precision_T{t}.csv"));
                write_text(&path, &work_precision_csv(&subset))?;
                eprintln!("wrote {}", path.display());
            }
        }
        None => print!("{}", work_precision_csv(&rows)),
    }
    Ok(true)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::CheckTableau(a) => check_tableau(a),
        Command::StabilityRegion(a) => stability_region(a),
        Command::Run(a) => run_cmd(a),
        Command::Convergence(a) => convergence(a),
        Command::Robustness(a) => robustness(a),
        Command::WorkPrecision(a) => work_precision(a),
        Command::DumpConfig { preset: name } => {
            println!("{}", preset(name)?.to_json());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
