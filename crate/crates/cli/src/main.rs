//! `manova`: spectral predictions and Monte Carlo checks for MANOVA
//! covariance estimators, driven by a TOML config.

mod output;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use manova_spectra::asymptotic::{check_vignette, checks_to_csv, compute_c, ExpansionConstants};
use manova_spectra::config::{load_config, ResolvedConfig, RunConfig};
use manova_spectra::eigenvector::{alignments_to_csv, predict_alignments, AlignmentPrediction};
use manova_spectra::fixed_point::SpectralProblem;
use manova_spectra::model::{compute_interaction_matrix, isotropic_approximation, validate_manova, ValidationReport};
use manova_spectra::montecarlo::{compare, simulate, ComparisonReport, EmpiricalSummary, SimulationConfig, XiDistribution};
use manova_spectra::outlier::{predict_outliers, PredictedOutlierSet, ScanConfig, DEFAULT_SCAN_STEP};
use manova_spectra::spectrum::{
    density_on_grid, detect_support, uniform_grid, SpectralDensity, SupportSet, DEFAULT_DELTA, DEFAULT_EPSILON,
    DEFAULT_GRID_STEP, DEFAULT_MIN_GAP, DEFAULT_THRESHOLD,
};
use manova_spectra::Error;

use output::{json_document, Format, OutputDir};

#[derive(Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    Density,
    Outliers,
    Align,
    Simulate,
    Compare,
    Validate,
    Expand,
}

#[derive(Parser)]
#[command(name = "manova", version, about = "Spectra, outliers and eigenvector alignments of MANOVA estimators")]
struct Invocation {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Bulk density and its support.
    Density(Flags),
    /// Predicted outlier locations.
    Outliers(Flags),
    /// Predicted eigenvector alignments at each simple outlier.
    Align(Flags),
    /// Monte Carlo replicates of the estimator.
    Simulate(Flags),
    /// Predictions matched against Monte Carlo replicates.
    Compare(Flags),
    /// MANOVA unbiasedness conditions of the design.
    Validate(Flags),
    /// Large-signal expansions against the exact predictions.
    Expand(Flags),
}

#[derive(Args, Clone)]
struct Flags {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    grid_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    grid_max: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    /// Height above the real axis for Stieltjes inversion.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Separation from the support below which eigenvalues are bulk.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Law of the signal coefficients: gaussian or rademacher.
    #[arg(long)]
    xi: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    threads: Option<usize>,
    /// Replace every noise covariance by `(Tr Σ̊_r / p) Id`.
    #[arg(long)]
    isotropic: bool,
    /// Histogram bins over the grid range.
    #[arg(long, default_value_t = 200)]
    bins: usize,
    /// Print the resolved plan and exit without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Serialize)]
struct GridPlan {
    min: f64,
    max: f64,
    step: f64,
    epsilon: f64,
    threshold: f64,
    min_gap: usize,
}

#[derive(Serialize)]
struct Plan {
    command: Command,
    config_path: PathBuf,
    config: RunConfig,
    isotropic: bool,
    grid: GridPlan,
    delta: f64,
    scan_step: f64,
    simulation: Option<SimulationConfig>,
    histogram_bins: usize,
    format: Format,
    threads: Option<usize>,
    outputs: Vec<String>,
}

impl Sub {
    fn split(self) -> (Command, Flags) {
        match self {
            Sub::Density(f) => (Command::Density, f),
            Sub::Outliers(f) => (Command::Outliers, f),
            Sub::Align(f) => (Command::Align, f),
            Sub::Simulate(f) => (Command::Simulate, f),
            Sub::Compare(f) => (Command::Compare, f),
            Sub::Validate(f) => (Command::Validate, f),
            Sub::Expand(f) => (Command::Expand, f),
        }
    }
}

fn outputs_for(command: Command, format: Format) -> Vec<String> {
    let names: &[&str] = match command {
        Command::Density => &["density", "support"],
        Command::Outliers => &["density", "support", "roots"],
        Command::Align => &["density", "support", "roots", "alignments"],
        Command::Simulate => &["density", "support", "empirical_outliers", "histogram", "summary"],
        Command::Compare => &[
            "density",
            "support",
            "roots",
            "alignments",
            "empirical_outliers",
            "histogram",
            "summary",
            "comparison",
        ],
        Command::Validate => &["validation"],
        Command::Expand => &["density", "support", "expansion"],
    };
    names
        .iter()
        .map(|n| {
            let ext = if *n == "summary" { "json" } else { format.extension() };
            format!("{n}.{ext}")
        })
        .collect()
}

struct RunContext {
    command: Command,
    flags: Flags,
    cfg: ResolvedConfig,
    problem: SpectralProblem,
    plan: Plan,
}

fn prepare(command: Command, flags: Flags) -> Result<RunContext> {
    let mut cfg = load_config(&flags.config)?;
    if flags.isotropic {
        cfg.noise = isotropic_approximation(&cfg.noise);
    }
    let problem = SpectralProblem::new(&compute_interaction_matrix(&cfg.design), &cfg.noise)?;
    let g = &cfg.raw.grid;
    // Default range from the norm bound on the spectrum, with a margin.
    let bound = 1.1 * problem.spectral_scale();
    let grid = GridPlan {
        min: flags.grid_min.or(g.min).unwrap_or(-bound),
        max: flags.grid_max.or(g.max).unwrap_or(bound),
        step: flags.grid_step.or(g.step).unwrap_or(DEFAULT_GRID_STEP),
        epsilon: flags.epsilon.or(g.epsilon).unwrap_or(DEFAULT_EPSILON),
        threshold: DEFAULT_THRESHOLD,
        min_gap: DEFAULT_MIN_GAP,
    };
    if !(grid.epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {}", grid.epsilon)).into());
    }
    if flags.bins == 0 {
        return Err(Error::Config("bins must be positive".into()).into());
    }
    let delta = flags.delta.or(g.delta).unwrap_or(DEFAULT_DELTA);
    let simulation = matches!(command, Command::Simulate | Command::Compare)
        .then(|| -> Result<SimulationConfig> {
            let mut s = cfg.simulation();
            if let Some(seed) = flags.seed {
                s.seed = seed;
            }
            if let Some(reps) = flags.reps {
                s.replicates = reps;
            }
            if let Some(xi) = &flags.xi {
                s.xi = XiDistribution::from_str(xi)?;
            }
            if flags.delta.is_some() || g.delta.is_some() {
                s.delta = delta;
            }
            Ok(s)
        })
        .transpose()?;
    let plan = Plan {
        command,
        config_path: flags.config.clone(),
        config: cfg.raw.clone(),
        isotropic: flags.isotropic,
        grid,
        delta,
        scan_step: DEFAULT_SCAN_STEP,
        simulation,
        histogram_bins: flags.bins,
        format: flags.format,
        threads: flags.threads,
        outputs: outputs_for(command, flags.format),
    };
    Ok(RunContext {
        command,
        flags,
        cfg,
        problem,
        plan,
    })
}

fn table<T: Serialize + ?Sized>(format: Format, kind: &str, csv: impl FnOnce() -> String, data: &T) -> Result<String> {
    match format {
        Format::Csv => Ok(csv()),
        Format::Json => json_document(kind, data),
    }
}

fn density_stage(ctx: &RunContext, out: &mut OutputDir) -> Result<(SpectralDensity, SupportSet)> {
    let g = &ctx.plan.grid;
    let grid = uniform_grid(g.min, g.max, g.step)?;
    let sd = density_on_grid(&ctx.problem, &grid, g.epsilon)?;
    let support = detect_support(&sd, g.threshold, g.min_gap).with_delta(ctx.plan.delta);
    let f = ctx.flags.format;
    out.write(&format!("density.{}", f.extension()), &table(f, "density", || sd.to_csv(), &sd)?)?;
    out.write(&format!("support.{}", f.extension()), &table(f, "support", || support.to_csv(), &support)?)?;
    println!(
        "density: {} points, {} missing, mass {:.4} (atom {:.4}), support {:?}",
        sd.grid.len(),
        sd.missing(),
        sd.mass_estimate,
        sd.atom_mass,
        support.intervals
    );
    Ok((sd, support))
}

fn roots_stage(ctx: &RunContext, support: &SupportSet, out: &mut OutputDir) -> Result<PredictedOutlierSet> {
    let scan = ScanConfig {
        step: ctx.plan.scan_step,
        delta: ctx.plan.delta,
        ..ScanConfig::default()
    };
    let (roots, _) = predict_outliers(&ctx.problem, &ctx.cfg.signal, support, &scan)?;
    let f = ctx.flags.format;
    out.write(&format!("roots.{}", f.extension()), &table(f, "outlier_roots", || roots.to_csv(), &roots)?)?;
    println!("roots: {:?}", roots.multiset());
    for w in &roots.warnings {
        log::warn!("{w}");
    }
    Ok(roots)
}

fn align_stage(ctx: &RunContext, roots: &PredictedOutlierSet, out: &mut OutputDir) -> Result<Vec<AlignmentPrediction>> {
    let mut ok = Vec::new();
    let mut first_err = None;
    for r in predict_alignments(&ctx.problem, &ctx.cfg.signal, roots) {
        match r {
            Ok(a) => ok.push(a),
            Err(e) => {
                log::error!("alignment failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let f = ctx.flags.format;
    out.write(&format!("alignments.{}", f.extension()), &table(f, "alignment", || alignments_to_csv(&ok), &ok)?)?;
    if let Some(e) = first_err {
        return Err(e.into());
    }
    Ok(ok)
}

#[derive(Serialize)]
struct SimulationSummary<'a> {
    config: &'a SimulationConfig,
    replicates: usize,
    failed: &'a [usize],
    outlier_counts: Vec<usize>,
    mean_excess_outside: f64,
}

fn simulate_stage(ctx: &RunContext, support: &SupportSet, expected: usize, out: &mut OutputDir) -> Result<EmpiricalSummary> {
    let sim = ctx.plan.simulation.as_ref().expect("simulation plan");
    let summary = simulate(&ctx.cfg.design, &ctx.cfg.noise, &ctx.cfg.signal, support, sim)?;
    let f = ctx.flags.format;
    out.write(
        &format!("empirical_outliers.{}", f.extension()),
        &table(f, "empirical_outliers", || summary.outliers_to_csv(), &summary.replicates)?,
    )?;
    let g = &ctx.plan.grid;
    let bins = ctx.plan.histogram_bins;
    out.write(
        &format!("histogram.{}", f.extension()),
        &table(f, "eigenvalue_histogram", || summary.histogram_to_csv(g.min, g.max, bins), &summary.histogram(g.min, g.max, bins))?,
    )?;
    let s = SimulationSummary {
        config: sim,
        replicates: summary.replicates.len(),
        failed: &summary.failed,
        outlier_counts: summary.outlier_counts(),
        mean_excess_outside: summary.mean_excess_outside(expected),
    };
    out.write("summary.json", &json_document("simulation_summary", &s)?)?;
    println!(
        "simulate: {} replicates ({} failed), mean excess outside support {:.4}",
        s.replicates,
        s.failed.len(),
        s.mean_excess_outside
    );
    Ok(summary)
}

fn comparison_csv(report: &ComparisonReport) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    writeln!(
        s,
        "# schema_version=1 kind=comparison count_agreement={} mean_ordered_dist={} failed={}",
        report.count_agreement, report.mean_ordered_dist, report.failed_replicates
    )
    .unwrap();
    let l = report.roots.iter().map(|r| r.mean_projection.len()).max().unwrap_or(0);
    s.push_str("predicted,matched,empirical_mean,empirical_stderr,relative_error");
    for i in 1..=l {
        write!(s, ",predicted_projection_{i},mean_projection_{i},stderr_projection_{i}").unwrap();
    }
    s.push('\n');
    for r in &report.roots {
        write!(
            s,
            "{:.10},{},{:.10},{:.6e},{:.6e}",
            r.predicted, r.matched, r.empirical_mean, r.empirical_stderr, r.relative_error
        )
        .unwrap();
        for i in 0..l {
            let pred = r.predicted_projection.as_ref().map_or(f64::NAN, |p| p[i]);
            let mean = r.mean_projection.get(i).copied().unwrap_or(f64::NAN);
            let se = r.stderr_projection.get(i).copied().unwrap_or(f64::NAN);
            write!(s, ",{pred:.8e},{mean:.8e},{se:.6e}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn validation_csv(r: &ValidationReport) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    writeln!(s, "# schema_version=1 kind=validation target={} pass={}", r.target + 1, r.pass).unwrap();
    s.push_str("component,normalized_trace,expected,pass\n");
    for (i, v) in r.values.iter().enumerate() {
        let expected = if i == r.target { 1.0 } else { 0.0 };
        writeln!(s, "{},{v:.15e},{expected},{}", i + 1, (v - expected).abs() <= r.tolerance).unwrap();
    }
    if let (Some(res), Some(pass)) = (r.bx_residual, r.bx_pass) {
        writeln!(s, "bx_residual,{res:.6e},0,{pass}").unwrap();
    }
    s
}

/// `(μ₁, μ₂, ρ, other)` for a signal with one spike in the target component
/// and at most one in another.
fn vignette_of(cfg: &ResolvedConfig) -> Result<(f64, f64, f64, usize)> {
    let ell = cfg.signal.ell();
    let t = cfg.target;
    let others: Vec<usize> = (0..ell.len()).filter(|&r| r != t && ell[r] > 0).collect();
    if ell[t] > 1 || others.len() > 1 || others.iter().any(|&r| ell[r] != 1) {
        bail!(Error::Config(
            "expand needs at most one spike in the target component and at most one in one other component".into()
        ));
    }
    let other = others.first().copied().unwrap_or(if t == 0 { 1.min(ell.len() - 1) } else { 0 });
    if ell[t] == 1 && !others.is_empty() && other < t {
        bail!(Error::Config("expand needs the other spike in a later component than the target".into()));
    }
    let g1 = (ell[t] == 1).then(|| cfg.signal.component(t).row(0).transpose());
    let g2 = (!others.is_empty()).then(|| cfg.signal.component(other).row(0).transpose());
    let mu1 = g1.as_ref().map_or(0.0, |g| g.norm_squared());
    let mu2 = g2.as_ref().map_or(0.0, |g| g.norm_squared());
    let rho = match (&g1, &g2) {
        (Some(a), Some(b)) if mu1 > 0.0 && mu2 > 0.0 => a.dot(b) / (mu1 * mu2).sqrt(),
        _ => 0.0,
    };
    Ok((mu1, mu2, rho, other))
}

fn execute(ctx: &RunContext, out: &mut OutputDir) -> Result<()> {
    let f = ctx.flags.format;
    match ctx.command {
        Command::Validate => {
            let report = validate_manova(&ctx.cfg.design, ctx.cfg.target)?;
            out.write(&format!("validation.{}", f.extension()), &table(f, "validation", || validation_csv(&report), &report)?)?;
            println!("validate: values {:?}, pass {}", report.values, report.pass);
            if !report.pass {
                bail!(Error::Config("design fails the MANOVA conditions".into()));
            }
        }
        Command::Density => {
            density_stage(ctx, out)?;
        }
        Command::Outliers => {
            let (_, support) = density_stage(ctx, out)?;
            roots_stage(ctx, &support, out)?;
        }
        Command::Align => {
            let (_, support) = density_stage(ctx, out)?;
            let roots = roots_stage(ctx, &support, out)?;
            align_stage(ctx, &roots, out)?;
        }
        Command::Simulate => {
            let (_, support) = density_stage(ctx, out)?;
            simulate_stage(ctx, &support, 0, out)?;
        }
        Command::Compare => {
            let (_, support) = density_stage(ctx, out)?;
            let roots = roots_stage(ctx, &support, out)?;
            let aligns = align_stage(ctx, &roots, out)?;
            let summary = simulate_stage(ctx, &support, roots.matched_multiset().len(), out)?;
            let report = compare(&summary, &roots, &aligns);
            out.write(&format!("comparison.{}", f.extension()), &table(f, "comparison", || comparison_csv(&report), &report)?)?;
            println!(
                "compare: count agreement {:.3}, mean ordered-dist {:.4}",
                report.count_agreement, report.mean_ordered_dist
            );
        }
        Command::Expand => {
            let (mu1, mu2, rho, other) = vignette_of(&ctx.cfg)?;
            let c = compute_c(&ctx.cfg.design, &ctx.cfg.noise)?;
            let (_, support) = density_stage(ctx, out)?;
            let consts = ExpansionConstants { c: c.clone(), rho, mu: vec![mu1, mu2] };
            let scan = ScanConfig {
                delta: ctx.plan.delta,
                ..ScanConfig::default()
            };
            let checks = check_vignette(&ctx.problem, &ctx.cfg.signal, &support, &consts, ctx.cfg.target, other, &scan)?;
            out.write(&format!("expansion.{}", f.extension()), &table(f, "expansion", || checks_to_csv(&checks), &checks)?)?;
            println!("expand: c = {c:?}");
            print!("{}", checks_to_csv(&checks));
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::Config(_) | Error::Io { .. } => 2,
                Error::NonConvergence { .. } | Error::WrongBranch { .. } | Error::SingularSystem { .. } | Error::NearSupport(_) => 3,
                Error::Multiplicity { .. } | Error::Inconsistency(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    4
}

fn run(sub: Sub) -> Result<()> {
    let (command, flags) = sub.split();
    if let Some(n) = flags.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = prepare(command, flags)?;
    if ctx.flags.dry_run {
        println!("{}", serde_json::to_string_pretty(&ctx.plan)?);
        return Ok(());
    }
    let mut out = OutputDir::create(&ctx.flags.out)?;
    let result = execute(&ctx, &mut out);
    out.finish(&ctx.plan, result.as_ref().err())?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let inv = Invocation::parse();
    match run(inv.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
