//! `confscale`: spatial confounding adjustment paths, bandwidths, selection
//! rules and simulations from the command line.

mod lists;

use lists::List;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use confscale::adjust::{
    estimate_record, format_k_hat, fourier_path, tprs_outcome_path, tprs_preadjust_path, wavelet_path, NestedBasis,
};
use confscale::bandwidth::{effective_bandwidth_filter, effective_bandwidth_wavelet, tprs_bandwidth_curve};
use confscale::grid::dedupe_cells;
use confscale::selection::select;
use confscale::simulation::{default_tprs_dfs, run_scenario, write_replications_csv, Battery};
use confscale::wavelet::DEFAULT_FAMILY;
use confscale::{
    AdjustmentPath, BasisKind, Cohort, ConfounderKind, Error, Field, Grid, LoessConfig, Rule, SelectionOutcome,
    SimulationScenario,
};
use serde::Serialize;

/// Exit status for malformed input or invalid flags.
const EXIT_INPUT: u8 = 2;
/// Exit status for rank or degeneracy failures.
const EXIT_RANK: u8 = 3;

#[derive(Parser, Debug, Serialize)]
#[command(name = "confscale", version, about = "Spatial confounding adjustment at interpretable spatial scales")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Fit an adjustment path over a tuning grid for one basis.
    Adjust(AdjustArgs),
    /// Apply selection rules to a path written by `adjust`.
    Select(SelectArgs),
    /// Effective bandwidth of a basis over a tuning grid.
    Bandwidth(BandwidthArgs),
    /// Run a simulation scenario.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum BasisArg {
    Tprs,
    TprsPreadjust,
    Fourier,
    Wavelet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SimBasisArg {
    Unadjusted,
    Tprs,
    TprsPreadjust,
    Fourier,
    Wavelet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum WeightsArg {
    None,
    InverseCount,
}

#[derive(Args, Debug, Serialize)]
struct GridArgs {
    /// Grid shape as MxN (columns x rows).
    #[arg(long, value_parser = lists::parse_shape)]
    grid: (usize, usize),

    /// Physical extent as UxV; cells have spacing extent / shape.
    #[arg(long, value_parser = lists::parse_extent, default_value = "1x1")]
    extent: (f64, f64),
}

impl GridArgs {
    fn build(&self) -> Result<Grid, Error> {
        let (m, n) = self.grid;
        Grid::new(m, n, self.extent.0 / m as f64, self.extent.1 / n as f64, (0.0, 0.0))
    }
}

#[derive(Args, Debug, Serialize)]
struct TuningArgs {
    /// TPRS degrees of freedom, e.g. `3:20,25:100:5`.
    #[arg(long, value_parser = lists::usize_list, conflicts_with = "df")]
    df_grid: Option<List<usize>>,
    /// Single TPRS degrees of freedom.
    #[arg(long)]
    df: Option<usize>,
    /// Fourier cutoffs, e.g. `1:30`.
    #[arg(long, value_parser = lists::real_list, conflicts_with = "cutoff")]
    cutoff_grid: Option<List<f64>>,
    /// Single Fourier cutoff.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Wavelet thresholding levels, e.g. `0:5`.
    #[arg(long, value_parser = lists::usize_list, conflicts_with = "level")]
    level_grid: Option<List<usize>>,
    /// Single wavelet level.
    #[arg(long)]
    level: Option<usize>,
    /// Daubechies family (vanishing moments, 1..=10).
    #[arg(long)]
    family: Option<usize>,
}

impl TuningArgs {
    fn dfs(&self) -> Option<Vec<usize>> {
        self.df_grid.clone().map(|l| l.0).or(self.df.map(|d| vec![d]))
    }

    fn cutoffs(&self) -> Option<Vec<f64>> {
        self.cutoff_grid.clone().map(|l| l.0).or(self.cutoff.map(|c| vec![c]))
    }

    fn levels(&self) -> Option<Vec<usize>> {
        self.level_grid.clone().map(|l| l.0).or(self.level.map(|l| vec![l]))
    }

    /// Rejects tuning flags that do not belong to the chosen basis.
    fn check_for(&self, basis: BasisArg) -> Result<(), Error> {
        let tprs = matches!(basis, BasisArg::Tprs | BasisArg::TprsPreadjust);
        let clash = |flag: &str| Err(Error::InvalidConfig(format!("--{flag} does not apply to the {} basis", basis_name(basis))));
        if !tprs && self.dfs().is_some() {
            return clash("df/--df-grid");
        }
        if basis != BasisArg::Fourier && self.cutoffs().is_some() {
            return clash("cutoff/--cutoff-grid");
        }
        if basis != BasisArg::Wavelet && (self.levels().is_some() || self.family.is_some()) {
            return clash("level/--level-grid/--family");
        }
        Ok(())
    }
}

#[derive(Args, Debug, Serialize)]
struct AdjustArgs {
    /// Cohort CSV with columns id,u,v,x,y[,z1..][,weight].
    #[arg(long)]
    cohort: PathBuf,
    /// Gridded exposure CSV with columns u,v,value; required for filters.
    #[arg(long)]
    exposure: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum)]
    basis: BasisArg,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Selection rule applied to the path.
    #[arg(long, value_parser = parse_rule)]
    rule: Option<Rule>,
    /// Reference tuning value for the mse rule.
    #[arg(long)]
    m_prime: Option<f64>,
    /// Subject weights; defaults to the cohort's weight column if present.
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
}

#[derive(Args, Debug, Serialize)]
struct SelectArgs {
    /// Path JSON written by `adjust`.
    #[arg(long)]
    path: PathBuf,
    /// Rule to apply; every applicable rule if omitted.
    #[arg(long, value_parser = parse_rule)]
    rule: Option<Rule>,
    /// Reference tuning value for the mse rule; the largest on the path if unset.
    #[arg(long)]
    m_prime: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct BandwidthArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum)]
    basis: BasisArg,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Loess span for smoother bandwidths.
    #[arg(long)]
    span: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Scenario JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_confounder)]
    confounder: Option<ConfounderKind>,
    #[arg(long, value_parser = lists::parse_shape)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    target_bias: Option<f64>,
    #[arg(long)]
    g_range: Option<f64>,
    #[arg(long)]
    sigma_eps: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
    /// Estimators to run (comma-separated); all if omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    basis: Option<Vec<SimBasisArg>>,
    #[arg(long, value_parser = lists::usize_list)]
    df_grid: Option<List<usize>>,
    #[arg(long, value_parser = lists::real_list)]
    cutoff_grid: Option<List<f64>>,
    #[arg(long, value_parser = lists::usize_list)]
    level_grid: Option<List<usize>>,
    #[arg(long)]
    family: Option<usize>,
    /// Selection rules (comma-separated); all if omitted.
    #[arg(long, value_parser = parse_rule, value_delimiter = ',')]
    rule: Option<Vec<Rule>>,
    /// Reference tuning value for the mse rule; the largest on the path if unset.
    #[arg(long)]
    m_prime: Option<f64>,
    /// Full-size settings: 512x512 grid and 1000 replications.
    #[arg(long)]
    paper_scale: bool,
}

fn parse_rule(s: &str) -> Result<Rule, String> {
    s.parse::<Rule>().map_err(|e| e.to_string())
}

fn parse_confounder(s: &str) -> Result<ConfounderKind, String> {
    ConfounderKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown confounder `{s}` (expected f1..f6)"))
}

fn basis_name(b: BasisArg) -> &'static str {
    match b {
        BasisArg::Tprs => "tprs",
        BasisArg::TprsPreadjust => "tprs-preadjust",
        BasisArg::Fourier => "fourier",
        BasisArg::Wavelet => "wavelet",
    }
}

/// Maps library errors onto exit statuses.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::RankDeficient { .. } | Error::DegenerateLocations(_) | Error::NoConvergence(_) => EXIT_RANK,
        Error::Replication { source, .. } => exit_code(source),
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    fs::create_dir_all(&cli.out)?;
    let extra = match &cli.command {
        Command::Adjust(a) => cmd_adjust(a, &cli.out)?,
        Command::Select(a) => cmd_select(a, &cli.out)?,
        Command::Bandwidth(a) => cmd_bandwidth(a, &cli.out)?,
        Command::Simulate(a) => cmd_simulate(a, cli.seed, &cli.out)?,
    };
    write_sidecar(cli, extra, &cli.out)
}

/// Effective configuration, written next to the outputs.
fn write_sidecar(cli: &Cli, resolved: serde_json::Value, out: &Path) -> Result<(), Error> {
    let doc = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "invocation": cli,
        "resolved": resolved,
    });
    let mut w = BufWriter::new(File::create(out.join("config.json"))?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Reads a file, tagging parse errors with its name.
fn with_file<T>(path: &Path, r: Result<T, Error>) -> Result<T, Error> {
    r.map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

fn default_levels(grid: &Grid) -> Vec<usize> {
    let side = grid.m().max(grid.n()).next_power_of_two();
    let j = side.trailing_zeros() as usize;
    (0..j.saturating_sub(1)).collect()
}

fn build_path(args: &AdjustArgs, grid: &Grid, cohort: &Cohort) -> Result<AdjustmentPath, Error> {
    let t = &args.tuning;
    let exposure = || -> Result<Field, Error> {
        let p = args.exposure.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("--exposure is required for the {} basis", basis_name(args.basis)))
        })?;
        with_file(p, Field::read_csv(open(p)?, grid.clone()))
    };
    match args.basis {
        BasisArg::Tprs | BasisArg::TprsPreadjust => {
            let unique = dedupe_cells(cohort.location_index()).unique_locations.len();
            let dfs = t.dfs().unwrap_or_else(|| default_tprs_dfs().into_iter().filter(|&d| d <= unique).collect());
            let max_df = dfs.iter().copied().max().ok_or_else(|| Error::InvalidConfig("empty df grid".into()))?;
            let basis = NestedBasis::tprs_for_cells(grid, cohort.location_index(), max_df)?;
            let mut path = if args.basis == BasisArg::Tprs {
                tprs_outcome_path(cohort, &basis, &dfs)?
            } else {
                tprs_preadjust_path(cohort, &basis, &dfs)?
            };
            let tunings: Vec<usize> = path.tunings().iter().map(|&d| d as usize).collect();
            let curve = tprs_bandwidth_curve(grid, &tunings, &LoessConfig::default())?;
            path.set_k_hats(&curve.iter().map(|b| b.k_hat).collect::<Vec<_>>())?;
            Ok(path)
        }
        BasisArg::Fourier => {
            let cutoffs = t.cutoffs().unwrap_or_else(|| (1..=30).map(f64::from).collect());
            fourier_path(&exposure()?, cohort, &cutoffs)
        }
        BasisArg::Wavelet => {
            let levels = t.levels().unwrap_or_else(|| default_levels(grid));
            wavelet_path(&exposure()?, cohort, &levels, t.family.unwrap_or(DEFAULT_FAMILY))
        }
    }
}

fn cmd_adjust(args: &AdjustArgs, out: &Path) -> Result<serde_json::Value, Error> {
    args.tuning.check_for(args.basis)?;
    let grid = args.grid.build()?;
    let mut cohort = with_file(&args.cohort, Cohort::read_csv(open(&args.cohort)?, &grid))?;
    cohort = match args.weights {
        Some(WeightsArg::None) => cohort.with_weights(None)?,
        Some(WeightsArg::InverseCount) => {
            let w = cohort.inverse_count_weights();
            cohort.with_weights(Some(w))?
        }
        None => cohort,
    };
    let path = build_path(args, &grid, &cohort)?;
    path.write_csv(create(&out.join("estimates.csv"))?)?;
    serde_json::to_writer(create(&out.join("path.json"))?, &path)?;
    let selection = match args.rule {
        Some(rule) => {
            let outcome = select(&path, rule, args.m_prime)?;
            print_outcome(path.kind(), &outcome);
            let mut w = create(&out.join("selection.json"))?;
            serde_json::to_writer_pretty(&mut w, &outcome)?;
            writeln!(w)?;
            Some(outcome.tuning)
        }
        None => None,
    };
    Ok(serde_json::json!({
        "subjects": cohort.len(),
        "weighted": cohort.weights().is_some(),
        "tunings": path.tunings(),
        "selected": selection,
    }))
}

fn print_outcome(kind: BasisKind, o: &SelectionOutcome) {
    let e = &o.estimate;
    println!(
        "{} {}: m = {}, k_hat = {}, beta = {:.6} (se {:.6}, 95% CI {:.6} to {:.6}){}",
        kind.name(),
        o.rule,
        o.tuning,
        format_k_hat(e.k_hat),
        e.beta_hat,
        e.se_sandwich,
        e.ci95.0,
        e.ci95.1,
        if o.no_knee { " [no knee]" } else { "" }
    );
}

fn cmd_select(args: &SelectArgs, out: &Path) -> Result<serde_json::Value, Error> {
    let stored: AdjustmentPath = serde_json::from_reader(open(&args.path)?)?;
    // Re-validate: deserialisation bypasses the constructor.
    let path = AdjustmentPath::new(stored.kind(), stored.entries().to_vec())?;
    let rules: Vec<Rule> = match args.rule {
        Some(r) => vec![r],
        None => Rule::ALL
            .into_iter()
            .filter(|r| !r.needs_no_exposure() || path.entries().iter().all(|e| e.no_exposure.is_some()))
            .filter(|r| *r != Rule::Knee || path.len() >= 4)
            .collect(),
    };
    let mut table = csv::Writer::from_writer(create(&out.join("selection.csv"))?);
    table.write_record(["rule", "basis", "m", "k_hat", "beta", "se", "ci_lo", "ci_hi", "no_knee"])?;
    let mut criteria = csv::Writer::from_writer(create(&out.join("criteria.csv"))?);
    criteria.write_record(["rule", "m", "value"])?;
    let mut chosen = Vec::new();
    for rule in rules {
        let o = select(&path, rule, args.m_prime)?;
        print_outcome(path.kind(), &o);
        let rec = estimate_record(path.kind(), &o.estimate);
        let mut row = vec![rule.name().to_string()];
        row.extend(rec);
        row.push(o.no_knee.to_string());
        table.write_record(&row)?;
        for (m, v) in &o.diagnostics {
            criteria.write_record([rule.name().to_string(), m.to_string(), v.to_string()])?;
        }
        chosen.push(serde_json::json!({ "rule": rule, "m": o.tuning }));
    }
    table.flush()?;
    criteria.flush()?;
    Ok(serde_json::json!({ "basis": path.kind().name(), "selections": chosen }))
}

fn cmd_bandwidth(args: &BandwidthArgs, out: &Path) -> Result<serde_json::Value, Error> {
    args.tuning.check_for(args.basis)?;
    if args.span.is_some() && !matches!(args.basis, BasisArg::Tprs | BasisArg::TprsPreadjust) {
        return Err(Error::InvalidConfig("--span applies only to the tprs bases".into()));
    }
    let grid = args.grid.build()?;
    let t = &args.tuning;
    let rows: Vec<(f64, Option<f64>)> = match args.basis {
        BasisArg::Tprs | BasisArg::TprsPreadjust => {
            let dfs = t.dfs().unwrap_or_else(default_tprs_dfs);
            let cfg = LoessConfig { span: args.span.unwrap_or(LoessConfig::default().span), ..LoessConfig::default() };
            let curve = tprs_bandwidth_curve(&grid, &dfs, &cfg)?;
            dfs.iter().zip(curve).map(|(&d, b)| (d as f64, b.k_hat)).collect()
        }
        BasisArg::Fourier => t
            .cutoffs()
            .unwrap_or_else(|| (1..=30).map(f64::from).collect())
            .into_iter()
            .map(|w| Ok((w, effective_bandwidth_filter(w, &grid)?.k_hat)))
            .collect::<Result<_, Error>>()?,
        BasisArg::Wavelet => {
            let side = grid.m().max(grid.n()).next_power_of_two();
            let span = side as f64 * grid.spacing_u().max(grid.spacing_v());
            let levels = t.levels().unwrap_or_else(|| default_levels(&grid));
            let j = side.trailing_zeros() as usize;
            if let Some(&bad) = levels.iter().find(|&&l| l >= j.max(1)) {
                return Err(Error::LevelOutOfRange { level: bad, levels: j });
            }
            levels.into_iter().map(|l| (l as f64, effective_bandwidth_wavelet(l).k_hat.map(|k| k * span))).collect()
        }
    };
    let mut w = csv::Writer::from_writer(create(&out.join("bandwidth.csv"))?);
    w.write_record(["basis", "m", "k_hat"])?;
    for (m, k) in &rows {
        w.write_record([basis_name(args.basis).to_string(), m.to_string(), format_k_hat(*k)])?;
    }
    w.flush()?;
    Ok(serde_json::json!({ "rows": rows.len() }))
}

fn resolve_scenario(args: &SimulateArgs, seed: Option<u64>) -> Result<SimulationScenario, Error> {
    let mut s = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => SimulationScenario::default(),
    };
    if args.paper_scale {
        s = s.paper_scale();
    }
    if let Some(g) = args.grid {
        s.grid = [g.0, g.1];
    }
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = args.$field.clone() {
                s.$field = v;
            }
        };
    }
    set!(confounder);
    set!(beta);
    set!(target_bias);
    set!(g_range);
    set!(sigma_eps);
    set!(n);
    set!(replications);
    if let Some(v) = seed {
        s.seed = v;
    }
    let b = &mut s.battery;
    if let Some(list) = &args.basis {
        let has = |x: SimBasisArg| list.contains(&x);
        *b = Battery {
            unadjusted: has(SimBasisArg::Unadjusted),
            tprs: has(SimBasisArg::Tprs),
            tprs_preadjust: has(SimBasisArg::TprsPreadjust),
            fourier: has(SimBasisArg::Fourier),
            wavelet: has(SimBasisArg::Wavelet),
            ..b.clone()
        };
    }
    if let Some(v) = &args.df_grid {
        b.tprs_dfs = v.0.clone();
    }
    if let Some(v) = &args.cutoff_grid {
        b.cutoffs = v.0.clone();
    }
    if let Some(v) = &args.level_grid {
        b.levels = Some(v.0.clone());
    }
    if let Some(v) = args.family {
        b.family = v;
    }
    if let Some(v) = &args.rule {
        b.rules = v.clone();
    }
    if args.m_prime.is_some() {
        b.m_prime = args.m_prime;
    }
    s.validate()?;
    Ok(s)
}

fn cmd_simulate(args: &SimulateArgs, seed: Option<u64>, out: &Path) -> Result<serde_json::Value, Error> {
    let scenario = resolve_scenario(args, seed)?;
    let result = run_scenario(&scenario)?;
    write_replications_csv(&result.records, create(&out.join("replications.csv"))?)?;
    result.summary.write_csv(create(&out.join("summary.csv"))?)?;
    if let Some(u) = result.summary.get("unadjusted", "none") {
        println!("{}: theta = {:.6}, unadjusted mean = {:.4}", scenario.confounder.name(), result.summary.theta, u.mean);
    }
    Ok(serde_json::json!({ "scenario": scenario, "theta": result.summary.theta }))
}
