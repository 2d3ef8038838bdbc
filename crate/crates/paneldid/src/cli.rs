//! Command-line front end.
//!
//! Five subcommands cover the workflow:
//!
//! * `validate` — check a long CSV against a column mapping, print the report
//! * `estimate` — fit ATT(g,t) plus aggregates with the chosen estimator;
//!   every run also writes the implicit-weight balance report for the same
//!   specification
//! * `balance` — that balance report alone; no outcome column needed
//! * `simulate` — draw a synthetic panel from a discrete population fixture
//! * `oracle-check` — re-verify the closed-form identities on population
//!   fixtures by exact enumeration
//!
//! Options may live in a JSON run config (`--config run.json`) or be given as
//! flags; flags win. The config is parsed and checked before any computation,
//! and unknown keys are errors. Every JSON output embeds `schema_version` and
//! the fully resolved configuration, so a result file is self-describing, and
//! a rerun with the same inputs and seed is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::balance::{aggregate_balance, balance_report, love_plot_svg, BalanceReport};
use crate::drdid::{
    aggregate_event_study, aggregate_overall, att_gt_aipw, att_gt_aipw_weights, att_gt_ipw,
    att_gt_ipw_weights, att_gt_ra, att_gt_ra_weights, bootstrap_se, build_design,
    overall_cell_weights, AggregateResult, AipwWeightReport, ComparisonGroup, CovMode,
    CovariateSpec, DrOptions, GroupTimeResult,
};
use crate::error::{Error, Result};
use crate::oracle::{
    alpha_decomposition, builtin_fixture, enumerate_population, simulate_sample,
    staggered_alpha_identity, trend_bias_decomposition, truth_att, DiscreteDgp, TruthAtt,
    BUILTIN_FIXTURES,
};
use crate::panel::{
    load_long_csv, validate_long_csv, ColumnSchema, LoadOptions, PanelDataset, ValidationReport,
};
use crate::twfe::{fit_fe_twfe, mp_implicit_weights, FeOptions, MpCell, MpWeightReport};

/// Version stamp embedded in every JSON output.
pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// option vocabulary (shared between flags and the run config)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Twfe,
    Ra,
    Ipw,
    Aipw,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Twfe => "twfe",
            Method::Ra => "ra",
            Method::Ipw => "ipw",
            Method::Aipw => "aipw",
        }
    }

    fn weight_source(self) -> WeightSource {
        match self {
            Method::Twfe => WeightSource::Twfe,
            Method::Ra => WeightSource::Ra,
            Method::Ipw => WeightSource::Ipw,
            Method::Aipw => WeightSource::Aipw,
        }
    }
}

/// Where the implicit comparison weights for a balance report come from.
/// `raw` means sampling weights only (every implicit weight is one), which is
/// the "before" column of a love plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Raw,
    Twfe,
    Ra,
    Ipw,
    Aipw,
}

impl WeightSource {
    fn as_str(self) -> &'static str {
        match self {
            WeightSource::Raw => "raw",
            WeightSource::Twfe => "twfe",
            WeightSource::Ra => "ra",
            WeightSource::Ipw => "ipw",
            WeightSource::Aipw => "aipw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Never-treated units only.
    Never,
    /// Units not yet treated at the evaluation period.
    NotYet,
}

impl Comparison {
    fn to_group(self) -> ComparisonGroup {
        match self {
            Comparison::Never => ComparisonGroup::NeverTreated,
            Comparison::NotYet => ComparisonGroup::NotYetTreated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CovModeArg {
    InterceptOnly,
    DeltaOnly,
    BaseLevel,
    DeltaPlusBase,
    Average,
    FullHistory,
}

impl CovModeArg {
    fn to_mode(self) -> CovMode {
        match self {
            CovModeArg::InterceptOnly => CovMode::InterceptOnly,
            CovModeArg::DeltaOnly => CovMode::DeltaOnly,
            CovModeArg::BaseLevel => CovMode::BaseLevel,
            CovModeArg::DeltaPlusBase => CovMode::DeltaPlusBase,
            CovModeArg::Average => CovMode::Average,
            CovModeArg::FullHistory => CovMode::FullHistory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Json,
    Csv,
    Svg,
}

// ---------------------------------------------------------------------------
// run config file
// ---------------------------------------------------------------------------

/// JSON run configuration. Every field is optional; command-line flags
/// override file values, and unknown keys are rejected up front.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub schema: Option<ColumnSchema>,
    pub method: Option<Method>,
    pub covariates: Option<CovariateSpec>,
    pub comparison: Option<Comparison>,
    pub anticipation: Option<usize>,
    pub bootstrap: Option<usize>,
    pub seed: Option<u64>,
    pub trim: Option<bool>,
    pub out_dir: Option<PathBuf>,
    pub formats: Option<Vec<FormatArg>>,
    pub drop_always_treated: Option<bool>,
    pub min_group_size: Option<usize>,
    pub balance_weights: Option<WeightSource>,
}

// ---------------------------------------------------------------------------
// command line
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "paneldid",
    version,
    about = "Panel difference-in-differences with implicit-weight diagnostics"
)]
pub struct Cli {
    /// JSON run configuration; flags given here override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Cap internal parallelism (bootstrap replicates run in parallel)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Check a long CSV against a column mapping and print the report
    Validate(DataArgs),
    /// Estimate ATT(g,t), the overall ATT, and the event study
    Estimate(EstimateArgs),
    /// Covariate balance under a chosen set of implicit weights
    Balance(BalanceArgs),
    /// Draw a synthetic panel from a discrete population fixture
    Simulate(SimulateArgs),
    /// Re-verify the closed-form identities on population fixtures
    OracleCheck(OracleArgs),
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// Long CSV panel file
    #[arg(long, value_name = "CSV")]
    pub input: Option<PathBuf>,

    /// JSON column mapping, e.g. {"unit":"id","time":"year","outcome":"y",
    /// "group":"first_treated","tv":["x"],"ti":["z"]}
    #[arg(long, value_name = "FILE")]
    pub schema: Option<PathBuf>,

    /// Drop units already treated in the first period instead of rejecting
    #[arg(long)]
    pub drop_always_treated: bool,

    /// Directory for output files (created if missing; default ".")
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct SpecArgs {
    /// Covariate functional form for the nuisance models
    #[arg(long, value_name = "MODE")]
    pub cov_mode: Option<CovModeArg>,

    /// Include time-invariant covariates in the nuisance designs
    #[arg(long, value_name = "BOOL")]
    pub include_ti: Option<bool>,

    /// Comparison pool for group-time cells
    #[arg(long, value_name = "POOL")]
    pub comparison: Option<Comparison>,

    /// Anticipation periods: the base period becomes g - 1 - DELTA
    #[arg(long, value_name = "DELTA")]
    pub anticipation: Option<usize>,

    /// Drop comparison units with extreme fitted propensities and refit
    #[arg(long)]
    pub trim: bool,

    /// Treated-count threshold below which propensity methods fall back to
    /// regression adjustment (0 = automatic)
    #[arg(long, value_name = "N")]
    pub min_group_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub spec: SpecArgs,

    /// Estimator
    #[arg(long, value_name = "METHOD")]
    pub method: Option<Method>,

    /// Bootstrap replicates for standard errors (0 = off)
    #[arg(long, value_name = "REPS")]
    pub bootstrap: Option<usize>,

    /// RNG seed for the bootstrap
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,

    /// Output formats to write (repeatable; default json, csv, svg)
    #[arg(long = "format", value_name = "FMT")]
    pub format: Vec<FormatArg>,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub spec: SpecArgs,

    /// Whose implicit weights to diagnose (raw = sampling weights only)
    #[arg(long, value_name = "SOURCE")]
    pub weights: Option<WeightSource>,

    /// Output formats to write (repeatable; default json, csv, svg)
    #[arg(long = "format", value_name = "FMT")]
    pub format: Vec<FormatArg>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in fixture name or path to a population JSON file
    #[arg(long, value_name = "NAME|FILE")]
    pub dgp: String,

    /// Number of units to draw
    #[arg(long, value_name = "N")]
    pub n: usize,

    /// RNG seed
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,

    /// Directory for panel.csv, schema.json, and truth.json
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct OracleArgs {
    /// Extra population JSON files to check alongside the built-ins
    #[arg(long = "dgp", value_name = "FILE")]
    pub dgps: Vec<PathBuf>,

    /// Check only the named built-in fixtures (default: all of them)
    #[arg(long, value_name = "NAME")]
    pub only: Vec<String>,
}

// ---------------------------------------------------------------------------
// resolved configuration (the echo that goes into every output)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub input: PathBuf,
    pub schema: ColumnSchema,
    pub method: Method,
    pub balance_weights: WeightSource,
    pub covariates: CovariateSpec,
    pub comparison: Comparison,
    pub anticipation: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub trim: bool,
    pub drop_always_treated: bool,
    pub min_group_size: usize,
    pub out_dir: PathBuf,
    pub formats: Vec<FormatArg>,
}

impl Resolved {
    fn dr_options(&self) -> DrOptions {
        DrOptions {
            comparison: self.comparison.to_group(),
            anticipation: self.anticipation,
            trim: self.trim,
            min_group_size: self.min_group_size,
            ridge: 0.0,
        }
    }

    fn wants(&self, f: FormatArg) -> bool {
        self.formats.contains(&f)
    }
}

fn read_schema_file(path: &Path) -> Result<ColumnSchema> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("column mapping {}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn resolve(
    cfg: &RunConfig,
    data: &DataArgs,
    spec: Option<&SpecArgs>,
    method: Option<Method>,
    weights: Option<WeightSource>,
    bootstrap: Option<usize>,
    seed: Option<u64>,
    formats: &[FormatArg],
) -> Result<Resolved> {
    let input = data
        .input
        .clone()
        .or_else(|| cfg.input.clone())
        .ok_or_else(|| {
            Error::validation("no input panel: pass --input or set `input` in the run config")
        })?;
    let schema = match &data.schema {
        Some(p) => read_schema_file(p)?,
        None => cfg.schema.clone().ok_or_else(|| {
            Error::validation(
                "no column mapping: pass --schema FILE or set `schema` in the run config",
            )
        })?,
    };

    let mut covariates = cfg.covariates.clone().unwrap_or_default();
    let mut comparison = cfg.comparison.unwrap_or(Comparison::Never);
    let mut anticipation = cfg.anticipation.unwrap_or(0);
    let mut trim = cfg.trim.unwrap_or(false);
    let mut min_group_size = cfg.min_group_size.unwrap_or(0);
    if let Some(s) = spec {
        if let Some(m) = s.cov_mode {
            covariates.mode = m.to_mode();
        }
        if let Some(ti) = s.include_ti {
            covariates.include_ti = ti;
        }
        if let Some(c) = s.comparison {
            comparison = c;
        }
        if let Some(a) = s.anticipation {
            anticipation = a;
        }
        if s.trim {
            trim = true;
        }
        if let Some(m) = s.min_group_size {
            min_group_size = m;
        }
    }

    let method = method.or(cfg.method).unwrap_or(Method::Aipw);
    let balance_weights = weights
        .or(cfg.balance_weights)
        .unwrap_or_else(|| method.weight_source());
    let formats = if formats.is_empty() {
        cfg.formats
            .clone()
            .unwrap_or_else(|| vec![FormatArg::Json, FormatArg::Csv, FormatArg::Svg])
    } else {
        formats.to_vec()
    };

    Ok(Resolved {
        input,
        schema,
        method,
        balance_weights,
        covariates,
        comparison,
        anticipation,
        bootstrap: bootstrap.or(cfg.bootstrap).unwrap_or(0),
        seed: seed.or(cfg.seed).unwrap_or(0),
        trim,
        drop_always_treated: data.drop_always_treated || cfg.drop_always_treated.unwrap_or(false),
        min_group_size,
        out_dir: data
            .out_dir
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(".")),
        formats,
    })
}

// ---------------------------------------------------------------------------
// entry points
// ---------------------------------------------------------------------------

/// Parse arguments and run. Returns the process exit code: 0 on success, 1
/// for input/validation problems, 2 for computation failures.
pub fn run() -> u8 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help and --version print to stdout and are not failures
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::computation(format!("could not size the thread pool: {e}")))?;
    }
    let cfg = load_run_config(cli.config.as_deref())?;
    match &cli.command {
        Cmd::Validate(a) => cmd_validate(&cfg, a),
        Cmd::Estimate(a) => cmd_estimate(&cfg, a),
        Cmd::Balance(a) => cmd_balance(&cfg, a),
        Cmd::Simulate(a) => cmd_simulate(&cfg, a),
        Cmd::OracleCheck(a) => cmd_oracle_check(a),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::validation(format!("run config {}: {e}", p.display())))
        }
    }
}

fn load_dataset(r: &Resolved) -> Result<PanelDataset> {
    load_long_csv(
        &r.input,
        &r.schema,
        &LoadOptions {
            drop_always_treated: r.drop_always_treated,
        },
    )
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn cmd_validate(cfg: &RunConfig, args: &DataArgs) -> Result<()> {
    let r = resolve(cfg, args, None, None, None, None, None, &[])?;
    let report = validate_long_csv(
        &r.input,
        &r.schema,
        &LoadOptions {
            drop_always_treated: r.drop_always_treated,
        },
    )?;

    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        config: &'a Resolved,
        report: &'a ValidationReport,
    }
    println!(
        "{}",
        to_json(&Doc {
            schema_version: SCHEMA_VERSION,
            config: &r,
            report: &report,
        })?
    );
    if !report.ok() {
        return Err(Error::validation(format!(
            "panel failed validation with {} error(s); first: {}",
            report.errors.len(),
            report.errors[0].message
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

fn cmd_estimate(cfg: &RunConfig, args: &EstimateArgs) -> Result<()> {
    let r = resolve(
        cfg,
        &args.data,
        Some(&args.spec),
        args.method,
        None,
        args.bootstrap,
        args.seed,
        &args.format,
    )?;
    let data = load_dataset(&r)?;
    if !data.has_outcome() {
        return Err(Error::validation(
            "estimation needs an outcome column; the column mapping names none",
        ));
    }
    fs::create_dir_all(&r.out_dir)?;
    match r.method {
        Method::Twfe => estimate_twfe(&r, &data),
        Method::Ra | Method::Ipw | Method::Aipw => estimate_dr(&r, &data),
    }
}

#[derive(Serialize)]
struct BootstrapInfo {
    reps: usize,
    failed: usize,
    seed: u64,
}

fn estimate_twfe(r: &Resolved, data: &PanelDataset) -> Result<()> {
    if r.anticipation > 0 {
        return Err(Error::validation(
            "anticipation shifts the base period of group-time cells; the two-way regression \
             has no base period to shift (use ra, ipw, or aipw)",
        ));
    }
    let fe = FeOptions::default();
    let fit = fit_fe_twfe(data, &fe)?;
    let mp = mp_implicit_weights(data, &fe)?;

    let (alpha_se, booted) = if r.bootstrap > 0 {
        let summary = bootstrap_se(data, r.bootstrap, r.seed, |d| {
            fit_fe_twfe(d, &FeOptions::default()).map(|f| vec![f.alpha])
        })?;
        (
            Some(summary.se[0]),
            Some(BootstrapInfo {
                reps: summary.reps,
                failed: summary.failed,
                seed: r.seed,
            }),
        )
    } else {
        (None, None)
    };

    #[derive(Serialize)]
    struct Coef {
        label: String,
        value: f64,
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        config: &'a Resolved,
        method: &'a str,
        alpha: f64,
        alpha_se: Option<f64>,
        /// What alpha becomes if every pre-treatment cell's contribution is
        /// zeroed; the gap to `alpha` is the pre-trend leakage.
        alpha_pre_zeroed: f64,
        denominator: f64,
        remainder: f64,
        post_weight_sum: f64,
        pre_weight_sum: f64,
        beta: Vec<Coef>,
        cells: &'a [MpCell],
        bootstrap: Option<BootstrapInfo>,
        warnings: &'a [String],
    }
    let doc = Doc {
        schema_version: SCHEMA_VERSION,
        config: r,
        method: "twfe",
        alpha: fit.alpha,
        alpha_se,
        alpha_pre_zeroed: mp.alpha_pre_zeroed,
        denominator: mp.denominator,
        remainder: mp.remainder,
        post_weight_sum: mp.post_weight_sum(),
        pre_weight_sum: mp.pre_weight_sum(),
        beta: fit
            .beta_labels
            .iter()
            .zip(fit.beta.iter())
            .map(|(l, v)| Coef {
                label: l.clone(),
                value: *v,
            })
            .collect(),
        cells: &mp.cells,
        bootstrap: booted,
        warnings: &mp.warnings,
    };

    let mut written = Vec::new();
    if r.wants(FormatArg::Json) {
        write_json(&r.out_dir.join("estimates.json"), &doc)?;
        written.push("estimates.json");
    }
    if r.wants(FormatArg::Csv) {
        let mut w = csv_writer(&r.out_dir.join("estimates.csv"))?;
        w.write_record([
            "group",
            "period",
            "post",
            "weight",
            "treated_term",
            "comparison_term",
            "comparison_skipped",
            "contribution",
        ])?;
        for c in &mp.cells {
            w.write_record([
                c.group.to_string(),
                c.period.to_string(),
                c.post.to_string(),
                fmt_f64(c.weight),
                fmt_f64(c.treated_term),
                fmt_f64(c.comparison_term),
                c.comparison_skipped.to_string(),
                fmt_f64(c.contribution),
            ])?;
        }
        w.flush()?;
        written.push("estimates.csv");
    }

    let bundle = twfe_balance_bundle(data, &mp)?;
    written.extend(write_balance_outputs(r, data, &bundle)?);

    match alpha_se {
        Some(se) => println!("alpha = {:.6} (se {:.6})", fit.alpha, se),
        None => println!("alpha = {:.6}", fit.alpha),
    }
    println!(
        "zeroing pre-treatment cells gives {:.6}; {} group-time cells",
        mp.alpha_pre_zeroed,
        mp.cells.len()
    );
    println!("wrote {} to {}", written.join(", "), r.out_dir.display());
    Ok(())
}

type GtFn = fn(&PanelDataset, &CovariateSpec, i64, i64, &DrOptions) -> Result<GroupTimeResult>;
type GtWeightsFn = fn(
    &PanelDataset,
    &CovariateSpec,
    i64,
    i64,
    &DrOptions,
) -> Result<(GroupTimeResult, AipwWeightReport)>;

fn method_fn(m: Method) -> GtFn {
    match m {
        Method::Ra => att_gt_ra,
        Method::Ipw => att_gt_ipw,
        Method::Aipw => att_gt_aipw,
        Method::Twfe => unreachable!("the two-way regression runs through its own path"),
    }
}

fn method_weights_fn(m: Method) -> GtWeightsFn {
    match m {
        Method::Ra => att_gt_ra_weights,
        Method::Ipw => att_gt_ipw_weights,
        Method::Aipw => att_gt_aipw_weights,
        Method::Twfe => unreachable!("the two-way regression runs through its own path"),
    }
}

/// Full (g, t) grid: every treated group crossed with every period except the
/// group's base period. Post cells feed the overall ATT; pre cells are the
/// event-study placebos.
fn gt_grid(data: &PanelDataset, anticipation: usize) -> Result<Vec<(i64, i64, i64)>> {
    let periods = data.periods().to_vec();
    let mut grid = Vec::new();
    for &g_idx in &data.treated_groups() {
        if g_idx < 1 + anticipation {
            return Err(Error::validation(format!(
                "group {} adopts too early for anticipation {}; no base period remains",
                periods[g_idx], anticipation
            )));
        }
        let base = periods[g_idx - 1 - anticipation];
        for &t in &periods {
            if t != base {
                grid.push((periods[g_idx], t, base));
            }
        }
    }
    Ok(grid)
}

fn estimate_dr(r: &Resolved, data: &PanelDataset) -> Result<()> {
    let opts = r.dr_options();
    let grid = gt_grid(data, r.anticipation)?;
    let gt = method_fn(r.method);
    let gt_weights = method_weights_fn(r.method);

    let mut results: Vec<GroupTimeResult> = Vec::with_capacity(grid.len());
    let mut bundle = BalanceBundle::new(r.balance_weights);
    for &(g, t, base) in &grid {
        if t >= g {
            // post cell: keep the weight report for the balance output
            let (res, wrep) = gt_weights(data, &r.covariates, g, t, &opts)?;
            let (cols, names) = diagnostic_design(data, g, t, base)?;
            bundle.push(
                g,
                t,
                balance_report(&cols, &names, &wrep.treated, &wrep.comparison)?,
            );
            results.push(res);
        } else {
            results.push(gt(data, &r.covariates, g, t, &opts)?);
        }
    }
    let mut overall = aggregate_overall(&results, data)?;
    let mut event_study = aggregate_event_study(&results, data)?;

    let booted = if r.bootstrap > 0 {
        let cells: Vec<(i64, i64)> = grid.iter().map(|&(g, t, _)| (g, t)).collect();
        let spec = r.covariates.clone();
        let opts_b = opts.clone();
        let summary = bootstrap_se(data, r.bootstrap, r.seed, move |d| {
            let mut rs = Vec::with_capacity(cells.len());
            for &(g, t) in &cells {
                rs.push(gt(d, &spec, g, t, &opts_b)?);
            }
            let o = aggregate_overall(&rs, d)?;
            let e = aggregate_event_study(&rs, d)?;
            let mut v: Vec<f64> = rs.iter().map(|x| x.att).collect();
            v.push(o.values[0].estimate);
            v.extend(e.values.iter().map(|x| x.estimate));
            Ok(v)
        })?;
        let expected = grid.len() + 1 + event_study.values.len();
        if summary.se.len() != expected {
            return Err(Error::computation(format!(
                "bootstrap returned {} coordinates, expected {expected}",
                summary.se.len()
            )));
        }
        for (i, res) in results.iter_mut().enumerate() {
            res.se = Some(summary.se[i]);
        }
        overall.values[0].se = Some(summary.se[grid.len()]);
        for (j, v) in event_study.values.iter_mut().enumerate() {
            v.se = Some(summary.se[grid.len() + 1 + j]);
        }
        Some(BootstrapInfo {
            reps: summary.reps,
            failed: summary.failed,
            seed: r.seed,
        })
    } else {
        None
    };

    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        config: &'a Resolved,
        method: &'a str,
        group_time: &'a [GroupTimeResult],
        overall: &'a AggregateResult,
        event_study: &'a AggregateResult,
        bootstrap: Option<BootstrapInfo>,
    }
    let doc = Doc {
        schema_version: SCHEMA_VERSION,
        config: r,
        method: r.method.as_str(),
        group_time: &results,
        overall: &overall,
        event_study: &event_study,
        bootstrap: booted,
    };

    let mut written = Vec::new();
    if r.wants(FormatArg::Json) {
        write_json(&r.out_dir.join("estimates.json"), &doc)?;
        written.push("estimates.json");
    }
    if r.wants(FormatArg::Csv) {
        let mut w = csv_writer(&r.out_dir.join("estimates.csv"))?;
        w.write_record([
            "group",
            "period",
            "base_period",
            "post",
            "att",
            "se",
            "estimator",
            "comparison",
            "n_treated",
            "n_comparison",
            "trim_count",
            "warnings",
        ])?;
        for res in &results {
            w.write_record([
                res.group.to_string(),
                res.period.to_string(),
                res.base_period.to_string(),
                (res.period >= res.group).to_string(),
                fmt_f64(res.att),
                res.se.map(fmt_f64).unwrap_or_default(),
                res.estimator.clone(),
                res.comparison.clone(),
                res.n_treated.to_string(),
                res.n_comparison.to_string(),
                res.trim_count.to_string(),
                res.warnings.join("; "),
            ])?;
        }
        w.flush()?;
        written.push("estimates.csv");

        let mut w = csv_writer(&r.out_dir.join("aggregates.csv"))?;
        w.write_record(["kind", "label", "estimate", "se"])?;
        for agg in [&overall, &event_study] {
            for v in &agg.values {
                w.write_record([
                    agg.kind.clone(),
                    v.label.clone(),
                    fmt_f64(v.estimate),
                    v.se.map(fmt_f64).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        written.push("aggregates.csv");
    }

    written.extend(write_balance_outputs(r, data, &bundle)?);

    let o = &overall.values[0];
    match o.se {
        Some(se) => println!("ATT_overall = {:.6} (se {:.6})", o.estimate, se),
        None => println!("ATT_overall = {:.6}", o.estimate),
    }
    println!(
        "{} group-time cells ({} post, {} pre)",
        results.len(),
        bundle.cells.len(),
        results.len() - bundle.cells.len()
    );
    println!("wrote {} to {}", written.join(", "), r.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// balance
// ---------------------------------------------------------------------------

/// Balance columns are always the full diagnostic set — covariate changes,
/// base levels, and time-invariant covariates — independent of the
/// estimator's own covariate spec. Imbalance has to stay visible even in
/// directions the estimator chose to ignore.
fn diagnostic_design(
    data: &PanelDataset,
    g: i64,
    t: i64,
    base: i64,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let spec = CovariateSpec {
        mode: CovMode::DeltaPlusBase,
        include_ti: true,
        interactions: vec![],
        propensity_mode: None,
    };
    build_design(data, &spec, g, t, base)
}

struct BalanceBundle {
    source: WeightSource,
    cells: Vec<(i64, i64)>,
    reports: Vec<BalanceReport>,
}

impl BalanceBundle {
    fn new(source: WeightSource) -> Self {
        BalanceBundle {
            source,
            cells: Vec::new(),
            reports: Vec::new(),
        }
    }

    fn push(&mut self, g: i64, t: i64, report: BalanceReport) {
        self.cells.push((g, t));
        self.reports.push(report);
    }

    /// Pool the per-cell reports with the same w(g,t) weights the overall ATT
    /// uses, so the aggregate balance table describes the same estimand.
    fn aggregate(&self, data: &PanelDataset) -> Result<BalanceReport> {
        let cell_weights = overall_cell_weights(data);
        let mut weights = Vec::with_capacity(self.cells.len());
        for &(g, t) in &self.cells {
            let w = cell_weights
                .iter()
                .find(|c| c.group == g && c.period == t)
                .map(|c| c.weight)
                .ok_or_else(|| {
                    Error::computation(format!("no aggregation weight for cell ({g}, {t})"))
                })?;
            weights.push(w);
        }
        aggregate_balance(&weights, &self.reports)
    }
}

fn twfe_balance_bundle(data: &PanelDataset, mp: &MpWeightReport) -> Result<BalanceBundle> {
    let mut bundle = BalanceBundle::new(WeightSource::Twfe);
    let periods = data.periods().to_vec();
    for &g_idx in &data.treated_groups() {
        let g = periods[g_idx];
        let base = periods[g_idx - 1];
        for t_idx in g_idx..data.t_len() {
            let t = periods[t_idx];
            let (treated, comparison) = mp.cell_profiles(data, g, t)?;
            let (cols, names) = diagnostic_design(data, g, t, base)?;
            bundle.push(g, t, balance_report(&cols, &names, &treated, &comparison)?);
        }
    }
    Ok(bundle)
}

fn dr_balance_bundle(r: &Resolved, data: &PanelDataset, source: WeightSource) -> Result<BalanceBundle> {
    let opts = r.dr_options();
    // raw = regression adjustment with an empty design: the implicit weights
    // collapse to the sampling weights, i.e. the "before" column
    let intercept_only = CovariateSpec {
        mode: CovMode::InterceptOnly,
        include_ti: false,
        interactions: vec![],
        propensity_mode: None,
    };
    let (gt_weights, spec): (GtWeightsFn, &CovariateSpec) = match source {
        WeightSource::Raw => (att_gt_ra_weights, &intercept_only),
        WeightSource::Ra => (att_gt_ra_weights, &r.covariates),
        WeightSource::Ipw => (att_gt_ipw_weights, &r.covariates),
        WeightSource::Aipw => (att_gt_aipw_weights, &r.covariates),
        WeightSource::Twfe => unreachable!("regression weights come from the panel fit"),
    };
    let mut bundle = BalanceBundle::new(source);
    for &(g, t, base) in &gt_grid(data, r.anticipation)? {
        if t < g {
            continue;
        }
        let (_, wrep) = gt_weights(data, spec, g, t, &opts)?;
        let (cols, names) = diagnostic_design(data, g, t, base)?;
        bundle.push(
            g,
            t,
            balance_report(&cols, &names, &wrep.treated, &wrep.comparison)?,
        );
    }
    Ok(bundle)
}

/// Rebuild the panel with a zero outcome matrix. Implicit weights never read
/// the outcome, so balance works on outcome-free data and is guaranteed not
/// to peek at effects when it does exist.
fn with_zero_outcome(data: &PanelDataset) -> Result<PanelDataset> {
    PanelDataset::new(
        data.unit_ids().to_vec(),
        data.periods().to_vec(),
        Some(DMatrix::zeros(data.n(), data.t_len())),
        (0..data.n()).map(|i| data.group_idx(i)).collect(),
        (0..data.k()).map(|j| data.tv(j).clone()).collect(),
        data.tv_names().to_vec(),
        data.ti().clone(),
        data.ti_names().to_vec(),
        data.weight().clone(),
    )
}

fn cmd_balance(cfg: &RunConfig, args: &BalanceArgs) -> Result<()> {
    let r = resolve(
        cfg,
        &args.data,
        Some(&args.spec),
        None,
        args.weights,
        None,
        None,
        &args.format,
    )?;
    let data = with_zero_outcome(&load_dataset(&r)?)?;
    fs::create_dir_all(&r.out_dir)?;

    let bundle = match r.balance_weights {
        WeightSource::Twfe => {
            if r.anticipation > 0 {
                return Err(Error::validation(
                    "anticipation shifts the base period of group-time cells; the two-way \
                     regression has no base period to shift (use ra, ipw, or aipw weights)",
                ));
            }
            let mp = mp_implicit_weights(&data, &FeOptions::default())?;
            twfe_balance_bundle(&data, &mp)?
        }
        source => dr_balance_bundle(&r, &data, source)?,
    };

    let written = write_balance_outputs(&r, &data, &bundle)?;
    let agg = bundle.aggregate(&data)?;
    println!(
        "{} weights over {} post cell(s); max |weighted std diff| = {:.4}",
        bundle.source.as_str(),
        bundle.cells.len(),
        agg.max_abs_weighted()
    );
    println!("wrote {} to {}", written.join(", "), r.out_dir.display());
    Ok(())
}

fn write_balance_outputs(
    r: &Resolved,
    data: &PanelDataset,
    bundle: &BalanceBundle,
) -> Result<Vec<&'static str>> {
    let aggregate = bundle.aggregate(data)?;

    let mut written = Vec::new();
    if r.wants(FormatArg::Json) {
        #[derive(Serialize)]
        struct CellOut<'a> {
            group: i64,
            period: i64,
            report: &'a BalanceReport,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            config: &'a Resolved,
            weights: &'a str,
            aggregate: &'a BalanceReport,
            cells: Vec<CellOut<'a>>,
        }
        let doc = Doc {
            schema_version: SCHEMA_VERSION,
            config: r,
            weights: bundle.source.as_str(),
            aggregate: &aggregate,
            cells: bundle
                .cells
                .iter()
                .zip(bundle.reports.iter())
                .map(|(&(group, period), report)| CellOut {
                    group,
                    period,
                    report,
                })
                .collect(),
        };
        write_json(&r.out_dir.join("balance.json"), &doc)?;
        written.push("balance.json");
    }
    if r.wants(FormatArg::Csv) {
        let mut w = csv_writer(&r.out_dir.join("balance.csv"))?;
        w.write_record([
            "cell",
            "column",
            "treated_mean_raw",
            "comparison_mean_raw",
            "treated_mean_weighted",
            "comparison_mean_weighted",
            "std_diff_raw",
            "std_diff_weighted",
        ])?;
        let mut dump = |cell: &str, rep: &BalanceReport| -> Result<()> {
            for row in &rep.rows {
                w.write_record([
                    cell.to_string(),
                    row.column.clone(),
                    fmt_f64(row.treated_mean_raw),
                    fmt_f64(row.comparison_mean_raw),
                    fmt_f64(row.treated_mean_weighted),
                    fmt_f64(row.comparison_mean_weighted),
                    fmt_f64(row.std_diff_raw),
                    fmt_f64(row.std_diff_weighted),
                ])?;
            }
            Ok(())
        };
        dump("overall", &aggregate)?;
        for (&(g, t), rep) in bundle.cells.iter().zip(bundle.reports.iter()) {
            dump(&format!("g{g}_t{t}"), rep)?;
        }
        w.flush()?;
        written.push("balance.csv");
    }
    if r.wants(FormatArg::Svg) {
        let title = format!(
            "standardized differences, {} weights",
            bundle.source.as_str()
        );
        fs::write(r.out_dir.join("balance.svg"), love_plot_svg(&aggregate, &title))?;
        written.push("balance.svg");
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn resolve_dgp(arg: &str) -> Result<(String, DiscreteDgp)> {
    if BUILTIN_FIXTURES.contains(&arg) {
        return Ok((arg.to_string(), builtin_fixture(arg)?));
    }
    let p = Path::new(arg);
    if !p.exists() {
        return Err(Error::validation(format!(
            "'{arg}' is neither a built-in fixture ({}) nor a file",
            BUILTIN_FIXTURES.join(", ")
        )));
    }
    let dgp = DiscreteDgp::from_json(&fs::read_to_string(p)?)?;
    Ok((dgp.name.clone(), dgp))
}

fn cmd_simulate(cfg: &RunConfig, args: &SimulateArgs) -> Result<()> {
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let (name, dgp) = resolve_dgp(&args.dgp)?;
    let sample = simulate_sample(&dgp, args.n, seed)?;
    let truth = truth_att(&dgp)?;
    fs::create_dir_all(&out_dir)?;

    sample.write_long_csv(&out_dir.join("panel.csv"))?;

    // column mapping matching write_long_csv's canonical layout, so the panel
    // feeds straight back into `estimate --schema schema.json`
    let schema = ColumnSchema {
        unit: "unit".into(),
        time: "time".into(),
        outcome: Some("y".into()),
        treat: None,
        group: Some("group".into()),
        tv: sample.tv_names().to_vec(),
        ti: sample.ti_names().to_vec(),
        weight: Some("weight".into()),
    };
    write_json(&out_dir.join("schema.json"), &schema)?;

    #[derive(Serialize)]
    struct SimConfig<'a> {
        dgp: &'a str,
        n: usize,
        seed: u64,
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        config: SimConfig<'a>,
        truth: &'a TruthAtt,
    }
    write_json(
        &out_dir.join("truth.json"),
        &Doc {
            schema_version: SCHEMA_VERSION,
            config: SimConfig {
                dgp: &name,
                n: args.n,
                seed,
            },
            truth: &truth,
        },
    )?;

    println!(
        "drew {} units x {} periods from '{}' (seed {seed}); population ATT_overall = {:.6}",
        sample.n(),
        sample.t_len(),
        name,
        truth.att_overall
    );
    println!(
        "wrote panel.csv, schema.json, truth.json to {}",
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

struct FixtureCheck {
    alpha: f64,
    att_overall: f64,
    pre_violation: f64,
    max_gap: f64,
}

/// Run every exact identity a population must satisfy: unit mass, the
/// regression-coefficient identity with its closure bound, the signed weight
/// sums, and the fine decompositions (two-period or per-pair trend channels).
fn check_population(dgp: &DiscreteDgp) -> Result<FixtureCheck> {
    let table = enumerate_population(dgp)?;
    let mass: f64 = table.total_mass();
    if (mass - 1.0).abs() > 1e-12 {
        return Err(Error::computation(format!(
            "population mass sums to {mass}, expected 1"
        )));
    }
    let truth = truth_att(dgp)?;
    let id = staggered_alpha_identity(&table)?;
    let mut max_gap = id.closure_gap.abs();

    let post_sum: f64 = id.cells.iter().filter(|c| c.post).map(|c| c.weight).sum();
    let pre_sum: f64 = id.cells.iter().filter(|c| !c.post).map(|c| c.weight).sum();
    if (post_sum - 1.0).abs() > 1e-8 {
        return Err(Error::computation(format!(
            "post-period cell weights sum to {post_sum}, expected 1"
        )));
    }
    if (pre_sum + 1.0).abs() > 1e-8 {
        return Err(Error::computation(format!(
            "pre-period cell weights sum to {pre_sum}, expected -1"
        )));
    }

    let groups = table.treated_groups();
    if table.t_len == 2 && groups == vec![1] {
        let dec = alpha_decomposition(&table)?;
        max_gap = max_gap.max(dec.closure_gap.abs());
        if (dec.alpha - id.alpha).abs() > 1e-8 {
            return Err(Error::computation(format!(
                "the two decompositions disagree on alpha: {} vs {}",
                dec.alpha, id.alpha
            )));
        }
        let mean_one: f64 = dec
            .cell_weights
            .iter()
            .map(|c| c.treated_share * c.weight)
            .sum();
        if (mean_one - 1.0).abs() > 1e-10 {
            return Err(Error::computation(format!(
                "treated-mean-one weight identity failed: {mean_one}"
            )));
        }
    } else {
        // per-pair trend decomposition must close for every treated group and
        // every non-base period (population period labels are 1..=T)
        for &g_idx in &groups {
            let g = (g_idx + 1) as i64;
            let base = g - 1;
            for t in 1..=table.t_len as i64 {
                if t != base {
                    trend_bias_decomposition(&table, g, t)?;
                }
            }
        }
    }

    Ok(FixtureCheck {
        alpha: id.alpha,
        att_overall: truth.att_overall,
        pre_violation: id.pre_violation,
        max_gap,
    })
}

fn cmd_oracle_check(args: &OracleArgs) -> Result<()> {
    // (name, dgp, expectation): Some(true) = untreated paths must be
    // group-invariant, Some(false) = the fixture must violate them,
    // None = report only (user-supplied populations)
    let mut targets: Vec<(String, DiscreteDgp, Option<bool>)> = Vec::new();
    let names: Vec<String> = if args.only.is_empty() {
        BUILTIN_FIXTURES.iter().map(|s| s.to_string()).collect()
    } else {
        args.only.clone()
    };
    for name in names {
        let dgp = builtin_fixture(&name)?;
        let clean = name != "pretrend_violation";
        targets.push((name, dgp, Some(clean)));
    }
    for path in &args.dgps {
        let dgp = DiscreteDgp::from_json(&fs::read_to_string(path)?)?;
        targets.push((dgp.name.clone(), dgp, None));
    }

    println!(
        "{:<24} {:>12} {:>12} {:>14} {:>10}  result",
        "fixture", "alpha", "att_overall", "pre_violation", "max_gap"
    );
    let mut failed = 0usize;
    for (name, dgp, expect_clean) in &targets {
        match check_population(dgp) {
            Ok(c) => {
                let ok = match expect_clean {
                    Some(true) => c.pre_violation.abs() <= 1e-10,
                    Some(false) => c.pre_violation.abs() > 1e-6,
                    None => true,
                };
                let verdict = if ok {
                    "pass"
                } else if *expect_clean == Some(false) {
                    "FAIL (expected a pre-trend violation, found none)"
                } else {
                    "FAIL (pre-treatment contribution should be zero)"
                };
                if !ok {
                    failed += 1;
                }
                println!(
                    "{:<24} {:>12.6} {:>12.6} {:>14.6} {:>10.2e}  {}",
                    name, c.alpha, c.att_overall, c.pre_violation, c.max_gap, verdict
                );
            }
            Err(e) => {
                failed += 1;
                println!("{name:<24} {e}  FAIL");
            }
        }
    }
    println!(
        "{} fixture(s): {} passed, {} failed",
        targets.len(),
        targets.len() - failed,
        failed
    );
    if failed > 0 {
        return Err(Error::computation(format!(
            "{failed} population check(s) failed"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// output helpers
// ---------------------------------------------------------------------------

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = to_json(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// Shortest round-trip float formatting, same convention the panel writer
/// uses, so reruns are byte-identical.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
