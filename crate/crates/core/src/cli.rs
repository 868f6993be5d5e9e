//! Command-line front end: `fit`, `simulate` and `diagnose`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{read_csv, LongitudinalDataset};
use crate::error::{GcmError, Result};
use crate::fiml::{fiml_fit, FimlOptions};
use crate::geweke::{effective_size, geweke_z, FIRST_FRAC, GEWEKE_CRITICAL, LAST_FRAC};
use crate::model::GrowthModelSpec;
use crate::result::{FitResult, Method};
use crate::rmb::{rmb_run, ChainConfig, DrawTable, Profile, RmbPriors, SelectionScope};
use crate::simstudy::{self, write_atomic, SimConfig};
use crate::tsre::{tsre_fit, TsreOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NONCONVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "gcm", version, about = "Growth curve models for incomplete longitudinal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one or more methods to a wide-format CSV.
    Fit(FitArgs),
    /// Run a Monte Carlo study from a JSON config.
    Simulate(SimulateArgs),
    /// Geweke diagnostics for a raw-draw CSV.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Comma-separated: fiml, tsre, rmb, rmb-selection, rmb-both.
    #[arg(long, default_value = "fiml,tsre,rmb")]
    pub method: String,
    /// Input CSV: `id,y1,...,yT` with NA for missing cells.
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
    /// Tail probability defining the Huber cutoff for tsre.
    #[arg(long)]
    pub huber_prob: Option<f64>,
    /// Chain length for rmb; overrides the profile.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Burn-in; defaults to half the chain.
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory for raw post-burn-in draws, one CSV per rmb run.
    #[arg(long)]
    pub keep_draws: Option<PathBuf>,
    /// Chain-length preset: test or paper.
    #[arg(long, env = "GCM_PROFILE", default_value = "test")]
    pub profile: Profile,
    /// Fit plain `rmb` with the selection model too.
    #[arg(long)]
    pub selection: bool,
    /// Missingness indicators entering the selection model: at-risk or all-occasions.
    #[arg(long, default_value = "at-risk", value_parser = parse_scope)]
    pub selection_scope: SelectionScope,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON config; omitted fields take the full-design defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Reuse finished conditions from the checkpoint directory.
    #[arg(long)]
    pub resume: bool,
    /// Also write each replication's dataset under this directory.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    /// Use the long chain preset regardless of the config.
    #[arg(long)]
    pub paper_profile: bool,
    /// Overrides the config's base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only write datasets; skip fitting.
    #[arg(long, requires = "emit_data")]
    pub emit_only: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Raw-draw CSV written by `fit --keep-draws`.
    #[arg(long)]
    pub draws: PathBuf,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_scope(s: &str) -> std::result::Result<SelectionScope, String> {
    match s {
        "at-risk" => Ok(SelectionScope::AtRisk),
        "all-occasions" => Ok(SelectionScope::AllOccasions),
        other => Err(format!("unknown selection scope {other:?}")),
    }
}

/// Maps a library error to an exit code.
pub fn exit_code(err: &GcmError) -> i32 {
    match err {
        GcmError::InvalidParameter(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parsed dataset plus the per-occasion missingness report.
#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub path: String,
    pub n_subjects: usize,
    pub n_occasions: usize,
    pub missing_rates: Vec<f64>,
    pub dropped: Vec<String>,
}

pub fn ingest_csv(path: &Path) -> Result<(LongitudinalDataset, DataSummary)> {
    let ing = read_csv(fs::File::open(path)?)?;
    let d = ing.dataset;
    let summary = DataSummary {
        path: path.display().to_string(),
        n_subjects: d.n_subjects(),
        n_occasions: d.n_occasions(),
        missing_rates: d.missing_rates(),
        dropped: ing.dropped,
    };
    for (t, r) in summary.missing_rates.iter().enumerate() {
        log::info!("occasion {}: {:.2}% missing", t + 1, 100.0 * r);
    }
    if !summary.dropped.is_empty() {
        log::warn!("dropped {} subjects with no observations", summary.dropped.len());
    }
    Ok((d, summary))
}

/// Expands the `--method` list; `rmb-both` means rmb and rmb-selection.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let add: Vec<Method> = if tok.eq_ignore_ascii_case("rmb-both") {
            vec![Method::Rmb, Method::RmbSelection]
        } else {
            vec![tok.parse()?]
        };
        for m in add {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    if out.is_empty() {
        return Err(GcmError::InvalidParameter("no methods given".into()));
    }
    Ok(out)
}

/// Posterior-median gap between the rmb runs with and without selection.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionComparison {
    pub parameter: String,
    pub without_selection: f64,
    pub with_selection: f64,
    /// Difference over the larger posterior sd.
    pub standardized_difference: f64,
    pub differs: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub data: DataSummary,
    pub seed: u64,
    pub results: Vec<FitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_comparison: Option<Vec<SelectionComparison>>,
}

fn compare_selection(plain: &FitResult, sel: &FitResult, q: usize) -> Option<Vec<SelectionComparison>> {
    let (a, b) = (plain.posterior.as_ref()?, sel.posterior.as_ref()?);
    Some(
        a.iter()
            .zip(b)
            .take(q)
            .map(|(x, y)| {
                let d = (y.median - x.median) / x.sd.max(y.sd);
                SelectionComparison {
                    parameter: x.name.clone(),
                    without_selection: x.median,
                    with_selection: y.median,
                    standardized_difference: d,
                    differs: d.abs() > 2.0,
                }
            })
            .collect(),
    )
}

/// Runs `fit`; returns the report and whether every fit converged.
pub fn fit_command(args: &FitArgs) -> Result<(FitReport, bool)> {
    let methods = parse_methods(&args.method)?;
    let (data, summary) = ingest_csv(&args.data)?;
    let spec = GrowthModelSpec::linear(data.n_occasions())?;
    let mut tsre_opts = TsreOptions::default();
    if let Some(p) = args.huber_prob {
        tsre_opts.huber_prob = p;
    }
    tsre_opts.validate()?;
    let mut chain = ChainConfig::for_profile(args.profile, args.seed);
    if let Some(k) = args.iters {
        chain = ChainConfig::new(k, args.seed);
    }
    if let Some(b) = args.burnin {
        chain.burnin = b;
    }
    chain.selection_scope = args.selection_scope;
    chain.validate()?;
    let priors = RmbPriors::default_for(spec.n_effects());
    if let Some(dir) = &args.keep_draws {
        fs::create_dir_all(dir)?;
    }
    let mut results = Vec::with_capacity(methods.len());
    for &m in &methods {
        log::info!("fitting {m}");
        let fit = match m {
            Method::Fiml => fiml_fit(&spec, &data, &FimlOptions::default())?,
            Method::Tsre => tsre_fit(&spec, &data, &tsre_opts)?,
            Method::Rmb | Method::RmbSelection => {
                let selection = m == Method::RmbSelection || args.selection;
                let run = rmb_run(&spec, &data, &priors, &chain, selection)?;
                if let Some(dir) = &args.keep_draws {
                    let mut buf = Vec::new();
                    run.draws.write_csv(&mut buf)?;
                    write_atomic(&dir.join(format!("{}_draws.csv", m.as_str())), &buf)?;
                }
                run.fit
            }
        };
        if !fit.converged {
            log::warn!("{m} did not converge");
        }
        results.push(fit);
    }
    let find = |m: Method| results.iter().find(|r| r.method == m);
    let selection_comparison = match (find(Method::Rmb), find(Method::RmbSelection)) {
        (Some(a), Some(b)) if !args.selection => compare_selection(a, b, spec.n_effects()),
        _ => None,
    };
    let all_converged = results.iter().all(|r| r.converged);
    let report = FitReport { data: summary, seed: args.seed, results, selection_comparison };
    write_atomic(&args.out, &serde_json::to_vec_pretty(&report)?)?;
    Ok((report, all_converged))
}

/// Runs `simulate`; returns whether every replication of every method converged.
pub fn simulate_command(args: &SimulateArgs) -> Result<bool> {
    let mut config = SimConfig::from_json(&fs::read_to_string(&args.config)?)?;
    if args.paper_profile {
        config.profile = Profile::Paper;
        config.rmb_iters = None;
    }
    if let Some(s) = args.seed {
        config.base_seed = s;
    }
    config.validate()?;
    if let Some(dir) = &args.emit_data {
        simstudy::emit_data(&config.grid()?, config.reps, config.base_seed, config.r, dir)?;
        if args.emit_only {
            return Ok(true);
        }
    }
    let out = simstudy::run_study(&config, &args.out, args.jobs, args.resume)?;
    Ok(out.results.iter().all(|r| r.methods.iter().all(|m| m.converged == m.attempted)))
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamDiagnostic {
    pub parameter: String,
    pub n: usize,
    pub mean: f64,
    pub geweke_z: Option<f64>,
    pub effective_size: Option<f64>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn read_draws(path: &Path) -> Result<DrawTable> {
    let mut rdr = csv::Reader::from_reader(fs::File::open(path)?);
    let names: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if names.is_empty() {
        return Err(GcmError::EmptyInput("draw file has no columns".into()));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| GcmError::Parse { line, msg: e.to_string() })?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| GcmError::Parse { line, msg: format!("bad value {f:?}") }))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != names.len() {
            return Err(GcmError::Parse { line, msg: "wrong number of fields".into() });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GcmError::EmptyInput("draw file has no rows".into()));
    }
    Ok(DrawTable { names, rows })
}

/// Per-column Geweke z and effective size. A column the diagnostic cannot
/// handle (constant, too short) is reported as a failure with its error.
pub fn diagnose_draws(draws: &DrawTable) -> Vec<ParamDiagnostic> {
    draws
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = draws.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            match geweke_z(&col, FIRST_FRAC, LAST_FRAC) {
                Ok(z) => ParamDiagnostic {
                    parameter: name.clone(),
                    n: col.len(),
                    mean,
                    geweke_z: Some(z),
                    effective_size: effective_size(&col).ok(),
                    pass: z.abs() < GEWEKE_CRITICAL,
                    error: None,
                },
                Err(e) => ParamDiagnostic {
                    parameter: name.clone(),
                    n: col.len(),
                    mean,
                    geweke_z: None,
                    effective_size: None,
                    pass: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

pub fn diagnose_command(args: &DiagnoseArgs) -> Result<Vec<ParamDiagnostic>> {
    let report = diagnose_draws(&read_draws(&args.draws)?);
    for d in &report {
        match (&d.geweke_z, &d.error) {
            (Some(z), _) => println!(
                "{:<12} z = {:>7.3}  ess = {:>8.1}  {}",
                d.parameter,
                z,
                d.effective_size.unwrap_or(f64::NAN),
                if d.pass { "pass" } else { "FAIL" }
            ),
            (None, Some(e)) => println!("{:<12} error: {e}", d.parameter),
            (None, None) => unreachable!(),
        }
    }
    if let Some(out) = &args.out {
        let by_name: BTreeMap<&str, &ParamDiagnostic> = report.iter().map(|d| (d.parameter.as_str(), d)).collect();
        write_atomic(out, &serde_json::to_vec_pretty(&by_name)?)?;
    }
    Ok(report)
}

/// Parses arguments, dispatches and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Fit(a) => fit_command(a).map(|(_, ok)| ok),
        Command::Simulate(a) => simulate_command(a),
        Command::Diagnose(a) => diagnose_command(a).map(|r| r.iter().all(|d| d.pass)),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_NONCONVERGED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
