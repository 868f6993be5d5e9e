//! Monte Carlo comparison of the estimators over a grid of conditions.
//!
//! Every replication draws its data from a seed hashed from the condition,
//! the replication index and the base seed, so all methods see the same
//! datasets and any subset of the grid can be rerun in isolation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, ErrorDistribution, ErrorKind, Mechanism, MissingSpec, SimulatedDataset};
use crate::error::{GcmError, Result};
use crate::fiml::{fiml_fit, FimlOptions};
use crate::model::{GrowthModelSpec, ParameterSet};
use crate::random::rng_from_seed;
use crate::result::Method;
use crate::rmb::{rmb_fit, ChainConfig, Profile, RmbPriors, SelectionScope};
use crate::tsre::{tsre_fit, TsreOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub n: usize,
    pub mechanism: Mechanism,
    pub mr: f64,
    pub dist: ErrorKind,
}

impl Condition {
    pub fn new(n: usize, mechanism: Mechanism, mr: f64, dist: ErrorKind) -> Result<Self> {
        let c = Self { n, mechanism, mr, dist };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(GcmError::InvalidParameter("sample size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mr) {
            return Err(GcmError::InvalidParameter(format!("missingness rate {} not in [0,1)", self.mr)));
        }
        if (self.mr == 0.0) != (self.mechanism == Mechanism::None) {
            return Err(GcmError::InvalidParameter("a zero missingness rate goes with mechanism none, and only then".into()));
        }
        Ok(())
    }

    /// Stable identifier used for seeding and file names.
    pub fn id(&self) -> String {
        format!("n{}_{}_mr{}_{}", self.n, self.mechanism.as_str(), self.mr, self.dist.as_str())
    }
}

/// Full factorial grid; a zero rate contributes one mechanism-free
/// condition per (n, dist).
pub fn build_grid(ns: &[usize], mechanisms: &[Mechanism], rates: &[f64], dists: &[ErrorKind]) -> Result<Vec<Condition>> {
    let mut grid = Vec::new();
    for &n in ns {
        for &dist in dists {
            if rates.contains(&0.0) {
                grid.push(Condition::new(n, Mechanism::None, 0.0, dist)?);
            }
            for &mechanism in mechanisms.iter().filter(|m| **m != Mechanism::None) {
                for &mr in rates.iter().filter(|r| **r != 0.0) {
                    grid.push(Condition::new(n, mechanism, mr, dist)?);
                }
            }
        }
    }
    Ok(grid)
}

pub fn default_grid() -> Vec<Condition> {
    build_grid(&[100, 200, 500], &[Mechanism::Mar, Mechanism::Mnar], &[0.0, 0.05, 0.15, 0.30], &ErrorKind::ALL)
        .expect("default grid is valid")
}

/// Per-method settings shared by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub fiml: FimlOptions,
    pub tsre: TsreOptions,
    pub rmb_iters: usize,
    #[serde(default)]
    pub selection_scope: SelectionScope,
    /// Auxiliary-variable slope for MNAR generation.
    pub r: f64,
}

impl Budget {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            fiml: FimlOptions::default(),
            tsre: TsreOptions::default(),
            rmb_iters: profile.n_iter(),
            selection_scope: SelectionScope::default(),
            r: 0.8,
        }
    }
}

impl Default for Budget {
    fn default() -> Self {
        Self::for_profile(Profile::Test)
    }
}

/// One method's outcome on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub condition: String,
    pub rep: usize,
    pub seed: u64,
    pub method: Method,
    pub converged: bool,
    /// Flattened estimates; absent when the fit errored.
    pub estimates: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMetrics {
    pub parameter: String,
    pub truth: f64,
    pub mean_estimate: f64,
    /// Absolute relative bias in percent; absolute bias when the truth is 0.
    pub rb: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub attempted: usize,
    pub converged: usize,
    pub failed: usize,
    pub convergence_rate: f64,
    /// Empty when no replication converged.
    pub params: Vec<ParamMetrics>,
}

impl MethodSummary {
    pub fn param(&self, name: &str) -> Option<&ParamMetrics> {
        self.params.iter().find(|p| p.parameter == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub reps: usize,
    pub methods: Vec<MethodSummary>,
}

impl ConditionResult {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// `100·|(θ̄ − θ)/θ|`, or `|θ̄ − θ|` when θ = 0.
pub fn relative_bias(estimates: &[f64], theta: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(GcmError::EmptyInput("no estimates".into()));
    }
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    Ok(if theta == 0.0 { (mean - theta).abs() } else { 100.0 * ((mean - theta) / theta).abs() })
}

/// `(1/R) Σ (θ̂_j − θ)²`.
pub fn mse(estimates: &[f64], theta: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(GcmError::EmptyInput("no estimates".into()));
    }
    Ok(estimates.iter().map(|e| (e - theta).powi(2)).sum::<f64>() / estimates.len() as f64)
}

/// FNV-1a over the condition id, replication index and base seed.
pub fn replication_seed(cond: &Condition, rep: usize, base_seed: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    let bytes = cond.id().into_bytes().into_iter().chain((rep as u64).to_le_bytes()).chain(base_seed.to_le_bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// The dataset every method sees for replication `rep` of `cond`.
pub fn generate_replication(cond: &Condition, rep: usize, base_seed: u64, r: f64) -> Result<SimulatedDataset> {
    cond.validate()?;
    let spec = GrowthModelSpec::linear(4)?;
    let truth = ParameterSet::population();
    let mut rng = rng_from_seed(replication_seed(cond, rep, base_seed));
    let sim = datagen::gen_complete(&spec, &truth, &ErrorDistribution::new(cond.dist), cond.n, &mut rng)?;
    let missing = MissingSpec { mechanism: cond.mechanism, rate: cond.mr, r };
    datagen::impose_missing(&sim, &truth, &missing, &mut rng)
}

/// Writes every replication as `<dir>/<condition>/rep_<k>.csv` plus a
/// `truth.csv` with one row per (condition, replication).
pub fn emit_data(grid: &[Condition], reps: usize, base_seed: u64, r: f64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names = GrowthModelSpec::linear(4)?.parameter_names();
    let truth = ParameterSet::population().to_flat();
    let mut tw = csv::Writer::from_path(dir.join("truth.csv"))?;
    let mut header = vec!["condition".to_string(), "rep".to_string(), "seed".to_string()];
    header.extend(names.iter().cloned());
    tw.write_record(&header)?;
    for cond in grid {
        let sub = dir.join(cond.id());
        fs::create_dir_all(&sub)?;
        for rep in 0..reps {
            let sim = generate_replication(cond, rep, base_seed, r)?;
            crate::data::write_csv(&sim.data, fs::File::create(sub.join(format!("rep_{rep:04}.csv")))?)?;
            let mut row = vec![cond.id(), rep.to_string(), replication_seed(cond, rep, base_seed).to_string()];
            row.extend(truth.iter().map(|v| v.to_string()));
            tw.write_record(&row)?;
        }
    }
    tw.flush()?;
    Ok(())
}

/// Generates one dataset and fits every requested method to it.
pub fn run_replication(
    cond: &Condition,
    rep: usize,
    base_seed: u64,
    methods: &[Method],
    budget: &Budget,
) -> Result<Vec<RepRecord>> {
    let seed = replication_seed(cond, rep, base_seed);
    let spec = GrowthModelSpec::linear(4)?;
    let sim = generate_replication(cond, rep, base_seed, budget.r)?;
    let data = &sim.data;
    let priors = RmbPriors::default_for(spec.n_effects());
    // Chain seeds are derived from the data seed so reruns are exact.
    let chain = ChainConfig { selection_scope: budget.selection_scope, ..ChainConfig::new(budget.rmb_iters, seed ^ 0x5bd1_e995) };
    Ok(methods
        .iter()
        .map(|&method| {
            let fit = match method {
                Method::Fiml => fiml_fit(&spec, data, &budget.fiml),
                Method::Tsre => tsre_fit(&spec, data, &budget.tsre),
                Method::Rmb => rmb_fit(&spec, data, &priors, &chain, cond.mechanism == Mechanism::Mnar),
                Method::RmbSelection => rmb_fit(&spec, data, &priors, &chain, true),
            };
            match fit {
                Ok(f) => RepRecord {
                    condition: cond.id(),
                    rep,
                    seed,
                    method,
                    converged: f.converged,
                    estimates: Some(f.flat_estimates()),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{} rep {rep} {method}: {e}", cond.id());
                    RepRecord {
                        condition: cond.id(),
                        rep,
                        seed,
                        method,
                        converged: false,
                        estimates: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}

/// Aggregates RB and MSE over converged replications, in replication order.
pub fn aggregate(cond: &Condition, methods: &[Method], reps: usize, records: &[RepRecord]) -> Result<ConditionResult> {
    let spec = GrowthModelSpec::linear(4)?;
    let names = spec.parameter_names();
    let truth = ParameterSet::population().to_flat();
    let mut sorted: Vec<&RepRecord> = records.iter().filter(|r| r.condition == cond.id()).collect();
    sorted.sort_by_key(|r| r.rep);
    let mut summaries = Vec::with_capacity(methods.len());
    for &method in methods {
        let mine: Vec<&RepRecord> = sorted.iter().copied().filter(|r| r.method == method).collect();
        let ok: Vec<&Vec<f64>> = mine.iter().filter(|r| r.converged).filter_map(|r| r.estimates.as_ref()).collect();
        let failed = mine.iter().filter(|r| r.estimates.is_none()).count();
        let params = if ok.is_empty() {
            Vec::new()
        } else {
            names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let est: Vec<f64> = ok.iter().map(|e| e[j]).collect();
                    Ok(ParamMetrics {
                        parameter: name.clone(),
                        truth: truth[j],
                        mean_estimate: est.iter().sum::<f64>() / est.len() as f64,
                        rb: relative_bias(&est, truth[j])?,
                        mse: mse(&est, truth[j])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        summaries.push(MethodSummary {
            method,
            attempted: mine.len(),
            converged: ok.len(),
            failed,
            convergence_rate: if mine.is_empty() { 0.0 } else { ok.len() as f64 / mine.len() as f64 },
            params,
        });
    }
    Ok(ConditionResult { condition: *cond, reps, methods: summaries })
}

/// Runs the replications of one condition in parallel on the current rayon pool.
pub fn run_condition_records(
    cond: &Condition,
    methods: &[Method],
    reps: usize,
    base_seed: u64,
    budget: &Budget,
) -> Result<Vec<RepRecord>> {
    let per_rep: Vec<Result<Vec<RepRecord>>> =
        (0..reps).into_par_iter().map(|rep| run_replication(cond, rep, base_seed, methods, budget)).collect();
    let mut out = Vec::with_capacity(reps * methods.len());
    for r in per_rep {
        out.extend(r?);
    }
    Ok(out)
}

pub fn run_condition(
    cond: &Condition,
    methods: &[Method],
    reps: usize,
    base_seed: u64,
    budget: &Budget,
) -> Result<ConditionResult> {
    let records = run_condition_records(cond, methods, reps, base_seed, budget)?;
    aggregate(cond, methods, reps, &records)
}

/// Grid-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub methods: Vec<Method>,
    pub reps: usize,
    pub base_seed: u64,
    pub budget: Budget,
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutput {
    pub results: Vec<ConditionResult>,
    pub records: Vec<RepRecord>,
}

fn checkpoint_path(dir: &Path, cond: &Condition) -> PathBuf {
    dir.join(format!("{}.json", cond.id()))
}

/// Writes via a temporary file and rename so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    condition: Condition,
    methods: Vec<Method>,
    reps: usize,
    base_seed: u64,
    budget: Budget,
    records: Vec<RepRecord>,
}

/// Runs every condition, checkpointing each finished one under
/// `checkpoint_dir`. With `resume`, conditions whose checkpoint matches the
/// current settings are loaded instead of rerun.
pub fn run_grid(grid: &[Condition], run: &GridRun, checkpoint_dir: Option<&Path>, resume: bool) -> Result<GridOutput> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if run.jobs > 0 {
        builder = builder.num_threads(run.jobs);
    }
    let pool = builder.build().map_err(|e| GcmError::InvalidParameter(format!("thread pool: {e}")))?;
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut results = Vec::with_capacity(grid.len());
    let mut records = Vec::new();
    for cond in grid {
        let ckpt = checkpoint_dir.map(|d| checkpoint_path(d, cond));
        let cached = match (&ckpt, resume) {
            (Some(p), true) if p.exists() => {
                let c: Checkpoint = serde_json::from_slice(&fs::read(p)?)?;
                let matches = c.condition == *cond
                    && c.methods == run.methods
                    && c.reps == run.reps
                    && c.base_seed == run.base_seed
                    && c.budget == run.budget;
                if matches {
                    log::info!("{}: loaded from checkpoint", cond.id());
                    Some(c.records)
                } else {
                    log::warn!("{}: checkpoint settings differ, rerunning", cond.id());
                    None
                }
            }
            _ => None,
        };
        let recs = match cached {
            Some(r) => r,
            None => {
                log::info!("{}: running {} replications", cond.id(), run.reps);
                let r = pool.install(|| run_condition_records(cond, &run.methods, run.reps, run.base_seed, &run.budget))?;
                if let Some(p) = &ckpt {
                    let c = Checkpoint {
                        condition: *cond,
                        methods: run.methods.clone(),
                        reps: run.reps,
                        base_seed: run.base_seed,
                        budget: run.budget.clone(),
                        records: r,
                    };
                    write_atomic(p, &serde_json::to_vec(&c)?)?;
                    c.records
                } else {
                    r
                }
            }
        };
        results.push(aggregate(cond, &run.methods, run.reps, &recs)?);
        records.extend(recs);
    }
    Ok(GridOutput { results, records })
}

/// Long-format metrics: one row per condition × method × parameter.
pub fn write_results_csv<W: Write>(results: &[ConditionResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "n", "mechanism", "mr", "dist", "method", "parameter", "truth", "mean_estimate", "rb", "mse", "converged",
        "reps", "convergence_rate",
    ])?;
    for r in results {
        let c = &r.condition;
        for m in &r.methods {
            for p in &m.params {
                w.write_record([
                    c.n.to_string(),
                    c.mechanism.as_str().to_string(),
                    c.mr.to_string(),
                    c.dist.as_str().to_string(),
                    m.method.as_str().to_string(),
                    p.parameter.clone(),
                    p.truth.to_string(),
                    p.mean_estimate.to_string(),
                    p.rb.to_string(),
                    p.mse.to_string(),
                    m.converged.to_string(),
                    r.reps.to_string(),
                    m.convergence_rate.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_convergence_csv<W: Write>(results: &[ConditionResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "mechanism", "mr", "dist", "method", "attempted", "converged", "failed", "convergence_rate"])?;
    for r in results {
        let c = &r.condition;
        for m in &r.methods {
            w.write_record([
                c.n.to_string(),
                c.mechanism.as_str().to_string(),
                c.mr.to_string(),
                c.dist.as_str().to_string(),
                m.method.as_str().to_string(),
                m.attempted.to_string(),
                m.converged.to_string(),
                m.failed.to_string(),
                m.convergence_rate.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-replication estimates, one row per method and replication.
pub fn write_raw_csv<W: Write>(records: &[RepRecord], writer: W) -> Result<()> {
    let names = GrowthModelSpec::linear(4)?.parameter_names();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["condition", "rep", "seed", "method", "converged", "error"].map(String::from).to_vec();
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.condition.clone(),
            r.rep.to_string(),
            r.seed.to_string(),
            r.method.as_str().to_string(),
            r.converged.to_string(),
            r.error.clone().unwrap_or_default(),
        ];
        match &r.estimates {
            Some(e) => row.extend(e.iter().map(|v| v.to_string())),
            None => row.extend(names.iter().map(|_| "NA".to_string())),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Recomputes every RB and MSE directly from the raw records and checks
/// them against the aggregated table.
pub fn self_audit(results: &[ConditionResult], records: &[RepRecord]) -> Result<()> {
    let truth = ParameterSet::population().to_flat();
    for r in results {
        let id = r.condition.id();
        for m in &r.methods {
            for (j, p) in m.params.iter().enumerate() {
                let est: Vec<f64> = records
                    .iter()
                    .filter(|x| x.condition == id && x.method == m.method && x.converged)
                    .filter_map(|x| x.estimates.as_ref().map(|e| e[j]))
                    .collect();
                let mean = est.iter().sum::<f64>() / est.len() as f64;
                let rb = if truth[j] == 0.0 { (mean - truth[j]).abs() } else { 100.0 * ((mean - truth[j]) / truth[j]).abs() };
                let mse = est.iter().map(|e| (e - truth[j]) * (e - truth[j])).sum::<f64>() / est.len() as f64;
                let tol = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
                if !tol(rb, p.rb) || !tol(mse, p.mse) {
                    return Err(GcmError::Degenerate(format!(
                        "audit mismatch for {id} {} {}: rb {} vs {}, mse {} vs {}",
                        m.method, p.parameter, rb, p.rb, mse, p.mse
                    )));
                }
            }
        }
    }
    Ok(())
}

/// JSON run description; factor lists default to the full design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: Vec<usize>,
    pub mechanisms: Vec<Mechanism>,
    pub rates: Vec<f64>,
    pub distributions: Vec<ErrorKind>,
    pub reps: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub profile: Profile,
    /// Overrides the profile's chain length.
    pub rmb_iters: Option<usize>,
    pub r: f64,
    pub huber_prob: f64,
    pub selection_scope: SelectionScope,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: vec![100, 200, 500],
            mechanisms: vec![Mechanism::Mar, Mechanism::Mnar],
            rates: vec![0.0, 0.05, 0.15, 0.30],
            distributions: ErrorKind::ALL.to_vec(),
            reps: 500,
            base_seed: 1,
            methods: vec![Method::Fiml, Method::Tsre, Method::Rmb],
            profile: Profile::Test,
            rmb_iters: None,
            r: 0.8,
            huber_prob: TsreOptions::default().huber_prob,
            selection_scope: SelectionScope::default(),
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: SimConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(GcmError::InvalidParameter("reps must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(GcmError::InvalidParameter("no methods requested".into()));
        }
        if self.rmb_iters.is_some_and(|k| k < 200) {
            return Err(GcmError::InvalidParameter("rmb_iters must be at least 200".into()));
        }
        self.budget().tsre.validate()?;
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<Vec<Condition>> {
        build_grid(&self.n, &self.mechanisms, &self.rates, &self.distributions)
    }

    pub fn budget(&self) -> Budget {
        let mut b = Budget::for_profile(self.profile);
        if let Some(k) = self.rmb_iters {
            b.rmb_iters = k;
        }
        b.r = self.r;
        b.tsre.huber_prob = self.huber_prob;
        b.selection_scope = self.selection_scope;
        b
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub package: &'static str,
    pub version: &'static str,
    pub config: SimConfig,
    pub budget: Budget,
    pub n_conditions: usize,
    pub seeds: Vec<ManifestSeed>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestSeed {
    pub condition: String,
    pub rep: usize,
    pub seed: u64,
}

pub fn manifest(config: &SimConfig, grid: &[Condition]) -> Manifest {
    let seeds = grid
        .iter()
        .flat_map(|c| {
            (0..config.reps).map(move |rep| ManifestSeed {
                condition: c.id(),
                rep,
                seed: replication_seed(c, rep, config.base_seed),
            })
        })
        .collect();
    Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: config.clone(),
        budget: config.budget(),
        n_conditions: grid.len(),
        seeds,
    }
}

/// Runs a configured study, writing `results.csv`, `convergence.csv`,
/// `raw_estimates.csv` and `manifest.json` under `out`. Checkpoints go to
/// `out/checkpoints`.
pub fn run_study(config: &SimConfig, out: &Path, jobs: usize, resume: bool) -> Result<GridOutput> {
    config.validate()?;
    let grid = config.grid()?;
    fs::create_dir_all(out)?;
    let run = GridRun {
        methods: config.methods.clone(),
        reps: config.reps,
        base_seed: config.base_seed,
        budget: config.budget(),
        jobs,
    };
    let output = run_grid(&grid, &run, Some(&out.join("checkpoints")), resume)?;
    self_audit(&output.results, &output.records)?;
    let mut buf = Vec::new();
    write_results_csv(&output.results, &mut buf)?;
    write_atomic(&out.join("results.csv"), &buf)?;
    buf.clear();
    write_convergence_csv(&output.results, &mut buf)?;
    write_atomic(&out.join("convergence.csv"), &buf)?;
    buf.clear();
    write_raw_csv(&output.records, &mut buf)?;
    write_atomic(&out.join("raw_estimates.csv"), &buf)?;
    let m = serde_json::to_vec_pretty(&manifest(config, &grid))?;
    write_atomic(&out.join("manifest.json"), &m)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert!((relative_bias(&[6.2, 6.4], 6.0).unwrap() - 5.0).abs() < 1e-12);
        assert!((relative_bias(&[0.1, 0.3], 0.0).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(relative_bias(&[2.0, 2.0], 2.0).unwrap(), 0.0);
        assert!((mse(&[1.9, 2.1], 2.0).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(mse(&[2.0; 3], 2.0).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 4.0], 2.0).unwrap(), 4.0);
        assert!(relative_bias(&[], 1.0).is_err() && mse(&[], 1.0).is_err());
    }

    #[test]
    fn grid_size() {
        let g = default_grid();
        assert_eq!(g.len(), 84);
        assert_eq!(g.iter().filter(|c| c.mr == 0.0).count(), 12);
        let ids: std::collections::BTreeSet<String> = g.iter().map(|c| c.id()).collect();
        assert_eq!(ids.len(), 84);
        assert!(build_grid(&[], &[Mechanism::Mar], &[0.1], &ErrorKind::ALL).unwrap().is_empty());
    }

    #[test]
    fn condition_validation() {
        assert!(Condition::new(100, Mechanism::None, 0.1, ErrorKind::Normal).is_err());
        assert!(Condition::new(100, Mechanism::Mar, 0.0, ErrorKind::Normal).is_err());
        assert!(Condition::new(100, Mechanism::Mar, 0.1, ErrorKind::Normal).is_ok());
    }

    #[test]
    fn seeds_differ_by_condition_and_rep() {
        let a = Condition::new(100, Mechanism::Mar, 0.05, ErrorKind::Normal).unwrap();
        let b = Condition::new(100, Mechanism::Mnar, 0.05, ErrorKind::Normal).unwrap();
        assert_ne!(replication_seed(&a, 0, 1), replication_seed(&b, 0, 1));
        assert_ne!(replication_seed(&a, 0, 1), replication_seed(&a, 1, 1));
        assert_ne!(replication_seed(&a, 0, 1), replication_seed(&a, 0, 2));
        assert_eq!(replication_seed(&a, 3, 9), replication_seed(&a, 3, 9));
    }
}
