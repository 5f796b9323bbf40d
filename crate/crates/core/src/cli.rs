//! Command-line interface. Every command writes its artifacts and a
//! `manifest.json` into `--out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{
    group_index, load_csv, summarize, Dataset, FactorScheme, Formula, GroupIndex, LoadReport,
    SchemaConfig,
};
use crate::error::{Error, Result};
use crate::estimation::{
    fit_em, fit_gibbs, summarize_coefficients, summarize_groups, summarize_point, CellDesigns,
    ChainConfig, Draw, EmInit, EmOptions, PosteriorDraws, Priors,
};
use crate::selection::{
    hierarchical_candidates, interaction_candidates, ppc, select_covariance, select_mean,
    CovSelectionConfig, PpcData,
};
use crate::sensitivity::{run_study, SensitivityConfig, SensitivitySource, SeparateMode};
use crate::stochastics::RngStream;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "covreg",
    version,
    about = "Joint mean and covariance regression for categorical predictors"
)]
pub struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One-way descriptive statistics by factor level.
    Summarize(SummarizeArgs),
    /// Fit a covariance regression model by EM or Gibbs sampling.
    Fit(FitArgs),
    /// Model selection: AIC over mean formulas, or forward covariance search.
    Select(SelectArgs),
    /// Posterior predictive check of stored draws.
    Ppc(PpcArgs),
    /// Simulation study against a per-group estimator.
    Sensitivity(SensitivityArgs),
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON schema declaring factors and responses.
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SummarizeArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Em,
    Gibbs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ChainArgs {
    #[arg(long, default_value_t = ChainConfig::default().burn_in)]
    pub burn_in: usize,
    /// Retained draws.
    #[arg(long, default_value_t = ChainConfig::default().samples)]
    pub samples: usize,
    #[arg(long, default_value_t = ChainConfig::default().thin)]
    pub thin: usize,
}

impl ChainArgs {
    fn config(&self) -> ChainConfig {
        ChainConfig {
            burn_in: self.burn_in,
            samples: self.samples,
            thin: self.thin,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub mean_formula: String,
    #[arg(long)]
    pub cov_formula: String,
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    #[arg(long, value_enum, default_value_t = Method::Em)]
    pub method: Method,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// EM relative tolerance on the log-likelihood change.
    #[arg(long, default_value_t = EmOptions::default().tol_rel)]
    pub tol: f64,
    #[arg(long, default_value_t = EmOptions::default().max_iters)]
    pub max_iters: usize,
    /// EM starting points.
    #[arg(long, default_value_t = EmOptions::default().n_starts)]
    pub starts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mean,
    Covariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSet {
    /// All main effects plus every subset of two-way interactions.
    Interactions,
    /// Every hierarchical formula with at least one main effect.
    Hierarchical,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Required for the covariance stage.
    #[arg(long)]
    pub mean_formula: Option<String>,
    #[arg(long, value_enum, default_value_t = CandidateSet::Interactions)]
    pub candidates: CandidateSet,
    #[arg(long, default_value_t = CovSelectionConfig::default().max_rank)]
    pub max_rank: usize,
    /// Predictive replicates per check.
    #[arg(long, default_value_t = CovSelectionConfig::default().n_reps)]
    pub reps: usize,
    #[arg(long, default_value_t = CovSelectionConfig::default().threshold)]
    pub threshold: f64,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct PpcArgs {
    /// Directory written by `fit --method gibbs`.
    #[arg(long)]
    pub draws: PathBuf,
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparateArg {
    Mean,
    Draw,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SensitivityArgs {
    /// Source model file; the bundled synthetic source when omitted.
    #[arg(long, conflicts_with_all = ["data", "schema"])]
    pub source: Option<PathBuf>,
    /// Fit the source model to data instead (needs --schema and formulas).
    #[arg(long, requires_all = ["schema", "mean_formula", "cov_formula"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub mean_formula: Option<String>,
    #[arg(long)]
    pub cov_formula: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, value_delimiter = ',', default_values_t = SensitivityConfig::default().nu)]
    pub nu: Vec<f64>,
    /// Replicates per ν.
    #[arg(long, default_value_t = SensitivityConfig::default().replicates)]
    pub reps: usize,
    #[arg(long, value_enum, default_value_t = SeparateArg::Mean)]
    pub separate: SeparateArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command run. Output paths are relative to the output
/// directory, which is left out of `config` and its digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_report: Option<LoadReport>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects what a command read and wrote.
struct Run {
    command: &'static str,
    out: PathBuf,
    started: Instant,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    flags: Vec<String>,
    load_report: Option<LoadReport>,
}

impl Run {
    fn new(
        command: &'static str,
        out: &Path,
        config: &impl Serialize,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            started: Instant::now(),
            config: serde_json::to_value(config)?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            flags: Vec::new(),
            load_report: None,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn flag(&mut self, flag: impl Into<String>) {
        let flag = flag.into();
        eprintln!("warning: {flag}");
        self.flags.push(flag);
    }

    fn load(&mut self, input: &DataArgs) -> Result<(SchemaConfig, FactorScheme, Dataset)> {
        let schema = SchemaConfig::from_json_file(&input.schema)?;
        let scheme = schema.scheme()?;
        let (data, report) = load_csv(&input.data, &schema)?;
        if report.dropped() > 0 {
            eprintln!(
                "note: dropped {} of {} rows ({} missing, {} unknown level, {} non-positive)",
                report.dropped(),
                report.rows_read,
                report.dropped_missing,
                report.dropped_unknown_level,
                report.dropped_nonpositive
            );
        }
        self.inputs.push(input.data.clone());
        self.inputs.push(input.schema.clone());
        self.load_report = Some(report);
        Ok((schema, scheme, data))
    }

    fn finish(self) -> Result<RunManifest> {
        let digest = |p: &Path, base: Option<&Path>| -> Result<FileDigest> {
            let shown = base
                .and_then(|b| p.strip_prefix(b).ok())
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            Ok(FileDigest {
                path: shown,
                sha256: sha256_file(p)?,
            })
        };
        let mut outputs = Vec::new();
        for p in &self.outputs {
            if p.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<std::io::Result<_>>()?;
                files.sort();
                for f in files {
                    outputs.push(digest(&f, Some(&self.out))?);
                }
            } else {
                outputs.push(digest(p, Some(&self.out))?);
            }
        }
        let config_bytes = serde_json::to_vec(&self.config)?;
        let manifest = RunManifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_digest: hex::encode(Sha256::digest(&config_bytes)),
            config: self.config,
            seeds: self.seeds,
            inputs: self
                .inputs
                .iter()
                .map(|p| digest(p, None))
                .collect::<Result<_>>()?,
            outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            flags: self.flags,
            load_report: self.load_report,
        };
        let tmp = self.out.join(format!(".{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        std::fs::rename(&tmp, self.out.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success (including flagged results), 1 on I/O failure, 2 on
/// invalid input or configuration.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(&cli.command)),
        Err(e) => Err(Error::InvalidConfig(format!("thread pool: {e}"))),
    };
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> Result<RunManifest> {
    match command {
        Command::Summarize(a) => cmd_summarize(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Ppc(a) => cmd_ppc(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `summary.csv` (one row per factor level and response) and
/// `table.csv` (one row per factor level, `mean (sd)` per response).
pub fn cmd_summarize(args: &SummarizeArgs) -> Result<RunManifest> {
    let mut run = Run::new("summarize", &args.out, args, Vec::new())?;
    let (_, scheme, data) = run.load(&args.input)?;
    let rows = summarize(&data, &scheme)?;

    let mut w = csv::Writer::from_path(run.path("summary.csv"))?;
    w.write_record(["factor", "level", "n", "response", "mean", "sd"])?;
    for r in &rows {
        for (name, s) in data.response_names.iter().zip(&r.stats) {
            w.write_record([
                r.factor.clone(),
                r.level.clone(),
                r.n.to_string(),
                name.clone(),
                fmt_opt(s.mean),
                fmt_opt(s.sd),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(run.path("table.csv"))?;
    let mut header = vec!["factor".to_string(), "group".into(), "n".into()];
    header.extend(data.response_names.iter().cloned());
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.factor.clone(), r.level.clone(), r.n.to_string()];
        for s in &r.stats {
            rec.push(match (s.mean, s.sd) {
                (Some(m), Some(sd)) => format!("{m:.2} ({sd:.2})"),
                (Some(m), None) => format!("{m:.2}"),
                _ => String::new(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    run.finish()
}

fn parse_formula(text: &str, scheme: &FactorScheme) -> Result<Formula> {
    Formula::parse(text)?.canonical(scheme)
}

/// Cell designs restricted to cells with at least one observation.
fn observed_cells(
    scheme: &FactorScheme,
    f1: &Formula,
    f2: &Formula,
    index: &GroupIndex,
) -> Result<CellDesigns> {
    let all = CellDesigns::new(scheme, f1, f2)?;
    let keep: Vec<usize> = (0..all.len())
        .filter(|&c| !index.cells[c].rows.is_empty())
        .collect();
    Ok(CellDesigns {
        labels: keep.iter().map(|&c| all.labels[c].clone()).collect(),
        x1: keep.iter().map(|&c| all.x1[c].clone()).collect(),
        x2: keep.iter().map(|&c| all.x2[c].clone()).collect(),
    })
}

fn check_rank(rank: usize, p: usize) -> Result<()> {
    if rank == 0 || rank > p {
        return Err(Error::InvalidConfig(format!(
            "rank must be between 1 and p = {p}, got {rank}"
        )));
    }
    Ok(())
}

/// EM: `fit.json`, `loglik_trace.csv`. Gibbs: `draws/`. Both:
/// `group_summary.csv` and `coefficient_summary.csv`.
pub fn cmd_fit(args: &FitArgs) -> Result<RunManifest> {
    let mut run = Run::new("fit", &args.out, args, vec![args.seed])?;
    let (_, scheme, data) = run.load(&args.input)?;
    let f1 = parse_formula(&args.mean_formula, &scheme)?;
    let f2 = parse_formula(&args.cov_formula, &scheme)?;
    check_rank(args.rank, data.p())?;
    let codes = scheme.encode(&data)?;
    let index = group_index(&scheme, &data)?;
    let d1 = f1.resolve(&scheme)?.design(&scheme, &codes);
    let d2 = f2.resolve(&scheme)?.design(&scheme, &codes);
    let cells = observed_cells(&scheme, &f1, &f2, &index)?;
    let y = &data.responses;

    let draws = match args.method {
        Method::Em => {
            let options = EmOptions {
                tol_rel: args.tol,
                max_iters: args.max_iters,
                n_starts: args.starts,
            };
            let fit = fit_em(
                y,
                &d1,
                &d2,
                args.rank,
                EmInit::Default { seed: args.seed },
                options,
            )?;
            if !fit.converged {
                run.flag(format!(
                    "em_not_converged after {} iterations",
                    fit.iterations
                ));
            }
            let mut json = fit.to_json();
            json.model.mean_formula = Some(f1.to_string());
            json.model.cov_formula = Some(f2.to_string());
            std::fs::write(
                run.path("fit.json"),
                serde_json::to_string_pretty(&json)? + "\n",
            )?;
            let mut w = csv::Writer::from_path(run.path("loglik_trace.csv"))?;
            w.write_record(["iteration", "loglik"])?;
            for (k, ll) in fit.loglik_trace.iter().enumerate() {
                w.write_record([k.to_string(), ll.to_string()])?;
            }
            w.flush()?;
            summarize_point(&fit.mean, &fit.params, &data.response_names, &cells)?
                .write_csv(&run.path("group_summary.csv"))?;
            PosteriorDraws {
                draws: vec![Draw {
                    mean: fit.mean,
                    params: fit.params,
                }],
                burn_in: 0,
                thin: 1,
                seed: args.seed,
                stream_id: 0,
                mean_labels: fit.mean_labels,
                cov_labels: fit.cov_labels,
                response_names: data.response_names.clone(),
                mean_formula: Some(f1.to_string()),
                cov_formula: Some(f2.to_string()),
            }
        }
        Method::Gibbs => {
            let mut rng = RngStream::new(args.seed, 0);
            let mut draws = fit_gibbs(
                y,
                &d1,
                &d2,
                args.rank,
                &Priors::default(),
                &args.chain.config(),
                &mut rng,
            )?;
            draws.response_names = data.response_names.clone();
            draws.mean_formula = Some(f1.to_string());
            draws.cov_formula = Some(f2.to_string());
            draws.save(&run.path("draws"))?;
            summarize_groups(&draws, &cells)?.write_csv(&run.path("group_summary.csv"))?;
            draws
        }
    };
    summarize_coefficients(&draws)?.write_csv(&run.path("coefficient_summary.csv"))?;
    run.finish()
}

/// Mean stage: `selection_trace.json`. Covariance stage additionally
/// writes per-step predictive-check files `step<t>_ppc_*` and the final
/// model's draws in `final_draws/`. The final model goes to stdout.
pub fn cmd_select(args: &SelectArgs) -> Result<RunManifest> {
    let seeds = if args.stage == Stage::Covariance {
        vec![args.seed]
    } else {
        Vec::new()
    };
    let mut run = Run::new("select", &args.out, args, seeds)?;
    let (_, scheme, data) = run.load(&args.input)?;
    let codes = scheme.encode(&data)?;
    let y = &data.responses;
    let trace = match args.stage {
        Stage::Mean => {
            let candidates = match args.candidates {
                CandidateSet::Interactions => interaction_candidates(&scheme),
                CandidateSet::Hierarchical => hierarchical_candidates(&scheme),
            };
            select_mean(y, &scheme, &codes, &candidates)?
        }
        Stage::Covariance => {
            let text = args.mean_formula.as_deref().ok_or_else(|| {
                Error::InvalidConfig("--mean-formula is required for the covariance stage".into())
            })?;
            let f1 = parse_formula(text, &scheme)?;
            check_rank(args.max_rank, data.p())?;
            let config = CovSelectionConfig {
                max_rank: args.max_rank,
                threshold: args.threshold,
                n_reps: args.reps,
                chain: args.chain.config(),
                ..Default::default()
            };
            let sel = select_covariance(y, &scheme, &codes, &f1, &config, args.seed)?;
            for (t, report) in sel.reports.iter().enumerate() {
                let prefix = format!("step{t}_ppc_");
                run.outputs
                    .extend(report.write_pair_csvs(&args.out, &prefix)?);
                report.write_json(&run.path(&format!("{prefix}report.json")))?;
                report.write_summary_csv(&run.path(&format!("{prefix}summary.csv")))?;
            }
            let mut draws = sel.final_draws;
            draws.response_names = data.response_names.clone();
            draws.save(&run.path("final_draws"))?;
            if sel.trace.final_model.no_acceptable_model {
                run.flag("no_acceptable_model");
            }
            sel.trace
        }
    };
    trace.write_json(&run.path("selection_trace.json"))?;
    let m = &trace.final_model;
    println!("mean: {}", m.mean_formula);
    if let Some(c) = &m.cov_formula {
        println!("covariance: {c}");
    }
    if let Some(r) = m.rank {
        println!("rank: {r}");
    }
    if m.no_acceptable_model {
        println!("no acceptable model");
    }
    run.finish()
}

/// Six (for four factors) `ppc_<A>_<B>.csv` files, `ppc_report.json` and
/// `ppc_summary.csv`.
pub fn cmd_ppc(args: &PpcArgs) -> Result<RunManifest> {
    let mut run = Run::new("ppc", &args.out, args, vec![args.seed])?;
    let draws = PosteriorDraws::load(&args.draws)?;
    let (_, scheme, data) = run.load(&args.input)?;
    run.inputs.push(args.draws.join("draws.csv"));
    run.inputs.push(args.draws.join("metadata.json"));
    let formula = |f: &Option<String>| -> Result<Formula> {
        let text = f
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("draws metadata lacks model formulas".into()))?;
        parse_formula(text, &scheme)
    };
    let f1 = formula(&draws.mean_formula)?;
    let f2 = formula(&draws.cov_formula)?;
    let codes = scheme.encode(&data)?;
    let index = group_index(&scheme, &data)?;
    let d1 = f1.resolve(&scheme)?.design(&scheme, &codes);
    let d2 = f2.resolve(&scheme)?.design(&scheme, &codes);
    let input = PpcData {
        scheme: &scheme,
        index: &index,
        y: &data.responses,
        design1: &d1,
        design2: &d2,
    };
    let report = ppc(&draws, input, args.reps, &RngStream::new(args.seed, 0))?;
    run.outputs
        .extend(report.write_pair_csvs(&args.out, "ppc_")?);
    report.write_json(&run.path("ppc_report.json"))?;
    report.write_summary_csv(&run.path("ppc_summary.csv"))?;
    for pair in report.failing(CovSelectionConfig::default().threshold) {
        println!("{}: tail probability {}", pair.label, pair.tail_probability);
    }
    run.finish()
}

/// Source from data: an EM fit at the given formulas and rank, with the
/// observed cell sizes.
fn source_from_data(args: &SensitivityArgs, run: &mut Run) -> Result<SensitivitySource> {
    let input = DataArgs {
        data: args.data.clone().expect("checked by caller"),
        schema: args
            .schema
            .clone()
            .ok_or_else(|| Error::InvalidConfig("--data requires --schema".into()))?,
    };
    let (_, scheme, data) = run.load(&input)?;
    let text = |f: &Option<String>| {
        f.clone().ok_or_else(|| {
            Error::InvalidConfig("--data requires --mean-formula and --cov-formula".into())
        })
    };
    let f1 = parse_formula(&text(&args.mean_formula)?, &scheme)?;
    let f2 = parse_formula(&text(&args.cov_formula)?, &scheme)?;
    check_rank(args.rank, data.p())?;
    let codes = scheme.encode(&data)?;
    let d1 = f1.resolve(&scheme)?.design(&scheme, &codes);
    let d2 = f2.resolve(&scheme)?.design(&scheme, &codes);
    let fit = fit_em(
        &data.responses,
        &d1,
        &d2,
        args.rank,
        EmInit::Default { seed: args.seed },
        EmOptions::default(),
    )?;
    if !fit.converged {
        run.flag("source_em_not_converged");
    }
    let sizes = group_index(&scheme, &data)?.cell_sizes();
    SensitivitySource::new(
        scheme,
        data.response_names,
        f1,
        f2,
        fit.mean,
        fit.params,
        sizes,
    )
}

/// `sensitivity_report.json` and two CSVs per ν.
pub fn cmd_sensitivity(args: &SensitivityArgs) -> Result<RunManifest> {
    let mut run = Run::new("sensitivity", &args.out, args, vec![args.seed])?;
    let source = if let Some(path) = &args.source {
        run.inputs.push(path.clone());
        SensitivitySource::read(path)?
    } else if args.data.is_some() {
        source_from_data(args, &mut run)?
    } else {
        SensitivitySource::bundled()
    };
    let config = SensitivityConfig {
        nu: args.nu.clone(),
        replicates: args.reps,
        seed: args.seed,
        separate: match args.separate {
            SeparateArg::Mean => SeparateMode::PosteriorMean,
            SeparateArg::Draw => SeparateMode::Draw,
        },
        ..Default::default()
    };
    config.validate(source.p())?;
    let report = run_study(&source, &config)?;
    run.outputs.extend(report.write(&args.out)?);
    let unconverged: usize = report
        .runs
        .iter()
        .flat_map(|r| &r.replicates)
        .filter(|r| !r.em_converged)
        .count();
    if unconverged > 0 {
        run.flag(format!("{unconverged} replicate EM fits did not converge"));
    }
    run.finish()
}
