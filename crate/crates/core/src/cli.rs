//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{kbin_table, summarize_fields, violins, write_field_csv, write_kbin_csv, FieldSummary, KBinRow, Measure, Violin};
use crate::effectsize::{convert_with_se, Metric};
use crate::ensemble::{ModelSpace, ModelSpaceConfig};
use crate::error::{Error, Result};
use crate::inference::IntegrationSettings;
use crate::ingest::{load_dataset, validate_and_filter, write_precomputed_csv, Dataset, FilterReport, Schema};
use crate::measures::{analyze, read_measures_csv, write_measures_csv, MeasureSet};
use crate::rng::{derive_key, label_hash};
use crate::simgen::{simulate_corpus, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Environment variable holding the log filter (e.g. `info`, `debug`).
pub const LOG_ENV: &str = "PSBMA_LOG";

#[derive(Debug, Parser)]
#[command(name = "psbma", version, about = "Publication-selection-bias adjusted Bayesian model-averaged meta-analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemaArg {
    Precomputed,
    RawContinuous,
    RawDichotomous,
}

impl From<SchemaArg> for Schema {
    fn from(s: SchemaArg) -> Schema {
        match s {
            SchemaArg::Precomputed => Schema::Precomputed,
            SchemaArg::RawContinuous => Schema::RawContinuous,
            SchemaArg::RawDichotomous => Schema::RawDichotomous,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Input CSV file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "precomputed")]
    schema: SchemaArg,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// TOML file with `[model_space]` and `[integration]` overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert effect sizes between metrics.
    Convert {
        /// PRECOMPUTED CSV to convert row by row.
        #[arg(long, conflicts_with = "value")]
        input: Option<PathBuf>,
        #[arg(long, requires = "from")]
        value: Option<f64>,
        #[arg(long)]
        se: Option<f64>,
        #[arg(long)]
        from: Option<Metric>,
        #[arg(long)]
        to: Metric,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Fit one meta-analysis and write its report.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Meta-analysis id; may be omitted when the file holds one.
        #[arg(long)]
        ma: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit every meta-analysis and write per-meta-analysis measures.
    Batch {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Field and study-count summaries of a measures CSV.
    Summarize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Points in each violin density grid.
        #[arg(long, default_value_t = 256)]
        grid: usize,
    },
    /// Write a synthetic corpus.
    Simulate {
        /// Simulation TOML.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Apply the inclusion filters and print the report.
    Validate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Settings read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model_space: ModelSpaceConfig,
    pub integration: IntegrationSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        ModelSpace::from_config(&cfg.model_space)?;
        cfg.integration.check()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub input_paths: Vec<String>,
    pub tool_version: String,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

struct Run {
    command: &'static str,
    started: Instant,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<String>,
    warnings: Vec<String>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run { command, started: Instant::now(), config_hash: hash_bytes(b""), seed: None, inputs: Vec::new(), warnings: Vec::new() }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }

    fn write_manifest(self, dir: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            config_hash: self.config_hash,
            seed: self.seed,
            input_paths: self.inputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            warnings: self.warnings,
        };
        write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&m)?.as_bytes())
    }
}

fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_run_config(path: Option<&Path>, run: &mut Run) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    run.config_hash = hash_bytes(serde_json::to_string(&cfg)?.as_bytes());
    Ok(cfg)
}

/// Seed for one meta-analysis, independent of processing order.
pub fn ma_seed(seed: u64, ma_id: &str) -> u64 {
    derive_key(seed, &[label_hash(ma_id)])
}

fn load_filtered(data: &DataArgs, run: &mut Run) -> Result<(Dataset, FilterReport)> {
    run.input(&data.input);
    let ds = load_dataset(&data.input, data.schema.into())?;
    let (mut ds, report) = validate_and_filter(ds);
    if !report.is_clean() {
        run.warn(format!(
            "filters removed {} of {} rows and {} meta-analyses",
            report.removed(),
            report.input_rows,
            report.ma_too_small
        ));
    }
    ds.meta_analyses.sort_by(|a, b| a.ma_id.cmp(&b.ma_id));
    Ok((ds, report))
}

fn cmd_convert(input: Option<PathBuf>, value: Option<f64>, se: Option<f64>, from: Option<Metric>, to: Metric, format: Format) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    #[derive(Serialize)]
    struct Row {
        study_id: String,
        metric: Metric,
        value: f64,
        se: Option<f64>,
    }
    let rows: Vec<Row> = match (input, value) {
        (Some(path), _) => {
            let ds = load_dataset(&path, Schema::Precomputed)?;
            for r in &ds.rejections {
                warn!("line {}: {}", r.line, r.message);
            }
            let mut rows = Vec::new();
            for ma in &ds.meta_analyses {
                for (e, p) in ma.estimates.iter().zip(&ma.provenance) {
                    let (v, s) = convert_with_se(p.y, p.se, p.metric, to)?;
                    rows.push(Row { study_id: format!("{}/{}", ma.ma_id, e.study_id), metric: to, value: v, se: Some(s) });
                }
            }
            rows
        }
        (None, Some(v)) => {
            let from = from.ok_or_else(|| Error::invalid("--from is required with --value"))?;
            let (value, se) = match se {
                Some(s) => {
                    let (v, s) = convert_with_se(v, s, from, to)?;
                    (v, Some(s))
                }
                None => (crate::effectsize::convert_point(v, from, to)?, None),
            };
            vec![Row { study_id: String::new(), metric: to, value, se }]
        }
        (None, None) => return Err(Error::invalid("give --input or --value")),
    };
    match format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_fit(data: DataArgs, fit: FitArgs, ma: Option<String>, out_dir: Option<PathBuf>) -> Result<()> {
    let mut run = Run::new("fit");
    let cfg = load_run_config(fit.config.as_deref(), &mut run)?;
    run.seed = Some(fit.seed);
    let (ds, _) = load_filtered(&data, &mut run)?;
    let target = match ma {
        Some(id) => ds.get(&id).ok_or_else(|| Error::invalid(format!("no meta-analysis '{id}' after filtering")))?,
        None if ds.meta_analyses.len() == 1 => &ds.meta_analyses[0],
        None => return Err(Error::invalid("the input holds several meta-analyses; choose one with --ma")),
    };
    let space = ModelSpace::from_config(&cfg.model_space)?;
    let settings = cfg.integration.with_seed(ma_seed(fit.seed, &target.ma_id));
    let (_, report) = analyze(&target.ma_id, &target.field, &target.estimates, &space, &settings)?;
    for w in &report.diagnostics.warnings {
        run.warn(w.clone());
    }
    let json = serde_json::to_string_pretty(&report)?;
    match out_dir {
        Some(dir) => {
            prepare_dir(&dir)?;
            write_file(&dir.join(format!("fit_{}.json", target.ma_id)), json.as_bytes())?;
            run.write_manifest(&dir)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_batch(data: DataArgs, fit: FitArgs, jobs: usize, out_dir: PathBuf, format: Format) -> Result<()> {
    let mut run = Run::new("batch");
    let cfg = load_run_config(fit.config.as_deref(), &mut run)?;
    run.seed = Some(fit.seed);
    let (ds, report) = load_filtered(&data, &mut run)?;
    let space = ModelSpace::from_config(&cfg.model_space)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::invalid(e.to_string()))?;
    info!("fitting {} meta-analyses on {} threads", ds.meta_analyses.len(), pool.current_num_threads());
    let results: Vec<_> = pool.install(|| {
        ds.meta_analyses
            .par_iter()
            .map(|ma| {
                let settings = cfg.integration.with_seed(ma_seed(fit.seed, &ma.ma_id));
                (ma.ma_id.clone(), analyze(&ma.ma_id, &ma.field, &ma.estimates, &space, &settings))
            })
            .collect()
    });
    let mut rows: Vec<MeasureSet> = Vec::new();
    let mut fits = String::new();
    for (id, r) in results {
        match r {
            Ok((m, report)) => {
                for w in &report.diagnostics.warnings {
                    run.warn(format!("{id}: {w}"));
                }
                fits.push_str(&serde_json::to_string(&report)?);
                fits.push('\n');
                rows.push(m);
            }
            Err(e) => run.warn(format!("{id}: fit failed: {e}")),
        }
    }
    prepare_dir(&out_dir)?;
    match format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_measures_csv(&rows, &mut buf)?;
            write_file(&out_dir.join("measures.csv"), &buf)?;
        }
        Format::Json => write_file(&out_dir.join("measures.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?,
    }
    write_file(&out_dir.join("fits.jsonl"), fits.as_bytes())?;
    write_file(&out_dir.join("filter_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let failed = ds.meta_analyses.len() - rows.len();
    run.write_manifest(&out_dir)?;
    if failed > 0 && rows.is_empty() {
        return Err(Error::numerical("every fit failed"));
    }
    Ok(())
}

/// Field summaries plus study-count tables for every measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub fields: Vec<FieldSummary>,
    pub kbins: Vec<(Measure, Vec<KBinRow>)>,
}

pub fn corpus_summary(rows: &[MeasureSet]) -> Result<CorpusSummary> {
    let fields = summarize_fields(rows)?;
    let kbins = Measure::ALL.into_iter().map(|m| Ok((m, kbin_table(rows, m)?))).collect::<Result<_>>()?;
    Ok(CorpusSummary { fields, kbins })
}

/// Canonical JSON rendering of [`corpus_summary`].
pub fn corpus_summary_json(rows: &[MeasureSet]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&corpus_summary(rows)?)? + "\n")
}

fn cmd_summarize(input: PathBuf, out_dir: PathBuf, format: Format, grid: usize) -> Result<()> {
    let mut run = Run::new("summarize");
    run.input(&input);
    let rows = read_measures_csv(fs::File::open(&input)?)?;
    if rows.is_empty() {
        return Err(Error::invalid("measures file has no rows"));
    }
    prepare_dir(&out_dir)?;
    match format {
        Format::Json => write_file(&out_dir.join("summary.json"), corpus_summary_json(&rows)?.as_bytes())?,
        Format::Csv => {
            let mut buf = Vec::new();
            write_field_csv(&summarize_fields(&rows)?, &mut buf)?;
            write_file(&out_dir.join("field_summary.csv"), &buf)?;
            for m in Measure::ALL {
                let mut buf = Vec::new();
                write_kbin_csv(&kbin_table(&rows, m)?, &mut buf)?;
                write_file(&out_dir.join(format!("kbins_{m}.csv")), &buf)?;
            }
        }
    }
    let v: Vec<Violin> = [Measure::Seif, Measure::Bias, Measure::PostEffectAdj, Measure::PostEffectUnadj, Measure::PostPsb]
        .into_iter()
        .flat_map(|m| violins(&rows, m, grid))
        .collect();
    write_file(&out_dir.join("violins.json"), serde_json::to_string_pretty(&v)?.as_bytes())?;
    run.write_manifest(&out_dir)
}

fn cmd_simulate(config: PathBuf, seed: Option<u64>, out_dir: PathBuf) -> Result<()> {
    let mut run = Run::new("simulate");
    run.input(&config);
    let text = fs::read_to_string(&config)?;
    let cfg = SimConfig::from_toml(&text)?;
    run.config_hash = hash_bytes(serde_json::to_string(&cfg)?.as_bytes());
    let seed = seed.unwrap_or(cfg.seed);
    run.seed = Some(seed);
    let (ds, truths) = simulate_corpus(&cfg, seed)?;
    prepare_dir(&out_dir)?;
    let mut buf = Vec::new();
    write_precomputed_csv(&ds, &mut buf)?;
    write_file(&out_dir.join("corpus.csv"), &buf)?;
    write_file(&out_dir.join("truth.json"), serde_json::to_string_pretty(&truths)?.as_bytes())?;
    run.write_manifest(&out_dir)
}

fn cmd_validate(data: DataArgs, out_dir: Option<PathBuf>) -> Result<()> {
    let mut run = Run::new("validate");
    let (_, report) = load_filtered(&data, &mut run)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(dir) = out_dir {
        prepare_dir(&dir)?;
        write_file(&dir.join("filter_report.json"), json.as_bytes())?;
        run.write_manifest(&dir)?;
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INPUT }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match cli.command {
        Command::Convert { input, value, se, from, to, format } => cmd_convert(input, value, se, from, to, format),
        Command::Fit { data, fit, ma, out_dir } => cmd_fit(data, fit, ma, out_dir),
        Command::Batch { data, fit, jobs, out_dir, format } => cmd_batch(data, fit, jobs, out_dir, format),
        Command::Summarize { input, out_dir, format, grid } => cmd_summarize(input, out_dir, format, grid),
        Command::Simulate { config, seed, out_dir } => cmd_simulate(config, seed, out_dir),
        Command::Validate { data, out_dir } => cmd_validate(data, out_dir),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
