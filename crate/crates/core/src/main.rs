use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use ace_core::checkpoint::Checkpoint;
use ace_core::config::{resolve_train_config, RunConfig};
use ace_core::data::{load_csv, read_table, Split, Table};
use ace_core::eval::{eval_conditional_ll, eval_marginal_ll, eval_nrmse, write_table, EvalProtocol, MaskSpec, MetricRecord, OrderingMode, TableRow};
use ace_core::inference::{
    audit_normalizers, consistency_finetune, impute_means_batch, ordering_consistency, sample_energy, FinetuneConfig, GridSpec, OrderingPlan,
};
use ace_core::masking::{restrict_to_available, Bitmask, MaskedInstance};
use ace_core::rng::{derive_seed, seeded};
use ace_core::schema::{Feature, FeatureKind, FeatureSchema};
use ace_core::training::{train, StepMetrics, TrainObserver};
use ace_core::{AceError, Result};

#[derive(Parser)]
#[command(name = "ace", version, about = "Arbitrary conditional density estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Likelihood and imputation metrics on a data file.
    Eval(EvalArgs),
    /// Fill missing cells of a CSV file.
    Impute(ImputeArgs),
    /// Draw completions or unconditional samples.
    Sample(SampleArgs),
    /// Compare importance-sampled normalizers with numerical integration.
    Audit(AuditArgs),
    /// Fine-tune a checkpoint to reduce ordering sensitivity.
    Finetune(FinetuneArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Column schema (JSON). Without it every column is continuous.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV (default: next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct CheckpointData {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Must match the checkpoint's schema when given.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    io: CheckpointData,
    /// Evaluation settings; flags override them.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `bernoulli:<p>` (p = probability a feature is observed) or `uniform`.
    #[arg(long)]
    mask: Option<MaskSpec>,
    /// Shorthand for `--mask bernoulli:<1 - rate>`.
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    importance_samples: Option<usize>,
    /// `random` or `ensemble:<R>`.
    #[arg(long)]
    ordering: Option<OrderingMode>,
    /// Also report the marginal likelihood of the first M features.
    #[arg(long)]
    marginal: Option<usize>,
    /// Metrics JSON path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Results table CSV (`dataset,method,missing_rate,mean,std`).
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    io: CheckpointData,
    #[arg(long, default_value_t = 1000)]
    importance_samples: usize,
    /// Completed CSV path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Rows to complete (missing cells are sampled). Without it, samples are unconditional.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Hide further cells of each data row before sampling.
    #[arg(long)]
    mask: Option<MaskSpec>,
    /// Samples per row (or in total without `--data`).
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Resample among N proposal candidates per step.
    #[arg(long, conflicts_with = "proposal")]
    energy: Option<usize>,
    /// Sample the proposal directly.
    #[arg(long)]
    proposal: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    io: CheckpointData,
    /// Comma-separated importance sample counts.
    #[arg(long = "S", value_delimiter = ',', default_value = "5,20,100,1000")]
    samples: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    conditionals: usize,
    #[arg(long, default_value = "bernoulli:0.5")]
    mask: MaskSpec,
    /// Output directory for `audit.csv` and `audit_summary.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    io: CheckpointData,
    #[arg(long, default_value_t = 1.0)]
    variance_coef: f64,
    #[arg(long, default_value_t = 10)]
    orderings: usize,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    /// Orderings used to measure consistency before and after.
    #[arg(long, default_value_t = 100)]
    eval_orderings: usize,
    #[arg(long, default_value_t = 200)]
    eval_rows: usize,
    #[arg(long, default_value_t = 20)]
    importance_samples: usize,
    /// Fine-tuned checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Before/after report JSON (default: standard output).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Finetune(a) => cmd_finetune(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn io_err(path: &Path, e: io::Error) -> AceError {
    AceError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn csv_err(e: csv::Error) -> AceError {
    AceError::Format(e.to_string())
}

fn load_schema(path: &Path) -> Result<FeatureSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    FeatureSchema::from_json(&text)
}

/// All-continuous schema named after the CSV header.
fn schema_from_header(path: &Path) -> Result<FeatureSchema> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => AceError::Format(format!("{}: {other:?}", path.display())),
    })?;
    let columns = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| Feature {
            name: h.trim().to_string(),
            kind: FeatureKind::Continuous,
        })
        .collect();
    FeatureSchema::new(columns)
}

struct LogObserver<W: Write> {
    log: csv::Writer<W>,
    error: Option<csv::Error>,
}

impl<W: Write> TrainObserver for LogObserver<W> {
    fn on_step(&mut self, m: &StepMetrics) {
        if self.error.is_some() {
            return;
        }
        let rec = [
            m.step.to_string(),
            m.loss.to_string(),
            m.proposal_ll.to_string(),
            m.energy_ll.to_string(),
            m.lr.to_string(),
        ];
        if let Err(e) = self.log.write_record(&rec) {
            self.error = Some(e);
        }
    }

    fn on_validation(&mut self, step: u64, ll: f64, improved: bool) {
        let _ = self.log.flush();
        eprintln!("step {step}: validation log-likelihood {ll:.4}{}", if improved { " (best)" } else { "" });
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.preset {
        cfg.train = resolve_train_config(Some(p), None)?;
        cfg.preset = Some(p.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.warmup_steps {
        cfg.train.warmup_steps = s;
    }
    if let Some(r) = a.missing_rate {
        cfg.missing_rate = r;
    }
    cfg.data = a.data.or(cfg.data);
    cfg.schema = a.schema.or(cfg.schema);
    cfg.checkpoint = a.out.or(cfg.checkpoint);
    cfg.log = a.log.or(cfg.log);
    cfg.validate()?;
    if a.dry_run {
        let mut w = output(None)?;
        return writeln!(w, "{}", serde_json::to_string_pretty(&cfg.train)?)
            .and_then(|_| w.flush())
            .map_err(|e| io_err(Path::new("<stdout>"), e));
    }
    let data = cfg.data.ok_or_else(|| AceError::Usage("no data file given (--data or `data` in the config)".into()))?;
    let ckpt_path = cfg
        .checkpoint
        .ok_or_else(|| AceError::Usage("no checkpoint path given (--out or `checkpoint` in the config)".into()))?;
    let schema = match &cfg.schema {
        Some(p) => load_schema(p)?,
        None => schema_from_header(&data)?,
    };
    let mut dataset = load_csv(&data, &schema, cfg.split, cfg.train.seed)?;
    if cfg.missing_rate > 0.0 {
        dataset = dataset.inject_mcar(cfg.missing_rate, cfg.train.seed)?;
    }
    let log_path = cfg.log.unwrap_or_else(|| ckpt_path.with_extension("log.csv"));
    let file = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log = csv::Writer::from_writer(BufWriter::new(file));
    log.write_record(["step", "loss", "proposal_ll", "energy_ll", "lr"]).map_err(csv_err)?;
    let mut observer = LogObserver { log, error: None };
    let ck = train(&dataset, &cfg.train, &mut observer)?;
    if let Some(e) = observer.error {
        return Err(csv_err(e));
    }
    observer.log.flush().map_err(|e| io_err(&log_path, e))?;
    ck.save(&ckpt_path)?;
    if let Some(ll) = ck.best_validation_ll {
        eprintln!("best validation log-likelihood {ll:.4} at step {}", ck.best_step.unwrap_or(0));
    }
    Ok(())
}

/// Loads a checkpoint and a data file in its schema, standardized.
fn load_inputs(io: &CheckpointData) -> Result<(Checkpoint, Table, Split)> {
    let ck = Checkpoint::load(&io.checkpoint)?;
    if let Some(p) = &io.schema {
        if &load_schema(p)? != ck.model.schema() {
            return Err(AceError::Config(format!(
                "schema {} does not match the checkpoint's schema",
                p.display()
            )));
        }
    }
    let table = read_table(&io.data, ck.model.schema())?;
    let split = Split::from_rows(table.rows.iter().map(|r| ck.stats.standardize(r)).collect());
    Ok((ck, table, split))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ck, _, split) = load_inputs(&a.io)?;
    let mut p = match &a.config {
        Some(c) => RunConfig::load(c)?.eval,
        None => EvalProtocol::default(),
    };
    p.seed = a.io.seed;
    if let Some(r) = a.missing_rate {
        if !(0.0..1.0).contains(&r) {
            return Err(AceError::Usage(format!("missing rate {r} is outside [0, 1)")));
        }
        p.mask = MaskSpec::Bernoulli(1.0 - r);
    }
    if let Some(m) = a.mask {
        p.mask = m;
    }
    if let Some(t) = a.trials {
        p.trials = t;
    }
    if let Some(s) = a.importance_samples {
        p.importance_samples = s;
    }
    if let Some(o) = a.ordering {
        p.ordering = o;
    }
    p.validate()?;
    let ll = eval_conditional_ll(&ck.model, &split, &p)?;
    let mut records = vec![
        MetricRecord::new("conditional_ll", &ll.energy, &p),
        MetricRecord::new("conditional_ll_proposal", &ll.proposal, &p),
    ];
    let imp = eval_nrmse(&ck.model, &ck.stats, &split, &p)?;
    if !imp.never_masked.is_empty() {
        eprintln!("warning: features {:?} were never masked and are excluded from imputation scores", imp.never_masked);
    }
    if let Some(n) = &imp.nrmse {
        records.push(MetricRecord::new("nrmse", n, &p));
    }
    if let Some(acc) = &imp.accuracy {
        records.push(MetricRecord::new("accuracy", acc, &p));
    }
    if let Some(m) = a.marginal {
        let marg = eval_marginal_ll(&ck.model, &split, m, &p)?;
        records.push(MetricRecord::new(&format!("marginal_ll_{m}"), &marg.energy, &p));
        records.push(MetricRecord::new(&format!("marginal_ll_{m}_proposal"), &marg.proposal, &p));
    }
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{}", serde_json::to_string_pretty(&records)?).map_err(|e| io_err(Path::new("<output>"), e))?;
    w.flush().map_err(|e| io_err(Path::new("<output>"), e))?;
    if let Some(t) = &a.table {
        let dataset = a.io.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let missing_rate = match p.mask {
            MaskSpec::Bernoulli(q) => 1.0 - q,
            MaskSpec::Uniform => f64::NAN,
        };
        let row = |method: &str, s: &ace_core::eval::TrialStats| TableRow {
            dataset: dataset.clone(),
            method: method.into(),
            missing_rate,
            mean: s.mean,
            std: s.std,
        };
        write_table(t, &[row("ace", &ll.energy), row("ace-proposal", &ll.proposal)])?;
    }
    Ok(())
}

/// Formats a value in original units as CSV text.
fn format_cell(schema: &FeatureSchema, dim: usize, v: f64) -> String {
    match &schema.columns[dim].kind {
        FeatureKind::Categorical { categories } => categories[v as usize].clone(),
        FeatureKind::Continuous => v.to_string(),
    }
}

fn cmd_impute(a: ImputeArgs) -> Result<()> {
    let (ck, table, split) = load_inputs(&a.io)?;
    let schema = ck.model.schema();
    let instances = split
        .rows
        .iter()
        .zip(&split.missing)
        .map(|(r, m)| MaskedInstance::new(r.clone(), Bitmask::new(m.iter().map(|x| !x).collect())))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(&table.header).map_err(csv_err)?;
    for (c, chunk) in instances.chunks(256).enumerate() {
        let imps = impute_means_batch(&ck.model, chunk, a.importance_samples, derive_seed(a.io.seed, c as u64))?;
        for (k, imp) in imps.iter().enumerate() {
            let r = c * 256 + k;
            let rec: Vec<String> = (0..schema.len())
                .map(|i| {
                    if split.missing[r][i] {
                        format_cell(schema, i, ck.stats.destandardize_value(i, imp[i].point()))
                    } else {
                        table.cells[r][i].clone()
                    }
                })
                .collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| io_err(Path::new("<output>"), e))
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let schema = ck.model.schema();
    let d = schema.len();
    let candidates = if a.proposal { 1 } else { a.energy.unwrap_or(1) };
    if candidates == 0 {
        return Err(AceError::Usage("--energy needs at least one candidate".into()));
    }
    // (source row, original cell text, context)
    let sources: Vec<(Option<usize>, Option<Vec<String>>, MaskedInstance)> = match &a.data {
        Some(path) => {
            let (_, table, split) = load_inputs(&CheckpointData {
                checkpoint: a.checkpoint.clone(),
                data: path.clone(),
                schema: a.schema.clone(),
                seed: a.seed,
            })?;
            let mut mask_rng = seeded(derive_seed(a.seed, 0x3A5C));
            split
                .rows
                .iter()
                .zip(&split.missing)
                .zip(table.cells)
                .enumerate()
                .map(|(r, ((row, miss), cells))| {
                    let base = Bitmask::new(miss.iter().map(|m| !m).collect());
                    let mask = match a.mask {
                        None => base,
                        Some(spec) => {
                            let keep = spec.sample(d, &mut mask_rng)?;
                            Bitmask::new((0..d).map(|i| base.is_observed(i) && keep.is_observed(i)).collect())
                        }
                    };
                    let values = row.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
                    Ok((Some(r), Some(cells), MaskedInstance::new(values, mask)?))
                })
                .collect::<Result<_>>()?
        }
        None => vec![(None, None, MaskedInstance::new(vec![0.0; d], Bitmask::none_observed(d))?)],
    };
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    let mut header = vec!["row".to_string(), "sample".to_string()];
    header.extend(schema.names().iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let mut fallbacks = 0;
    for (r, cells, inst) in &sources {
        for k in 0..a.count {
            let mut rng = seeded(derive_seed(derive_seed(a.seed, r.map_or(u64::MAX, |r| r as u64)), k as u64));
            let plan = OrderingPlan::random(&inst.mask, &mut rng);
            let s = sample_energy(&ck.model, inst, &plan, candidates, &mut rng)?;
            fallbacks += s.uniform_fallbacks;
            let values = ck.stats.destandardize(&s.values);
            let mut rec = vec![r.map_or(String::new(), |r| r.to_string()), k.to_string()];
            rec.extend((0..d).map(|i| match cells {
                Some(c) if inst.mask.is_observed(i) => c[i].clone(),
                _ => format_cell(schema, i, values[i]),
            }));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    if fallbacks > 0 {
        eprintln!("warning: {fallbacks} resampling steps had no finite weight and chose uniformly");
    }
    w.flush().map_err(|e| io_err(Path::new("<output>"), e))
}

fn cmd_audit(a: AuditArgs) -> Result<()> {
    let (ck, _, split) = load_inputs(&a.io)?;
    if split.is_empty() {
        return Err(AceError::Usage("data file has no rows".into()));
    }
    let d = ck.model.dims();
    let mut rng = seeded(derive_seed(a.io.seed, 0xA0D0));
    let instances = (0..a.conditionals)
        .map(|_| {
            let r = rng.random_range(0..split.len());
            let mask = restrict_to_available(&a.mask.sample(d, &mut rng)?, &split.missing[r])?;
            MaskedInstance::new(split.rows[r].clone(), mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = audit_normalizers(&ck.model, &instances, &a.samples, &GridSpec::default(), a.io.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    report.write_csv(&a.out.join("audit.csv"))?;
    report.write_summary(&a.out.join("audit_summary.json"))?;
    eprintln!(
        "audited {} conditionals ({} flagged by the tail criterion)",
        report.audited, report.flagged
    );
    for s in &report.summary {
        eprintln!("S={}: median {:.3}% IQR {:.3}", s.samples, s.median, s.iqr);
    }
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let (ck, _, split) = load_inputs(&a.io)?;
    let cfg = FinetuneConfig {
        variance_coef: a.variance_coef,
        orderings: a.orderings,
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.io.seed,
    };
    let d = ck.model.dims();
    let mut rng = seeded(derive_seed(a.io.seed, 0xE7A1));
    let probe = (0..a.eval_rows.min(split.len()))
        .map(|_| {
            let r = rng.random_range(0..split.len());
            let mask = restrict_to_available(&MaskSpec::Bernoulli(0.5).sample(d, &mut rng)?, &split.missing[r])?;
            MaskedInstance::new(split.rows[r].clone(), mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let measure = |m| ordering_consistency(m, &probe, a.eval_orderings, a.importance_samples, a.io.seed);
    let before = measure(&ck.model)?;
    let model = consistency_finetune(&ck.model, &split, &ck.train_config, &cfg, |_| {})?;
    let after = measure(&model)?;
    let mut out = ck.clone();
    out.model = model;
    out.steps_completed += a.steps;
    out.seed_lineage.push(a.io.seed);
    out.save(&a.out)?;
    let report = serde_json::json!({ "before": before, "after": after, "config": cfg });
    let mut w = output(a.report.as_deref())?;
    writeln!(w, "{}", serde_json::to_string_pretty(&report)?).map_err(|e| io_err(Path::new("<output>"), e))?;
    w.flush().map_err(|e| io_err(Path::new("<output>"), e))
}
