//! Command-line interface.
//!
//! Every command prints a JSON report containing its resolved configuration
//! to stdout (and to `--report` when given). Outputs must not exist unless
//! `--force` is passed. Exit codes: 0 success, 2 configuration error, 3 data
//! error, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::baselines::{self, KnnIndex};
use crate::config::{parse_override, Method, RunConfig};
use crate::error::{Error, Result};
use crate::evaluator::{DetectionReport, ScoreSet};
use crate::io::{self, Metrics, RepresentationSet, ScoreRow};
use crate::likelihood::{self, GaussianScore, LikelihoodRecord};
use crate::score_net::{checkpoint, ScoreFn};
use crate::toy2d::{self, DivergenceReport, HistogramGrid, ToyName};
use crate::trainer;

#[derive(Debug, Parser)]
#[command(
    name = "rdm",
    version,
    about = "Diffusion-model likelihoods over representation vectors"
)]
pub struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives single-threaded execution.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Also write the JSON report here.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a score model on a representation file.
    Fit(FitArgs),
    /// Per-sample log-likelihoods through the probability flow ODE.
    Logp(LogpArgs),
    /// AUROC / FPR95 from ID and OOD score files.
    Eval(EvalArgs),
    /// KNN or Residual baseline scores.
    Baseline(BaselineArgs),
    /// Residual baseline swept over the principal dimension.
    Sweep(SweepArgs),
    /// Train, sample and score one 2-D toy dataset.
    Toy2d(ToyArgs),
    /// Write toy points as a representation file.
    SampleToy(SampleToyArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `rdm` (unconditional) or `conrdm` (class-conditional, needs labels).
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct LogpArgs {
    #[arg(long)]
    pub reps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// RDM1 checkpoint.
    #[arg(long, required_unless_present = "oracle_gaussian")]
    pub model: Option<PathBuf>,
    /// Classifier head used to pick classes for a conditional model.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Score with the analytic unit-Gaussian score under the configured SDE.
    #[arg(long, conflicts_with = "model")]
    pub oracle_gaussian: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub tpr: f64,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[arg(long)]
    pub dataset_ood: Option<String>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// `knn` or `residual`.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Use raw rather than ℓ2-normalized features for KNN.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub num_principal: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub dataset: String,
    /// Directory receiving model.rdm1, samples.csv, samples.repz and divergence.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleToyArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves defaults, config file and flags into one configuration.
pub fn resolve_config(base: RunConfig, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    let mut pairs = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(s) = cli.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    cfg.apply_pairs(&pairs)?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<Value> {
    if let Some(n) = cli.threads {
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let base = match cli.command {
        Command::Toy2d(_) => RunConfig::toy(),
        _ => RunConfig::default(),
    };
    let mut cfg = resolve_config(base, cli)?;
    let report = match &cli.command {
        Command::Fit(a) => {
            if let Some(m) = &a.method {
                cfg.method = m.parse()?;
            }
            cmd_fit(&cfg, &a.train, &a.out, cli.force)?
        }
        Command::Logp(a) => cmd_logp(&cfg, a, cli.force)?,
        Command::Eval(a) => {
            if let Some(m) = &a.method {
                cfg.method = m.parse()?;
            }
            cmd_eval(&cfg, a, cli.force)?
        }
        Command::Baseline(a) => {
            cfg.method = a.method.parse()?;
            if let Some(k) = a.k {
                cfg.baseline.k = k;
            }
            if a.raw {
                cfg.baseline.normalize = false;
            }
            if a.num_principal.is_some() {
                cfg.baseline.num_principal = a.num_principal;
            }
            cmd_baseline(&cfg, &a.train, &a.query, &a.out, cli.force)?
        }
        Command::Sweep(a) => cmd_sweep(&cfg, a, cli.force)?,
        Command::Toy2d(a) => {
            if let Some(i) = a.iterations {
                cfg.train.schedule = trainer::Schedule::Iterations(i);
            }
            if let Some(n) = a.samples {
                cfg.toy.samples = n;
            }
            cmd_toy2d(&cfg, &a.dataset.parse()?, &a.out_dir, cli.force)?
        }
        Command::SampleToy(a) => cmd_sample_toy(&cfg, &a.dataset.parse()?, a.n, &a.out, cli.force)?,
    };
    if let Some(path) = &cli.report {
        io::ensure_writable(path, cli.force)?;
        io::write_json(&report, path)?;
    }
    Ok(report)
}

fn config_json(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn checksum_hex(sum: u64) -> String {
    format!("{sum:016x}")
}

fn read_reps_checked(path: &Path) -> Result<(RepresentationSet, Option<String>)> {
    let reps = io::read_reps(path)?;
    let warning = io::dimension_warning(&reps.dataset_id, reps.dim());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok((reps, warning))
}

pub fn cmd_fit(cfg: &RunConfig, train: &Path, out: &Path, force: bool) -> Result<Value> {
    cfg.validate()?;
    io::ensure_writable(out, force)?;
    let (reps, warning) = read_reps_checked(train)?;
    let (labels, num_classes) = match cfg.method {
        Method::Rdm => (None, None),
        Method::Conrdm => {
            let labels = reps.labels_usize().ok_or_else(|| {
                Error::Config("conrdm requires labels in the training file".into())
            })?;
            (Some(labels), reps.num_classes())
        }
        m => return Err(Error::Config(format!("fit does not apply to method {m}"))),
    };
    let net = cfg.net.build(reps.dim(), num_classes);
    let outcome = trainer::fit(&reps, labels.as_deref(), &cfg.sde, &net, &cfg.train)?;
    let sum = checkpoint::save(out, &outcome.model, Some(&outcome.normalizer))?;
    Ok(json!({
        "command": "fit",
        "config": config_json(cfg),
        "train": train,
        "checkpoint": out,
        "checksum": checksum_hex(sum),
        "n_train": reps.len(),
        "dim": reps.dim(),
        "num_classes": num_classes,
        "param_count": outcome.model.param_count(),
        "steps": outcome.steps.len(),
        "loss_trace": outcome.loss_trace,
        "warning": warning,
    }))
}

enum Conditioning {
    None,
    Labels(Vec<usize>),
    Head(Vec<usize>),
}

impl Conditioning {
    fn name(&self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Labels(_) => "labels",
            Conditioning::Head(_) => "head",
        }
    }

    fn classes(&self) -> Option<&[usize]> {
        match self {
            Conditioning::None => None,
            Conditioning::Labels(c) | Conditioning::Head(c) => Some(c),
        }
    }
}

pub fn cmd_logp(cfg: &RunConfig, args: &LogpArgs, force: bool) -> Result<Value> {
    cfg.validate()?;
    io::ensure_writable(&args.out, force)?;
    let (reps, warning) = read_reps_checked(&args.reps)?;
    let data = reps.data_f64();
    let loaded;
    let oracle;
    let (score, spec, normalizer): (&dyn ScoreFn, _, _) = if args.oracle_gaussian {
        oracle = GaussianScore::unit(reps.dim(), cfg.sde);
        (&oracle, cfg.sde, None)
    } else {
        let path = args.model.as_ref().expect("clap enforces --model");
        loaded = checkpoint::load(path)?;
        (&loaded.0, *loaded.0.sde(), loaded.1.as_ref())
    };
    if score.input_dim() != reps.dim() {
        return Err(Error::DimensionMismatch {
            expected: score.input_dim(),
            got: reps.dim(),
        });
    }
    let conditioning = match score.num_classes() {
        None if cfg.method == Method::Conrdm => {
            return Err(Error::Config(
                "conrdm scoring needs a conditional checkpoint".into(),
            ));
        }
        None => Conditioning::None,
        Some(k) => {
            let classes = if let Some(head_path) = &args.head {
                let head = io::read_head(head_path)?;
                if head.num_classes() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        got: head.num_classes(),
                    });
                }
                let c = data
                    .rows()
                    .into_iter()
                    .map(|z| head.predict(z))
                    .collect::<Result<Vec<_>>>()?;
                Conditioning::Head(c)
            } else if let Some(l) = reps.labels_usize() {
                Conditioning::Labels(l)
            } else {
                return Err(Error::Config(
                    "conditional model needs labels in the file or a --head".into(),
                ));
            };
            if let Some(bad) = classes.classes().unwrap().iter().find(|&&c| c >= k) {
                return Err(Error::InvalidInput(format!(
                    "class {bad} out of range for {k} classes"
                )));
            }
            classes
        }
    };
    let records = likelihood::log_likelihood_batch(
        score,
        &spec,
        normalizer,
        data.view(),
        &cfg.ode,
        conditioning.classes(),
    )?;
    let mut rows = Vec::with_capacity(records.len());
    let mut good: Vec<LikelihoodRecord> = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let r = r.map_err(|e| {
            log::error!("row {i}: {e}");
            e
        })?;
        rows.push(ScoreRow {
            index: i,
            logp_nats: r.logp,
            bpd: Some(r.bpd),
            nfe: Some(r.nfe),
            label: reps.labels.as_ref().map(|l| l[i] as i64),
        });
        good.push(r);
    }
    io::write_scores(&rows, &args.out)?;
    let n = good.len().max(1) as f64;
    Ok(json!({
        "command": "logp",
        "config": config_json(cfg),
        "reps": args.reps,
        "out": args.out,
        "oracle_gaussian": args.oracle_gaussian,
        "sde": spec,
        "conditioning": conditioning.name(),
        "n": good.len(),
        "dim": reps.dim(),
        "mean_bpd": good.iter().map(|r| r.bpd).sum::<f64>() / n,
        "mean_nfe": good.iter().map(|r| r.nfe as f64).sum::<f64>() / n,
        "warning": warning,
    }))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn score_set(path: &Path) -> Result<ScoreSet> {
    let rows = io::read_scores(path)?;
    ScoreSet::new(rows.iter().map(|r| r.logp_nats).collect(), stem(path)).map_err(|e| match e {
        Error::InvalidInput(d) | Error::NonFinite(d) => Error::Format {
            path: path.to_path_buf(),
            detail: d,
        },
        other => other,
    })
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, force: bool) -> Result<Value> {
    io::ensure_writable(&args.out, force)?;
    let id = score_set(&args.id)?;
    let ood = score_set(&args.ood)?;
    let report = DetectionReport::at_tpr(&id, &ood, args.tpr)?;
    let metrics = Metrics {
        dataset_id: args
            .dataset_id
            .clone()
            .unwrap_or_else(|| id.source_tag().to_string()),
        dataset_ood: args
            .dataset_ood
            .clone()
            .unwrap_or_else(|| ood.source_tag().to_string()),
        method: cfg.method.to_string(),
        auroc_pct: report.auroc_pct,
        fpr95_pct: report.fpr95_pct,
        n_id: id.len(),
        n_ood: ood.len(),
        threshold: report.threshold,
    };
    io::write_json(&metrics, &args.out)?;
    Ok(json!({
        "command": "eval",
        "config": config_json(cfg),
        "tpr": args.tpr,
        "metrics": metrics,
    }))
}

pub fn cmd_baseline(
    cfg: &RunConfig,
    train: &Path,
    query: &Path,
    out: &Path,
    force: bool,
) -> Result<Value> {
    cfg.validate()?;
    io::ensure_writable(out, force)?;
    let (train_reps, _) = read_reps_checked(train)?;
    let (query_reps, warning) = read_reps_checked(query)?;
    let (t, q) = (train_reps.data_f64(), query_reps.data_f64());
    let (scores, extra) = match cfg.method {
        Method::Knn => {
            let index = KnnIndex::new(t.view(), cfg.baseline.k, cfg.baseline.normalize)?;
            let s = baselines::knn_scores(&index, q.view())?;
            (s, json!({"k": index.k(), "normalize": index.normalized()}))
        }
        Method::Residual => {
            let p = cfg
                .baseline
                .num_principal
                .unwrap_or_else(|| baselines::default_num_principal(train_reps.dim()));
            let proj = baselines::fit_residual(t.view(), p)?;
            let s = baselines::residual_scores(&proj, q.view())?;
            (
                s,
                json!({"num_principal": p, "residual_dims": proj.dim() - p}),
            )
        }
        m => {
            return Err(Error::Config(format!(
                "baseline does not apply to method {m}"
            )))
        }
    };
    let rows: Vec<ScoreRow> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoreRow {
            index: i,
            logp_nats: s,
            bpd: None,
            nfe: None,
            label: query_reps.labels.as_ref().map(|l| l[i] as i64),
        })
        .collect();
    io::write_scores(&rows, out)?;
    Ok(json!({
        "command": "baseline",
        "config": config_json(cfg),
        "method": cfg.method,
        "params": extra,
        "n_train": train_reps.len(),
        "n_query": query_reps.len(),
        "out": out,
        "warning": warning,
    }))
}

pub fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs, force: bool) -> Result<Value> {
    io::ensure_writable(&args.out, force)?;
    let train = io::read_reps(&args.train)?.data_f64();
    let id = io::read_reps(&args.id)?.data_f64();
    let ood = io::read_reps(&args.ood)?.data_f64();
    let table = baselines::residual_sweep(train.view(), id.view(), ood.view(), args.stride)?;
    let mut w = csv::Writer::from_path(&args.out).map_err(|e| Error::Format {
        path: args.out.clone(),
        detail: e.to_string(),
    })?;
    for row in &table {
        w.serialize(row).map_err(|e| Error::Format {
            path: args.out.clone(),
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    Ok(json!({
        "command": "sweep",
        "config": config_json(cfg),
        "rows": table.len(),
        "out": args.out,
    }))
}

pub fn cmd_toy2d(cfg: &RunConfig, dataset: &ToyName, out_dir: &Path, force: bool) -> Result<Value> {
    cfg.validate()?;
    let paths = [
        "model.rdm1",
        "samples.csv",
        "samples.repz",
        "divergence.json",
    ]
    .map(|f| out_dir.join(f));
    for p in &paths {
        io::ensure_writable(p, force)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = toy2d::sample_toy(*dataset, cfg.toy.train_points, cfg.seed)?;
    let net = cfg.net.build(2, None);
    let mut outcome = trainer::fit_matrix(train.points.view(), None, &cfg.sde, &net, &cfg.train)?;
    // Sample from exactly the weights that are written to disk.
    outcome.model.quantize_f32();
    let sum = checkpoint::save(&paths[0], &outcome.model, Some(&outcome.normalizer))?;
    let generated = toy2d::ode_sample(
        &outcome.model,
        &cfg.sde,
        Some(&outcome.normalizer),
        cfg.toy.samples,
        &cfg.ode,
        cfg.seed,
    )?;
    let reference = toy2d::sample_toy(
        *dataset,
        cfg.toy.reference_samples,
        cfg.toy_reference_seed(),
    )?;
    let (kl, jsd) = toy2d::kl_jsd(
        reference.points.view(),
        generated.view(),
        &HistogramGrid::default(),
    )?;

    let mut w = csv::Writer::from_path(&paths[1]).map_err(|e| Error::Format {
        path: paths[1].clone(),
        detail: e.to_string(),
    })?;
    let fmt_err = |e: csv::Error| Error::Format {
        path: paths[1].clone(),
        detail: e.to_string(),
    };
    w.write_record(["x", "y"]).map_err(fmt_err)?;
    for r in generated.rows() {
        w.write_record([r[0].to_string(), r[1].to_string()])
            .map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::io(&paths[1], e))?;
    io::write_reps(
        &RepresentationSet::from_f64(&generated, None, dataset.to_string())?,
        &paths[2],
    )?;
    let divergence = DivergenceReport {
        dataset: dataset.to_string(),
        kl_nats: kl,
        jsd_nats: jsd,
        n_ref: reference.points.nrows(),
        n_gen: generated.nrows(),
        seed: cfg.seed,
    };
    io::write_json(&divergence, &paths[3])?;
    Ok(json!({
        "command": "toy2d",
        "config": config_json(cfg),
        "checksum": checksum_hex(sum),
        "divergence": divergence,
        "dropped_samples": cfg.toy.samples - generated.nrows(),
        "final_loss": outcome.loss_trace.last(),
        "out_dir": out_dir,
    }))
}

pub fn cmd_sample_toy(
    cfg: &RunConfig,
    dataset: &ToyName,
    n: usize,
    out: &Path,
    force: bool,
) -> Result<Value> {
    io::ensure_writable(out, force)?;
    let ds = toy2d::sample_toy(*dataset, n, cfg.seed)?;
    io::write_reps(
        &RepresentationSet::from_f64(&ds.points, None, dataset.to_string())?,
        out,
    )?;
    Ok(json!({
        "command": "sample-toy",
        "config": config_json(cfg),
        "dataset": dataset,
        "n": n,
        "out": out,
    }))
}
