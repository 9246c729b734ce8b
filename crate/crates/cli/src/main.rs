//! `eqcbm`: generate data, train, evaluate, analyze and serve.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use eqcbm::config::RunConfig;
use eqcbm::datagen::{self, shift_variant, DataBundle, ShiftMode, Split};
use eqcbm::eval::{
    energy_histograms, evaluation_report, export_embeddings, intervention_sweep, nearest_neighbors, Strategy,
};
use eqcbm::numerics::derive_seed;
use eqcbm::trainer::fit_with;
use eqcbm::Model;
use eqcbm_serve::{parse_overrides, AppState};

const DATA_FILE: &str = "data.bin";
const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "eqcbm", version, about = "Energy-based concept bottleneck models on synthetic concept data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint to read [default: <out>/model.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset to read [default: <out>/data.bin].
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset.
    GenData(Common),
    /// Train a model on the dataset's train split.
    Train(Common),
    /// Metrics, robustness, energy separation and the configured sweep.
    Eval(Common),
    /// Task accuracy under increasing ground-truth concept intervention.
    Sweep(SweepArgs),
    /// Analysis exports.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Predict one sample with some concepts forced to ground truth.
    Intervene(InterveneArgs),
    /// Serve the JSON API over a checkpoint and dataset.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated ratios in [0, 1].
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// `random` or `uncertainty_desc`.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Comma-separated order seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Composed-energy histograms on the eval split and its nuisance shifts.
    EnergyHistogram(HistogramArgs),
    /// Nearest neighbours of one sample in a concept's embedding space.
    Nn(NnArgs),
    /// CSV of every sample's encodings and selected codebook vectors.
    ExportEmbeddings(Common),
    /// Parameter counts and single-sample latency.
    Info(Common),
}

#[derive(Args)]
struct HistogramArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    concept: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct NnArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    concept: Option<usize>,
    /// Query sample id in the eval split.
    #[arg(long)]
    query: Option<usize>,
    /// Number of neighbours.
    #[arg(short = 'n', long)]
    neighbors: Option<usize>,
}

#[derive(Args)]
struct InterveneArgs {
    #[command(flatten)]
    common: Common,
    /// Sample id in the served split.
    #[arg(long)]
    sample: usize,
    /// JSON object of concept id to 0 or 1, e.g. '{"3": 1}'.
    #[arg(long, default_value = "{}")]
    overrides: String,
    /// Split to read the sample from [default: serve.split].
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
}

type CliResult<T = ()> = Result<T, String>;

fn fail(context: impl Display, e: impl Display) -> String {
    format!("{context}: {e}")
}

impl Common {
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| fail(p.display(), e))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.reseed(seed);
        }
        Ok(cfg)
    }

    fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join(DATA_FILE))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }

    fn data(&self) -> CliResult<DataBundle> {
        let p = self.dataset_path();
        datagen::load(&p).map_err(|e| fail(format!("reading dataset {}", p.display()), e))
    }

    fn model(&self) -> CliResult<Model> {
        let p = self.checkpoint_path();
        Model::load_checkpoint(&p).map_err(|e| fail(format!("reading checkpoint {}", p.display()), e))
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| fail(format!("creating {}", self.out.display()), e))?;
        Ok(&self.out)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.out_dir()?.join(name);
        fs::write(&p, contents).map_err(|e| fail(format!("writing {}", p.display()), e))?;
        Ok(p)
    }
}

fn validated(cfg: RunConfig) -> CliResult<RunConfig> {
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn checked_pair(model: Model, data: DataBundle, split: Split) -> CliResult<AppState> {
    AppState::new(model, data, split).map_err(|e| e.to_string())
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn gen_data(c: &Common) -> CliResult {
    let cfg = c.config()?;
    let bundle = datagen::generate(&cfg.data).map_err(|e| e.to_string())?;
    let p = c.out_dir()?.join(DATA_FILE);
    datagen::save(&bundle, &p).map_err(|e| fail(format!("writing {}", p.display()), e))?;
    c.write("config.json", cfg.to_json_pretty())?;
    println!(
        "wrote {} ({} train, {} test, {} concepts, {} classes)",
        p.display(),
        bundle.train.len(),
        bundle.test.len(),
        bundle.config.num_concepts,
        bundle.config.num_classes
    );
    Ok(())
}

fn train(c: &Common) -> CliResult {
    let cfg = c.config()?;
    let data = c.data()?;
    let epochs = cfg.train.epochs;
    let (model, history) = fit_with::<f32>(&data.train, &cfg.train, |r| {
        eprintln!(
            "epoch {}/{epochs} loss {:.4} concept_acc {:.4} task_acc {:.4} energy {:.3}/{:.3}",
            r.epoch + 1,
            r.total_loss,
            r.concept_accuracy,
            r.task_accuracy,
            r.mean_data_energy,
            r.mean_negative_energy
        );
    })
    .map_err(|e| fail("training", e))?;
    let p = c.out_dir()?.join(CHECKPOINT_FILE);
    model.save_checkpoint(&p).map_err(|e| fail(format!("writing {}", p.display()), e))?;
    c.write("history.jsonl", history.to_json_lines().map_err(|e| e.to_string())?)?;
    c.write("config.json", cfg.to_json_pretty())?;
    println!("wrote {}", p.display());
    Ok(())
}

fn eval(c: &Common) -> CliResult {
    let cfg = c.config()?;
    let state = checked_pair(c.model()?, c.data()?, cfg.eval.split)?;
    let report = evaluation_report(state.model(), state.served(), &cfg.eval, cfg.seed).map_err(|e| e.to_string())?;
    let p = c.write("metrics.json", report.to_json())?;
    print!("{}", report.robustness.to_text());
    println!(
        "energy margin {:.4} (data {:.4}, noise {:.4})",
        report.energy_separation.margin,
        report.energy_separation.mean_data_energy,
        report.energy_separation.mean_noise_energy
    );
    println!("wrote {}", p.display());
    Ok(())
}

fn sweep(a: &SweepArgs) -> CliResult {
    let mut cfg = a.common.config()?;
    if let Some(r) = &a.ratios {
        cfg.eval.ratios = r.clone();
    }
    if let Some(s) = a.strategy {
        cfg.eval.strategy = s;
    }
    if let Some(s) = &a.seeds {
        cfg.eval.seeds = s.clone();
    }
    let cfg = validated(cfg)?;
    let state = checked_pair(a.common.model()?, a.common.data()?, cfg.eval.split)?;
    let e = &cfg.eval;
    let result = intervention_sweep(state.model(), state.served(), &e.ratios, e.strategy, &e.seeds)
        .map_err(|e| e.to_string())?;
    let p = a.common.write("sweep.json", pretty(&result))?;
    for (r, (m, ci)) in result.ratios.iter().zip(result.mean.iter().zip(&result.ci95)) {
        println!("ratio {r:.2} accuracy {m:.4} ± {ci:.4}");
    }
    println!("wrote {}", p.display());
    Ok(())
}

fn energy_histogram(a: &HistogramArgs) -> CliResult {
    let mut cfg = a.common.config()?;
    if let Some(k) = a.concept {
        cfg.eval.histogram_concept = k;
    }
    if let Some(b) = a.bins {
        cfg.eval.histogram_bins = b;
    }
    let cfg = validated(cfg)?;
    let state = checked_pair(a.common.model()?, a.common.data()?, cfg.eval.split)?;
    let ds = state.served();
    let seed = derive_seed(cfg.seed, "eval/shift");
    let black = shift_variant(ds, ShiftMode::Black, seed).map_err(|e| e.to_string())?;
    let random = shift_variant(ds, ShiftMode::Random, seed).map_err(|e| e.to_string())?;
    let k = cfg.eval.histogram_concept;
    let train = a.common.data()?.train;
    let hists = energy_histograms(state.model(), &train, &[ds, &black, &random], k, cfg.eval.histogram_bins)
        .map_err(|e| e.to_string())?;
    let out = json!({
        "concept": k,
        "reference": "train",
        "edges": hists[0].edges,
        "counts": {
            "original": hists[0].counts,
            "black": hists[1].counts,
            "random": hists[2].counts,
        },
    });
    let p = a.common.write("energy_histogram.json", pretty(&out))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn nn(a: &NnArgs) -> CliResult {
    let mut cfg = a.common.config()?;
    if let Some(k) = a.concept {
        cfg.eval.histogram_concept = k;
    }
    if let Some(q) = a.query {
        cfg.eval.neighbor_query = q;
    }
    if let Some(n) = a.neighbors {
        cfg.eval.neighbors = n;
    }
    let cfg = validated(cfg)?;
    let state = checked_pair(a.common.model()?, a.common.data()?, cfg.eval.split)?;
    let (k, q) = (cfg.eval.histogram_concept, cfg.eval.neighbor_query);
    let found = nearest_neighbors(state.model(), state.served(), k, q, cfg.eval.neighbors).map_err(|e| e.to_string())?;
    let ds = state.served();
    let rows: Vec<_> = found
        .iter()
        .map(|n| json!({"index": n.index, "distance": n.distance, "label": ds.label(n.index), "concept": ds.concepts(n.index)[k]}))
        .collect();
    let out = json!({
        "split": cfg.eval.split,
        "concept": k,
        "query": q,
        "query_label": ds.label(q),
        "query_concept": ds.concepts(q)[k],
        "neighbors": rows,
    });
    let p = a.common.write("neighbors.json", pretty(&out))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn embeddings(c: &Common) -> CliResult {
    let cfg = c.config()?;
    let state = checked_pair(c.model()?, c.data()?, cfg.eval.split)?;
    let p = c.out_dir()?.join("embeddings.csv");
    export_embeddings(state.model(), state.served(), &p).map_err(|e| fail(format!("writing {}", p.display()), e))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn info(c: &Common) -> CliResult {
    let cfg = c.config()?;
    let model = c.model()?;
    let info = model.model_info(cfg.eval.latency_runs).map_err(|e| e.to_string())?;
    for m in &info.modules {
        println!("{:<24} {:>8}", m.module, m.parameters);
    }
    println!("{:<24} {:>8}", "total", info.total);
    println!("mean latency {:.1} us over {} runs", info.mean_latency_us, info.latency_runs);
    let p = c.write("model_info.json", pretty(&info))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn intervene(a: &InterveneArgs) -> CliResult {
    let cfg = a.common.config()?;
    let split = a.split.unwrap_or(cfg.serve.split);
    let state = checked_pair(a.common.model()?, a.common.data()?, split)?;
    let body: serde_json::Value =
        serde_json::from_str(&a.overrides).map_err(|e| fail("--overrides is not valid JSON", e))?;
    // accept either the bare map or the request-body form
    let body = if body.get("overrides").is_some() { body } else { json!({ "overrides": body }) };
    let overrides = parse_overrides(&body, state.model().num_concepts()).map_err(|e| e.message)?;
    let record = state.predict(&a.sample.to_string(), &overrides).map_err(|e| e.message)?;
    let text = serde_json::to_string(&record).expect("record serializes");
    a.common.write("intervention.json", &text)?;
    println!("{text}");
    Ok(())
}

fn serve(a: &ServeArgs) -> CliResult {
    let mut cfg = a.common.config()?;
    if let Some(h) = &a.host {
        cfg.serve.host = h.clone();
    }
    if let Some(p) = a.port {
        cfg.serve.port = p;
    }
    let cfg = validated(cfg)?;
    let state = Arc::new(checked_pair(a.common.model()?, a.common.data()?, cfg.serve.split)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| fail("starting runtime", e))?;
    rt.block_on(eqcbm_serve::run(state, &cfg.serve, |addr| {
        eprintln!("listening on http://{addr}");
    }))
    .map_err(|e| fail(format!("serving on {}:{}", cfg.serve.host, cfg.serve.port), e))
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Sweep(a) => sweep(a),
        Command::Analyze(Analyze::EnergyHistogram(a)) => energy_histogram(a),
        Command::Analyze(Analyze::Nn(a)) => nn(a),
        Command::Analyze(Analyze::ExportEmbeddings(c)) => embeddings(c),
        Command::Analyze(Analyze::Info(c)) => info(c),
        Command::Intervene(a) => intervene(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
