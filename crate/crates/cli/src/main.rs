mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ghostvlad::costmodel::{compare_costs, ghostcnn_netvlad, model_cost, vgg16_netvlad, ArchitectureSpec, CostReport};
use ghostvlad::experiment::sub_seed;
use ghostvlad::ghostnet::{DilationScheme, GhostCnnConfig};
use ghostvlad::model::PlaceModel;
use ghostvlad::netvlad::PCA_EPS;
use ghostvlad::retrieval::{
    build_index, describe_records, evaluate, image_to_tensor, load_batch, read_manifest, read_ppm, split_records,
    synth_dataset, IndexFile, Split, SynthConfig, DEFAULT_TOLERANCE_M,
};
use ghostvlad::training::{train_epoch, Sgd, TrainingSet};
use ghostvlad::{gradsuite, Error, Result};
use log::info;
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ghostvlad", version, about = "Lightweight visual place recognition")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic geotagged dataset.
    Synth(SynthArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Print the descriptor of one image.
    Extract(ExtractArgs),
    /// Describe the db and query splits of a manifest.
    Index(IndexArgs),
    /// Nearest database entries for one image or stored query.
    Query(QueryArgs),
    /// Recall@N of the queries stored in an index.
    Eval(EvalArgs),
    /// Analytical cost of an architecture, optionally against a baseline.
    Cost(CostArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    places: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Grid spacing in metres.
    #[arg(long, default_value_t = 100.0)]
    spacing: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    /// Scale of the per-view appearance changes.
    #[arg(long)]
    nuisance: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    multiplier: Option<f64>,
    #[arg(long)]
    dilation: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    reduction_dim: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, requires = "model", conflicts_with = "query_id")]
    image: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "image")]
    query_id: Option<String>,
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_M)]
    tolerance: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20, 25])]
    at: Vec<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value = "ghostcnn-netvlad")]
    arch: String,
    #[arg(long)]
    baseline: Option<String>,
    /// `WIDTHxHEIGHT`.
    #[arg(long, default_value = "640x480", value_parser = parse_size)]
    input: (usize, usize),
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value = "5-2")]
    dilation: String,
    #[arg(long, default_value_t = 1.0)]
    multiplier: f64,
    #[arg(long, default_value_t = 0)]
    reduction_dim: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    json: bool,
}

/// Writes to stdout, treating a closed pipe as a normal end of output.
fn emit(text: std::fmt::Arguments) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().lock().write_fmt(text) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing output: {e}");
        std::process::exit(2);
    }
}

macro_rules! out {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

macro_rules! outln {
    ($($arg:tt)*) => { emit(format_args!("{}\n", format_args!($($arg)*))) };
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok((w, h))
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable")
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: sub_seed(a.seed, "dataset"),
        places: a.places,
        views: a.views,
        spacing_m: a.spacing,
        width: a.width,
        height: a.height,
        ..SynthConfig::default()
    };
    if let Some(n) = a.nuisance {
        cfg.nuisance = n;
    }
    let data = synth_dataset(&cfg)?;
    data.write(&a.out)?;
    outln!("wrote {} images to {}", data.records.len(), a.out.display());
    Ok(())
}

fn train_config(a: TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.manifest {
        cfg.manifest = v;
    }
    if let Some(v) = a.out {
        cfg.out_dir = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.optimiser.learning_rate = v;
    }
    if let Some(v) = a.clusters {
        cfg.clusters = v;
    }
    if let Some(v) = a.multiplier {
        cfg.channel_multiplier = v;
    }
    if let Some(v) = a.dilation {
        cfg.dilation = v;
    }
    if let Some(v) = a.width {
        cfg.input_width = v;
    }
    if let Some(v) = a.height {
        cfg.input_height = v;
    }
    if let Some(v) = a.reduction_dim {
        cfg.reduction_dim = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let mut model_cfg = cfg.model_config()?;
    model_cfg.reduction_dim = 0;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;

    let records = split_records(&read_manifest(&cfg.manifest)?, cfg.train_split);
    if records.is_empty() {
        return Err(Error::Data(format!("manifest has no {:?} records", cfg.train_split)));
    }
    let root = manifest_root(&cfg.manifest);
    let paths: Vec<PathBuf> = records.iter().map(|r| r.path(&root)).collect();
    let images = load_batch(&paths, cfg.input_width, cfg.input_height)?;
    info!("loaded {} training images", records.len());

    let mut model = PlaceModel::initialise(model_cfg, &images, sub_seed(cfg.seed, "init"))?;
    let set = TrainingSet::new(images, records.iter().map(|r| r.position()).collect())?;
    let mut sgd = Sgd::new(cfg.optimiser)?;
    let shuffle = sub_seed(cfg.seed, "shuffle");
    for e in 0..cfg.epochs {
        let stats = train_epoch(&mut model, &set, &cfg.loss, &mut sgd, e, shuffle, |b| {
            info!("epoch {} batch {} tuples {} loss {:.6}", b.epoch, b.batch, b.tuples, b.loss);
        })?;
        info!("epoch {} mean loss {:.6} over {} tuples", e, stats.mean_loss, stats.tuples);
        model.save(&cfg.out_dir.join(format!("epoch_{e:03}.gdnv")))?;
    }
    if cfg.reduction_dim > 0 {
        model.fit_reduction(&set.images, cfg.reduction_dim, PCA_EPS)?;
    }
    let path = cfg.out_dir.join("model.gdnv");
    model.save(&path)?;
    outln!("saved {}", path.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let model = PlaceModel::<f32>::load(&a.model)?;
    let img = read_ppm(&a.image)?;
    let d = model.global_descriptor(&image_to_tensor(&img, model.config.input_width, model.config.input_height))?;
    if a.json {
        outln!("{}", to_json(&d));
    } else {
        let text: Vec<String> = d.iter().map(|v| v.to_string()).collect();
        outln!("{}", text.join(" "));
    }
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let model = PlaceModel::<f32>::load(&a.model)?;
    let records = read_manifest(&a.manifest)?;
    let root = manifest_root(&a.manifest);
    let db = build_index(&model, &split_records(&records, Split::Db), &root)?;
    let queries = split_records(&records, Split::Query);
    let descs = describe_records(&model, &queries, &root)?;
    let file = IndexFile {
        db,
        queries: queries.into_iter().map(|r| r.id).zip(descs).collect(),
    };
    file.save(&a.out)?;
    outln!("indexed {} db and {} query images into {}", file.db.len(), file.queries.len(), a.out.display());
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let file = IndexFile::load(&a.index)?;
    let desc = match (&a.image, &a.model, &a.query_id) {
        (Some(img), Some(model), _) => {
            let model = PlaceModel::<f32>::load(model)?;
            let t = image_to_tensor(&read_ppm(img)?, model.config.input_width, model.config.input_height);
            model.global_descriptor(&t)?
        }
        (_, _, Some(id)) => file
            .queries
            .iter()
            .find(|q| &q.0 == id)
            .map(|q| q.1.clone())
            .ok_or_else(|| Error::Data(format!("no stored query {id}")))?,
        _ => return Err(Error::Config("give --image with --model, or --query-id".into())),
    };
    let hits = file.db.query_topn(&desc, a.top)?;
    if a.json {
        let rows: Vec<_> = hits.iter().map(|h| json!({"id": h.id, "distance": h.distance})).collect();
        outln!("{}", to_json(&rows));
    } else {
        for (rank, h) in hits.iter().enumerate() {
            outln!("{:>3}  {}  {:.6}", rank + 1, h.id, h.distance);
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let file = IndexFile::load(&a.index)?;
    let records = read_manifest(&a.manifest)?;
    let table = evaluate(&file, &records, a.tolerance, &a.at)?;
    if a.json {
        outln!("{}", to_json(&table));
    } else {
        out!("{table}");
    }
    if !table.is_monotone() {
        return Err(Error::Numerical("recall is not monotone in N".into()));
    }
    Ok(())
}

fn architecture(name: &str, a: &CostArgs) -> Result<ArchitectureSpec> {
    let (w, h) = a.input;
    match name {
        "vgg16-netvlad" => Ok(vgg16_netvlad(w, h, a.k)),
        "ghostcnn-netvlad" => {
            let scheme: DilationScheme = a.dilation.parse()?;
            let cfg = GhostCnnConfig::standard(scheme).with_multiplier(a.multiplier);
            Ok(ghostcnn_netvlad(&cfg, w, h, a.k, a.reduction_dim))
        }
        other => Err(Error::Config(format!(
            "unknown architecture {other:?} (expected ghostcnn-netvlad or vgg16-netvlad)"
        ))),
    }
}

fn cost(a: CostArgs) -> Result<()> {
    let candidate = model_cost(&architecture(&a.arch, &a)?)?;
    let baseline: Option<CostReport> = match &a.baseline {
        Some(b) => Some(model_cost(&architecture(b, &a)?)?),
        None => None,
    };
    let reduction = baseline.as_ref().map(|b| compare_costs(b, &candidate)).transpose()?;
    if a.json {
        outln!(
            "{}",
            to_json(&json!({"candidate": candidate, "baseline": baseline, "comparison": reduction}))
        );
        return Ok(());
    }
    if let Some(b) = &baseline {
        outln!("{b}");
    }
    outln!("{candidate}");
    if let Some(r) = reduction {
        outln!("{r}");
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = gradsuite::run(a.seed)?;
    if a.json {
        outln!("{}", to_json(&reports));
    } else {
        for r in &reports {
            let verdict = if r.max_rel_error <= a.tolerance { "ok" } else { "FAIL" };
            outln!("{:<18} {:.3e}  ({} coords)  {verdict}", r.name, r.max_rel_error, r.checked);
        }
    }
    match reports.iter().find(|r| !(r.max_rel_error <= a.tolerance)) {
        Some(r) => Err(Error::Numerical(format!(
            "{} relative error {:.3e} exceeds {:.1e}",
            r.name, r.max_rel_error, a.tolerance
        ))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Cost(a) => cost(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}
