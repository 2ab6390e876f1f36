mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drape_forge::body::{build_procedural_body, BodyModel, BodyPose};
use drape_forge::fit::{distance_matrix, fit_factor_analysis, FitPair, PairRegistry};
use drape_forge::mesh::{load_obj, nearest_vertex_map, save_obj};
use drape_forge::oracle::{make_dataset, Dataset};
use drape_forge::pipeline::{
    build_coarse_graph, build_detail_graph, compose_coarse, compose_detail, curve_csv, evaluate_split, Category, Dims, Split, Stage,
    TrainedModels,
};
use drape_forge::{stats, Error, Result};

use crate::config::{variant_name, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "drape-forge", version, about = "Two-stage garment deformation: data, fit model, training, inference, evaluation")]
struct Cli {
    /// Print a configuration file with every default filled in and exit.
    #[arg(long)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Single linear displacement head instead of magnitude and direction.
    #[arg(long)]
    no_decomposition: bool,
    /// Append raw attributes to the detail nodes instead of the parser.
    #[arg(long)]
    no_parser: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Coarse,
    Detail,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the garment-body corpus and write the dataset directory.
    GenData(Common),
    /// Refit the fit model on the training pairs of the dataset.
    Fit(Common),
    /// Train the coarse and/or detail generator.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Deform a garment for one body state.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Garment OBJ draped on the unposed body.
        #[arg(long)]
        garment: PathBuf,
        /// Body pose JSON (`beta`, `theta`, `translation`).
        #[arg(long)]
        body: PathBuf,
        /// Output directory (default: `<reports>/infer`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-vertex errors of both stages on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Parse { .. } | Error::Json(_) | Error::Fit(_) | Error::Dataset(_) | Error::Io(_) => 2,
        Error::MissingArtifact(_) | Error::Checkpoint(_) => 3,
        Error::EmptySelection(_) => 4,
        Error::NonFinite { .. } | Error::Divergence { .. } | Error::SimulationBlowUp { .. } | Error::Shape { .. } | Error::ZeroNormal(_) => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    drape_forge::tune_allocator();
    let cli = Cli::parse();
    if cli.print_default_config {
        println!("{}", serde_json::to_string_pretty(&RunConfig::default()).expect("serializable"));
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (gen-data, fit, train, infer, eval)");
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let seed = config.seed;
    config.apply_seed(seed);
    config.model.no_decomposition |= common.no_decomposition;
    config.model.no_parser |= common.no_parser;
    config.validate()?;
    Ok(config)
}

const BODY_FILE: &str = "body.json";

/// The configured body model, or the one stored with the dataset.
fn body_model(config: &RunConfig) -> Result<BodyModel> {
    match &config.paths.body_model {
        Some(p) if !p.exists() => Err(Error::Validation(format!("body model {} not found", p.display()))),
        Some(p) => BodyModel::load_json(p),
        None => {
            let p = config.paths.dataset.join(BODY_FILE);
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            BodyModel::load_json(p)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => gen_data(&load_config(&common)?),
        Command::Fit(common) => fit(&load_config(&common)?),
        Command::Train { common, stage } => train(&load_config(&common)?, stage),
        Command::Infer {
            common,
            garment,
            body,
            output,
        } => infer(&load_config(&common)?, &garment, &body, output),
        Command::Eval { common, split } => eval(&load_config(&common)?, split.into()),
    }
}

fn gen_data(config: &RunConfig) -> Result<()> {
    let model = match &config.paths.body_model {
        Some(_) => body_model(config)?,
        None => build_procedural_body(config.body.joints, config.body.resolution, config.seed)?,
    };
    let start = Instant::now();
    let dataset = make_dataset(&model, &config.data, &config.sim)?;
    dataset.save(&config.paths.dataset)?;
    model.save_json(config.paths.dataset.join(BODY_FILE))?;
    let m = &dataset.manifest;
    println!("dataset    {}", config.paths.dataset.display());
    println!("pairs      {}", m.pairs.len());
    println!("train      {}", m.splits.train);
    println!("val        {}", m.splits.val);
    println!("test       {}", m.splits.test);
    for cat in [Category::Seen, Category::UnseenPose, Category::UnseenGarment, Category::UnseenBody] {
        let n = m.samples.iter().filter(|s| s.category == cat).count();
        println!("  {:<15} {n}", cat.name());
    }
    println!("dropped    {}", m.dropped.len());
    println!("config     {}", m.config_hash);
    println!("data       {}", m.data_hash);
    println!("elapsed    {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn load_dataset(config: &RunConfig, model: &BodyModel) -> Result<Dataset> {
    Dataset::load(&config.paths.dataset, model)
}

fn fit(config: &RunConfig) -> Result<()> {
    let model = body_model(config)?;
    let mut dataset = load_dataset(config, &model)?;
    let mut pairs = Vec::new();
    for p in dataset.manifest.pairs.iter().filter(|p| p.category == Category::Seen) {
        let beta = &dataset
            .manifest
            .bodies
            .iter()
            .find(|b| b.id == p.body)
            .ok_or_else(|| Error::Dataset(format!("unknown body {}", p.body)))?
            .beta;
        pairs.push(FitPair::new(
            p.garment.clone(),
            p.body.clone(),
            dataset.rest[&p.id].as_ref().clone(),
            model.unposed_body(beta)?,
        )?);
    }
    let registry = PairRegistry::new(pairs)?;
    let d = distance_matrix(&registry)?;
    let fitted = fit_factor_analysis(&d, config.data.factors, 1e-6, 500, config.seed)?;
    for pair in &mut dataset.manifest.pairs {
        let beta = &dataset.manifest.bodies.iter().find(|b| b.id == pair.body).expect("checked above").beta;
        let unposed = model.unposed_body(beta)?;
        let rest = &dataset.rest[&pair.id];
        let indicator = nearest_vertex_map(rest, &unposed)?;
        pair.alpha = fitted.alpha_for(rest, &unposed, &indicator)?;
    }
    let a1: Vec<f64> = dataset.manifest.pairs.iter().map(|p| p.alpha[0]).collect();
    let tightness: Vec<f64> = dataset.manifest.pairs.iter().map(|p| -p.mean_distance).collect();
    fitted.save_json(config.paths.dataset.join(&dataset.manifest.fit_model))?;
    std::fs::write(
        config.paths.dataset.join("manifest.json"),
        serde_json::to_string_pretty(&dataset.manifest)?,
    )?;
    println!("factors            {}", fitted.factor_count);
    println!("training pairs     {}", registry.pairs().len());
    println!("log-likelihood     {:.6e}", fitted.diagnostics.log_likelihood.last().copied().unwrap_or(f64::NAN));
    println!("iterations         {}", fitted.diagnostics.iterations);
    println!("relative residual  {:.4}", fitted.reconstruction_error(&d));
    println!("spearman(a1, tightness) {:.3}", stats::spearman(&a1, &tightness));
    Ok(())
}

fn dims(model: &BodyModel, dataset: &Dataset) -> Dims {
    Dims {
        alpha: dataset.fit.factor_count,
        beta: model.shape_count(),
        joints: model.joint_count(),
    }
}

fn train(config: &RunConfig, stage: StageArg) -> Result<()> {
    let model = body_model(config)?;
    let dataset = load_dataset(config, &model)?;
    let dir = config.variant_dir();
    let dims = dims(&model, &dataset);
    let mut models = match TrainedModels::load(&dir) {
        Ok(m) if m.config == config.model && m.dims == dims => m,
        Ok(_) | Err(Error::MissingArtifact(_)) => TrainedModels::new(&config.model, dims, config.seed)?,
        Err(e) => return Err(e),
    };
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Validation);
    let stages: &[Stage] = match stage {
        StageArg::Coarse => &[Stage::Coarse],
        StageArg::Detail => &[Stage::Detail],
        StageArg::Both => &[Stage::Coarse, Stage::Detail],
    };
    std::fs::create_dir_all(&dir)?;
    println!("variant {} ({} train / {} val samples)", variant_name(&config.model), train_set.len(), val_set.len());
    for &s in stages {
        let start = Instant::now();
        let curve = drape_forge::pipeline::train_stage(&mut models, &train_set, &val_set, s, &config.train)?;
        models.save(&dir, config.seed)?;
        std::fs::write(dir.join(format!("{}_loss.csv", s.name())), curve_csv(&curve))?;
        if let Some(last) = curve.last() {
            println!(
                "{:<7} epochs {:>4}  train loss {:.4e}  val error {} mm  ({:.1} s)",
                s.name(),
                curve.len(),
                last.train_loss,
                last.val_error_mm.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                start.elapsed().as_secs_f64()
            );
        }
    }
    println!("checkpoints {}", dir.display());
    Ok(())
}

fn load_models(config: &RunConfig) -> Result<TrainedModels> {
    let dir = config.variant_dir();
    let models = TrainedModels::load(&dir)?;
    for (ready, file) in [
        (models.coarse_ready, drape_forge::pipeline::COARSE_CHECKPOINT),
        (models.detail_ready, drape_forge::pipeline::DETAIL_CHECKPOINT),
    ] {
        if !ready {
            return Err(Error::MissingArtifact(dir.join(file)));
        }
    }
    Ok(models)
}

fn infer(config: &RunConfig, garment: &Path, body: &Path, output: Option<PathBuf>) -> Result<()> {
    let model = body_model(config)?;
    let models = load_models(config)?;
    let fit_path = config.paths.dataset.join("fit_model.json");
    if !fit_path.exists() {
        return Err(Error::MissingArtifact(fit_path));
    }
    let fit = drape_forge::fit::FitModel::load_json(&fit_path)?;
    if !garment.exists() {
        return Err(Error::Validation(format!("garment {} not found", garment.display())));
    }
    let garment = load_obj(garment)?;
    let pose: BodyPose = serde_json::from_str(
        &std::fs::read_to_string(body).map_err(|e| Error::Validation(format!("body state {}: {e}", body.display())))?,
    )?;
    let state = model.skin_pose(&pose)?;

    let start = Instant::now();
    let unposed = model.unposed_body(&state.beta)?;
    let indicator = nearest_vertex_map(&garment, &unposed)?;
    let alpha = fit.alpha_for(&garment, &unposed, &indicator)?;
    let graph = build_coarse_graph(&garment, &state, &indicator, &alpha)?;
    let c = models.coarse_forward(&graph)?;
    let coarse = compose_coarse(&garment, &state, &indicator, &c.magnitude, &c.direction)?;
    let coarse_time = start.elapsed();
    let start = Instant::now();
    let graph = build_detail_graph(&coarse, &state)?;
    let d = models.detail_forward(&graph, &alpha, &state.beta, &state.theta)?;
    let detail = compose_detail(&coarse, &d.magnitude, &d.direction)?;
    let detail_time = start.elapsed();

    let out = output.unwrap_or_else(|| config.paths.reports.join("infer"));
    std::fs::create_dir_all(&out)?;
    save_obj(&coarse, out.join("coarse.obj"))?;
    save_obj(&detail, out.join("detail.obj"))?;
    println!("vertices {}", detail.vertex_count());
    println!("coarse   {:.2} ms", coarse_time.as_secs_f64() * 1e3);
    println!("detail   {:.2} ms", detail_time.as_secs_f64() * 1e3);
    println!("written  {}", out.display());
    Ok(())
}

fn eval(config: &RunConfig, split: Split) -> Result<()> {
    let model = body_model(config)?;
    let dataset = load_dataset(config, &model)?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySelection(format!("split {} has no samples", split.name())));
    }
    let models = load_models(config)?;
    let report = evaluate_split(&samples, split, &config.eval, |s| models.infer_sample(s))?;
    std::fs::create_dir_all(&config.paths.reports)?;
    let stem = format!("{}_{}", variant_name(&config.model), split.name());
    let json = config.paths.reports.join(format!("{stem}_report.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(config.paths.reports.join(format!("{stem}_histogram.csv")), report.histogram_csv())?;
    std::fs::write(config.paths.reports.join(format!("{stem}_vertices.csv")), report.vertex_csv())?;
    println!("split {} ({} samples), errors in mm", split.name(), report.samples);
    println!("{:<16} {:>10} {:>10} {:>10} {:>10}", "", "coarse", "", "detail", "");
    println!("{:<16} {:>10} {:>10} {:>10} {:>10}", "category", "mean", "median", "mean", "median");
    let row = |name: &str, n: usize, c: &drape_forge::pipeline::ErrorStats, d: &drape_forge::pipeline::ErrorStats| {
        println!("{:<16} {:>10.3} {:>10.3} {:>10.3} {:>10.3}  ({n})", name, c.mean, c.median, d.mean, d.median);
    };
    for (name, cat) in &report.categories {
        row(name, cat.samples, &cat.coarse, &cat.detail);
    }
    row("all", report.samples, &report.coarse, &report.detail);
    println!("report {}", json.display());
    Ok(())
}
