use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use attnmap::config::{parse_triple, resolve_model_config, ClassPolicy, RunConfig};
use attnmap::fixtures::write_bright_patch_fixture;
use attnmap::pipeline::evaluate;
use attnmap::report::write_outputs;
use attnmap::tools::{inspect_weights, saliency, SaliencyRequest};
use attnmap_core::eval::IouMode;
use attnmap_core::saliency::{HeadAggregation, Method};
use attnmap_core::vit::Normalization;
use attnmap_core::DType;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "attnmap",
    version,
    about = "Saliency maps and localisation metrics for ViT classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every annotated image and write results.csv and summary.json
    Evaluate(EvaluateArgs),
    /// Compute one map for one image and dump it
    Saliency(SaliencyArgs),
    /// Print the manifest of a weight file
    InspectWeights(InspectArgs),
    /// Write the bright-patch model and a synthetic square dataset
    MakeFixture(FixtureArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Weight file (VTW)
    #[arg(long)]
    weights: PathBuf,
    /// Preset name (vit-b16, tiny) or a JSON config file
    #[arg(long, default_value = "vit-b16")]
    config: String,
    /// Logit to explain: "predicted" or a class index
    #[arg(long = "class", default_value = "1")]
    class_policy: ClassPolicy,
    /// mean, max or a head index
    #[arg(long, default_value = "mean")]
    head_agg: HeadAggregation,
    /// Top-k percent of pixels kept for the predicted box
    #[arg(long, default_value_t = 5.0)]
    k: f64,
    /// Per-channel normalisation mean, as r,g,b
    #[arg(long, value_parser = parse_triple)]
    norm_mean: Option<[f64; 3]>,
    /// Per-channel normalisation std, as r,g,b
    #[arg(long, value_parser = parse_triple)]
    norm_std: Option<[f64; 3]>,
    #[arg(long, default_value = "f32")]
    dtype: DType,
}

impl ModelArgs {
    fn normalization(&self) -> Normalization {
        let mut n = Normalization::default();
        if let Some(m) = self.norm_mean {
            n.mean = m;
        }
        if let Some(s) = self.norm_std {
            n.std = s;
        }
        n
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data_dir: PathBuf,
    /// JSONL annotations; defaults to <data-dir>/annotations.jsonl
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Comma-separated subset of gradcam, attention, chefer
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, default_value = "box-vs-box")]
    iou_mode: IouMode,
    /// Label copied into every CSV row; defaults to the weight file stem
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
    /// Also check the file against this preset or config file
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let model = resolve_model_config(&args.model.config)?;
    let annotations = args
        .annotations
        .clone()
        .unwrap_or_else(|| args.data_dir.join("annotations.jsonl"));
    let mut run = RunConfig::new(
        &args.model.weights,
        model,
        &args.data_dir,
        &annotations,
        &args.out,
    );
    if let Some(methods) = args.methods {
        run.methods = methods;
    }
    run.class_policy = args.model.class_policy;
    run.k = args.model.k;
    run.head_agg = args.model.head_agg;
    run.iou_mode = args.iou_mode;
    run.normalization = args.model.normalization();
    if let Some(init) = args.init {
        run.init = init;
    }
    run.jobs = args.jobs;
    run.dtype = args.model.dtype;

    let output = evaluate(&run)?;
    let summary = output.summary(&run)?;
    write_outputs(&run.out_dir, &output.csv(&run), &summary)?;
    log::info!(
        "{} of {} records evaluated, outputs in {}",
        summary.evaluated,
        summary.records,
        run.out_dir.display()
    );
    for f in &summary.failures {
        eprintln!("skipped {}: {}", f.image, f.error);
    }
    for (method, s) in &summary.methods {
        println!(
            "{method}: pointing {:.4} mean IoU {:.4} over {}",
            s.pointing_accuracy, s.iou_mean, s.count
        );
    }
    if summary.evaluated == 0 && summary.records > 0 {
        eprintln!("error: no record could be evaluated");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_saliency(args: SaliencyArgs) -> Result<ExitCode> {
    let req = SaliencyRequest {
        model: resolve_model_config(&args.model.config)?,
        normalization: args.model.normalization(),
        image: args.image,
        weights: args.model.weights,
        method: args.method,
        class_policy: args.model.class_policy,
        head_agg: args.model.head_agg,
        k: args.model.k,
        out_dir: args.out,
        dtype: args.model.dtype,
    };
    print!("{}", saliency(&req)?.describe());
    Ok(ExitCode::SUCCESS)
}

fn run_inspect(args: InspectArgs) -> Result<ExitCode> {
    let config = args
        .config
        .as_deref()
        .map(resolve_model_config)
        .transpose()?;
    print!("{}", inspect_weights(&args.path, config.as_ref())?);
    Ok(ExitCode::SUCCESS)
}

fn run_fixture(args: FixtureArgs) -> Result<ExitCode> {
    let paths = write_bright_patch_fixture(&args.out, args.count, args.seed)
        .with_context(|| format!("writing fixture to {}", args.out.display()))?;
    println!("weights {}", paths.weights.display());
    println!("config {}", paths.config.display());
    println!("data-dir {}", paths.data_dir.display());
    println!("annotations {}", paths.annotations.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Evaluate(a) => run_evaluate(a),
        Command::Saliency(a) => run_saliency(a),
        Command::InspectWeights(a) => run_inspect(a),
        Command::MakeFixture(a) => run_fixture(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
