//! `texparse` — the command-line surface of the pipeline.
//!
//! Subcommands cover the full loop: `merge-lora` folds low-rank adapters
//! into a base weight archive, `synth` writes paired train/test datasets,
//! `train` fits the mask head on frozen diffusion features, `infer` writes
//! per-image predictions, `eval` scores them under the four protocols, and
//! `visualize` renders color-coded overlays.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, bad config
//! file), 3 data error (missing or malformed inputs).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use texparse_core::dataset::{
    image_to_png, load_dataset_named, load_predictions, save_dataset, save_predictions,
};
use texparse_core::eval::gamma_correct;
use texparse_core::lora::{adapters_from_archive, merge_model};
use texparse_core::synth::{generate_synthetic_dataset, SynthOptions, Vocab};
use texparse_core::util::derive_seed;
use texparse_core::{
    evaluate_dataset, visualize_masks, EnsembleTable, EvalOptions, ImagePrediction,
    InferenceEngine, LabeledSample, MetricReport, Protocol, RunConfig, TensorArchive, Trainer,
    UnificationMap,
};

#[derive(Parser)]
#[command(name = "texparse", version, about = "Prompt-driven human parsing on diffusion features")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for generated files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fold low-rank adapters into a base weight archive.
    MergeLora(MergeLoraArgs),
    /// Generate synthetic train/test datasets under the output directory.
    Synth,
    /// Train the mask head and save a checkpoint.
    Train(TrainArgs),
    /// Run inference and save per-image predictions.
    Infer(InferArgs),
    /// Score predictions against ground truth and write reports.
    Eval(EvalArgs),
    /// Render prediction overlays with per-mask colors and legends.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct MergeLoraArgs {
    /// Base weight archive.
    #[arg(long)]
    base: PathBuf,
    /// Archive holding `<target>.lora_a` / `<target>.lora_b` pairs.
    #[arg(long)]
    adapters: PathBuf,
    /// LoRA scale numerator.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// LoRA rank (scale denominator).
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// Merged archive path; defaults to `<out>/merged.bin`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Step count; defaults to the config's optimizer.steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// Dataset directory to predict on.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated prompt labels; defaults to the dataset's own labels.
    #[arg(long)]
    prompts: Option<String>,
    /// Diffusion timestep override for feature extraction.
    #[arg(long)]
    timestep: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint for in-process inference.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Saved prediction directory (alternative to --checkpoint).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Comma-separated protocol list, e.g. "COP,BHP"; defaults to all four.
    #[arg(long)]
    protocols: Option<String>,
    /// Training dataset directory; enables the unseen/seen label split.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Re-run inference under gamma correction {1.0, 0.75, 0.5, 0.25} and
    /// write one report row per gamma (needs --checkpoint).
    #[arg(long)]
    gamma_grid: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Dataset directory providing the images.
    #[arg(long)]
    data: PathBuf,
    /// Saved prediction directory to overlay.
    #[arg(long)]
    pred: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<texparse_core::Error>() {
                Some(texparse_core::Error::Config(_)) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;

    match &cli.command {
        Command::MergeLora(args) => merge_lora_command(&cli, args),
        Command::Synth => synth_command(&cli, &cfg),
        Command::Train(args) => train_command(&cli, &cfg, args),
        Command::Infer(args) => infer_command(&cli, &cfg, args),
        Command::Eval(args) => eval_command(&cli, &cfg, args),
        Command::Visualize(args) => visualize_command(&cli, args),
    }
}

fn merge_lora_command(cli: &Cli, args: &MergeLoraArgs) -> anyhow::Result<()> {
    let base = TensorArchive::load(&args.base)
        .with_context(|| format!("loading base archive {}", args.base.display()))?;
    let adapter_archive = TensorArchive::load(&args.adapters)
        .with_context(|| format!("loading adapter archive {}", args.adapters.display()))?;
    let adapters = adapters_from_archive(&adapter_archive, args.alpha, args.rank)?;
    let merged = merge_model(&base, &adapters)?;
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| cli.out.join("merged.bin"));
    merged.save(&output)?;
    println!(
        "merged {} adapter target(s) into {} tensor(s) -> {}",
        adapters.len(),
        merged.len(),
        output.display()
    );
    Ok(())
}

fn synth_command(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    let train_opts = SynthOptions {
        size: cfg.data.resize,
        vocab: Vocab::parse(&cfg.data.vocab)?,
    };
    let test_opts = SynthOptions {
        size: cfg.data.resize,
        vocab: Vocab::parse(&cfg.data.test_vocab)?,
    };
    let train = generate_synthetic_dataset(cfg.data.n_train, cfg.seed, &train_opts)?;
    let test =
        generate_synthetic_dataset(cfg.data.n_test, derive_seed(cfg.seed, "test"), &test_opts)?;
    let train_dir = cli.out.join("train");
    let test_dir = cli.out.join("test");
    save_dataset(&train_dir, &train)?;
    save_dataset(&test_dir, &test)?;
    println!(
        "wrote {} train sample(s) -> {}",
        train.len(),
        train_dir.display()
    );
    println!(
        "wrote {} test sample(s) -> {}",
        test.len(),
        test_dir.display()
    );
    Ok(())
}

fn train_command(cli: &Cli, cfg: &RunConfig, args: &TrainArgs) -> anyhow::Result<()> {
    let (_, samples) = load_dataset_named(&args.data)?;
    let base_dir = args.data.parent().map(Path::to_path_buf);
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let archive = TensorArchive::load(ckpt)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            Trainer::resume(cfg, &samples, base_dir.as_deref(), &archive)?
        }
        None => Trainer::new(cfg, &samples, base_dir.as_deref())?,
    };
    let steps = args.steps.unwrap_or(cfg.optimizer.steps);

    let mut log = String::new();
    for chunk_start in (0..steps).step_by(50) {
        let chunk = 50.min(steps - chunk_start);
        let losses = trainer.run(chunk)?;
        for (k, loss) in losses.iter().enumerate() {
            let step = trainer.step() - losses.len() + k + 1;
            log.push_str(&format!("{{\"step\":{step},\"loss\":{loss}}}\n"));
        }
        println!(
            "step {:5}  loss {:.6}",
            trainer.step(),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }

    let ckpt_path = cli.out.join("checkpoint.bin");
    trainer.save_checkpoint(&ckpt_path)?;
    let log_path = cli.out.join("train_log.jsonl");
    std::fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    println!("checkpoint -> {}", ckpt_path.display());
    Ok(())
}

/// Sorted unique lowercase instance labels of a dataset: the default prompt
/// universe and the training-label set for the unseen/seen split.
fn dataset_labels(samples: &[LabeledSample]) -> Vec<String> {
    let set: BTreeSet<String> = samples
        .iter()
        .flat_map(|s| s.instances.iter().map(|i| i.label.to_lowercase()))
        .collect();
    set.into_iter().collect()
}

fn parse_prompts(raw: &str) -> anyhow::Result<Vec<String>> {
    let prompts: Vec<String> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if prompts.is_empty() {
        bail!(texparse_core::Error::Config(
            "--prompts must name at least one label".into()
        ));
    }
    Ok(prompts)
}

fn infer_command(cli: &Cli, cfg: &RunConfig, args: &InferArgs) -> anyhow::Result<()> {
    let (names, samples) = load_dataset_named(&args.data)?;
    let prompts = match &args.prompts {
        Some(raw) => parse_prompts(raw)?,
        None => dataset_labels(&samples),
    };
    let archive = TensorArchive::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let base_dir = args.data.parent().map(Path::to_path_buf);
    let engine = InferenceEngine::from_checkpoint(cfg, &archive, &prompts, base_dir.as_deref())?;
    let timestep = args.timestep.unwrap_or(cfg.infer.timestep);

    let mut preds = Vec::with_capacity(samples.len());
    for sample in &samples {
        preds.push(engine.predict_at(&sample.image, timestep)?);
    }
    let pred_dir = cli.out.join("predictions");
    save_predictions(&pred_dir, &names, &preds)?;
    let masks: usize = preds.iter().map(|p| p.instances.len()).sum();
    println!(
        "wrote {} prediction(s) ({} labeled mask(s)) -> {}",
        preds.len(),
        masks,
        pred_dir.display()
    );
    Ok(())
}

fn parse_protocols(raw: &str) -> anyhow::Result<Vec<Protocol>> {
    let mut protocols = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        protocols.push(Protocol::parse(part)?);
    }
    if protocols.is_empty() {
        bail!(texparse_core::Error::Config(
            "--protocols must name at least one protocol".into()
        ));
    }
    Ok(protocols)
}

/// Evaluation context shared by the plain report and the gamma grid.
struct EvalSetup {
    samples: Vec<LabeledSample>,
    unify: UnificationMap,
    ensembles: EnsembleTable,
    opts: EvalOptions,
}

impl EvalSetup {
    fn score(&self, preds: &[Option<ImagePrediction>]) -> anyhow::Result<MetricReport> {
        Ok(evaluate_dataset(
            &self.samples,
            preds,
            &self.unify,
            &self.ensembles,
            &self.opts,
        )?)
    }
}

fn eval_command(cli: &Cli, cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    if args.checkpoint.is_some() && args.pred.is_some() {
        bail!(texparse_core::Error::Config(
            "--checkpoint and --pred are mutually exclusive".into()
        ));
    }
    if args.checkpoint.is_none() && args.pred.is_none() {
        bail!(texparse_core::Error::Config(
            "eval needs either --checkpoint (in-process inference) or --pred".into()
        ));
    }
    if args.gamma_grid && args.checkpoint.is_none() {
        bail!(texparse_core::Error::Config(
            "--gamma-grid re-runs inference, so it needs --checkpoint".into()
        ));
    }

    let (names, samples) = load_dataset_named(&args.data)?;
    let mut opts = EvalOptions::default();
    if let Some(raw) = &args.protocols {
        opts.protocols = parse_protocols(raw)?;
    }
    if let Some(train_dir) = &args.train_data {
        let (_, train_samples) = load_dataset_named(train_dir)?;
        opts.train_labels = Some(dataset_labels(&train_samples).into_iter().collect());
    }
    let setup = EvalSetup {
        unify: UnificationMap::builtin(),
        ensembles: EnsembleTable::builtin(),
        samples,
        opts,
    };

    let engine = match &args.checkpoint {
        Some(ckpt) => {
            let archive = TensorArchive::load(ckpt)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let prompts = dataset_labels(&setup.samples);
            let base_dir = args.data.parent().map(Path::to_path_buf);
            Some(InferenceEngine::from_checkpoint(
                cfg,
                &archive,
                &prompts,
                base_dir.as_deref(),
            )?)
        }
        None => None,
    };

    let preds: Vec<Option<ImagePrediction>> = match (&engine, &args.pred) {
        (Some(engine), _) => setup
            .samples
            .iter()
            .map(|s| engine.predict(&s.image).map(Some))
            .collect::<texparse_core::Result<_>>()?,
        (None, Some(dir)) => load_predictions(dir, &names)?,
        (None, None) => unreachable!("validated above"),
    };

    let report = setup.score(&preds)?;
    let json_path = cli.out.join("report.json");
    let text_path = cli.out.join("report.txt");
    std::fs::write(&json_path, report.to_json_string())
        .with_context(|| format!("writing {}", json_path.display()))?;
    std::fs::write(&text_path, report.to_text())
        .with_context(|| format!("writing {}", text_path.display()))?;
    println!("{}", report.to_text());
    println!("report -> {}", json_path.display());

    if args.gamma_grid {
        let engine = engine.as_ref().expect("gamma grid requires a checkpoint");
        let mut rows_json = Vec::new();
        let mut rows_text = String::new();
        for &gamma in &[1.0, 0.75, 0.5, 0.25] {
            let preds: Vec<Option<ImagePrediction>> = setup
                .samples
                .iter()
                .map(|s| {
                    let dark = gamma_correct(&s.image, gamma)?;
                    engine.predict(&dark).map(Some)
                })
                .collect::<texparse_core::Result<_>>()?;
            let report = setup.score(&preds)?;
            let miou = |name: &str| {
                report
                    .protocols
                    .get(name)
                    .and_then(|p| p.miou)
                    .map_or_else(|| "   empty".into(), |v| format!("{v:8.2}"))
            };
            rows_text.push_str(&format!(
                "gamma {gamma:4.2}  COP mIoU {}  BHP mIoU {}\n",
                miou("COP"),
                miou("BHP")
            ));
            rows_json.push(serde_json::json!({
                "gamma": gamma,
                "report": serde_json::from_str::<serde_json::Value>(&report.to_json_string())?,
            }));
        }
        let grid_json = cli.out.join("gamma_report.json");
        let grid_text = cli.out.join("gamma_report.txt");
        std::fs::write(&grid_json, format!("{:#}\n", serde_json::Value::Array(rows_json)))
            .with_context(|| format!("writing {}", grid_json.display()))?;
        std::fs::write(&grid_text, &rows_text)
            .with_context(|| format!("writing {}", grid_text.display()))?;
        print!("{rows_text}");
        println!("gamma grid -> {}", grid_json.display());
    }
    Ok(())
}

fn visualize_command(cli: &Cli, args: &VisualizeArgs) -> anyhow::Result<()> {
    let (names, samples) = load_dataset_named(&args.data)?;
    let preds = load_predictions(&args.pred, &names)?;
    let overlay_dir = cli.out.join("overlays");
    std::fs::create_dir_all(&overlay_dir)
        .with_context(|| format!("creating {}", overlay_dir.display()))?;

    let mut rendered = 0usize;
    for ((name, sample), pred) in names.iter().zip(&samples).zip(&preds) {
        let Some(pred) = pred else { continue };
        let masks: Vec<_> = pred
            .instances
            .iter()
            .map(|inst| {
                (
                    inst.mask.mapv(|b| if b { 1.0 } else { 0.0 }),
                    inst.label.clone(),
                )
            })
            .collect();
        let (overlay, legend) = visualize_masks(&sample.image, &masks)?;
        image_to_png(&overlay, &overlay_dir.join(format!("{name}.png")))?;
        let legend_path = overlay_dir.join(format!("{name}.legend.json"));
        std::fs::write(&legend_path, legend.to_json_string())
            .with_context(|| format!("writing {}", legend_path.display()))?;
        rendered += 1;
    }
    println!("rendered {rendered} overlay(s) -> {}", overlay_dir.display());
    Ok(())
}
