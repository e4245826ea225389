use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edunet::checkpoint::Checkpoint;
use edunet::config::RunConfig;
use edunet::data::{
    center_crop_resize, load_sample, make_folds, sample_paths, save_sample, scan_dataset,
    synth_generate, Sample,
};
use edunet::error::{Error, Result};
use edunet::gradcam::{gradcam, save_heatmap};
use edunet::gradcheck_suite::{run_suite, suite_names};
use edunet::metrics::metrics_csv;
use edunet::model::init_edunet;
use edunet::params::ParamStore;
use edunet::rng::derive_rng;
use edunet::tensor::Tensor;
use edunet::train::{cross_validate, log_csv, predict_masks, train};

#[derive(Parser)]
#[command(name = "edunet", about = "Dual-branch retinal OCT fluid segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic OCT-like dataset
    Synth(SynthArgs),
    /// Train on a dataset fold and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint with cross-validated metrics
    Eval(EvalArgs),
    /// Predict a mask for one image
    Infer(InferArgs),
    /// Finite-difference checks over the differentiable ops
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Held-out fold index used for validation
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "local_only")]
    global_only: bool,
    #[arg(long)]
    local_only: bool,
    #[arg(long)]
    no_mcega: bool,
    /// Override any `key = value` config entry, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cross-validation fold count; 1 evaluates the checkpoint as-is
    #[arg(long, default_value_t = 1)]
    folds: usize,
    #[arg(long, default_value_t = String::from("dataset"))]
    dataset: String,
    /// Pool pixel counts across images instead of averaging per image
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a Grad-CAM PNG for this captured layer
    #[arg(long, value_name = "LAYER")]
    heatmap: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated op names; default runs everything
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::tiny_default();
    if let Some(p) = path {
        cfg.load_file(p)?;
    }
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn load_dataset(root: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let ids = scan_dataset(root)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("no samples under {}", root.display())));
    }
    ids.iter()
        .map(|id| {
            let (ip, mp) = sample_paths(root, id);
            let s = load_sample(&ip, &mp, cfg.model.num_classes)?;
            center_crop_resize(&s, cfg.model.input_size)
        })
        .collect()
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let samples = synth_generate(a.n, a.size, a.seed, a.classes)?;
    std::fs::create_dir_all(a.out.join("images"))?;
    std::fs::create_dir_all(a.out.join("masks"))?;
    for s in &samples {
        save_sample(&a.out, s)?;
    }
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(a.config.as_deref(), &a.overrides)?;
    if a.global_only {
        cfg.model.use_local = false;
    }
    if a.local_only {
        cfg.model.use_global = false;
        cfg.model.use_mcega = false;
    }
    if a.no_mcega {
        cfg.model.use_mcega = false;
    }
    cfg.validate()?;

    let samples = load_dataset(&a.data, &cfg)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let folds = make_folds(&ids, cfg.folds, cfg.train.seed)?;
    if a.fold >= folds.k {
        return Err(Error::Config(format!(
            "fold {} out of range for k={}",
            a.fold, folds.k
        )));
    }
    let pick = |wanted: &[String]| -> Vec<Sample> {
        samples
            .iter()
            .filter(|s| wanted.contains(&s.id))
            .cloned()
            .collect()
    };
    let val = pick(&folds.fold_ids(a.fold));
    let train_set = if folds.k == 1 {
        eprintln!("warning: k=1 trains and validates on the full set");
        val.clone()
    } else {
        pick(&folds.train_ids(a.fold))
    };

    std::fs::create_dir_all(&a.out)?;
    let result = train(&train_set, &val, &cfg.model, &cfg.train, &cfg.augment)?;
    result.checkpoint.save(&a.out.join("model.ckpt"))?;
    std::fs::write(a.out.join("train_log.csv"), log_csv(&result.log))?;
    std::fs::write(a.out.join("resolved.cfg"), cfg.render())?;
    println!(
        "best epoch {} (val loss {:.6}); artifacts in {}",
        result.best_epoch,
        result.best_val_loss,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut cfg = load_run_config(a.config.as_deref(), &[])?;
    cfg.model = ckpt.config.clone();
    cfg.folds = a.folds;
    cfg.validate()?;
    let samples = load_dataset(&a.data, &cfg)?;

    let per_fold: Vec<(usize, edunet::metrics::MetricsReport)> = if a.folds <= 1 {
        // score the checkpoint directly on the whole set
        let mut store = ParamStore::new();
        let mut rng = derive_rng(cfg.train.seed, "init", 0, 0);
        init_edunet(&mut store, &cfg.model, &mut rng)?;
        ckpt.restore_model(&mut store)?;
        let preds = predict_masks(&mut store, &cfg.model, &samples, cfg.train.batch_size)?;
        let truths: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
        let report =
            edunet::metrics::evaluate_masks(&preds, &truths, cfg.model.num_classes, a.pooled)?;
        vec![(0, report)]
    } else {
        // retrain per fold under the checkpoint's architecture
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let folds = make_folds(&ids, a.folds, cfg.train.seed)?;
        cross_validate(&samples, &folds, &cfg.model, &cfg.train, &cfg.augment, a.pooled)?
            .into_iter()
            .map(|o| (o.fold, o.report))
            .collect()
    };
    let csv = metrics_csv(&a.dataset, &per_fold);
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = ckpt.config.clone();
    let mut store = ParamStore::new();
    let mut rng = derive_rng(0, "init", 0, 0);
    init_edunet(&mut store, &model, &mut rng)?;
    ckpt.restore_model(&mut store)?;

    let img = image::open(&a.image)
        .map_err(|e| Error::Data(format!("{}: {e}", a.image.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let pixels: Vec<f32> = img.as_raw().iter().map(|b| *b as f32 / 255.0).collect();
    let raw = Sample {
        id: "input".into(),
        image: pixels,
        mask: vec![0; (w * h) as usize],
        height: h as usize,
        width: w as usize,
    };
    let sized = center_crop_resize(&raw, model.input_size)?;

    let preds = predict_masks(&mut store, &model, &[sized.clone()], 1)?;
    let labels = &preds[0];
    let out_img = image::GrayImage::from_raw(
        model.input_size.1 as u32,
        model.input_size.0 as u32,
        labels.clone(),
    )
    .ok_or_else(|| Error::Invalid("mask buffer mismatch".into()))?;
    out_img.save(&a.out)?;
    println!("wrote {}", a.out.display());

    if let Some(layer) = &a.heatmap {
        let t = Tensor::leaf(
            sized.image.clone(),
            &[1, 1, model.input_size.0, model.input_size.1],
            false,
        )?;
        let heat = gradcam(&mut store, &model, &t, layer)?;
        let hpath = a.out.with_extension("heatmap.png");
        save_heatmap(&hpath, &heat, model.input_size.0, model.input_size.1)?;
        println!("wrote {}", hpath.display());
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let selected: Vec<String> = if a.ops.is_empty() {
        suite_names()
    } else {
        a.ops.clone()
    };
    let results = run_suite(&selected, a.seed)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<28} {:<4} max rel err {:.3e}",
            r.name,
            if r.passed { "ok" } else { "FAIL" },
            r.max_rel_err
        );
        ok &= r.passed;
    }
    if !ok {
        return Err(Error::Backward("gradient check failed".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
