//! `train-translator`, `infer-translator` and `gradcheck`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;
use vdes_core::gan::{cyclegan_toy_step, CycleGan, LossWeights, ToyStepOptions};
use vdes_core::translator::gradcheck::{check_all, TOLERANCE};
use vdes_core::translator::train::{
    derive_seed, predict_end_to_end, train_end_to_end, LabelledCrop, TrainConfigFile,
};
use vdes_core::translator::{grid_to_tensor, infer_translator, load_model, save_model, train_translator, Tensor};
use vdes_core::ImageGrid;

use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Paired pixel-loss pre-training.
    Pretrain,
    /// Translator plus a small classification head trained on cross-entropy.
    End2end,
    /// Alternating CycleGAN updates on LE and DES crops.
    CycleganToy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputKind {
    Le,
    Led,
}

impl InputKind {
    fn tag(self) -> &'static str {
        match self {
            InputKind::Le => "LE",
            InputKind::Led => "LED",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON with lr, epochs, batch_size, seed, loss, base_channels, depth, dropout.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub train_dir: PathBuf,
    #[arg(long)]
    pub val_dir: PathBuf,
    /// Model file (the G generator in cyclegan-toy mode).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Pretrain)]
    pub mode: Mode,
    /// Translator input image.
    #[arg(long, value_enum, default_value_t = InputKind::Le)]
    pub input: InputKind,
    /// Per-epoch (or per-step) loss history JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// end2end: predictions CSV on the evaluation crops.
    #[arg(long)]
    pub preds_out: Option<PathBuf>,
    /// end2end: crops to predict on (default: the validation crops).
    #[arg(long)]
    pub test_dir: Option<PathBuf>,
    /// end2end: independent training runs with derived seeds.
    #[arg(long, default_value_t = 1)]
    pub runs: u32,
    /// cyclegan-toy: generator objective ln D(G(x)) instead of ln(1 - D(G(x))).
    #[arg(long)]
    pub non_saturating: bool,
}

/// Crop triplets under `dir`: `(stem, input, DES, class)`; the class comes
/// from the `malignant`/`nonmalignant` directory holding the crop.
struct CropSet {
    names: Vec<String>,
    inputs: Vec<ImageGrid>,
    targets: Vec<ImageGrid>,
    classes: Vec<Option<u8>>,
}

fn load_crops(dir: &Path, input: InputKind) -> Result<CropSet> {
    let mut set = CropSet {
        names: Vec::new(),
        inputs: Vec::new(),
        targets: Vec::new(),
        classes: Vec::new(),
    };
    for le in fsutil::find_suffix(dir, "_LE.png")? {
        let class = le
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<vdes_core::ingest::Label>().ok())
            .and_then(|l| l.class_index());
        set.names.push(fsutil::crop_stem(&le));
        set.inputs.push(fsutil::load(&fsutil::sibling(&le, input.tag()))?);
        set.targets.push(fsutil::load(&fsutil::sibling(&le, "DES"))?);
        set.classes.push(class);
    }
    Ok(set)
}

fn pairs(set: &CropSet) -> Vec<(ImageGrid, ImageGrid)> {
    set.inputs.iter().cloned().zip(set.targets.iter().cloned()).collect()
}

fn labelled(set: &CropSet, what: &str) -> Result<Vec<LabelledCrop>> {
    set.inputs
        .iter()
        .zip(&set.classes)
        .zip(&set.names)
        .map(|((img, c), name)| match c {
            Some(c) => Ok((img.clone(), *c)),
            None => bail!("{what} crop {name} is not under a malignant/nonmalignant directory"),
        })
        .collect()
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut file = TrainConfigFile::from_json(&fsutil::read_text(&args.config)?)
        .with_context(|| format!("cannot parse {}", args.config.display()))?;
    if let Some(s) = seed {
        file.seed = s;
    }
    let (cfg, tc) = file.split()?;
    let train_set = load_crops(&args.train_dir, args.input)?;
    if train_set.names.is_empty() {
        bail!("no *_LE.png crops under {}", args.train_dir.display());
    }
    let val_set = load_crops(&args.val_dir, args.input)?;
    match args.mode {
        Mode::Pretrain => {
            let (params, history) = train_translator(&pairs(&train_set), &pairs(&val_set), &cfg, &tc)?;
            log::info!(
                "train loss {:.5} -> {:.5}, best epoch {}",
                history.initial_train_loss,
                history.final_train_loss,
                history.best_epoch
            );
            save_model(&params, &cfg, &args.out)?;
            if let Some(h) = &args.history {
                fsutil::write_json(h, &history)?;
            }
        }
        Mode::End2end => {
            if args.runs == 0 {
                bail!("--runs must be at least 1");
            }
            let train_crops = labelled(&train_set, "training")?;
            let eval_set = match &args.test_dir {
                Some(d) => load_crops(d, args.input)?,
                None => val_set,
            };
            let mut preds = String::from("run_id,sample_id,true_label,pred_label,prob\n");
            let mut histories = Vec::new();
            for run in 0..args.runs {
                let mut rc = tc.clone();
                rc.seed = derive_seed(tc.seed, 100, run as u64);
                let (model, losses) = train_end_to_end(&train_crops, &cfg, &rc)?;
                log::info!("run {run}: loss {:.5} -> {:.5}", losses[0], losses[losses.len() - 1]);
                if run == 0 {
                    save_model(&model.translator, &cfg, &args.out)?;
                }
                let out = predict_end_to_end(&model, &cfg, &eval_set.inputs)?;
                for ((name, class), (pred, prob)) in eval_set.names.iter().zip(&eval_set.classes).zip(out) {
                    let Some(truth) = class else { continue };
                    let _ = writeln!(preds, "{run},{name},{truth},{pred},{prob:.6}");
                }
                histories.push(json!({ "run": run, "seed": rc.seed, "losses": losses }));
            }
            if let Some(p) = &args.preds_out {
                fsutil::write_bytes(p, preds.as_bytes())?;
            }
            if let Some(h) = &args.history {
                fsutil::write_json(h, &histories)?;
            }
        }
        Mode::CycleganToy => cyclegan(args, &cfg, &tc, &train_set)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct StepRecord {
    step: u64,
    gan_g: f64,
    gan_f: f64,
    cyc: f64,
    id: f64,
    total: f64,
}

fn cyclegan(
    args: &TrainArgs,
    cfg: &vdes_core::translator::UNetConfig,
    tc: &vdes_core::translator::TrainConfig,
    set: &CropSet,
) -> Result<()> {
    let mut model = CycleGan::new(cfg.clone(), tc.seed)?;
    let opts = ToyStepOptions {
        lr: tc.lr,
        weights: LossWeights::default(),
        non_saturating: args.non_saturating,
        seed: tc.seed,
    };
    let n = set.inputs.len();
    let mut history = Vec::new();
    for epoch in 0..tc.epochs {
        // Domains are treated as unpaired: the DES batch is drawn with an offset.
        let offset = (derive_seed(tc.seed, 30, epoch as u64) % n as u64) as usize;
        for start in (0..n).step_by(tc.batch_size) {
            let idx: Vec<usize> = (start..(start + tc.batch_size).min(n)).collect();
            let x = Tensor::stack(&idx.iter().map(|&i| grid_to_tensor::<f32>(&set.inputs[i])).collect::<Vec<_>>());
            let y = Tensor::stack(
                &idx.iter()
                    .map(|&i| grid_to_tensor::<f32>(&set.targets[(i + offset) % n]))
                    .collect::<Vec<_>>(),
            );
            let step = model.step;
            let r = cyclegan_toy_step(&mut model, &x, &y, &opts)?;
            log::debug!("step {step}: total {:.5}", r.total);
            history.push(StepRecord {
                step,
                gan_g: r.gan_g,
                gan_f: r.gan_f,
                cyc: r.cyc,
                id: r.id,
                total: r.total,
            });
        }
    }
    if let Some(last) = history.last() {
        log::info!("{} steps, final total loss {:.5}", history.len(), last.total);
    }
    save_model(&model.g, cfg, &args.out)?;
    if let Some(h) = &args.history {
        fsutil::write_json(h, &history)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One LE image.
    #[arg(long = "in", required_unless_present = "in_dir", conflicts_with = "in_dir")]
    pub input: Option<PathBuf>,
    #[arg(long, required_unless_present = "in_dir")]
    pub out: Option<PathBuf>,
    /// Translate every `*_LE.png` under a directory into `<out-dir>/<stem>_VDES.png`.
    #[arg(long, requires = "out_dir")]
    pub in_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let (params, cfg) = load_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    if let Some(dir) = &args.in_dir {
        let out_dir = args.out_dir.as_deref().expect("clap enforces --out-dir");
        let inputs = fsutil::find_suffix(dir, "_LE.png")?;
        for le in &inputs {
            let img = fsutil::load(le)?;
            let out = infer_translator(&params, &cfg, &img)?;
            fsutil::save(&out, &out_dir.join(format!("{}_VDES.png", fsutil::crop_stem(le))))?;
        }
        log::info!("translated {} images", inputs.len());
        return Ok(());
    }
    let img = fsutil::load(args.input.as_deref().expect("clap enforces --in"))?;
    let out = infer_translator(&params, &cfg, &img)?;
    fsutil::save(&out, args.out.as_deref().expect("clap enforces --out"))
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random trials per op.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gradcheck(args: &GradcheckArgs, seed: u64) -> Result<()> {
    if args.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let reports = check_all(args.trials, seed)?;
    println!("{:<24} {:>7} {:>8} {:>8} {:>12}  result", "op", "trials", "checked", "skipped", "max rel err");
    for r in &reports {
        println!(
            "{:<24} {:>7} {:>8} {:>8} {:>12.3e}  {}",
            r.name,
            r.trials,
            r.checked,
            r.skipped,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(p) = &args.out {
        fsutil::write_json(p, &json!({ "tolerance": TOLERANCE, "seed": seed, "ops": reports }))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
