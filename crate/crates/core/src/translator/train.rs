//! Training loops, inference and the training config file.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::graph::{Graph, GraphError};
use super::heads::{classifier_graph, init_classifier};
use super::tensor::Tensor;
use super::unet::{check_input, init_params, unet_forward, unet_graph, Mode, UNetConfig};
use super::{grid_to_tensor, tensor_to_grid, ParamSet, TranslatorError};
use crate::dataset::{augment_pair, sample_transform};
use crate::image::ImageGrid;

pub const LEARNING_RATE_GRID: [f64; 4] = [1e-3, 5e-4, 1e-4, 5e-5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L1,
    L2,
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(LossKind::L1),
            "L2" => Ok(LossKind::L2),
            _ => Err(format!("unknown loss {s:?} (expected L1 or L2)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Draw a fresh synchronized transform for every training sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            loss: LossKind::L1,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TranslatorError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TranslatorError::LearningRate(self.lr));
        }
        if self.epochs == 0 {
            return Err(TranslatorError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TranslatorError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// JSON training config as read from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout: f64,
    /// Online augmentation; on unless the file says otherwise.
    #[serde(default = "online_augmentation")]
    pub augment: bool,
}

fn online_augmentation() -> bool {
    true
}

impl TrainConfigFile {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn split(&self) -> Result<(UNetConfig, TrainConfig), TranslatorError> {
        let cfg = UNetConfig {
            base_channels: self.base_channels,
            depth: self.depth,
            dropout_p: self.dropout,
            ..UNetConfig::default()
        };
        let tc = TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: self.loss,
            augment: self.augment,
        };
        cfg.validate()?;
        tc.validate()?;
        Ok((cfg, tc))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainHistory {
    /// Eval-mode loss of the initial parameters on the training set.
    pub initial_train_loss: f64,
    /// Eval-mode loss of the returned parameters on the training set.
    pub final_train_loss: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

/// Mixes a base seed with two counters into an independent seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform_dims(pairs: &[(ImageGrid, ImageGrid)], what: &str) -> Result<(usize, usize), TranslatorError> {
    let dims = pairs[0].0.dims();
    for (a, b) in pairs {
        if a.dims() != dims || b.dims() != dims {
            return Err(TranslatorError::Shape(format!(
                "all {what} images must be {}x{}",
                dims.0, dims.1
            )));
        }
    }
    Ok(dims)
}

fn batch_tensors(pairs: &[(ImageGrid, ImageGrid)]) -> (Tensor<f32>, Tensor<f32>) {
    let xs: Vec<_> = pairs.iter().map(|(a, _)| grid_to_tensor(a)).collect();
    let ys: Vec<_> = pairs.iter().map(|(_, b)| grid_to_tensor(b)).collect();
    (Tensor::stack(&xs), Tensor::stack(&ys))
}

fn loss_value(g: &mut Graph<f32>, y: super::Var, t: super::Var, loss: LossKind) -> Result<super::Var, GraphError> {
    match loss {
        LossKind::L1 => g.l1(y, t),
        LossKind::L2 => g.l2(y, t),
    }
}

/// Eval-mode loss averaged over all samples.
pub fn dataset_loss(
    params: &ParamSet<f32>,
    cfg: &UNetConfig,
    pairs: &[(ImageGrid, ImageGrid)],
    loss: LossKind,
    batch_size: usize,
) -> Result<f64, TranslatorError> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let (x, t) = batch_tensors(chunk);
        let y = unet_forward(params, cfg, &x, Mode::Eval, 0)?;
        let mut g = Graph::new();
        let yv = g.leaf(y, "output")?;
        let tv = g.leaf(t, "target")?;
        let l = loss_value(&mut g, yv, tv, loss)?;
        total += g.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn maybe_augment(
    pair: &(ImageGrid, ImageGrid),
    tc: &TrainConfig,
    sample_index: u64,
) -> Result<(ImageGrid, ImageGrid), TranslatorError> {
    if !tc.augment {
        return Ok(pair.clone());
    }
    let spec = sample_transform(tc.seed, sample_index);
    augment_pair(&pair.0, &pair.1, &spec).map_err(|e| TranslatorError::Shape(e.to_string()))
}

/// Paired LE→DES training with Adam; returns the parameters with the best
/// validation loss (or the final ones when `val` is empty).
pub fn train_translator(
    train: &[(ImageGrid, ImageGrid)],
    val: &[(ImageGrid, ImageGrid)],
    cfg: &UNetConfig,
    tc: &TrainConfig,
) -> Result<(ParamSet<f32>, TrainHistory), TranslatorError> {
    cfg.validate()?;
    tc.validate()?;
    if train.is_empty() {
        return Err(TranslatorError::Config("at least one training pair is required".into()));
    }
    let (w, h) = uniform_dims(train, "training")?;
    if !val.is_empty() {
        uniform_dims(val, "validation")?;
    }
    check_input(cfg, &Tensor::<f32>::zeros(vec![1, cfg.in_channels, h, w]))?;

    let mut params = init_params(cfg, tc.seed);
    let mut state = AdamState::new(&params);
    let initial_train_loss = dataset_loss(&params, cfg, train, tc.loss, tc.batch_size)?;
    let mut best: Option<(f64, usize, ParamSet<f32>)> = None;
    let mut records = Vec::with_capacity(tc.epochs);
    let mut step: u64 = 0;
    let diverged = |epoch: usize| move |e: GraphError| TranslatorError::Divergence { epoch, source: e };

    for epoch in 0..tc.epochs {
        let order = shuffled(train.len(), tc.seed, epoch);
        let mut sum = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let batch = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| maybe_augment(&train[i], tc, step * tc.batch_size as u64 + k as u64))
                .collect::<Result<Vec<_>, _>>()?;
            let (x, t) = batch_tensors(&batch);
            let mut g = Graph::new();
            let vars = params.to_graph(&mut g).map_err(diverged(epoch))?;
            let xv = g.leaf(x, "input").map_err(diverged(epoch))?;
            let tv = g.leaf(t, "target").map_err(diverged(epoch))?;
            let y = unet_graph(&mut g, &vars, cfg, xv, Mode::Train, derive_seed(tc.seed, 1, step))
                .map_err(diverged(epoch))?;
            let l = loss_value(&mut g, y, tv, tc.loss).map_err(diverged(epoch))?;
            sum += g.value(l).item() as f64 * idx.len() as f64;
            let grads = params.grads_from(&g.backward(l), &vars);
            adam_step(&mut params, &grads, &mut state, tc.lr)?;
            step += 1;
        }
        params.check_finite().map_err(|_| TranslatorError::Divergence {
            epoch,
            source: GraphError::NonFinite {
                op: "adam",
                label: "parameters".into(),
            },
        })?;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(dataset_loss(&params, cfg, val, tc.loss, tc.batch_size)?)
        };
        if let Some(v) = val_loss {
            if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                best = Some((v, epoch, params.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
            best_val_loss: best.as_ref().map(|(b, _, _)| *b),
        });
    }

    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, tc.epochs - 1),
    };
    let final_train_loss = dataset_loss(&params, cfg, train, tc.loss, tc.batch_size)?;
    Ok((
        params,
        TrainHistory {
            initial_train_loss,
            final_train_loss,
            best_epoch,
            epochs: records,
        },
    ))
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads `img` on the right and bottom to multiples of `d`.
pub fn pad_reflect(img: &ImageGrid, d: usize) -> ImageGrid {
    let (w, h) = img.dims();
    let pw = w.div_ceil(d) * d;
    let ph = h.div_ceil(d) * d;
    ImageGrid::from_fn(pw, ph, |x, y| img.get(reflect(x as isize, w), reflect(y as isize, h)))
}

/// Virtual DES for one LE image.
pub fn infer_translator(params: &ParamSet<f32>, cfg: &UNetConfig, le: &ImageGrid) -> Result<ImageGrid, TranslatorError> {
    cfg.validate()?;
    cfg.check_params(params)?;
    let padded = pad_reflect(le, cfg.divisor());
    let y = unet_forward(params, cfg, &grid_to_tensor(&padded), Mode::Eval, 0)?;
    let out = tensor_to_grid(&y);
    Ok(out.sub_image(0, 0, le.width(), le.height()))
}

/// One labelled sample for end-to-end training: LE crop and class index.
pub type LabelledCrop = (ImageGrid, u8);

pub const HEAD_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EndToEndModel {
    pub translator: ParamSet<f32>,
    pub head: ParamSet<f32>,
}

/// Translator and classifier trained jointly on cross-entropy alone.
pub fn train_end_to_end(
    train: &[LabelledCrop],
    cfg: &UNetConfig,
    tc: &TrainConfig,
) -> Result<(EndToEndModel, Vec<f64>), TranslatorError> {
    cfg.validate()?;
    tc.validate()?;
    if train.is_empty() {
        return Err(TranslatorError::Config("at least one training crop is required".into()));
    }
    if train.iter().any(|(_, c)| *c > 1) {
        return Err(TranslatorError::Config("class indices must be 0 or 1".into()));
    }
    let mut translator = init_params(cfg, tc.seed);
    let mut head = init_classifier(HEAD_WIDTH, derive_seed(tc.seed, 2, 0));
    let mut st = AdamState::new(&translator);
    let mut sh = AdamState::new(&head);
    let mut losses = Vec::with_capacity(tc.epochs);
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        let diverged = |e: GraphError| TranslatorError::Divergence { epoch, source: e };
        let order = shuffled(train.len(), tc.seed, epoch);
        let mut sum = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let xs: Vec<_> = idx.iter().map(|&i| grid_to_tensor(&train[i].0)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].1 as usize).collect();
            let x = Tensor::stack(&xs);
            check_input(cfg, &x)?;
            let mut g = Graph::new();
            let tv = translator.to_graph(&mut g).map_err(diverged)?;
            let hv = head.to_graph(&mut g).map_err(diverged)?;
            let xv = g.leaf(x, "input").map_err(diverged)?;
            let vdes = unet_graph(&mut g, &tv, cfg, xv, Mode::Train, derive_seed(tc.seed, 3, step)).map_err(diverged)?;
            let logits = classifier_graph(&mut g, &hv, xv, vdes).map_err(diverged)?;
            let l = g.softmax_xent(logits, labels).map_err(diverged)?;
            sum += g.value(l).item() as f64 * idx.len() as f64;
            let grads = g.backward(l);
            let (gt, gh) = (translator.grads_from(&grads, &tv), head.grads_from(&grads, &hv));
            adam_step(&mut translator, &gt, &mut st, tc.lr)?;
            adam_step(&mut head, &gh, &mut sh, tc.lr)?;
            step += 1;
        }
        losses.push(sum / train.len() as f64);
    }
    Ok((EndToEndModel { translator, head }, losses))
}

/// Hard predictions and malignant-class probabilities.
pub fn predict_end_to_end(
    model: &EndToEndModel,
    cfg: &UNetConfig,
    crops: &[ImageGrid],
) -> Result<Vec<(u8, f64)>, TranslatorError> {
    let mut out = Vec::with_capacity(crops.len());
    for img in crops {
        let x = grid_to_tensor::<f32>(img);
        check_input(cfg, &x)?;
        let mut g = Graph::new();
        let tv = model.translator.to_graph(&mut g)?;
        let hv = model.head.to_graph(&mut g)?;
        let xv = g.leaf(x, "input")?;
        let vdes = unet_graph(&mut g, &tv, cfg, xv, Mode::Eval, 0)?;
        let logits = classifier_graph(&mut g, &hv, xv, vdes)?;
        let z = g.value(logits).data();
        let (z0, z1) = (z[0] as f64, z[1] as f64);
        let p1 = 1.0 / (1.0 + (z0 - z1).exp());
        out.push((u8::from(z1 > z0), p1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inversion_pairs(n: usize, side: usize, seed: u64) -> Vec<(ImageGrid, ImageGrid)> {
        (0..n)
            .map(|k| {
                let a = ImageGrid::from_fn(side, side, |x, y| {
                    let v = (x * 7 + y * 13 + k * 31 + seed as usize * 5) % 256;
                    v as u8
                });
                let b = ImageGrid::from_fn(side, side, |x, y| 255 - a.get(x, y));
                (a, b)
            })
            .collect()
    }

    #[test]
    fn rejects_zero_epochs_and_bad_lr() {
        let pairs = inversion_pairs(2, 8, 0);
        let cfg = UNetConfig { depth: 2, base_channels: 2, ..UNetConfig::default() };
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(matches!(train_translator(&pairs, &[], &cfg, &tc), Err(TranslatorError::Config(_))));
        let tc = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(matches!(train_translator(&pairs, &[], &cfg, &tc), Err(TranslatorError::LearningRate(_))));
        assert!(train_translator(&[], &[], &cfg, &TrainConfig::default()).is_err());
    }

    #[test]
    fn short_run_is_deterministic_and_tracks_best() {
        let train = inversion_pairs(6, 8, 1);
        let val = inversion_pairs(2, 8, 2);
        let cfg = UNetConfig { depth: 2, base_channels: 4, ..UNetConfig::default() };
        let tc = TrainConfig { epochs: 6, batch_size: 3, lr: 1e-3, seed: 4, augment: true, ..TrainConfig::default() };
        let (p1, h1) = train_translator(&train, &val, &cfg, &tc).unwrap();
        let (p2, h2) = train_translator(&train, &val, &cfg, &tc).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert_eq!(h1.epochs.len(), 6);
        let bests: Vec<f64> = h1.epochs.iter().map(|e| e.best_val_loss.unwrap()).collect();
        assert!(bests.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn trained_model_beats_untrained_on_a_held_out_crop() {
        let train = inversion_pairs(8, 16, 3);
        let (le, des) = inversion_pairs(1, 16, 9).remove(0);
        let cfg = UNetConfig { depth: 2, base_channels: 4, dropout_p: 0.0, ..UNetConfig::default() };
        let tc = TrainConfig { epochs: 40, batch_size: 4, lr: 2e-3, seed: 6, ..TrainConfig::default() };
        let (trained, _) = train_translator(&train, &[], &cfg, &tc).unwrap();
        let mae = |p: &ParamSet<f32>| {
            let out = infer_translator(p, &cfg, &le).unwrap();
            out.data().iter().zip(des.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
                / out.data().len() as f64
        };
        let (before, after) = (mae(&init_params(&cfg, tc.seed)), mae(&trained));
        assert!(after < before, "MAE {before:.2} -> {after:.2}");
    }

    #[test]
    fn zero_model_infers_mid_grey_at_any_size() {
        let cfg = UNetConfig::default();
        let params = init_params(&cfg, 0).zeros_like();
        let le = ImageGrid::from_fn(13, 7, |x, y| (x * y) as u8);
        let out = infer_translator(&params, &cfg, &le).unwrap();
        assert_eq!(out.dims(), (13, 7));
        assert!(out.data().iter().all(|&v| v == 128));
        assert_eq!(infer_translator(&params, &cfg, &le).unwrap(), out);
        let other = UNetConfig { depth: 2, ..cfg };
        assert!(matches!(infer_translator(&params, &other, &le), Err(TranslatorError::Mismatch(_))));
    }

    #[test]
    fn reflection_padding() {
        let img = ImageGrid::from_fn(3, 1, |x, _| x as u8 * 10);
        let p = pad_reflect(&img, 4);
        assert_eq!(p.dims(), (4, 4));
        assert_eq!(&p.data()[..4], &[0, 10, 20, 10]);
        assert_eq!(reflect(-1, 3), 1);
        assert_eq!(reflect(7, 3), 1);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn config_file_parses() {
        let text = r#"{"lr": 5e-4, "epochs": 3, "batch_size": 2, "seed": 9, "loss": "L1",
                       "base_channels": 4, "depth": 2, "dropout": 0.2}"#;
        let f = TrainConfigFile::from_json(text).unwrap();
        let (cfg, tc) = f.split().unwrap();
        assert_eq!(cfg.depth, 2);
        assert_eq!(tc.loss, LossKind::L1);
        assert!(tc.augment);
        let off = text.replace("0.2}", "0.2, \"augment\": false}");
        assert!(!TrainConfigFile::from_json(&off).unwrap().augment);
        assert!(TrainConfigFile::from_json(r#"{"lr": 1}"#).is_err());
    }

    #[test]
    fn end_to_end_learns_something_deterministically() {
        let crops: Vec<LabelledCrop> = (0..8)
            .map(|k| {
                let c = (k % 2) as u8;
                let img = ImageGrid::from_fn(8, 8, |x, y| if c == 1 { 200 - (x + y) as u8 } else { 30 + (x * y) as u8 });
                (img, c)
            })
            .collect();
        let cfg = UNetConfig { depth: 2, base_channels: 2, ..UNetConfig::default() };
        let tc = TrainConfig { epochs: 30, batch_size: 4, lr: 5e-3, seed: 1, ..TrainConfig::default() };
        let (m1, l1) = train_end_to_end(&crops, &cfg, &tc).unwrap();
        let (m2, l2) = train_end_to_end(&crops, &cfg, &tc).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        assert!(l1.last().unwrap() < &l1[0]);
        let imgs: Vec<_> = crops.iter().map(|(i, _)| i.clone()).collect();
        let preds = predict_end_to_end(&m1, &cfg, &imgs).unwrap();
        assert!(preds.iter().all(|(_, p)| (0.0..=1.0).contains(p)));
    }
}
