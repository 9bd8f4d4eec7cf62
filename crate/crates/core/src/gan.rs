//! CycleGAN objective: adversarial, cycle-consistency and identity terms,
//! plus a toy alternating update on small U-Nets.

use thiserror::Error;

use crate::translator::adam::{adam_step, AdamState};
use crate::translator::graph::{Graph, GraphError, Var};
use crate::translator::heads::{discriminator_graph, init_discriminator};
use crate::translator::train::derive_seed;
use crate::translator::unet::{check_input, init_params, unet_graph, Mode, UNetConfig};
use crate::translator::{ParamSet, Tensor, TranslatorError};

/// Scores are clamped into `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum GanError {
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("non-finite {0} score")]
    NonFiniteScore(&'static str),
    #[error("training diverged in {component}: {detail}")]
    Divergence { component: String, detail: String },
    #[error("learning rate must be non-negative, got {0}")]
    LearningRate(f64),
    #[error(transparent)]
    Translator(#[from] TranslatorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBatch {
    values: Vec<f64>,
}

impl ScoreBatch {
    pub fn new(values: Vec<f64>) -> Result<Self, GanError> {
        if values.is_empty() {
            return Err(GanError::EmptyBatch("score"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(GanError::NonFiniteScore("discriminator"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    samples: Vec<Tensor<f64>>,
}

impl ImageBatch {
    pub fn new(samples: Vec<Tensor<f64>>) -> Result<Self, GanError> {
        let Some(first) = samples.first() else {
            return Err(GanError::EmptyBatch("image"));
        };
        if samples.iter().any(|s| s.shape() != first.shape()) {
            return Err(GanError::ShapeMismatch("batch members differ in shape".into()));
        }
        Ok(Self { samples })
    }

    /// Splits an NCHW tensor into its samples.
    pub fn from_nchw(t: &Tensor<f64>) -> Self {
        let n = t.dims4().0;
        Self {
            samples: (0..n).map(|i| t.sample(i)).collect(),
        }
    }

    pub fn samples(&self) -> &[Tensor<f64>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 5.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, GanError> {
        for (name, value) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(value >= 0.0) {
                return Err(GanError::Negative { name, value });
            }
        }
        Ok(Self { lambda1, lambda2 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_f: f64,
    pub cyc: f64,
    pub id: f64,
    pub total: f64,
}

pub fn clamp_score(v: f64) -> f64 {
    v.clamp(EPS, 1.0 - EPS)
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len() as f64;
    it.sum::<f64>() / n
}

/// `mean(ln D(real)) + mean(ln(1 - D(fake)))`.
pub fn gan_loss(d_real: &ScoreBatch, d_fake: &ScoreBatch) -> f64 {
    mean(d_real.values.iter().map(|&v| clamp_score(v).ln())) + mean(d_fake.values.iter().map(|&v| (1.0 - clamp_score(v)).ln()))
}

/// Mean over samples of the per-pixel mean absolute difference.
fn batch_l1(a: &ImageBatch, b: &ImageBatch) -> Result<f64, GanError> {
    if a.len() != b.len() {
        return Err(GanError::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    let mut per_sample = Vec::with_capacity(a.len());
    for (s, t) in a.samples.iter().zip(&b.samples) {
        if s.shape() != t.shape() {
            return Err(GanError::ShapeMismatch(format!("{:?} vs {:?}", s.shape(), t.shape())));
        }
        let sum: f64 = s.data().iter().zip(t.data()).map(|(u, v)| (u - v).abs()).sum();
        per_sample.push(sum / s.len() as f64);
    }
    Ok(mean(per_sample.into_iter()))
}

/// `‖F(G(x)) − x‖₁ + ‖G(F(y)) − y‖₁`, both as batch means.
pub fn cycle_loss(x: &ImageBatch, fgx: &ImageBatch, y: &ImageBatch, gfy: &ImageBatch) -> Result<f64, GanError> {
    Ok(batch_l1(fgx, x)? + batch_l1(gfy, y)?)
}

/// `‖F(x) − x‖₁ + ‖G(y) − y‖₁`, both as batch means.
pub fn identity_loss(x: &ImageBatch, fx: &ImageBatch, y: &ImageBatch, gy: &ImageBatch) -> Result<f64, GanError> {
    Ok(batch_l1(fx, x)? + batch_l1(gy, y)?)
}

pub fn total_loss(gan_g: f64, gan_f: f64, cyc: f64, id: f64, w: LossWeights) -> Result<LossReport, GanError> {
    if !(cyc >= 0.0) {
        return Err(GanError::Negative { name: "cyc", value: cyc });
    }
    if !(id >= 0.0) {
        return Err(GanError::Negative { name: "id", value: id });
    }
    Ok(LossReport {
        gan_g,
        gan_f,
        cyc,
        id,
        total: gan_g + gan_f + w.lambda1 * cyc + w.lambda2 * id,
    })
}

/// Generators `G: X → Y`, `F: Y → X` and discriminators for both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGan {
    pub cfg: UNetConfig,
    pub g: ParamSet<f32>,
    pub f: ParamSet<f32>,
    pub d_x: ParamSet<f32>,
    pub d_y: ParamSet<f32>,
    adam: [AdamState<f32>; 4],
    pub step: u64,
}

pub const DISC_WIDTH: usize = 4;

impl CycleGan {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self, GanError> {
        cfg.validate()?;
        let g = init_params(&cfg, derive_seed(seed, 10, 0));
        let f = init_params(&cfg, derive_seed(seed, 10, 1));
        let d_x = init_discriminator(DISC_WIDTH, derive_seed(seed, 10, 2));
        let d_y = init_discriminator(DISC_WIDTH, derive_seed(seed, 10, 3));
        let adam = [AdamState::new(&g), AdamState::new(&f), AdamState::new(&d_x), AdamState::new(&d_y)];
        Ok(Self { cfg, g, f, d_x, d_y, adam, step: 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyStepOptions {
    pub lr: f64,
    pub weights: LossWeights,
    /// Generators maximise `ln D(G(x))` instead of minimising `ln(1 - D(G(x)))`.
    pub non_saturating: bool,
    pub seed: u64,
}

impl Default for ToyStepOptions {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weights: LossWeights::default(),
            non_saturating: false,
            seed: 0,
        }
    }
}

fn diverged(component: &str) -> impl Fn(GraphError) -> GanError + '_ {
    move |e| GanError::Divergence {
        component: component.to_string(),
        detail: e.to_string(),
    }
}

fn scores(g: &Graph<f32>, v: Var) -> Result<ScoreBatch, GanError> {
    ScoreBatch::new(g.value(v).data().iter().map(|&s| s as f64).collect())
}

fn images(g: &Graph<f32>, v: Var) -> ImageBatch {
    ImageBatch::from_nchw(&g.value(v).cast())
}

/// Discriminator objective, negated for descent: `-(mean ln D(real) + mean ln(1 - D(fake)))`.
fn disc_grads(
    params: &ParamSet<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    component: &str,
) -> Result<ParamSet<f32>, GanError> {
    let err = diverged(component);
    let mut g = Graph::new();
    let vars = params.to_graph(&mut g).map_err(&err)?;
    let r = g.leaf(real.clone(), "real").map_err(&err)?;
    let f = g.leaf(fake.clone(), "fake").map_err(&err)?;
    let dr = discriminator_graph(&mut g, &vars, r).map_err(&err)?;
    let df = discriminator_graph(&mut g, &vars, f).map_err(&err)?;
    let a = g.mean_log(dr, false, EPS).map_err(&err)?;
    let b = g.mean_log(df, true, EPS).map_err(&err)?;
    let s = g.add(a, b).map_err(&err)?;
    let loss = g.scale(s, -1.0).map_err(&err)?;
    Ok(params.grads_from(&g.backward(loss), &vars))
}

/// One alternating update. Returns the loss report of the parameters
/// before the update. `lr = 0` leaves every parameter untouched.
pub fn cyclegan_toy_step(
    model: &mut CycleGan,
    batch_x: &Tensor<f32>,
    batch_y: &Tensor<f32>,
    opts: &ToyStepOptions,
) -> Result<LossReport, GanError> {
    if !(opts.lr >= 0.0) || !opts.lr.is_finite() {
        return Err(GanError::LearningRate(opts.lr));
    }
    if batch_x.shape() != batch_y.shape() {
        return Err(GanError::ShapeMismatch(format!("{:?} vs {:?}", batch_x.shape(), batch_y.shape())));
    }
    check_input(&model.cfg, batch_x)?;
    let cfg = model.cfg.clone();
    let seed = |k: u64| derive_seed(opts.seed, 20 + k, model.step);
    let err = diverged("generators");

    let mut g = Graph::new();
    let gv = model.g.to_graph(&mut g).map_err(&err)?;
    let fv = model.f.to_graph(&mut g).map_err(&err)?;
    let dxv = model.d_x.to_graph(&mut g).map_err(&err)?;
    let dyv = model.d_y.to_graph(&mut g).map_err(&err)?;
    let x = g.leaf(batch_x.clone(), "x").map_err(&err)?;
    let y = g.leaf(batch_y.clone(), "y").map_err(&err)?;
    let run = |g: &mut Graph<f32>, params: &[Var], input: Var, k: u64| unet_graph(g, params, &cfg, input, Mode::Train, seed(k));
    let gx = run(&mut g, &gv, x, 0).map_err(&err)?;
    let fy = run(&mut g, &fv, y, 1).map_err(&err)?;
    let fgx = run(&mut g, &fv, gx, 2).map_err(&err)?;
    let gfy = run(&mut g, &gv, fy, 3).map_err(&err)?;
    let fx = run(&mut g, &fv, x, 4).map_err(&err)?;
    let gy = run(&mut g, &gv, y, 5).map_err(&err)?;
    let dy_real = discriminator_graph(&mut g, &dyv, y).map_err(&err)?;
    let dy_fake = discriminator_graph(&mut g, &dyv, gx).map_err(&err)?;
    let dx_real = discriminator_graph(&mut g, &dxv, x).map_err(&err)?;
    let dx_fake = discriminator_graph(&mut g, &dxv, fy).map_err(&err)?;

    let xb = ImageBatch::from_nchw(&batch_x.cast());
    let yb = ImageBatch::from_nchw(&batch_y.cast());
    let report = total_loss(
        gan_loss(&scores(&g, dy_real)?, &scores(&g, dy_fake)?),
        gan_loss(&scores(&g, dx_real)?, &scores(&g, dx_fake)?),
        cycle_loss(&xb, &images(&g, fgx), &yb, &images(&g, gfy))?,
        identity_loss(&xb, &images(&g, fx), &yb, &images(&g, gy))?,
        opts.weights,
    )?;
    for (name, v) in [("gan_g", report.gan_g), ("gan_f", report.gan_f), ("cyc", report.cyc), ("id", report.id)] {
        if !v.is_finite() {
            return Err(GanError::Divergence {
                component: name.into(),
                detail: format!("loss is {v}"),
            });
        }
    }

    // Generator objective; the real-score terms are constant for G and F.
    let adv = |g: &mut Graph<f32>, fake: Var| -> Result<Var, GraphError> {
        if opts.non_saturating {
            let l = g.mean_log(fake, false, EPS)?;
            g.scale(l, -1.0)
        } else {
            g.mean_log(fake, true, EPS)
        }
    };
    let adv_g = adv(&mut g, dy_fake).map_err(&err)?;
    let adv_f = adv(&mut g, dx_fake).map_err(&err)?;
    let c1 = g.l1(fgx, x).map_err(&err)?;
    let c2 = g.l1(gfy, y).map_err(&err)?;
    let i1 = g.l1(fx, x).map_err(&err)?;
    let i2 = g.l1(gy, y).map_err(&err)?;
    let cyc = g.add(c1, c2).map_err(&err)?;
    let id = g.add(i1, i2).map_err(&err)?;
    let cyc = g.scale(cyc, opts.weights.lambda1 as f32).map_err(&err)?;
    let id = g.scale(id, opts.weights.lambda2 as f32).map_err(&err)?;
    let adv_sum = g.add(adv_g, adv_f).map_err(&err)?;
    let rec = g.add(cyc, id).map_err(&err)?;
    let gen_loss = g.add(adv_sum, rec).map_err(&err)?;
    let grads = g.backward(gen_loss);
    let grad_g = model.g.grads_from(&grads, &gv);
    let grad_f = model.f.grads_from(&grads, &fv);

    let grad_dy = disc_grads(&model.d_y, batch_y, g.value(gx), "discriminator D_Y")?;
    let grad_dx = disc_grads(&model.d_x, batch_x, g.value(fy), "discriminator D_X")?;

    if opts.lr > 0.0 {
        let [ag, af, adx, ady] = &mut model.adam;
        adam_step(&mut model.g, &grad_g, ag, opts.lr)?;
        adam_step(&mut model.f, &grad_f, af, opts.lr)?;
        adam_step(&mut model.d_x, &grad_dx, adx, opts.lr)?;
        adam_step(&mut model.d_y, &grad_dy, ady, opts.lr)?;
        for (name, p) in [("G", &model.g), ("F", &model.f), ("D_X", &model.d_x), ("D_Y", &model.d_y)] {
            if p.check_finite().is_err() {
                return Err(GanError::Divergence {
                    component: name.into(),
                    detail: "non-finite parameters after update".into(),
                });
            }
        }
    }
    model.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sb(v: &[f64]) -> ScoreBatch {
        ScoreBatch::new(v.to_vec()).unwrap()
    }

    fn ib(samples: Vec<Vec<f64>>, h: usize, w: usize) -> ImageBatch {
        ImageBatch::new(samples.into_iter().map(|d| Tensor::new(vec![1, 1, h, w], d)).collect()).unwrap()
    }

    #[test]
    fn gan_loss_examples() {
        assert!((gan_loss(&sb(&[0.5, 0.5]), &sb(&[0.5])) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let perfect = gan_loss(&sb(&[1.0]), &sb(&[0.0]));
        assert!(perfect <= 0.0 && perfect > -1e-6);
        let v = gan_loss(&sb(&[0.9, 0.8]), &sb(&[0.3, 0.1]));
        let want = (0.9f64.ln() + 0.8f64.ln()) / 2.0 + (0.7f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((v - want).abs() < 1e-15);
        assert!((v + 0.395270).abs() < 1e-6);
        assert!(ScoreBatch::new(vec![]).is_err());
    }

    #[test]
    fn cycle_and_identity_examples() {
        let x = ib(vec![vec![0.0; 4]], 2, 2);
        let ones = ib(vec![vec![1.0; 4]], 2, 2);
        assert_eq!(cycle_loss(&x, &x, &ones, &ones).unwrap(), 0.0);
        assert_eq!(cycle_loss(&x, &ones, &x, &x).unwrap(), 1.0);
        let half = ib(vec![vec![0.5; 4]], 2, 2);
        assert_eq!(identity_loss(&x, &x, &x, &half).unwrap(), 0.5);
        let other = ib(vec![vec![0.0; 6]], 2, 3);
        assert!(matches!(cycle_loss(&x, &other, &x, &x), Err(GanError::ShapeMismatch(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_batch = || ib((0..2).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect(), 2, 2);
        let (a, b, c, d) = (rand_batch(), rand_batch(), rand_batch(), rand_batch());
        let mut oracle = 0.0;
        for (p, q) in [(&b, &a), (&d, &c)] {
            let mut s = 0.0;
            for k in 0..2 {
                for j in 0..4 {
                    s += (p.samples()[k].data()[j] - q.samples()[k].data()[j]).abs();
                }
            }
            oracle += s / 8.0;
        }
        assert!((cycle_loss(&a, &b, &c, &d).unwrap() - oracle).abs() < 1e-12);
        assert!((identity_loss(&a, &b, &c, &d).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let r = total_loss(-1.386294, -1.386294, 0.2, 0.1, w).unwrap();
        assert!((r.total + 0.272588).abs() < 1e-9);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, w).unwrap().total, 0.0);
        let r = total_loss(-0.3, -0.4, 0.7, 0.9, LossWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(r.total, -0.3 + -0.4);
        assert!(total_loss(0.0, 0.0, -0.1, 0.0, w).is_err());
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn gan_loss_bounds_and_monotonicity(
            real in prop::collection::vec(0.0f64..=1.0, 1..6),
            fake in prop::collection::vec(0.0f64..=1.0, 1..6),
            bump in 0.01f64..0.2,
        ) {
            let v = gan_loss(&sb(&real), &sb(&fake));
            prop_assert!(v >= 2.0 * EPS.ln() - 1e-12 && v <= 2.0 * (1.0 - EPS).ln() + 1e-12);
            let mut r2 = real.clone();
            r2[0] = (r2[0] + bump).min(1.0);
            prop_assert!(gan_loss(&sb(&r2), &sb(&fake)) >= v);
            let mut f2 = fake.clone();
            f2[0] = (f2[0] + bump).min(1.0);
            prop_assert!(gan_loss(&sb(&real), &sb(&f2)) <= v);
        }

        #[test]
        fn l1_terms_symmetric_in_order(data in prop::collection::vec(0.0f64..1.0, 16)) {
            let a = ib(vec![data[0..4].to_vec(), data[4..8].to_vec()], 2, 2);
            let b = ib(vec![data[8..12].to_vec(), data[12..16].to_vec()], 2, 2);
            let ra = ib(vec![data[4..8].to_vec(), data[0..4].to_vec()], 2, 2);
            let rb = ib(vec![data[12..16].to_vec(), data[8..12].to_vec()], 2, 2);
            let v = cycle_loss(&a, &b, &a, &a).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((v - cycle_loss(&ra, &rb, &ra, &ra).unwrap()).abs() < 1e-12);
            prop_assert_eq!(v == 0.0, a == b);
        }
    }

    fn toy_batches(n: usize, side: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f32> = (0..n * side * side).map(|_| rng.gen_range(0.1..0.9)).collect();
        let ys = xs.iter().map(|v| 1.0 - v).collect();
        (Tensor::new(vec![n, 1, side, side], xs), Tensor::new(vec![n, 1, side, side], ys))
    }

    fn toy_cfg() -> UNetConfig {
        UNetConfig { base_channels: 4, depth: 2, ..UNetConfig::default() }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = CycleGan::new(toy_cfg(), 3).unwrap();
        let before = m.clone();
        let (x, y) = toy_batches(2, 8, 1);
        let r = cyclegan_toy_step(&mut m, &x, &y, &ToyStepOptions { lr: 0.0, ..Default::default() }).unwrap();
        assert!(r.total.is_finite());
        assert_eq!((m.g.clone(), m.f.clone(), m.d_x.clone(), m.d_y.clone()), (before.g, before.f, before.d_x, before.d_y));
        assert!(cyclegan_toy_step(&mut m, &x, &y, &ToyStepOptions { lr: -1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn report_satisfies_identity_and_is_deterministic() {
        let (x, y) = toy_batches(2, 8, 5);
        let opts = ToyStepOptions { lr: 1e-3, seed: 4, ..Default::default() };
        let mut a = CycleGan::new(toy_cfg(), 8).unwrap();
        let mut b = CycleGan::new(toy_cfg(), 8).unwrap();
        for _ in 0..3 {
            let ra = cyclegan_toy_step(&mut a, &x, &y, &opts).unwrap();
            let rb = cyclegan_toy_step(&mut b, &x, &y, &opts).unwrap();
            assert_eq!(ra, rb);
            let w = opts.weights;
            assert!((ra.total - (ra.gan_g + ra.gan_f + w.lambda1 * ra.cyc + w.lambda2 * ra.id)).abs() < 1e-12);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn saturated_discriminator_stays_finite() {
        let mut m = CycleGan::new(toy_cfg(), 2).unwrap();
        for t in m.d_y.tensors_mut().chain(m.d_x.tensors_mut()) {
            for v in t.data_mut() {
                *v = 50.0;
            }
        }
        let (x, y) = toy_batches(2, 8, 3);
        for ns in [false, true] {
            let r = cyclegan_toy_step(&mut m, &x, &y, &ToyStepOptions { non_saturating: ns, ..Default::default() }).unwrap();
            assert!(r.gan_g.is_finite() && r.gan_f.is_finite());
        }
    }

    #[test]
    fn cycle_term_decreases_on_inversion_task() {
        let (x, y) = toy_batches(8, 8, 11);
        let mut m = CycleGan::new(toy_cfg(), 6).unwrap();
        let opts = ToyStepOptions { lr: 2e-3, seed: 1, ..Default::default() };
        let reports: Vec<LossReport> = (0..20).map(|_| cyclegan_toy_step(&mut m, &x, &y, &opts).unwrap()).collect();
        assert!(reports[19].cyc < reports[0].cyc, "{} -> {}", reports[0].cyc, reports[19].cyc);
    }
}
