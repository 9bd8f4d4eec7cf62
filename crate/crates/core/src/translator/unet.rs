//! U-Net generator: conv encoder, nearest-neighbour decoder, skip concatenation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, GraphError, Var};
use super::kernels::ConvGeometry;
use super::tensor::{Real, Tensor};
use super::{ParamSet, TranslatorError};

pub const SAME3: ConvGeometry = ConvGeometry { stride: 1, pad: 1 };
pub const POINT: ConvGeometry = ConvGeometry { stride: 1, pad: 0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_p: f64,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 3,
            dropout_p: 0.2,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), TranslatorError> {
        let bad = |m: String| Err(TranslatorError::Config(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if !(2..=7).contains(&self.depth) {
            return bad(format!("depth must be in 2..=7, got {}", self.depth));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout_p));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Parameter names and shapes in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, co: usize, ci: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![co, ci, k, k]));
            out.push((format!("{name}.bias"), vec![co]));
        };
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            let c = self.channels(l);
            conv(format!("enc{l}.conv1"), c, prev, 3);
            conv(format!("enc{l}.conv2"), c, c, 3);
            prev = c;
        }
        for l in (0..self.depth - 1).rev() {
            let c = self.channels(l);
            conv(format!("dec{l}.up"), c, self.channels(l + 1), 3);
            conv(format!("dec{l}.conv1"), c, 2 * c, 3);
            conv(format!("dec{l}.conv2"), c, c, 3);
        }
        conv("out".into(), self.out_channels, self.base_channels, 1);
        out
    }

    /// Checks that `params` has exactly the names and shapes this config needs.
    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<(), TranslatorError> {
        let want = self.param_shapes();
        if want.len() != params.len() {
            return Err(TranslatorError::Mismatch(format!(
                "expected {} tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((wn, ws), (n, t)) in want.iter().zip(params.entries()) {
            if wn != n || ws.as_slice() != t.shape() {
                return Err(TranslatorError::Mismatch(format!(
                    "expected {wn} {ws:?}, found {n} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Glorot-uniform weights, zero biases.
pub fn glorot_params(shapes: &[(String, Vec<usize>)], seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = shapes
        .iter()
        .map(|(name, shape)| {
            let t = if shape.len() == 4 {
                let rf = shape[2] * shape[3];
                let limit = (6.0 / ((shape[0] + shape[1]) * rf) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect();
                Tensor::new(shape.clone(), data)
            } else {
                Tensor::zeros(shape.clone())
            };
            (name.clone(), t)
        })
        .collect();
    ParamSet::new(entries)
}

pub fn init_params(cfg: &UNetConfig, seed: u64) -> ParamSet<f32> {
    glorot_params(&cfg.param_shapes(), seed)
}

/// Pulls consecutive (weight, bias) pairs off the parameter list.
pub(crate) struct Layers<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Layers<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> (Var, Var) {
        let pair = (self.vars[self.pos], self.vars[self.pos + 1]);
        self.pos += 2;
        pair
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.vars.len()
    }
}

fn conv_relu<T: Real>(g: &mut Graph<T>, x: Var, wb: (Var, Var), geom: ConvGeometry, label: &str) -> Result<Var, GraphError> {
    let y = g.conv2d(x, wb.0, wb.1, geom, label)?;
    g.relu(y)
}

/// Records the network on `g`; `vars` come from `ParamSet::to_graph`.
pub fn unet_graph<T: Real>(
    g: &mut Graph<T>,
    vars: &[Var],
    cfg: &UNetConfig,
    input: Var,
    mode: Mode,
    seed: u64,
) -> Result<Var, GraphError> {
    let mut layers = Layers::new(vars);
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for l in 0..cfg.depth {
        if l > 0 {
            x = g.maxpool2(x)?;
        }
        x = conv_relu(g, x, layers.next(), SAME3, &format!("enc{l}.conv1"))?;
        x = conv_relu(g, x, layers.next(), SAME3, &format!("enc{l}.conv2"))?;
        skips.push(x);
    }
    if mode == Mode::Train {
        x = g.dropout(x, cfg.dropout_p, seed)?;
    }
    for l in (0..cfg.depth - 1).rev() {
        let up = g.upsample2(x)?;
        let up = conv_relu(g, up, layers.next(), SAME3, &format!("dec{l}.up"))?;
        let cat = g.concat(skips[l], up)?;
        x = conv_relu(g, cat, layers.next(), SAME3, &format!("dec{l}.conv1"))?;
        x = conv_relu(g, x, layers.next(), SAME3, &format!("dec{l}.conv2"))?;
    }
    let (w, b) = layers.next();
    let logits = g.conv2d(x, w, b, POINT, "out")?;
    debug_assert!(layers.done());
    g.sigmoid(logits)
}

pub(crate) fn check_input<T: Real>(cfg: &UNetConfig, input: &Tensor<T>) -> Result<(), TranslatorError> {
    if input.shape().len() != 4 {
        return Err(TranslatorError::Shape(format!("expected NCHW input, got {:?}", input.shape())));
    }
    let (_, c, h, w) = input.dims4();
    if c != cfg.in_channels {
        return Err(TranslatorError::Shape(format!("expected {} input channels, got {c}", cfg.in_channels)));
    }
    let d = cfg.divisor();
    if h % d != 0 || w % d != 0 {
        return Err(TranslatorError::Shape(format!("{h}x{w} is not divisible by {d}")));
    }
    Ok(())
}

pub fn unet_forward<T: Real>(
    params: &ParamSet<T>,
    cfg: &UNetConfig,
    input: &Tensor<T>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>, TranslatorError> {
    cfg.validate()?;
    cfg.check_params(params)?;
    params.check_finite()?;
    check_input(cfg, input)?;
    let mut g = Graph::new();
    let vars = params.to_graph(&mut g)?;
    let x = g.leaf(input.clone(), "input")?;
    let y = unet_graph(&mut g, &vars, cfg, x, mode, seed)?;
    Ok(g.value(y).clone())
}

/// Loss and per-parameter gradients for one batch (train mode).
pub fn loss_and_grads<T: Real>(
    params: &ParamSet<T>,
    cfg: &UNetConfig,
    input: &Tensor<T>,
    target: &Tensor<T>,
    loss: super::LossKind,
    seed: u64,
) -> Result<(T, ParamSet<T>), TranslatorError> {
    cfg.validate()?;
    cfg.check_params(params)?;
    check_input(cfg, input)?;
    if input.shape() != target.shape() {
        return Err(TranslatorError::Shape(format!(
            "target {:?} does not match output {:?}",
            target.shape(),
            input.shape()
        )));
    }
    let mut g = Graph::new();
    let vars = params.to_graph(&mut g)?;
    let x = g.leaf(input.clone(), "input")?;
    let t = g.leaf(target.clone(), "target")?;
    let y = unet_graph(&mut g, &vars, cfg, x, Mode::Train, seed)?;
    let l = match loss {
        super::LossKind::L1 => g.l1(y, t)?,
        super::LossKind::L2 => g.l2(y, t)?,
    };
    let grads = g.backward(l);
    Ok((g.value(l).item(), params.grads_from(&grads, &vars)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translator::LossKind;

    fn random_input(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f32>()).collect())
    }

    #[test]
    fn zero_weights_give_half() {
        let cfg = UNetConfig::default();
        let params = init_params(&cfg, 0).zeros_like();
        let y = unet_forward(&params, &cfg, &random_input(vec![1, 1, 16, 16], 1), Mode::Eval, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = UNetConfig::default();
        let params = init_params(&cfg, 3);
        let input = random_input(vec![2, 1, 32, 32], 4);
        let mut g = Graph::new();
        let vars = params.to_graph(&mut g).unwrap();
        let x = g.leaf(input.clone(), "input").unwrap();
        let y = unet_graph(&mut g, &vars, &cfg, x, Mode::Eval, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1, 32, 32]);
        let bottleneck = (0..g.len())
            .map(|i| g.value(Var::test_new(i)).shape().to_vec())
            .find(|s| s == &[2, 32, 8, 8]);
        assert!(bottleneck.is_some());

        for depth in 2..=4 {
            for base in [4, 8] {
                let cfg = UNetConfig { depth, base_channels: base, ..UNetConfig::default() };
                let p = init_params(&cfg, 1);
                let side = 2 * cfg.divisor();
                let y = unet_forward(&p, &cfg, &random_input(vec![1, 1, side, side], 2), Mode::Train, 5).unwrap();
                assert_eq!(y.shape(), &[1, 1, side, side]);
                assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_depends_on_seed() {
        let cfg = UNetConfig::default();
        let params = init_params(&cfg, 9);
        let x = random_input(vec![1, 1, 16, 16], 2);
        let a = unet_forward(&params, &cfg, &x, Mode::Eval, 0).unwrap();
        let b = unet_forward(&params, &cfg, &x, Mode::Eval, 77).unwrap();
        assert_eq!(a, b);
        let t1 = unet_forward(&params, &cfg, &x, Mode::Train, 1).unwrap();
        let t2 = unet_forward(&params, &cfg, &x, Mode::Train, 1).unwrap();
        let t3 = unet_forward(&params, &cfg, &x, Mode::Train, 2).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = UNetConfig::default();
        let params = init_params(&cfg, 0);
        assert!(matches!(
            unet_forward(&params, &cfg, &random_input(vec![1, 1, 10, 12], 0), Mode::Eval, 0),
            Err(TranslatorError::Shape(_))
        ));
        let mut bad = params.clone();
        bad.tensors_mut().nth(3).unwrap().data_mut()[0] = f32::NAN;
        assert!(matches!(
            unet_forward(&bad, &cfg, &random_input(vec![1, 1, 8, 8], 0), Mode::Eval, 0),
            Err(TranslatorError::NonFiniteParam(_))
        ));
        let other = init_params(&UNetConfig { base_channels: 4, ..cfg.clone() }, 0);
        assert!(matches!(
            unet_forward(&other, &cfg, &random_input(vec![1, 1, 8, 8], 0), Mode::Eval, 0),
            Err(TranslatorError::Mismatch(_))
        ));
        assert!(UNetConfig { depth: 1, ..cfg.clone() }.validate().is_err());
        assert!(UNetConfig { dropout_p: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn glorot_bounds() {
        let cfg = UNetConfig::default();
        let p = init_params(&cfg, 11);
        for (name, t) in p.entries() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let s = t.shape();
                let limit = (6.0 / ((s[0] + s[1]) * s[2] * s[3]) as f64).sqrt() as f32;
                assert!(t.data().iter().all(|&v| v.abs() <= limit));
            }
        }
    }

    #[test]
    fn self_target_has_zero_l2_gradient() {
        let cfg = UNetConfig { dropout_p: 0.0, depth: 2, base_channels: 4, ..UNetConfig::default() };
        let params = init_params(&cfg, 5).cast::<f64>();
        let x = random_input(vec![2, 1, 8, 8], 6).cast::<f64>();
        let y = unet_forward(&params, &cfg, &x, Mode::Eval, 0).unwrap();
        let (loss, grads) = loss_and_grads(&params, &cfg, &x, &y, LossKind::L2, 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let cfg = UNetConfig { dropout_p: 0.0, depth: 2, base_channels: 4, ..UNetConfig::default() };
        let params = init_params(&cfg, 5).cast::<f64>();
        let x = random_input(vec![1, 1, 8, 8], 6).cast::<f64>();
        let t = random_input(vec![1, 1, 8, 8], 7).cast::<f64>();
        let (l1, g1) = loss_and_grads(&params, &cfg, &x, &t, LossKind::L2, 0).unwrap();
        let x2 = Tensor::stack(&[x.clone(), x]);
        let t2 = Tensor::stack(&[t.clone(), t]);
        let (l2, g2) = loss_and_grads(&params, &cfg, &x2, &t2, LossKind::L2, 0).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.tensors().zip(g2.tensors()) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }
}
