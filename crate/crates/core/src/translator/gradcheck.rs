//! Finite-difference verification of every differentiable op.
//!
//! Each trial draws fresh inputs, reduces the op output to a scalar with a
//! random dot product and compares the analytic gradient of every checked
//! coordinate with a central difference. Perturbations that move a
//! piecewise-linear op across a kink are skipped and counted.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, GraphError, Var};
use super::heads::{classifier_graph, classifier_shapes, discriminator_graph, discriminator_shapes, DOWN3};
use super::kernels::ConvGeometry;
use super::tensor::Tensor;
use super::unet::{glorot_params, unet_graph, Mode, UNetConfig, POINT, SAME3};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the relative-error denominator, so that gradients that are
/// zero up to rounding are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GraphError>;

struct Eval {
    value: f64,
    grads: Vec<Tensor<f64>>,
    signature: Vec<u64>,
}

fn evaluate(inputs: &[Tensor<f64>], build: &Build, weights: Option<&Tensor<f64>>, want_grads: bool) -> Result<(Eval, Vec<usize>), GraphError> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), &format!("input{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let scalar = match weights {
        Some(w) => g.dot(out, w.clone())?,
        None => out,
    };
    let grads = if want_grads {
        let gr = g.backward(scalar);
        vars.iter().zip(inputs).map(|(&v, t)| gr.get_or_zeros(v, t)).collect()
    } else {
        Vec::new()
    };
    let signature = g.kink_signature();
    Ok((
        Eval {
            value: if g.value(scalar).len() == 1 { g.value(scalar).item() } else { f64::NAN },
            grads,
            signature,
        },
        shape,
    ))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values bounded away from zero: `|v|` in `[0.1, 1]`, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Distinct values spaced at least 0.05 apart, in random order.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), vals)
}

struct Case {
    name: String,
    generate: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    build: Box<Build>,
    /// Check at most this many coordinates per trial.
    max_coords: Option<usize>,
}

fn case(
    name: &str,
    generate: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GraphError> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        generate: Box::new(generate),
        build: Box::new(build),
        max_coords: None,
    }
}

fn conv_case(name: &str, x: [usize; 4], co: usize, k: usize, geom: ConvGeometry) -> Case {
    case(
        name,
        move |r| {
            vec![
                uniform(r, &x, -1.0, 1.0),
                uniform(r, &[co, x[1], k, k], -1.0, 1.0),
                uniform(r, &[co], -1.0, 1.0),
            ]
        },
        move |g, v| g.conv2d(v[0], v[1], v[2], geom, "conv"),
    )
}

fn cases() -> Vec<Case> {
    let mut out = vec![
        conv_case("conv3x3", [2, 3, 5, 5], 4, 3, SAME3),
        conv_case("conv3x3_stride2", [1, 2, 7, 6], 3, 3, DOWN3),
        conv_case("conv1x1", [2, 3, 4, 4], 2, 1, POINT),
        case("relu", |r| vec![away_from_zero(r, &[2, 2, 4, 4])], |g, v| g.relu(v[0])),
        case("sigmoid", |r| vec![uniform(r, &[2, 2, 3, 3], -3.0, 3.0)], |g, v| g.sigmoid(v[0])),
        case("maxpool2", |r| vec![well_separated(r, &[1, 2, 6, 6])], |g, v| g.maxpool2(v[0])),
        case("upsample2", |r| vec![uniform(r, &[1, 2, 3, 4], -1.0, 1.0)], |g, v| g.upsample2(v[0])),
        case(
            "concat",
            |r| vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            |g, v| g.concat(v[0], v[1]),
        ),
        case("dropout", |r| vec![uniform(r, &[1, 3, 4, 4], -1.0, 1.0)], |g, v| g.dropout(v[0], 0.3, 17)),
        case(
            "add",
            |r| vec![uniform(r, &[1, 2, 3, 3], -1.0, 1.0), uniform(r, &[1, 2, 3, 3], -1.0, 1.0)],
            |g, v| g.add(v[0], v[1]),
        ),
        case("scale", |r| vec![uniform(r, &[1, 2, 3, 3], -1.0, 1.0)], |g, v| g.scale(v[0], 2.5)),
        case(
            "l1_loss",
            |r| {
                let a = uniform(r, &[2, 1, 4, 4], 0.0, 1.0);
                let d = away_from_zero(r, &[2, 1, 4, 4]);
                let b = Tensor::new(a.shape().to_vec(), a.data().iter().zip(d.data()).map(|(x, y)| x + 0.5 * y).collect());
                vec![a, b]
            },
            |g, v| g.l1(v[0], v[1]),
        ),
        case(
            "l2_loss",
            |r| vec![uniform(r, &[2, 1, 4, 4], 0.0, 1.0), uniform(r, &[2, 1, 4, 4], 0.0, 1.0)],
            |g, v| g.l2(v[0], v[1]),
        ),
        case("mean_log", |r| vec![uniform(r, &[4, 1, 1, 1], 0.05, 0.95)], |g, v| g.mean_log(v[0], false, 1e-7)),
        case(
            "mean_log_complement",
            |r| vec![uniform(r, &[4, 1, 1, 1], 0.05, 0.95)],
            |g, v| g.mean_log(v[0], true, 1e-7),
        ),
        case("global_avg_pool", |r| vec![uniform(r, &[2, 3, 3, 4], -1.0, 1.0)], |g, v| g.global_avg_pool(v[0])),
        case(
            "softmax_cross_entropy",
            |r| vec![uniform(r, &[3, 4, 1, 1], -2.0, 2.0)],
            |g, v| g.softmax_xent(v[0], vec![0, 3, 1]),
        ),
    ];

    let cfg = UNetConfig {
        base_channels: 4,
        depth: 2,
        dropout_p: 0.2,
        ..UNetConfig::default()
    };
    let shapes = cfg.param_shapes();
    let np = shapes.len();
    let ucfg = cfg.clone();
    out.push(Case {
        name: "unet_l1".into(),
        generate: Box::new(move |r| {
            let mut t: Vec<Tensor<f64>> = glorot_params(&shapes, r.gen()).cast::<f64>().tensors().cloned().collect();
            for b in t.iter_mut().filter(|b| b.shape().len() == 1) {
                *b = uniform(r, b.shape(), -0.1, 0.1);
            }
            t.push(uniform(r, &[1, 1, 8, 8], 0.0, 1.0));
            t.push(uniform(r, &[1, 1, 8, 8], 0.0, 1.0));
            t
        }),
        build: Box::new(move |g, v| {
            let y = unet_graph(g, &v[..np], &ucfg, v[np], Mode::Train, 5)?;
            g.l1(y, v[np + 1])
        }),
        max_coords: Some(40),
    });

    let cshapes = classifier_shapes(3);
    let nc = cshapes.len();
    out.push(Case {
        name: "classifier_head".into(),
        generate: Box::new(move |r| {
            let mut t: Vec<Tensor<f64>> = glorot_params(&cshapes, r.gen()).cast::<f64>().tensors().cloned().collect();
            t.push(uniform(r, &[2, 1, 8, 8], 0.0, 1.0));
            t.push(uniform(r, &[2, 1, 8, 8], 0.0, 1.0));
            t
        }),
        build: Box::new(move |g, v| {
            let z = classifier_graph(g, &v[..nc], v[nc], v[nc + 1])?;
            g.softmax_xent(z, vec![1, 0])
        }),
        max_coords: Some(40),
    });

    let dshapes = discriminator_shapes(3);
    let nd = dshapes.len();
    out.push(Case {
        name: "discriminator".into(),
        generate: Box::new(move |r| {
            let mut t: Vec<Tensor<f64>> = glorot_params(&dshapes, r.gen()).cast::<f64>().tensors().cloned().collect();
            t.push(uniform(r, &[2, 1, 8, 8], 0.0, 1.0));
            t
        }),
        build: Box::new(move |g, v| discriminator_graph(g, &v[..nd], v[nd])),
        max_coords: Some(40),
    });
    out
}

pub fn case_names() -> Vec<String> {
    cases().into_iter().map(|c| c.name).collect()
}

fn run_case(c: &Case, trials: usize, seed: u64) -> Result<OpReport, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport {
        name: c.name.clone(),
        trials,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..trials {
        let inputs = (c.generate)(&mut rng);
        let (_, shape) = evaluate(&inputs, &c.build, None, false)?;
        let weights = uniform(&mut rng, &shape, -1.0, 1.0);
        let (base, _) = evaluate(&inputs, &c.build, Some(&weights), true)?;
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect();
        let chosen: Vec<(usize, usize)> = match c.max_coords {
            Some(k) if k < coords.len() => sample(&mut rng, coords.len(), k).into_iter().map(|i| coords[i]).collect(),
            _ => coords,
        };
        for (i, j) in chosen {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let (fp, _) = evaluate(&plus, &c.build, Some(&weights), false)?;
            let (fm, _) = evaluate(&minus, &c.build, Some(&weights), false)?;
            if fp.signature != base.signature || fm.signature != base.signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp.value - fm.value) / (2.0 * STEP);
            let analytic = base.grads[i].data()[j];
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Runs every case for `trials` random trials.
pub fn check_all(trials: usize, seed: u64) -> Result<Vec<OpReport>, GraphError> {
    cases()
        .iter()
        .enumerate()
        .map(|(k, c)| run_case(c, trials, seed.wrapping_add(k as u64)))
        .collect()
}
