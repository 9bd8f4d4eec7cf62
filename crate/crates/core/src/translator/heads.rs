//! Small convolutional heads: a two-class classifier and a GAN discriminator.

use super::graph::{Graph, GraphError, Var};
use super::kernels::ConvGeometry;
use super::tensor::Real;
use super::unet::{glorot_params, Layers, POINT};
use super::ParamSet;

pub const DOWN3: ConvGeometry = ConvGeometry { stride: 2, pad: 1 };

/// Classifier over `[LE, vDES]` channel stacks.
pub fn classifier_shapes(width: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.conv1.weight".into(), vec![width, 2, 3, 3]),
        ("head.conv1.bias".into(), vec![width]),
        ("head.conv2.weight".into(), vec![width, width, 3, 3]),
        ("head.conv2.bias".into(), vec![width]),
        ("head.fc.weight".into(), vec![2, width, 1, 1]),
        ("head.fc.bias".into(), vec![2]),
    ]
}

pub fn init_classifier(width: usize, seed: u64) -> ParamSet<f32> {
    glorot_params(&classifier_shapes(width), seed)
}

/// Returns `(N, 2, 1, 1)` logits.
pub fn classifier_graph<T: Real>(g: &mut Graph<T>, vars: &[Var], le: Var, vdes: Var) -> Result<Var, GraphError> {
    let mut layers = Layers::new(vars);
    let x = g.concat(le, vdes)?;
    let (w, b) = layers.next();
    let x = g.conv2d(x, w, b, DOWN3, "head.conv1")?;
    let x = g.relu(x)?;
    let (w, b) = layers.next();
    let x = g.conv2d(x, w, b, DOWN3, "head.conv2")?;
    let x = g.relu(x)?;
    let x = g.global_avg_pool(x)?;
    let (w, b) = layers.next();
    g.conv2d(x, w, b, POINT, "head.fc")
}

pub fn discriminator_shapes(width: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("disc.conv1.weight".into(), vec![width, 1, 3, 3]),
        ("disc.conv1.bias".into(), vec![width]),
        ("disc.conv2.weight".into(), vec![2 * width, width, 3, 3]),
        ("disc.conv2.bias".into(), vec![2 * width]),
        ("disc.conv3.weight".into(), vec![1, 2 * width, 3, 3]),
        ("disc.conv3.bias".into(), vec![1]),
    ]
}

pub fn init_discriminator(width: usize, seed: u64) -> ParamSet<f32> {
    glorot_params(&discriminator_shapes(width), seed)
}

/// Three strided convolutions, global average pooling and a sigmoid:
/// one score in `(0, 1)` per sample, shaped `(N, 1, 1, 1)`.
pub fn discriminator_graph<T: Real>(g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var, GraphError> {
    let mut layers = Layers::new(vars);
    let mut h = x;
    for label in ["disc.conv1", "disc.conv2"] {
        let (w, b) = layers.next();
        h = g.conv2d(h, w, b, DOWN3, label)?;
        h = g.relu(h)?;
    }
    let (w, b) = layers.next();
    h = g.conv2d(h, w, b, DOWN3, "disc.conv3")?;
    let h = g.global_avg_pool(h)?;
    g.sigmoid(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translator::Tensor;

    #[test]
    fn head_shapes() {
        let mut g = Graph::<f32>::new();
        let cp = init_classifier(4, 1);
        let vars = cp.to_graph(&mut g).unwrap();
        let le = g.leaf(Tensor::full(vec![3, 1, 16, 16], 0.3), "le").unwrap();
        let vd = g.leaf(Tensor::full(vec![3, 1, 16, 16], 0.6), "vdes").unwrap();
        let logits = classifier_graph(&mut g, &vars, le, vd).unwrap();
        assert_eq!(g.value(logits).shape(), &[3, 2, 1, 1]);

        let dp = init_discriminator(4, 2);
        let dv = dp.to_graph(&mut g).unwrap();
        let s = discriminator_graph(&mut g, &dv, le).unwrap();
        assert_eq!(g.value(s).shape(), &[3, 1, 1, 1]);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
