//! Desk-scale U-Net LE→DES translator.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod kernels;
pub mod model_io;
pub mod tensor;
pub mod train;
pub mod unet;

use thiserror::Error;

use crate::image::ImageGrid;

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, GraphError, Var};
pub use model_io::{load_model, save_model, ModelError, MODEL_FORMAT_VERSION};
pub use tensor::{Real, Tensor};
pub use train::{infer_translator, train_translator, LossKind, TrainConfig, TrainHistory};
pub use unet::{init_params, loss_and_grads, unet_forward, Mode, UNetConfig};

#[derive(Debug, Error, PartialEq)]
pub enum TranslatorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter {0} holds a non-finite value")]
    NonFiniteParam(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("training diverged at epoch {epoch}: {source}")]
    Divergence { epoch: usize, source: GraphError },
    #[error("model does not match configuration: {0}")]
    Mismatch(String),
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<(), TranslatorError> {
        match self.entries.iter().find(|(_, t)| !t.all_finite()) {
            Some((n, _)) => Err(TranslatorError::NonFiniteParam(n.clone())),
            None => Ok(()),
        }
    }

    /// Puts every tensor on the graph as a leaf, in order.
    pub fn to_graph(&self, g: &mut Graph<T>) -> Result<Vec<Var>, GraphError> {
        self.entries.iter().map(|(n, t)| g.leaf(t.clone(), n)).collect()
    }

    /// Collects gradients for `vars` (as returned by `to_graph`).
    pub fn grads_from(&self, grads: &graph::Gradients<T>, vars: &[Var]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|((n, t), &v)| (n.clone(), grads.get_or_zeros(v, t)))
                .collect(),
        }
    }
}

/// `(1, 1, H, W)` tensor with intensities divided by 255.
pub fn grid_to_tensor<T: Real>(img: &ImageGrid) -> Tensor<T> {
    let k = T::lit(1.0 / 255.0);
    Tensor::new(
        vec![1, 1, img.height(), img.width()],
        img.data().iter().map(|&v| T::lit(v as f64) * k).collect(),
    )
}

/// Inverse of `grid_to_tensor` for one single-channel sample: `round(v * 255)`
/// clamped to `[0, 255]`.
pub fn tensor_to_grid<T: Real>(t: &Tensor<T>) -> ImageGrid {
    let (n, c, h, w) = t.dims4();
    assert_eq!((n, c), (1, 1), "expected a single-channel single sample");
    let data = t
        .data()
        .iter()
        .map(|&v| (v.f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageGrid::new(w, h, data).expect("tensor extents are positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let img = ImageGrid::from_fn(5, 3, |x, y| (x * 50 + y) as u8);
        let t: Tensor<f32> = grid_to_tensor(&img);
        assert_eq!(t.shape(), &[1, 1, 3, 5]);
        assert_eq!(tensor_to_grid(&t), img);
    }
}
