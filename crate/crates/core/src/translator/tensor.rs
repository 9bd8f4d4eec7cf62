use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major n-d array. Images use `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive: {shape:?}");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal the product of the shape"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected an NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape must keep size");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulation");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.f64())).collect(),
        }
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let (_, c, h, w) = items[0].dims4();
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4();
            assert_eq!((tc, th, tw), (c, h, w), "stacked tensors must share C, H, W");
            data.extend_from_slice(&t.data);
            n += tn;
        }
        Self::new(vec![n, c, h, w], data)
    }

    /// The `i`-th sample of an NCHW tensor as a `(1, C, H, W)` tensor.
    pub fn sample(&self, i: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(i < n, "sample index out of range");
        let per = c * h * w;
        Self::new(vec![1, c, h, w], self.data[i * per..(i + 1) * per].to_vec())
    }
}
