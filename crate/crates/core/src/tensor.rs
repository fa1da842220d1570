//! Channel-major image tensors and the elementwise helpers built on them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Deref;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RandomSeed;

/// `(channels, height, width)`; all three at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(alloc::format!(
                "shape ({channels},{height},{width}) has an empty dimension"
            )));
        }
        Ok(Shape { channels, height, width })
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

/// Unconstrained real array, used for gradients, perturbations and
/// intermediate attack iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(alloc::format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.shape.index(c, i, j)]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| factor * v)
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        ensure_shape(self.shape, other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        ensure_shape(self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| f64::max(m, (a - b).abs())))
    }
}

pub(crate) fn ensure_shape(expected: Shape, actual: Shape) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, actual })
    }
}

/// A tensor whose every element lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    /// Validating constructor; rejects values outside `[0, 1]` (and NaN).
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if let Some((idx, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(alloc::format!(
                "image value {v} at flat index {idx} is outside [0, 1]"
            )));
        }
        Tensor::new(shape, data).map(ImageTensor)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Scales raw 8-bit intensities into `[0, 1]`.
    pub fn from_bytes(shape: Shape, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::new(shape, data).map(ImageTensor)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl Deref for ImageTensor {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        &self.0
    }
}

impl TryFrom<Tensor> for ImageTensor {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        ImageTensor::new(t.shape, t.data)
    }
}

/// Clamps every element into `[0, 1]`. NaN maps to 0.
pub fn clip_unit(x: &Tensor) -> ImageTensor {
    ImageTensor(x.map(clamp_unit))
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `clip_unit(x + delta)` with `delta` uniform on `[-epsilon, epsilon]` per
/// element.
pub fn uniform_noise(x: &ImageTensor, epsilon: f64, seed: RandomSeed) -> Result<ImageTensor> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(alloc::format!("noise epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = seed.rng();
    let noisy = x.map(|v| project_linf(v + rng.gen_range(-epsilon..=epsilon), v, epsilon));
    Ok(clip_unit(&noisy))
}

/// Clamps `value` into `[center - radius, center + radius]`, stepping the
/// bounds inward where rounding would otherwise let `|value - center|`
/// exceed `radius`.
pub(crate) fn project_linf(value: f64, center: f64, radius: f64) -> f64 {
    let mut hi = center + radius;
    while hi - center > radius {
        hi = hi.next_down();
    }
    let mut lo = center - radius;
    while center - lo > radius {
        lo = lo.next_up();
    }
    if value.is_nan() {
        center
    } else {
        value.clamp(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: ImageTensor,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(image: ImageTensor, label: usize) -> Self {
        LabeledExample { image, label }
    }
}

/// Matched clean / noisy / adversarial images sharing one true label.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTriplet {
    pub clean: LabeledExample,
    pub noisy: ImageTensor,
    pub adversarial: ImageTensor,
    pub attack_name: String,
    pub epsilon: f64,
}

/// Vector norm orders used by the stability features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Norm {
    L1,
    L2,
    Inf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::Inf];

    pub fn of(self, values: &[f64]) -> f64 {
        match self {
            Norm::L1 => values.iter().map(|v| v.abs()).sum(),
            Norm::L2 => libm::sqrt(values.iter().map(|v| v * v).sum()),
            Norm::Inf => values.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
        }
    }

    /// `‖a - b‖` without materializing the difference.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let diffs = a.iter().zip(b).map(|(x, y)| x - y);
        match self {
            Norm::L1 => diffs.map(f64::abs).sum(),
            Norm::L2 => libm::sqrt(diffs.map(|d| d * d).sum()),
            Norm::Inf => diffs.fold(0.0, |m, d| f64::max(m, d.abs())),
        }
    }

    /// Suffix used in feature column names.
    pub fn tag(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Inf => "linf",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Norm> {
        match tag {
            "l1" | "1" => Some(Norm::L1),
            "l2" | "2" => Some(Norm::L2),
            "linf" | "inf" => Some(Norm::Inf),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(c: usize, h: usize, w: usize) -> Shape {
        Shape::new(c, h, w).unwrap()
    }

    #[test]
    fn clip_examples() {
        let t = Tensor::new(shape(1, 1, 3), vec![-0.2, 1.3, 0.5]).unwrap();
        assert_eq!(clip_unit(&t).data(), &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn byte_scaling_endpoints() {
        let img = ImageTensor::from_bytes(shape(1, 1, 2), &[0, 255]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(ImageTensor::new(shape(1, 1, 2), vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(shape(1, 1, 1), vec![f64::NAN]).is_err());
    }

    #[test]
    fn empty_dimension_rejected() {
        assert!(Shape::new(1, 0, 3).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let x = ImageTensor::new(shape(1, 2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(uniform_noise(&x, 0.0, RandomSeed(1)).unwrap(), x);
    }

    #[test]
    fn noise_is_reproducible() {
        let x = ImageTensor::filled(shape(1, 4, 4), 0.5).unwrap();
        let a = uniform_noise(&x, 0.3, RandomSeed(11)).unwrap();
        let b = uniform_noise(&x, 0.3, RandomSeed(11)).unwrap();
        let c = uniform_noise(&x, 0.3, RandomSeed(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_on_ones_stays_in_range() {
        let x = ImageTensor::filled(shape(1, 8, 8), 1.0).unwrap();
        let y = uniform_noise(&x, 0.7, RandomSeed(3)).unwrap();
        assert!(y.data().iter().all(|v| (0.3..=1.0).contains(v)));
    }

    #[test]
    fn negative_epsilon_rejected() {
        let x = ImageTensor::filled(shape(1, 1, 1), 0.5).unwrap();
        assert!(matches!(uniform_noise(&x, -0.1, RandomSeed(0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hand_computed_norms() {
        let d = [0.3, -0.4, 0.0, 0.0];
        assert!((Norm::L1.of(&d) - 0.7).abs() < 1e-15);
        assert!((Norm::L2.of(&d) - 0.5).abs() < 1e-15);
        assert_eq!(Norm::Inf.of(&d), 0.4);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(values in proptest::collection::vec(-3.0f64..3.0, 1..64)) {
            let n = values.len();
            let t = Tensor::new(shape(1, 1, n), values).unwrap();
            let once = clip_unit(&t);
            let twice = clip_unit(once.as_tensor());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn noise_respects_budget(
            values in proptest::collection::vec(0.0f64..=1.0, 1..64),
            eps in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let n = values.len();
            let x = ImageTensor::new(shape(1, 1, n), values).unwrap();
            let y = uniform_noise(&x, eps, RandomSeed(seed)).unwrap();
            prop_assert!(y.max_abs_diff(&x).unwrap() <= eps);
        }
    }
}
