//! The stability module: repeated saliency-guided disruption and restoration
//! of one input, recorded as a [`Trajectory`].

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::inpaint::Restorer;
use crate::model::Classifier;
use crate::tensor::{ImageTensor, Tensor};

/// Binary spatial mask; 1 = retained, 0 = disrupted. Shared by all channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DisruptionMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl DisruptionMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {height}x{width} needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(DisruptionMask { height, width, bits })
    }

    pub fn all_retained(height: usize, width: usize) -> Self {
        DisruptionMask { height, width, bits: alloc::vec![1; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_retained(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j] == 1
    }

    pub fn is_retained_flat(&self, p: usize) -> bool {
        self.bits[p] == 1
    }

    pub fn retained_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn disrupted_count(&self) -> usize {
        self.bits.len() - self.retained_count()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.height != self.height || s.width != self.width {
            return Err(Error::invalid(format!(
                "mask {}x{} does not match tensor {s}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `M * x`: disrupted locations zeroed in every channel.
    pub fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.check(x)?;
        let plane = self.bits.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| if self.is_retained_flat(idx % plane) { v } else { 0.0 })
            .collect();
        ImageTensor::new(x.shape(), data)
    }
}

/// How per-channel saliency is reduced to one score per location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SaliencyScoring {
    /// Channel sum of the raw gradient; the lowest sums are disrupted.
    #[default]
    Raw,
    /// Channel sum of gradient magnitudes.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DssConfig {
    /// Number of disrupt/restore loops `n`.
    pub loops: usize,
    /// Fraction `r` of spatial locations disrupted per loop.
    pub disrupt_ratio: f64,
    pub scoring: SaliencyScoring,
}

impl Default for DssConfig {
    fn default() -> Self {
        DssConfig { loops: 5, disrupt_ratio: 0.03, scoring: SaliencyScoring::Raw }
    }
}

impl DssConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loops == 0 {
            return Err(Error::invalid("DSS needs at least one loop"));
        }
        if !(self.disrupt_ratio > 0.0 && self.disrupt_ratio < 1.0) {
            return Err(Error::invalid(format!("disrupt ratio {} outside (0, 1)", self.disrupt_ratio)));
        }
        Ok(())
    }
}

/// `floor(ratio * locations)`, tolerant of representation error in `ratio`
/// (so 0.07 of 100 is 7, not 6).
pub fn disrupted_locations(ratio: f64, locations: usize) -> usize {
    libm::floor(ratio * locations as f64 + 1e-9) as usize
}

/// Input gradient of the cross-entropy at the model's own prediction.
pub fn saliency<C: Classifier + ?Sized>(model: &C, x: &Tensor) -> Result<Tensor> {
    let predicted = model.predict(x)?;
    model.input_gradient(x, predicted)
}

/// Mask disrupting the `floor(r * H * W)` locations with the smallest raw
/// channel-summed saliency; ties broken by row-major position.
pub fn disruption_mask(saliency: &Tensor, ratio: f64) -> Result<DisruptionMask> {
    disruption_mask_with(saliency, ratio, SaliencyScoring::Raw)
}

pub fn disruption_mask_with(saliency: &Tensor, ratio: f64, scoring: SaliencyScoring) -> Result<DisruptionMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("disrupt ratio {ratio} outside (0, 1)")));
    }
    let shape = saliency.shape();
    let plane = shape.plane();
    let k = disrupted_locations(ratio, plane);
    if k == 0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} disrupts no location of a {}x{} image",
            shape.height, shape.width
        )));
    }
    let mut scores = alloc::vec![0.0; plane];
    for c in 0..shape.channels {
        let channel = &saliency.data()[c * plane..(c + 1) * plane];
        for (s, &g) in scores.iter_mut().zip(channel) {
            *s += match scoring {
                SaliencyScoring::Raw => g,
                SaliencyScoring::Magnitude => g.abs(),
            };
        }
    }
    let mut order: Vec<usize> = (0..plane).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut bits = alloc::vec![1u8; plane];
    for &p in &order[..k] {
        bits[p] = 0;
    }
    DisruptionMask::from_bits(shape.height, shape.width, bits)
}

/// Restores the masked input and composes the next state: retained
/// locations are copied from `x_prev`, disrupted ones taken from the
/// restoration. Returns `(x_hat, x_next)`.
pub fn restore_and_compose<R: Restorer + ?Sized>(
    restorer: &R,
    x_prev: &ImageTensor,
    mask: &DisruptionMask,
) -> Result<(ImageTensor, ImageTensor)> {
    let masked = mask.apply(x_prev)?;
    let x_hat = restorer.restore(&masked, mask)?;
    if x_hat.shape() != x_prev.shape() {
        return Err(Error::RestorerContract {
            name: restorer.name().to_string(),
            reason: format!("returned shape {}, expected {}", x_hat.shape(), x_prev.shape()),
        });
    }
    let plane = mask.bits().len();
    let data = x_prev
        .data()
        .iter()
        .zip(x_hat.data())
        .enumerate()
        .map(|(idx, (&prev, &gen))| if mask.is_retained_flat(idx % plane) { prev } else { gen })
        .collect();
    let x_next = ImageTensor::new(x_prev.shape(), data)?;
    Ok((x_hat, x_next))
}

/// `L_t = CE(x_t, pred(x_t)) - CE(x_prev, pred(x_prev))`.
pub fn state_variable<C: Classifier + ?Sized>(model: &C, x_t: &Tensor, x_prev: &Tensor) -> Result<f64> {
    Ok(model.self_loss(x_t)? - model.self_loss(x_prev)?)
}

/// Record of one DSS run: `n + 1` states, and `n` restorations, masks and
/// state variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<ImageTensor>,
    pub generated: Vec<ImageTensor>,
    pub masks: Vec<DisruptionMask>,
    pub state_vars: Vec<f64>,
}

impl Trajectory {
    pub fn loops(&self) -> usize {
        self.masks.len()
    }

    pub fn origin(&self) -> &ImageTensor {
        &self.states[0]
    }

    pub fn last(&self) -> &ImageTensor {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Checks the length relations between the recorded sequences.
    pub fn validate(&self) -> Result<()> {
        let n = self.masks.len();
        if self.states.len() != n + 1 || self.generated.len() != n || self.state_vars.len() != n {
            return Err(Error::invalid(format!(
                "incomplete trajectory: {} states, {} generated, {} masks, {} state variables",
                self.states.len(),
                self.generated.len(),
                n,
                self.state_vars.len()
            )));
        }
        Ok(())
    }
}

/// Runs `config.loops` disrupt/restore iterations from `x`.
pub fn run_dss<C, R>(model: &C, restorer: &R, x: &ImageTensor, config: &DssConfig) -> Result<Trajectory>
where
    C: Classifier + ?Sized,
    R: Restorer + ?Sized,
{
    config.validate()?;
    let n = config.loops;
    let mut traj = Trajectory {
        states: Vec::with_capacity(n + 1),
        generated: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        state_vars: Vec::with_capacity(n),
    };
    traj.states.push(x.clone());
    for t in 1..=n {
        let step = || -> Result<_> {
            let prev = traj.last();
            let grad = saliency(model, prev)?;
            let mask = disruption_mask_with(&grad, config.disrupt_ratio, config.scoring)?;
            let (x_hat, x_next) = restore_and_compose(restorer, prev, &mask)?;
            let l_t = state_variable(model, &x_next, prev)?;
            Ok((mask, x_hat, x_next, l_t))
        };
        let (mask, x_hat, x_next, l_t) = step().map_err(|e| e.at_loop(t))?;
        traj.masks.push(mask);
        traj.generated.push(x_hat);
        traj.states.push(x_next);
        traj.state_vars.push(l_t);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inpaint::{ExternalRestorer, HarmonicInpainter, IdentityRestorer};
    use crate::rng::RandomSeed;
    use crate::tensor::Shape;
    use crate::testutil::{affine_net, tiny_conv_net};
    use alloc::vec;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, values: Vec<f64>) -> Tensor {
        Tensor::new(Shape::new(1, h, w).unwrap(), values).unwrap()
    }

    /// Sort-and-threshold oracle: the `k` smallest values by a plain full
    /// sort of `(value, index)` pairs.
    fn smallest_k(values: &[f64], k: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut idx: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        idx.sort_unstable();
        idx
    }

    fn zeros(mask: &DisruptionMask) -> Vec<usize> {
        (0..mask.bits().len()).filter(|&p| !mask.is_retained_flat(p)).collect()
    }

    #[test]
    fn mask_of_distinct_values() {
        // values 1..=100 laid out in a scrambled order
        let values: Vec<f64> = (0..100).map(|i| ((i * 37) % 100 + 1) as f64).collect();
        let mask = disruption_mask(&grid(10, 10, values.clone()), 0.03).unwrap();
        let expected: Vec<usize> = (0..100).filter(|&p| values[p] <= 3.0).collect();
        assert_eq!(zeros(&mask), expected);
        assert_eq!(zeros(&mask), smallest_k(&values, 3));
    }

    #[test]
    fn all_equal_scores_use_row_major_tie_break() {
        let mask = disruption_mask(&grid(28, 28, vec![0.25; 784]), 0.03).unwrap();
        assert_eq!(zeros(&mask), (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn single_disruption_at_argmin() {
        let mut values = vec![1.0; 100];
        values[57] = -4.0;
        let mask = disruption_mask(&grid(10, 10, values), 0.01).unwrap();
        assert_eq!(zeros(&mask), vec![57]);
    }

    #[test]
    fn ratio_too_small_rejected() {
        assert!(disruption_mask(&grid(4, 4, vec![0.0; 16]), 0.03).is_err());
        assert!(disruption_mask(&grid(4, 4, vec![0.0; 16]), 1.0).is_err());
    }

    #[test]
    fn channel_sum_and_magnitude_scoring() {
        let shape = Shape::new(2, 1, 4).unwrap();
        let g = Tensor::new(shape, vec![1.0, -3.0, 0.5, 2.0, 1.0, 1.0, 0.0, -2.5]).unwrap();
        // sums: 2.0, -2.0, 0.5, -0.5 ; magnitudes: 2.0, 4.0, 0.5, 4.5
        assert_eq!(zeros(&disruption_mask_with(&g, 0.25, SaliencyScoring::Raw).unwrap()), vec![1]);
        assert_eq!(zeros(&disruption_mask_with(&g, 0.25, SaliencyScoring::Magnitude).unwrap()), vec![2]);
    }

    #[test]
    fn floor_guards_representation_error() {
        assert_eq!(disrupted_locations(0.03, 784), 23);
        assert_eq!(disrupted_locations(0.07, 100), 7);
        assert_eq!(disrupted_locations(0.29, 100), 29);
    }

    #[test]
    fn saliency_uses_prediction() {
        let w = [[0.5, -0.2, 0.1, 0.0], [-0.3, 0.8, 0.0, 0.4], [0.2, 0.2, -0.6, 0.1]];
        let b = [0.1, 0.0, -0.1];
        let net = affine_net(&w, &b);
        let x = grid(2, 2, vec![0.2, 0.9, 0.4, 0.6]);
        let predicted = net.predict(&x).unwrap();
        assert_eq!(saliency(&net, &x).unwrap(), net.input_gradient(&x, predicted).unwrap());
    }

    #[test]
    fn compose_with_full_and_empty_masks() {
        let x = ImageTensor::new(Shape::new(1, 2, 2).unwrap(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let restorer = HarmonicInpainter::default();
        let (_, next) = restore_and_compose(&restorer, &x, &DisruptionMask::all_retained(2, 2)).unwrap();
        assert_eq!(next, x);
        let empty = DisruptionMask::from_bits(2, 2, vec![0; 4]).unwrap();
        let (hat, next) = restore_and_compose(&restorer, &x, &empty).unwrap();
        assert_eq!(next, hat);
    }

    #[test]
    fn state_variable_examples() {
        let net = tiny_conv_net(RandomSeed(2));
        let a = ImageTensor::filled(net.input_shape(), 0.2).unwrap();
        let b = ImageTensor::filled(net.input_shape(), 0.8).unwrap();
        assert_eq!(state_variable(&net, &a, &a).unwrap(), 0.0);
        assert_eq!(state_variable(&net, &a, &b).unwrap(), -state_variable(&net, &b, &a).unwrap());
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let net = tiny_conv_net(RandomSeed(2));
        let x = ImageTensor::filled(net.input_shape(), 0.6).unwrap();
        let cfg = DssConfig { loops: 4, disrupt_ratio: 0.1, ..DssConfig::default() };
        let traj = run_dss(&net, &HarmonicInpainter::default(), &x, &cfg).unwrap();
        traj.validate().unwrap();
        assert!(traj.states.iter().all(|s| *s == x));
        assert!(traj.state_vars.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn identity_restorer_keeps_retained_pixels() {
        let net = tiny_conv_net(RandomSeed(2));
        let shape = net.input_shape();
        let x = ImageTensor::new(shape, (0..shape.len()).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let cfg = DssConfig { loops: 1, disrupt_ratio: 0.1, ..DssConfig::default() };
        let traj = run_dss(&net, &ExternalRestorer(IdentityRestorer), &x, &cfg).unwrap();
        let mask = &traj.masks[0];
        assert_eq!(mask.disrupted_count(), 3);
        for p in 0..shape.len() {
            if mask.is_retained_flat(p) {
                assert_eq!(traj.states[1].data()[p], x.data()[p]);
            } else {
                assert_eq!(traj.states[1].data()[p], 0.0);
            }
        }
    }

    #[test]
    fn loop_errors_carry_index() {
        struct Shrinks;
        impl Restorer for Shrinks {
            fn name(&self) -> &str {
                "shrinks"
            }
            fn restore(&self, _: &ImageTensor, _: &DisruptionMask) -> Result<ImageTensor> {
                ImageTensor::filled(Shape::new(1, 1, 1).unwrap(), 0.0)
            }
        }
        let net = tiny_conv_net(RandomSeed(2));
        let x = ImageTensor::filled(net.input_shape(), 0.6).unwrap();
        let cfg = DssConfig { loops: 2, disrupt_ratio: 0.1, ..DssConfig::default() };
        match run_dss(&net, &Shrinks, &x, &cfg) {
            Err(Error::Loop { index: 1, source }) => {
                assert!(matches!(*source, Error::RestorerContract { .. }))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn mask_cardinality_and_retention(
            values in proptest::collection::vec(0.0f64..=1.0, 36),
            ratio in 0.03f64..0.9,
            seed in 0u64..20,
        ) {
            let net = tiny_conv_net(RandomSeed(seed));
            let x = ImageTensor::new(net.input_shape(), values).unwrap();
            let cfg = DssConfig { loops: 3, disrupt_ratio: ratio, ..DssConfig::default() };
            let traj = run_dss(&net, &HarmonicInpainter::default(), &x, &cfg).unwrap();
            let k = disrupted_locations(ratio, 36);
            for t in 1..=3 {
                let mask = &traj.masks[t - 1];
                prop_assert_eq!(mask.disrupted_count(), k);
                for p in 0..36 {
                    if mask.is_retained_flat(p) {
                        prop_assert_eq!(traj.states[t].data()[p].to_bits(), traj.states[t - 1].data()[p].to_bits());
                    }
                }
            }
            prop_assert_eq!(&traj, &run_dss(&net, &HarmonicInpainter::default(), &x, &cfg).unwrap());
        }

        #[test]
        fn mask_matches_sort_oracle(values in proptest::collection::vec(-5.0f64..5.0, 100), ratio in 0.01f64..0.99) {
            let mask = disruption_mask(&grid(10, 10, values.clone()), ratio).unwrap();
            let k = disrupted_locations(ratio, 100);
            prop_assert_eq!(zeros(&mask), smallest_k(&values, k));
        }
    }
}
