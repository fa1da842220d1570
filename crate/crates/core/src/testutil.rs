use alloc::vec;
use alloc::vec::Vec;

use crate::model::{Activation, Architecture, Layer, Network};
use crate::rng::RandomSeed;
use crate::tensor::{Shape, Tensor};

/// 1x6x6 input, one padded 3x3 conv, pool, two affine layers, 3 classes.
pub fn tiny_conv_arch() -> Architecture {
    Architecture {
        input: Shape::new(1, 6, 6).unwrap(),
        layers: vec![
            Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, padding: 1 },
            Layer::Activation(Activation::Tanh),
            Layer::AvgPool { size: 2 },
            Layer::Affine { inputs: 18, outputs: 8 },
            Layer::Activation(Activation::Softplus),
            Layer::Affine { inputs: 8, outputs: 3 },
        ],
    }
}

pub fn tiny_conv_net(seed: RandomSeed) -> Network {
    Network::init(tiny_conv_arch(), seed).unwrap()
}

/// Single affine layer on a 1x2x2 input: `logits = W x + b`.
pub fn affine_net(w: &[[f64; 4]; 3], b: &[f64; 3]) -> Network {
    let arch = Architecture {
        input: Shape::new(1, 2, 2).unwrap(),
        layers: vec![Layer::Affine { inputs: 4, outputs: 3 }],
    };
    let mut params: Vec<f64> = w.iter().flatten().copied().collect();
    params.extend_from_slice(b);
    Network::from_parts(arch, params).unwrap()
}

pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, index: usize, step: f64) -> f64 {
    let mut up = x.clone();
    up.data_mut()[index] += step;
    let mut down = x.clone();
    down.data_mut()[index] -= step;
    (f(&up) - f(&down)) / (2.0 * step)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
