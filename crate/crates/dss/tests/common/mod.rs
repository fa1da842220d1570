#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dss::checkpoint::load_model;
use dss::config::{DataConfig, ExperimentConfig, ModelConfig};
use dss::data::{load_mnist, MnistSplit, MNIST_DIR_VAR};
use dss_core::model::{Activation, Architecture, Layer};
use dss_core::{LabeledExample, Network, RandomSeed, Shape};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn model_path() -> PathBuf {
    fixtures().join("lenet-mnist.dssm")
}

pub fn model() -> Network {
    load_model(model_path()).expect("fixture model")
}

/// `$DSS_MNIST_DIR`, or `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    let dir = std::env::var_os(MNIST_DIR_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    assert!(
        dir.join("t10k-images-idx3-ubyte").exists(),
        "MNIST files not found in {}; set {MNIST_DIR_VAR}",
        dir.display()
    );
    dir
}

pub fn mnist_test(n: usize) -> Vec<LabeledExample> {
    let mut all = load_mnist(&mnist_dir(), MnistSplit::Test).expect("MNIST test split");
    all.truncate(n);
    all
}

/// Default configuration over the first `examples` MNIST test digits and the
/// fixture model.
pub fn mnist_config(examples: usize, out: &Path) -> ExperimentConfig {
    let mut data = DataConfig::mnist_test(&mnist_dir());
    data.examples = examples;
    let model = ModelConfig { checkpoint: Some(model_path()), train: None };
    ExperimentConfig::new(data, model, out.to_path_buf())
}

/// 1x4x4 input, one conv, pool, affine to 3 classes.
pub fn tiny_net(seed: u64) -> Network {
    let arch = Architecture {
        input: Shape::new(1, 4, 4).unwrap(),
        layers: vec![
            Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, padding: 1 },
            Layer::Activation(Activation::Tanh),
            Layer::AvgPool { size: 2 },
            Layer::Affine { inputs: 8, outputs: 3 },
        ],
    };
    Network::init(arch, RandomSeed(seed)).unwrap()
}
