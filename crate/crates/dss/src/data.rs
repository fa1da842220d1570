use std::path::{Path, PathBuf};

use dss_core::LabeledExample;

use crate::error::{DssError, Result};
use crate::idx::{load_idx_images, load_idx_labels};

/// Environment variable naming the directory with the four MNIST IDX files.
pub const MNIST_DIR_VAR: &str = "DSS_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }
}

pub fn mnist_files(dir: &Path, split: MnistSplit) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}-images-idx3-ubyte", split.prefix())),
        dir.join(format!("{}-labels-idx1-ubyte", split.prefix())),
    )
}

/// Pairs an image file with its label file.
pub fn load_labeled(images: &Path, labels: &Path) -> Result<Vec<LabeledExample>> {
    let xs = load_idx_images(images)?;
    let ys = load_idx_labels(labels)?;
    if xs.len() != ys.len() {
        return Err(DssError::format(
            images,
            format!("{} images but {} labels in {}", xs.len(), ys.len(), labels.display()),
        ));
    }
    Ok(xs.into_iter().zip(ys).map(|(x, y)| LabeledExample::new(x, y)).collect())
}

pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<Vec<LabeledExample>> {
    let (images, labels) = mnist_files(dir, split);
    load_labeled(&images, &labels)
}
