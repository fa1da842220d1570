//! Restoration of disrupted pixels.
//!
//! [`HarmonicInpainter`] fills each disrupted region with the solution of the
//! discrete Laplace equation, using the retained pixels around it as a fixed
//! boundary. Learned inpainters plug in through [`RestoreAdapter`].

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::stability::DisruptionMask;
use crate::tensor::{clamp_unit, clip_unit, ImageTensor, Shape, Tensor};

/// The restoration map `g(masked, mask)`.
///
/// Implementations return an image of the input's shape, values in `[0, 1]`,
/// and are deterministic for a given input.
pub trait Restorer {
    fn name(&self) -> &str;

    fn restore(&self, masked: &ImageTensor, mask: &DisruptionMask) -> Result<ImageTensor>;
}

/// Jacobi-iterated Laplace inpainting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicInpainter {
    pub max_iterations: usize,
    /// Stop once the largest per-pixel update falls below this.
    pub tolerance: f64,
}

impl Default for HarmonicInpainter {
    fn default() -> Self {
        HarmonicInpainter { max_iterations: 500, tolerance: 1e-5 }
    }
}

impl Restorer for HarmonicInpainter {
    fn name(&self) -> &str {
        "harmonic"
    }

    fn restore(&self, masked: &ImageTensor, mask: &DisruptionMask) -> Result<ImageTensor> {
        harmonic_inpaint(masked, mask, self.max_iterations, self.tolerance).map(|o| o.image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintOutcome {
    pub image: ImageTensor,
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-pixel change of each Jacobi sweep.
    pub updates: Vec<f64>,
    /// Set when some disrupted region had no retained neighbour and was
    /// filled with the mean retained value (0.5 if nothing is retained).
    pub fallback: bool,
}

fn check_mask(shape: Shape, mask: &DisruptionMask) -> Result<()> {
    if mask.height() != shape.height || mask.width() != shape.width {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {shape}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (i, j) = (p / w, p % w);
    [
        (i > 0).then(|| p - w),
        (i + 1 < h).then(|| p + w),
        (j > 0).then(|| p - 1),
        (j + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

/// Disrupted pixels grouped into 4-connected components, each flagged with
/// whether it touches a retained pixel.
fn components(mask: &DisruptionMask) -> Vec<(Vec<usize>, bool)> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if mask.is_retained_flat(start) || seen[start] {
            continue;
        }
        let mut members = Vec::new();
        let mut bounded = false;
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            members.push(p);
            for q in neighbours(p, h, w) {
                if mask.is_retained_flat(q) {
                    bounded = true;
                } else if !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push((members, bounded));
    }
    out
}

/// Mean clamped to the range of its inputs, so equal inputs average to
/// exactly themselves.
fn bounded_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        sum += v;
        count += 1;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (sum / count as f64).clamp(lo, hi)
}

/// Solves `Laplace(u) = 0` on the disrupted pixels of every channel, with the
/// retained pixels as Dirichlet boundary and zero-flux image edges.
///
/// Each sweep replaces every unknown by the mean of its in-bounds
/// 4-neighbours. Regions with no retained neighbour take the channel's mean
/// retained value, or 0.5 when nothing is retained (`fallback` is set).
pub fn harmonic_inpaint(
    masked: &ImageTensor,
    mask: &DisruptionMask,
    max_iterations: usize,
    tolerance: f64,
) -> Result<InpaintOutcome> {
    let shape = masked.shape();
    check_mask(shape, mask)?;
    if max_iterations == 0 || !(tolerance > 0.0) {
        return Err(Error::invalid("harmonic solver needs max_iterations >= 1 and tolerance > 0"));
    }
    let (h, w) = (shape.height, shape.width);
    let plane = shape.plane();
    let mut fallback = false;
    let mut solved: Vec<usize> = Vec::new();
    let comps = components(mask);
    let retained = mask.retained_count();

    let mut values = masked.data().to_vec();
    for c in 0..shape.channels {
        let base = c * plane;
        let channel = &mut values[base..base + plane];
        let global = if retained > 0 {
            let sum: f64 = (0..plane).filter(|&p| mask.is_retained_flat(p)).map(|p| channel[p]).sum();
            sum / retained as f64
        } else {
            0.5
        };
        for (members, bounded) in &comps {
            // start each region at its boundary mean so every sweep stays
            // inside the boundary's value range
            let fill = if *bounded {
                let channel = &*channel;
                bounded_mean(
                    members
                        .iter()
                        .flat_map(|&p| neighbours(p, h, w))
                        .filter(|&q| mask.is_retained_flat(q))
                        .map(|q| channel[q]),
                )
            } else {
                fallback = true;
                global
            };
            for &p in members {
                channel[p] = fill;
            }
            if *bounded && c == 0 {
                solved.extend_from_slice(members);
            }
        }
    }
    solved.sort_unstable();

    let mut updates = Vec::new();
    let mut converged = solved.is_empty();
    let mut next = vec![0.0; solved.len()];
    while !converged && updates.len() < max_iterations {
        let mut max_update: f64 = 0.0;
        for c in 0..shape.channels {
            let channel = &mut values[c * plane..(c + 1) * plane];
            for (slot, &p) in next.iter_mut().zip(&solved) {
                *slot = bounded_mean(neighbours(p, h, w).map(|q| channel[q]));
            }
            for (&v, &p) in next.iter().zip(&solved) {
                max_update = max_update.max((v - channel[p]).abs());
                channel[p] = v;
            }
        }
        updates.push(max_update);
        converged = max_update < tolerance;
    }

    // retained pixels are copied untouched from the input
    for (idx, v) in values.iter_mut().enumerate() {
        if mask.is_retained_flat(idx % plane) {
            *v = masked.data()[idx];
        } else {
            *v = clamp_unit(*v);
        }
    }
    Ok(InpaintOutcome {
        image: ImageTensor::new(shape, values)?,
        iterations: updates.len(),
        converged,
        updates,
        fallback,
    })
}

/// Out-of-crate restorer, e.g. a learned partial-convolution network behind a
/// subprocess or a recorded fixture.
pub trait RestoreAdapter {
    fn name(&self) -> &str;

    fn restore(&self, masked: &ImageTensor, mask: &DisruptionMask) -> core::result::Result<Tensor, String>;
}

/// Runs an adapter, enforcing shape and clipping to `[0, 1]`.
pub fn external_restore<A: RestoreAdapter + ?Sized>(
    adapter: &A,
    masked: &ImageTensor,
    mask: &DisruptionMask,
) -> Result<ImageTensor> {
    let contract = |reason: String| Error::RestorerContract { name: adapter.name().to_string(), reason };
    check_mask(masked.shape(), mask).map_err(|e| contract(e.to_string()))?;
    let out = adapter.restore(masked, mask).map_err(contract)?;
    if out.shape() != masked.shape() {
        return Err(contract(format!("returned shape {}, expected {}", out.shape(), masked.shape())));
    }
    Ok(clip_unit(&out))
}

/// Makes any [`RestoreAdapter`] usable wherever a [`Restorer`] is expected.
pub struct ExternalRestorer<A>(pub A);

impl<A: RestoreAdapter> Restorer for ExternalRestorer<A> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn restore(&self, masked: &ImageTensor, mask: &DisruptionMask) -> Result<ImageTensor> {
        external_restore(&self.0, masked, mask)
    }
}

/// Returns the masked input as-is; disrupted pixels stay at 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRestorer;

impl RestoreAdapter for IdentityRestorer {
    fn name(&self) -> &str {
        "identity"
    }

    fn restore(&self, masked: &ImageTensor, _: &DisruptionMask) -> core::result::Result<Tensor, String> {
        Ok(masked.as_tensor().clone())
    }
}
