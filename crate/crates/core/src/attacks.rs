//! L-infinity gradient attacks, the external-attack adapter slot, and the
//! clean / noisy / adversarial triplet protocol.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::RandomSeed;
use crate::tensor::{
    clamp_unit, clip_unit, ensure_shape, project_linf, uniform_noise, ExampleTriplet, ImageTensor,
    LabeledExample, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackMethod {
    Fgsm,
    Pgd,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
        }
    }
}

/// Budget and schedule of a native L-infinity attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    /// Per-iteration step; ignored by FGSM, which steps by `epsilon`.
    pub step_size: f64,
    pub iterations: usize,
    /// Seeds the PGD random start.
    pub seed: RandomSeed,
    /// Start PGD uniformly inside the epsilon ball rather than at `x`.
    pub random_start: bool,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            method: AttackMethod::Fgsm,
            epsilon,
            step_size: epsilon,
            iterations: 1,
            seed: RandomSeed(0),
            random_start: false,
        }
    }

    /// PGD with the usual `alpha = epsilon / 4` step.
    pub fn pgd(epsilon: f64, iterations: usize, seed: RandomSeed) -> Self {
        AttackConfig {
            method: AttackMethod::Pgd,
            epsilon,
            step_size: epsilon / 4.0,
            iterations,
            seed,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("attack epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) || self.step_size > self.epsilon {
            return Err(Error::invalid(format!(
                "step size {} must lie in (0, epsilon = {}]",
                self.step_size, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("attack needs at least one iteration"));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step from `current`, projected onto the epsilon ball
/// around `origin` and then onto `[0, 1]`.
fn signed_step<C: Classifier + ?Sized>(
    model: &C,
    origin: &ImageTensor,
    current: &Tensor,
    label: usize,
    step: f64,
    epsilon: f64,
) -> Result<ImageTensor> {
    let grad = model.input_gradient(current, label)?;
    let stepped = current.zip_with(&grad, |v, g| v + step * sign(g))?;
    let projected = stepped.zip_with(origin, |v, o| project_linf(v, o, epsilon))?;
    Ok(clip_unit(&projected))
}

/// Fast gradient sign method: `clip(x + epsilon * sign(grad))`.
pub fn fgsm<C: Classifier + ?Sized>(model: &C, x: &ImageTensor, label: usize, epsilon: f64) -> Result<ImageTensor> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("attack epsilon must be > 0, got {epsilon}")));
    }
    signed_step(model, x, x, label, epsilon, epsilon)
}

/// Projected gradient descent under an L-infinity budget.
pub fn pgd<C: Classifier + ?Sized>(model: &C, x: &ImageTensor, label: usize, config: &AttackConfig) -> Result<ImageTensor> {
    config.validate()?;
    let eps = config.epsilon;
    let mut current = if config.random_start {
        let mut rng = config.seed.rng();
        clip_unit(&x.map(|v| project_linf(v + rng.gen_range(-eps..=eps), v, eps)))
    } else {
        x.clone()
    };
    for _ in 0..config.iterations {
        current = signed_step(model, x, &current, label, config.step_size, eps)?;
    }
    Ok(current)
}

/// Result of one attack call. `clipped` counts output values that had to be
/// pulled back into `[0, 1]`; non-zero means the attack broke its range
/// contract and the result carries a warning.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub image: ImageTensor,
    pub clipped: usize,
}

/// Any attack usable by [`build_triplets`].
pub trait Attack {
    fn name(&self) -> String;

    /// Intensity used for the matched noisy example.
    fn epsilon(&self) -> f64;

    /// `index` identifies the example within the batch; native attacks derive
    /// their per-example seed from it, recorded attacks look their output up
    /// by it.
    fn generate(&self, model: &dyn Classifier, x: &ImageTensor, label: usize, index: usize) -> Result<AttackOutput>;
}

impl Attack for AttackConfig {
    fn name(&self) -> String {
        self.method.name().to_string()
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn generate(&self, model: &dyn Classifier, x: &ImageTensor, label: usize, index: usize) -> Result<AttackOutput> {
        let image = match self.method {
            AttackMethod::Fgsm => fgsm(model, x, label, self.epsilon)?,
            AttackMethod::Pgd => {
                let per_example = AttackConfig { seed: self.seed.derive(index as u64), ..*self };
                pgd(model, x, label, &per_example)?
            }
        };
        Ok(AttackOutput { image, clipped: 0 })
    }
}

/// Hook for attacks implemented outside this crate (CW, DeepFool, Square,
/// AutoAttack, recorded fixtures, subprocesses).
pub trait AttackAdapter {
    fn name(&self) -> &str;

    /// Whether concurrent calls are safe. Callers serialize non-reentrant
    /// adapters.
    fn reentrant(&self) -> bool {
        true
    }

    fn perturb(
        &self,
        model: &dyn Classifier,
        x: &ImageTensor,
        label: usize,
        index: usize,
    ) -> core::result::Result<Tensor, String>;
}

/// Runs an adapter and enforces the image contract: same shape, values in
/// `[0, 1]` (out-of-range values are clipped and counted).
pub fn external_attack<A: AttackAdapter + ?Sized>(
    adapter: &A,
    model: &dyn Classifier,
    x: &ImageTensor,
    label: usize,
    index: usize,
) -> Result<AttackOutput> {
    let fail = |reason: String| Error::Attack { name: adapter.name().to_string(), reason };
    let raw = adapter.perturb(model, x, label, index).map_err(fail)?;
    ensure_shape(x.shape(), raw.shape()).map_err(|e| fail(e.to_string()))?;
    let clipped = raw.data().iter().filter(|&&v| clamp_unit(v) != v).count();
    Ok(AttackOutput { image: clip_unit(&raw), clipped })
}

/// An adapter paired with the intensity used for its noisy examples.
pub struct ExternalAttack<A> {
    pub adapter: A,
    pub epsilon: f64,
}

impl<A: AttackAdapter> Attack for ExternalAttack<A> {
    fn name(&self) -> String {
        self.adapter.name().to_string()
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn generate(&self, model: &dyn Classifier, x: &ImageTensor, label: usize, index: usize) -> Result<AttackOutput> {
        external_attack(&self.adapter, model, x, label, index)
    }
}

/// Triplets kept by the protocol filter, plus bookkeeping for what was
/// dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<ExampleTriplet>,
    /// Position of each retained triplet in the input example list.
    pub source_indices: Vec<usize>,
    pub dropped_misclassified: usize,
    pub dropped_attack_failed: usize,
    /// `(source index, clipped value count)` for attack outputs that violated
    /// the range contract.
    pub range_warnings: Vec<(usize, usize)>,
}

/// Keeps examples the model classifies correctly and whose adversarial
/// counterpart it gets wrong. Noisy companions use uniform noise at the
/// attack's epsilon, seeded per example from `seed`.
pub fn build_triplets(
    model: &dyn Classifier,
    examples: &[LabeledExample],
    attack: &dyn Attack,
    seed: RandomSeed,
) -> Result<TripletSet> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to attack"));
    }
    let mut set = TripletSet {
        triplets: Vec::new(),
        source_indices: Vec::new(),
        dropped_misclassified: 0,
        dropped_attack_failed: 0,
        range_warnings: Vec::new(),
    };
    let name = attack.name();
    for (index, ex) in examples.iter().enumerate() {
        if model.predict(&ex.image)? != ex.label {
            set.dropped_misclassified += 1;
            continue;
        }
        let out = attack.generate(model, &ex.image, ex.label, index)?;
        if out.clipped > 0 {
            set.range_warnings.push((index, out.clipped));
        }
        if model.predict(&out.image)? == ex.label {
            set.dropped_attack_failed += 1;
            continue;
        }
        let noisy = uniform_noise(&ex.image, attack.epsilon(), seed.derive(index as u64))?;
        set.triplets.push(ExampleTriplet {
            clean: ex.clone(),
            noisy,
            adversarial: out.image,
            attack_name: name.clone(),
            epsilon: attack.epsilon(),
        });
        set.source_indices.push(index);
    }
    if set.triplets.is_empty() {
        return Err(Error::protocol(format!(
            "attack `{name}` produced no usable triplets ({} misclassified, {} attacks failed)",
            set.dropped_misclassified, set.dropped_attack_failed
        )));
    }
    Ok(set)
}
