//! The monitor module: stability features, the logistic-regression detector
//! and ROC analysis.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{sigmoid, Classifier};
use crate::rng::RandomSeed;
use crate::stability::Trajectory;
use crate::tensor::Norm;

/// Detection label: adversarial inputs are positives, clean and noisy inputs
/// negatives.
pub const ADVERSARIAL: u8 = 1;
pub const BENIGN: u8 = 0;

/// The four deviation families recorded per loop, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    PixelComposed,
    PixelGenerated,
    LogitComposed,
    LogitGenerated,
}

impl Family {
    pub const ALL: [Family; 4] =
        [Family::PixelComposed, Family::PixelGenerated, Family::LogitComposed, Family::LogitGenerated];

    pub fn tag(self) -> &'static str {
        match self {
            Family::PixelComposed => "pix_comp",
            Family::PixelGenerated => "pix_gen",
            Family::LogitComposed => "logit_comp",
            Family::LogitGenerated => "logit_gen",
        }
    }
}

/// Column names `t{t}_{family}_{norm}`: loop-major, then family, then norm.
pub fn feature_columns(loops: usize, norms: &[Norm]) -> Vec<String> {
    let mut cols = Vec::with_capacity(4 * loops * norms.len());
    for t in 1..=loops {
        for family in Family::ALL {
            for norm in norms {
                cols.push(format!("t{t}_{}_{}", family.tag(), norm.tag()));
            }
        }
    }
    cols
}

fn check_norms(norms: &[Norm]) -> Result<()> {
    if norms.is_empty() {
        return Err(Error::invalid("at least one norm order is required"));
    }
    Ok(())
}

/// Pixel-space and logit-space distances of every composed state `x_t` and
/// every restoration `x_hat_t` from the origin `x_0`, laid out as
/// [`feature_columns`].
pub fn extract_features<C: Classifier + ?Sized>(model: &C, trajectory: &Trajectory, norms: &[Norm]) -> Result<Vec<f64>> {
    check_norms(norms)?;
    trajectory.validate()?;
    let origin = trajectory.origin();
    let origin_logits = model.forward(origin)?;
    let mut out = Vec::with_capacity(4 * trajectory.loops() * norms.len());
    for (state, gen) in trajectory.states[1..].iter().zip(&trajectory.generated) {
        let state_logits = model.forward(state)?;
        let gen_logits = model.forward(gen)?;
        let pairs: [(&[f64], &[f64]); 4] = [
            (state.data(), origin.data()),
            (gen.data(), origin.data()),
            (&state_logits, &origin_logits),
            (&gen_logits, &origin_logits),
        ];
        for (a, b) in pairs {
            for norm in norms {
                out.push(norm.distance(a, b));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: u8,
    pub values: Vec<f64>,
}

/// Named feature columns plus one row per example.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    pub records: Vec<FeatureRecord>,
}

/// Which feature families a detector sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureView {
    Pixel,
    Logit,
    Both,
}

impl FeatureView {
    pub fn name(self) -> &'static str {
        match self {
            FeatureView::Pixel => "pixel",
            FeatureView::Logit => "logit",
            FeatureView::Both => "both",
        }
    }

    fn keeps(self, column: &str) -> bool {
        match self {
            FeatureView::Pixel => column.contains("_pix_"),
            FeatureView::Logit => column.contains("_logit_"),
            FeatureView::Both => true,
        }
    }
}

impl FeatureTable {
    pub fn new(columns: Vec<String>) -> Self {
        FeatureTable { columns, records: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, label: u8, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "record has {} features, table has {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if label > 1 {
            return Err(Error::invalid(format!("detection label must be 0 or 1, got {label}")));
        }
        self.records.push(FeatureRecord { id: id.into(), label, values });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Keeps only the columns of `view`.
    pub fn select(&self, view: FeatureView) -> FeatureTable {
        let keep: Vec<usize> = (0..self.columns.len()).filter(|&i| view.keeps(&self.columns[i])).collect();
        FeatureTable {
            columns: keep.iter().map(|&i| self.columns[i].clone()).collect(),
            records: self
                .records
                .iter()
                .map(|r| FeatureRecord {
                    id: r.id.clone(),
                    label: r.label,
                    values: keep.iter().map(|&i| r.values[i]).collect(),
                })
                .collect(),
        }
    }

    /// Records at the given positions, in that order.
    pub fn subset(&self, indices: &[usize]) -> FeatureTable {
        FeatureTable {
            columns: self.columns.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label == ADVERSARIAL).count();
        (pos, self.records.len() - pos)
    }
}

/// Appends `external`'s columns (prefixed `ext_`) to `ours`, matching rows by
/// id. Every id in `ours` must appear exactly once in `external`.
pub fn merge_features(ours: &FeatureTable, external: &FeatureTable) -> Result<FeatureTable> {
    if external.columns.is_empty() {
        return Ok(ours.clone());
    }
    let mut by_id: BTreeMap<&str, &FeatureRecord> = BTreeMap::new();
    for r in &external.records {
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(Error::invalid(format!("external features repeat id `{}`", r.id)));
        }
    }
    let missing: Vec<String> =
        ours.records.iter().filter(|r| !by_id.contains_key(r.id.as_str())).map(|r| r.id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::Alignment(missing));
    }
    let mut columns = ours.columns.clone();
    columns.extend(external.columns.iter().map(|c| format!("ext_{c}")));
    let records = ours
        .records
        .iter()
        .map(|r| {
            let mut values = r.values.clone();
            values.extend_from_slice(&by_id[r.id.as_str()].values);
            FeatureRecord { id: r.id.clone(), label: r.label, values }
        })
        .collect();
    Ok(FeatureTable { columns, records })
}

/// Full-batch gradient descent settings for the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the gradient's Euclidean norm drops below this.
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { learning_rate: 0.1, max_epochs: 5000, tolerance: 1e-6 }
    }
}

/// Logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub columns: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    /// Per-feature scale; constant training columns store 1.
    pub std: Vec<f64>,
    pub config: LogisticConfig,
    /// Epochs actually run.
    pub epochs: usize,
}

impl Detector {
    fn standardize(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "detector expects {} features, got {}",
                self.weights.len(),
                values.len()
            )));
        }
        Ok(values.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }

    /// `w . standardize(x) + b`, the log-odds of being adversarial.
    pub fn decision(&self, values: &[f64]) -> Result<f64> {
        let z = self.standardize(values)?;
        Ok(self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Confirms a table carries the columns this detector was trained on.
    pub fn check_columns(&self, columns: &[String]) -> Result<()> {
        if columns != self.columns.as_slice() {
            return Err(Error::invalid("feature columns differ from those the detector was trained on"));
        }
        Ok(())
    }

    /// Decision values for every record of `table`.
    pub fn decisions(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        self.check_columns(&table.columns)?;
        table.records.iter().map(|r| self.decision(&r.values)).collect()
    }
}

/// `sigmoid(w . standardize(x) + b)`; closer to 1 means more likely
/// adversarial.
pub fn score(detector: &Detector, values: &[f64]) -> Result<f64> {
    // keep the output strictly inside (0, 1)
    Ok(sigmoid(detector.decision(values)?.clamp(-36.0, 36.0)))
}

/// Fits standardization and logistic weights on every record of `table`.
pub fn fit_detector(table: &FeatureTable, config: &LogisticConfig) -> Result<Detector> {
    let (pos, neg) = table.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::protocol(format!(
            "detector training needs both classes, got {pos} adversarial and {neg} benign"
        )));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::invalid("detector learning rate must be positive"));
    }
    let n = table.len();
    let d = table.columns.len();
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for r in &table.records {
        for (m, v) in mean.iter_mut().zip(&r.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut std = vec![0.0; d];
    for r in &table.records {
        for ((s, v), m) in std.iter_mut().zip(&r.values).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = libm::sqrt(*s / nf);
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    let xs: Vec<Vec<f64>> = table
        .records
        .iter()
        .map(|r| r.values.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let ys: Vec<f64> = table.records.iter().map(|r| f64::from(r.label)).collect();

    let mut weights = vec![0.0; d];
    let mut bias = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut epochs = 0;
    while epochs < config.max_epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let z = bias + x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
            let resid = sigmoid(z) - y;
            grad_b += resid;
            for (g, v) in grad_w.iter_mut().zip(x) {
                *g += resid * v;
            }
        }
        grad_b /= nf;
        grad_w.iter_mut().for_each(|g| *g /= nf);
        let norm = libm::sqrt(grad_b * grad_b + grad_w.iter().map(|g| g * g).sum::<f64>());
        if norm < config.tolerance {
            break;
        }
        bias -= config.learning_rate * grad_b;
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= config.learning_rate * g;
        }
        epochs += 1;
    }
    Ok(Detector { columns: table.columns.clone(), weights, bias, mean, std, config: *config, epochs })
}

/// Seeded train / held-out partition of a table's record positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Shuffles record positions with `seed` and puts the first
/// `round(train_fraction * n)` into the training part.
pub fn split_indices(n: usize, seed: RandomSeed, train_fraction: f64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.rng());
    let cut = libm::round(train_fraction * n as f64) as usize;
    let held_out = order.split_off(cut);
    Ok(Split { train: order, held_out })
}

/// Splits `table`, fits a detector on the training part, and returns it
/// with the untouched held-out records.
pub fn train_detector(
    table: &FeatureTable,
    split_seed: RandomSeed,
    train_fraction: f64,
    config: &LogisticConfig,
) -> Result<(Detector, FeatureTable)> {
    let (pos, neg) = table.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::protocol("feature table holds a single class"));
    }
    let split = split_indices(table.len(), split_seed, train_fraction)?;
    let detector = fit_detector(&table.subset(&split.train), config)?;
    Ok((detector, table.subset(&split.held_out)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub auc: f64,
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`,
    /// one point per distinct score.
    pub points: Vec<(f64, f64)>,
}

impl RocResult {
    /// Area under `points` by the trapezoid rule.
    pub fn trapezoid_area(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
    }
}

/// ROC curve and AUC, the latter as the Mann-Whitney statistic: the fraction
/// of (positive, negative) pairs with the positive scored higher, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == ADVERSARIAL).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC analysis needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // twice the number of concordant pairs, so half-ties stay integral
    let mut doubled: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == ADVERSARIAL {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        doubled += gn * (2 * tp + gp);
        tp += gp;
        fp += gn;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(RocResult { auc: doubled as f64 / (2 * pos * neg) as f64, points })
}

/// Reads the stability label of an id's role, for callers that encode roles
/// in ids.
pub fn role_label(role: &str) -> Option<u8> {
    match role {
        "adv" | "adversarial" => Some(ADVERSARIAL),
        "clean" | "noisy" => Some(BENIGN),
        _ => None,
    }
}

impl core::fmt::Display for FeatureView {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for FeatureView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" | "P" => Ok(FeatureView::Pixel),
            "logit" | "L" => Ok(FeatureView::Logit),
            "both" | "PL" => Ok(FeatureView::Both),
            other => Err(Error::invalid(format!("unknown feature view `{other}`"))),
        }
    }
}
