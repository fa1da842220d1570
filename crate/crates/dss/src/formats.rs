//! Text formats: tensor CSV blocks, feature matrices, detector checkpoints,
//! triplet stores and trajectory dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dss_core::attacks::TripletSet;
use dss_core::monitor::{Detector, FeatureTable, LogisticConfig};
use dss_core::stability::{DisruptionMask, Trajectory};
use dss_core::tensor::ExampleTriplet;
use dss_core::{ImageTensor, LabeledExample, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{DssError, Result};

const SHAPE_PREFIX: &str = "# shape=";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DssError::io(path, e))
}

/// One `# shape=C,H,W` line followed by one comma-separated row per tensor.
/// Values use Rust's shortest round-trip formatting, so reading back is
/// bit-exact.
pub fn encode_tensor_block(shape: Shape, tensors: &[&Tensor]) -> String {
    let mut out = format!("{SHAPE_PREFIX}{},{},{}\n", shape.channels, shape.height, shape.width);
    for t in tensors {
        debug_assert_eq!(t.shape(), shape);
        for (i, v) in t.data().iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

fn parse_shape(path: &Path, line: &str) -> Result<Shape> {
    let dims: Vec<usize> = line
        .trim_start_matches(SHAPE_PREFIX)
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| DssError::format(path, format!("bad shape header `{line}`")))?;
    match dims[..] {
        [c, h, w] => Ok(Shape::new(c, h, w)?),
        _ => Err(DssError::format(path, format!("shape header `{line}` needs three dimensions"))),
    }
}

/// Parses every block in `text`. Each block starts with a shape header.
pub fn decode_tensor_blocks(path: &Path, text: &str) -> Result<Vec<(Shape, Vec<Tensor>)>> {
    let mut blocks: Vec<(Shape, Vec<Tensor>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with(SHAPE_PREFIX) {
            blocks.push((parse_shape(path, line)?, Vec::new()));
            continue;
        }
        let Some((shape, rows)) = blocks.last_mut() else {
            return Err(DssError::format(path, "tensor CSV must start with a `# shape=C,H,W` line"));
        };
        let values: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DssError::format(path, format!("line {}: {e}", lineno + 1)))?;
        if values.len() != shape.len() {
            return Err(DssError::format(
                path,
                format!("line {}: {} values for shape {shape}", lineno + 1, values.len()),
            ));
        }
        rows.push(Tensor::new(*shape, values)?);
    }
    Ok(blocks)
}

/// A file holding exactly one tensor block.
pub fn read_tensors(path: impl AsRef<Path>) -> Result<(Shape, Vec<Tensor>)> {
    let path = path.as_ref();
    let mut blocks = decode_tensor_blocks(path, &read_text(path)?)?;
    if blocks.len() != 1 {
        return Err(DssError::format(path, format!("expected one tensor block, found {}", blocks.len())));
    }
    Ok(blocks.pop().expect("one block"))
}

pub fn write_tensors(path: impl AsRef<Path>, shape: Shape, tensors: &[&Tensor]) -> Result<()> {
    write_atomic(path.as_ref(), encode_tensor_block(shape, tensors).as_bytes())
}

pub fn read_images(path: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    let path = path.as_ref();
    let (_, tensors) = read_tensors(path)?;
    tensors
        .into_iter()
        .map(|t| ImageTensor::try_from(t).map_err(|e| DssError::format(path, e.to_string())))
        .collect()
}

pub fn mask_tensor(mask: &DisruptionMask) -> Tensor {
    let shape = Shape::new(1, mask.height(), mask.width()).expect("mask dimensions are positive");
    Tensor::new(shape, mask.bits().iter().map(|&b| f64::from(b)).collect()).expect("mask length matches")
}

pub fn tensor_mask(path: &Path, t: &Tensor) -> Result<DisruptionMask> {
    let bits = t
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(DssError::format(path, format!("mask entry {v} is not 0 or 1")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(DisruptionMask::from_bits(t.shape().height, t.shape().width, bits)?)
}

// ---- feature matrices ----

pub fn encode_features(table: &FeatureTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DssError::format(Path::new("<features>"), e.to_string());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in &table.records {
        let mut row = vec![r.id.clone(), r.label.to_string()];
        row.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| DssError::format(Path::new("<features>"), e.to_string()))
}

pub fn write_features(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    write_atomic(path.as_ref(), &encode_features(table)?)
}

/// Header `id,label,<columns...>`. A file with only `id,label` yields a
/// table with no feature columns.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| DssError::format(path, e.to_string());
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "label" {
        return Err(DssError::format(path, "feature CSV header must start with `id,label`"));
    }
    let mut table = FeatureTable::new(header.iter().skip(2).map(str::to_string).collect());
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| DssError::format(path, format!("row {}: bad {what}", row + 1));
        let label: u8 = rec[1].parse().map_err(|_| bad("label"))?;
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<f64>>>()?;
        table.push(rec[0].to_string(), label, values)?;
    }
    Ok(table)
}

// ---- detector checkpoints ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectorFile {
    format: String,
    columns: Vec<String>,
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
    learning_rate: f64,
    max_epochs: usize,
    tolerance: f64,
    epochs: usize,
}

const DETECTOR_FORMAT: &str = "dss-detector-v1";

pub fn encode_detector(d: &Detector) -> String {
    let file = DetectorFile {
        format: DETECTOR_FORMAT.into(),
        columns: d.columns.clone(),
        weights: d.weights.clone(),
        bias: d.bias,
        mean: d.mean.clone(),
        std: d.std.clone(),
        learning_rate: d.config.learning_rate,
        max_epochs: d.config.max_epochs,
        tolerance: d.config.tolerance,
        epochs: d.epochs,
    };
    serde_json::to_string_pretty(&file).expect("detector serializes")
}

pub fn decode_detector(path: &Path, text: &str) -> Result<Detector> {
    let f: DetectorFile = serde_json::from_str(text).map_err(|e| DssError::format(path, e.to_string()))?;
    if f.format != DETECTOR_FORMAT {
        return Err(DssError::format(path, format!("unknown detector format `{}`", f.format)));
    }
    let d = f.columns.len();
    if f.weights.len() != d || f.mean.len() != d || f.std.len() != d {
        return Err(DssError::format(path, "detector vectors disagree with its column list"));
    }
    Ok(Detector {
        columns: f.columns,
        weights: f.weights,
        bias: f.bias,
        mean: f.mean,
        std: f.std,
        config: LogisticConfig { learning_rate: f.learning_rate, max_epochs: f.max_epochs, tolerance: f.tolerance },
        epochs: f.epochs,
    })
}

pub fn save_detector(path: impl AsRef<Path>, d: &Detector) -> Result<()> {
    write_atomic(path.as_ref(), encode_detector(d).as_bytes())
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<Detector> {
    let path = path.as_ref();
    decode_detector(path, &read_text(path)?)
}

// ---- triplet stores ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub attack: String,
    pub epsilon: f64,
    pub step_size: Option<f64>,
    pub iterations: Option<usize>,
    pub random_start: Option<bool>,
    pub seed: u64,
    pub dropped_misclassified: usize,
    pub dropped_attack_failed: usize,
    /// `(source index, clipped values)` for attack outputs pulled back into range.
    pub range_warnings: Vec<(usize, usize)>,
    pub source_indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Attack settings recorded in `meta.json` alongside the drop counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackRecord {
    pub step_size: Option<f64>,
    pub iterations: Option<usize>,
    pub random_start: Option<bool>,
    pub seed: u64,
}

pub fn save_triplets(dir: impl AsRef<Path>, set: &TripletSet, record: AttackRecord) -> Result<()> {
    let dir = dir.as_ref();
    let first = set.triplets.first().ok_or_else(|| DssError::config("refusing to store an empty triplet set"))?;
    let shape = first.clean.image.shape();
    let pick = |f: fn(&ExampleTriplet) -> &Tensor| set.triplets.iter().map(f).collect::<Vec<&Tensor>>();
    write_tensors(dir.join("clean.csv"), shape, &pick(|t| &t.clean.image))?;
    write_tensors(dir.join("noisy.csv"), shape, &pick(|t| &t.noisy))?;
    write_tensors(dir.join("adv.csv"), shape, &pick(|t| &t.adversarial))?;
    let meta = TripletMeta {
        attack: first.attack_name.clone(),
        epsilon: first.epsilon,
        step_size: record.step_size,
        iterations: record.iterations,
        random_start: record.random_start,
        seed: record.seed,
        dropped_misclassified: set.dropped_misclassified,
        dropped_attack_failed: set.dropped_attack_failed,
        range_warnings: set.range_warnings.clone(),
        source_indices: set.source_indices.clone(),
        labels: set.triplets.iter().map(|t| t.clean.label).collect(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join("meta.json"), json.as_bytes())
}

pub fn load_triplets(dir: impl AsRef<Path>) -> Result<(TripletSet, TripletMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: TripletMeta =
        serde_json::from_str(&read_text(&meta_path)?).map_err(|e| DssError::format(&meta_path, e.to_string()))?;
    let clean = read_images(dir.join("clean.csv"))?;
    let noisy = read_images(dir.join("noisy.csv"))?;
    let adv = read_images(dir.join("adv.csv"))?;
    let n = meta.labels.len();
    if clean.len() != n || noisy.len() != n || adv.len() != n || meta.source_indices.len() != n {
        return Err(DssError::format(dir, "triplet files disagree on the number of triplets"));
    }
    let triplets = clean
        .into_iter()
        .zip(noisy)
        .zip(adv)
        .zip(&meta.labels)
        .map(|(((c, nz), a), &label)| ExampleTriplet {
            clean: LabeledExample::new(c, label),
            noisy: nz,
            adversarial: a,
            attack_name: meta.attack.clone(),
            epsilon: meta.epsilon,
        })
        .collect();
    let set = TripletSet {
        triplets,
        source_indices: meta.source_indices.clone(),
        dropped_misclassified: meta.dropped_misclassified,
        dropped_attack_failed: meta.dropped_attack_failed,
        range_warnings: meta.range_warnings.clone(),
    };
    Ok((set, meta))
}

// ---- trajectory dumps ----

/// `state_t.csv` for t = 0..n, `gen_t.csv` and `mask_t.csv` for t = 1..n,
/// and `Lt.csv` with one `t,L` row per loop.
pub fn save_trajectory(dir: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let dir = dir.as_ref();
    traj.validate()?;
    let shape = traj.origin().shape();
    for (t, s) in traj.states.iter().enumerate() {
        write_tensors(dir.join(format!("state_{t}.csv")), shape, &[s])?;
    }
    for (i, (g, m)) in traj.generated.iter().zip(&traj.masks).enumerate() {
        let t = i + 1;
        write_tensors(dir.join(format!("gen_{t}.csv")), shape, &[g])?;
        let mt = mask_tensor(m);
        write_tensors(dir.join(format!("mask_{t}.csv")), mt.shape(), &[&mt])?;
    }
    let mut lt = String::from("t,L\n");
    for (i, l) in traj.state_vars.iter().enumerate() {
        writeln!(lt, "{},{l}", i + 1).expect("writing to a String");
    }
    write_atomic(&dir.join("Lt.csv"), lt.as_bytes())
}

pub fn load_trajectory(dir: impl AsRef<Path>) -> Result<Trajectory> {
    let dir = dir.as_ref();
    let lt_path = dir.join("Lt.csv");
    let state_vars = read_text(&lt_path)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(',')
                .and_then(|(_, v)| v.trim().parse::<f64>().ok())
                .ok_or_else(|| DssError::format(&lt_path, format!("bad row `{l}`")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let one = |name: String| -> Result<ImageTensor> {
        let mut v = read_images(dir.join(&name))?;
        match v.len() {
            1 => Ok(v.pop().expect("one image")),
            k => Err(DssError::format(&dir.join(name), format!("expected one image, found {k}"))),
        }
    };
    let n = state_vars.len();
    let states = (0..=n).map(|t| one(format!("state_{t}.csv"))).collect::<Result<Vec<_>>>()?;
    let generated = (1..=n).map(|t| one(format!("gen_{t}.csv"))).collect::<Result<Vec<_>>>()?;
    let masks = (1..=n)
        .map(|t| {
            let p = dir.join(format!("mask_{t}.csv"));
            let (_, mut ts) = read_tensors(&p)?;
            let m = ts.pop().ok_or_else(|| DssError::format(&p, "empty mask file"))?;
            tensor_mask(&p, &m)
        })
        .collect::<Result<Vec<_>>>()?;
    let traj = Trajectory { states, generated, masks, state_vars };
    traj.validate()?;
    Ok(traj)
}
