//! End-to-end experiments: triplets, DSS trajectories, features, detectors
//! and the report directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dss_core::attacks::{build_triplets, Attack, ExternalAttack, TripletSet};
use dss_core::dynamics::{stability_residual, vdot};
use dss_core::inpaint::{ExternalRestorer, HarmonicInpainter, Restorer};
use dss_core::model::{accuracy, train_classifier, Architecture};
use dss_core::monitor::{
    extract_features, feature_columns, fit_detector, roc_auc, split_indices, Detector, FeatureTable, FeatureView,
    RocResult, Split, ADVERSARIAL, BENIGN,
};
use dss_core::stability::{run_dss, DssConfig, Trajectory};
use dss_core::tensor::Norm;
use dss_core::{Classifier, ImageTensor, LabeledExample, Network, RandomSeed, Shape};
use serde::Serialize;

use crate::adapters::{RecordedAttack, SubprocessAttack, SubprocessRestorer};
use crate::checkpoint::{load_model, write_atomic};
use crate::config::{streams, AttackSpec, DetectorSettings, ExperimentConfig, RestorerSettings};
use crate::data::load_labeled;
use crate::error::{DssError, Result, StageExt};
use crate::formats::{encode_detector, encode_features};

/// Which member of a triplet a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Adversarial,
    Clean,
    Noisy,
}

impl Role {
    /// Record order within a triplet; matches the lexical order of the ids.
    pub const ALL: [Role; 3] = [Role::Adversarial, Role::Clean, Role::Noisy];

    pub fn tag(self) -> &'static str {
        match self {
            Role::Adversarial => "adv",
            Role::Clean => "clean",
            Role::Noisy => "noisy",
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Role::Adversarial => ADVERSARIAL,
            Role::Clean | Role::Noisy => BENIGN,
        }
    }
}

/// Record id: zero-padded source index, then the role.
pub fn record_id(source: usize, role: Role) -> String {
    format!("{source:06}-{}", role.tag())
}

/// Per-loop L2 distances of the composed states from the origin, t = 0..n.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordDistances {
    pub id: String,
    pub role: Role,
    pub pixel: Vec<f64>,
    pub logit: Vec<f64>,
}

pub fn trajectory_distances<C: Classifier + ?Sized>(model: &C, traj: &Trajectory) -> Result<(Vec<f64>, Vec<f64>)> {
    let origin = traj.origin();
    let origin_logits = model.forward(origin)?;
    let mut pixel = Vec::with_capacity(traj.states.len());
    let mut logit = Vec::with_capacity(traj.states.len());
    for s in &traj.states {
        pixel.push(Norm::L2.distance(s.data(), origin.data()));
        logit.push(Norm::L2.distance(&model.forward(s)?, &origin_logits));
    }
    Ok((pixel, logit))
}

/// Stability features of every triplet member plus the Fig.-6 distances.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityData {
    pub table: FeatureTable,
    pub distances: Vec<RecordDistances>,
}

impl StabilityData {
    /// Scores and labels of one scalar: `pixel[t]` over every record.
    pub fn pixel_distance_at(&self, t: usize) -> (Vec<f64>, Vec<u8>) {
        self.distances.iter().map(|d| (d.pixel[t], d.role.label())).unzip()
    }

    pub fn mean_pixel_distance(&self, role: Role, t: usize) -> f64 {
        let v: Vec<f64> = self.distances.iter().filter(|d| d.role == role).map(|d| d.pixel[t]).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// A fitted detector with the split it was fitted on and its held-out
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub split: Split,
    pub detector: Detector,
    pub held_out: FeatureTable,
    pub decisions: Vec<f64>,
    pub roc: RocResult,
}

/// Seeded split, detector fit on the training part, ROC on the held-out part.
/// AUC is computed on the decision values, which rank exactly like the
/// sigmoid scores but cannot saturate into ties.
pub fn detect(table: &FeatureTable, seed: RandomSeed, settings: &DetectorSettings) -> Result<Detection> {
    let split = split_indices(table.len(), seed, settings.train_fraction)?;
    let detector = fit_detector(&table.subset(&split.train), &settings.logistic())?;
    let held_out = table.subset(&split.held_out);
    let decisions = detector.decisions(&held_out)?;
    let roc = roc_auc(&decisions, &held_out.labels())?;
    Ok(Detection { split, detector, held_out, decisions, roc })
}

/// Everything produced for one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRun {
    pub name: String,
    pub spec: AttackSpec,
    pub triplets: TripletSet,
    pub stability: StabilityData,
    pub detection: Detection,
}

impl AttackRun {
    pub fn auc(&self) -> f64 {
        self.detection.roc.auc
    }
}

/// Loaded data, model and restorer for one configuration.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub model: Network,
    pub examples: Vec<LabeledExample>,
    restorer: Box<dyn Restorer + Send + Sync>,
}

fn make_restorer(settings: &RestorerSettings) -> Box<dyn Restorer + Send + Sync> {
    match settings {
        RestorerSettings::Harmonic { max_iterations, tolerance } => {
            Box::new(HarmonicInpainter { max_iterations: *max_iterations, tolerance: *tolerance })
        }
        RestorerSettings::Command { name, command } => {
            Box::new(ExternalRestorer(SubprocessRestorer { name: name.clone(), command: command.clone() }))
        }
    }
}

fn load_examples(config: &ExperimentConfig) -> Result<Vec<LabeledExample>> {
    let all = load_labeled(&config.data.images, &config.data.labels)?;
    let end = config.data.offset + config.data.examples;
    if end > all.len() {
        return Err(DssError::config(format!(
            "data asks for examples {}..{end} but the files hold {}",
            config.data.offset,
            all.len()
        )));
    }
    Ok(all[config.data.offset..end].to_vec())
}

/// The configured model: a checkpoint, or a fresh training run.
pub fn resolve_model(config: &ExperimentConfig) -> Result<Network> {
    if let Some(path) = &config.model.checkpoint {
        return load_model(path);
    }
    let t = config.model.train.as_ref().ok_or_else(|| DssError::config("model source missing"))?;
    let train = load_labeled(&t.images, &t.labels)?;
    let shape = train.first().map(|e| e.image.shape()).ok_or_else(|| DssError::config("training set is empty"))?;
    let classes = train.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Ok(train_classifier(
        &train,
        Architecture::lenet(shape, classes.max(2)),
        &t.train_config(config.seed(streams::TRAIN)),
        |_, _| {},
    )?)
}

impl Pipeline {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = resolve_model(&config).stage("model")?;
        Self::with_model(config, model)
    }

    /// Uses an already loaded model instead of the configured source.
    pub fn with_model(config: ExperimentConfig, model: Network) -> Result<Self> {
        config.validate()?;
        let examples = load_examples(&config).stage("load-data")?;
        if let Some(bad) = examples.iter().find(|e| e.image.shape() != model.input_shape()) {
            return Err(DssError::config(format!(
                "data shape {} does not match the model input {}",
                bad.image.shape(),
                model.input_shape()
            )));
        }
        let restorer = make_restorer(&config.restorer);
        Ok(Pipeline { config, model, examples, restorer })
    }

    pub fn restorer(&self) -> &dyn Restorer {
        self.restorer.as_ref()
    }

    pub fn build_triplets(&self, spec: &AttackSpec) -> Result<TripletSet> {
        let noise_seed = self.config.seed(streams::NOISE);
        let attack: Box<dyn Attack> = match spec {
            AttackSpec::Fgsm { .. } | AttackSpec::Pgd { .. } => {
                Box::new(spec.native(self.config.seed(streams::ATTACK)).expect("native attack"))
            }
            AttackSpec::Command { name, epsilon, command, reentrant } => Box::new(ExternalAttack {
                adapter: SubprocessAttack::new(name.clone(), command.clone(), *reentrant),
                epsilon: *epsilon,
            }),
            AttackSpec::Recorded { name, epsilon, adversarial } => Box::new(ExternalAttack {
                adapter: RecordedAttack::load(name.clone(), adversarial)?,
                epsilon: *epsilon,
            }),
        };
        let mut set = build_triplets(&self.model, &self.examples, attack.as_ref(), noise_seed)?;
        for t in &mut set.triplets {
            t.attack_name = spec.name();
        }
        Ok(set)
    }

    pub fn run_dss(&self, x: &ImageTensor, dss: &DssConfig) -> Result<Trajectory> {
        Ok(run_dss(&self.model, self.restorer(), x, dss)?)
    }

    /// Runs DSS on every clean, noisy and adversarial image. Records are
    /// ordered by id.
    pub fn stability(&self, triplets: &TripletSet, dss: &DssConfig) -> Result<StabilityData> {
        let norms = self.config.norms()?;
        let mut table = FeatureTable::new(feature_columns(dss.loops, &norms));
        let mut distances = Vec::with_capacity(3 * triplets.triplets.len());
        for (t, &source) in triplets.triplets.iter().zip(&triplets.source_indices) {
            for role in Role::ALL {
                let x = match role {
                    Role::Adversarial => &t.adversarial,
                    Role::Clean => &t.clean.image,
                    Role::Noisy => &t.noisy,
                };
                let traj = self.run_dss(x, dss)?;
                let id = record_id(source, role);
                table.push(id.clone(), role.label(), extract_features(&self.model, &traj, &norms)?)?;
                let (pixel, logit) = trajectory_distances(&self.model, &traj)?;
                distances.push(RecordDistances { id, role, pixel, logit });
            }
        }
        Ok(StabilityData { table, distances })
    }

    pub fn detect(&self, table: &FeatureTable) -> Result<Detection> {
        detect(table, self.config.seed(streams::SPLIT), &self.config.detector)
    }

    /// Triplets, trajectories, features and a held-out evaluation for one
    /// attack, using the configured DSS settings.
    pub fn run_attack(&self, spec: &AttackSpec) -> Result<AttackRun> {
        let triplets = self.build_triplets(spec).stage("attack")?;
        self.run_attack_on(spec, triplets, &self.config.dss.dss_config())
    }

    pub fn run_attack_on(&self, spec: &AttackSpec, triplets: TripletSet, dss: &DssConfig) -> Result<AttackRun> {
        let stability = self.stability(&triplets, dss).stage("dss")?;
        let detection = self.detect(&stability.table).stage("detector")?;
        Ok(AttackRun { name: spec.name(), spec: spec.clone(), triplets, stability, detection })
    }

    /// Accuracy of the model on the configured examples.
    pub fn model_accuracy(&self) -> Result<f64> {
        Ok(accuracy(&self.model, &self.examples)?)
    }
}

// ---- report directory ----

/// Output directory built under a `.partial` sibling and renamed into place
/// on success. A failed run leaves the partial directory for inspection.
pub struct OutputDir {
    final_path: PathBuf,
    staging: PathBuf,
}

impl OutputDir {
    pub fn create(final_path: &Path) -> Result<Self> {
        let name = final_path
            .file_name()
            .ok_or_else(|| DssError::config(format!("output path `{}` has no name", final_path.display())))?;
        let staging = final_path.with_file_name(format!("{}.partial", name.to_string_lossy()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| DssError::io(&staging, e))?;
        }
        fs::create_dir_all(staging.join("report")).map_err(|e| DssError::io(&staging, e))?;
        Ok(OutputDir { final_path: final_path.to_path_buf(), staging })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.staging.join(rel)
    }

    pub fn write(&self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
        write_atomic(&self.path(rel), bytes.as_ref())
    }

    /// Replaces an earlier report at the final path; refuses to replace
    /// anything that is not one.
    pub fn commit(self) -> Result<PathBuf> {
        if self.final_path.exists() {
            if !self.final_path.join("report").join("provenance.json").exists() {
                return Err(DssError::config(format!(
                    "output directory `{}` exists and does not hold a previous report",
                    self.final_path.display()
                )));
            }
            fs::remove_dir_all(&self.final_path).map_err(|e| DssError::io(&self.final_path, e))?;
        }
        fs::rename(&self.staging, &self.final_path).map_err(|e| DssError::io(&self.final_path, e))?;
        Ok(self.final_path)
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    schema: &'a str,
    config_sha256: String,
    model_parameters_sha256: String,
    seeds: SeedRecord,
    study: &'a str,
    tool_version: &'a str,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct SeedRecord {
    experiment: u64,
    noise: u64,
    attack: u64,
    split: u64,
}

fn params_hash(model: &Network) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in model.params() {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn write_provenance(out: &OutputDir, pipeline: &Pipeline, study: &str) -> Result<()> {
    let c = &pipeline.config;
    let prov = Provenance {
        schema: "dss-report-v1",
        config_sha256: c.hash(),
        model_parameters_sha256: params_hash(&pipeline.model),
        seeds: SeedRecord {
            experiment: c.seed,
            noise: c.seed(streams::NOISE).0,
            attack: c.seed(streams::ATTACK).0,
            split: c.seed(streams::SPLIT).0,
        },
        study,
        tool_version: env!("CARGO_PKG_VERSION"),
        config: c,
    };
    out.write("report/provenance.json", serde_json::to_string_pretty(&prov).expect("provenance serializes"))
}

pub fn roc_csv(roc: &RocResult) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in &roc.points {
        writeln!(s, "{f},{t}").expect("writing to a String");
    }
    s
}

fn split_csv(run: &AttackRun) -> String {
    let table = &run.stability.table;
    let mut rows: Vec<(&str, &str)> = run
        .detection
        .split
        .train
        .iter()
        .map(|&i| (table.records[i].id.as_str(), "train"))
        .chain(run.detection.split.held_out.iter().map(|&i| (table.records[i].id.as_str(), "held_out")))
        .collect();
    rows.sort_unstable();
    let mut s = String::from("id,partition\n");
    for (id, part) in rows {
        writeln!(s, "{id},{part}").expect("writing to a String");
    }
    s
}

pub fn auc_csv(runs: &[AttackRun]) -> String {
    let mut s = String::from("attack,epsilon,triplets,train_records,held_out_records,auc\n");
    for r in runs {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.name,
            r.spec.epsilon(),
            r.triplets.triplets.len(),
            r.detection.split.train.len(),
            r.detection.split.held_out.len(),
            r.auc()
        )
        .expect("writing to a String");
    }
    s
}

/// Per-attack artifacts: features, split provenance, detector, ROC.
fn write_run(out: &OutputDir, run: &AttackRun) -> Result<()> {
    out.write(format!("features/{}.csv", run.name), encode_features(&run.stability.table)?)?;
    out.write(format!("splits/{}.csv", run.name), split_csv(run))?;
    out.write(format!("detectors/{}.json", run.name), encode_detector(&run.detection.detector))?;
    out.write(format!("report/roc_{}.csv", run.name), roc_csv(&run.detection.roc))
}

// ---- divergence ----

/// Mean composed-state distance from the origin per loop and class, in pixel
/// and logit space. `groups` holds `(attack, class, per-record distances)`.
pub fn emit_divergence_report(groups: &[(&str, &str, Vec<&RecordDistances>)]) -> Result<String> {
    let mut s = String::from("attack,loop,class,mean_pixel_l2,mean_logit_l2,count\n");
    for (attack, class, records) in groups {
        let first = records
            .first()
            .ok_or_else(|| DssError::config(format!("class `{class}` of `{attack}` has no trajectories")))?;
        let loops = first.pixel.len();
        if records.iter().any(|r| r.pixel.len() != loops || r.logit.len() != loops) {
            return Err(DssError::config(format!("trajectories of `{attack}` differ in length")));
        }
        let n = records.len() as f64;
        for t in 0..loops {
            let p = records.iter().map(|r| r.pixel[t]).sum::<f64>() / n;
            let l = records.iter().map(|r| r.logit[t]).sum::<f64>() / n;
            writeln!(s, "{attack},{t},{class},{p},{l},{}", records.len()).expect("writing to a String");
        }
    }
    Ok(s)
}

pub fn divergence_groups(runs: &[AttackRun]) -> Vec<(&str, &str, Vec<&RecordDistances>)> {
    let mut groups = Vec::new();
    for run in runs {
        for (role, class) in [(Role::Clean, "clean"), (Role::Noisy, "noisy"), (Role::Adversarial, "adversarial")] {
            let records = run.stability.distances.iter().filter(|d| d.role == role).collect();
            groups.push((run.name.as_str(), class, records));
        }
    }
    groups
}

// ---- studies ----

#[derive(Debug)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub runs: Vec<AttackRun>,
}

/// Detection AUC for every configured attack.
pub fn run_detection_experiment(config: ExperimentConfig) -> Result<ExperimentReport> {
    let pipeline = Pipeline::prepare(config)?;
    detection_with(&pipeline)
}

pub fn detection_with(pipeline: &Pipeline) -> Result<ExperimentReport> {
    let out = OutputDir::create(&pipeline.config.output_dir)?;
    let mut runs = Vec::new();
    for spec in &pipeline.config.attacks {
        let run = pipeline.run_attack(spec)?;
        write_run(&out, &run)?;
        runs.push(run);
    }
    out.write("report/auc.csv", auc_csv(&runs))?;
    out.write("report/fig6.csv", emit_divergence_report(&divergence_groups(&runs))?)?;
    write_provenance(&out, pipeline, "detection")?;
    Ok(ExperimentReport { config_hash: pipeline.config.hash(), output_dir: out.commit()?, runs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub attack: String,
    pub triplets: usize,
    pub auc: f64,
}

#[derive(Debug)]
pub struct SweepReport {
    pub param: &'static str,
    pub points: Vec<SweepPoint>,
    pub warnings: Vec<String>,
    pub output_dir: PathBuf,
}

fn sweep_csv(param: &str, points: &[SweepPoint]) -> String {
    let mut s = format!("{param},attack,triplets,auc\n");
    for p in points {
        writeln!(s, "{},{},{},{}", p.value, p.attack, p.triplets, p.auc).expect("writing to a String");
    }
    s
}

fn finish_sweep(
    out: OutputDir,
    pipeline: &Pipeline,
    param: &'static str,
    runs: &[AttackRun],
    points: Vec<SweepPoint>,
    warnings: Vec<String>,
) -> Result<SweepReport> {
    for run in runs {
        write_run(&out, run)?;
    }
    out.write("report/auc.csv", auc_csv(runs))?;
    out.write(format!("report/sweep_{param}.csv"), sweep_csv(param, &points))?;
    write_provenance(&out, pipeline, &format!("sweep_{param}"))?;
    Ok(SweepReport { param, points, warnings, output_dir: out.commit()? })
}

/// One detection run per budget for the first configured attack; PGD steps
/// follow `epsilon / 4`.
pub fn run_intensity_sweep(config: ExperimentConfig, epsilons: &[f64]) -> Result<SweepReport> {
    let distinct: BTreeSet<u64> = epsilons.iter().map(|e| e.to_bits()).collect();
    if distinct.len() < 2 {
        return Err(DssError::config("an intensity sweep needs at least two distinct epsilons"));
    }
    if let Some(bad) = epsilons.iter().find(|e| !(**e > 0.0)) {
        return Err(DssError::config(format!("epsilon {bad} must be positive")));
    }
    let pipeline = Pipeline::prepare(config)?;
    let base = pipeline.config.attacks[0].clone();
    let out = OutputDir::create(&pipeline.config.output_dir)?;
    let mut runs = Vec::new();
    let mut points = Vec::new();
    for &eps in epsilons {
        let spec = base.with_epsilon(eps).with_name(format!("{}_eps{eps}", base.name()));
        let run = pipeline.run_attack(&spec)?;
        points.push(SweepPoint { value: eps, attack: run.name.clone(), triplets: run.triplets.triplets.len(), auc: run.auc() });
        runs.push(run);
    }
    finish_sweep(out, &pipeline, "epsilon", &runs, points, Vec::new())
}

/// Sorts and de-duplicates `ratios`, reporting duplicates as warnings.
pub fn normalize_ratios(ratios: &[f64]) -> Result<(Vec<f64>, Vec<String>)> {
    let mut sorted = ratios.to_vec();
    if let Some(bad) = sorted.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(DssError::config(format!("disrupting ratio {bad} outside (0, 1)")));
    }
    sorted.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    let mut out: Vec<f64> = Vec::new();
    for r in sorted {
        if out.last() == Some(&r) {
            warnings.push(format!("ratio {r} listed more than once; kept once"));
        } else {
            out.push(r);
        }
    }
    if out.is_empty() {
        return Err(DssError::config("no disrupting ratios given"));
    }
    Ok((out, warnings))
}

/// Detection AUC of the first configured attack at each disrupting ratio.
/// Triplets are built once and shared by every ratio.
pub fn run_sensitivity(config: ExperimentConfig, ratios: &[f64]) -> Result<SweepReport> {
    let (ratios, warnings) = normalize_ratios(ratios)?;
    let pipeline = Pipeline::prepare(config)?;
    sensitivity_with(&pipeline, &ratios, warnings)
}

pub fn sensitivity_with(pipeline: &Pipeline, ratios: &[f64], warnings: Vec<String>) -> Result<SweepReport> {
    let spec = pipeline.config.attacks[0].clone();
    let triplets = pipeline.build_triplets(&spec).stage("attack")?;
    let out = OutputDir::create(&pipeline.config.output_dir)?;
    let mut runs = Vec::new();
    let mut points = Vec::new();
    for &r in ratios {
        let dss = DssConfig { disrupt_ratio: r, ..pipeline.config.dss.dss_config() };
        let named = spec.clone().with_name(format!("{}_r{r}", spec.name()));
        let run = pipeline.run_attack_on(&named, triplets.clone(), &dss)?;
        points.push(SweepPoint { value: r, attack: run.name.clone(), triplets: run.triplets.triplets.len(), auc: run.auc() });
        runs.push(run);
    }
    finish_sweep(out, pipeline, "ratio", &runs, points, warnings)
}

/// Detection AUC of the first configured attack for each loop count.
pub fn run_loops_sweep(config: ExperimentConfig, loops: &[usize]) -> Result<SweepReport> {
    let distinct: BTreeSet<usize> = loops.iter().copied().collect();
    if distinct.is_empty() || distinct.contains(&0) {
        return Err(DssError::config("loop counts must be positive"));
    }
    let pipeline = Pipeline::prepare(config)?;
    let spec = pipeline.config.attacks[0].clone();
    let triplets = pipeline.build_triplets(&spec).stage("attack")?;
    let out = OutputDir::create(&pipeline.config.output_dir)?;
    let mut runs = Vec::new();
    let mut points = Vec::new();
    for n in distinct {
        let dss = DssConfig { loops: n, ..pipeline.config.dss.dss_config() };
        let named = spec.clone().with_name(format!("{}_n{n}", spec.name()));
        let run = pipeline.run_attack_on(&named, triplets.clone(), &dss)?;
        points.push(SweepPoint { value: n as f64, attack: run.name.clone(), triplets: run.triplets.triplets.len(), auc: run.auc() });
        runs.push(run);
    }
    finish_sweep(out, &pipeline, "loops", &runs, points, Vec::new())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub train_attack: String,
    pub test_attack: String,
    pub view: FeatureView,
    /// Held-out records of the test attack not seen in training.
    pub test_records: usize,
    pub auc: f64,
}

/// Fits a detector on `train`'s training split (restricted to `view`) and
/// scores each test attack's held-out split. Test records whose id also
/// appears in the training split (the shared clean and noisy images) are
/// left out.
pub fn transfer(train: &AttackRun, tests: &[&AttackRun], view: FeatureView, settings: &DetectorSettings) -> Result<Vec<TransferRow>> {
    let table = train.stability.table.select(view);
    let train_part = table.subset(&train.detection.split.train);
    let seen: BTreeSet<&str> = train_part.records.iter().map(|r| r.id.as_str()).collect();
    let detector = fit_detector(&train_part, &settings.logistic())?;
    let mut rows = Vec::new();
    for test in tests {
        let held = test.stability.table.select(view).subset(&test.detection.split.held_out);
        let keep: Vec<usize> = (0..held.len()).filter(|&i| !seen.contains(held.records[i].id.as_str())).collect();
        let held = held.subset(&keep);
        let roc = roc_auc(&detector.decisions(&held)?, &held.labels())?;
        rows.push(TransferRow {
            train_attack: train.name.clone(),
            test_attack: test.name.clone(),
            view,
            test_records: held.len(),
            auc: roc.auc,
        });
    }
    Ok(rows)
}

fn transfer_csv(rows: &[TransferRow]) -> String {
    let mut s = String::from("train_attack,test_attack,view,test_records,auc\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.train_attack, r.test_attack, r.view.name(), r.test_records, r.auc)
            .expect("writing to a String");
    }
    if let Some(first) = rows.first() {
        let mean = rows.iter().map(|r| r.auc).sum::<f64>() / rows.len() as f64;
        writeln!(s, "{},average,{},{},{mean}", first.train_attack, first.view.name(), rows.iter().map(|r| r.test_records).sum::<usize>())
            .expect("writing to a String");
    }
    s
}

#[derive(Debug)]
pub struct GeneralizationReport {
    pub rows: Vec<TransferRow>,
    pub average_auc: f64,
    pub output_dir: PathBuf,
}

/// Detector trained on one attack, evaluated on others.
pub fn run_generalization_study(
    config: ExperimentConfig,
    train_attack: &str,
    test_attacks: &[String],
    view: FeatureView,
) -> Result<GeneralizationReport> {
    if test_attacks.is_empty() {
        return Err(DssError::config("no test attacks given"));
    }
    if test_attacks.iter().any(|t| t == train_attack) {
        return Err(DssError::config(format!("train attack `{train_attack}` is also a test attack")));
    }
    let train_spec = config.attack(train_attack)?.clone();
    let test_specs = test_attacks.iter().map(|t| config.attack(t).cloned()).collect::<Result<Vec<_>>>()?;
    let pipeline = Pipeline::prepare(config)?;
    let out = OutputDir::create(&pipeline.config.output_dir)?;
    let train = pipeline.run_attack(&train_spec)?;
    write_run(&out, &train)?;
    let mut tests = Vec::new();
    for spec in &test_specs {
        let run = pipeline.run_attack(spec).map_err(|e| DssError::config(format!("test attack `{}`: {e}", spec.name())))?;
        write_run(&out, &run)?;
        tests.push(run);
    }
    let refs: Vec<&AttackRun> = tests.iter().collect();
    let rows = transfer(&train, &refs, view, &pipeline.config.detector).stage("detector")?;
    let average_auc = rows.iter().map(|r| r.auc).sum::<f64>() / rows.len() as f64;
    out.write(format!("report/generalization_{}.csv", view.name()), transfer_csv(&rows))?;
    write_provenance(&out, &pipeline, "generalization")?;
    Ok(GeneralizationReport { rows, average_auc, output_dir: out.commit()? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub attack: String,
    pub view: FeatureView,
    pub auc: f64,
}

/// Pixel-only, logit-only and combined detectors on the run's own split.
pub fn ablate(run: &AttackRun, settings: &DetectorSettings) -> Result<Vec<AblationRow>> {
    [FeatureView::Pixel, FeatureView::Logit, FeatureView::Both]
        .into_iter()
        .map(|view| {
            let table = run.stability.table.select(view);
            let detector = fit_detector(&table.subset(&run.detection.split.train), &settings.logistic())?;
            let held = table.subset(&run.detection.split.held_out);
            let auc = roc_auc(&detector.decisions(&held)?, &held.labels())?.auc;
            Ok(AblationRow { attack: run.name.clone(), view, auc })
        })
        .collect()
}

#[derive(Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub output_dir: PathBuf,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("attack,view,auc\n");
    for r in rows {
        let view = match r.view {
            FeatureView::Pixel => "P",
            FeatureView::Logit => "L",
            FeatureView::Both => "P+L",
        };
        writeln!(s, "{},{view},{}", r.attack, r.auc).expect("writing to a String");
    }
    s
}

pub fn run_ablation(config: ExperimentConfig) -> Result<AblationReport> {
    let pipeline = Pipeline::prepare(config)?;
    let out = OutputDir::create(&pipeline.config.output_dir)?;
    let mut rows = Vec::new();
    for spec in &pipeline.config.attacks {
        let run = pipeline.run_attack(spec)?;
        write_run(&out, &run)?;
        rows.extend(ablate(&run, &pipeline.config.detector).stage("detector")?);
    }
    out.write("report/ablation.csv", ablation_csv(&rows))?;
    write_provenance(&out, &pipeline, "ablation")?;
    Ok(AblationReport { rows, output_dir: out.commit()? })
}

/// Trajectory distances for the first configured attack, written as
/// `report/fig6.csv`.
pub fn run_divergence(config: ExperimentConfig) -> Result<(String, PathBuf)> {
    let pipeline = Pipeline::prepare(config)?;
    let spec = pipeline.config.attacks[0].clone();
    let triplets = pipeline.build_triplets(&spec).stage("attack")?;
    let stability = pipeline.stability(&triplets, &pipeline.config.dss.dss_config()).stage("dss")?;
    let out = OutputDir::create(&pipeline.config.output_dir)?;
    let name = spec.name();
    let groups: Vec<_> = [(Role::Clean, "clean"), (Role::Noisy, "noisy"), (Role::Adversarial, "adversarial")]
        .into_iter()
        .map(|(role, class)| (name.as_str(), class, stability.distances.iter().filter(|d| d.role == role).collect()))
        .collect();
    let csv = emit_divergence_report(&groups)?;
    out.write("report/fig6.csv", &csv)?;
    write_provenance(&out, &pipeline, "fig6")?;
    Ok((csv, out.commit()?))
}

// ---- Lyapunov diagnostics ----

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub id: String,
    pub true_label: usize,
    pub predicted: usize,
    pub residual_l2: f64,
    /// `2 <x - x_clean, residual>`.
    pub vdot: f64,
}

/// Closed-loop residual of every triplet member: the perturbation follows the
/// model's prediction while the control term sees the true label.
pub fn lyapunov_residuals<C: Classifier + ?Sized>(model: &C, triplets: &TripletSet, alpha: f64) -> Result<Vec<ResidualRow>> {
    let mut rows = Vec::new();
    for (t, &source) in triplets.triplets.iter().zip(&triplets.source_indices) {
        for role in Role::ALL {
            let x = match role {
                Role::Adversarial => &t.adversarial,
                Role::Clean => &t.clean.image,
                Role::Noisy => &t.noisy,
            };
            let predicted = model.predict(x)?;
            let r = stability_residual(model, x, predicted, t.clean.label, alpha)?;
            rows.push(ResidualRow {
                id: record_id(source, role),
                true_label: t.clean.label,
                predicted,
                residual_l2: Norm::L2.of(r.data()),
                vdot: vdot(x, &t.clean.image, &r)?,
            });
        }
    }
    Ok(rows)
}

pub fn residuals_csv(rows: &[ResidualRow]) -> String {
    let mut s = String::from("id,true_label,predicted,residual_l2,vdot\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.id, r.true_label, r.predicted, r.residual_l2, r.vdot).expect("writing to a String");
    }
    s
}

/// The model input shape expected by the standard MNIST pipeline.
pub fn mnist_shape() -> Shape {
    Shape::new(1, 28, 28).expect("non-zero dimensions")
}
