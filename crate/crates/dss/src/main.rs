use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dss::checkpoint::{load_model, save_model};
use dss::config::{AttackSpec, DataConfig, ExperimentConfig, ModelConfig, SaliencyOrder};
use dss::data::{load_mnist, mnist_files, MnistSplit};
use dss::dss_core::model::{accuracy, train_classifier, Architecture, TrainConfig};
use dss::dss_core::monitor::{
    extract_features, feature_columns, merge_features, roc_auc, score, FeatureTable, FeatureView,
};
use dss::dss_core::stability::DssConfig;
use dss::dss_core::{Classifier, RandomSeed};
use dss::error::{DssError, Result};
use dss::formats::{
    load_detector, load_triplets, read_features, read_images, save_detector, save_trajectory, save_triplets,
    write_features, AttackRecord,
};
use dss::harness::{
    self, detect, lyapunov_residuals, mnist_shape, record_id, residuals_csv, Pipeline, Role,
};
use dss::checkpoint::write_atomic;

#[derive(Parser)]
#[command(name = "dss", version, about = "Dynamically stable system (DSS) adversarial-example detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment settings. `--config` supplies a `dss-config-v1` file; every
/// other flag overrides the matching field.
#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the MNIST IDX files; selects its test split.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    offset: Option<usize>,
    /// Model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Attacks as `fgsm:EPS` or `pgd:EPS[:ITERATIONS]`, comma separated.
    #[arg(long, value_delimiter = ',')]
    attacks: Option<Vec<String>>,
    #[arg(long)]
    loops: Option<usize>,
    #[arg(long)]
    disrupt_ratio: Option<f64>,
    /// Order saliency by magnitude instead of raw value.
    #[arg(long)]
    saliency_abs: bool,
    /// Start PGD at the clean image instead of a random point in the ball.
    #[arg(long)]
    no_random_start: bool,
    /// Norm orders (l1, l2, linf), comma separated.
    #[arg(long, value_delimiter = ',')]
    norms: Option<Vec<String>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Eps,
    Ratio,
    Loops,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Pixel,
    Logit,
    Both,
}

impl From<ViewArg> for FeatureView {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Pixel => FeatureView::Pixel,
            ViewArg::Logit => FeatureView::Logit,
            ViewArg::Both => FeatureView::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the LeNet classifier on MNIST and save a checkpoint.
    TrainModel {
        #[arg(long)]
        mnist_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build filtered clean/noisy/adversarial triplets and store them.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Attack name from the config (defaults to the first one).
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the DSS loop on images from a tensor CSV and dump trajectories.
    RunDss {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Only this row of the input.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        loops: usize,
        #[arg(long, default_value_t = 0.03)]
        disrupt_ratio: f64,
        #[arg(long)]
        saliency_abs: bool,
    },
    /// Stability features of a triplet store.
    Features {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        loops: usize,
        #[arg(long, default_value_t = 0.03)]
        disrupt_ratio: f64,
        #[arg(long)]
        saliency_abs: bool,
        #[arg(long, value_delimiter = ',', default_value = "l1,l2,linf")]
        norms: Vec<String>,
    },
    /// Fit a detector on the training split of a feature matrix.
    DetectTrain {
        #[arg(long)]
        features: PathBuf,
        /// Extra feature columns merged by id before training.
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        view: ViewArg,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the untouched held-out records.
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Score a feature matrix with a saved detector and report AUC.
    DetectEval {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        view: ViewArg,
        /// Per-record scores.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full detection experiment for every configured attack.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Detection AUC as one parameter varies.
    Sweep {
        #[arg(value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on one attack, test on others.
    Generalize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_attack: String,
        #[arg(long, value_delimiter = ',', required = true)]
        test_attacks: Vec<String>,
        #[arg(long, value_enum, default_value = "logit")]
        view: ViewArg,
    },
    /// Pixel-only, logit-only and combined detectors.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Lyapunov closed-loop residual norms for a triplet store.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long, default_value_t = 0.075)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean per-loop distance from the origin by class.
    Fig6 {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_attack(spec: &str, no_random_start: bool) -> Result<AttackSpec> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| DssError::config(format!("bad number `{s}` in attack `{spec}`")));
    match parts[..] {
        ["fgsm", eps] => Ok(AttackSpec::fgsm(num(eps)?)),
        ["pgd", eps] | ["pgd", eps, _] => {
            let iterations = match parts.get(2) {
                Some(it) => it.parse().map_err(|_| DssError::config(format!("bad iteration count in `{spec}`")))?,
                None => 40,
            };
            let mut a = AttackSpec::pgd(num(eps)?, iterations);
            if let AttackSpec::Pgd { random_start, .. } = &mut a {
                *random_start = !no_random_start;
            }
            Ok(a)
        }
        _ => Err(DssError::config(format!("cannot parse attack `{spec}` (use fgsm:EPS or pgd:EPS[:ITERS])"))),
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let data = match &self.mnist_dir {
                    Some(dir) => DataConfig::mnist_test(dir),
                    None => DataConfig {
                        images: self.images.clone().ok_or_else(|| DssError::config("need --config, --mnist-dir or --images"))?,
                        labels: self.labels.clone().ok_or_else(|| DssError::config("need --labels"))?,
                        examples: 1000,
                        offset: 0,
                    },
                };
                let model = ModelConfig {
                    checkpoint: Some(self.model.clone().ok_or_else(|| DssError::config("need --config or --model"))?),
                    train: None,
                };
                ExperimentConfig::new(data, model, PathBuf::from("dss-out"))
            }
        };
        if let Some(dir) = &self.mnist_dir {
            let (images, labels) = mnist_files(dir, MnistSplit::Test);
            cfg.data.images = images;
            cfg.data.labels = labels;
        }
        if let Some(p) = &self.images {
            cfg.data.images = p.clone();
        }
        if let Some(p) = &self.labels {
            cfg.data.labels = p.clone();
        }
        if let Some(n) = self.examples {
            cfg.data.examples = n;
        }
        if let Some(n) = self.offset {
            cfg.data.offset = n;
        }
        if let Some(p) = &self.model {
            cfg.model = ModelConfig { checkpoint: Some(p.clone()), train: None };
        }
        if let Some(p) = &self.output_dir {
            cfg.output_dir = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(list) = &self.attacks {
            cfg.attacks = list.iter().map(|a| parse_attack(a, self.no_random_start)).collect::<Result<_>>()?;
        } else if self.no_random_start {
            for a in &mut cfg.attacks {
                if let AttackSpec::Pgd { random_start, .. } = a {
                    *random_start = false;
                }
            }
        }
        if let Some(n) = self.loops {
            cfg.dss.loops = n;
        }
        if let Some(r) = self.disrupt_ratio {
            cfg.dss.disrupt_ratio = r;
        }
        if self.saliency_abs {
            cfg.dss.saliency = SaliencyOrder::Abs;
        }
        if let Some(n) = &self.norms {
            cfg.norms = n.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dss_config(loops: usize, disrupt_ratio: f64, saliency_abs: bool) -> DssConfig {
    let mut settings = dss::config::DssSettings { loops, disrupt_ratio, ..Default::default() };
    if saliency_abs {
        settings.saliency = SaliencyOrder::Abs;
    }
    settings.dss_config()
}

fn load_table(features: &Path, external: Option<&Path>, view: ViewArg) -> Result<FeatureTable> {
    let ours = read_features(features)?.select(view.into());
    match external {
        Some(p) => Ok(merge_features(&ours, &read_features(p)?)?),
        None => Ok(ours),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainModel { mnist_dir, out, epochs, batch_size, learning_rate, seed } => {
            let train = load_mnist(&mnist_dir, MnistSplit::Train)?;
            let cfg = TrainConfig { epochs, batch_size, learning_rate, seed: RandomSeed(seed) };
            let start = Instant::now();
            let net = train_classifier(&train, Architecture::lenet(mnist_shape(), 10), &cfg, |e, loss| {
                eprintln!("epoch {} mean loss {loss:.5} ({:.0?})", e + 1, start.elapsed())
            })?;
            if let Ok(test) = load_mnist(&mnist_dir, MnistSplit::Test) {
                println!("test accuracy {:.4}", accuracy(&net, &test)?);
            }
            save_model(&net, &out)
        }
        Command::Attack { common, attack, out } => {
            let cfg = common.resolve()?;
            let spec = match &attack {
                Some(name) => cfg.attack(name)?.clone(),
                None => cfg.attacks[0].clone(),
            };
            let seed = cfg.seed;
            let pipeline = Pipeline::prepare(cfg)?;
            let set = pipeline.build_triplets(&spec)?;
            let record = match spec.native(pipeline.config.seed(dss::config::streams::ATTACK)) {
                Some(a) => AttackRecord {
                    step_size: Some(a.step_size),
                    iterations: Some(a.iterations),
                    random_start: Some(a.random_start),
                    seed,
                },
                None => AttackRecord { step_size: None, iterations: None, random_start: None, seed },
            };
            save_triplets(&out, &set, record)?;
            println!(
                "{} triplets kept ({} misclassified, {} attacks failed)",
                set.triplets.len(),
                set.dropped_misclassified,
                set.dropped_attack_failed
            );
            Ok(())
        }
        Command::RunDss { model, input, index, out, loops, disrupt_ratio, saliency_abs } => {
            let net = load_model(&model)?;
            let images = read_images(&input)?;
            let dss = dss_config(loops, disrupt_ratio, saliency_abs);
            let restorer = dss::dss_core::inpaint::HarmonicInpainter::default();
            let picked: Vec<usize> = match index {
                Some(i) if i < images.len() => vec![i],
                Some(i) => return Err(DssError::config(format!("index {i} out of range ({} images)", images.len()))),
                None => (0..images.len()).collect(),
            };
            for i in picked {
                let traj = dss::dss_core::stability::run_dss(&net, &restorer, &images[i], &dss)?;
                let dir = if index.is_some() { out.clone() } else { out.join(format!("{i:06}")) };
                save_trajectory(&dir, &traj)?;
            }
            Ok(())
        }
        Command::Features { model, triplets, out, loops, disrupt_ratio, saliency_abs, norms } => {
            let net = load_model(&model)?;
            let (set, _) = load_triplets(&triplets)?;
            let dss = dss_config(loops, disrupt_ratio, saliency_abs);
            let mut tmp = ExperimentConfig::new(
                DataConfig { images: PathBuf::new(), labels: PathBuf::new(), examples: 1, offset: 0 },
                ModelConfig::default(),
                PathBuf::new(),
            );
            tmp.norms = norms;
            let norms = tmp.norms()?;
            let restorer = dss::dss_core::inpaint::HarmonicInpainter::default();
            let mut table = FeatureTable::new(feature_columns(dss.loops, &norms));
            for (t, &source) in set.triplets.iter().zip(&set.source_indices) {
                for role in Role::ALL {
                    let x = match role {
                        Role::Adversarial => &t.adversarial,
                        Role::Clean => &t.clean.image,
                        Role::Noisy => &t.noisy,
                    };
                    let traj = dss::dss_core::stability::run_dss(&net, &restorer, x, &dss)?;
                    table.push(record_id(source, role), role.label(), extract_features(&net, &traj, &norms)?)?;
                }
            }
            write_features(&out, &table)
        }
        Command::DetectTrain { features, external, view, out, held_out, seed, train_fraction } => {
            let table = load_table(&features, external.as_deref(), view)?;
            let settings = dss::config::DetectorSettings { train_fraction, ..Default::default() };
            let d = detect(&table, RandomSeed(seed), &settings)?;
            save_detector(&out, &d.detector)?;
            if let Some(p) = held_out {
                write_features(&p, &d.held_out)?;
            }
            println!("held-out AUC {:.4} over {} records", d.roc.auc, d.held_out.len());
            Ok(())
        }
        Command::DetectEval { detector, features, external, view, out } => {
            let det = load_detector(&detector)?;
            let table = load_table(&features, external.as_deref(), view)?;
            det.check_columns(&table.columns)?;
            let decisions = det.decisions(&table)?;
            if let Some(p) = out {
                let mut s = String::from("id,label,score\n");
                for r in &table.records {
                    s.push_str(&format!("{},{},{}\n", r.id, r.label, score(&det, &r.values)?));
                }
                write_atomic(&p, s.as_bytes())?;
            }
            let roc = roc_auc(&decisions, &table.labels())?;
            println!("AUC {:.4} over {} records", roc.auc, table.len());
            Ok(())
        }
        Command::Experiment { common } => {
            let report = harness::run_detection_experiment(common.resolve()?)?;
            for r in &report.runs {
                println!("{}: AUC {:.4} ({} triplets)", r.name, r.auc(), r.triplets.triplets.len());
            }
            println!("report written to {}", report.output_dir.display());
            Ok(())
        }
        Command::Sweep { param, values, common } => {
            let cfg = common.resolve()?;
            let report = match param {
                SweepParam::Eps => harness::run_intensity_sweep(cfg, &values)?,
                SweepParam::Ratio => harness::run_sensitivity(cfg, &values)?,
                SweepParam::Loops => {
                    let loops = values
                        .iter()
                        .map(|v| if v.fract() == 0.0 && *v >= 1.0 { Ok(*v as usize) } else { Err(DssError::config(format!("loop count {v} is not a positive integer"))) })
                        .collect::<Result<Vec<_>>>()?;
                    harness::run_loops_sweep(cfg, &loops)?
                }
            };
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for p in &report.points {
                println!("{} = {}: AUC {:.4}", report.param, p.value, p.auc);
            }
            println!("report written to {}", report.output_dir.display());
            Ok(())
        }
        Command::Generalize { common, train_attack, test_attacks, view } => {
            let report = harness::run_generalization_study(common.resolve()?, &train_attack, &test_attacks, view.into())?;
            for r in &report.rows {
                println!("{} -> {} ({}): AUC {:.4}", r.train_attack, r.test_attack, r.view.name(), r.auc);
            }
            println!("average AUC {:.4}", report.average_auc);
            Ok(())
        }
        Command::Ablate { common } => {
            let report = harness::run_ablation(common.resolve()?)?;
            print!("{}", harness::ablation_csv(&report.rows));
            Ok(())
        }
        Command::Diagnose { model, triplets, alpha, out } => {
            let net = load_model(&model)?;
            let (set, _) = load_triplets(&triplets)?;
            if net.input_shape() != set.triplets[0].clean.image.shape() {
                return Err(DssError::config("triplet images do not match the model input shape"));
            }
            let rows = lyapunov_residuals(&net, &set, alpha)?;
            write_atomic(&out, residuals_csv(&rows).as_bytes())?;
            let adv: Vec<_> = rows.iter().filter(|r| r.id.ends_with(Role::Adversarial.tag())).collect();
            let nonzero = adv.iter().filter(|r| r.residual_l2 > 0.0).count();
            println!("{nonzero}/{} adversarial residuals are non-zero", adv.len());
            Ok(())
        }
        Command::Fig6 { common } => {
            let (csv, dir) = harness::run_divergence(common.resolve()?)?;
            print!("{csv}");
            println!("report written to {}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
