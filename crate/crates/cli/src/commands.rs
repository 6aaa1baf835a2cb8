use std::fs::{self, OpenOptions};
use std::io::{ErrorKind as IoErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use scibilic_core::eval::{insert_anomaly, AnomalyInstance, SweepCase, DETECTION_IOU};
use scibilic_core::phantom::{Role, Sample};
use scibilic_core::volume::{write_pgm, GENERATOR_VERSION};
use scibilic_core::{
    build_dataset, build_model, generate_phantom_pair, load_checkpoint, mc_predict, read_volume,
    save_checkpoint, segmented_inference, threshold_sweep, Dataset, EvalReport, Mask, McConfig,
    NetworkWeights, PhantomSpec, PredictiveOutput, Predictor, RngStream, Volume,
};

use crate::config::RunConfig;
use crate::{CliError, ErrorKind, ResultExt};

pub const DATA_DIR: &str = "data";
pub const DATA_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_HISTORY: &str = "loss_history.csv";
pub const PREDICT_DIR: &str = "predict";
pub const EVAL_DIR: &str = "eval";
pub const SUMMARY_FILE: &str = "summary.txt";
const LOCK_FILE: &str = ".lock";

/// Guards an output directory against concurrent runs; removed on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))
            .kind(ErrorKind::Data)?;
        let path = out_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == IoErrorKind::AlreadyExists => Err(CliError::new(
                ErrorKind::Other,
                anyhow!(
                    "output directory {} is in use by another run (delete {} if it is stale)",
                    out_dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::new(
                ErrorKind::Data,
                anyhow::Error::new(e).context(format!("creating lock file {}", path.display())),
            )),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub role: Role,
    pub index: u64,
    pub seed: u64,
    pub input: String,
    pub target: String,
    pub foreground: String,
}

/// `data/manifest.json`: split membership, per-volume seeds and file names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub seed: u64,
    pub generator: String,
    pub phantom: PhantomSpec,
    pub samples: Vec<SampleEntry>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Generates the phantom dataset into `<out>/data`.
pub fn synthesize(config: &RunConfig) -> Result<DataManifest, CliError> {
    let _lock = OutputLock::acquire(&config.out_dir)?;
    let dir = config.out_dir.join(DATA_DIR);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .kind(ErrorKind::Data)?;
    let ds = build_dataset(
        config.dataset.n_train,
        config.dataset.n_val,
        &config.phantom,
        config.seed,
    )
    .kind(ErrorKind::Config)?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let stem = format!("{}_{:03}", role_name(s.role), s.index);
        let entry = SampleEntry {
            role: s.role,
            index: s.index,
            seed: s.seed,
            input: format!("{stem}_input.sciv"),
            target: format!("{stem}_target.sciv"),
            foreground: format!("{stem}_foreground.sciv"),
        };
        scibilic_core::write_volume(&s.input, dir.join(&entry.input)).kind(ErrorKind::Data)?;
        scibilic_core::write_volume(&s.target, dir.join(&entry.target)).kind(ErrorKind::Data)?;
        scibilic_core::write_volume(&s.foreground.to_volume(), dir.join(&entry.foreground))
            .kind(ErrorKind::Data)?;
        entries.push(entry);
    }
    let manifest = DataManifest {
        seed: config.seed,
        generator: GENERATOR_VERSION.to_string(),
        phantom: config.phantom.clone(),
        samples: entries,
    };
    write_json(&manifest, &dir.join(DATA_MANIFEST)).kind(ErrorKind::Data)?;
    log::info!(
        "wrote {} phantoms to {}",
        manifest.samples.len(),
        dir.display()
    );
    Ok(manifest)
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Train => "train",
        Role::Validation => "val",
    }
}

pub fn load_manifest(out_dir: &Path) -> Result<DataManifest, CliError> {
    let path = out_dir.join(DATA_DIR).join(DATA_MANIFEST);
    let text = fs::read_to_string(&path)
        .with_context(|| {
            format!(
                "dataset manifest {} not found; run `scibilic synthesize` first",
                path.display()
            )
        })
        .kind(ErrorKind::Data)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .kind(ErrorKind::Data)
}

/// Reads the dataset written by [`synthesize`].
pub fn load_dataset(out_dir: &Path) -> Result<Dataset, CliError> {
    let dir = out_dir.join(DATA_DIR);
    let manifest = load_manifest(out_dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let foreground =
            Mask::from_volume(&read_volume(dir.join(&e.foreground)).kind(ErrorKind::Data)?)
                .with_context(|| format!("{}: not a binary mask", e.foreground))
                .kind(ErrorKind::Data)?;
        samples.push(Sample {
            role: e.role,
            index: e.index,
            seed: e.seed,
            input: read_volume(dir.join(&e.input)).kind(ErrorKind::Data)?,
            target: read_volume(dir.join(&e.target)).kind(ErrorKind::Data)?,
            foreground,
        });
    }
    Ok(Dataset { samples })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<scibilic_core::train::EpochRecord>,
    pub checkpoint: PathBuf,
}

/// Trains from the synthesized dataset, writing the best checkpoint and the
/// per-epoch loss history. Divergence still writes both, then fails.
pub fn train(config: &RunConfig) -> Result<TrainSummary, CliError> {
    let _lock = OutputLock::acquire(&config.out_dir)?;
    let dataset = load_dataset(&config.out_dir)?;
    let initial = build_model(&config.model, &mut RngStream::new(config.init_seed()))
        .kind(ErrorKind::Config)?;
    let outcome =
        scibilic_core::train(initial, &dataset, &config.train_config()).kind(ErrorKind::Other)?;

    let checkpoint = config.out_dir.join(CHECKPOINT_DIR);
    save_checkpoint(&outcome.weights, &checkpoint).kind(ErrorKind::Data)?;
    let csv_path = config.out_dir.join(LOSS_HISTORY);
    write_loss_history(&outcome.history, &csv_path).kind(ErrorKind::Data)?;
    if let Some(d) = outcome.diverged {
        return Err(CliError::new(
            ErrorKind::Diverged,
            anyhow!(
                "training diverged at epoch {} step {}; best finite checkpoint kept in {}",
                d.epoch,
                d.step,
                checkpoint.display()
            ),
        ));
    }
    Ok(TrainSummary {
        history: outcome.history,
        checkpoint,
    })
}

fn write_loss_history(
    history: &[scibilic_core::train::EpochRecord],
    path: &Path,
) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), val])?;
    }
    w.flush()?;
    Ok(())
}

fn load_weights(path: &Path) -> Result<NetworkWeights<f32>, CliError> {
    load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .kind(ErrorKind::Data)
}

/// Whole-image MC prediction when the image fits one tile and matches the
/// network's divisor, segmented inference otherwise.
pub fn predict_volume<P: Predictor + ?Sized>(
    predictor: &P,
    x: &Volume,
    mc: &McConfig,
) -> scibilic_core::Result<PredictiveOutput> {
    let (h, w) = x.hw()?;
    let d = predictor.divisor();
    let fits = h % d == 0 && w % d == 0 && h <= mc.segment_tile.0 && w <= mc.segment_tile.1;
    if fits {
        mc_predict(predictor, x, mc)
    } else {
        log::info!("{h}x{w} input does not fit one {d}-aligned tile; using segmented inference");
        segmented_inference(predictor, x, mc)
    }
}

pub const MAP_NAMES: [&str; 4] = ["mean", "epistemic", "aleatoric", "scibilic"];

fn maps(out: &PredictiveOutput) -> [&Volume; 4] {
    [&out.mean, &out.epistemic, &out.aleatoric, &out.scibilic]
}

/// Runs MC prediction on one SCIV volume and writes `<name>.sciv`,
/// `<name>.pgm` and `<name>.pgm.scale.txt` per map into `<out>/predict`.
pub fn predict(
    config: &RunConfig,
    checkpoint: &Path,
    input: &Path,
) -> Result<PredictiveOutput, CliError> {
    let _lock = OutputLock::acquire(&config.out_dir)?;
    let weights = load_weights(checkpoint)?;
    let x = read_volume(input).kind(ErrorKind::Data)?;
    let out = predict_volume(&weights, &x, &config.predict_mc_config())
        .with_context(|| format!("predicting {}", input.display()))
        .kind(ErrorKind::Data)?;
    let dir = config.out_dir.join(PREDICT_DIR);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .kind(ErrorKind::Data)?;
    for (name, map) in MAP_NAMES.iter().zip(maps(&out)) {
        scibilic_core::write_volume(map, dir.join(format!("{name}.sciv"))).kind(ErrorKind::Data)?;
        write_pgm(map, dir.join(format!("{name}.pgm"))).kind(ErrorKind::Data)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub case_id: String,
    /// Index of the validation phantom the anomaly was inserted into.
    pub sample_index: u64,
    pub anomaly: AnomalyInstance,
    pub prediction: PredictiveOutput,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    pub cases: Vec<EvalCase>,
    pub summary: String,
}

/// Inserts anomalies into every validation phantom, predicts, and sweeps
/// thresholds. Writes the curve CSVs, `cases.csv` and `summary.txt` into
/// `<out>/eval`.
pub fn evaluate(config: &RunConfig, checkpoint: &Path) -> Result<EvalRun, CliError> {
    let _lock = OutputLock::acquire(&config.out_dir)?;
    let manifest = load_manifest(&config.out_dir)?;
    let dataset = load_dataset(&config.out_dir)?;
    let weights = load_weights(checkpoint)?;
    let side = config.anomaly_side();
    let per_case = config.eval.anomalies_per_case;

    let mut cases = Vec::new();
    for (v, sample) in dataset.validation().enumerate() {
        let brain = brain_mask(&manifest, sample)?;
        for k in 0..per_case {
            let case = (v * per_case + k) as u64;
            let case_id = format!("val{:03}_a{k}", sample.index);
            let mut rng = RngStream::new(config.anomaly_seed(case));
            let anomaly = insert_anomaly(&sample.input, &brain, side, &mut rng)
                .with_context(|| format!("case {case_id}"))
                .kind(ErrorKind::Data)?;
            let prediction =
                predict_volume(&weights, &anomaly.corrupted, &config.eval_mc_config(case))
                    .with_context(|| format!("case {case_id}"))
                    .kind(ErrorKind::Other)?;
            log::debug!("scored case {case_id}");
            cases.push(EvalCase {
                case_id,
                sample_index: sample.index,
                anomaly,
                prediction,
            });
        }
    }
    if cases.is_empty() {
        return Err(CliError::new(
            ErrorKind::Data,
            anyhow!("dataset has no validation phantoms"),
        ));
    }

    let sweep: Vec<SweepCase> = cases
        .iter()
        .map(|c| SweepCase {
            case_id: c.case_id.clone(),
            scibilic: c.prediction.scibilic.clone(),
            truth: c.anomaly.truth_mask.clone(),
        })
        .collect();
    let report = threshold_sweep(
        &sweep,
        &config.eval.thresholds,
        &config.eval.iou_thresholds,
        &config.ci_config(),
    )
    .kind(ErrorKind::Other)?;

    let dir = config.out_dir.join(EVAL_DIR);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .kind(ErrorKind::Data)?;
    report.write_csv(&dir).kind(ErrorKind::Data)?;
    let summary = summarize(&report, config.eval.confidence_level);
    fs::write(dir.join(SUMMARY_FILE), &summary)
        .with_context(|| format!("writing {}", dir.join(SUMMARY_FILE).display()))
        .kind(ErrorKind::Data)?;
    Ok(EvalRun {
        report,
        cases,
        summary,
    })
}

/// Anomalies go inside the brain, not the skull ring. The label map is not
/// stored, so the phantom is regenerated from its recorded seed and checked
/// against the input on disk.
fn brain_mask(manifest: &DataManifest, sample: &Sample) -> Result<Mask, CliError> {
    let pair = generate_phantom_pair(&manifest.phantom, &mut RngStream::new(sample.seed))
        .kind(ErrorKind::Data)?;
    let same = pair.input.dims() == sample.input.dims()
        && pair
            .input
            .data()
            .iter()
            .zip(sample.input.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(CliError::new(
            ErrorKind::Data,
            anyhow!(
                "input of phantom {} does not match its manifest seed; re-run `scibilic synthesize`",
                sample.index
            ),
        ));
    }
    Ok(pair.brain_mask())
}

pub fn summarize(report: &EvalReport, level: f64) -> String {
    let pct = (level * 100.0).round();
    let mut s = format!("cases: {}\n", report.cases.len());
    if let Some(best) = report.best_dice() {
        s += &format!(
            "best mean dice: {:.4} at threshold {} ({pct}% CI {:.4}..{:.4})\n",
            best.value, best.threshold, best.ci_lo, best.ci_hi
        );
    }
    let rate =
        report.cases.iter().filter(|c| c.detected).count() as f64 / report.cases.len() as f64;
    s += &format!("detection rate at IoU {DETECTION_IOU} (binarization 0.15): {rate:.4}");
    if let Some(p) = report.detection_at(DETECTION_IOU) {
        s += &format!(" ({pct}% CI {:.4}..{:.4})", p.ci_lo, p.ci_hi);
    }
    s.push('\n');
    s
}
