//! Command implementations behind the `udalm` binary.
//!
//! Every command takes a validated [`ExperimentConfig`] and an output
//! directory and writes plain files there: checkpoints, JSON summaries,
//! Markdown tables and PNG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{
    checkpoint_path, last_completed_round, run_adaptation, summary_path, AdaptationInputs, AdaptationOutcome,
    PseudoLabelFile, RoundSummary,
};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{load_dataset, resize_with_labels, synth_generate, ImageSample, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, histogram_report, plot_bars, EvalReport, ImagePrediction};

/// Environment variable naming the output root when `--out` is absent.
pub const OUT_ENV: &str = "UDALM_OUT";
pub const DEFAULT_OUT: &str = "runs";
/// File name of the final model written by `train-source` and `adapt`.
pub const MODEL_FILE: &str = "model.ckpt";

pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| DEFAULT_OUT.into())
}

fn manifest<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("data.{what} is not set")))
}

pub fn load_split(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<ImageSample>> {
    load_dataset(path, Some(cfg.model.num_landmarks))
}

/// Resizes samples (and their labels) to the model input size.
pub fn to_input_size(samples: &[ImageSample], size: [usize; 2]) -> Vec<ImageSample> {
    samples.iter().map(|s| resize_with_labels(s, size).0).collect()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the synthetic benchmark into `out`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<SynthConfig> {
    let mut synth = cfg.data.synth.clone().unwrap_or_default();
    synth.seed = cfg.seed;
    synth.num_landmarks = cfg.model.num_landmarks;
    let data = synth_generate(&synth)?;
    create_dir(out)?;
    data.save(out)?;
    let path = out.join("synth.json");
    write_json(&path, &synth)?;
    Ok(synth)
}

fn train(cfg: &ExperimentConfig, init: Option<&Model>, out: &Path, stop_after: Option<usize>) -> Result<AdaptationOutcome> {
    let size = cfg.model.input_size;
    let source = to_input_size(&load_split(cfg, manifest(&cfg.data.source, "source")?)?, size);
    let target = to_input_size(&load_split(cfg, manifest(&cfg.data.target, "target")?)?, size);
    let monitor = match &cfg.data.test {
        Some(p) => Some(load_split(cfg, p)?),
        None => None,
    };
    let inputs = AdaptationInputs { source: &source, target: &target, monitor: monitor.as_deref(), init };
    let outcome = run_adaptation(cfg, &inputs, Some(out), stop_after)?;
    if outcome.last_round == cfg.curriculum.total_rounds() {
        let from = checkpoint_path(out, outcome.last_round);
        let to = out.join(MODEL_FILE);
        std::fs::copy(&from, &to).map_err(|e| Error::io(&to, e))?;
    }
    Ok(outcome)
}

type Model = crate::model::Model<f32>;

/// Trains the source-only model. The target manifest is only used for the
/// per-epoch sample count.
pub fn cmd_train_source(cfg: &ExperimentConfig, out: &Path, stop_after: Option<usize>) -> Result<AdaptationOutcome> {
    let mut cfg = cfg.clone();
    cfg.adaptation.use_target = false;
    train(&cfg, None, out, stop_after)
}

/// Runs or resumes adaptation, optionally starting from a checkpoint.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    init: Option<&Path>,
    out: &Path,
    stop_after: Option<usize>,
) -> Result<AdaptationOutcome> {
    let init = init.map(Checkpoint::load).transpose()?;
    train(cfg, init.as_ref().map(|c| &c.model), out, stop_after)
}

/// Evaluation artifacts: `eval.json`, `eval.md` and `predictions.json`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, manifest_path: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let path = match manifest_path {
        Some(p) => p,
        None => manifest(&cfg.data.test, "test")?,
    };
    let samples = load_dataset(path, Some(ck.model.config().num_landmarks))?;
    let (report, preds) = evaluate(&ck.model, &samples, &cfg.eval.radii_mm, cfg.eval.mre_mode)?;
    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    write_json::<Vec<ImagePrediction>>(&out.join("predictions.json"), &preds)?;
    let md_path = out.join("eval.md");
    std::fs::write(&md_path, eval_markdown(&report)).map_err(|e| Error::io(&md_path, e))?;
    Ok(report)
}

pub fn eval_markdown(report: &EvalReport) -> String {
    let mut s = report.markdown_header();
    s.push_str(&report.markdown_row("all"));
    if let Some(groups) = &report.per_subdomain {
        for (name, r) in groups {
            s.push_str(&r.markdown_row(name));
        }
    }
    let _ = writeln!(s, "\nPer-landmark MRE (mm):");
    for (l, e) in report.per_landmark_mre.iter().enumerate() {
        let _ = writeln!(s, "- landmark {l}: {e:.3}");
    }
    s
}

/// Human-readable summary of a pseudo-label file.
pub fn cmd_pseudo_labels_show(path: &Path) -> Result<String> {
    let file = PseudoLabelFile::load(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "round {}  ratio {:.3}  mode {:?}  images {}", file.round, file.ratio, file.mode, file.records.len());
    let _ = writeln!(s, "\n| landmark | threshold | selected |\n|---|---|---|");
    for (l, (t, n)) in file.thresholds.iter().zip(file.selected_counts()).enumerate() {
        let _ = writeln!(s, "| {l} | {t:.4} | {n} |");
    }
    let _ = writeln!(s, "\n| image | selected landmarks | mean confidence |\n|---|---|---|");
    for r in &file.records {
        let mean = r.confidences.iter().sum::<f64>() / r.confidences.len().max(1) as f64;
        let _ = writeln!(s, "| {} | {}/{} | {mean:.4} |", r.image_id, r.mask.count(), r.mask.0.len());
    }
    Ok(s)
}

/// Collects round summaries and `eval.json` files from run directories into
/// `report.md`, and adds the intensity histogram of the configured source
/// and test sets plus per-subdomain bars.
pub fn cmd_report(cfg: &ExperimentConfig, runs: &[PathBuf], out: &Path) -> Result<String> {
    create_dir(out)?;
    let mut md = String::from("# Report\n\n");
    let mut evals = Vec::new();
    for dir in runs {
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let eval_path = dir.join("eval.json");
        if eval_path.is_file() {
            evals.push((name.clone(), read_json::<EvalReport>(&eval_path)?));
        }
        let Some(last) = last_completed_round(dir) else { continue };
        let _ = writeln!(md, "## {name}\n\n| round | ratio | final base loss | monitor MRE (mm) |\n|---|---|---|---|");
        for r in 0..=last {
            let p = summary_path(dir, r);
            if !p.is_file() {
                continue;
            }
            let s: RoundSummary = read_json(&p)?;
            let loss = s.epochs.last().map_or(f64::NAN, |e| e.base_loss);
            let ratio = s.ratio.map_or("-".into(), |v| format!("{v:.2}"));
            let mre = s.monitor.as_ref().map_or("-".into(), |m| format!("{:.3}", m.mre_mm));
            let _ = writeln!(md, "| {} | {ratio} | {loss:.4} | {mre} |", s.round);
        }
        md.push('\n');
    }
    if let Some((_, first)) = evals.first() {
        md.push_str("## Evaluation\n\n");
        md.push_str(&first.markdown_header());
        for (name, r) in &evals {
            md.push_str(&r.markdown_row(name));
        }
        md.push('\n');
        let names: Vec<String> = evals
            .iter()
            .filter_map(|(_, r)| r.per_subdomain.as_ref())
            .flat_map(|g| g.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if !names.is_empty() {
            let series: Vec<Vec<f64>> = evals
                .iter()
                .map(|(_, r)| {
                    names
                        .iter()
                        .map(|n| r.per_subdomain.as_ref().and_then(|g| g.get(n)).map_or(0.0, |x| x.mre_mm))
                        .collect()
                })
                .collect();
            plot_bars(&series, &out.join("subdomains.png"))?;
            let _ = writeln!(md, "Per-subdomain MRE bars (`subdomains.png`), groups {names:?}, one bar per run in table order.\n");
        }
    }
    if let (Some(a), Some(b)) = (&cfg.data.source, &cfg.data.test) {
        let (a, b) = (load_dataset(a, None)?, load_dataset(b, None)?);
        let h = histogram_report(&a, &b, ["source", "target"], 256, out)?;
        let _ = writeln!(
            md,
            "## Intensity histogram\n\nMean intensity: source {:.4}, target {:.4} (`histogram.png`, `histogram.csv`).",
            h.means[0], h.means[1]
        );
    }
    let path = out.join("report.md");
    std::fs::write(&path, &md).map_err(|e| Error::io(&path, e))?;
    Ok(md)
}
