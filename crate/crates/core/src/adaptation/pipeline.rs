//! Round-based adaptation loop.
//!
//! Round 0 trains on labeled source images, optionally with the domain
//! classifier seeing unlabeled target images. Each later round regenerates
//! pseudo-labels with the current model, selects reliable ones at the
//! curriculum ratio and trains on source plus selected target labels.
//! Every completed round leaves a checkpoint, a pseudo-label file (rounds
//! ≥ 1) and a summary in the output directory, and a run can resume from
//! the last completed round.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dynamic_thresholds, generate_pseudo_labels, grl, loss_domain, PseudoLabelFile, PseudoLabelRecord};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{augment, epoch_batches, oversample_source, ImageSample, PoolEntry};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::model::Model;
use crate::objectives::{loss_base_batch, LandmarkMask, SampleTargets};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Mean training statistics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub base_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_per_landmark: Option<Vec<usize>>,
    pub epochs: Vec<EpochStats>,
    /// Metrics on the monitoring set after this round, if one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<EvalReport>,
}

/// Inputs of [`run_adaptation`]. Images must already be at the model's input size.
pub struct AdaptationInputs<'a> {
    /// Labeled source images.
    pub source: &'a [ImageSample],
    /// Target images; their labels, if any, are never read.
    pub target: &'a [ImageSample],
    /// Labeled images (original resolution) evaluated after every round for logging.
    pub monitor: Option<&'a [ImageSample]>,
    /// Starting weights, e.g. a source-only model. Random initialization otherwise.
    pub init: Option<&'a Model<f32>>,
}

pub struct AdaptationOutcome {
    pub model: Model<f32>,
    /// Summaries of the rounds executed by this call.
    pub rounds: Vec<RoundSummary>,
    /// Last completed round.
    pub last_round: usize,
}

pub fn checkpoint_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round}.ckpt"))
}

pub fn pseudo_label_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("pseudo_labels_round_{round}.json"))
}

pub fn summary_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round}.json"))
}

/// Highest `r` such that `round_0.ckpt ..= round_r.ckpt` all exist.
pub fn last_completed_round(dir: &Path) -> Option<usize> {
    (0..).take_while(|&r| checkpoint_path(dir, r).is_file()).last()
}

/// Per-sample training example within an epoch.
struct Example {
    pixels: Tensor<f32>,
    targets: SampleTargets<f32>,
    domain: u8,
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    model: Model<f32>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn example(&self, pixels: &Tensor<f32>, landmarks: &[[f64; 2]], mask: LandmarkMask, domain: u8, seed: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aug = augment(pixels, landmarks, &self.cfg.augment, &mut rng);
        let mask = mask.and(&LandmarkMask(aug.inside.clone()));
        let m = &self.cfg.model;
        let targets = SampleTargets::encode(&aug.landmarks, mask, m.input_size, m.stride, self.cfg.loss.sigma);
        Example { pixels: aug.pixels, targets, domain }
    }

    /// Trains one round. `pseudo` holds target labels (all-zero masks in round 0).
    fn train_round(
        &mut self,
        source: &[ImageSample],
        target: &[ImageSample],
        pseudo: &[PseudoLabelRecord],
        source_per_epoch: usize,
        dal: bool,
    ) -> Result<Vec<EpochStats>> {
        let schedule = self.cfg.optimizer.schedule();
        let weights = self.cfg.loss.weights();
        let l = self.cfg.model.num_landmarks;
        let mut history = Vec::with_capacity(self.cfg.optimizer.epochs_per_round);
        for epoch in 0..self.cfg.optimizer.epochs_per_round {
            let lr = schedule.lr_at(epoch);
            let batches = if !target.is_empty() {
                epoch_batches(source.len(), target.len(), self.cfg.optimizer.batch_size, &mut self.rng)?
            } else {
                let seq = oversample_source(source.len(), source_per_epoch, &mut self.rng)?;
                seq.chunks(self.cfg.optimizer.batch_size)
                    .map(|c| c.iter().map(|&i| PoolEntry::Source(i)).collect())
                    .collect()
            };
            let (mut base_sum, mut dom_sum, mut correct, mut seen, mut steps) = (0.0, 0.0, 0usize, 0usize, 0usize);
            for batch in batches {
                let seeds: Vec<u64> = batch.iter().map(|_| self.rng.next_u64()).collect();
                let examples: Vec<Example> = batch
                    .par_iter()
                    .zip(seeds.par_iter())
                    .map(|(entry, &seed)| match *entry {
                        PoolEntry::Source(i) => {
                            let s = &source[i];
                            let lms = s.landmarks.as_deref().expect("source samples are labeled");
                            self.example(&s.pixels, lms, LandmarkMask::ones(l), 0, seed)
                        }
                        PoolEntry::Target(i) => {
                            let rec = &pseudo[i];
                            self.example(&target[i].pixels, &rec.coords, rec.mask.clone(), 1, seed)
                        }
                    })
                    .collect();
                let (base, dom) = self.step(&examples, dal, lr, &weights)?;
                base_sum += base;
                if let Some((loss, hits)) = dom {
                    dom_sum += loss;
                    correct += hits;
                }
                seen += examples.len();
                steps += 1;
            }
            history.push(EpochStats {
                epoch,
                lr,
                base_loss: base_sum / steps as f64,
                domain_loss: dal.then(|| dom_sum / steps as f64),
                domain_accuracy: dal.then(|| correct as f64 / seen as f64),
            });
        }
        Ok(history)
    }

    /// One optimizer step. Returns the base loss and, with DAL, the domain
    /// loss and the number of correctly classified samples.
    fn step(
        &mut self,
        examples: &[Example],
        dal: bool,
        lr: f64,
        weights: &crate::objectives::LossWeights,
    ) -> Result<(f64, Option<(f64, usize)>)> {
        let refs: Vec<&Tensor<f32>> = examples.iter().map(|e| &e.pixels).collect();
        let images = self.model.stack_images(&refs)?;
        let (grads, base, dom) = {
            let mut g = Graph::new(self.model.params());
            let x = g.input(images);
            let vars = self.model.forward_graph(&mut g, x);
            let targets: Vec<&SampleTargets<f32>> = examples.iter().map(|e| &e.targets).collect();
            let loss = loss_base_batch(
                g.value(vars.coords).data(),
                g.value(vars.scores).data(),
                g.value(vars.offsets).data(),
                &targets,
                weights,
            );
            let mut seeds = vec![
                (vars.coords, Tensor::from_vec(g.shape(vars.coords), loss.coord_grad)),
                (vars.scores, Tensor::from_vec(g.shape(vars.scores), loss.score_grad)),
                (vars.offsets, Tensor::from_vec(g.shape(vars.offsets), loss.offset_grad)),
            ];
            let mut dom = None;
            if dal {
                let reversed = grl(&mut g, vars.features);
                let p = self.model.domain_head().forward(&mut g, reversed);
                let labels: Vec<u8> = examples.iter().map(|e| e.domain).collect();
                let probs = g.value(p).data();
                let ld = loss_domain(probs, &labels);
                let hits = probs.iter().zip(&labels).filter(|(&q, &d)| (q >= 0.5) == (d == 1)).count();
                dom = Some((ld.value as f64, hits));
                let lambda = weights.lambda_d as f32;
                let seed: Vec<f32> = ld.grad.iter().map(|&v| v * lambda).collect();
                seeds.push((p, Tensor::from_vec(g.shape(p), seed)));
            }
            let grads = g.backward(seeds).into_param_grads();
            (grads, loss.value as f64, dom)
        };
        self.adam.update(self.model.params_mut(), &grads, lr);
        Ok((base, dom))
    }

    fn checkpoint(&self, round: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            experiment: serde_json::to_value(self.cfg).expect("config serializes"),
            round,
            rng: Some(self.rng.clone()),
            optimizer: Some(self.adam.clone()),
        }
    }
}

fn check_inputs(cfg: &ExperimentConfig, inputs: &AdaptationInputs<'_>) -> Result<()> {
    if inputs.source.is_empty() {
        return Err(Error::Config("source set is empty".into()));
    }
    let size = cfg.model.input_size;
    let l = cfg.model.num_landmarks;
    for s in inputs.source.iter().chain(inputs.target) {
        if s.size() != size {
            return Err(Error::Input(format!("sample {} is {:?}, expected the model input size {size:?}", s.id, s.size())));
        }
    }
    for s in inputs.source {
        match &s.landmarks {
            Some(lms) if lms.len() == l => {}
            _ => return Err(Error::Input(format!("source sample {} needs {l} landmarks", s.id))),
        }
    }
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) adaptation.
///
/// With `out_dir`, round artifacts are written there and an existing run in
/// that directory is resumed after its last completed round. `stop_after`
/// ends this call after the given round, leaving a resumable directory.
pub fn run_adaptation(
    cfg: &ExperimentConfig,
    inputs: &AdaptationInputs<'_>,
    out_dir: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<AdaptationOutcome> {
    cfg.validate()?;
    check_inputs(cfg, inputs)?;
    let pool = cfg
        .deterministic
        .then(|| rayon::ThreadPoolBuilder::new().num_threads(1).build())
        .transpose()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match pool {
        Some(p) => p.install(|| run_inner(cfg, inputs, out_dir, stop_after)),
        None => run_inner(cfg, inputs, out_dir, stop_after),
    }
}

fn run_inner(
    cfg: &ExperimentConfig,
    inputs: &AdaptationInputs<'_>,
    out_dir: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<AdaptationOutcome> {
    let target = if cfg.adaptation.use_target { inputs.target } else { &[] };
    let has_target = !target.is_empty();
    let self_training = has_target && cfg.adaptation.self_training;
    let dal = has_target && cfg.adaptation.dal;
    // Runs without self-training keep the same number of rounds so every
    // variant gets the same optimization budget.
    let total_rounds = cfg.curriculum.total_rounds();
    let last = stop_after.map_or(total_rounds, |s| s.min(total_rounds));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let resumed = out_dir.and_then(last_completed_round);
    let (mut trainer, start) = match resumed {
        Some(r) => {
            let ck = Checkpoint::load(&checkpoint_path(out_dir.expect("resumed from a directory"), r))?;
            let stored: ExperimentConfig = serde_json::from_value(ck.experiment.clone())
                .map_err(|e| Error::Checkpoint(format!("stored config unreadable: {e}")))?;
            if &stored != cfg {
                return Err(Error::Config("output directory holds a run with a different configuration".into()));
            }
            let adam = ck.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            let rng = ck.rng.ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state".into()))?;
            (Trainer { cfg, model: ck.model, adam, rng }, r + 1)
        }
        None => {
            let model = match inputs.init {
                Some(m) if m.config() != &cfg.model => {
                    return Err(Error::Config("initial model does not match the configured model".into()))
                }
                Some(m) => m.clone(),
                None => Model::new(cfg.model.clone(), cfg.seed)?,
            };
            let adam = Adam::new(model.params());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2);
            (Trainer { cfg, model, adam, rng }, 0)
        }
    };

    let l = cfg.model.num_landmarks;
    let mut summaries = Vec::new();
    for round in start..=last {
        let mut summary = RoundSummary { round, ratio: None, selected_per_landmark: None, epochs: Vec::new(), monitor: None };
        let pseudo: Vec<PseudoLabelRecord> = if round == 0 || !self_training {
            target
                .iter()
                .map(|s| PseudoLabelRecord {
                    image_id: s.id.clone(),
                    round,
                    coords: vec![[0.0, 0.0]; l],
                    confidences: vec![0.0; l],
                    mask: LandmarkMask::zeros(l),
                })
                .collect()
        } else {
            let images: Vec<(String, &Tensor<f32>)> = target.iter().map(|s| (s.id.clone(), &s.pixels)).collect();
            let mut records = generate_pseudo_labels(&trainer.model, &images, round)?;
            let state = dynamic_thresholds(&mut records, round, cfg.curriculum.delta, cfg.curriculum.selection)?;
            let file = PseudoLabelFile::new(&state, cfg.curriculum.selection, records);
            summary.ratio = Some(state.ratio);
            summary.selected_per_landmark = Some(file.selected_counts());
            if let Some(dir) = out_dir {
                file.save(&pseudo_label_path(dir, round))?;
            }
            if cfg.adaptation.reinit_each_round {
                trainer.model = Model::new(cfg.model.clone(), cfg.seed.wrapping_add(round as u64))?;
                trainer.adam = Adam::new(trainer.model.params());
            }
            file.records
        };
        let dal_now = dal && (round > 0 || cfg.adaptation.dal_round0);
        // A source-only run still draws as many source samples per epoch as a mixed run would.
        let source_per_epoch = inputs.target.len();
        summary.epochs = trainer.train_round(inputs.source, target, &pseudo, source_per_epoch, dal_now)?;
        if let Some(monitor) = inputs.monitor {
            summary.monitor = Some(evaluate(&trainer.model, monitor, &cfg.eval.radii_mm, cfg.eval.mre_mode)?.0);
        }
        if let Some(dir) = out_dir {
            write_json(&summary_path(dir, round), &summary)?;
            trainer.checkpoint(round).save(&checkpoint_path(dir, round))?;
        }
        summaries.push(summary);
    }
    let last_round = if start > last { start.saturating_sub(1) } else { last };
    Ok(AdaptationOutcome { model: trainer.model, rounds: summaries, last_round })
}
