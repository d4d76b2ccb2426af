//! Deterministic training loop: seeded shuffling, batched forward/backward
//! with ordered gradient accumulation, Adam updates, CSV logging, periodic
//! evaluation, and checkpointing. Two runs with the same config and data
//! produce byte-identical logs and checkpoints.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::loss::{extract_targets, total_loss, GtObject, LossBreakdown, LossWeights};
use crate::metrics::{evaluate_metrics, MetricsReport};
use crate::model::{semantic_labels, Model, ModelConfig};
use crate::params::ParamStore;
use crate::phantom::{preprocess_trick, read_sample, replicate3, DatasetManifest};
use crate::rng::CounterRng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Validation cadence in steps (also runs at the final step).
    pub eval_interval: usize,
    pub seed: u64,
    /// Multi-scale channel stacking on (true) or plain replication (false).
    pub preprocess_trick: bool,
    pub model: ModelConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eval_interval: 50,
            seed: 7,
            preprocess_trick: true,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        self.model.validate()?;
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }
}

/// A dataset sample prepared for the model.
pub struct LoadedSample {
    pub input: Tensor<f32>,
    pub targets: Vec<GtObject<f32>>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

pub fn load_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    trick: bool,
    n_classes: usize,
) -> Result<Vec<LoadedSample>> {
    manifest.validate_files(dir)?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let sample = read_sample(dir, manifest, s.id)?;
        let input = if trick {
            preprocess_trick(&sample.image)?
        } else {
            replicate3(&sample.image)?
        };
        let (h4, w4) = (sample.height / 4, sample.width / 4);
        let targets = extract_targets(&sample.labels, sample.height, sample.width, h4, w4, n_classes);
        out.push(LoadedSample {
            input,
            targets,
            labels: sample.labels,
            height: sample.height,
            width: sample.width,
        });
    }
    Ok(out)
}

/// Metrics of a model over loaded samples (arg-max label maps vs targets).
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LoadedSample],
    manifest: &DatasetManifest,
) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.forward(store, &s.input)?;
        preds.push(semantic_labels(&out, model.cfg.n_classes, s.height, s.width)?);
        gts.push(s.labels.clone());
    }
    evaluate_metrics(&preds, &gts, &manifest.classes)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_mdice: f64,
    pub report: MetricsReport,
}

pub const LOG_HEADER: &str = "step,loss_total,loss_cls,loss_bce,loss_dice,loss_bls_a,loss_bls_b,val_mDice";

/// Train on every sample in the manifest; returns the final checkpoint and
/// log paths. Aborts on a non-finite loss, keeping the last good checkpoint.
pub fn train(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data_dir)?;
    if manifest.samples.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    if manifest.n_classes() != cfg.model.n_classes {
        return Err(Error::Config(format!(
            "model expects {} classes, dataset has {}",
            cfg.model.n_classes,
            manifest.n_classes()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let samples = load_dataset(data_dir, &manifest, cfg.preprocess_trick, cfg.model.n_classes)?;

    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&cfg.model, &mut store, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam(), &store);

    let ckpt_path = out_dir.join("model.ckpt");
    let log_path = out_dir.join("train_log.csv");
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    checkpoint::save(&ckpt_path, &store, Some(&adam))?; // step-0 state = last good

    let mut queue: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut final_report: Option<MetricsReport> = None;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if queue.is_empty() {
                queue = (0..samples.len()).collect();
                CounterRng::substream(cfg.seed, 0xE70C_0000 + epoch).shuffle(&mut queue);
                queue.reverse(); // pop() consumes in shuffled order
                epoch += 1;
            }
            batch.push(queue.pop().expect("refilled above"));
        }

        let mut loss_acc: Option<Tensor<f32>> = None;
        let mut bd_acc = LossBreakdown::default();
        for &idx in &batch {
            let s = &samples[idx];
            let outputs = model.forward(&store, &s.input)?;
            let (loss, bd) = total_loss(
                &outputs,
                &s.targets,
                &s.labels,
                (s.height, s.width),
                cfg.model.n_classes,
                &cfg.weights,
            )?;
            loss_acc = Some(match loss_acc {
                Some(prev) => prev.add(&loss)?,
                None => loss,
            });
            bd_acc.cls += bd.cls;
            bd_acc.bce += bd.bce;
            bd_acc.dice += bd.dice;
            bd_acc.bls_a += bd.bls_a;
            bd_acc.bls_b += bd.bls_b;
            bd_acc.total += bd.total;
        }
        let inv_b = 1.0 / batch.len() as f64;
        let batch_loss = loss_acc.expect("batch nonempty").mul_scalar(inv_b as f32);
        for v in [
            &mut bd_acc.cls,
            &mut bd_acc.bce,
            &mut bd_acc.dice,
            &mut bd_acc.bls_a,
            &mut bd_acc.bls_b,
            &mut bd_acc.total,
        ] {
            *v *= inv_b;
        }

        if !batch_loss.item().is_finite() {
            fs::write(&log_path, &log)?;
            return Err(Error::TrainAborted {
                msg: format!("non-finite loss at step {step}"),
                checkpoint: ckpt_path.display().to_string(),
            });
        }

        let grads = batch_loss.backward()?;
        adam_step(&mut store, &grads, &mut adam)?;

        let val = if step % cfg.eval_interval == 0 || step == cfg.steps {
            let report = evaluate_model(&model, &store, &samples, &manifest)?;
            let mdice = report.m_dice;
            final_report = Some(report);
            checkpoint::save(&ckpt_path, &store, Some(&adam))?;
            format!("{mdice}")
        } else {
            String::new()
        };
        log.push_str(&format!(
            "{step},{},{},{},{},{},{},{val}\n",
            bd_acc.total, bd_acc.cls, bd_acc.bce, bd_acc.dice, bd_acc.bls_a, bd_acc.bls_b
        ));
    }

    checkpoint::save(&ckpt_path, &store, Some(&adam))?;
    fs::write(&log_path, &log)?;
    let report = match final_report {
        Some(r) => r,
        None => evaluate_model(&model, &store, &samples, &manifest)?,
    };
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        final_mdice: report.m_dice,
        report,
    })
}
