use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{augment, AugmentConfig, VolumeSample};
use super::dice::{argmax_labels, dice_loss, dice_metric, one_hot, DiceConfig, DiceScores};
use super::optim::{adamw_step, cosine_lr, AdamWConfig, OptimState};
use crate::error::{Error, Result};
use crate::model::SegResMamba;
use crate::nn::Module;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Step budget. Takes precedence over `epochs` when both are set.
    pub steps: Option<usize>,
    /// Epoch budget: one epoch visits every sample once, in a seeded order.
    pub epochs: Option<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Random crop size; `None` trains on whole volumes.
    pub patch_extents: Option<[usize; 3]>,
    pub augment: bool,
    pub flip_prob: f64,
    pub intensity_scale: (f64, f64),
    /// Full-dataset evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub dice: DiceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        let opt = AdamWConfig::default();
        TrainConfig {
            steps: Some(500),
            epochs: None,
            lr_max: 1e-4,
            lr_min: 0.0,
            weight_decay: opt.weight_decay,
            betas: opt.betas,
            eps: opt.eps,
            seed: 0,
            patch_extents: None,
            augment: true,
            flip_prob: aug.flip_prob,
            intensity_scale: aug.intensity_scale,
            eval_every: 100,
            dice: DiceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        match (self.steps, self.epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => e * dataset_len,
            (None, None) => 0,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: if self.augment { self.flip_prob } else { 0.0 },
            intensity_scale: if self.augment {
                self.intensity_scale
            } else {
                (1.0, 1.0)
            },
            crop: self.patch_extents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_max.is_finite()
            && self.lr_min.is_finite()
            && self.lr_min >= 0.0
            && self.lr_max >= self.lr_min)
        {
            return bad(format!(
                "need 0 ≤ lr_min ≤ lr_max, got {} / {}",
                self.lr_min, self.lr_max
            ));
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("weight_decay must be ≥ 0 and eps > 0".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!(
                "flip_prob must lie in [0, 1], got {}",
                self.flip_prob
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Hard dice of this step's prediction on its (augmented) training sample.
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of optimizer steps taken before this evaluation.
    pub step: usize,
    /// Per-class dice averaged over samples.
    pub per_class: Vec<f64>,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl History {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// CSV with header `step,loss,lr,mean_dice`; floats use Rust's shortest
    /// round-trip formatting so reruns compare byte-for-byte.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss", "lr", "mean_dice"])
            .map_err(csv_err)?;
        for r in &self.steps {
            out.serialize((r.step, r.loss, r.lr, r.mean_dice))
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_eval_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let classes = self.evals.first().map_or(0, |e| e.per_class.len());
        let mut header = vec!["step".to_string(), "mean_dice".to_string()];
        header.extend((0..classes).map(|k| format!("dice_class{k}")));
        out.write_record(&header).map_err(csv_err)?;
        for e in &self.evals {
            let mut row = vec![e.step.to_string(), e.mean_dice.to_string()];
            row.extend(e.per_class.iter().map(f64::to_string));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Per-class dice over the whole dataset (no augmentation), classes averaged
/// over samples.
pub fn evaluate(
    model: &SegResMamba,
    dataset: &[VolumeSample],
    dice: &DiceConfig,
) -> Result<(Vec<f64>, f64)> {
    let k = model.config.num_classes;
    let mut per_class = vec![0.0; k];
    for s in dataset {
        let scores = predict_scores(model, s, dice.include_background)?;
        for (acc, v) in per_class.iter_mut().zip(&scores.per_class) {
            *acc += v;
        }
    }
    let n = dataset.len().max(1) as f64;
    per_class.iter_mut().for_each(|v| *v /= n);
    let counted = &per_class[usize::from(!dice.include_background).min(k)..];
    let mean = if counted.is_empty() {
        1.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Ok((per_class, mean))
}

/// Argmax labels of one sample (lowest-index tie-break).
pub fn predict_labels(model: &SegResMamba, sample: &VolumeSample) -> Result<Vec<usize>> {
    let logits = no_grad(|| model.forward(&sample.image_tensor()?))?;
    Ok(argmax_labels(&logits))
}

pub fn predict_scores(
    model: &SegResMamba,
    sample: &VolumeSample,
    include_background: bool,
) -> Result<DiceScores> {
    let pred = predict_labels(model, sample)?;
    dice_metric(
        &pred,
        &sample.label,
        model.config.num_classes,
        include_background,
    )
}

/// Runs the optimization loop in place on `model`. Each step draws the next
/// sample of a per-epoch seeded permutation, augments it, and takes one AdamW
/// step at the cosine-scheduled learning rate. A non-finite loss aborts with
/// [`Error::Diverged`] before any parameter is touched.
pub fn train_loop(
    model: &SegResMamba,
    dataset: &[VolumeSample],
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    let k = model.config.num_classes;
    for s in dataset {
        s.validate(k)?;
        if s.channels != model.config.in_channels {
            return Err(Error::Config(format!(
                "sample has {} channels, model expects {}",
                s.channels, model.config.in_channels
            )));
        }
        let extents = cfg.patch_extents.unwrap_or(s.extents);
        model.config.validate_extents(extents)?;
    }
    let total = cfg.total_steps(dataset.len());
    let mut history = History::default();
    if total == 0 {
        return Ok(history);
    }
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }

    let params = model.parameters();
    let mut state = OptimState::new(&params, cfg.adamw());
    let aug_cfg = cfg.augment_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut last_good = None;

    for step in 0..total {
        if step % dataset.len() == 0 {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
        }
        let sample = augment(&dataset[order[step % dataset.len()]], &aug_cfg, &mut rng)?;
        let target = one_hot(&sample.label, k, sample.extents)?;
        let lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)?;

        params.iter().for_each(Tensor::zero_grad);
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step, last_good },
            other => other,
        };
        let logits = model.forward(&sample.image_tensor()?).map_err(diverged)?;
        let loss = dice_loss(&logits, &target, &cfg.dice).map_err(diverged)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, last_good });
        }
        loss.backward().map_err(diverged)?;
        let grads_finite = params
            .iter()
            .all(|p| p.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
        if !grads_finite {
            return Err(Error::Diverged { step, last_good });
        }
        let pred = argmax_labels(&logits);
        let scores = dice_metric(&pred, &sample.label, k, cfg.dice.include_background)?;
        adamw_step(&params, &mut state, lr)?;
        last_good = Some(step);
        debug!(
            "step {step} loss {loss_value:.6} lr {lr:.3e} dice {:.4}",
            scores.mean
        );
        history.steps.push(StepRecord {
            step,
            loss: loss_value,
            lr,
            mean_dice: scores.mean,
        });

        let done = step + 1;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == total {
            let (per_class, mean_dice) = evaluate(model, dataset, &cfg.dice)?;
            info!("eval after {done} steps: mean dice {mean_dice:.4} {per_class:?}");
            history.evals.push(EvalRecord {
                step: done,
                per_class,
                mean_dice,
            });
        }
    }
    params.iter().for_each(Tensor::zero_grad);
    Ok(history)
}
