use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{softmax_attack, Mode, Model, NormStats};
use crate::error::{Error, Result};
use crate::fmm::{mix_spectra, plan_replacements, MixConfig};
use crate::plane::Image;
use crate::rng::{hex_string, substream};
use crate::spectral::{dct2, make_band_mask, Spectrum};
use crate::tensorcore::{Sgd, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of the training partition held out for model selection.
    pub val_fraction: f64,
    /// Frequency mixing; absent means no mixing at all.
    pub fmm: Option<MixConfig>,
    /// Pool manifest for mixing (consumed by the corpus-level runner).
    pub target_pool_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            val_fraction: 0.1,
            fmm: None,
            target_pool_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "train.batch_size and train.epochs must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "train.val_fraction {} outside [0, 0.5)",
                self.val_fraction
            )));
        }
        if let Some(m) = &self.fmm {
            m.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub label: usize,
}

/// The few target-domain bonafide images available for mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPool {
    pub members: Vec<(String, Image)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub best_model: Model,
    pub best_epoch: usize,
    pub steps: u64,
    pub log: Vec<EpochLog>,
    /// SHA-256 over the data pipeline (sample order, crop offsets, mixing
    /// decisions); independent of the model being trained.
    pub pipeline_hash: String,
    /// Ids of the pool members that were actually mixed into some batch.
    pub targets_used: BTreeSet<String>,
    pub val_ids: Vec<String>,
}

fn mean_xent(model: &Model, images: &[&Image], labels: &[usize]) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let vars: Vec<_> = model.params().iter().map(|p| tape.constant(p.clone())).collect();
    let x = tape.constant(Model::batch_tensor(images)?);
    let fwd = model.forward(&mut tape, &vars, x, Mode::Eval)?;
    let loss = tape.softmax_xent(fwd.logits, labels)?;
    let correct = softmax_attack(tape.value(fwd.logits))
        .iter()
        .zip(labels)
        .filter(|(s, &l)| (**s >= 0.5) == (l == 1))
        .count();
    Ok((tape.value(loss).item()?, correct))
}

/// Sets normalization statistics to their average over this epoch's
/// batches under the current weights.
fn recalibrate_norms(model: &mut Model, batches: &[Vec<Image>]) -> Result<()> {
    let mut acc = NormStats::default();
    for crops in batches {
        let refs: Vec<&Image> = crops.iter().collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = model.params().iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(Model::batch_tensor(&refs)?);
        let fwd = model.forward(&mut tape, &vars, x, Mode::Train)?;
        model.accumulate_norm_stats(&tape, &fwd, &mut acc)?;
    }
    model.set_running_stats(&acc)
}

fn diverged(model: &Model, epoch: usize, batch: usize, cause: &Error) -> Error {
    let norms: Vec<serde_json::Value> = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| {
            let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            serde_json::json!({ "name": n, "norm": norm })
        })
        .collect();
    let dump = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "cause": cause.to_string(),
        "param_norms": norms,
    });
    Error::Diverged(dump.to_string())
}

/// Trains `model` on `data` with SGD + momentum.
///
/// Randomness is split into substreams of `tcfg.seed`: `split` (validation
/// hold-out), `shuffle` (epoch order), `crop` (random crop offsets) and
/// `mix` (replacement draws). Model initialization is not touched here, so
/// the pipeline is identical whatever the architecture.
pub fn train(
    mut model: Model,
    data: &[LabeledImage],
    pool: Option<&TargetPool>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let cfg = model.config().clone();
    let (n_in, crop) = (cfg.input_size, cfg.crop_size);
    if data.len() < 2 {
        return Err(Error::InvalidArgument("need at least two training images".into()));
    }
    for s in data {
        if s.image.shape() != (n_in, n_in) {
            return Err(Error::Shape(format!(
                "{}: expected {n_in}x{n_in}, got {:?}",
                s.id,
                s.image.shape()
            )));
        }
        if s.label > 1 {
            return Err(Error::InvalidArgument(format!("{}: label {}", s.id, s.label)));
        }
    }
    let mixing = match (&tcfg.fmm, pool) {
        (Some(m), Some(p)) if !p.members.is_empty() => Some((m, p)),
        (Some(_), _) => return Err(Error::InvalidArgument("mixing requested without a target pool".into())),
        (None, _) => None,
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut substream(tcfg.seed, "split"));
    let n_val = if tcfg.val_fraction > 0.0 {
        ((tcfg.val_fraction * data.len() as f64).round() as usize).clamp(1, data.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();
    let val_crops = val_idx
        .iter()
        .map(|&i| model.eval_crop(&data[i].image))
        .collect::<Result<Vec<_>>>()?;
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| data[i].label).collect();

    let band = match mixing {
        Some((m, _)) => Some(make_band_mask(n_in, n_in, m.low_fraction)?),
        None => None,
    };
    let target_spectra: Vec<Spectrum> = match mixing {
        Some((_, p)) => p
            .members
            .iter()
            .map(|(id, img)| {
                if img.shape() != (n_in, n_in) {
                    return Err(Error::Shape(format!("pool image {id} is {:?}", img.shape())));
                }
                dct2(img)
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut source_spectra: Vec<Option<Spectrum>> = vec![None; data.len()];

    let mut shuffle_rng = substream(tcfg.seed, "shuffle");
    let mut crop_rng = substream(tcfg.seed, "crop");
    let mut mix_rng = substream(tcfg.seed, "mix");
    let mut trace = Sha256::new();
    let mut opt = Sgd::new(tcfg.lr, tcfg.momentum);
    let mut targets_used = BTreeSet::new();
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut steps = 0u64;
    let mut epoch_order = train_idx.to_vec();
    let max_offset = n_in - crop;

    for epoch in 1..=tcfg.epochs {
        epoch_order.shuffle(&mut shuffle_rng);
        trace.update((epoch as u64).to_le_bytes());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut epoch_batches: Vec<Vec<Image>> = Vec::new();
        // a short trailing batch gives noisy normalization statistics; its
        // samples are left out of this epoch (the shuffle rotates them)
        let bs = tcfg.batch_size.min(epoch_order.len());
        let used = epoch_order.len() - epoch_order.len() % bs;
        for (bi, batch) in epoch_order[..used].chunks(bs).enumerate() {
            let plan = match mixing {
                Some((m, p)) => plan_replacements(batch.len(), p.members.len(), m.replace_prob, &mut mix_rng),
                None => vec![None; batch.len()],
            };
            let mut crops = Vec::with_capacity(batch.len());
            for (&i, pick) in batch.iter().zip(&plan) {
                let top = crop_rng.gen_range(0..=max_offset);
                let left = crop_rng.gen_range(0..=max_offset);
                trace.update((i as u64).to_le_bytes());
                trace.update((top as u64).to_le_bytes());
                trace.update((left as u64).to_le_bytes());
                trace.update(pick.map_or(u64::MAX, |j| j as u64).to_le_bytes());
                let full = match pick {
                    Some(j) => {
                        let (m, p) = mixing.expect("plan only picks when mixing");
                        targets_used.insert(p.members[*j].0.clone());
                        let spec = match &source_spectra[i] {
                            Some(s) => s,
                            None => source_spectra[i].insert(dct2(&data[i].image)?),
                        };
                        let mixed = mix_spectra(spec, &target_spectra[*j], band.as_ref().expect("band"))?;
                        if m.clip_output {
                            mixed.clamp01()
                        } else {
                            mixed
                        }
                    }
                    None => data[i].image.clone(),
                };
                crops.push(full.crop(top, left, crop, crop)?);
            }
            epoch_batches.push(crops);
            let refs: Vec<&Image> = epoch_batches.last().expect("just pushed").iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();

            let step = (|| -> Result<(f64, usize, Vec<_>)> {
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape);
                let x = tape.constant(Model::batch_tensor(&refs)?);
                let fwd = model.forward(&mut tape, &vars, x, Mode::Train)?;
                let loss = tape.softmax_xent(fwd.logits, &labels)?;
                let lv = tape.value(loss).item()?;
                let ok = softmax_attack(tape.value(fwd.logits))
                    .iter()
                    .zip(&labels)
                    .filter(|(s, &l)| (**s >= 0.5) == (l == 1))
                    .count();
                tape.backward(loss)?;
                let grads = vars.iter().map(|v| tape.grad(*v).cloned()).collect();
                Ok((lv, ok, grads))
            })();
            let (lv, ok, grads) = step.map_err(|e| diverged(&model, epoch, bi, &e))?;
            if !lv.is_finite() {
                return Err(diverged(&model, epoch, bi, &Error::NonFinite("loss".into())));
            }
            let grad_refs: Vec<_> = grads.iter().map(|g| g.as_ref()).collect();
            opt.step(model.params_mut(), &grad_refs)?;
            steps += 1;
            loss_sum += lv * batch.len() as f64;
            correct += ok;
        }
        recalibrate_norms(&mut model, &epoch_batches).map_err(|e| diverged(&model, epoch, usize::MAX, &e))?;
        let n_train = used as f64;
        let val_loss = if val_crops.is_empty() {
            f64::NAN
        } else {
            let refs: Vec<&Image> = val_crops.iter().collect();
            let mut total = 0.0;
            for (imgs, labels) in refs.chunks(32).zip(val_labels.chunks(32)) {
                total += mean_xent(&model, imgs, labels)?.0 * imgs.len() as f64;
            }
            total / refs.len() as f64
        };
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n_train,
            train_acc: correct as f64 / n_train,
            val_loss,
        });
        // without a hold-out every epoch counts as an improvement
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_loss.is_nan() || val_loss < *b,
        };
        if improved {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        steps,
        log,
        pipeline_hash: hex_string(&trace.finalize()),
        targets_used,
        val_ids: val_idx.iter().map(|&i| data[i].id.clone()).collect(),
    })
}
