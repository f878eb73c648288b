use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, TrainConfig};
use super::freeze::apply_freeze_policy;
use super::optim::{adamw_step, AdamW, OptimizerState};
use crate::data::{downsample_gt, load_samples, BinaryMask, DatasetManifest, SegmentationSample, Split};
use crate::error::{dim_err, Error, Result};
use crate::eval::{
    logits_to_mask, model_input, overlap, predict_logits, predict_logits_from_embedding, ModelInput,
};
use crate::graph::{Graph, Var};
use crate::model::{decode_masks, encode_box_prompt, encode_image, image_embedding, save_checkpoint, ModelConfig};
use crate::params::{Component, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.json";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.json";

/// A training sample turned into network inputs and its soft `M × M` target.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub sample_id: String,
    pub input: ModelInput<T>,
    pub target: Tensor<T>,
    /// Target binarised at 0.5, used for the IoU-head regression target.
    pub target_mask: BinaryMask,
    /// Cached image embedding when the encoder is frozen.
    pub embedding: Option<Tensor<T>>,
    /// Fixed IoU-head targets; when `None` they are measured from the
    /// current prediction.
    pub iou_targets: Option<Vec<f64>>,
}

pub fn prepare_samples<T: Scalar>(
    samples: &[SegmentationSample],
    cfg: &ModelConfig,
) -> Result<Vec<PreparedSample<T>>> {
    samples
        .iter()
        .map(|s| {
            let target: Tensor<T> = downsample_gt(&s.mask, cfg.mask_side())?;
            let side = cfg.mask_side();
            let half = T::lit(0.5);
            let target_mask =
                BinaryMask::new(side, side, target.data().iter().map(|&v| v >= half).collect())?;
            Ok(PreparedSample {
                sample_id: s.sample_id.clone(),
                input: model_input(s, cfg)?,
                target,
                target_mask,
                embedding: None,
                iou_targets: None,
            })
        })
        .collect()
}

fn cache_embeddings<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    samples: &mut [PreparedSample<T>],
) -> Result<()> {
    for s in samples {
        s.embedding = Some(image_embedding(params, cfg, &s.input.image)?);
    }
    Ok(())
}

/// Builds the per-sample objective: Dice on the primary mask against the
/// soft target plus `λ · mean_k (iou_k − IoU_k)²`, where `IoU_k` is the
/// measured IoU of mask `k` at `M × M` (treated as a constant).
pub fn sample_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &crate::params::BoundParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    s: &PreparedSample<T>,
) -> Result<Var> {
    let emb = match &s.embedding {
        Some(e) => g.constant(e.clone()),
        None => encode_image(g, p, cfg, &s.input.image)?,
    };
    let prompt = encode_box_prompt(g, p, &s.input.bbox, s.input.width, s.input.height)?;
    let (logits, iou) = decode_masks(g, p, cfg, emb, prompt)?;
    let side = cfg.mask_side();
    let k = cfg.num_mask_tokens;

    let flat = g.reshape(logits, &[k, side * side])?;
    let first = g.slice_rows(flat, 0, 1)?;
    let first = g.reshape(first, &[side, side])?;
    let probs = g.sigmoid(first);
    let target = g.constant(s.target.clone());
    let dice = g.dice_loss(probs, target, T::lit(tcfg.eps_dice))?;
    if tcfg.lambda_iou == 0.0 {
        return Ok(dice);
    }

    let measured: Vec<T> = match &s.iou_targets {
        Some(t) if t.len() == k => t.iter().map(|&v| T::lit(v)).collect(),
        Some(t) => return dim_err(format!("expected {k} IoU targets, got {}", t.len())),
        None => {
            let values = g.value(logits).clone();
            (0..k)
                .map(|m| {
                    let plane = values.channel(m)?;
                    let pred = BinaryMask::from_tensor(&plane, T::zero())?;
                    Ok(T::lit(overlap(&pred, &s.target_mask)?.iou()))
                })
                .collect::<Result<_>>()?
        }
    };
    let measured = g.constant(Tensor::new(&[k], measured)?);
    let diff = g.sub(iou, measured)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.sum(sq);
    let mse = g.scale(mse, T::lit(tcfg.lambda_iou / k as f64));
    g.add(dice, mse)
}

/// Loss and gradients of one sample for the names in `trainable`.
pub fn sample_gradients<T: Scalar>(
    params: &ParameterStore<T>,
    trainable: &BTreeSet<String>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    s: &PreparedSample<T>,
) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, trainable);
    let loss = sample_loss(&mut g, &p, cfg, tcfg, s)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    let mut grads = p.collect_grads(&g);
    for name in trainable {
        if !grads.contains_key(name) {
            let n = params.get(name)?.numel();
            grads.insert(name.clone(), vec![T::zero(); n]);
        }
    }
    Ok((value, grads))
}

fn add_into<T: Scalar>(acc: &mut BTreeMap<String, Vec<T>>, grads: BTreeMap<String, Vec<T>>, scale: T) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, &v)| *a += v * scale),
            None => {
                acc.insert(name, g.into_iter().map(|v| v * scale).collect());
            }
        }
    }
}

/// Gradient of the mean loss over `batch`, accumulated in chunks of
/// `micro_batch` samples. Within a chunk, per-sample gradients are summed in
/// sample-id order; each chunk sum is scaled by `1/effective_batch`.
pub fn batch_gradients<T: Scalar>(
    params: &ParameterStore<T>,
    trainable: &BTreeSet<String>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    batch: &[&PreparedSample<T>],
) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
    let scale = T::lit(1.0 / tcfg.effective_batch as f64);
    let mut acc = BTreeMap::new();
    let mut loss = 0.0;
    for chunk in batch.chunks(tcfg.micro_batch.max(1)) {
        let mut chunk: Vec<&PreparedSample<T>> = chunk.to_vec();
        chunk.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut sum: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for s in chunk {
            let (l, g) = sample_gradients(params, trainable, cfg, tcfg, s)?;
            loss += l;
            add_into(&mut sum, g, T::one());
        }
        add_into(&mut acc, sum, scale);
    }
    Ok((loss / batch.len().max(1) as f64, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Optimizer steps completed.
    pub step: usize,
    /// Mean batch loss over the steps since the previous record.
    pub train_loss: f64,
    pub val_dsc: f64,
    pub val_miou: f64,
    /// Learning rate of the last step in the interval.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub best_step: usize,
    pub best_val_dsc: f64,
    pub best_val_miou: f64,
    /// File name of the restored checkpoint inside the output directory.
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,val_dsc,val_miou,lr\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.train_loss, r.val_dsc, r.val_miou, r.lr
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("history.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("history.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

pub struct TrainOutcome<T> {
    /// Restored best-validation weights.
    pub params: ParameterStore<T>,
    pub history: TrainHistory,
    pub optimizer: OptimizerState<T>,
}

/// Mean DSC and IoU at original resolution.
pub fn validation_scores<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    prepared: &[PreparedSample<T>],
    samples: &[SegmentationSample],
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].sample_id.cmp(&samples[b].sample_id));
    let (mut d, mut i) = (0.0, 0.0);
    for k in order {
        let (s, prep) = (&samples[k], &prepared[k]);
        let (logits, _) = match &prep.embedding {
            Some(e) => predict_logits_from_embedding(params, cfg, e, &prep.input)?,
            None => predict_logits(params, cfg, &prep.input)?,
        };
        let o = overlap(&logits_to_mask(&logits, s.height(), s.width())?, &s.mask)?;
        d += o.dsc();
        i += o.iou();
    }
    let n = samples.len() as f64;
    Ok((d / n, i / n))
}

fn checkpoint_metadata(tcfg: &TrainConfig, step: usize, dsc: f64, miou: f64) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("strategy".to_string(), serde_json::json!(tcfg.strategy.label())),
        ("train_seed".to_string(), serde_json::json!(tcfg.seed)),
        ("step".to_string(), serde_json::json!(step)),
        ("val_dsc".to_string(), serde_json::json!(dsc)),
        ("val_miou".to_string(), serde_json::json!(miou)),
    ])
}

/// Trains from `init` on `train`, validating on `val` every
/// `eval_interval` steps, and returns the best-validation weights (ties go
/// to the earliest step). With `out_dir`, writes the best checkpoint and
/// `history.{csv,json}`; on a numeric failure the last good weights are
/// saved before the error is returned.
pub fn train_on_samples<T: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    init: ParameterStore<T>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    tcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut params = init;
    let trainable = apply_freeze_policy(&params, &tcfg.strategy.policy());
    let encoder_frozen = !trainable
        .iter()
        .any(|n| Component::of(n) == Some(Component::ImageEncoder));

    let mut train_prep = prepare_samples::<T>(train, cfg)?;
    let mut val_prep = prepare_samples::<T>(val, cfg)?;
    if encoder_frozen {
        cache_embeddings(&params, cfg, &mut train_prep)?;
        cache_embeddings(&params, cfg, &mut val_prep)?;
    }

    let hp = AdamW {
        beta1: tcfg.beta1,
        beta2: tcfg.beta2,
        eps: tcfg.adam_eps,
        weight_decay: tcfg.weight_decay,
    };
    let mut state = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut stream: Vec<usize> = Vec::new();
    let mut history = TrainHistory::default();
    let mut best: Option<ParameterStore<T>> = None;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    for step in 0..tcfg.total_steps {
        while stream.len() < tcfg.effective_batch {
            let mut perm: Vec<usize> = (0..train_prep.len()).collect();
            perm.shuffle(&mut rng);
            stream.extend(perm.into_iter().rev());
        }
        let idx: Vec<usize> = stream.drain(stream.len() - tcfg.effective_batch..).rev().collect();
        let batch: Vec<&PreparedSample<T>> = idx.iter().map(|&i| &train_prep[i]).collect();
        let lr = lr_at(step, tcfg)?;
        let stepped = batch_gradients(&params, &trainable, cfg, tcfg, &batch)
            .and_then(|(loss, grads)| {
                adamw_step(&mut params, &grads, &mut state, lr, &hp)?;
                Ok(loss)
            });
        let loss = match stepped {
            Ok(l) => l,
            Err(e) => {
                if let Some(dir) = out_dir {
                    let meta = checkpoint_metadata(tcfg, step, f64::NAN, f64::NAN);
                    save_checkpoint(&params, cfg, cfg.seed, meta, &dir.join(LAST_GOOD_CHECKPOINT))?;
                    history.write(dir)?;
                }
                return Err(e);
            }
        };
        loss_sum += loss;
        loss_n += 1;

        let done = step + 1;
        if done % tcfg.eval_interval == 0 || done == tcfg.total_steps {
            let (dsc, miou) = validation_scores(&params, cfg, &val_prep, val)?;
            history.records.push(HistoryRecord {
                step: done,
                train_loss: loss_sum / loss_n as f64,
                val_dsc: dsc,
                val_miou: miou,
                lr,
            });
            (loss_sum, loss_n) = (0.0, 0);
            if best.is_none() || dsc > history.best_val_dsc {
                history.best_step = done;
                history.best_val_dsc = dsc;
                history.best_val_miou = miou;
                best = Some(params.clone());
            }
        }
    }
    let params = best.expect("at least one validation record");
    if let Some(dir) = out_dir {
        let meta = checkpoint_metadata(tcfg, history.best_step, history.best_val_dsc, history.best_val_miou);
        save_checkpoint(&params, cfg, cfg.seed, meta, &dir.join(BEST_CHECKPOINT))?;
        history.best_checkpoint = Some(PathBuf::from(BEST_CHECKPOINT));
        history.write(dir)?;
    }
    Ok(TrainOutcome {
        params,
        history,
        optimizer: state,
    })
}

/// [`train_on_samples`] on the train and val splits of a manifest.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    manifest: &DatasetManifest,
    data_dir: &Path,
    init: ParameterStore<T>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let tr = load_samples(data_dir, &manifest.with_split(Split::Train))?;
    let va = load_samples(data_dir, &manifest.with_split(Split::Val))?;
    train_on_samples(cfg, tcfg, &tr, &va, init, out_dir)
}
