use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::{Device, Kind, Reduction, Tensor};

use super::config::SegTrainConfig;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::losses::soft_dice_discrepancy;
use crate::nets::archive::named_variables;
use crate::nets::Segmenter;
use crate::rng::NamedStreams;
use crate::synth::{Dataset, Split, StainProfile};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegTrainReport {
    pub steps_run: u64,
    pub best_step: u64,
    pub best_val_dice: f64,
    pub losses: Vec<f64>,
    pub val_dice: Vec<(u64, f64)>,
    pub stopped_early: bool,
}

/// One of the eight square symmetries, applied to images and masks alike.
pub fn dihedral(xs: &Tensor, code: u8) -> Tensor {
    let (h, w) = (xs.dim() as i64 - 2, xs.dim() as i64 - 1);
    let flipped = if code & 4 != 0 { xs.flip([w]) } else { xs.shallow_clone() };
    match code & 3 {
        0 => flipped,
        k => flipped.rot90(k as i64, [h, w]),
    }
}

/// Dice of hard predictions pooled over every pixel of the batch.
pub fn pooled_dice(segmenter: &Segmenter, images: &Tensor, masks: &Tensor) -> Result<f64> {
    let _guard = tch::no_grad_guard();
    let mut inter = 0.0;
    let mut total = 0.0;
    let n = images.size()[0];
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        let logits = segmenter.forward(&images.narrow(0, start, len))?;
        let pred = logits.argmax(1, false).to_kind(Kind::Double);
        let truth = masks.narrow(0, start, len).to_kind(Kind::Double);
        inter += (&pred * &truth).sum(Kind::Double).double_value(&[]);
        total += pred.sum(Kind::Double).double_value(&[]) + truth.sum(Kind::Double).double_value(&[]);
        start += len;
    }
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

fn snapshot(vs: &VarStore) -> BTreeMap<String, Tensor> {
    named_variables(vs).into_iter().map(|(k, v)| (k, v.detach().copy())).collect()
}

/// Trains the segmenter on source-profile train patches with dihedral
/// augmentation, keeps the weights with the best validation Dice and stops
/// once validation stops improving for `patience` evaluations.
pub fn train_segmenter(
    data: &Dataset,
    profile: StainProfile,
    cfg: &SegTrainConfig,
    device: Device,
) -> Result<(Segmenter, SegTrainReport)> {
    cfg.segmenter.validate()?;
    tch::manual_seed(cfg.seed as i64);
    let mut streams = NamedStreams::new(cfg.seed);
    let segmenter = Segmenter::new(cfg.segmenter.clone(), device)?;
    let params = named_variables(segmenter.var_store()).into_iter().collect();
    let mut opt = Adam::new(params, 0.9, 0.999);

    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let images = train.images(profile).to_device(device);
    let masks = train.masks.to_kind(Kind::Int64).to_device(device);
    let val_images = val.images(profile).to_device(device);
    let val_masks = val.masks.to_device(device);
    let n = images.size()[0];

    let mut report = SegTrainReport {
        steps_run: 0,
        best_step: 0,
        best_val_dice: f64::NEG_INFINITY,
        losses: Vec::new(),
        val_dice: Vec::new(),
        stopped_early: false,
    };
    let mut best = snapshot(segmenter.var_store());
    let mut stale = 0;
    for step in 0..cfg.steps {
        let rng = streams.get("batches");
        let idx: Vec<i64> = (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let code: u8 = streams.get("augment").gen_range(0..8);
        let idx = Tensor::from_slice(&idx).to_device(device);
        let x = dihedral(&images.index_select(0, &idx), code);
        let y = dihedral(&masks.index_select(0, &idx), code);

        opt.zero_grad();
        let logits = segmenter.forward(&x)?;
        let ce = logits.cross_entropy_loss::<Tensor>(&y, None, Reduction::Mean, -100, 0.0);
        let prob = logits.softmax(1, Kind::Float).select(1, 1);
        let loss = ce + soft_dice_discrepancy(&prob, &y.to_kind(Kind::Float))?;
        loss.backward();
        opt.step(cfg.lr);
        report.losses.push(loss.double_value(&[]));
        report.steps_run = step + 1;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let dice = pooled_dice(&segmenter, &val_images, &val_masks)?;
            report.val_dice.push((step + 1, dice));
            log::info!("segmenter step {} loss {:.4} val dice {:.4}", step + 1, loss.double_value(&[]), dice);
            if dice > report.best_val_dice {
                report.best_val_dice = dice;
                report.best_step = step + 1;
                best = snapshot(segmenter.var_store());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    tch::no_grad(|| {
        for (name, var) in named_variables(segmenter.var_store()) {
            let mut var = var;
            var.copy_(&best[&name]);
        }
    });
    if report.best_val_dice < cfg.min_val_dice {
        return Err(Error::NotConverged {
            dice: report.best_val_dice,
            threshold: cfg.min_val_dice,
        });
    }
    Ok((segmenter, report))
}
