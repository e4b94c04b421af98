//! Optimization: Adam with step decay over seeded, augmented mini-batches,
//! per-epoch validation, checkpointing and a CSV metrics log.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{
    augment, read_manifest, split_train_val, sub_seed, AugmentConfig, TrainingSample,
};
use crate::error::{Error, Result};
use crate::losses::{dice_loss, qg_loss, total_loss, QgConfig};
use crate::metrics::csv_error;
use crate::net::{self, round_to_f32, Bound, FusionConfig, WeightStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub net: FusionConfig,
    pub qg: QgConfig,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    /// Full-scale schedule: batch 16, 50 epochs, 156 crops.
    pub fn paper() -> Self {
        TrainConfig {
            lr0: 1e-4,
            decay: 0.8,
            decay_every: 2,
            batch_size: 16,
            epochs: 50,
            lambda: 1.0,
            seed: 0,
            net: FusionConfig::default(),
            qg: QgConfig::default(),
            augment: AugmentConfig::paper(),
        }
    }

    /// Desk-scale schedule: batch 8, 20 epochs, 128 crops.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 20,
            augment: AugmentConfig::desk(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && 0.0 < self.decay && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(
                "need lr0 > 0 and 0 < decay <= 1".into(),
            ));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::InvalidArgument(
                "batch size and decay period must be positive".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument("λ must be non-negative".into()));
        }
        self.net.validate()?;
        self.qg.validate()
    }
}

/// `lr0 · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Bias-corrected Adam moments for every named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &WeightStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of every parameter in place.
pub fn adam_step(
    params: &mut WeightStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for '{name}'")))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no optimizer state for '{name}'")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "'{name}': param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Per-sample loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub dice: f64,
    pub qg: f64,
    pub total: f64,
}

/// Training loss of one sample with weights already bound to a tape:
/// Dice on the initial map plus `λ` times the `Q_g` loss of the fused image.
pub fn sample_loss<'t>(
    tape: &'t Tape,
    w: &Bound<'t>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
) -> Result<(Var<'t>, LossTerms)> {
    let a = tape.constant(sample.near.clone());
    let b = tape.constant(sample.far.clone());
    let out = net::forward(&a, &b, &cfg.net, w)?;
    let dice = dice_loss(&out.initial, &sample.mask)?;
    let fused = if cfg.lambda > 0.0 {
        out.fused.clone()
    } else {
        out.fused.detach()
    };
    let qg = qg_loss(&a, &b, &fused, &cfg.qg)?;
    let total = total_loss(&dice, &qg, cfg.lambda)?;
    let terms = LossTerms {
        dice: dice.value().item(),
        qg: qg.value().item(),
        total: total.value().item(),
    };
    Ok((total, terms))
}

/// Forward and backward for one sample: loss terms and per-weight gradients.
pub fn sample_gradients(
    weights: &WeightStore,
    sample: &TrainingSample,
    cfg: &TrainConfig,
) -> Result<(LossTerms, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let w = weights.bind(&tape);
    let (total, terms) = sample_loss(&tape, &w, sample, cfg)?;
    if !terms.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {terms:?}")));
    }
    let grads = tape.backward(&total)?;
    Ok((terms, w.gradients(&grads)))
}

/// Mean loss and mean gradients over a batch. Samples run in parallel; the
/// reduction is in batch order, so results do not depend on thread count.
pub fn batch_gradients(
    weights: &WeightStore,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(LossTerms, BTreeMap<String, Tensor>)> {
    let per_sample: Vec<_> = batch
        .par_iter()
        .map(|s| sample_gradients(weights, s, cfg))
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let mut terms = LossTerms::default();
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for (t, grads) in per_sample {
        terms.dice += t.dice / n;
        terms.qg += t.qg / n;
        terms.total += t.total / n;
        for (k, g) in grads {
            match acc.get_mut(&k) {
                Some(a) => a
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, g)| *a += g),
                None => {
                    acc.insert(k, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((terms, acc))
}

/// Dice coefficient of the map binarized at 0.5 against a binary mask.
/// Two empty masks score 1.
pub fn binary_dice(dm: &Tensor, mask: &Tensor) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&d, &m) in dm.data().iter().zip(mask.data()) {
        let (pd, gm) = (d > 0.5, m >= 0.5);
        inter += (pd && gm) as usize;
        p += pd as usize;
        g += gm as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Validation metrics: mean binarized Dice of the final map and mean `Q_g` loss.
pub fn evaluate(
    weights: &WeightStore,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let scores: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let tape = Tape::no_grad();
            let w = weights.bind_const(&tape);
            let a = tape.constant(s.near.clone());
            let b = tape.constant(s.far.clone());
            let out = net::forward(&a, &b, &cfg.net, &w)?;
            let qg = qg_loss(&a, &b, &out.fused, &cfg.qg)?.value().item();
            Ok((binary_dice(out.final_dm.value(), &s.mask), qg))
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean soft Dice score (1 - Dice loss) over the epoch's batches.
    pub train_dice: f64,
    /// Mean `Q_g` loss over the epoch's batches.
    pub train_qg: f64,
    /// Mean binarized-map Dice score on the validation split.
    pub val_dice: f64,
    pub val_qg: f64,
}

pub const LOG_HEADER: [&str; 6] = [
    "epoch",
    "lr",
    "train_dice",
    "train_qg",
    "val_dice",
    "val_qg",
];

pub fn write_log(rows: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(LOG_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            // shortest round-trip form, so a resumed run reads back exact values
            format!("{:e}", r.lr),
            r.train_dice.to_string(),
            r.train_qg.to_string(),
            r.val_dice.to_string(),
            r.val_qg.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad field {i} in {rec:?}")))
        };
        rows.push(EpochLog {
            epoch: f(0)? as usize,
            lr: f(1)?,
            train_dice: f(2)?,
            train_qg: f(3)?,
            val_dice: f(4)?,
            val_qg: f(5)?,
        });
    }
    Ok(rows)
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: WeightStore,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub best_val: f64,
}

const ADAM_TAG: &[u8; 4] = b"ADAM";

impl Checkpoint {
    /// Weight records, a zero-length-name sentinel, then the optimizer section
    /// (`"ADAM"`, step, epoch, best validation score, and per-parameter `f64`
    /// moments in name order).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        self.weights.write_to(w)?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(ADAM_TAG)?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        w.write_all(&(self.epoch as u64).to_le_bytes())?;
        w.write_all(&self.best_val.to_le_bytes())?;
        for (name, m) in &self.adam.m {
            let v = &self.adam.v[name];
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.len() as u64).to_le_bytes())?;
            for x in m.data().iter().chain(v.data()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let (weights, sentinel) = WeightStore::read_from(&mut r, path)?;
        let bad = |d: &str| Error::format(path, d.to_string());
        if !sentinel {
            return Err(bad(
                "weight file has no optimizer section; not a checkpoint",
            ));
        }
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag)
            .map_err(|_| bad("truncated optimizer section"))?;
        if &tag != ADAM_TAG {
            return Err(bad("unknown optimizer section"));
        }
        let u64_ = |r: &mut BufReader<std::fs::File>| {
            crate::net::read_u64(r).map_err(|_| bad("truncated optimizer section"))
        };
        let step = u64_(&mut r)?;
        let epoch = u64_(&mut r)? as usize;
        let best_val = f64::from_bits(u64_(&mut r)?);
        let mut adam = AdamState::new(&weights);
        adam.step = step;
        for (name, p) in weights.iter() {
            let len = crate::net::read_u32(&mut r)
                .map_err(|_| bad("truncated optimizer section"))? as usize;
            let mut got = vec![0u8; len];
            r.read_exact(&mut got)
                .map_err(|_| bad("truncated optimizer section"))?;
            if got != name.as_bytes() {
                return Err(bad(&format!("optimizer state out of order at '{name}'")));
            }
            let n = u64_(&mut r)? as usize;
            if n != p.len() {
                return Err(bad(&format!(
                    "optimizer state for '{name}' has {n} values, parameter has {}",
                    p.len()
                )));
            }
            for buf in [adam.m.get_mut(name), adam.v.get_mut(name)] {
                let buf = buf.expect("same names").data_mut();
                for x in buf.iter_mut() {
                    *x = f64::from_bits(u64_(&mut r)?);
                }
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after optimizer section"));
        }
        Ok(Checkpoint {
            weights,
            adam,
            epoch,
            best_val,
        })
    }
}

/// Training data resident in memory.
pub struct Dataset {
    pub train: Vec<TrainingSample>,
    pub val: Vec<TrainingSample>,
}

impl Dataset {
    /// Load a manifest and split it 7:3 with `seed`.
    pub fn from_manifest(path: &Path, seed: u64) -> Result<Self> {
        let entries = read_manifest(path)?;
        if entries.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "manifest {} is empty",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let samples: Vec<TrainingSample> = entries
            .par_iter()
            .map(|e| e.load(base))
            .collect::<Result<_>>()?;
        Ok(Self::split(samples, seed))
    }

    pub fn split(samples: Vec<TrainingSample>, seed: u64) -> Self {
        let (ti, vi) = split_train_val(samples.len(), seed);
        Dataset {
            train: ti.iter().map(|&i| samples[i].clone()).collect(),
            val: vi.iter().map(|&i| samples[i].clone()).collect(),
        }
    }
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub best: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            checkpoint: dir.join("checkpoint.gacn"),
            best: dir.join("best.gacn"),
            log: dir.join("metrics.csv"),
        }
    }
}

/// Fresh training state for `cfg`.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Checkpoint {
    let weights = cfg.net.init_weights(sub_seed(cfg.seed, 0x1417));
    let adam = AdamState::new(&weights);
    Checkpoint {
        weights,
        adam,
        epoch: 0,
        best_val: f64::NEG_INFINITY,
    }
}

/// Run one epoch in place: seeded shuffle, augmentation and Adam steps.
/// Returns the mean batch loss terms.
pub fn train_epoch(state: &mut Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<LossTerms> {
    let epoch = state.epoch;
    let epoch_seed = sub_seed(cfg.seed, 1000 + epoch as u64);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let lr = lr_at(epoch, cfg);
    let mut sum = LossTerms::default();
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<TrainingSample> = chunk
            .iter()
            .map(|&i| augment(&data.train[i], &cfg.augment, sub_seed(epoch_seed, i as u64)))
            .collect::<Result<_>>()?;
        let (terms, grads) = batch_gradients(&state.weights, &batch, cfg)?;
        adam_step(&mut state.weights, &grads, &mut state.adam, lr)?;
        // keep parameters exactly representable in the f32 weight file
        for (_, p) in state.weights.iter_mut() {
            round_to_f32(p);
        }
        sum.dice += terms.dice;
        sum.qg += terms.qg;
        sum.total += terms.total;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    state.epoch += 1;
    Ok(LossTerms {
        dice: sum.dice / n,
        qg: sum.qg / n,
        total: sum.total / n,
    })
}

/// Full training run writing checkpoint, best weights and log under `paths`.
///
/// With `resume`, continues from an existing checkpoint and appends to its
/// log. Validation uses the unaugmented validation split, or the training
/// split when the validation split is empty.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    paths: &RunPaths,
    resume: bool,
) -> Result<(WeightStore, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let (mut state, mut log) = if resume {
        let ck = Checkpoint::load(&paths.checkpoint)?;
        cfg.net
            .validate()
            .and_then(|_| ck.weights.validate(&cfg.net.layout()))
            .map_err(|e| Error::format(&paths.checkpoint, e.to_string()))?;
        let log = if paths.log.exists() {
            read_log(&paths.log)?
                .into_iter()
                .filter(|r| r.epoch < ck.epoch)
                .collect()
        } else {
            Vec::new()
        };
        (ck, log)
    } else {
        (initial_checkpoint(cfg), Vec::new())
    };
    let val = if data.val.is_empty() {
        &data.train
    } else {
        &data.val
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let terms = train_epoch(&mut state, data, cfg)?;
        let (val_dice, val_qg) = evaluate(&state.weights, val, cfg)?;
        if !(val_dice.is_finite() && val_qg.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite validation metrics at epoch {epoch}"
            )));
        }
        log.push(EpochLog {
            epoch,
            lr: lr_at(epoch, cfg),
            train_dice: 1.0 - terms.dice,
            train_qg: terms.qg,
            val_dice,
            val_qg,
        });
        if val_dice > state.best_val {
            state.best_val = val_dice;
            state.weights.save(&paths.best)?;
        }
        state.save(&paths.checkpoint)?;
        write_log(&log, &paths.log)?;
    }
    let best = if paths.best.exists() {
        WeightStore::load(&paths.best)?
    } else {
        state.weights.clone()
    };
    Ok((best, log))
}
