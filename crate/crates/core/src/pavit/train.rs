use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::loss::total_loss;
use super::model::{resize_patch, Checkpoint, InputEncoder, LabelScale, SkinPavit};
use crate::augment::{random_geometric, random_lighting};
use crate::datamodel::{build_symmetry_table, PositionId, SkinPatch};
use crate::error::{Error, Result};
use crate::evalmetrics::{mae, r2};
use crate::nn::cosine_lr;

/// Patches with their encoded 6-channel inputs (texture always computed;
/// dropped at batch time when the frequency input is disabled).
pub struct PatchSet {
    patches: Vec<SkinPatch>,
    encoded: Vec<Vec<f32>>,
    key: (usize, u64, u64, u64),
}

fn encoder_key(cfg: &ModelConfig) -> (usize, u64, u64, u64) {
    (
        cfg.backbone.image_side,
        cfg.rho_l.to_bits(),
        cfg.rho_h.to_bits(),
        cfg.texture_gain.to_bits(),
    )
}

impl PatchSet {
    pub fn new(patches: Vec<SkinPatch>, cfg: &ModelConfig) -> Result<Self> {
        let enc = InputEncoder::new(cfg, true)?;
        let side = enc.side() as u32;
        let encoded = patches
            .iter()
            .map(|p| enc.encode(&resize_patch(&p.pixels, side)))
            .collect::<Result<_>>()?;
        Ok(Self {
            patches,
            encoded,
            key: encoder_key(cfg),
        })
    }

    pub fn patches(&self) -> &[SkinPatch] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.key != encoder_key(cfg) {
            return Err(Error::Config("patch set was encoded for a different input configuration".into()));
        }
        Ok(())
    }
}

/// Copies an encoding, zeroing the texture channels when `use_freq` is off.
fn input_for(encoded: &[f32], use_freq: bool) -> Vec<f32> {
    let mut v = encoded.to_vec();
    if !use_freq {
        let half = v.len() / 2;
        v[half..].iter_mut().for_each(|x| *x = 0.0);
    }
    v
}

/// Symmetric partners within the same image (panelist, lighting, angle),
/// as `(pairs, unpaired)` index lists. Pairs are ordered lower id first.
pub fn pair_indices(patches: &[SkinPatch]) -> (Vec<(usize, usize)>, Vec<usize>) {
    let table = build_symmetry_table();
    let key = |p: &SkinPatch| (p.panelist_id.clone(), p.lighting, p.angle, p.modality);
    let mut index: HashMap<_, usize> = HashMap::new();
    for (i, p) in patches.iter().enumerate() {
        index.insert((key(p), p.position), i);
    }
    let (mut pairs, mut singles) = (Vec::new(), Vec::new());
    for (i, p) in patches.iter().enumerate() {
        match table.partner(p.position).and_then(|q| index.get(&(key(p), q)).map(|&j| (q, j))) {
            Some((q, j)) if p.position < q => pairs.push((i, j)),
            Some(_) => {}
            None => singles.push(i),
        }
    }
    (pairs, singles)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub partners: Vec<Option<usize>>,
    /// False for batches of unpaired (midline) patches: MSE only.
    pub paired: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_r2: Option<f64>,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochLog>,
}

impl History {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn final_val_r2(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.val_r2)
    }
}

/// Single-writer training state: model, optimizer and the sampling plan.
pub struct Trainer<'a> {
    model: SkinPavit,
    opt: AdamW,
    cfg: TrainConfig,
    scale: LabelScale,
    data: &'a PatchSet,
    pairs: Vec<(usize, usize)>,
    singles: Vec<usize>,
    rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model_cfg: &ModelConfig, data: &'a PatchSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        data.check(model_cfg)?;
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if let Some(p) = data.patches.iter().find(|p| p.label.kind != cfg.kind) {
            return Err(Error::invalid(format!("patch labeled {} in a {} run", p.label.kind, cfg.kind)));
        }
        let model = SkinPavit::new(model_cfg, cfg.flags)?;
        let opt = AdamW::new(
            model.params().vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let (lo, hi) = cfg.label_range();
        let (pairs, singles) = pair_indices(&data.patches);
        Ok(Self {
            model,
            opt,
            scale: LabelScale::new(lo, hi)?,
            cfg: cfg.clone(),
            data,
            pairs,
            singles,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            aug_rng: {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.augment_seed.unwrap_or(cfg.seed));
                r.set_stream(1);
                r
            },
        })
    }

    pub fn model(&self) -> &SkinPavit {
        &self.model
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// One epoch's batches: `batch / 2` symmetric pairs each, plus MSE-only
    /// batches of unpaired patches, in shuffled order.
    pub fn epoch_batches(&mut self) -> Vec<Batch> {
        let mut pairs = self.pairs.clone();
        pairs.shuffle(&mut self.rng);
        let mut singles = self.singles.clone();
        singles.shuffle(&mut self.rng);
        let mut batches = Vec::new();
        for chunk in pairs.chunks(self.cfg.batch / 2) {
            let mut indices = Vec::with_capacity(chunk.len() * 2);
            let mut partners = Vec::with_capacity(chunk.len() * 2);
            for (k, &(i, j)) in chunk.iter().enumerate() {
                indices.extend([i, j]);
                partners.extend([Some(2 * k + 1), Some(2 * k)]);
            }
            batches.push(Batch {
                indices,
                partners,
                paired: true,
            });
        }
        for chunk in singles.chunks(self.cfg.batch) {
            batches.push(Batch {
                indices: chunk.to_vec(),
                partners: vec![None; chunk.len()],
                paired: false,
            });
        }
        batches.shuffle(&mut self.rng);
        batches
    }

    fn inputs(&mut self, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        let flags = self.cfg.flags;
        if !(flags.use_augmentation || flags.use_lighting_augmentation) {
            return Ok(batch
                .indices
                .iter()
                .map(|&i| input_for(&self.data.encoded[i], flags.use_freq_input))
                .collect());
        }
        let side = self.model.encoder().side() as u32;
        batch
            .indices
            .iter()
            .map(|&i| {
                let mut img = self.data.patches[i].pixels.clone();
                if flags.use_lighting_augmentation && self.aug_rng.random_bool(0.5) {
                    img = random_lighting(&img, &mut self.aug_rng).0;
                }
                if flags.use_augmentation {
                    img = random_geometric(&img, &mut self.aug_rng).0;
                }
                let enc = self.model.encoder().encode(&resize_patch(&img, side))?;
                Ok(input_for(&enc, flags.use_freq_input))
            })
            .collect()
    }

    /// Forward, loss and one optimizer update; returns the batch loss.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let inputs = self.inputs(batch)?;
        let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
        let x = self.model.batch_tensor(&refs)?;
        let pos: Vec<PositionId> = batch.indices.iter().map(|&i| self.data.patches[i].position).collect();
        let y: Vec<f64> = batch
            .indices
            .iter()
            .map(|&i| self.scale.scale(self.data.patches[i].label.value))
            .collect();
        let y = Tensor::from_vec(y, batch.indices.len(), &Device::Cpu)?.to_dtype(self.model.dtype())?;
        let out = self.model.forward(&x, &pos)?;
        let use_sym = self.cfg.flags.use_symmetric_loss && batch.paired && batch.indices.len() >= 2;
        let loss = total_loss(&out.y_hat, &y, &out.z, &batch.partners, self.cfg.tau, use_sym, self.cfg.loss_weights)?;
        self.opt.backward_step(&loss)?;
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    /// Runs one epoch at the cosine-annealed rate; returns (lr, mean loss).
    pub fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        let lr = cosine_lr(self.cfg.lr, epoch, self.cfg.epochs);
        self.opt.set_learning_rate(lr);
        let batches = self.epoch_batches();
        let (mut total, mut n) = (0.0, 0usize);
        for b in &batches {
            total += self.step(b)? * b.indices.len() as f64;
            n += b.indices.len();
        }
        Ok((lr, total / n.max(1) as f64))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            kind: self.cfg.kind,
            scale: self.scale,
        }
    }
}

/// Predictions in measurement units for every patch of a prepared set.
pub fn predict_set(ck: &Checkpoint, set: &PatchSet) -> Result<Vec<f64>> {
    set.check(ck.model.config())?;
    let use_freq = ck.model.flags().use_freq_input;
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(16) {
        let inputs: Vec<Vec<f32>> = chunk.iter().map(|&i| input_for(&set.encoded[i], use_freq)).collect();
        let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
        let pos: Vec<PositionId> = chunk.iter().map(|&i| set.patches[i].position).collect();
        let y = ck.model.forward(&ck.model.batch_tensor(&refs)?, &pos)?.y_hat;
        out.extend(y.to_dtype(DType::F64)?.to_vec1::<f64>()?.into_iter().map(|s| ck.scale.unscale(s)));
    }
    Ok(out)
}

/// Final class-token latents for every patch of a prepared set.
pub fn latents_set(model: &SkinPavit, set: &PatchSet) -> Result<Vec<Vec<f64>>> {
    set.check(model.config())?;
    let use_freq = model.flags().use_freq_input;
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(16) {
        let inputs: Vec<Vec<f32>> = chunk.iter().map(|&i| input_for(&set.encoded[i], use_freq)).collect();
        let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
        let pos: Vec<PositionId> = chunk.iter().map(|&i| set.patches[i].position).collect();
        let z = model.forward(&model.batch_tensor(&refs)?, &pos)?.z;
        out.extend(z.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: History,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Full training run with optional per-epoch validation.
pub fn train(
    model_cfg: &ModelConfig,
    data: &PatchSet,
    val: Option<&PatchSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(model_cfg, data, cfg)?;
    let before = trainer.model.backbone().content_hash()?;
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let (lr, loss) = trainer.run_epoch(epoch)?;
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0;
        let (mut val_r2, mut val_mae) = (None, None);
        if let Some(v) = val.filter(|v| !v.is_empty() && (due || last)) {
            let preds = predict_set(&trainer.checkpoint(), v)?;
            let labels: Vec<f64> = v.patches.iter().map(|p| p.label.value).collect();
            val_mae = Some(mae(&preds, &labels)?);
            val_r2 = r2(&preds, &labels).ok();
        }
        log::info!(
            "epoch {}/{}: lr {lr:.2e} loss {loss:.5} val R2 {}",
            epoch + 1,
            cfg.epochs,
            val_r2.map_or("-".to_string(), |r| format!("{r:.4}"))
        );
        history.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss,
            val_r2,
            val_mae,
        });
    }
    let after = trainer.model.backbone().content_hash()?;
    Ok(TrainOutput {
        checkpoint: trainer.checkpoint(),
        history,
        backbone_hash_before: before,
        backbone_hash_after: after,
    })
}
