//! Landmark-to-anchor regression with a PointNet-style point-set encoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AnchorSet, Coord, LandmarkSet, PositionId, NUM_LANDMARKS, NUM_POSITIONS};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};

const FORMAT: &str = "skinmap-anchor-model";
const VERSION: u32 = 1;

/// Similarity normalization of a landmark set: `p' = (p - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTransform {
    pub center: Coord,
    pub scale: f64,
}

impl NormTransform {
    pub fn identity() -> Self {
        Self {
            center: Coord::new(0.0, 0.0),
            scale: 1.0,
        }
    }

    pub fn apply(&self, c: Coord) -> Coord {
        Coord::new(
            (c.row - self.center.row) / self.scale,
            (c.col - self.center.col) / self.scale,
        )
    }

    pub fn invert(&self, c: Coord) -> Coord {
        Coord::new(
            c.row * self.scale + self.center.row,
            c.col * self.scale + self.center.col,
        )
    }
}

/// Moves the centroid to the origin and scales the RMS radius to 1.
pub fn normalize_landmarks(p: &LandmarkSet) -> Result<(LandmarkSet, NormTransform)> {
    let pts = p.points();
    let n = pts.len() as f64;
    let center = Coord::new(
        pts.iter().map(|c| c.row).sum::<f64>() / n,
        pts.iter().map(|c| c.col).sum::<f64>() / n,
    );
    let rms = (pts.iter().map(|c| c.distance(center).powi(2)).sum::<f64>() / n).sqrt();
    let magnitude = center.row.abs().max(center.col.abs()).max(1.0);
    if !(rms > 1e-12 * magnitude) {
        return Err(Error::Degenerate("landmarks have zero spread".into()));
    }
    let t = NormTransform { center, scale: rms };
    Ok((p.map(|c| t.apply(c))?, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorTrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AnchorTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 8,
            epochs: 60,
            batch: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Shared per-point MLP over `[x, y, embedding]`, max pooling, MLP head, plus
/// a linear path from the flattened normalized landmarks.
#[derive(Clone, Debug)]
pub struct AnchorRegressor {
    cfg: AnchorTrainConfig,
    params: ParamStore,
    trained: bool,
}

impl AnchorRegressor {
    pub fn new(cfg: AnchorTrainConfig) -> Result<Self> {
        if cfg.hidden == 0 || cfg.batch == 0 {
            return Err(Error::Config("anchor model needs hidden > 0 and batch > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new(DType::F32);
        let (h, e) = (cfg.hidden, cfg.embed);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        p.normal("embed", &[NUM_LANDMARKS, e], 0.1, &mut rng)?;
        p.normal("enc1.w", &[2 + e, h], he(2 + e), &mut rng)?;
        p.constant("enc1.b", &[h], 0.0)?;
        p.normal("enc2.w", &[h, h], he(h), &mut rng)?;
        p.constant("enc2.b", &[h], 0.0)?;
        p.normal("head1.w", &[h, h], he(h), &mut rng)?;
        p.constant("head1.b", &[h], 0.0)?;
        p.normal("head2.w", &[h, 2 * NUM_POSITIONS], 0.01, &mut rng)?;
        p.constant("head2.b", &[2 * NUM_POSITIONS], 0.0)?;
        p.normal("skip.w", &[2 * NUM_LANDMARKS, 2 * NUM_POSITIONS], 0.01, &mut rng)?;
        Ok(Self {
            cfg,
            params: p,
            trained: false,
        })
    }

    pub fn config(&self) -> &AnchorTrainConfig {
        &self.cfg
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn w(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter registered in new").as_tensor()
    }

    /// `x`: `[B, 68, 2]` normalized landmarks; returns `[B, 74]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let emb = self.w("embed").unsqueeze(0)?.broadcast_as((b, NUM_LANDMARKS, self.cfg.embed))?;
        let feats = Tensor::cat(&[x, &emb], 2)?;
        let h = nn::linear(&feats, self.w("enc1.w"), Some(self.w("enc1.b")))?.relu()?;
        let h = nn::linear(&h, self.w("enc2.w"), Some(self.w("enc2.b")))?.relu()?;
        let g = h.max(1)?;
        let g = nn::linear(&g, self.w("head1.w"), Some(self.w("head1.b")))?.relu()?;
        let out = nn::linear(&g, self.w("head2.w"), Some(self.w("head2.b")))?;
        let skip = x.reshape((b, 2 * NUM_LANDMARKS))?.matmul(self.w("skip.w"))?;
        Ok((out + skip)?)
    }

    fn landmarks_tensor(sets: &[&LandmarkSet]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(sets.len() * NUM_LANDMARKS * 2);
        for s in sets {
            for c in s.points() {
                data.push(c.row as f32);
                data.push(c.col as f32);
            }
        }
        Ok(Tensor::from_vec(data, (sets.len(), NUM_LANDMARKS, 2), &Device::Cpu)?)
    }

    /// Predicts all 37 anchors in the original image frame.
    pub fn predict(&self, p: &LandmarkSet) -> Result<AnchorSet> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let (norm, t) = normalize_landmarks(p)?;
        let out = self.forward(&Self::landmarks_tensor(&[&norm])?)?;
        let v = out.flatten_all()?.to_vec1::<f32>()?;
        let mut set = AnchorSet::new();
        for (i, id) in PositionId::all().enumerate() {
            let c = Coord::new(v[2 * i] as f64, v[2 * i + 1] as f64);
            set.insert(id, t.invert(c))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        self.params.export("", &mut tensors);
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), VERSION.to_string()),
            ("trained".to_string(), self.trained.to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.cfg).map_err(|e| Error::parse("anchor config", e))?,
            ),
        ]);
        nn::save_container(path, tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = nn::load_container(path)?;
        nn::expect_format(&meta, FORMAT, VERSION)?;
        let cfg: AnchorTrainConfig = serde_json::from_str(
            meta.get("config").ok_or_else(|| Error::parse("checkpoint", "missing config"))?,
        )
        .map_err(|e| Error::parse("anchor config", e))?;
        let mut model = Self::new(cfg)?;
        model.params.load(&tensors, "")?;
        model.trained = meta.get("trained").map(String::as_str) == Some("true");
        Ok(model)
    }
}

/// `predict_anchors` free-function form.
pub fn predict_anchors(model: &AnchorRegressor, p: &LandmarkSet) -> Result<AnchorSet> {
    model.predict(p)
}

/// Fits the regressor with masked mean squared error in the normalized frame,
/// Adam and a per-epoch cosine schedule. Returns the model and per-epoch loss.
pub fn train_anchor_model(
    pairs: &[(LandmarkSet, AnchorSet)],
    cfg: &AnchorTrainConfig,
) -> Result<(AnchorRegressor, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::invalid("anchor training needs at least one pair"));
    }
    let mut model = AnchorRegressor::new(cfg.clone())?;
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut masks = Vec::with_capacity(pairs.len());
    for (lm, anchors) in pairs {
        let (norm, t) = normalize_landmarks(lm)?;
        let mut y = vec![0f32; 2 * NUM_POSITIONS];
        let mut m = vec![0f32; 2 * NUM_POSITIONS];
        for (id, c) in anchors.iter() {
            let c = t.apply(c);
            let i = id.index();
            y[2 * i] = c.row as f32;
            y[2 * i + 1] = c.col as f32;
            m[2 * i] = 1.0;
            m[2 * i + 1] = 1.0;
        }
        inputs.push(norm);
        targets.push(y);
        masks.push(m);
    }
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_learning_rate(nn::cosine_lr(cfg.lr, epoch, cfg.epochs));
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch) {
            let x = AnchorRegressor::landmarks_tensor(
                &chunk.iter().map(|&i| &inputs[i]).collect::<Vec<_>>(),
            )?;
            let flat = |src: &[Vec<f32>]| -> Result<Tensor> {
                let v: Vec<f32> = chunk.iter().flat_map(|&i| src[i].iter().copied()).collect();
                Ok(Tensor::from_vec(v, (chunk.len(), 2 * NUM_POSITIONS), &Device::Cpu)?)
            };
            let (y, m) = (flat(&targets)?, flat(&masks)?);
            let pred = model.forward(&x)?;
            let count = m.sum_all()?.to_scalar::<f32>()?.max(1.0) as f64;
            let loss = ((pred - y)?.sqr()? * &m)?.sum_all()?.affine(1.0 / count, 0.0)?;
            opt.backward_step(&loss)?;
            total += loss.to_scalar::<f32>()? as f64;
            batches += 1;
        }
        history.push(total / batches as f64);
        log::debug!("anchor epoch {epoch}: loss {:.6}", total / batches as f64);
    }
    model.trained = true;
    Ok((model, history))
}

/// Mean error rate of predictions against reference anchors at one radius.
pub fn mean_error_rate(
    model: &AnchorRegressor,
    pairs: &[(LandmarkSet, AnchorSet)],
    radius: f64,
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (lm, truth) in pairs {
        let pred = model.predict(lm)?;
        for (id, c) in truth.iter() {
            let p = pred.get(id).expect("all anchors predicted");
            sum += super::anchor_error_rate(c, p, radius)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no anchors to score"));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_set(rng: &mut impl Rng) -> LandmarkSet {
        LandmarkSet::new(
            (0..NUM_LANDMARKS)
                .map(|_| Coord::new(rng.random_range(-50.0..400.0), rng.random_range(0.0..300.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalized_set_has_unit_rms_and_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, _) = normalize_landmarks(&random_set(&mut rng)).unwrap();
        let pts = n.points();
        let mr: f64 = pts.iter().map(|c| c.row).sum::<f64>() / 68.0;
        let mc: f64 = pts.iter().map(|c| c.col).sum::<f64>() / 68.0;
        let rms = (pts.iter().map(|c| c.row * c.row + c.col * c.col).sum::<f64>() / 68.0).sqrt();
        assert!(mr.abs() < 1e-12 && mc.abs() < 1e-12);
        assert!((rms - 1.0).abs() < 1e-12);
        let (again, t) = normalize_landmarks(&n).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12 && t.center.row.abs() < 1e-12);
        for (a, b) in again.points().iter().zip(pts) {
            assert!(a.distance(*b) < 1e-12);
        }
    }

    #[test]
    fn scale_invariance_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = random_set(&mut rng);
            let doubled = p.map(|c| Coord::new(2.0 * c.row, 2.0 * c.col)).unwrap();
            let (a, t) = normalize_landmarks(&p).unwrap();
            let (b, _) = normalize_landmarks(&doubled).unwrap();
            for ((x, y), orig) in a.points().iter().zip(b.points()).zip(p.points()) {
                assert!(x.distance(*y) < 1e-12);
                assert!(t.invert(*x).distance(*orig) < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_landmarks_rejected() {
        let p = LandmarkSet::new(vec![Coord::new(5.0, 5.0); NUM_LANDMARKS]).unwrap();
        assert!(matches!(normalize_landmarks(&p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn untrained_model_refuses_prediction() {
        let m = AnchorRegressor::new(AnchorTrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(m.predict(&random_set(&mut rng)), Err(Error::Untrained)));
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(train_anchor_model(&[], &AnchorTrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_set(&mut rng);
        let anchors = AnchorSet::from_entries(
            PositionId::all().map(|id| (id, Coord::new(id.get() as f64, 3.0))),
        )
        .unwrap();
        let cfg = AnchorTrainConfig {
            epochs: 2,
            hidden: 8,
            ..Default::default()
        };
        let (m, hist) = train_anchor_model(&[(p.clone(), anchors)], &cfg).unwrap();
        assert_eq!(hist.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        m.save(&path).unwrap();
        let back = AnchorRegressor::load(&path).unwrap();
        assert!(back.is_trained());
        assert_eq!(back.config(), m.config());
        let (a, b) = (m.predict(&p).unwrap(), back.predict(&p).unwrap());
        for (id, c) in a.iter() {
            assert_eq!(c, b.get(id).unwrap());
        }
    }
}
