use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use image::{imageops, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{BackboneConfig, BackboneSource, FeatureFlags, ModelConfig, PTM_GRID};
use super::kernels::{conv3x3, maxpool2};
use crate::datamodel::{MeasureKind, PositionId, NUM_POSITIONS};
use crate::error::{Error, Result};
use crate::nn::{self, layer_norm, linear, ParamStore};
use crate::spectral::{bandpass_mask, extract_texture_rgb, Fft2d, FreqMask};

const LN_EPS: f64 = 1e-6;
const CHECKPOINT_FORMAT: &str = "skinmap-pavit";
const CHECKPOINT_VERSION: u32 = 1;

/// Frozen transformer backbone. Weights are plain tensors, never variables,
/// so no optimizer can reach them.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl Backbone {
    fn shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
        let d = cfg.dim;
        let p = 3 * cfg.patch_size * cfg.patch_size;
        let m = cfg.mlp_ratio * d;
        let std = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
        let mut v = vec![
            ("patch_embed.w".to_string(), vec![p, d], std(p)),
            ("patch_embed.b".to_string(), vec![d], Init::Zero),
            ("cls".to_string(), vec![1, 1, d], Init::Normal(0.02)),
            ("pos".to_string(), vec![1, 1 + cfg.num_patches(), d], Init::Normal(0.02)),
        ];
        for l in 0..cfg.depth {
            let n = |s: &str| format!("blocks.{l}.{s}");
            v.extend([
                (n("ln1.g"), vec![d], Init::One),
                (n("ln1.b"), vec![d], Init::Zero),
                (n("qkv.w"), vec![d, 3 * d], std(d)),
                (n("qkv.b"), vec![3 * d], Init::Zero),
                (n("proj.w"), vec![d, d], std(d)),
                (n("proj.b"), vec![d], Init::Zero),
                (n("ln2.g"), vec![d], Init::One),
                (n("ln2.b"), vec![d], Init::Zero),
                (n("fc1.w"), vec![d, m], std(d)),
                (n("fc1.b"), vec![m], Init::Zero),
                (n("fc2.w"), vec![m, d], std(m)),
                (n("fc2.b"), vec![d], Init::Zero),
            ]);
        }
        v.push(("norm.g".to_string(), vec![d], Init::One));
        v.push(("norm.b".to_string(), vec![d], Init::Zero));
        v
    }

    pub fn build(cfg: &BackboneConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::shapes(cfg);
        let mut tensors = BTreeMap::new();
        match BackboneSource::parse(&cfg.source)? {
            BackboneSource::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for (name, shape, init) in shapes {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = match init {
                        Init::Zero => vec![0.0; n],
                        Init::One => vec![1.0; n],
                        Init::Normal(s) => {
                            let dist = Normal::new(0.0, s).expect("finite std");
                            (0..n).map(|_| dist.sample(&mut rng)).collect()
                        }
                    };
                    let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?;
                    tensors.insert(name, t);
                }
            }
            BackboneSource::Safetensors(path) => {
                let (loaded, _) = nn::load_container(Path::new(&path))?;
                for (name, shape, _) in shapes {
                    let t = loaded
                        .get(&name)
                        .ok_or_else(|| Error::parse(&path, format!("missing backbone tensor {name}")))?;
                    if t.dims() != shape.as_slice() {
                        return Err(Error::parse(&path, format!("{name}: shape {:?} != {shape:?}", t.dims())));
                    }
                    tensors.insert(name, t.to_dtype(dtype)?);
                }
            }
        }
        Ok(Self { cfg: cfg.clone(), tensors })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn t(&self, name: &str) -> &Tensor {
        self.tensors.get(name).expect("backbone tensor registered at build")
    }

    /// SHA-256 over every weight's name and little-endian bytes.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| h.update(v.to_le_bytes())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| h.update(v.to_le_bytes())),
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Class token plus patch tokens with position embeddings: `[B, 1 + N, D]`.
    pub fn embed(&self, rgb: &Tensor) -> Result<Tensor> {
        let (b, c, s, _) = rgb.dims4()?;
        let p = self.cfg.patch_size;
        let g = s / p;
        let patches = rgb
            .contiguous()?
            .reshape((b, c, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, c * p * p))?;
        let tokens = linear(&patches, self.t("patch_embed.w"), Some(self.t("patch_embed.b")))?;
        let cls = self.t("cls").broadcast_as((b, 1, self.cfg.dim))?;
        Ok(Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(self.t("pos"))?)
    }

    fn attention(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let h = self.cfg.heads;
        let dh = d / h;
        let n = |k: &str| format!("blocks.{l}.{k}");
        let qkv = linear(x, self.t(&n("qkv.w")), Some(self.t(&n("qkv.b"))))?
            .reshape((b, s, 3, h, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, s, d))?;
        linear(&o, self.t(&n("proj.w")), Some(self.t(&n("proj.b"))))
    }

    /// One pre-norm transformer block.
    pub fn block(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let n = |k: &str| format!("blocks.{l}.{k}");
        let h = layer_norm(x, self.t(&n("ln1.g")), self.t(&n("ln1.b")), LN_EPS)?;
        let x = (x + self.attention(l, &h)?)?;
        let h = layer_norm(&x, self.t(&n("ln2.g")), self.t(&n("ln2.b")), LN_EPS)?;
        let h = linear(&h, self.t(&n("fc1.w")), Some(self.t(&n("fc1.b"))))?.gelu_erf()?;
        let h = linear(&h, self.t(&n("fc2.w")), Some(self.t(&n("fc2.b"))))?;
        Ok((x + h)?)
    }

    pub fn final_norm(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.t("norm.g"), self.t("norm.b"), LN_EPS)
    }

    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    One,
    Normal(f64),
}

/// Resizes a patch to the backbone input side (bicubic).
pub fn resize_patch(img: &RgbImage, side: u32) -> RgbImage {
    if img.width() == side && img.height() == side {
        return img.clone();
    }
    imageops::resize(img, side, side, imageops::FilterType::CatmullRom)
}

/// Turns a resized patch into the 6-channel input: normalized RGB followed
/// by the band-pass texture of each channel (or zeros when disabled).
#[derive(Clone, Debug)]
pub struct InputEncoder {
    side: usize,
    mask: FreqMask,
    fft: Fft2d,
    gain: f64,
    use_freq: bool,
}

impl InputEncoder {
    pub fn new(cfg: &ModelConfig, use_freq: bool) -> Result<Self> {
        let side = cfg.backbone.image_side;
        Ok(Self {
            side,
            mask: bandpass_mask(cfg.rho_l, cfg.rho_h, side, side)?,
            fft: Fft2d::new(side, side),
            gain: cfg.texture_gain,
            use_freq,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn mask(&self) -> &FreqMask {
        &self.mask
    }

    /// `6 * side * side` values in channel-major order.
    pub fn encode(&self, img: &RgbImage) -> Result<Vec<f32>> {
        let s = self.side;
        if img.width() as usize != s || img.height() as usize != s {
            return Err(Error::Shape {
                expected: format!("{s}x{s} patch (resize first)"),
                actual: format!("{}x{}", img.width(), img.height()),
            });
        }
        let mut out = vec![0f32; 6 * s * s];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                out[c * s * s + i] = ((px[c] as f64 / 255.0 - 0.5) / 0.5) as f32;
            }
        }
        if self.use_freq {
            let tex = extract_texture_rgb(img, &self.mask, &self.fft)?;
            for (c, g) in tex.iter().enumerate() {
                for (o, v) in out[(3 + c) * s * s..(4 + c) * s * s].iter_mut().zip(&g.data) {
                    *o = (v * self.gain) as f32;
                }
            }
        }
        Ok(out)
    }
}

pub struct ForwardOutput {
    /// `[B]` predictions in [0, 1].
    pub y_hat: Tensor,
    /// `[B, D]` latent features (final class token after the last norm).
    pub z: Tensor,
    /// Sequence length seen by each transformer layer.
    pub seq_lens: Vec<usize>,
    /// Prompt tokens prepended at each layer.
    pub prompt_counts: Vec<usize>,
}

/// Frozen backbone plus the trainable texture encoder, texture adapters,
/// position adapters and regression head.
#[derive(Clone, Debug)]
pub struct SkinPavit {
    cfg: ModelConfig,
    flags: FeatureFlags,
    backbone: Backbone,
    params: ParamStore,
    encoder: InputEncoder,
}

impl SkinPavit {
    pub fn new(cfg: &ModelConfig, flags: FeatureFlags) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let backbone = Backbone::build(&cfg.backbone, dtype)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut p = ParamStore::new(dtype);
        let mut c_in = cfg.ptm.in_channels;
        for (i, &c) in cfg.ptm.channels.iter().enumerate() {
            p.normal(&format!("ptm.{i}.w"), &[c, c_in, 3, 3], (2.0 / (9 * c_in) as f64).sqrt(), &mut rng)?;
            p.constant(&format!("ptm.{i}.b"), &[c], 0.0)?;
            c_in = c;
        }
        let (dp, d) = (cfg.ptm.out_channels(), cfg.backbone.dim);
        for l in 0..cfg.backbone.depth {
            p.normal(&format!("ta.{l}.w"), &[dp, d], 1.0 / (dp as f64).sqrt(), &mut rng)?;
            if flags.use_position_adapters {
                p.normal(&format!("pa.{l}.w"), &[NUM_POSITIONS, d], 1.0, &mut rng)?;
                p.constant(&format!("pa.{l}.b"), &[d], 0.0)?;
            }
        }
        p.normal("head.w", &[d, 1], 0.01, &mut rng)?;
        p.constant("head.b", &[1], 0.0)?;
        Ok(Self {
            encoder: InputEncoder::new(cfg, flags.use_freq_input)?,
            cfg: cfg.clone(),
            flags,
            backbone,
            params: p,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn flags(&self) -> FeatureFlags {
        self.flags
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &InputEncoder {
        &self.encoder
    }

    pub fn dtype(&self) -> DType {
        self.cfg.precision.dtype()
    }

    pub fn prompts_per_layer(&self) -> usize {
        PTM_GRID * PTM_GRID + usize::from(self.flags.use_position_adapters)
    }

    fn w(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::invalid(format!("model has no parameter {name}")))
    }

    /// Stacks encoded inputs into a `[B, 6, S, S]` tensor of the model dtype.
    pub fn batch_tensor(&self, inputs: &[&[f32]]) -> Result<Tensor> {
        let s = self.encoder.side;
        let mut flat = Vec::with_capacity(inputs.len() * 6 * s * s);
        for x in inputs {
            if x.len() != 6 * s * s {
                return Err(Error::Shape {
                    expected: format!("{} values", 6 * s * s),
                    actual: x.len().to_string(),
                });
            }
            flat.extend_from_slice(x);
        }
        Ok(Tensor::from_vec(flat, (inputs.len(), 6, s, s), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Texture encoder: `[B, 6, S, S]` to `[B, 49, D']`.
    pub fn ptm_forward(&self, x6: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x6.dims4()?;
        let side = self.cfg.backbone.image_side;
        if c != self.cfg.ptm.in_channels || h != side || w != side {
            return Err(Error::Shape {
                expected: format!("[B, {}, {side}, {side}]", self.cfg.ptm.in_channels),
                actual: format!("{:?}", x6.dims()),
            });
        }
        let (_, pool) = self.cfg.ptm.trace(side)?;
        let mut x = x6.clone();
        for i in 0..self.cfg.ptm.channels.len() {
            let wt = self.w(&format!("ptm.{i}.w"))?;
            let bias = self.w(&format!("ptm.{i}.b"))?.reshape((1, (), 1, 1))?;
            x = conv3x3(&x, wt, i > 0)?.broadcast_add(&bias)?.relu()?;
            x = maxpool2(&x)?;
        }
        if pool > 1 {
            x = x.avg_pool2d(pool)?;
        }
        let dp = self.cfg.ptm.out_channels();
        Ok(x.reshape((b, dp, PTM_GRID * PTM_GRID))?.transpose(1, 2)?.contiguous()?)
    }

    /// `[B, 49, D']` features to `[B, 49, D]` prompt tokens for layer `l`.
    pub fn texture_adapter_forward(&self, feat: &Tensor, l: usize) -> Result<Tensor> {
        linear(feat, self.w(&format!("ta.{l}.w"))?, None)
    }

    fn one_hot(&self, positions: &[PositionId]) -> Result<Tensor> {
        let mut v = vec![0f32; positions.len() * NUM_POSITIONS];
        for (i, d) in positions.iter().enumerate() {
            v[i * NUM_POSITIONS + d.index()] = 1.0;
        }
        Ok(Tensor::from_vec(v, (positions.len(), NUM_POSITIONS), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// `[B, D]` position tokens for layer `l`.
    pub fn position_adapter_forward(&self, positions: &[PositionId], l: usize) -> Result<Tensor> {
        if !self.flags.use_position_adapters {
            return Err(Error::invalid("position adapters are disabled"));
        }
        linear(
            &self.one_hot(positions)?,
            self.w(&format!("pa.{l}.w"))?,
            Some(self.w(&format!("pa.{l}.b"))?),
        )
    }

    pub fn forward(&self, x6: &Tensor, positions: &[PositionId]) -> Result<ForwardOutput> {
        let b = x6.dim(0)?;
        if positions.len() != b {
            return Err(Error::Shape {
                expected: format!("{b} position ids"),
                actual: positions.len().to_string(),
            });
        }
        let feat = self.ptm_forward(x6)?;
        let rgb = x6.narrow(1, 0, 3)?;
        let mut x = self.backbone.embed(&rgb)?;
        let base = x.dim(1)? - 1;
        let mut seq_lens = Vec::new();
        let mut prompt_counts = Vec::new();
        for l in 0..self.cfg.backbone.depth {
            let mut prompts = self.texture_adapter_forward(&feat, l)?;
            if self.flags.use_position_adapters {
                let pa = self.position_adapter_forward(positions, l)?.unsqueeze(1)?;
                prompts = Tensor::cat(&[&prompts, &pa], 1)?;
            }
            let np = prompts.dim(1)?;
            let seq = Tensor::cat(&[&x.narrow(1, 0, 1)?, &prompts, &x.narrow(1, 1, base)?], 1)?;
            seq_lens.push(seq.dim(1)?);
            prompt_counts.push(np);
            let y = self.backbone.block(l, &seq)?;
            x = Tensor::cat(&[&y.narrow(1, 0, 1)?, &y.narrow(1, 1 + np, base)?], 1)?;
        }
        let z = self.backbone.final_norm(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        let y_hat = candle_nn::ops::sigmoid(&linear(&z, self.w("head.w")?, Some(self.w("head.b")?))?)?.squeeze(1)?;
        Ok(ForwardOutput {
            y_hat,
            z,
            seq_lens,
            prompt_counts,
        })
    }

    /// Encodes raw patches (any side; resized here) for inference.
    pub fn encode_patch(&self, img: &RgbImage) -> Result<Vec<f32>> {
        self.encoder.encode(&resize_patch(img, self.encoder.side as u32))
    }

    /// Scaled predictions in [0, 1], evaluated in chunks.
    pub fn predict_scaled(&self, patches: &[(&RgbImage, PositionId)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(16) {
            let enc: Vec<Vec<f32>> = chunk.iter().map(|(img, _)| self.encode_patch(img)).collect::<Result<_>>()?;
            let refs: Vec<&[f32]> = enc.iter().map(Vec::as_slice).collect();
            let pos: Vec<PositionId> = chunk.iter().map(|(_, d)| *d).collect();
            let y = self.forward(&self.batch_tensor(&refs)?, &pos)?.y_hat;
            out.extend(y.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    pub fn latents(&self, patches: &[(&RgbImage, PositionId)]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(16) {
            let enc: Vec<Vec<f32>> = chunk.iter().map(|(img, _)| self.encode_patch(img)).collect::<Result<_>>()?;
            let refs: Vec<&[f32]> = enc.iter().map(Vec::as_slice).collect();
            let pos: Vec<PositionId> = chunk.iter().map(|(_, d)| *d).collect();
            let z = self.forward(&self.batch_tensor(&refs)?, &pos)?.z;
            out.extend(z.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// Label scaling to and from [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelScale {
    pub lo: f64,
    pub hi: f64,
}

impl LabelScale {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("empty label range ({lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }

    pub fn for_kind(kind: MeasureKind) -> Self {
        let (lo, hi) = kind.default_range();
        Self { lo, hi }
    }

    /// Affine map to [0, 1]; out-of-range values are clamped with a warning.
    pub fn scale(&self, y: f64) -> f64 {
        let s = (y - self.lo) / (self.hi - self.lo);
        if !(0.0..=1.0).contains(&s) {
            log::warn!("label {y} outside [{}, {}], clamped", self.lo, self.hi);
        }
        s.clamp(0.0, 1.0)
    }

    pub fn unscale(&self, s: f64) -> f64 {
        self.lo + s * (self.hi - self.lo)
    }
}

pub fn scale_label(y: f64, kind: MeasureKind) -> f64 {
    LabelScale::for_kind(kind).scale(y)
}

pub fn unscale_label(s: f64, kind: MeasureKind) -> f64 {
    LabelScale::for_kind(kind).unscale(s)
}

/// Everything needed to reproduce predictions from a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SkinPavit,
    pub kind: MeasureKind,
    pub scale: LabelScale,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        self.model.params.export("", &mut tensors);
        let meta = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("version".to_string(), CHECKPOINT_VERSION.to_string()),
            ("model".to_string(), to_json(&self.model.cfg)?),
            ("flags".to_string(), to_json(&self.model.flags)?),
            ("kind".to_string(), self.kind.name().to_string()),
            ("label_range".to_string(), to_json(&self.scale)?),
            ("backbone_source".to_string(), self.model.cfg.backbone.source.clone()),
            ("backbone_hash".to_string(), self.model.backbone.content_hash()?),
        ]);
        nn::save_container(path, tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = nn::load_container(path)?;
        nn::expect_format(&meta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::parse(path.display().to_string(), format!("missing metadata {k}")))
        };
        let parse_err = |e: serde_json::Error| Error::parse(path.display().to_string(), e);
        let cfg: ModelConfig = serde_json::from_str(get("model")?).map_err(parse_err)?;
        let flags: FeatureFlags = serde_json::from_str(get("flags")?).map_err(parse_err)?;
        let scale: LabelScale = serde_json::from_str(get("label_range")?).map_err(parse_err)?;
        let kind: MeasureKind = get("kind")?.parse()?;
        let model = SkinPavit::new(&cfg, flags)?;
        let hash = model.backbone.content_hash()?;
        if &hash != get("backbone_hash")? {
            return Err(Error::parse(
                path.display().to_string(),
                "backbone weights differ from the ones used in training",
            ));
        }
        model.params.load(&tensors, "")?;
        Ok(Self { model, kind, scale })
    }

    pub fn predict(&self, patches: &[(&RgbImage, PositionId)]) -> Result<Vec<f64>> {
        Ok(self
            .model
            .predict_scaled(patches)?
            .into_iter()
            .map(|s| self.scale.unscale(s))
            .collect())
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::parse("checkpoint metadata", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_flags(pa: bool) -> FeatureFlags {
        FeatureFlags {
            use_position_adapters: pa,
            ..FeatureFlags::config('E').unwrap()
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig::tiny()
    }

    #[test]
    fn label_scale_contract() {
        assert_eq!(scale_label(15.0, MeasureKind::Tewl), 0.5);
        assert_eq!(scale_label(0.0, MeasureKind::Sh), 0.0);
        assert_eq!(scale_label(31.0, MeasureKind::Tewl), 1.0);
        for y in [0.0, 3.3, 29.9] {
            assert!((unscale_label(scale_label(y, MeasureKind::Tewl), MeasureKind::Tewl) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_rejects_unresized_patch() {
        let enc = InputEncoder::new(&tiny(), true).unwrap();
        assert!(matches!(enc.encode(&RgbImage::new(140, 140)), Err(Error::Shape { .. })));
    }

    #[test]
    fn freq_off_zeroes_texture_channels() {
        let enc = InputEncoder::new(&tiny(), false).unwrap();
        let img = RgbImage::from_fn(224, 224, |x, y| image::Rgb([(x * 7 % 255) as u8, (y % 200) as u8, 9]));
        let v = enc.encode(&img).unwrap();
        assert_eq!(v.len(), 6 * 224 * 224);
        assert!(v[3 * 224 * 224..].iter().all(|&x| x == 0.0));
        assert!(v[..224 * 224].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn forward_shapes_and_codomain() {
        let m = SkinPavit::new(&tiny(), toy_flags(true)).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (2, 6, 224, 224), &Device::Cpu).unwrap();
        let ids = [PositionId::new(1).unwrap(), PositionId::new(20).unwrap()];
        let out = m.forward(&x, &ids).unwrap();
        assert_eq!(out.z.dims(), &[2, 16]);
        let y = out.y_hat.to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.prompt_counts, vec![50, 50]);
        assert_eq!(out.seq_lens, vec![1 + 49 + 50; 2]);
        let m = SkinPavit::new(&tiny(), toy_flags(false)).unwrap();
        let out = m.forward(&x, &ids).unwrap();
        assert_eq!(out.prompt_counts, vec![49, 49]);
    }

    #[test]
    fn ptm_rejects_wrong_channels() {
        let m = SkinPavit::new(&tiny(), toy_flags(true)).unwrap();
        let x = Tensor::zeros((1, 3, 224, 224), DType::F64, &Device::Cpu).unwrap();
        assert!(m.ptm_forward(&x).is_err());
        let x = Tensor::zeros((1, 6, 224, 224), DType::F64, &Device::Cpu).unwrap();
        let f = m.ptm_forward(&x).unwrap();
        assert_eq!(f.dims(), &[1, 49, 8]);
        assert!(f.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn position_token_is_weight_row_plus_bias() {
        let m = SkinPavit::new(&tiny(), toy_flags(true)).unwrap();
        let d = PositionId::new(5).unwrap();
        let tok = m.position_adapter_forward(&[d], 1).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        let w = m.params.get("pa.1.w").unwrap().as_tensor().get(4).unwrap().to_vec1::<f64>().unwrap();
        let b = m.params.get("pa.1.b").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for i in 0..tok.len() {
            assert!((tok[i] - w[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = SkinPavit::new(&tiny(), toy_flags(true)).unwrap();
        let ck = Checkpoint {
            model: m,
            kind: MeasureKind::Sh,
            scale: LabelScale::for_kind(MeasureKind::Sh),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.kind, MeasureKind::Sh);
        assert_eq!(back.model.params.content_hash().unwrap(), ck.model.params.content_hash().unwrap());
        let img = RgbImage::from_fn(140, 140, |x, y| image::Rgb([(x + y) as u8, 100, 50]));
        let id = PositionId::new(3).unwrap();
        assert_eq!(ck.predict(&[(&img, id)]).unwrap(), back.predict(&[(&img, id)]).unwrap());
    }
}
