//! Synthetic stand-in data: procedural skin-texture patches whose labels are a
//! known monotone function of the injected texture amplitude, plus templated
//! landmark/anchor geometry.
//!
//! A generated record is a 7x6 mosaic of 140px tiles; tile `d - 1` (row-major)
//! holds position `d` and its anchor sits at the tile center.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{LightingKind, LightingOp};
use crate::datamodel::{
    build_symmetry_table, Angle, AnchorSet, Coord, Dataset, FacialImage, LandmarkSet, Lighting,
    MeasureKind, Measurement, Modality, PositionId, Record, SkinPatch, NUM_LANDMARKS,
    NUM_POSITIONS,
};
use crate::error::{Error, Result};

pub const MOSAIC_COLS: u32 = 7;
pub const MOSAIC_ROWS: u32 = 6;

/// Amplitude resolution of the label histogram segments. Chosen so segment
/// edges land on whole units for both default label maps.
const SEGMENT_UNITS: usize = 10;

/// Target mass of the many/medium/few shot groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Imbalance {
    pub many: f64,
    pub medium: f64,
    pub few: f64,
}

impl Default for Imbalance {
    fn default() -> Self {
        Self {
            many: 0.6,
            medium: 0.3,
            few: 0.1,
        }
    }
}

impl Imbalance {
    pub fn uniform() -> Self {
        Self {
            many: 1.0,
            medium: 0.0,
            few: 0.0,
        }
    }

    fn fractions(&self) -> [f64; 3] {
        [self.many, self.medium, self.few]
    }
}

/// Label values at amplitude 0 and amplitude 1 for each kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMap {
    pub tewl: (f64, f64),
    pub sh: (f64, f64),
}

impl Default for LabelMap {
    fn default() -> Self {
        Self {
            tewl: (5.0, 25.0),
            sh: (85.0, 15.0),
        }
    }
}

impl LabelMap {
    fn endpoints(&self, kind: MeasureKind) -> (f64, f64) {
        match kind {
            MeasureKind::Tewl => self.tewl,
            MeasureKind::Sh => self.sh,
        }
    }

    pub fn value(&self, kind: MeasureKind, a: f64) -> f64 {
        let (y0, y1) = self.endpoints(kind);
        y0 + a * (y1 - y0)
    }

    pub fn amplitude(&self, kind: MeasureKind, y: f64) -> f64 {
        let (y0, y1) = self.endpoints(kind);
        (y - y0) / (y1 - y0)
    }

    fn validate(&self) -> Result<()> {
        for kind in [MeasureKind::Tewl, MeasureKind::Sh] {
            let (y0, y1) = self.endpoints(kind);
            let (lo, hi) = kind.default_range();
            if y0 == y1 || [y0, y1].iter().any(|y| !(lo..=hi).contains(y)) {
                return Err(Error::Config(format!(
                    "{kind} label map ({y0}, {y1}) must be non-constant within [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Pose and noise parameters of the synthetic landmark geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
    pub center: (f64, f64),
    /// Uniform per-coordinate jitter bound in pixels.
    pub jitter: f64,
    pub sticker_radius: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale_range: (0.8, 1.25),
            max_translation: 40.0,
            center: (420.0, 490.0),
            jitter: 1.5,
            sticker_radius: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_panelists: usize,
    pub lightings: Vec<Lighting>,
    pub angles: Vec<Angle>,
    pub patch_side: u32,
    /// Euclidean frequency band of the texture, cycles per patch.
    pub texture_band: (f64, f64),
    pub texture_components: usize,
    /// Texture RMS in gray levels at amplitude 1.
    pub max_contrast: f64,
    pub noise_sigma: f64,
    pub label_map: LabelMap,
    pub imbalance: Imbalance,
    /// Amplitude jitter between symmetric partners.
    pub pair_jitter: f64,
    pub region_scale: f64,
    pub panelist_sigma: f64,
    pub site_sigma: f64,
    pub geometry: GeometryConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_panelists: 6,
            lightings: vec![Lighting::Natural, Lighting::White, Lighting::Yellow],
            angles: vec![Angle::Front],
            patch_side: 140,
            texture_band: (10.0, 18.0),
            texture_components: 12,
            max_contrast: 14.0,
            noise_sigma: 2.0,
            label_map: LabelMap::default(),
            imbalance: Imbalance::default(),
            pair_jitter: 0.015,
            region_scale: 1.0,
            panelist_sigma: 0.5,
            site_sigma: 0.4,
            geometry: GeometryConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn modality(&self) -> Result<Modality> {
        match self.patch_side {
            140 => Ok(Modality::Selfie),
            340 => Ok(Modality::Visia),
            s => Err(Error::Config(format!("patch_side must be 140 or 340, got {s}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.modality()?;
        let (lo, hi) = self.texture_band;
        if !(lo > 0.0 && lo < hi && hi < self.patch_side as f64 / 2.0) {
            return Err(Error::Config(format!("texture band ({lo}, {hi}) must satisfy 0 < lo < hi < side/2")));
        }
        if self.n_panelists == 0 || self.lightings.is_empty() || self.angles.is_empty() {
            return Err(Error::Config("need at least one panelist, lighting and angle".into()));
        }
        if self.texture_components == 0 {
            return Err(Error::Config("texture_components must be positive".into()));
        }
        let nonneg = [
            self.max_contrast,
            self.noise_sigma,
            self.pair_jitter,
            self.region_scale,
            self.panelist_sigma,
            self.site_sigma,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("contrast, noise and spread parameters must be finite and nonnegative".into()));
        }
        self.label_map.validate()?;
        LabelDensity::solve(&self.imbalance)?;
        let g = &self.geometry;
        if !(g.scale_range.0 > 0.0 && g.scale_range.0 <= g.scale_range.1) || g.sticker_radius <= 0.0 || g.jitter < 0.0 {
            return Err(Error::Config("invalid geometry parameters".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant density on amplitude `[0, 1]`: many, medium and few
/// segments in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDensity {
    pub edges: [f64; 4],
    pub density: [f64; 3],
}

impl LabelDensity {
    /// Picks whole-unit segment widths that keep the medium/few densities
    /// safely inside their shot-group bands relative to the many density.
    pub fn solve(imb: &Imbalance) -> Result<Self> {
        let f = imb.fractions();
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("imbalance fractions {f:?} must be nonnegative and sum to 1")));
        }
        if f[0] <= 0.0 {
            return Err(Error::Config("infeasible imbalance: many-shot mass must be positive".into()));
        }
        let target = [1.0, 0.375, 0.125];
        let mut best: Option<([usize; 3], f64)> = None;
        for n0 in 1..=SEGMENT_UNITS {
            for n1 in 0..=SEGMENT_UNITS - n0 {
                let n = [n0, n1, SEGMENT_UNITS - n0 - n1];
                if (0..3).any(|g| (f[g] > 0.0) != (n[g] > 0)) {
                    continue;
                }
                let d: Vec<f64> = (0..3)
                    .map(|g| if n[g] == 0 { 0.0 } else { f[g] / n[g] as f64 })
                    .collect();
                let (rm, rf) = (d[1] / d[0], d[2] / d[0]);
                let ok_m = n[1] == 0 || (0.3..=0.45).contains(&rm);
                let ok_f = n[2] == 0 || (rf > 0.0 && rf <= 0.2);
                if !(ok_m && ok_f) {
                    continue;
                }
                let mut cost = 0.0;
                if n[1] > 0 {
                    cost += (rm / target[1]).ln().powi(2);
                }
                if n[2] > 0 {
                    cost += (rf / target[2]).ln().powi(2);
                }
                if best.as_ref().map_or(true, |(_, c)| cost < *c) {
                    best = Some((n, cost));
                }
            }
        }
        let (n, _) = best.ok_or_else(|| {
            Error::Config(format!("infeasible imbalance {f:?}: no segment layout keeps the groups separable"))
        })?;
        let unit = 1.0 / SEGMENT_UNITS as f64;
        let mut edges = [0.0; 4];
        let mut density = [0.0; 3];
        for g in 0..3 {
            edges[g + 1] = edges[g] + n[g] as f64 * unit;
            density[g] = if n[g] == 0 { 0.0 } else { f[g] / (n[g] as f64 * unit) };
        }
        edges[3] = 1.0;
        Ok(Self { edges, density })
    }

    /// Inverse CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for g in 0..3 {
            let mass = self.density[g] * (self.edges[g + 1] - self.edges[g]);
            if mass > 0.0 && (u <= acc + mass || g == 2) {
                return (self.edges[g] + (u - acc) / self.density[g]).clamp(self.edges[g], self.edges[g + 1]);
            }
            acc += mass;
        }
        1.0
    }
}

/// `p -> scale * R(theta) p + t` in (row, col) coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: f64,
    pub scale: f64,
    pub translation: Coord,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            translation: Coord::new(0.0, 0.0),
        }
    }

    pub fn apply(&self, p: Coord) -> Coord {
        let (s, c) = self.rotation.sin_cos();
        Coord::new(
            self.scale * (c * p.row - s * p.col) + self.translation.row,
            self.scale * (s * p.row + c * p.col) + self.translation.col,
        )
    }
}

/// Canonical 68-point face (origin at the face center, roughly 200px wide).
pub fn template_landmarks() -> Vec<Coord> {
    use std::f64::consts::PI;
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let t = PI * i as f64 / 16.0;
        p.push(Coord::new(-10.0 + 130.0 * t.sin(), -100.0 * t.cos()));
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        p.push(Coord::new(-60.0 - 10.0 * (PI * t).sin(), -80.0 + 60.0 * t));
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        p.push(Coord::new(-60.0 - 10.0 * (PI * t).sin(), 20.0 + 60.0 * t));
    }
    for row in [-40.0, -25.0, -10.0, 5.0] {
        p.push(Coord::new(row, 0.0));
    }
    for (i, col) in [-20.0, -10.0, 0.0, 10.0, 20.0].into_iter().enumerate() {
        p.push(Coord::new(if i == 2 { 25.0 } else { 20.0 }, col));
    }
    for cx in [-45.0, 45.0] {
        for k in 0..6 {
            let t = PI - PI / 3.0 * k as f64;
            p.push(Coord::new(-35.0 - 5.0 * t.sin(), cx + 15.0 * t.cos()));
        }
    }
    for k in 0..12 {
        let t = PI - 2.0 * PI / 12.0 * k as f64;
        p.push(Coord::new(60.0 - 14.0 * t.sin(), 35.0 * t.cos()));
    }
    for k in 0..8 {
        let t = PI - 2.0 * PI / 8.0 * k as f64;
        p.push(Coord::new(60.0 - 6.0 * t.sin(), 25.0 * t.cos()));
    }
    debug_assert_eq!(p.len(), NUM_LANDMARKS);
    p
}

const LEFT_ANCHORS: [(f64, f64); 17] = [
    (-95.0, -25.0),
    (-95.0, -60.0),
    (-70.0, -90.0),
    (-5.0, -40.0),
    (-5.0, -70.0),
    (-5.0, -95.0),
    (25.0, -35.0),
    (25.0, -65.0),
    (25.0, -92.0),
    (55.0, -45.0),
    (55.0, -75.0),
    (80.0, -25.0),
    (80.0, -55.0),
    (100.0, -35.0),
    (-30.0, -100.0),
    (50.0, -100.0),
    (110.0, -15.0),
];

/// Canonical anchors: 1 between the brows, 2..18 on the left, 19..35 their
/// mirror images, 36/37 on the eyelids.
pub fn template_anchors() -> Vec<Coord> {
    let mut a = vec![Coord::new(-55.0, 0.0)];
    a.extend(LEFT_ANCHORS.iter().map(|&(r, c)| Coord::new(r, c)));
    a.extend(LEFT_ANCHORS.iter().map(|&(r, c)| Coord::new(r, -c)));
    a.push(Coord::new(-42.0, -45.0));
    a.push(Coord::new(-42.0, 45.0));
    debug_assert_eq!(a.len(), NUM_POSITIONS);
    a
}

/// Template geometry under a given pose with uniform per-coordinate jitter.
pub fn gen_landmark_pose<R: Rng + ?Sized>(
    rng: &mut R,
    pose: &Similarity,
    jitter: f64,
) -> Result<(LandmarkSet, AnchorSet)> {
    let mut jit = |c: Coord| {
        if jitter > 0.0 {
            Coord::new(
                c.row + rng.random_range(-jitter..=jitter),
                c.col + rng.random_range(-jitter..=jitter),
            )
        } else {
            c
        }
    };
    let landmarks: Vec<Coord> = template_landmarks().into_iter().map(|p| jit(pose.apply(p))).collect();
    let anchors: Vec<(PositionId, Coord)> = PositionId::all()
        .zip(template_anchors())
        .map(|(id, p)| (id, jit(pose.apply(p))))
        .collect();
    Ok((LandmarkSet::new(landmarks)?, AnchorSet::from_entries(anchors)?))
}

pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, g: &GeometryConfig) -> Similarity {
    let rot = g.max_rotation_deg.to_radians();
    let t = g.max_translation;
    Similarity {
        rotation: if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 },
        scale: if g.scale_range.0 < g.scale_range.1 {
            rng.random_range(g.scale_range.0..=g.scale_range.1)
        } else {
            g.scale_range.0
        },
        translation: Coord::new(
            g.center.0 + if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
            g.center.1 + if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
        ),
    }
}

/// Randomly posed template landmarks and anchors sharing one transform.
pub fn gen_landmark_template<R: Rng + ?Sized>(
    rng: &mut R,
    g: &GeometryConfig,
) -> Result<(LandmarkSet, AnchorSet)> {
    let pose = sample_pose(rng, g);
    gen_landmark_pose(rng, &pose, g.jitter)
}

pub fn gen_anchor_pairs(n: usize, g: &GeometryConfig, seed: u64) -> Result<Vec<(LandmarkSet, AnchorSet)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_landmark_template(&mut rng, g)).collect()
}

fn texture_frequencies<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Vec<(f64, f64)> {
    let (lo, hi) = cfg.texture_band;
    let k = hi.ceil() as i32;
    let mut lattice = Vec::new();
    for fy in 0..=k {
        for fx in -k..=k {
            if fy == 0 && fx <= 0 {
                continue;
            }
            let r = ((fx * fx + fy * fy) as f64).sqrt();
            if r >= lo && r <= hi {
                lattice.push((fx as f64, fy as f64));
            }
        }
    }
    let n = cfg.texture_components.min(lattice.len());
    rand::seq::index::sample(rng, lattice.len(), n)
        .into_iter()
        .map(|i| lattice[i])
        .collect()
}

/// One tile: base tone + planar shading + band-limited texture of RMS
/// `a * max_contrast` (identical on all channels) + white noise.
fn render_tile<R: Rng + ?Sized>(rng: &mut R, a: f64, tone: [f64; 3], cfg: &SynthConfig) -> RgbImage {
    let side = cfg.patch_side;
    let n = side as f64;
    let freqs = texture_frequencies(rng, cfg);
    let amp = a * cfg.max_contrast * (2.0 / freqs.len() as f64).sqrt();
    let comps: Vec<(f64, f64, f64)> = freqs
        .into_iter()
        .map(|(fx, fy)| (fx, fy, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let (gr, gc) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut img = RgbImage::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let mut t = 0.0;
            for &(fx, fy, ph) in &comps {
                t += (std::f64::consts::TAU * (fx * xf + fy * yf) / n + ph).cos();
            }
            let base = gr * (yf / n - 0.5) + gc * (xf / n - 0.5) + amp * t;
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let e = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                *v = (tone[c] + base + e).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

fn sample_tone<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let shift = rng.random_range(-20.0..20.0);
    [
        195.0 + shift + rng.random_range(-5.0..5.0),
        150.0 + shift + rng.random_range(-5.0..5.0),
        125.0 + shift + rng.random_range(-5.0..5.0),
    ]
}

/// A single synthetic patch at amplitude `a` labeled with `kind`.
pub fn gen_patch<R: Rng + ?Sized>(
    rng: &mut R,
    a: f64,
    position: PositionId,
    kind: MeasureKind,
    cfg: &SynthConfig,
) -> Result<SkinPatch> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::invalid(format!("amplitude {a} outside [0, 1]")));
    }
    let modality = cfg.modality()?;
    let tone = sample_tone(rng);
    Ok(SkinPatch {
        pixels: render_tile(rng, a, tone, cfg),
        position,
        label: Measurement::new(kind, cfg.label_map.value(kind, a))?,
        panelist_id: "synthetic".into(),
        lighting: Lighting::Natural,
        angle: Angle::Front,
        modality,
    })
}

/// Fixed blend chain realizing each lighting tag.
pub fn lighting_ops(tag: Lighting) -> Vec<LightingOp> {
    let op = |kind, m| LightingOp { kind, magnitude: m };
    match tag {
        Lighting::Natural => vec![],
        Lighting::White => vec![op(LightingKind::Brightness, 1.1)],
        Lighting::Yellow => vec![op(LightingKind::Saturation, 1.4), op(LightingKind::Brightness, 0.92)],
        Lighting::Standard2 => vec![op(LightingKind::Contrast, 1.15)],
        Lighting::Crosspolar => vec![op(LightingKind::Saturation, 0.7), op(LightingKind::Sharpness, 1.5)],
    }
}

pub fn apply_lighting(img: &RgbImage, tag: Lighting) -> Result<RgbImage> {
    let mut out = img.clone();
    for op in lighting_ops(tag) {
        out = op.apply(&out)?;
    }
    Ok(out)
}

/// Region offsets of the latent score for the left and midline positions.
fn region_offset(d: u8) -> f64 {
    match d {
        36 | 37 => 1.5,
        5 | 6 | 22 | 23 => 0.8,
        2 | 3 | 19 | 20 => 0.5,
        1 => 0.3,
        13 | 14 | 15 | 18 | 30 | 31 | 32 | 35 => 0.2,
        8 | 9 | 11 | 12 | 25 | 26 | 28 | 29 => -0.3,
        4 | 21 => -0.5,
        7 | 10 | 16 | 17 | 24 | 27 | 33 | 34 => -1.0,
        _ => 0.0,
    }
}

pub fn tile_center(id: PositionId, side: u32) -> Coord {
    let i = id.index() as u32;
    let (r, c) = (i / MOSAIC_COLS, i % MOSAIC_COLS);
    let half = side as f64 / 2.0;
    Coord::new((r * side) as f64 + half, (c * side) as f64 + half)
}

/// Per panelist, per site texture amplitudes. Left and midline sites are
/// ranked by a latent score over all panelists and mapped through the target
/// label density; right sites copy their partner with small jitter.
pub fn site_amplitudes(cfg: &SynthConfig) -> Result<Vec<[f64; NUM_POSITIONS]>> {
    let density = LabelDensity::solve(&cfg.imbalance)?;
    let table = build_symmetry_table();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let primary: Vec<PositionId> = PositionId::all()
        .filter(|&d| table.partner(d).map_or(true, |p| d < p))
        .collect();
    let normal = |s: f64| Normal::new(0.0, s).expect("finite sigma");
    let (pn, sn) = (normal(cfg.panelist_sigma), normal(cfg.site_sigma));
    let mut latent = Vec::new();
    for p in 0..cfg.n_panelists {
        let effect = pn.sample(&mut rng);
        for &d in &primary {
            latent.push((cfg.region_scale * region_offset(d.get()) + effect + sn.sample(&mut rng), p, d));
        }
    }
    let mut order: Vec<usize> = (0..latent.len()).collect();
    order.sort_by(|&i, &j| latent[i].0.total_cmp(&latent[j].0).then(i.cmp(&j)));
    let n = order.len() as f64;
    let mut out = vec![[0.0; NUM_POSITIONS]; cfg.n_panelists];
    for (rank, &i) in order.iter().enumerate() {
        let (_, p, d) = latent[i];
        out[p][d.index()] = density.quantile((rank as f64 + 0.5) / n);
    }
    let top = 1.0 - 1e-9;
    for amps in out.iter_mut() {
        for &d in &primary {
            if let Some(q) = table.partner(d) {
                let j = if cfg.pair_jitter > 0.0 {
                    rng.random_range(-cfg.pair_jitter..=cfg.pair_jitter)
                } else {
                    0.0
                };
                amps[q.index()] = (amps[d.index()] + j).clamp(0.0, top);
            }
        }
    }
    Ok(out)
}

pub fn panelist_name(p: usize) -> String {
    format!("P{p:03}")
}

/// The full synthetic dataset: one mosaic record per panelist, lighting tag
/// and angle, every position labeled with both TEWL and SH.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let modality = cfg.modality()?;
    let side = cfg.patch_side;
    let amps = site_amplitudes(cfg)?;
    let mut records = Vec::new();
    for (p, site_amps) in amps.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64);
        let tone = sample_tone(&mut rng);
        let mut labels = BTreeMap::new();
        for id in PositionId::all() {
            let a = site_amps[id.index()];
            labels.insert(
                id,
                vec![
                    Measurement::new(MeasureKind::Tewl, cfg.label_map.value(MeasureKind::Tewl, a))?,
                    Measurement::new(MeasureKind::Sh, cfg.label_map.value(MeasureKind::Sh, a))?,
                ],
            );
        }
        let anchors = AnchorSet::from_entries(PositionId::all().map(|id| (id, tile_center(id, side))))?;
        for &angle in &cfg.angles {
            for &lighting in &cfg.lightings {
                let mut mosaic = RgbImage::new(MOSAIC_COLS * side, MOSAIC_ROWS * side);
                for tile in 0..MOSAIC_COLS * MOSAIC_ROWS {
                    let site_tone = [0, 1, 2].map(|c| tone[c] + rng.random_range(-5.0..5.0));
                    let a = PositionId::from_index(tile as usize).map_or(0.0, |id| site_amps[id.index()]);
                    let t = render_tile(&mut rng, a, site_tone, cfg);
                    image::imageops::replace(
                        &mut mosaic,
                        &t,
                        ((tile % MOSAIC_COLS) * side) as i64,
                        ((tile / MOSAIC_COLS) * side) as i64,
                    );
                }
                let pixels = apply_lighting(&mosaic, lighting)?;
                let image = FacialImage::new(pixels, modality, lighting, angle, panelist_name(p))?;
                records.push(Record::new(image, anchors.clone(), labels.clone())?);
            }
        }
    }
    Ok(Dataset::new(records))
}
