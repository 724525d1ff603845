use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skinmap_core::datamodel::{build_symmetry_table, Coord, MeasureKind, NUM_POSITIONS};
use skinmap_core::spectral::{bandpass_mask, rgb_band_energy};
use skinmap_core::synthgen::{
    gen_dataset, gen_landmark_template, site_amplitudes, template_anchors, template_landmarks, GeometryConfig,
    LabelDensity, SynthConfig,
};

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

#[test]
fn label_histogram_matches_imbalance() {
    let cfg = SynthConfig::default();
    let density = LabelDensity::solve(&cfg.imbalance).unwrap();
    let amps: Vec<f64> = site_amplitudes(&cfg).unwrap().into_iter().flatten().collect();
    let target = [cfg.imbalance.many, cfg.imbalance.medium, cfg.imbalance.few];
    for g in 0..3 {
        let (lo, hi) = (density.edges[g], density.edges[g + 1]);
        let inside = amps.iter().filter(|&&a| a >= lo && (a < hi || (g == 2 && a <= hi))).count();
        let mass = inside as f64 / amps.len() as f64;
        assert!((mass - target[g]).abs() <= 0.05, "group {g}: mass {mass} vs {}", target[g]);
    }
}

#[test]
fn band_energy_tracks_label() {
    let ds = gen_dataset(&SynthConfig::default()).unwrap();
    let mut patches = ds.patches(MeasureKind::Tewl).unwrap();
    assert!(patches.len() >= 500);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    patches.shuffle(&mut rng);
    let side = patches[0].side() as usize;
    let mask = bandpass_mask(0.0576, 0.0036, side, side).unwrap();
    let sample = &patches[..500];
    let energy: Vec<f64> = sample.iter().map(|p| rgb_band_energy(&p.pixels, &mask).unwrap()).collect();
    let labels: Vec<f64> = sample.iter().map(|p| p.label.value).collect();
    let rho = spearman(&energy, &labels);
    assert!(rho >= 0.9, "spearman {rho}");
}

#[test]
fn symmetric_pairs_are_closer_than_unpaired_sites() {
    let cfg = SynthConfig::default();
    let table = build_symmetry_table();
    let amps = site_amplitudes(&cfg).unwrap();
    let tewl = |a: f64| cfg.label_map.value(MeasureKind::Tewl, a);
    let mut paired = Vec::new();
    let mut unpaired = Vec::new();
    for row in &amps {
        for (d, e) in table.pairs() {
            paired.push((tewl(row[d.index()]) - tewl(row[e.index()])).abs());
        }
        for i in 0..NUM_POSITIONS {
            for j in i + 1..NUM_POSITIONS {
                let is_pair = table.pairs().any(|(d, e)| d.index() == i && e.index() == j);
                if !is_pair {
                    unpaired.push((tewl(row[i]) - tewl(row[j])).abs());
                }
            }
        }
    }
    assert!(median(paired.clone()) < median(unpaired.clone()));
}

/// Least-squares similarity `q = a p + b` in the complex plane.
fn fit_similarity(src: &[Coord], dst: &[Coord]) -> impl Fn(Coord) -> Coord {
    let n = src.len() as f64;
    let mean = |v: &[Coord]| {
        (
            v.iter().map(|c| c.row).sum::<f64>() / n,
            v.iter().map(|c| c.col).sum::<f64>() / n,
        )
    };
    let (ms, md) = (mean(src), mean(dst));
    let (mut re, mut im, mut den) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (pr, pc) = (p.row - ms.0, p.col - ms.1);
        let (qr, qc) = (q.row - md.0, q.col - md.1);
        // q * conj(p) with row as real and col as imaginary part
        re += qr * pr + qc * pc;
        im += qc * pr - qr * pc;
        den += pr * pr + pc * pc;
    }
    let (ar, ai) = (re / den, im / den);
    move |p: Coord| {
        let (pr, pc) = (p.row - ms.0, p.col - ms.1);
        Coord::new(ar * pr - ai * pc + md.0, ai * pr + ar * pc + md.1)
    }
}

#[test]
fn anchors_follow_the_landmark_similarity() {
    let g = GeometryConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let (lm, anchors) = gen_landmark_template(&mut rng, &g).unwrap();
        let map = fit_similarity(&template_landmarks(), lm.points());
        let sq: f64 = template_anchors()
            .iter()
            .zip(anchors.iter())
            .map(|(&t, (_, c))| map(t).distance(c).powi(2))
            .sum();
        let rms = (sq / NUM_POSITIONS as f64).sqrt();
        assert!(rms < g.jitter, "residual {rms} over jitter {}", g.jitter);
    }
}
