//! Slow, direct reference implementations used to check the fast paths.
//!
//! Nothing here shares code with [`crate::losses`] or [`crate::metrics`]
//! beyond the data types; each function follows its textbook formula one
//! voxel at a time.

use ndarray::{Array3, Array4};

use crate::config::DsdConfig;

/// Dice + cross-entropy: `1 - (1/K) Σ_k (2 Σ G·Y + ε) / (Σ G² + Σ Y² + ε)`
/// plus `-(1/N) Σ G · ln max(Y, floor)`.
pub fn dice_ce(pred: &Array4<f64>, truth: &Array4<f64>, eps: f64, floor: f64) -> f64 {
    let (k, h, w, d) = pred.dim();
    let n = (h * w * d) as f64;
    let mut dice = 0.0;
    let mut ce = 0.0;
    for c in 0..k {
        let (mut inter, mut g2, mut y2) = (0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                for l in 0..d {
                    let y = pred[[c, i, j, l]];
                    let g = truth[[c, i, j, l]];
                    inter += g * y;
                    g2 += g * g;
                    y2 += y * y;
                    ce -= g * y.max(floor).ln();
                }
            }
        }
        dice += (2.0 * inter + eps) / (g2 + y2 + eps);
    }
    1.0 - dice / k as f64 + ce / n
}

/// `(1/N) Σ_voxels Σ_k T · (ln max(T, floor) - ln max(S, floor))`.
pub fn kl(student: &Array4<f64>, teacher: &Array4<f64>, floor: f64) -> f64 {
    let (k, h, w, d) = student.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            for l in 0..d {
                for c in 0..k {
                    let t = teacher[[c, i, j, l]];
                    let s = student[[c, i, j, l]];
                    if t > 0.0 {
                        total += t * (t.max(floor).ln() - s.max(floor).ln());
                    }
                }
            }
        }
    }
    total / (h * w * d) as f64
}

pub fn deep_supervision(
    main: &Array4<f64>,
    decoders: &[Array4<f64>],
    truth: &Array4<f64>,
    eta: f64,
    eps: f64,
    floor: f64,
) -> f64 {
    let mut total = dice_ce(main, truth, eps, floor);
    for dec in decoders {
        total += eta * dice_ce(dec, truth, eps, floor);
    }
    total
}

/// Stage outputs as plain arrays: `(hard, soft)` per stage.
pub struct OracleStage {
    pub hard: Array4<f64>,
    pub soft: Array4<f64>,
}

/// Full objective. `encoder[Z-1]` and `decoder[0]` are the teachers.
pub fn dsd(
    main: &Array4<f64>,
    encoder: &[OracleStage],
    decoder: &[OracleStage],
    truth: &Array4<f64>,
    cfg: &DsdConfig,
) -> f64 {
    let (eps, floor) = (cfg.dice_smooth_eps, cfg.prob_clamp_floor);
    let z = encoder.len();
    let supervised: Vec<Array4<f64>> = decoder
        .iter()
        .map(|s| if cfg.supervise_softened { s.soft.clone() } else { s.hard.clone() })
        .collect();
    let mut total = deep_supervision(main, &supervised, truth, cfg.eta, eps, floor);
    let t2 = if cfg.kl_tau_squared { cfg.tau * cfg.tau } else { 1.0 };
    for s in &encoder[..z - 1] {
        total += cfg.alpha1 * t2 * kl(&s.soft, &encoder[z - 1].soft, floor);
    }
    for s in &decoder[1..] {
        total += cfg.alpha2 * t2 * kl(&s.soft, &decoder[0].soft, floor);
    }
    total
}

/// Softmax over channels of `logits / tau`, written from the definition.
pub fn softmax(logits: &Array4<f64>, tau: f64) -> Array4<f64> {
    let (k, h, w, d) = logits.dim();
    let mut out = Array4::zeros((k, h, w, d));
    for i in 0..h {
        for j in 0..w {
            for l in 0..d {
                let m = (0..k).map(|c| logits[[c, i, j, l]]).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = (0..k).map(|c| ((logits[[c, i, j, l]] - m) / tau).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..k {
                    out[[c, i, j, l]] = e[c] / z;
                }
            }
        }
    }
    out
}

fn surface(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let (h, w, d) = mask.dim();
    let dims = [h as i64, w as i64, d as i64];
    const OFFSETS: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for l in 0..d {
                if !mask[[i, j, l]] {
                    continue;
                }
                let p = [i as i64, j as i64, l as i64];
                let on_edge = OFFSETS.iter().any(|o| {
                    let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                    let outside = (0..3).any(|a| q[a] < 0 || q[a] >= dims[a]);
                    outside || !mask[[q[0] as usize, q[1] as usize, q[2] as usize]]
                });
                if on_edge {
                    out.push([i, j, l]);
                }
            }
        }
    }
    out
}

fn nearest(p: [usize; 3], set: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut best = f64::INFINITY;
    for q in set {
        let dx = (p[0] as f64 - q[0] as f64) * spacing[0];
        let dy = (p[1] as f64 - q[1] as f64) * spacing[1];
        let dz = (p[2] as f64 - q[2] as f64) * spacing[2];
        let dist = (dx * dx + dy * dy + dz * dz).sqrt();
        best = best.min(dist);
    }
    best
}

fn interpolated_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let below = pos.floor() as usize;
    let above = (below + 1).min(v.len() - 1);
    let frac = pos - below as f64;
    if frac == 0.0 {
        v[below]
    } else {
        v[below] + (v[above] - v[below]) * frac
    }
}

/// All-pairs HD95 (max of directed 95th percentiles); `None` if either
/// mask is empty.
pub fn hd95_brute_force(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Option<f64> {
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let ab: Vec<f64> = sa.iter().map(|&p| nearest(p, &sb, spacing)).collect();
    let ba: Vec<f64> = sb.iter().map(|&p| nearest(p, &sa, spacing)).collect();
    Some(interpolated_percentile(ab, 95.0).max(interpolated_percentile(ba, 95.0)))
}

/// All-pairs exact Hausdorff distance.
pub fn hausdorff_brute_force(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Option<f64> {
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let ab = sa.iter().map(|&p| nearest(p, &sb, spacing)).fold(0.0, f64::max);
    let ba = sb.iter().map(|&p| nearest(p, &sa, spacing)).fold(0.0, f64::max);
    Some(ab.max(ba))
}

/// `2|A∩B| / (|A|+|B|)` by counting.
pub fn dice_count(a: &Array3<bool>, b: &Array3<bool>) -> Option<f64> {
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    (total > 0).then(|| 2.0 * both as f64 / total as f64)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every entry of `x`.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
