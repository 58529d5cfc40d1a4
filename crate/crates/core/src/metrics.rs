//! Per-class Dice and 95th-percentile Hausdorff distance.
//!
//! Boundary voxels are foreground voxels with at least one 6-neighbour
//! outside the mask; neighbours past the volume edge count as outside.
//! Distances between voxels `p` and `q` are always evaluated as
//! `sqrt(((dx*sx)^2 + (dy*sy)^2) + (dz*sz)^2)` with integer offsets `d*`,
//! so the accelerated search and a brute-force scan agree bit for bit.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

/// How the two directed distance sets are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HdConvention {
    /// `max(P95(A→B), P95(B→A))`.
    #[default]
    MaxOfDirected,
    /// `P95(A→B ∪ B→A)`.
    Pooled,
}

/// `2|A∩B| / (|A|+|B|)`; `None` when both masks are empty.
pub fn dice_score(pred: ArrayView3<'_, bool>, truth: ArrayView3<'_, bool>) -> Result<Option<f64>> {
    ensure_shape(truth.shape(), pred.shape())?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    Zip::from(&pred).and(&truth).for_each(|&p, &t| {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    });
    if a + b == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * inter as f64 / (a + b) as f64))
}

/// Foreground voxels with a 6-neighbour outside the mask, in C order.
pub fn boundary_voxels(mask: ArrayView3<'_, bool>) -> Vec<[usize; 3]> {
    let (h, w, d) = mask.dim();
    let inside = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < h
            && (j as usize) < w
            && (k as usize) < d
            && mask[[i as usize, j as usize, k as usize]]
    };
    let mut out = Vec::new();
    for ((i, j, k), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let (i, j, k) = (i as isize, j as isize, k as isize);
        let edge = !inside(i - 1, j, k)
            || !inside(i + 1, j, k)
            || !inside(i, j - 1, k)
            || !inside(i, j + 1, k)
            || !inside(i, j, k - 1)
            || !inside(i, j, k + 1);
        if edge {
            out.push([i as usize, j as usize, k as usize]);
        }
    }
    out
}

/// Squared physical distance in the fixed evaluation order.
#[inline]
pub fn squared_distance(p: [usize; 3], q: [usize; 3], spacing: [f64; 3]) -> f64 {
    let t = |a: usize| {
        let v = (p[a] as f64 - q[a] as f64) * spacing[a];
        v * v
    };
    (t(0) + t(1)) + t(2)
}

/// Percentile with linear interpolation between order statistics
/// (rank `q/100 * (n-1)`). `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Static 3D tree answering exact nearest-neighbour distance queries.
pub struct KdTree {
    /// Points arranged so each subrange's median is its splitting node.
    points: Vec<[usize; 3]>,
    spacing: [f64; 3],
}

impl KdTree {
    pub fn new(mut points: Vec<[usize; 3]>, spacing: [f64; 3]) -> Self {
        build(&mut points, 0);
        Self { points, spacing }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest squared distance from `q` to any stored point.
    pub fn nearest_squared(&self, q: [usize; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.points, 0, q, &mut best);
        best
    }

    fn search(&self, pts: &[[usize; 3]], axis: usize, q: [usize; 3], best: &mut f64) {
        if pts.is_empty() {
            return;
        }
        let mid = pts.len() / 2;
        let p = pts[mid];
        let d = squared_distance(p, q, self.spacing);
        if d < *best {
            *best = d;
        }
        let (near, far) = if q[axis] < p[axis] {
            (&pts[..mid], &pts[mid + 1..])
        } else {
            (&pts[mid + 1..], &pts[..mid])
        };
        let next = (axis + 1) % 3;
        self.search(near, next, q, best);
        // Every point across the plane is at least this far along `axis`,
        // and adding non-negative terms never rounds the sum below it.
        let gap = (q[axis] as f64 - p[axis] as f64) * self.spacing[axis];
        if gap * gap <= *best {
            self.search(far, next, q, best);
        }
    }
}

fn build(pts: &mut [[usize; 3]], axis: usize) {
    if pts.len() <= 1 {
        return;
    }
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by_key(mid, |p| (p[axis], p[(axis + 1) % 3], p[(axis + 2) % 3]));
    let next = (axis + 1) % 3;
    let (left, right) = pts.split_at_mut(mid);
    build(left, next);
    build(&mut right[1..], next);
}

/// Directed distances from every point of `from` to the nearest of `to`.
pub fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let tree = KdTree::new(to.to_vec(), spacing);
    from.iter().map(|&p| tree.nearest_squared(p).sqrt()).collect()
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::contract(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// HD95 in mm; `None` when either mask is empty.
pub fn hd95(pred: ArrayView3<'_, bool>, truth: ArrayView3<'_, bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    hd95_with(pred, truth, spacing, HdConvention::MaxOfDirected)
}

pub fn hd95_with(
    pred: ArrayView3<'_, bool>,
    truth: ArrayView3<'_, bool>,
    spacing: [f64; 3],
    convention: HdConvention,
) -> Result<Option<f64>> {
    hausdorff_percentile(pred, truth, spacing, convention, 95.0)
}

/// Shared worker of [`hd95_with`]; `q = 100` gives the exact Hausdorff distance.
pub fn hausdorff_percentile(
    pred: ArrayView3<'_, bool>,
    truth: ArrayView3<'_, bool>,
    spacing: [f64; 3],
    convention: HdConvention,
    q: f64,
) -> Result<Option<f64>> {
    ensure_shape(truth.shape(), pred.shape())?;
    check_spacing(spacing)?;
    let a = boundary_voxels(pred);
    let b = boundary_voxels(truth);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let ab = directed_distances(&a, &b, spacing);
    let ba = directed_distances(&b, &a, spacing);
    Ok(Some(match convention {
        HdConvention::MaxOfDirected => percentile(&sorted(ab), q).max(percentile(&sorted(ba), q)),
        HdConvention::Pooled => percentile(&sorted([ab, ba].concat()), q),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub dice: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean over classes whose Dice is defined.
    pub mean_dice: Option<f64>,
    /// Mean over classes whose HD95 is defined.
    pub mean_hd95: Option<f64>,
    pub foreground_only: bool,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class metrics of an integer prediction against integer truth.
pub fn evaluate_labels(
    pred: &Array3<u8>,
    truth: &Array3<u8>,
    num_classes: usize,
    spacing: [f64; 3],
    foreground_only: bool,
    convention: HdConvention,
) -> Result<MetricsReport> {
    ensure_shape(truth.shape(), pred.shape())?;
    let first = usize::from(foreground_only);
    let mut per_class = Vec::with_capacity(num_classes);
    for c in first..num_classes {
        let p = pred.mapv(|v| v as usize == c);
        let t = truth.mapv(|v| v as usize == c);
        per_class.push(ClassMetrics {
            class_id: c,
            dice: dice_score(p.view(), t.view())?,
            hd95: hd95_with(p.view(), t.view(), spacing, convention)?,
        });
    }
    Ok(MetricsReport {
        mean_dice: mean_present(per_class.iter().map(|m| m.dice)),
        mean_hd95: mean_present(per_class.iter().map(|m| m.hd95)),
        per_class,
        foreground_only,
    })
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Stat { mean: None, std: None, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat {
            mean: Some(mean),
            std: Some(std),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: usize,
    pub dice: Stat,
    pub hd95: Stat,
}

/// Aggregate over samples: per-class and overall mean ± std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub num_samples: usize,
    pub per_class: Vec<ClassSummary>,
    /// Statistics of the per-sample mean Dice.
    pub mean_dice: Stat,
    pub mean_hd95: Stat,
    pub foreground_only: bool,
}

pub fn summarize(reports: &[(String, MetricsReport)]) -> MetricsSummary {
    let class_ids: Vec<usize> = reports
        .first()
        .map(|(_, r)| r.per_class.iter().map(|c| c.class_id).collect())
        .unwrap_or_default();
    let per_class = class_ids
        .iter()
        .enumerate()
        .map(|(i, &class_id)| ClassSummary {
            class_id,
            dice: Stat::of(reports.iter().map(|(_, r)| r.per_class[i].dice)),
            hd95: Stat::of(reports.iter().map(|(_, r)| r.per_class[i].hd95)),
        })
        .collect();
    MetricsSummary {
        num_samples: reports.len(),
        per_class,
        mean_dice: Stat::of(reports.iter().map(|(_, r)| r.mean_dice)),
        mean_hd95: Stat::of(reports.iter().map(|(_, r)| r.mean_hd95)),
        foreground_only: reports.first().is_none_or(|(_, r)| r.foreground_only),
    }
}

/// One row per sample × class; undefined values are left empty.
pub fn write_csv<W: std::io::Write>(out: W, reports: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "class_id", "dice", "hd95"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (id, r) in reports {
        for c in &r.per_class {
            w.write_record([id.clone(), c.class_id.to_string(), fmt(c.dice), fmt(c.hd95)])?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
