//! Static SVG charts: training curves and ablation bars.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{AblationTable, EpochRecord};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn write(path: &Path, svg: String) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{y} H{x}" stroke="black" fill="none"/>"#,
        y = H - PAD,
        x = W - PAD
    );
    s
}

fn y_of(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    H - PAD - (v - lo) / span * (H - 2.0 * PAD)
}

/// Total loss and validation Dice per epoch, each scaled to its own range.
pub fn write_training_curves(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = open("training curves");
    let n = history.len().max(2) as f64 - 1.0;
    let x_of = |i: usize| PAD + i as f64 / n * (W - 2.0 * PAD);
    let series: [(&str, Vec<Option<f64>>); 2] = [
        ("total loss", history.iter().map(|r| Some(r.loss.total)).collect()),
        ("val Dice", history.iter().map(|r| r.val_dice).collect()),
    ];
    for (si, (name, values)) in series.iter().enumerate() {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        if present.is_empty() {
            continue;
        }
        let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", x_of(i), y_of(v, lo, hi))))
            .collect();
        let c = COLORS[si];
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{c}" fill="none" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{name} [{lo:.4}, {hi:.4}]</text>"#,
            PAD + 8.0,
            PAD + 14.0 * si as f64
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch (1 to {})</text>"#, W / 2.0, H - 12.0, history.len());
    s.push_str("</svg>\n");
    write(path, s)
}

/// Test Dice mean per mode with ± std whiskers.
pub fn write_ablation_bars(path: &Path, table: &AblationTable) -> Result<()> {
    let mut s = open("test mean foreground Dice by mode");
    let bars: Vec<(&str, f64, f64)> = table
        .rows
        .iter()
        .map(|r| (r.mode.as_str(), r.test_dice.mean.unwrap_or(0.0), r.test_dice.std.unwrap_or(0.0)))
        .collect();
    let hi = bars.iter().map(|b| b.1 + b.2).fold(0.0, f64::max).max(1e-9);
    let lo = bars.iter().map(|b| b.1 - b.2).fold(hi, f64::min).min(hi) * 0.95;
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    for (i, (name, mean, sd)) in bars.iter().enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.2;
        let top = y_of(*mean, lo, hi);
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{c}"/>"#,
            slot * 0.6,
            H - PAD - top
        );
        let cx = x + slot * 0.3;
        let _ = writeln!(
            s,
            r#"<path d="M{cx:.2} {:.2} V{:.2}" stroke="black"/>"#,
            y_of(mean - sd, lo, hi),
            y_of(mean + sd, lo, hi)
        );
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{name}</text>"#, H - PAD + 14.0);
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{mean:.4}</text>"#, top - 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}">axis from {lo:.3}</text>"#, 4.0, H - PAD);
    s.push_str("</svg>\n");
    write(path, s)
}
