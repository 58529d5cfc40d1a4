use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvalOptions, TrainConfig, CKPT_BEST};
use crate::config::AblationMode;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::Stat;
use crate::plot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub val_dice: Option<f64>,
    pub val_hd95: Option<f64>,
    pub test_dice: Option<f64>,
    pub test_hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub val_dice: Stat,
    pub val_hd95: Stat,
    pub test_dice: Stat,
    pub test_hd95: Stat,
    /// Seeds on which this mode had the highest test Dice.
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// In the order the modes were requested.
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let f = |s: &Stat, digits: usize| match (s.mean, s.std) {
            (Some(m), Some(sd)) => format!("{m:.digits$} ± {sd:.digits$}"),
            _ => "n/a".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} {:>17} {:>17} {:>17} {:>17} {:>5}",
            "mode", "val Dice", "test Dice", "val HD95 (mm)", "test HD95 (mm)", "wins"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<9} {:>17} {:>17} {:>17} {:>17} {:>5}",
                r.mode.as_str(),
                f(&r.val_dice, 4),
                f(&r.test_dice, 4),
                f(&r.val_hd95, 3),
                f(&r.test_hd95, 3),
                r.wins
            );
        }
        out
    }

    /// One row per mode: mean and std of each metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "mode", "runs", "val_dice_mean", "val_dice_std", "test_dice_mean", "test_dice_std", "val_hd95_mean",
            "val_hd95_std", "test_hd95_mean", "test_hd95_std", "wins",
        ])?;
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.mode.as_str().to_string(),
                r.test_dice.n.max(r.val_dice.n).to_string(),
                o(r.val_dice.mean),
                o(r.val_dice.std),
                o(r.test_dice.mean),
                o(r.test_dice.std),
                o(r.val_hd95.mean),
                o(r.val_hd95.std),
                o(r.test_hd95.mean),
                o(r.test_hd95.std),
                r.wins.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains every `(mode, seed)` pair with otherwise identical settings and
/// evaluates each best checkpoint on the validation and test splits.
/// Writes `ablation.csv`, `ablation.json` and `ablation.svg` into `out_dir`.
pub fn ablate(
    base: &TrainConfig,
    modes: &[AblationMode],
    seeds: &[u64],
    out_dir: &Path,
    on_run: &mut dyn FnMut(&AblationRun),
) -> Result<AblationTable> {
    if modes.len() < 2 {
        return Err(Error::Config("ablation needs at least 2 modes".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least 1 seed".into()));
    }
    if modes.iter().enumerate().any(|(i, m)| modes[..i].contains(m)) {
        return Err(Error::Config("ablation modes must be distinct".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut runs = Vec::with_capacity(modes.len() * seeds.len());
    for &mode in modes {
        for &seed in seeds {
            let cfg = TrainConfig {
                ablation_mode: mode,
                seed,
                output_dir: out_dir.join(format!("{}_seed{seed}", mode.as_str())),
                ..base.clone()
            };
            let summary = train(&cfg)?;
            let ckpt = summary.run_dir.join(CKPT_BEST);
            let val = evaluate(&ckpt, &cfg.manifest_path, Split::Val, EvalOptions::default())?;
            let test = evaluate(&ckpt, &cfg.manifest_path, Split::Test, EvalOptions::default())?;
            test.write(&summary.run_dir)?;
            let run = AblationRun {
                mode,
                seed,
                run_dir: summary.run_dir,
                best_epoch: summary.best_epoch,
                val_dice: val.summary.mean_dice.mean,
                val_hd95: val.summary.mean_hd95.mean,
                test_dice: test.summary.mean_dice.mean,
                test_hd95: test.summary.mean_hd95.mean,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    let table = tabulate(modes, seeds, runs);
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&table).expect("table serializes") + "\n")
        .map_err(|e| Error::io(out_dir.join("ablation.json"), e))?;
    table.write_csv(&out_dir.join("ablation.csv"))?;
    plot::write_ablation_bars(&out_dir.join("ablation.svg"), &table)?;
    Ok(table)
}

fn tabulate(modes: &[AblationMode], seeds: &[u64], runs: Vec<AblationRun>) -> AblationTable {
    let mut wins = vec![0usize; modes.len()];
    for &seed in seeds {
        let best = modes
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                runs.iter().find(|r| r.mode == *m && r.seed == seed).and_then(|r| r.test_dice).map(|d| (i, d))
            })
            .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                Some((_, bd)) if bd >= d => acc,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = best {
            wins[i] += 1;
        }
    }
    let rows = modes
        .iter()
        .zip(wins)
        .map(|(&mode, wins)| {
            let of = |f: fn(&AblationRun) -> Option<f64>| Stat::of(runs.iter().filter(|r| r.mode == mode).map(f));
            AblationRow {
                mode,
                val_dice: of(|r| r.val_dice),
                val_hd95: of(|r| r.val_hd95),
                test_dice: of(|r| r.test_dice),
                test_hd95: of(|r| r.test_hd95),
                wins,
            }
        })
        .collect();
    AblationTable {
        seeds: seeds.to_vec(),
        rows,
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mode: AblationMode, seed: u64, dice: f64) -> AblationRun {
        AblationRun {
            mode,
            seed,
            run_dir: PathBuf::new(),
            best_epoch: Some(1),
            val_dice: Some(dice),
            val_hd95: Some(1.0),
            test_dice: Some(dice),
            test_hd95: Some(2.0),
        }
    }

    #[test]
    fn table_keeps_mode_order_and_counts_wins() {
        let modes = [AblationMode::Dsd, AblationMode::Ds];
        let runs = vec![
            run(AblationMode::Dsd, 0, 0.8),
            run(AblationMode::Dsd, 1, 0.7),
            run(AblationMode::Ds, 0, 0.75),
            run(AblationMode::Ds, 1, 0.72),
        ];
        let t = tabulate(&modes, &[0, 1], runs);
        assert_eq!(t.rows.iter().map(|r| r.mode).collect::<Vec<_>>(), modes);
        assert_eq!((t.rows[0].wins, t.rows[1].wins), (1, 1));
        assert!((t.rows[0].test_dice.mean.unwrap() - 0.75).abs() < 1e-12);
        assert!(t.to_text().lines().count() == 3);
    }
}
