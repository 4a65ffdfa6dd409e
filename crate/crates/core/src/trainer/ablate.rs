//! Degree x ResGCN-depth grid with a no-GC control arm.

use std::fmt::Write as _;

use super::evaluate::{par_map, worker_threads};
use super::{mean_psnr, TrainConfig, Trainer};
use crate::dataio::DegradedPair;
use crate::error::{Error, Result};
use crate::gcfeat::GcStackConfig;
use crate::models::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub degrees: Vec<usize>,
    pub block_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Passed to every GC arm; with `false` and 0 blocks an arm is
    /// architecturally identical to the control.
    pub lift_project: bool,
}

/// One training run. `degree`/`blocks` are `None` for the control.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub degree: Option<usize>,
    pub blocks: Option<usize>,
    pub seed: u64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub degree: Option<usize>,
    pub blocks: Option<usize>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub runs: Vec<AblationRow>,
}

impl AblationReport {
    /// Cells in first-seen run order.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut keys: Vec<(Option<usize>, Option<usize>)> = Vec::new();
        for r in &self.runs {
            if !keys.contains(&(r.degree, r.blocks)) {
                keys.push((r.degree, r.blocks));
            }
        }
        keys.into_iter()
            .map(|(degree, blocks)| {
                let v: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| (r.degree, r.blocks) == (degree, blocks))
                    .map(|r| r.psnr)
                    .collect();
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                AblationCell {
                    degree,
                    blocks,
                    mean,
                    std,
                    runs: v.len(),
                }
            })
            .collect()
    }

    /// `row,degree,blocks,seed,psnr_db,std_db,runs`; `run` rows then `cell`
    /// rows, the control arm written as `none`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        let mut s = String::from("row,degree,blocks,seed,psnr_db,std_db,runs\n");
        for r in &self.runs {
            writeln!(
                s,
                "run,{},{},{},{:.6},,",
                opt(r.degree),
                opt(r.blocks),
                r.seed,
                r.psnr
            )
            .unwrap();
        }
        for c in self.cells() {
            writeln!(
                s,
                "cell,{},{},,{:.6},{:.6},{}",
                opt(c.degree),
                opt(c.blocks),
                c.mean,
                c.std,
                c.runs
            )
            .unwrap();
        }
        s
    }
}

/// Trains every (degree, blocks, seed) variant of `base` plus a control with
/// the GC stack replaced by the identity, and scores each on `val`.
/// Weights and batches follow the run's seed; the graph follows
/// `base.gc.graph_seed`.
pub fn ablate(
    base: &ModelConfig,
    grid: &AblationGrid,
    train_cfg: &TrainConfig,
    train: &[DegradedPair],
    val: &[DegradedPair],
) -> Result<AblationReport> {
    if let Some(&d) = grid.degrees.iter().find(|&&d| d % 2 == 1) {
        return Err(Error::OddDegree(d));
    }
    if grid.degrees.is_empty() || grid.block_counts.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Config(
            "ablation grid needs degrees, block counts and seeds".into(),
        ));
    }
    if val.is_empty() {
        return Err(Error::Config("ablation needs a validation set".into()));
    }
    let gc_base = base.gc.unwrap_or_default();
    let mut jobs = Vec::new();
    for &degree in &grid.degrees {
        for &blocks in &grid.block_counts {
            for &seed in &grid.seeds {
                let gc = GcStackConfig {
                    degree,
                    blocks,
                    lift_project: grid.lift_project,
                    ..gc_base
                };
                jobs.push((Some(gc), seed));
            }
        }
    }
    for &seed in &grid.seeds {
        jobs.push((None, seed));
    }
    for (gc, _) in &jobs {
        ModelConfig {
            gc: *gc,
            ..base.clone()
        }
        .validate()?;
    }
    let results = par_map(
        &jobs,
        worker_threads(),
        |(gc, seed)| -> Result<AblationRow> {
            let cfg = ModelConfig {
                gc: *gc,
                ..base.clone()
            };
            let tc = TrainConfig {
                seed: *seed,
                ..train_cfg.clone()
            };
            let model = Model::new(cfg, *seed)?;
            let mut t = Trainer::new(model, tc, train.to_vec(), Vec::new())?;
            t.run_to_end()?;
            Ok(AblationRow {
                degree: gc.map(|g| g.degree),
                blocks: gc.map(|g| g.blocks),
                seed: *seed,
                psnr: mean_psnr(t.model(), val)?,
            })
        },
    );
    Ok(AblationReport {
        runs: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth, BlurKernel};

    fn setup() -> (ModelConfig, TrainConfig, Vec<DegradedPair>) {
        let base = ModelConfig {
            channels: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            ..ModelConfig::mini_deblur()
        };
        let tc = TrainConfig {
            lr0: 1e-3,
            total_steps: 2,
            batch: 1,
            patch: Some(8),
            ..Default::default()
        };
        let data = synth::deblur_pairs(2, 8, BlurKernel::Gaussian { sigma: 1.0 }, 0.0, 2).unwrap();
        (base, tc, data)
    }

    #[test]
    fn odd_degree_rejected_up_front() {
        let (base, tc, data) = setup();
        let grid = AblationGrid {
            degrees: vec![2, 3],
            block_counts: vec![1],
            seeds: vec![1],
            lift_project: true,
        };
        assert!(matches!(
            ablate(&base, &grid, &tc, &data, &data),
            Err(Error::OddDegree(3))
        ));
    }

    #[test]
    fn grid_counts_and_degenerate_cell() {
        let (base, tc, data) = setup();
        let grid = AblationGrid {
            degrees: vec![2, 4],
            block_counts: vec![0, 2],
            seeds: vec![1, 2, 3],
            lift_project: false,
        };
        let r = ablate(&base, &grid, &tc, &data, &data).unwrap();
        assert_eq!(r.runs.len(), 12 + 3);
        assert_eq!(r.cells().len(), 5);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 15 + 5);
        let control = r.cells().into_iter().find(|c| c.degree.is_none()).unwrap();
        for c in r.cells().iter().filter(|c| c.blocks == Some(0)) {
            assert!((c.mean - control.mean).abs() < 1e-9, "{c:?} vs {control:?}");
        }
    }
}
