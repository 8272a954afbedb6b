//! Ablation grids trained on worker threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{anyhow, Result};
use mtmixatt_core::config::{GridKind, ModelConfig, TrainConfig};
use mtmixatt_core::data::Dataset;
use mtmixatt_core::train::{train, validate_grid, AblationRow, RunReport};

pub type Grid = Vec<(String, ModelConfig)>;

/// Parse a comma-separated list of grid names, or `all`.
pub fn parse_grids(spec: &str) -> Result<Vec<GridKind>> {
    if spec.trim() == "all" {
        return Ok(GridKind::ALL.to_vec());
    }
    spec.split(',').map(|s| Ok(GridKind::parse(s.trim())?)).collect()
}

pub fn grid_name(kind: GridKind) -> &'static str {
    match kind {
        GridKind::Grouping => "grouping",
        GridKind::Mixing => "mixing",
        GridKind::DenseMoe => "dense_moe",
        GridKind::ScenarioMoe => "scenario_moe",
        GridKind::Norm => "norm",
    }
}

/// Default worker count: one per available core.
pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Train every variant under the same seed and data. Each worker owns its
/// model; results come back in grid order whatever the thread count, and
/// every variant is validated before any training starts.
pub fn run(grid: &[(String, ModelConfig)], tc: &TrainConfig, train_set: &Dataset, eval: &Dataset, workers: usize) -> Result<Vec<(AblationRow, RunReport)>> {
    validate_grid(grid, tc)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, grid.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((name, cfg)) = grid.get(i) else { break };
                let out = train(cfg, tc, train_set, eval).map(|o| o.report).map_err(|e| anyhow!("variant {name}: {e}"));
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });
    let slots = slots.into_inner().expect("workers have finished");
    grid.iter()
        .zip(slots)
        .map(|((name, _), slot)| {
            let report = slot.expect("every index is claimed")?;
            Ok((AblationRow::from_report(name, &report), report))
        })
        .collect()
}
