use tta_core::allocation::{duality_schedule, DualityPoint};
use tta_core::rng::{derive_seed, seeded};

use super::{stream, streams};
use crate::config::RunConfig;
use crate::error::Result;
use crate::manifest::Stage;

pub const DUALITY_FILE: &str = "duality.csv";

/// `alpha_bar = i / (grid - 1)` for `i = 0..grid`, each point on its own stream.
pub fn duality_grid(vocab: usize, grid: usize, draws: usize, master: u64) -> Result<Vec<DualityPoint>> {
    let denom = grid.saturating_sub(1).max(1) as f64;
    (0..grid)
        .map(|i| {
            let alpha_bar = (i as f64 / denom).min(1.0);
            Ok(duality_schedule(alpha_bar, vocab, draws, &mut seeded(derive_seed(master, i as u64)))?)
        })
        .collect()
}

pub fn duality_csv(points: &[DualityPoint]) -> String {
    let mut out = String::from("alpha_bar,alpha_tilde,alpha_disc,std_err\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.alpha_bar, p.alpha_tilde, p.alpha_disc, p.std_err));
    }
    out
}

pub fn duality(cfg: &RunConfig) -> Result<Vec<DualityPoint>> {
    let mut stage = Stage::begin(cfg, "duality")?;
    let d = &cfg.duality;
    let master = stage.seed("duality", stream(cfg, streams::DUALITY));
    let points = duality_grid(d.vocab, d.grid, d.draws, master)?;
    stage.write(DUALITY_FILE, duality_csv(&points).as_bytes())?;
    stage.finish()?;
    Ok(points)
}
