//! Token-level heatmap export: for both responses of a pair, the sensitivity,
//! uncertainty, mask flag and factor of every token.

use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use super::train::pair_diagnostics;
use crate::error::{LabError, Result};
use crate::preference_loss::PreferencePair;
use crate::toy_policy::{PolicyParams, TokenId};
use crate::uncertainty::{Branch, SequenceDiagnostics};
use crate::visual_noise::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub branch: Branch,
    pub position: usize,
    pub token_id: TokenId,
    pub delta: f64,
    pub u: f64,
    pub selected: bool,
    pub lambda: f64,
}

fn rows_for(branch: Branch, tokens: &[TokenId], diag: &SequenceDiagnostics) -> Vec<HeatmapRow> {
    tokens
        .iter()
        .zip(&diag.tokens)
        .enumerate()
        .map(|(position, (&token_id, t))| HeatmapRow {
            branch,
            position,
            token_id,
            delta: t.delta,
            u: t.u,
            selected: t.selected,
            lambda: t.lam,
        })
        .collect()
}

/// Heatmap rows of `pair` under `theta`, with the corruption noise keyed by
/// `(config.seed, pair_id, step)` and statistics taken per sequence.
pub fn token_heatmap(
    theta: &PolicyParams,
    pair: &PreferencePair,
    config: &RunConfig,
    step: u64,
) -> Result<Vec<HeatmapRow>> {
    config.validate()?;
    pair.validate(theta.vocab_size())?;
    let schedule = NoiseSchedule::new(config.noise.num_steps, config.noise.interpretation)?;
    let (dw, dl) = pair_diagnostics(theta, pair, &schedule, config, step)?;
    let mut rows = rows_for(Branch::Preferred, &pair.chosen, &dw);
    rows.extend(rows_for(Branch::Dispreferred, &pair.rejected, &dl));
    Ok(rows)
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("branch,position,token_id,delta,u,selected,lambda\n");
    for r in rows {
        let branch = match r.branch {
            Branch::Preferred => "preferred",
            Branch::Dispreferred => "dispreferred",
        };
        writeln!(
            out,
            "{branch},{},{},{:?},{:?},{},{:?}",
            r.position, r.token_id, r.delta, r.u, r.selected as u8, r.lambda
        )
        .expect("writing to a string");
    }
    out
}

/// Writes the heatmap CSV of `pair` to `path`.
pub fn dump_token_heatmap(
    theta: &PolicyParams,
    pair: &PreferencePair,
    config: &RunConfig,
    step: u64,
    path: &Path,
) -> Result<()> {
    let rows = token_heatmap(theta, pair, config, step)?;
    std::fs::write(path, heatmap_csv(&rows)).map_err(|e| LabError::io(path, e))
}
