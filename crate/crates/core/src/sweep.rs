//! Subtask-count sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::train;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub param_count: usize,
    pub final_return: f64,
    pub normalized_return: Option<f64>,
    pub switches_per_episode: f64,
}

/// Trains and evaluates one run per `k` with the same seed, writing each
/// run under `out_dir/k{k}` when given. Rows come back sorted by `k`.
pub fn sweep_k(cfg: &RunConfig, k_values: &[usize], out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::Config("sweep needs at least one k".into()));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let mut run = cfg.clone();
        run.k = k;
        let dir = out_dir.map(|d| d.join(format!("k{k}")));
        let outcome = train(&run, dir.as_deref())?;
        let last = outcome.final_record();
        rows.push(SweepRow {
            k,
            param_count: outcome.header.param_count,
            final_return: last.eval_return,
            normalized_return: last.normalized_return,
            switches_per_episode: last.switches_per_episode,
        });
    }
    Ok(rows)
}

/// Tab-separated summary table.
pub fn summary_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("k\tparams\treturn\tnormalized\tswitches\n");
    for r in rows {
        let norm = r.normalized_return.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{}\t{:.3}\n",
            r.k, r.param_count, r.final_return, norm, r.switches_per_episode
        ));
    }
    out
}
