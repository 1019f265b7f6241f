//! CSV and JSON renderers for run outputs.

use std::fmt::Write as _;

use rifle_core::RoundMetrics;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::harness::{ExperimentResult, LedgerRow};

pub const METRICS_HEADER: &str =
    "round,global_acc,server_val_acc,asr,pfpv,comm_bytes,flagged_ids,untargeted_asr,legacy_pfpv";
pub const LEDGER_HEADER: &str = "round,client_id,kl_old,kl_new,delta_kl,weight,flagged";

fn ids(set: &std::collections::BTreeSet<usize>) -> String {
    set.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// Floats use shortest round-trip formatting, so equal values render to
/// identical bytes.
pub fn metrics_csv(rounds: &[RoundMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rounds {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{},{},{:?},{}",
            m.round,
            m.global_acc,
            m.server_val_acc,
            m.asr,
            m.pfpv,
            m.comm_bytes_per_client,
            ids(&m.flags),
            m.untargeted_asr,
            m.legacy_pfpv.map_or(String::new(), |v| format!("{v:?}")),
        );
    }
    s
}

/// Divergences and weights at 12 significant digits.
pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut s = String::from(LEDGER_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.11e},{:.11e},{:.11e},{:.11e},{}",
            r.round,
            r.client_id,
            r.kl_old,
            r.kl_new,
            r.delta_kl,
            r.weight,
            u8::from(r.flagged)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub rounds: usize,
    pub final_metrics: RoundMetrics,
    pub honest: Vec<usize>,
    pub attackers: Vec<usize>,
    pub flagged: Vec<usize>,
    pub light_warmup_acc: f64,
    pub light_final_acc: f64,
}

pub fn summary_json(config: &ExperimentConfig, result: &ExperimentResult) -> Result<String> {
    let summary = Summary {
        config: config.clone(),
        rounds: result.rounds.len(),
        final_metrics: result.final_round().clone(),
        honest: result.honest.iter().copied().collect(),
        attackers: result.attackers.iter().copied().collect(),
        flagged: result.ledger.flagged().into_iter().collect(),
        light_warmup_acc: result.light_warmup_acc,
        light_final_acc: result.light_final_acc,
    };
    Ok(serde_json::to_string_pretty(&summary)?)
}

pub fn parse_summary(json: &str) -> Result<Summary> {
    Ok(serde_json::from_str(json)?)
}
