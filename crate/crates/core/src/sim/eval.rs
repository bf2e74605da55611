use serde::{Deserialize, Serialize};

use super::rollout::{rollout, Policy, RolloutReport};
use super::scenario::{PostureProfile, Scenario};
use super::SimError;
use crate::diffusion::GuidanceConfig;

pub const METRICS_HEADER: &str = "variant,scenario,trials,msr,tci_mean,tci_sd,mra_mean,gb_mean";

/// One (variant, scenario) cell of an evaluation table.
pub struct SuiteEntry<'a> {
    pub variant: String,
    pub scenario: &'a Scenario,
    pub policy: Policy<'a>,
    pub guidance: Option<(&'a GuidanceConfig, &'a dyn PostureProfile)>,
    pub score: &'a dyn PostureProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub scenario: String,
    pub trials: usize,
    /// Success rate in `[0, 1]`.
    pub msr: f64,
    pub tci_mean: f64,
    pub tci_sd: f64,
    pub mra_mean: f64,
    pub gb_mean: f64,
    #[serde(skip)]
    pub reports: Vec<RolloutReport>,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Runs every entry over the same seed list, in seed order.
pub fn evaluate_suite(
    entries: &[SuiteEntry<'_>],
    seeds: &[u64],
) -> Result<Vec<MetricsRow>, SimError> {
    if seeds.is_empty() {
        return Err(SimError::Scenario(
            "evaluation needs at least one trial".into(),
        ));
    }
    entries
        .iter()
        .map(|e| {
            let reports = seeds
                .iter()
                .map(|&s| rollout(&e.policy, e.scenario, e.guidance, e.score, s))
                .collect::<Result<Vec<_>, _>>()?;
            let tci: Vec<f64> = reports.iter().map(RolloutReport::mean_tci).collect();
            let (tci_mean, tci_sd) = mean_sd(&tci);
            let n = reports.len() as f64;
            Ok(MetricsRow {
                variant: e.variant.clone(),
                scenario: e.scenario.id.clone(),
                trials: reports.len(),
                msr: reports.iter().filter(|r| r.success).count() as f64 / n,
                tci_mean,
                tci_sd,
                mra_mean: reports.iter().map(|r| r.final_mra).sum::<f64>() / n,
                gb_mean: reports.iter().map(RolloutReport::mean_g_b).sum::<f64>() / n,
                reports,
            })
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant, r.scenario, r.trials, r.msr, r.tci_mean, r.tci_sd, r.mra_mean, r.gb_mean
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::expert::scripted_expert;

    #[test]
    fn replay_suite_has_full_success() {
        let s = crate::sim::scenario::tests::wipe();
        let profile = s.posture_profile();
        let demos: Vec<_> = (0..3)
            .map(|seed| scripted_expert(&s, &profile, seed).unwrap())
            .collect();
        let mut rows = Vec::new();
        for (seed, d) in demos.iter().enumerate() {
            let entry = SuiteEntry {
                variant: "expert".into(),
                scenario: &s,
                policy: Policy::Replay(d),
                guidance: None,
                score: &profile,
            };
            rows.extend(evaluate_suite(&[entry], &[seed as u64]).unwrap());
        }
        assert_eq!(rows.len(), 3);
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }
}
