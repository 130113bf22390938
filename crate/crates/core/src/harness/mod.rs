//! Seeded training runs, the probe suite and report emission.

mod config;
mod report;
mod run;

use std::path::Path;

pub use config::{ExperimentConfig, Preset, ProbeName, TrainConfig};
pub use report::{emit_report, mean_sd, pooled_sd, render_csv, render_summary, verdicts, ProbeResult, Verdict};
pub use run::{evaluate, plan, pretrain, run_seed, stream, EvalPoint, LedgerEntry, RunPlan, RunRecord, SeedContext};

/// Trains `cfg.probe` on every seed.
pub fn run_training(cfg: &ExperimentConfig, out: Option<&Path>) -> crate::Result<ProbeResult> {
    cfg.validate()?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::new(cfg, seed)?;
        records.push(run_seed(cfg, cfg.probe, &ctx, out)?);
    }
    ProbeResult::from_records(cfg.probe.as_str(), &records)
}

/// Runs every selected probe on every seed. Each seed's data and pretrained
/// model are built once and shared; each run draws its own streams.
pub fn run_probe_suite(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&RunRecord),
) -> crate::Result<Vec<ProbeResult>> {
    cfg.validate()?;
    let mut by_probe: Vec<Vec<RunRecord>> = vec![Vec::new(); cfg.probes.len()];
    for &seed in &cfg.seeds {
        let ctx = SeedContext::new(cfg, seed)?;
        for (i, &probe) in cfg.probes.iter().enumerate() {
            let record = run_seed(cfg, probe, &ctx, out)?;
            progress(&record);
            by_probe[i].push(record);
        }
    }
    let results = cfg
        .probes
        .iter()
        .zip(&by_probe)
        .map(|(p, recs)| ProbeResult::from_records(p.as_str(), recs))
        .collect::<crate::Result<Vec<_>>>()?;
    if let Some(dir) = out {
        emit_report(&results, dir)?;
    }
    Ok(results)
}
