use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ProbeName;
use super::run::{EvalPoint, LedgerEntry, RunRecord};
use crate::error::{Error, Result};

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn pooled_sd(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

/// One configuration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub config: String,
    pub seeds: Vec<u64>,
    pub eval_mse: Vec<f64>,
    pub success_rate: Vec<f64>,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub success_mean: f64,
    pub success_sd: f64,
    /// Per seed: smallest windowed max|r| past step 100.
    pub late_max_r: Vec<f64>,
    pub traces: Vec<Vec<EvalPoint>>,
    pub ledger: Vec<LedgerEntry>,
}

impl ProbeResult {
    pub fn from_records(config: &str, records: &[RunRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidConfig(format!("no runs for {config}")));
        }
        let eval_mse: Vec<f64> = records.iter().map(|r| r.eval_mse).collect();
        let success_rate: Vec<f64> = records.iter().map(|r| r.success_rate).collect();
        let (mse_mean, mse_sd) = mean_sd(&eval_mse);
        let (success_mean, success_sd) = mean_sd(&success_rate);
        Ok(Self {
            config: config.to_string(),
            seeds: records.iter().map(|r| r.seed).collect(),
            mse_mean,
            mse_sd,
            success_mean,
            success_sd,
            eval_mse,
            success_rate,
            late_max_r: records.iter().map(RunRecord::late_max_r).collect(),
            traces: records.iter().map(|r| r.trace.clone()).collect(),
            ledger: records.iter().map(|r| r.ledger.clone()).collect(),
        })
    }

    /// Seed-averaged trace, assuming every seed logged the same steps.
    pub fn mean_trace(&self) -> Vec<EvalPoint> {
        let n = self.traces.len() as f64;
        let first = &self.traces[0];
        (0..first.len())
            .map(|i| {
                let avg = |f: &dyn Fn(&EvalPoint) -> f64| self.traces.iter().map(|t| f(&t[i])).sum::<f64>() / n;
                EvalPoint {
                    step: first[i].step,
                    base_loss: avg(&|p| p.base_loss),
                    student_loss: avg(&|p| p.student_loss),
                    teacher_loss: avg(&|p| p.teacher_loss),
                    max_r: avg(&|p| p.max_r),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn find(results: &[ProbeResult], p: ProbeName) -> Option<&ProbeResult> {
    results.iter().find(|r| r.config == p.as_str())
}

/// Ordering checks on eval MSE; each appears only when its configurations ran.
pub fn verdicts(results: &[ProbeResult]) -> Vec<Verdict> {
    let mut out = Vec::new();
    let base = find(results, ProbeName::Baseline);
    let pfd = find(results, ProbeName::Pfd);
    if let (Some(b), Some(p)) = (base, pfd) {
        let sd = pooled_sd(b.mse_sd, p.mse_sd);
        out.push(Verdict {
            name: "pfd_beats_baseline".into(),
            pass: p.mse_mean < b.mse_mean - sd,
            detail: format!("pfd {:.6} vs baseline {:.6}, pooled sd {:.6}", p.mse_mean, b.mse_mean, sd),
        });
    }
    if let Some(p) = pfd {
        // within the PFD run: the teacher mask must fit better than the plain student path
        let pt = p.mean_trace();
        let below = pt.iter().all(|x| x.teacher_loss < x.base_loss);
        let r_live = p.late_max_r.iter().all(|&r| r > 0.0);
        let worst = pt.iter().map(|x| x.teacher_loss - x.base_loss).fold(f64::NEG_INFINITY, f64::max);
        out.push(Verdict {
            name: "teacher_below_student".into(),
            pass: below && r_live,
            detail: format!(
                "max(teacher - student) over {} checkpoints {:.6}; min late max|r| {:.3e}",
                pt.len(),
                worst,
                p.late_max_r.iter().copied().fold(f64::INFINITY, f64::min)
            ),
        });
    }
    if let (Some(b), Some(s)) = (base, find(results, ProbeName::ShuffledFuture)) {
        let sd = pooled_sd(b.mse_sd, s.mse_sd);
        out.push(Verdict {
            name: "shuffled_not_better".into(),
            pass: s.mse_mean >= b.mse_mean - sd,
            detail: format!("shuffled {:.6} vs baseline {:.6}, pooled sd {:.6}", s.mse_mean, b.mse_mean, sd),
        });
    }
    if let (Some(p), Some(f)) = (pfd, find(results, ProbeName::PureFinetune)) {
        out.push(Verdict {
            name: "pure_finetune_not_better".into(),
            pass: f.mse_mean >= p.mse_mean,
            detail: format!("pure finetune {:.6} vs pfd {:.6}", f.mse_mean, p.mse_mean),
        });
    }
    out
}

pub fn render_csv(results: &[ProbeResult]) -> String {
    let mut s = String::from("config,seed,eval_mse,success_rate\n");
    for r in results {
        for i in 0..r.seeds.len() {
            // shortest round-trip formatting so the summary recomputes exactly
            writeln!(s, "{},{},{},{}", r.config, r.seeds[i], r.eval_mse[i], r.success_rate[i]).expect("string write");
        }
    }
    s
}

pub fn render_summary(results: &[ProbeResult]) -> String {
    let mut s = String::new();
    for r in results {
        writeln!(s, "[{}]", r.config).expect("string write");
        writeln!(s, "seeds = {}", r.seeds.len()).expect("string write");
        writeln!(s, "eval_mse = {} +- {}", r.mse_mean, r.mse_sd).expect("string write");
        writeln!(s, "success_rate = {} +- {}", r.success_mean, r.success_sd).expect("string write");
        let late = r.late_max_r.iter().copied().fold(f64::INFINITY, f64::min);
        writeln!(s, "late_max_r_min = {late}").expect("string write");
        if let Some(l) = r.ledger.first() {
            writeln!(
                s,
                "teacher_forward = {}\nteacher_data = {:?}\noptimizer_steps = {}\nsamples_seen = {}",
                l.teacher_forward, l.teacher_data, l.optimizer_steps, l.samples_seen
            )
            .expect("string write");
        }
        s.push('\n');
    }
    s.push_str("[verdicts]\n");
    for v in verdicts(results) {
        writeln!(s, "{} = {} ({})", v.name, if v.pass { "PASS" } else { "FAIL" }, v.detail).expect("string write");
    }
    s
}

/// Writes `results.csv`, `summary.txt` and `ledger.jsonl` into `dir`.
pub fn emit_report(results: &[ProbeResult], dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("nothing to report".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), render_csv(results))?;
    fs::write(dir.join("summary.txt"), render_summary(results))?;
    let mut ledger = String::new();
    for entry in results.iter().flat_map(|r| &r.ledger) {
        let line = serde_json::to_string(entry).map_err(|e| Error::Format {
            what: "ledger",
            detail: e.to_string(),
        })?;
        ledger.push_str(&line);
        ledger.push('\n');
    }
    fs::write(dir.join("ledger.jsonl"), ledger)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfd::{Objective, Regime, TeacherUse};

    fn record(config: &str, seed: u64, mse: f64, success: f64) -> RunRecord {
        RunRecord {
            config: config.into(),
            seed,
            eval_mse: mse,
            success_rate: success,
            final_loss: 1.0,
            trace: vec![
                EvalPoint { step: 0, base_loss: 2.0, student_loss: 2.0, teacher_loss: 1.0, max_r: 0.0 },
                EvalPoint { step: 200, base_loss: 1.5, student_loss: 1.5, teacher_loss: 0.5, max_r: 0.1 },
            ],
            ledger: LedgerEntry {
                config: config.into(),
                seed,
                objective: Objective::Pfd,
                regime: Regime::AdapterOnly,
                adapter_width: 4,
                teacher_forward: true,
                teacher_data: TeacherUse::TrueFuture,
                optimizer_steps: 10,
                samples_seen: 40,
            },
        }
    }

    fn results() -> Vec<ProbeResult> {
        let mk = |name: &str, mses: [f64; 3]| {
            let recs: Vec<RunRecord> = mses.iter().enumerate().map(|(i, &m)| record(name, i as u64, m, 0.1 * m)).collect();
            ProbeResult::from_records(name, &recs).unwrap()
        };
        vec![
            mk("baseline", [1.0, 1.1, 0.9]),
            mk("pfd", [0.5, 0.6, 0.4]),
            mk("shuffled_future", [1.05, 1.0, 1.1]),
            mk("pure_finetune", [0.8, 0.9, 0.7]),
        ]
    }

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_rows_and_recomputed_means() {
        let res = results();
        let csv = render_csv(&res);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 4 * 3);
        for r in &res {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|l| l.starts_with(&format!("{},", r.config)))
                .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
                .collect();
            assert_eq!(mean_sd(&vals).0, r.mse_mean);
        }
    }

    #[test]
    fn verdict_lines_present() {
        let summary = render_summary(&results());
        for name in ["pfd_beats_baseline", "teacher_below_student", "shuffled_not_better", "pure_finetune_not_better"] {
            assert!(summary.contains(&format!("{name} = PASS")), "{summary}");
        }
        assert!(summary.contains("eval_mse = "));
    }

    #[test]
    fn failing_orderings_are_reported() {
        let mut res = results();
        res[1] = ProbeResult::from_records("pfd", &[record("pfd", 0, 2.0, 0.0)]).unwrap();
        let v = verdicts(&res);
        assert!(!v.iter().find(|v| v.name == "pfd_beats_baseline").unwrap().pass);
        assert!(!v.iter().find(|v| v.name == "pure_finetune_not_better").unwrap().pass);
    }

    #[test]
    fn emit_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&results(), dir.path()).unwrap();
        for f in ["results.csv", "summary.txt", "ledger.jsonl"] {
            assert!(dir.path().join(f).exists());
        }
        assert_eq!(fs::read_to_string(dir.path().join("ledger.jsonl")).unwrap().lines().count(), 12);
        assert!(emit_report(&[], dir.path()).is_err());
    }
}
