use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ProbeName};
use crate::error::{Error, Result};
use crate::flow::{draw_sample, FlowSample};
use crate::pfd::{
    eval_flow_losses, train_step, AdamW, AdapterConfig, Objective, OptimizerConfig, PfdModel, PreparedBatch, Regime,
    StepRngs, StepSpec, TeacherUse,
};
use crate::sampler::denoise_chunk;
use crate::world::{make_dataset, success_metric, Dataset, Trajectory, TrajectoryBatch};

/// Independent stream for `(suite seed, label, seed)`.
pub fn stream(suite: u64, label: &str, seed: u64) -> ChaCha8Rng {
    // FNV-1a keeps labels stable across toolchains
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&suite.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    key[16..24].copy_from_slice(&seed.to_le_bytes());
    key[24..].copy_from_slice(b"pfd-seed");
    ChaCha8Rng::from_seed(key)
}

/// What a configuration trains and how.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub objective: Objective,
    pub regime: Regime,
    pub adapter: AdapterConfig,
}

pub fn plan(cfg: &ExperimentConfig, probe: ProbeName) -> RunPlan {
    let (k_action, k_video) = match cfg.regime {
        Regime::Partial { k_action, k_video } => (k_action, k_video),
        Regime::Full => (cfg.backbone.depth, cfg.backbone.depth),
        Regime::AdapterOnly => (0, 0),
    };
    let pfd = |regime| RunPlan {
        objective: Objective::Pfd,
        regime,
        adapter: cfg.adapter,
    };
    match probe {
        ProbeName::Baseline => RunPlan {
            objective: Objective::Student,
            regime: Regime::Full,
            adapter: cfg.adapter,
        },
        ProbeName::Pfd => pfd(cfg.regime),
        ProbeName::PureFinetune => RunPlan {
            objective: Objective::Student,
            ..pfd(cfg.regime)
        },
        ProbeName::ShuffledFuture => RunPlan {
            objective: Objective::ShuffledPfd,
            ..pfd(cfg.regime)
        },
        ProbeName::BudgetRealloc => RunPlan {
            adapter: AdapterConfig {
                width: cfg.adapter.width * 2,
                ..cfg.adapter
            },
            ..pfd(Regime::Partial { k_action, k_video: k_video / 2 })
        },
        ProbeName::AdapterOnly => pfd(Regime::AdapterOnly),
        ProbeName::HalfDepth => pfd(Regime::Partial {
            k_action: k_action / 2,
            k_video: k_video / 2,
        }),
    }
}

/// Whether the teacher forward ran and what future it saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub config: String,
    pub seed: u64,
    pub objective: Objective,
    pub regime: Regime,
    pub adapter_width: usize,
    pub teacher_forward: bool,
    pub teacher_data: TeacherUse,
    pub optimizer_steps: usize,
    pub samples_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Action flow-matching loss of the student mask without the adapter.
    pub base_loss: f64,
    /// As `base_loss` with the adapter applied when the run trains one.
    pub student_loss: f64,
    pub teacher_loss: f64,
    /// Largest |r| seen by training steps since the previous point.
    pub max_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: String,
    pub seed: u64,
    pub eval_mse: f64,
    pub success_rate: f64,
    pub final_loss: f64,
    pub trace: Vec<EvalPoint>,
    pub ledger: LedgerEntry,
}

impl RunRecord {
    /// Smallest windowed max|r| among points past step 100; 0 if none.
    pub fn late_max_r(&self) -> f64 {
        self.trace
            .iter()
            .filter(|p| p.step > 100)
            .map(|p| p.max_r)
            .reduce(f64::min)
            .unwrap_or(0.0)
    }
}

/// Everything shared by the configurations of one seed: data, the pretrained
/// starting point, and the fixed evaluation material.
pub struct SeedContext {
    pub seed: u64,
    pub data: Dataset,
    pub pretrained: PfdModel,
    monitor_batch: TrajectoryBatch,
    monitor: (PreparedBatch, FlowSample),
}

impl SeedContext {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let data = make_dataset(&cfg.world, cfg.train.dataset_size, &mut stream(cfg.seed, "data", seed))?;
        let pretrained = pretrain(cfg, &data, seed)?;
        let picks: Vec<&Trajectory> = data.eval.iter().take(cfg.train.monitor_batch).collect();
        let monitor_batch = TrajectoryBatch::from_trajectories(&cfg.world, &picks)?;
        let prepared = pretrained.prepare(&monitor_batch)?;
        let sample = draw_sample(
            &prepared.video,
            &prepared.actions,
            prepared.batch,
            &mut stream(cfg.seed, "monitor", seed),
        )?;
        Ok(Self {
            seed,
            data,
            pretrained,
            monitor_batch,
            monitor: (prepared, sample),
        })
    }

    pub fn monitor_batch(&self) -> &TrajectoryBatch {
        &self.monitor_batch
    }
}

/// Full-parameter joint pretraining on both masks, shared by every configuration.
pub fn pretrain(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<PfdModel> {
    let mut init = stream(cfg.seed, "init", seed);
    let mut model = PfdModel::new(cfg.backbone.clone(), cfg.dims(), cfg.adapter, &mut init)?;
    model.set_action_scale(cfg.action_scale())?;
    let steps = cfg.train.pretrain_steps;
    if steps == 0 {
        return Ok(model);
    }
    let spec = StepSpec {
        objective: Objective::Joint,
        trainable: Regime::Full.trainable(&model.backbone)?,
        weights: cfg.weights,
        schedule: cfg.schedule,
    };
    let opt_cfg = OptimizerConfig {
        peak_lr: cfg.train.pretrain_lr,
        ..cfg.optimizer.clone()
    };
    let mut opt = AdamW::new(opt_cfg, steps)?;
    let mut rng = stream(cfg.seed, "pretrain", seed);
    let mut shuffle = stream(cfg.seed, "pretrain/shuffle", seed);
    for _ in 0..steps {
        let batch = data.sample_batch(cfg.train.batch, &mut rng)?;
        train_step(&mut model, &mut opt, &batch, &spec, StepRngs { data: &mut rng, shuffle: &mut shuffle })?;
    }
    Ok(model)
}

/// Current-only sampling on the whole held-out split.
pub fn evaluate(cfg: &ExperimentConfig, model: &PfdModel, data: &Dataset, use_adapter: bool, seed: u64) -> Result<(f64, f64)> {
    let picks: Vec<&Trajectory> = data.eval.iter().collect();
    let batch = TrajectoryBatch::from_trajectories(&cfg.world, &picks)?;
    let mut rng = stream(cfg.seed, "eval", seed);
    let chunks = denoise_chunk(model, &batch.current_frames(), &cfg.sampler, use_adapter, &mut rng)?;
    let per = cfg.world.horizon * cfg.world.action_dim;
    let (mut mse, mut hits) = (0.0, 0usize);
    for (i, traj) in data.eval.iter().enumerate() {
        let pred = &chunks.data()[i * per..(i + 1) * per];
        let o = success_metric(pred, &traj.actions, cfg.world.action_dim, cfg.world.goal_position(traj.goal), cfg.train.success_radius);
        mse += o.mse;
        hits += usize::from(o.success);
    }
    let n = data.eval.len() as f64;
    Ok((mse / n, hits as f64 / n))
}

/// Output locations of one run.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(root: &Path, probe: ProbeName, seed: u64) -> Result<Self> {
        let dir = root.join(probe.as_str()).join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }
}

fn json_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Format {
        what: "log record",
        detail: e.to_string(),
    })?;
    writeln!(w, "{text}")?;
    Ok(())
}

/// Fine-tunes one configuration from the seed's pretrained model, then evaluates.
/// With `out`, writes `log.jsonl`, `model.ckpt` and `result.json` under
/// `out/<config>/seed-<seed>/`.
pub fn run_seed(cfg: &ExperimentConfig, probe: ProbeName, ctx: &SeedContext, out: Option<&Path>) -> Result<RunRecord> {
    let p = plan(cfg, probe);
    let label = probe.as_str();
    let mut model = ctx.pretrained.clone();
    model.reset_adapter(p.adapter, &mut stream(cfg.seed, &format!("{label}/adapter"), ctx.seed))?;
    let spec = StepSpec {
        objective: p.objective,
        trainable: p.regime.trainable(&model.backbone)?,
        weights: cfg.weights,
        schedule: cfg.schedule,
    };
    let steps = cfg.train.steps;
    let mut opt = AdamW::new(cfg.optimizer.clone(), steps)?;
    let mut rng = stream(cfg.seed, &format!("{label}/data"), ctx.seed);
    let mut shuffle = stream(cfg.seed, &format!("{label}/shuffle"), ctx.seed);

    let files = out.map(|root| RunFiles::new(root, probe, ctx.seed)).transpose()?;
    let mut log = match &files {
        Some(f) => Some(BufWriter::new(File::create(f.dir.join("log.jsonl"))?)),
        None => None,
    };

    let use_adapter = p.objective.uses_adapter();
    let (mon_prep, mon_sample) = &ctx.monitor;
    let probe_point = |model: &PfdModel, step: usize, max_r: f64| -> Result<EvalPoint> {
        let e = eval_flow_losses(model, mon_prep, mon_sample, use_adapter)?;
        Ok(EvalPoint {
            step,
            base_loss: e.base,
            student_loss: e.corrected,
            teacher_loss: e.teacher,
            max_r,
        })
    };
    let mut trace = vec![probe_point(&model, 0, 0.0)?];
    let (mut window_r, mut teacher_data, mut samples, mut final_loss) = (0.0f64, TeacherUse::None, 0usize, f64::NAN);
    for step in 1..=steps {
        let batch = ctx.data.sample_batch(cfg.train.batch, &mut rng)?;
        samples += batch.len();
        let report = train_step(&mut model, &mut opt, &batch, &spec, StepRngs { data: &mut rng, shuffle: &mut shuffle })?;
        window_r = window_r.max(report.max_r);
        teacher_data = report.teacher;
        final_loss = report.losses.total;
        if let Some(w) = log.as_mut() {
            json_line(w, &report)?;
        }
        if step % cfg.train.eval_every == 0 || step == steps {
            trace.push(probe_point(&model, step, window_r)?);
            window_r = 0.0;
        }
    }

    let (eval_mse, success_rate) = evaluate(cfg, &model, &ctx.data, use_adapter, ctx.seed)?;
    let record = RunRecord {
        config: label.to_string(),
        seed: ctx.seed,
        eval_mse,
        success_rate,
        final_loss,
        trace,
        ledger: LedgerEntry {
            config: label.to_string(),
            seed: ctx.seed,
            objective: p.objective,
            regime: p.regime,
            adapter_width: p.adapter.width,
            teacher_forward: p.objective.runs_teacher(),
            teacher_data,
            optimizer_steps: opt.steps_taken(),
            samples_seen: samples,
        },
    };
    if let (Some(f), Some(mut w)) = (files, log) {
        w.flush()?;
        model.to_checkpoint()?.save(f.dir.join("model.ckpt"))?;
        let mut r = BufWriter::new(File::create(f.dir.join("result.json"))?);
        json_line(&mut r, &record)?;
        r.flush()?;
    }
    Ok(record)
}
