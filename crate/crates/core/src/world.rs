//! Hidden-goal reaching world.
//!
//! Each trajectory picks one of `goals` targets on the unit circle. Frame 1
//! carries a weak goal cue of amplitude `cue`, frames from `reveal` on carry
//! the goal code at unit amplitude, and frames in between ramp linearly. The
//! action chunk walks from the origin to the goal in `horizon` equal steps.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// The code book is a property of the world's geometry, not of a run.
const CODEBOOK_SEED: u64 = 0x5eed_c0de;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub frame_dim: usize,
    pub frames: usize,
    /// Action-chunk length H.
    pub horizon: usize,
    pub action_dim: usize,
    pub goals: usize,
    /// Goal amplitude in frame 1 (alpha).
    pub cue: f64,
    /// First frame (1-based) carrying the goal at full amplitude.
    pub reveal: usize,
    /// Observation noise sigma.
    pub noise: f64,
    /// Scale of the per-trajectory goal-independent background.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_dim: 16,
            frames: 4,
            horizon: 8,
            action_dim: 2,
            goals: 4,
            cue: 0.25,
            reveal: 3,
            noise: 0.05,
            clutter: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.frames < 2 || self.reveal < 2 || self.reveal > self.frames {
            return fail(format!("need 2 <= reveal ({}) <= frames ({})", self.reveal, self.frames));
        }
        if self.goals < 2 || self.goals >= self.frame_dim {
            return fail(format!("need 2 <= goals ({}) < frame_dim ({})", self.goals, self.frame_dim));
        }
        if self.action_dim < 2 || self.horizon == 0 {
            return fail("action_dim must be >= 2 and horizon positive".into());
        }
        if !(self.cue >= 0.0 && self.noise >= 0.0 && self.clutter >= 0.0) {
            return fail("cue, noise and clutter must be non-negative".into());
        }
        Ok(())
    }

    pub fn goal_position(&self, goal: usize) -> [f64; 2] {
        let angle = 2.0 * PI * goal as f64 / self.goals as f64;
        [angle.cos(), angle.sin()]
    }

    /// Goal amplitude in frame `t` (1-based).
    pub fn amplitude(&self, t: usize) -> f64 {
        if t <= 1 {
            self.cue
        } else if t >= self.reveal {
            1.0
        } else {
            let f = (t - 1) as f64 / (self.reveal - 1) as f64;
            self.cue + (1.0 - self.cue) * f
        }
    }
}

/// A fixed `frame_dim x frame_dim` orthonormal basis; the first `goals` rows
/// are goal codes and the rest span the clutter subspace.
#[derive(Clone, Debug)]
pub struct CodeBook {
    basis: Vec<Vec<f64>>,
    goals: usize,
}

impl CodeBook {
    pub fn new(cfg: &WorldConfig) -> Self {
        let d = cfg.frame_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(CODEBOOK_SEED);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            // two Gram-Schmidt passes for numerical orthogonality
            for _ in 0..2 {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Self { basis, goals: cfg.goals }
    }

    pub fn code(&self, goal: usize) -> &[f64] {
        &self.basis[goal]
    }

    fn clutter_dirs(&self) -> &[Vec<f64>] {
        &self.basis[self.goals..]
    }

    /// Nearest goal code to `frame` in Euclidean distance.
    pub fn decode(&self, frame: &[f64]) -> usize {
        (0..self.goals)
            .map(|g| {
                let dist: f64 = frame.iter().zip(self.code(g)).map(|(x, c)| (x - c).powi(2)).sum();
                (g, dist)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(g, _)| g)
            .expect("at least two goals")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `frames x frame_dim`, row-major.
    pub frames: Vec<f64>,
    /// `horizon x action_dim`, row-major.
    pub actions: Vec<f64>,
    pub goal: usize,
}

impl Trajectory {
    pub fn frame(&self, cfg: &WorldConfig, t: usize) -> &[f64] {
        &self.frames[t * cfg.frame_dim..(t + 1) * cfg.frame_dim]
    }
}

pub fn generate_trajectory(cfg: &WorldConfig, book: &CodeBook, rng: &mut impl Rng) -> Trajectory {
    let d = cfg.frame_dim;
    let goal = rng.gen_range(0..cfg.goals);
    let mut base = vec![0.0; d];
    for dir in book.clutter_dirs() {
        let c: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.clutter;
        base.iter_mut().zip(dir).for_each(|(b, u)| *b += c * u);
    }
    let code = book.code(goal);
    let mut frames = Vec::with_capacity(cfg.frames * d);
    for t in 1..=cfg.frames {
        let amp = cfg.amplitude(t);
        for j in 0..d {
            let n: f64 = rng.sample(StandardNormal);
            frames.push(base[j] + amp * code[j] + cfg.noise * n);
        }
    }
    let pos = cfg.goal_position(goal);
    let mut actions = vec![0.0; cfg.horizon * cfg.action_dim];
    for h in 0..cfg.horizon {
        actions[h * cfg.action_dim] = pos[0] / cfg.horizon as f64;
        actions[h * cfg.action_dim + 1] = pos[1] / cfg.horizon as f64;
    }
    Trajectory { frames, actions, goal }
}

/// Training tensors for a set of trajectories, samples stacked along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    /// `[batch * frames, frame_dim]`
    pub frames: Tensor,
    /// `[batch * horizon, action_dim]`
    pub actions: Tensor,
    pub goals: Vec<usize>,
    pub frames_per_sample: usize,
}

impl TrajectoryBatch {
    pub fn from_trajectories(cfg: &WorldConfig, trajs: &[&Trajectory]) -> Result<Self> {
        let b = trajs.len();
        let mut frames = Vec::with_capacity(b * cfg.frames * cfg.frame_dim);
        let mut actions = Vec::with_capacity(b * cfg.horizon * cfg.action_dim);
        for t in trajs {
            frames.extend_from_slice(&t.frames);
            actions.extend_from_slice(&t.actions);
        }
        Ok(Self {
            frames: Tensor::matrix(b * cfg.frames, cfg.frame_dim, frames)?,
            actions: Tensor::matrix(b * cfg.horizon, cfg.action_dim, actions)?,
            goals: trajs.iter().map(|t| t.goal).collect(),
            frames_per_sample: cfg.frames,
        })
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    /// All frames cut into `per_frame` tokens each: `[batch * frames * per_frame, frame_dim / per_frame]`.
    pub fn video_tokens(&self, per_frame: usize) -> Result<Tensor> {
        let d = self.frames.cols();
        self.frames.clone().reshape(vec![self.frames.rows() * per_frame, d / per_frame])
    }

    /// Frame-1 rows of each sample, `[batch, frame_dim]`.
    pub fn current_frames(&self) -> Tensor {
        let d = self.frames.cols();
        let mut out = Vec::with_capacity(self.len() * d);
        for b in 0..self.len() {
            out.extend_from_slice(self.frames.row(b * self.frames_per_sample));
        }
        Tensor::matrix(self.len(), d, out).expect("sized")
    }
}

/// Replaces frames 2..T of every sample with those of another sample, using a
/// random cyclic permutation so no sample keeps its own future.
pub fn shuffle_future(batch: &TrajectoryBatch, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    // Sattolo's algorithm
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    let t = batch.frames_per_sample;
    let d = batch.frames.cols();
    let mut out = batch.clone();
    let src = batch.frames.data();
    let dst = out.frames.data_mut();
    for (b, &from) in perm.iter().enumerate() {
        let to_start = (b * t + 1) * d;
        let from_start = (from * t + 1) * d;
        let len = (t - 1) * d;
        dst[to_start..to_start + len].copy_from_slice(&src[from_start..from_start + len]);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub cfg: WorldConfig,
    pub train: Vec<Trajectory>,
    pub eval: Vec<Trajectory>,
}

/// `n` trajectories; the first 90% by index train, the rest evaluate.
pub fn make_dataset(cfg: &WorldConfig, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::InvalidConfig(format!("dataset needs at least 2 trajectories, got {n}")));
    }
    let book = CodeBook::new(cfg);
    let mut all: Vec<Trajectory> = (0..n).map(|_| generate_trajectory(cfg, &book, rng)).collect();
    let n_train = (n * 9 / 10).clamp(1, n - 1);
    let eval = all.split_off(n_train);
    Ok(Dataset {
        cfg: cfg.clone(),
        train: all,
        eval,
    })
}

impl Dataset {
    /// `size` distinct training trajectories.
    pub fn sample_batch(&self, size: usize, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
        if size == 0 || size > self.train.len() {
            return Err(Error::InvalidConfig(format!("batch {size} from {} trajectories", self.train.len())));
        }
        let picks: Vec<&Trajectory> = self.train.choose_multiple(rng, size).collect();
        TrajectoryBatch::from_trajectories(&self.cfg, &picks)
    }

    const MAGIC: &'static str = "pfd-dataset 1";

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let cfg = serde_json::to_string(&self.cfg).map_err(|e| Error::Format {
            what: "dataset",
            detail: e.to_string(),
        })?;
        write!(
            w,
            "{}\nconfig={cfg}\ntrain={}\neval={}\nend\n",
            Self::MAGIC,
            self.train.len(),
            self.eval.len()
        )?;
        for t in self.train.iter().chain(&self.eval) {
            w.write_all(&(t.goal as f64).to_le_bytes())?;
            for v in t.frames.iter().chain(&t.actions) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let bad = |d: String| Error::Format { what: "dataset", detail: d };
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of header".into()));
            }
            let line = line.trim_end().to_string();
            if line == "end" {
                break;
            }
            header.push(line);
        }
        if header.first().map(String::as_str) != Some(Self::MAGIC) {
            return Err(bad("bad magic".into()));
        }
        let field = |key: &str| -> Result<&str> {
            header
                .iter()
                .find_map(|l| l.strip_prefix(key).and_then(|s| s.strip_prefix('=')))
                .ok_or_else(|| bad(format!("missing {key}")))
        };
        let cfg: WorldConfig = serde_json::from_str(field("config")?).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        let n_train: usize = field("train")?.parse().map_err(|_| bad("bad train count".into()))?;
        let n_eval: usize = field("eval")?.parse().map_err(|_| bad("bad eval count".into()))?;
        let per = 1 + cfg.frames * cfg.frame_dim + cfg.horizon * cfg.action_dim;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != (n_train + n_eval) * per * 8 {
            return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), (n_train + n_eval) * per * 8)));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let fd = cfg.frames * cfg.frame_dim;
        let mut trajs: Vec<Trajectory> = values
            .chunks_exact(per)
            .map(|c| Trajectory {
                goal: c[0] as usize,
                frames: c[1..1 + fd].to_vec(),
                actions: c[1 + fd..].to_vec(),
            })
            .collect();
        let eval = trajs.split_off(n_train);
        Ok(Self { cfg, train: trajs, eval })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub success: bool,
    pub mse: f64,
}

/// Success iff the endpoint reached by summing the predicted steps lies within
/// `radius` of the goal; `mse` is against the ground-truth chunk.
pub fn success_metric(predicted: &[f64], truth: &[f64], action_dim: usize, goal: [f64; 2], radius: f64) -> Outcome {
    assert_eq!(predicted.len(), truth.len(), "chunk sizes differ");
    let mut end = [0.0; 2];
    for step in predicted.chunks_exact(action_dim) {
        end[0] += step[0];
        end[1] += step[1];
    }
    let dist = ((end[0] - goal[0]).powi(2) + (end[1] - goal[1]).powi(2)).sqrt();
    let mse = predicted.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64;
    Outcome {
        success: dist <= radius,
        mse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn decode_accuracy(cfg: &WorldConfig, frame_index: usize, n: usize, seed: u64) -> f64 {
        let book = CodeBook::new(cfg);
        let mut r = rng(seed);
        let hits = (0..n)
            .filter(|_| {
                let t = generate_trajectory(cfg, &book, &mut r);
                book.decode(t.frame(cfg, frame_index)) == t.goal
            })
            .count();
        hits as f64 / n as f64
    }

    #[test]
    fn codebook_is_orthonormal() {
        let cfg = WorldConfig::default();
        let book = CodeBook::new(&cfg);
        for i in 0..cfg.frame_dim {
            for j in 0..cfg.frame_dim {
                let dot: f64 = book.basis[i].iter().zip(&book.basis[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn last_frame_decodes_exactly() {
        let cfg = WorldConfig { noise: 0.1, ..WorldConfig::default() };
        assert_eq!(decode_accuracy(&cfg, cfg.frames - 1, 1000, 1), 1.0);
    }

    #[test]
    fn absent_cue_is_chance() {
        let cfg = WorldConfig { cue: 0.0, ..WorldConfig::default() };
        let acc = decode_accuracy(&cfg, 0, 1000, 2);
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn decodability_grows_with_cue() {
        let mut prev = 0.0;
        for cue in [0.0, 0.1, 0.3, 1.0] {
            let cfg = WorldConfig { cue, noise: 0.05, ..WorldConfig::default() };
            let acc = decode_accuracy(&cfg, 0, 1000, 3);
            assert!(acc + 0.02 >= prev, "cue {cue}: {acc} < {prev}");
            prev = acc;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn actions_reach_goal() {
        let cfg = WorldConfig::default();
        let book = CodeBook::new(&cfg);
        let mut r = rng(4);
        for _ in 0..20 {
            let t = generate_trajectory(&cfg, &book, &mut r);
            let goal = cfg.goal_position(t.goal);
            let out = success_metric(&t.actions, &t.actions, cfg.action_dim, goal, 1e-12);
            assert!(out.success);
            assert_eq!(out.mse, 0.0);
        }
    }

    #[test]
    fn zero_chunk_fails() {
        let cfg = WorldConfig::default();
        let truth = vec![0.1; cfg.horizon * 2];
        let out = success_metric(&vec![0.0; cfg.horizon * 2], &truth, 2, cfg.goal_position(1), 0.9);
        assert!(!out.success);
    }

    #[test]
    fn random_chunks_rarely_succeed() {
        let cfg = WorldConfig::default();
        let mut r = rng(5);
        let hits = (0..1000)
            .filter(|_| {
                let chunk: Vec<f64> = (0..cfg.horizon * 2).map(|_| r.gen_range(-0.25..0.25)).collect();
                let goal = cfg.goal_position(r.gen_range(0..cfg.goals));
                success_metric(&chunk, &chunk, 2, goal, 0.2).success
            })
            .count();
        assert!((hits as f64) / 1000.0 < 0.15, "{hits}");
    }

    #[test]
    fn dataset_is_deterministic_and_split() {
        let cfg = WorldConfig::default();
        let a = make_dataset(&cfg, 1000, &mut rng(6)).unwrap();
        let b = make_dataset(&cfg, 1000, &mut rng(6)).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(a.train.len(), 900);
        assert_eq!(a.eval.len(), 100);
        for g in 0..cfg.goals {
            let train = a.train.iter().filter(|t| t.goal == g).count();
            let all = train + a.eval.iter().filter(|t| t.goal == g).count();
            assert!((train as i64 - 225).abs() <= 40, "goal {g}: {train}");
            assert!((all as i64 - 250).abs() <= 40, "goal {g}: {all}");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = WorldConfig { seed: 9, ..WorldConfig::default() };
        let ds = make_dataset(&cfg, 20, &mut rng(7)).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..]).unwrap();
        assert_eq!(back.cfg, ds.cfg);
        assert_eq!(back.train, ds.train);
        assert_eq!(back.eval, ds.eval);
        buf.pop();
        assert!(Dataset::read_from(&buf[..]).is_err());
    }

    #[test]
    fn shuffle_future_is_a_derangement() {
        let cfg = WorldConfig::default();
        let ds = make_dataset(&cfg, 40, &mut rng(8)).unwrap();
        let mut r = rng(9);
        for size in [2, 3, 8] {
            let batch = ds.sample_batch(size, &mut r).unwrap();
            let shuffled = shuffle_future(&batch, &mut r).unwrap();
            let d = cfg.frame_dim;
            let t = cfg.frames;
            let future = |b: &TrajectoryBatch, i: usize| b.frames.data()[(i * t + 1) * d..(i + 1) * t * d].to_vec();
            let mut before: Vec<Vec<f64>> = (0..size).map(|i| future(&batch, i)).collect();
            let mut after: Vec<Vec<f64>> = (0..size).map(|i| future(&shuffled, i)).collect();
            for i in 0..size {
                assert_eq!(batch.frames.row(i * t), shuffled.frames.row(i * t));
                assert_ne!(future(&batch, i), future(&shuffled, i));
            }
            assert!(batch.actions.bitwise_eq(&shuffled.actions));
            assert_eq!(batch.goals, shuffled.goals);
            before.sort_by(|a, b| a.partial_cmp(b).unwrap());
            after.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(before, after);
        }
        let one = ds.sample_batch(1, &mut r).unwrap();
        assert!(matches!(shuffle_future(&one, &mut r), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn token_views() {
        let cfg = WorldConfig::default();
        let ds = make_dataset(&cfg, 10, &mut rng(10)).unwrap();
        let batch = TrajectoryBatch::from_trajectories(&cfg, &[&ds.train[0], &ds.train[1]]).unwrap();
        let tokens = batch.video_tokens(4).unwrap();
        assert_eq!(tokens.shape(), &[2 * 4 * 4, 4]);
        assert_eq!(tokens.row(4 * 4), &ds.train[1].frames[..4]);
        let cur = batch.current_frames();
        assert_eq!(cur.row(1), ds.train[1].frame(&cfg, 0));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            WorldConfig { reveal: 1, ..WorldConfig::default() },
            WorldConfig { reveal: 5, ..WorldConfig::default() },
            WorldConfig { goals: 1, ..WorldConfig::default() },
            WorldConfig { cue: -0.1, ..WorldConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
