//! Two-expert transformer: video tokens run through video-expert blocks,
//! action tokens through action-expert blocks, and both meet in one joint
//! masked attention per depth level.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::{JointMask, TokenLayout};
use crate::autodiff::{linear_uniform_init, sinusoid_values, Bound, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Blocks per expert.
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Video tokens per frame (V); each frame is cut into this many equal slices.
    pub video_tokens_per_frame: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            d_model: 64,
            heads: 2,
            ff_hidden: 128,
            video_tokens_per_frame: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d_model == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(Error::InvalidConfig("backbone sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidConfig("d_model must be even for timestep embeddings".into()));
        }
        Ok(())
    }
}

/// Data-side sizes the backbone is built against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub frames: usize,
    pub frame_dim: usize,
    pub action_tokens: usize,
    pub action_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Expert {
    Video,
    Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub expert: Expert,
    pub index: usize,
}

/// Backbone parameters permitted to update. Heads and embedders are only
/// included by [`TrainableSet::everything`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainableSet {
    pub blocks: BTreeSet<BlockId>,
    pub shared: bool,
}

impl TrainableSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && !self.shared
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ids: Vec<ParamId>,
}

impl Block {
    fn register(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let first = store.len();
        let ln_attn = LayerNorm::register(store, &format!("{name}.ln_attn"), d);
        let q = Linear::register(store, &format!("{name}.q"), linear_uniform_init(d, d, rng));
        let k = Linear::register(store, &format!("{name}.k"), linear_uniform_init(d, d, rng));
        let v = Linear::register(store, &format!("{name}.v"), linear_uniform_init(d, d, rng));
        let o = Linear::register(store, &format!("{name}.o"), linear_uniform_init(d, d, rng));
        let ln_ff = LayerNorm::register(store, &format!("{name}.ln_ff"), d);
        let ff_in = Linear::register(store, &format!("{name}.ff_in"), linear_uniform_init(d, cfg.ff_hidden, rng));
        let ff_out = Linear::register(store, &format!("{name}.ff_out"), linear_uniform_init(cfg.ff_hidden, d, rng));
        let ids = store.ids().skip(first).collect();
        Self {
            ln_attn,
            q,
            k,
            v,
            o,
            ln_ff,
            ff_in,
            ff_out,
            ids,
        }
    }

    fn feed_forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let x = self.ln_ff.forward(tape, p, h)?;
        let x = self.ff_in.forward(tape, p, x)?;
        let x = tape.silu(x)?;
        let x = self.ff_out.forward(tape, p, x)?;
        tape.add(h, x)
    }
}

#[derive(Clone, Debug)]
struct StreamEmbed {
    input: Linear,
    pos: ParamId,
    time: Linear,
}

impl StreamEmbed {
    fn register(store: &mut ParamStore, name: &str, d: usize, in_dim: usize, positions: usize, rng: &mut impl Rng) -> Self {
        let input = Linear::register(store, &format!("{name}.input"), linear_uniform_init(in_dim, d, rng));
        let pos_vals = (0..positions * d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let pos = store.add(format!("{name}.pos"), Tensor::matrix(positions, d, pos_vals).expect("sized"));
        let time = Linear::register(store, &format!("{name}.time"), linear_uniform_init(d, d, rng));
        Self { input, pos, time }
    }
}

#[derive(Clone, Debug)]
struct Head {
    ln: LayerNorm,
    out: Linear,
}

/// Backbone parameters (θ) plus the handles to address them.
#[derive(Clone, Debug)]
pub struct MotModel {
    cfg: BackboneConfig,
    dims: ModelDims,
    layout: TokenLayout,
    store: ParamStore,
    video_embed: StreamEmbed,
    action_embed: StreamEmbed,
    current_cond: Linear,
    video_blocks: Vec<Block>,
    action_blocks: Vec<Block>,
    video_head: Head,
    action_head: Head,
}

/// Batched forward inputs, `batch` samples stacked along rows.
#[derive(Clone, Copy, Debug)]
pub struct MotInput<'a> {
    /// Corrupted video tokens `[batch * frames * V, token_dim]`; `frames` may be
    /// smaller than the model's frame count (current frame only at inference).
    pub video: &'a Tensor,
    /// Corrupted action tokens `[batch * H, action_dim]`.
    pub actions: &'a Tensor,
    /// Clean current-frame tokens `[batch * V, token_dim]`.
    pub current_clean: &'a Tensor,
    pub tau_video: &'a [f64],
    pub tau_action: &'a [f64],
}

#[derive(Clone, Copy, Debug)]
pub struct MotOutput {
    pub u_video: Var,
    pub v_act: Var,
}

impl MotModel {
    pub fn new(cfg: BackboneConfig, dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if !dims.frame_dim.is_multiple_of(cfg.video_tokens_per_frame) {
            return Err(Error::InvalidConfig(format!(
                "frame dim {} not divisible into {} video tokens",
                dims.frame_dim, cfg.video_tokens_per_frame
            )));
        }
        let layout = TokenLayout::new(dims.frames, cfg.video_tokens_per_frame, dims.action_tokens, cfg.d_model)?;
        let d = cfg.d_model;
        let token_dim = dims.frame_dim / cfg.video_tokens_per_frame;
        let mut store = ParamStore::new();

        let video_embed = StreamEmbed::register(&mut store, "embed.video", d, token_dim, layout.video_tokens(), rng);
        let action_embed = StreamEmbed::register(&mut store, "embed.action", d, dims.action_dim, dims.action_tokens, rng);
        let current_cond = Linear::register(&mut store, "embed.current", linear_uniform_init(token_dim, d, rng));

        let mut video_blocks = Vec::with_capacity(cfg.depth);
        let mut action_blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            video_blocks.push(Block::register(&mut store, &format!("video.{i}"), &cfg, rng));
            action_blocks.push(Block::register(&mut store, &format!("action.{i}"), &cfg, rng));
        }
        let video_head = Head {
            ln: LayerNorm::register(&mut store, "head.video.ln", d),
            out: Linear::register(&mut store, "head.video.out", linear_uniform_init(d, token_dim, rng)),
        };
        let action_head = Head {
            ln: LayerNorm::register(&mut store, "head.action.ln", d),
            out: Linear::register(&mut store, "head.action.out", linear_uniform_init(d, dims.action_dim, rng)),
        };
        Ok(Self {
            cfg,
            dims,
            layout,
            store,
            video_embed,
            action_embed,
            current_cond,
            video_blocks,
            action_blocks,
            video_head,
            action_head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn token_dim(&self) -> usize {
        self.dims.frame_dim / self.cfg.video_tokens_per_frame
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        (0..self.cfg.depth).flat_map(|index| {
            [Expert::Video, Expert::Action]
                .into_iter()
                .map(move |expert| BlockId { expert, index })
        })
    }

    pub fn block_params(&self, id: BlockId) -> &[ParamId] {
        match id.expert {
            Expert::Video => &self.video_blocks[id.index].ids,
            Expert::Action => &self.action_blocks[id.index].ids,
        }
    }

    /// The block a parameter belongs to, or `None` for heads and embedders.
    pub fn owner(&self, param: ParamId) -> Option<BlockId> {
        self.blocks().find(|b| self.block_params(*b).contains(&param))
    }

    pub fn everything(&self) -> TrainableSet {
        TrainableSet {
            blocks: self.blocks().collect(),
            shared: true,
        }
    }

    /// Per-parameter trainability flags for `set`, indexed like the store.
    pub fn trainable_flags(&self, set: &TrainableSet) -> Vec<bool> {
        let mut flags = vec![set.shared; self.store.len()];
        for b in self.blocks() {
            let on = set.blocks.contains(&b);
            for p in self.block_params(b) {
                flags[p.index()] = on;
            }
        }
        flags
    }

    /// Runs both streams under `mask`. Parameters come from `p`, which must
    /// have been bound from this model's store.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: MotInput<'_>, mask: &JointMask) -> Result<MotOutput> {
        let batch = input.tau_video.len();
        let v = self.cfg.video_tokens_per_frame;
        let h = self.dims.action_tokens;
        let td = self.token_dim();
        if batch == 0 || input.tau_action.len() != batch {
            return Err(shape_err("mot_forward", "timestep arrays must be non-empty and equal length"));
        }
        for &tau in input.tau_video.iter().chain(input.tau_action) {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::TimestepOutOfRange(tau));
            }
        }
        let video_rows = input.video.rows();
        if input.video.cols() != td || !video_rows.is_multiple_of(batch * v) {
            return Err(shape_err("mot_forward", format!("video tokens {:?}", input.video.shape())));
        }
        let frames = video_rows / (batch * v);
        if frames == 0 || frames > self.dims.frames {
            return Err(shape_err("mot_forward", format!("{frames} frames for a {}-frame model", self.dims.frames)));
        }
        if input.actions.shape() != [batch * h, self.dims.action_dim] {
            return Err(shape_err("mot_forward", format!("action tokens {:?}", input.actions.shape())));
        }
        if input.current_clean.shape() != [batch * v, td] {
            return Err(shape_err("mot_forward", format!("clean frame {:?}", input.current_clean.shape())));
        }
        let layout = mask.layout();
        if layout.frames != frames || layout.video_per_frame != v || layout.action_tokens != h {
            return Err(shape_err("mot_forward", format!("mask layout {layout:?} vs {frames} frames")));
        }
        let nv = frames * v;

        let x = tape.constant(input.video.clone());
        let mut hv = self.embed(tape, p, &self.video_embed, x, nv, input.tau_video)?;
        let clean = tape.constant(input.current_clean.clone());
        let cond = self.current_cond.forward(tape, p, clean)?;
        let cond = if frames > 1 {
            let pad = tape.constant(Tensor::zeros(vec![batch * (nv - v), self.cfg.d_model]));
            tape.interleave_rows(cond, pad, batch)?
        } else {
            cond
        };
        hv = tape.add(hv, cond)?;
        let a = tape.constant(input.actions.clone());
        let mut ha = self.embed(tape, p, &self.action_embed, a, h, input.tau_action)?;

        for (vb, ab) in self.video_blocks.iter().zip(&self.action_blocks) {
            let xv = vb.ln_attn.forward(tape, p, hv)?;
            let xa = ab.ln_attn.forward(tape, p, ha)?;
            let mut qkv = [None; 3];
            for (slot, (lv, la)) in qkv.iter_mut().zip([(&vb.q, &ab.q), (&vb.k, &ab.k), (&vb.v, &ab.v)]) {
                let pv = lv.forward(tape, p, xv)?;
                let pa = la.forward(tape, p, xa)?;
                *slot = Some(tape.interleave_rows(pv, pa, batch)?);
            }
            let [q, k, vv] = qkv.map(|x| x.expect("filled"));
            let o = tape.attention(q, k, vv, mask.attention().clone(), self.cfg.heads)?;
            let ov = tape.slice_group_rows(o, batch, 0, nv)?;
            let oa = tape.slice_group_rows(o, batch, nv, h)?;
            let ov = vb.o.forward(tape, p, ov)?;
            let oa = ab.o.forward(tape, p, oa)?;
            hv = tape.add(hv, ov)?;
            ha = tape.add(ha, oa)?;
            hv = vb.feed_forward(tape, p, hv)?;
            ha = ab.feed_forward(tape, p, ha)?;
        }

        let u = self.video_head.ln.forward(tape, p, hv)?;
        let u_video = self.video_head.out.forward(tape, p, u)?;
        let a = self.action_head.ln.forward(tape, p, ha)?;
        let v_act = self.action_head.out.forward(tape, p, a)?;
        Ok(MotOutput { u_video, v_act })
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, e: &StreamEmbed, x: Var, tokens: usize, taus: &[f64]) -> Result<Var> {
        let batch = taus.len();
        let d = self.cfg.d_model;
        let h = e.input.forward(tape, p, x)?;
        let pos = tape.slice_rows(p.var(e.pos), 0, tokens)?;
        let pos = tape.tile_rows(pos, batch)?;
        let h = tape.add(h, pos)?;
        let mut temb = Vec::with_capacity(batch * d);
        for &tau in taus {
            temb.extend(sinusoid_values(tau, d)?);
        }
        let temb = tape.constant(Tensor::matrix(batch, d, temb)?);
        let t = e.time.forward(tape, p, temb)?;
        let t = tape.repeat_rows(t, tokens)?;
        tape.add(h, t)
    }

    /// Value-only forward with every parameter frozen.
    pub fn forward_values(&self, input: MotInput<'_>, mask: &JointMask) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &p, input, mask)?;
        Ok((tape.value(out.u_video).clone(), tape.value(out.v_act).clone()))
    }
}

/// The last `k_action` action-expert blocks and last `k_video` video-expert blocks.
pub fn select_trainable(model: &MotModel, k_action: usize, k_video: usize) -> Result<TrainableSet> {
    let depth = model.depth();
    for k in [k_action, k_video] {
        if k > depth {
            return Err(Error::DepthOutOfRange { k, depth });
        }
    }
    let mut blocks = BTreeSet::new();
    for index in depth - k_action..depth {
        blocks.insert(BlockId {
            expert: Expert::Action,
            index,
        });
    }
    for index in depth - k_video..depth {
        blocks.insert(BlockId {
            expert: Expert::Video,
            index,
        });
    }
    Ok(TrainableSet { blocks, shared: false })
}
