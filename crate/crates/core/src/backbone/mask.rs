use std::sync::Arc;

use crate::autodiff::{AttentionMask, SharedMask};
use crate::error::{Error, Result};

/// Token arrangement of one sample: `frames * video_per_frame` video tokens
/// followed by `action_tokens` action tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub video_per_frame: usize,
    pub action_tokens: usize,
    pub d_model: usize,
}

impl TokenLayout {
    pub fn new(frames: usize, video_per_frame: usize, action_tokens: usize, d_model: usize) -> Result<Self> {
        if frames == 0 || video_per_frame == 0 || action_tokens == 0 || d_model == 0 {
            return Err(Error::InvalidConfig(format!(
                "token layout needs positive sizes, got T={frames} V={video_per_frame} H={action_tokens} d={d_model}"
            )));
        }
        Ok(Self {
            frames,
            video_per_frame,
            action_tokens,
            d_model,
        })
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.video_per_frame
    }

    pub fn total(&self) -> usize {
        self.video_tokens() + self.action_tokens
    }

    pub fn is_action(&self, token: usize) -> bool {
        token >= self.video_tokens()
    }

    pub fn is_current_frame(&self, token: usize) -> bool {
        token < self.video_per_frame
    }

    /// Same layout with only the current frame present.
    pub fn current_only(&self) -> Self {
        Self { frames: 1, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Student,
    Teacher,
}

/// Joint video+action attention permissions for one layout.
#[derive(Clone, Debug)]
pub struct JointMask {
    kind: MaskKind,
    layout: TokenLayout,
    mask: SharedMask,
}

impl JointMask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn attention(&self) -> &SharedMask {
        &self.mask
    }

    pub fn permits(&self, query: usize, key: usize) -> bool {
        self.mask.permits(query, key)
    }

    pub fn same_permissions(&self, other: &JointMask) -> bool {
        self.mask.as_slice() == other.mask.as_slice()
    }
}

/// Rows shared by both masks. Current-frame video tokens see only the current
/// frame and the action tokens, so nothing downstream of them can carry future
/// content under the student mask; future-frame video tokens see everything.
fn video_row(layout: &TokenLayout, query: usize, key: usize) -> bool {
    if layout.is_action(key) {
        return true;
    }
    if layout.is_current_frame(query) {
        layout.is_current_frame(key)
    } else {
        true
    }
}

fn build(layout: TokenLayout, kind: MaskKind) -> JointMask {
    let n = layout.total();
    let mask = AttentionMask::from_fn(n, n, |q, k| {
        if !layout.is_action(q) {
            return video_row(&layout, q, k);
        }
        match kind {
            MaskKind::Teacher => true,
            MaskKind::Student => layout.is_action(k) || layout.is_current_frame(k),
        }
    });
    JointMask {
        kind,
        layout,
        mask: Arc::new(mask),
    }
}

/// Action queries see the current frame's video tokens and all action tokens.
pub fn build_student_mask(layout: TokenLayout) -> JointMask {
    build(layout, MaskKind::Student)
}

/// Action queries see every video token, future frames included.
pub fn build_teacher_mask(layout: TokenLayout) -> JointMask {
    build(layout, MaskKind::Teacher)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(t: usize, v: usize, h: usize) -> TokenLayout {
        TokenLayout::new(t, v, h, 8).unwrap()
    }

    #[test]
    fn single_frame_masks_coincide() {
        let l = layout(1, 2, 2);
        assert!(build_student_mask(l).same_permissions(&build_teacher_mask(l)));
    }

    #[test]
    fn three_frame_enumeration() {
        let l = layout(3, 2, 2);
        let s = build_student_mask(l);
        let t = build_teacher_mask(l);
        for q in 6..8 {
            for k in 0..8 {
                let student_expected = matches!(k, 0 | 1 | 6 | 7);
                assert_eq!(s.permits(q, k), student_expected, "student q={q} k={k}");
                assert!(t.permits(q, k), "teacher q={q} k={k}");
            }
            assert!(s.permits(q, q));
        }
    }

    #[test]
    fn teacher_minus_student_is_action_rows_future_columns() {
        for (t, v, h) in [(3, 2, 2), (4, 4, 8), (2, 1, 3)] {
            let l = layout(t, v, h);
            let s = build_student_mask(l);
            let te = build_teacher_mask(l);
            let mut extra = 0;
            for q in 0..l.total() {
                for k in 0..l.total() {
                    let diff = te.permits(q, k) && !s.permits(q, k);
                    assert!(!(s.permits(q, k) && !te.permits(q, k)));
                    if diff {
                        assert!(l.is_action(q) && !l.is_action(k) && !l.is_current_frame(k));
                        extra += 1;
                    }
                }
            }
            assert_eq!(extra, h * (t - 1) * v);
        }
    }

    #[test]
    fn video_rows_identical_across_kinds() {
        let l = layout(4, 4, 8);
        let s = build_student_mask(l);
        let t = build_teacher_mask(l);
        for q in 0..l.video_tokens() {
            assert_eq!(s.attention().row(q), t.attention().row(q));
        }
    }

    #[test]
    fn current_and_action_tokens_closed_under_student() {
        let l = layout(4, 2, 3);
        let s = build_student_mask(l);
        for q in (0..l.total()).filter(|&q| l.is_action(q) || l.is_current_frame(q)) {
            for k in 0..l.total() {
                if s.permits(q, k) {
                    assert!(l.is_action(k) || l.is_current_frame(k));
                }
            }
        }
    }

    #[test]
    fn invalid_layout_rejected() {
        assert!(TokenLayout::new(0, 2, 2, 8).is_err());
    }
}
