//! Mapping between per-frame local parameters and the global unknown vector.

use std::collections::BTreeSet;

use crate::losses::{ParamRef, SLOT_FOCAL, SLOT_HANDLE, SLOT_ROTATION};

/// Global index of every free per-frame parameter. Frames are laid out in
/// index order; a shared focal length takes one index after all frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_frames: usize,
    pub handles_per_frame: usize,
    slots: Vec<Vec<Option<usize>>>,
    frame_of: Vec<Option<usize>>,
    n: usize,
}

/// Gauge and tying choices of a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutOptions {
    pub fix_first_pose: bool,
    /// Handle of frame 0 held at its current value.
    pub frozen_handle: Option<usize>,
    pub shared_focal: bool,
    pub optimize_focal: bool,
}

impl ParamLayout {
    pub fn new(n_frames: usize, handles_per_frame: usize, opts: LayoutOptions) -> Self {
        let per = SLOT_HANDLE + handles_per_frame;
        let mut slots = vec![vec![None; per]; n_frames];
        let mut frame_of = Vec::new();
        let mut n = 0;
        for (f, frame_slots) in slots.iter_mut().enumerate() {
            for (s, slot) in frame_slots.iter_mut().enumerate() {
                let fixed = (f == 0 && opts.fix_first_pose && s < SLOT_FOCAL)
                    || (s == SLOT_FOCAL && (opts.shared_focal || !opts.optimize_focal))
                    || (f == 0 && opts.frozen_handle.map(|k| SLOT_HANDLE + k) == Some(s));
                if !fixed {
                    *slot = Some(n);
                    frame_of.push(Some(f));
                    n += 1;
                }
            }
        }
        if opts.shared_focal && opts.optimize_focal {
            for frame_slots in slots.iter_mut() {
                frame_slots[SLOT_FOCAL] = Some(n);
            }
            frame_of.push(None);
            n += 1;
        }
        Self {
            n_frames,
            handles_per_frame,
            slots,
            frame_of,
            n,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn index(&self, p: ParamRef) -> Option<usize> {
        self.slots.get(p.frame)?.get(p.slot).copied().flatten()
    }

    /// Owning frame of a global index; `None` for a shared focal length.
    pub fn frame_of(&self, index: usize) -> Option<usize> {
        self.frame_of[index]
    }

    /// All local slots of `frame`, in order.
    pub fn frame_slots(&self, frame: usize) -> &[Option<usize>] {
        &self.slots[frame]
    }

    /// Frame pairs `(a, b)`, `a <= b`, with a nonzero block in the pattern.
    pub fn frame_blocks(&self, entries: impl IntoIterator<Item = (usize, usize)>) -> BTreeSet<(usize, usize)> {
        entries
            .into_iter()
            .filter_map(|(r, c)| {
                let (a, b) = (self.frame_of(r)?, self.frame_of(c)?);
                Some((a.min(b), a.max(b)))
            })
            .collect()
    }

    pub fn rotation_index(&self, frame: usize) -> Option<usize> {
        self.slots[frame][SLOT_ROTATION]
    }
}
