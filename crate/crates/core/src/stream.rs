//! Incremental frame-by-frame inference.
//!
//! Each memory block runs behind a ring buffer of projected frames sized
//! `n1*s1 + 1 + n2*s2`; a block emits frame `t` once frame `t + n2*s2` has
//! arrived. Input stacking replicates the left edge at stream start, and
//! flushing replicates the right edge for stacking while memory blocks see
//! zero padding, exactly mirroring batch boundary handling. Because every
//! row is computed by the same kernels as the batch path, emissions equal
//! batch forward rows bit for bit, and the total emission delay equals the
//! topology latency.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::layers::{memory_block_row, FrameSource, Model};
use crate::tensor::{softmax_row, Scalar};
use crate::topology::{latency_frames, Latency, Skip, Variant};

/// One emitted output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission<S: Scalar> {
    pub frame: usize,
    pub posteriors: Vec<S>,
}

/// Fixed-capacity row buffer indexed by absolute frame time.
struct Ring<S: Scalar> {
    cap: usize,
    width: usize,
    data: Vec<S>,
    written: usize,
}

impl<S: Scalar> Ring<S> {
    fn new(cap: usize, width: usize) -> Self {
        Ring {
            cap,
            width,
            data: vec![S::ZERO; cap * width],
            written: 0,
        }
    }

    fn push(&mut self, row: &[S]) {
        debug_assert_eq!(row.len(), self.width);
        let slot = self.written % self.cap;
        self.data[slot * self.width..(slot + 1) * self.width].copy_from_slice(row);
        self.written += 1;
    }
}

impl<S: Scalar> FrameSource<S> for Ring<S> {
    fn frame(&self, t: isize) -> Option<&[S]> {
        if t < 0 || t as usize >= self.written {
            return None;
        }
        let t = t as usize;
        // The capacity arithmetic guarantees live taps are never evicted.
        assert!(
            t + self.cap >= self.written,
            "ring read of evicted frame {t} (written {})",
            self.written
        );
        let slot = t % self.cap;
        Some(&self.data[slot * self.width..(slot + 1) * self.width])
    }
}

/// Input context stacking with edge replication, one raw frame at a time.
struct Stacker<S: Scalar> {
    left: usize,
    right: usize,
    dim: usize,
    window: VecDeque<Vec<S>>,
    received: usize,
    emitted: usize,
}

impl<S: Scalar> Stacker<S> {
    fn new(left: usize, right: usize, dim: usize) -> Self {
        Stacker {
            left,
            right,
            dim,
            window: VecDeque::with_capacity(left + right + 2),
            received: 0,
            emitted: 0,
        }
    }

    fn stack_row(&self, t: usize) -> Vec<S> {
        let base = self.received - self.window.len();
        let mut out = Vec::with_capacity((self.left + 1 + self.right) * self.dim);
        for offset in -(self.left as isize)..=(self.right as isize) {
            let src = (t as isize + offset).clamp(0, self.received as isize - 1) as usize;
            out.extend_from_slice(&self.window[src - base]);
        }
        out
    }

    fn push(&mut self, frame: &[S]) -> Option<Vec<S>> {
        self.window.push_back(frame.to_vec());
        if self.window.len() > self.left + self.right + 1 {
            self.window.pop_front();
        }
        self.received += 1;
        if self.received >= self.emitted + self.right + 1 {
            let row = self.stack_row(self.emitted);
            self.emitted += 1;
            Some(row)
        } else {
            None
        }
    }

    fn flush(&mut self) -> Vec<Vec<S>> {
        let mut rows = Vec::with_capacity(self.received - self.emitted);
        while self.emitted < self.received {
            rows.push(self.stack_row(self.emitted));
            self.emitted += 1;
        }
        rows
    }
}

/// Ring buffers and counters of one memory-block layer.
struct BlockStage<S: Scalar> {
    ring: Ring<S>,
    skip_ring: Option<Ring<S>>,
    lookahead: usize,
    received: usize,
    emitted: usize,
}

/// The emission of one stage: memory output plus the projected frame itself
/// (needed downstream on the split memory path).
struct StageOut<S> {
    memory: Vec<S>,
    proj: Vec<S>,
}

impl<S: Scalar> BlockStage<S> {
    fn emit(&mut self, params: &crate::layers::MemoryBlockParams<S>, identity: bool) -> StageOut<S> {
        let t = self.emitted;
        let mut out = vec![S::ZERO; self.ring.width];
        let skip_row = self.skip_ring.as_ref().and_then(|r| r.frame(t as isize));
        memory_block_row(params, identity, &self.ring, t as isize, skip_row, &mut out);
        self.emitted += 1;
        let proj = self.ring.frame(t as isize).expect("current frame held").to_vec();
        StageOut { memory: out, proj }
    }
}

/// Incremental inference state over a borrowed immutable model.
pub struct StreamState<'m, S: Scalar> {
    model: &'m Model<S>,
    stacker: Stacker<S>,
    stages: Vec<BlockStage<S>>,
    frames_in: usize,
    frames_out: usize,
    flushed: bool,
}

/// Opens a fresh stream; equivalent to `StreamState::open`.
pub fn stream_open<S: Scalar>(model: &Model<S>) -> StreamState<'_, S> {
    StreamState::open(model)
}

impl<'m, S: Scalar> StreamState<'m, S> {
    pub fn open(model: &'m Model<S>) -> Self {
        let spec = &model.spec;
        let stages = model
            .blocks
            .iter()
            .map(|b| {
                let n1 = b.memory.n1();
                let n2 = b.memory.n2();
                let lookahead = n2 * b.memory.s2;
                let cap = n1 * b.memory.s1 + 1 + lookahead;
                let width = b.proj.out_width();
                BlockStage {
                    ring: Ring::new(cap, width),
                    skip_ring: (b.memory.skip == Skip::Identity).then(|| Ring::new(lookahead + 1, width)),
                    lookahead,
                    received: 0,
                    emitted: 0,
                }
            })
            .collect();
        StreamState {
            model,
            stacker: Stacker::new(spec.context_left, spec.context_right, spec.input_dim),
            stages,
            frames_in: 0,
            frames_out: 0,
            flushed: false,
        }
    }

    /// Total emission delay in input frames, identical to the topology
    /// analysis.
    pub fn latency(&self) -> Latency {
        latency_frames(&self.model.spec)
    }

    pub fn frames_in(&self) -> usize {
        self.frames_in
    }

    pub fn frames_out(&self) -> usize {
        self.frames_out
    }

    /// Ring capacity of one block, in frames; constant over the stream life.
    pub fn ring_capacity(&self, block: usize) -> usize {
        self.stages[block].ring.cap
    }

    /// Pushes one raw input frame; returns any rows that became computable.
    pub fn push(&mut self, frame: &[S]) -> Result<Vec<Emission<S>>> {
        if self.flushed {
            return Err(Error::State("push after flush".into()));
        }
        if frame.len() != self.model.spec.input_dim {
            return Err(Error::shape(
                "stream frame",
                format!("{}", frame.len()),
                format!("{}", self.model.spec.input_dim),
            ));
        }
        self.frames_in += 1;
        let mut out = Vec::new();
        if let Some(stacked) = self.stacker.push(frame) {
            if let Some(row) = self.feed_blocks(0, stacked, None)? {
                out.push(self.emit_row(row));
            }
        }
        Ok(out)
    }

    /// Computes the rows for the final lookahead span and closes the stream.
    pub fn flush(&mut self) -> Result<Vec<Emission<S>>> {
        if self.flushed {
            return Err(Error::State("stream already flushed".into()));
        }
        self.flushed = true;
        let mut out = Vec::new();
        for stacked in self.stacker.flush() {
            if let Some(row) = self.feed_blocks(0, stacked, None)? {
                out.push(self.emit_row(row));
            }
        }
        let model = self.model;
        for bi in 0..self.stages.len() {
            while self.stages[bi].emitted < self.stages[bi].received {
                let stage_out = self.stages[bi].emit(&model.blocks[bi].memory, model.memory_identity_term());
                let (main, mem) = self.route(stage_out);
                if let Some(row) = self.feed_blocks(bi + 1, main, mem)? {
                    out.push(self.emit_row(row));
                }
            }
        }
        Ok(out)
    }

    fn emit_row(&mut self, posteriors: Vec<S>) -> Emission<S> {
        let e = Emission {
            frame: self.frames_out,
            posteriors,
        };
        self.frames_out += 1;
        e
    }

    /// Orders a stage emission into the (main, memory-path) pair the next
    /// layer expects under the current variant.
    fn route(&self, stage_out: StageOut<S>) -> (Vec<S>, Option<Vec<S>>) {
        if self.model.spec.variant == Variant::Fsmn {
            (stage_out.proj, Some(stage_out.memory))
        } else {
            (stage_out.memory, None)
        }
    }

    /// Runs one frame through blocks `start..`, then the dense tail. Returns
    /// the posterior row if it cleared every lookahead window.
    fn feed_blocks(&mut self, start: usize, main: Vec<S>, mem: Option<Vec<S>>) -> Result<Option<Vec<S>>> {
        let model = self.model;
        let mut main = main;
        let mut mem = mem;
        for bi in start..self.stages.len() {
            let block = &model.blocks[bi];
            let mut hidden = vec![S::ZERO; block.hidden.out_width()];
            block.hidden.forward_row(&main, mem.as_deref(), &mut hidden);
            let mut proj = vec![S::ZERO; block.proj.out_width()];
            block.proj.forward_row(&hidden, None, &mut proj);

            let stage = &mut self.stages[bi];
            stage.ring.push(&proj);
            if let Some(skip_ring) = &mut stage.skip_ring {
                // The flowing main value is the memory output one block below.
                skip_ring.push(&main);
            }
            stage.received += 1;
            if stage.received < stage.emitted + stage.lookahead + 1 {
                return Ok(None);
            }
            let stage_out = self.stages[bi].emit(&block.memory, model.memory_identity_term());
            let routed = self.route(stage_out);
            main = routed.0;
            mem = routed.1;
        }
        Ok(Some(self.tail_row(&main, mem.as_deref())))
    }

    /// Dense stack, projections, output affine, softmax: pointwise in time.
    fn tail_row(&self, block_main: &[S], block_mem: Option<&[S]>) -> Vec<S> {
        let mut main = block_main.to_vec();
        let mut mem = block_mem;
        for d in &self.model.dense {
            let mut h = vec![S::ZERO; d.out_width()];
            d.forward_row(&main, if d.w_mem.is_some() { mem } else { None }, &mut h);
            if d.w_mem.is_some() {
                mem = None;
            }
            main = h;
        }
        let pre = &self.model.pre_out;
        let mut y = vec![S::ZERO; pre.out_width()];
        pre.forward_row(&main, if pre.w_mem.is_some() { mem } else { None }, &mut y);
        let mut logits = vec![S::ZERO; self.model.output.out_width()];
        self.model.output.forward_row(&y, None, &mut logits);
        softmax_row(&mut logits);
        logits
    }
}
