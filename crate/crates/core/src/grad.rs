//! Analytic backward passes, the cross-entropy loss, the SGD-with-momentum
//! trainer, and the finite-difference gradient verifier.

use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::layers::{forward, Dense, ForwardCache, MemoryBlockParams, Model};
use crate::tensor::{Matrix, Scalar};
use crate::topology::Skip;

const LOG_CLAMP: f64 = 1e-12;

/// Gradients of one [`Dense`] layer.
#[derive(Debug, Clone)]
pub struct DenseGrads<S: Scalar> {
    pub w: Matrix<S>,
    pub w_mem: Option<Matrix<S>>,
    pub b: Matrix<S>,
}

impl<S: Scalar> DenseGrads<S> {
    fn zeros_like(layer: &Dense<S>) -> Self {
        DenseGrads {
            w: Matrix::zeros(layer.w.rows(), layer.w.cols()),
            w_mem: layer.w_mem.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            b: Matrix::zeros(1, layer.b.cols()),
        }
    }
}

/// Gradients of one memory-block layer.
#[derive(Debug, Clone)]
pub struct BlockGrads<S: Scalar> {
    pub hidden: DenseGrads<S>,
    pub proj: DenseGrads<S>,
    pub a: Matrix<S>,
    pub c: Matrix<S>,
}

/// Shape-congruent gradient container for a whole model.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    pub blocks: Vec<BlockGrads<S>>,
    pub dense: Vec<DenseGrads<S>>,
    pub pre_out: DenseGrads<S>,
    pub output: DenseGrads<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &Model<S>) -> Self {
        Gradients {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    hidden: DenseGrads::zeros_like(&b.hidden),
                    proj: DenseGrads::zeros_like(&b.proj),
                    a: Matrix::zeros(b.memory.a.rows(), b.memory.a.cols()),
                    c: Matrix::zeros(b.memory.c.rows(), b.memory.c.cols()),
                })
                .collect(),
            dense: model.dense.iter().map(DenseGrads::zeros_like).collect(),
            pre_out: DenseGrads::zeros_like(&model.pre_out),
            output: DenseGrads::zeros_like(&model.output),
        }
    }

    /// Tensors in the same order as [`Model::params`].
    pub fn tensors(&self) -> Vec<&Matrix<S>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.hidden.w);
            if let Some(wm) = &b.hidden.w_mem {
                v.push(wm);
            }
            v.push(&b.hidden.b);
            v.push(&b.proj.w);
            v.push(&b.proj.b);
            v.push(&b.a);
            v.push(&b.c);
        }
        for d in &self.dense {
            v.push(&d.w);
            if let Some(wm) = &d.w_mem {
                v.push(wm);
            }
            v.push(&d.b);
        }
        v.push(&self.pre_out.w);
        if let Some(wm) = &self.pre_out.w_mem {
            v.push(wm);
        }
        v.push(&self.pre_out.b);
        v.push(&self.output.w);
        v.push(&self.output.b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut v: Vec<&mut Matrix<S>> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.hidden.w);
            if let Some(wm) = &mut b.hidden.w_mem {
                v.push(wm);
            }
            v.push(&mut b.hidden.b);
            v.push(&mut b.proj.w);
            v.push(&mut b.proj.b);
            v.push(&mut b.a);
            v.push(&mut b.c);
        }
        for d in &mut self.dense {
            v.push(&mut d.w);
            if let Some(wm) = &mut d.w_mem {
                v.push(wm);
            }
            v.push(&mut d.b);
        }
        v.push(&mut self.pre_out.w);
        if let Some(wm) = &mut self.pre_out.w_mem {
            v.push(wm);
        }
        v.push(&mut self.pre_out.b);
        v.push(&mut self.output.w);
        v.push(&mut self.output.b);
        v
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients<S>, scale: S) -> Result<()> {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Internal("gradient containers differ in layout".into()));
        }
        for (m, t) in mine.iter_mut().zip(theirs) {
            m.add_scaled_in_place(t, scale)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_all_finite())
    }
}

/// Frame-averaged cross entropy against target distributions, fused with the
/// softmax gradient.
///
/// Returns the loss and the gradient with respect to the logits:
/// `(posteriors - targets) / T`. Logs are clamped at `1e-12`.
pub fn cross_entropy<S: Scalar>(posteriors: &Matrix<S>, targets: &Matrix<S>) -> Result<(f64, Matrix<S>)> {
    if posteriors.shape() != targets.shape() {
        return Err(Error::shape(
            "cross_entropy",
            posteriors.shape_string(),
            targets.shape_string(),
        ));
    }
    let t_len = targets.rows();
    for t in 0..t_len {
        let sum: f64 = targets.row(t).iter().map(|v| v.to_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("target row {t} sums to {sum}, not 1")));
        }
    }
    if t_len == 0 {
        return Ok((0.0, Matrix::zeros(0, posteriors.cols())));
    }
    let inv_t = 1.0 / t_len as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(t_len, posteriors.cols());
    for t in 0..t_len {
        let prow = posteriors.row(t);
        let trow = targets.row(t);
        let drow = dlogits.row_mut(t);
        for k in 0..prow.len() {
            let p = prow[k].to_f64();
            let y = trow[k].to_f64();
            if y != 0.0 {
                loss -= y * p.max(LOG_CLAMP).ln();
            }
            drow[k] = S::from_f64((p - y) * inv_t);
        }
    }
    Ok((loss * inv_t, dlogits))
}

/// Backward pass of one dense layer.
///
/// `pre` is the cached pre-activation (consulted only when the layer has a
/// ReLU); `d_out` is the gradient at the layer output. Returns the parameter
/// gradients and the gradients at both inputs.
pub fn dense_backward<S: Scalar>(
    layer: &Dense<S>,
    x: &Matrix<S>,
    x_mem: Option<&Matrix<S>>,
    pre: &Matrix<S>,
    d_out: &Matrix<S>,
) -> Result<(DenseGrads<S>, Matrix<S>, Option<Matrix<S>>)> {
    if d_out.cols() != layer.out_width() || d_out.rows() != x.rows() {
        return Err(Error::shape("dense_backward", d_out.shape_string(), x.shape_string()));
    }
    let dz = if layer.relu {
        if pre.shape() != d_out.shape() {
            return Err(Error::Internal("cached pre-activation shape mismatch".into()));
        }
        let mut dz = d_out.clone();
        for (g, &z) in dz.data_mut().iter_mut().zip(pre.data()) {
            if z <= S::ZERO {
                *g = S::ZERO;
            }
        }
        dz
    } else {
        d_out.clone()
    };
    let mut grads = DenseGrads::zeros_like(layer);
    grads.w = x.matmul_tn(&dz)?;
    grads.b = dz.col_sums();
    let dx = dz.matmul_nt(&layer.w)?;
    let mut dx_mem = None;
    if let Some(wm) = &layer.w_mem {
        let xm = x_mem.ok_or_else(|| Error::Internal("memory path input missing in backward".into()))?;
        grads.w_mem = Some(xm.matmul_tn(&dz)?);
        dx_mem = Some(dz.matmul_nt(wm)?);
    }
    Ok((grads, dx, dx_mem))
}

/// Backward pass of one memory block.
///
/// Scatters `d_out` into the projected frames at strided offsets and into the
/// tap coefficients via elementwise products. Returns `(da, dc, dp)`; the
/// gradient at an identity skip input equals `d_out` itself and is handled by
/// the caller.
pub fn memory_backward<S: Scalar>(
    params: &MemoryBlockParams<S>,
    identity: bool,
    p: &Matrix<S>,
    d_out: &Matrix<S>,
) -> Result<(Matrix<S>, Matrix<S>, Matrix<S>)> {
    if p.shape() != d_out.shape() {
        return Err(Error::shape("memory_backward", p.shape_string(), d_out.shape_string()));
    }
    let (t_len, d) = p.shape();
    let scalar_mode = params.a.cols() == 1 && d != 1;
    let mut da = Matrix::zeros(params.a.rows(), params.a.cols());
    let mut dc = Matrix::zeros(params.c.rows(), params.c.cols());
    let mut dp = Matrix::zeros(t_len, d);
    if identity {
        dp.add_in_place(d_out)?;
    }
    for t in 0..t_len as isize {
        let g = d_out.row(t as usize);
        for i in 0..=params.n1() {
            let tap = t - (params.s1 * i) as isize;
            if tap < 0 || tap >= t_len as isize {
                continue;
            }
            let prow = p.row(tap as usize);
            let coeff = params.a.row(i);
            let dprow = dp.row_mut(tap as usize);
            if scalar_mode {
                let cval = coeff[0];
                let mut acc = S::ZERO;
                for k in 0..d {
                    acc += g[k] * prow[k];
                    dprow[k] += cval * g[k];
                }
                let cur = da.get(i, 0);
                da.set(i, 0, cur + acc);
            } else {
                for k in 0..d {
                    dprow[k] += coeff[k] * g[k];
                    let cur = da.get(i, k);
                    da.set(i, k, cur + g[k] * prow[k]);
                }
            }
        }
        for j in 1..=params.n2() {
            let tap = t + (params.s2 * j) as isize;
            if tap < 0 || tap >= t_len as isize {
                continue;
            }
            let prow = p.row(tap as usize);
            let coeff = params.c.row(j - 1);
            let dprow = dp.row_mut(tap as usize);
            if scalar_mode {
                let cval = coeff[0];
                let mut acc = S::ZERO;
                for k in 0..d {
                    acc += g[k] * prow[k];
                    dprow[k] += cval * g[k];
                }
                let cur = dc.get(j - 1, 0);
                dc.set(j - 1, 0, cur + acc);
            } else {
                for k in 0..d {
                    dprow[k] += coeff[k] * g[k];
                    let cur = dc.get(j - 1, k);
                    dc.set(j - 1, k, cur + g[k] * prow[k]);
                }
            }
        }
    }
    Ok((da, dc, dp))
}

/// Exact reverse-mode gradients for every learnable tensor in the model.
pub fn backward<S: Scalar>(model: &Model<S>, cache: &ForwardCache<S>, dlogits: &Matrix<S>) -> Result<Gradients<S>> {
    let nb = model.blocks.len();
    if cache.block_pre.len() != nb
        || cache.block_memory.len() != nb
        || cache.dense_pre.len() != model.dense.len()
        || cache.logits.shape() != dlogits.shape()
    {
        return Err(Error::Internal("forward cache does not match this model".into()));
    }
    let split = model.split_memory_path();
    let identity = model.memory_identity_term();
    let mut grads = Gradients::zeros_like(model);

    // Output affine layer.
    let (g_out, d_preout, _) = dense_backward(&model.output, &cache.pre_out, None, &cache.logits, dlogits)?;
    grads.output = g_out;

    // Pre-output projection. Its inputs depend on whether dense layers exist.
    let last_block_main: &Matrix<S> = if split {
        &cache.block_proj[nb - 1]
    } else {
        &cache.block_memory[nb - 1]
    };
    let last_block_mem: Option<&Matrix<S>> = split.then(|| &cache.block_memory[nb - 1]);

    let preout_x: &Matrix<S> = if model.dense.is_empty() {
        last_block_main
    } else {
        cache.dense_hidden.last().unwrap()
    };
    let preout_xmem = if model.pre_out.w_mem.is_some() { last_block_mem } else { None };
    let (g_pre, mut d_main, mut d_mem) =
        dense_backward(&model.pre_out, preout_x, preout_xmem, &cache.pre_out, &d_preout)?;
    grads.pre_out = g_pre;

    // Dense stack in reverse.
    for i in (0..model.dense.len()).rev() {
        let x: &Matrix<S> = if i == 0 { last_block_main } else { &cache.dense_hidden[i - 1] };
        let xm = if model.dense[i].w_mem.is_some() { last_block_mem } else { None };
        let (g, dx, dxm) = dense_backward(&model.dense[i], x, xm, &cache.dense_pre[i], &d_main)?;
        grads.dense[i] = g;
        d_main = dx;
        if dxm.is_some() {
            d_mem = dxm;
        }
    }

    // Memory-block stack in reverse. `d_main` tracks the gradient at each
    // block's forward output, `d_mem` the split memory path, and `d_skip`
    // the identity-skip route into the block below.
    let mut d_skip: Option<Matrix<S>> = None;
    for i in (0..nb).rev() {
        let block = &model.blocks[i];
        let p = &cache.block_proj[i];

        let mut d_pt = if split {
            d_mem
                .take()
                .ok_or_else(|| Error::Internal("memory-path gradient missing".into()))?
        } else {
            d_main.clone()
        };
        if let Some(ds) = d_skip.take() {
            d_pt.add_in_place(&ds)?;
        }

        let (da, dc, mut dp) = memory_backward(&block.memory, identity, p, &d_pt)?;
        grads.blocks[i].a = da;
        grads.blocks[i].c = dc;
        if block.memory.skip == Skip::Identity && i > 0 {
            // Identity mapping passes the gradient down unchanged.
            d_skip = Some(d_pt);
        }
        if split {
            dp.add_in_place(&d_main)?;
        }

        let (g_proj, dh, _) = dense_backward(&block.proj, &cache.block_hidden[i], None, p, &dp)?;
        grads.blocks[i].proj = g_proj;

        let prev_main: &Matrix<S> = if i == 0 {
            &cache.input
        } else if split {
            &cache.block_proj[i - 1]
        } else {
            &cache.block_memory[i - 1]
        };
        let prev_mem: Option<&Matrix<S>> = (split && i > 0).then(|| &cache.block_memory[i - 1]);
        let (g_hidden, dx, dxm) = dense_backward(&block.hidden, prev_main, prev_mem, &cache.block_pre[i], &dh)?;
        grads.blocks[i].hidden = g_hidden;
        d_main = dx;
        d_mem = dxm;
    }
    Ok(grads)
}

/// Hyperparameters of the SGD-with-momentum trainer.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub minibatch_frames: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Halve the learning rate when an epoch fails to improve the loss.
    pub halve_lr_on_plateau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            momentum: 0.9,
            minibatch_frames: 4096,
            epochs: 1,
            seed: 0,
            halve_lr_on_plateau: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.minibatch_frames == 0 {
            return Err(Error::Config("minibatch size must be nonzero".into()));
        }
        Ok(())
    }
}

/// One classical-momentum update: `v <- momentum*v - lr*g`, `theta <- theta + v`.
pub fn sgd_step<S: Scalar>(
    model: &mut Model<S>,
    grads: &Gradients<S>,
    velocity: &mut Gradients<S>,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    sgd_step_lr(model, grads, velocity, cfg.learning_rate, cfg.momentum)
}

fn sgd_step_lr<S: Scalar>(
    model: &mut Model<S>,
    grads: &Gradients<S>,
    velocity: &mut Gradients<S>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut params = model.params_mut();
    let g = grads.tensors();
    let mut v = velocity.tensors_mut();
    if params.len() != g.len() || params.len() != v.len() {
        return Err(Error::Internal("model/gradient/velocity layouts differ".into()));
    }
    let m = S::from_f64(momentum);
    let step = S::from_f64(lr);
    for i in 0..g.len() {
        if params[i].shape() != g[i].shape() {
            return Err(Error::Internal("gradient shape mismatch".into()));
        }
        v[i].scale_in_place(m);
        v[i].add_scaled_in_place(g[i], -step)?;
        params[i].add_in_place(v[i])?;
    }
    Ok(())
}

/// Per-epoch training trace record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest entry in a row; first index wins ties.
pub fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Trains with minibatches cut along sequence boundaries.
///
/// Sequences are shuffled each epoch and packed into minibatches of at least
/// `minibatch_frames` frames; the loss is frame-averaged over each minibatch,
/// so memory blocks always see whole sequences. Deterministic per seed.
pub fn train<S: Scalar>(
    model: Model<S>,
    data: &FrameDataset<S>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Model<S>, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let want = model.spec.stacked_input();
    for (i, seq) in data.sequences.iter().enumerate() {
        if seq.features.cols() != want {
            return Err(Error::shape(
                format!("training sequence {i}"),
                seq.features.shape_string(),
                format!("Tx{want}"),
            ));
        }
        if seq.targets.rows() != seq.features.rows() {
            return Err(Error::Data(format!("sequence {i}: feature/target length mismatch")));
        }
    }

    let mut model = model;
    let mut velocity = Gradients::zeros_like(&model);
    let mut rng = crate::tensor::SeedRng::new(cfg.seed);
    let mut lr = cfg.learning_rate;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut prev_loss = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.sequences.len()).collect();
        rng.shuffle(&mut order);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_frames = 0usize;

        let mut cursor = 0;
        while cursor < order.len() {
            // Pack whole sequences until the frame budget is reached.
            let mut batch = Vec::new();
            let mut batch_frames = 0usize;
            while cursor < order.len() && (batch.is_empty() || batch_frames < cfg.minibatch_frames) {
                let si = order[cursor];
                batch.push(si);
                batch_frames += data.sequences[si].features.rows();
                cursor += 1;
            }

            let mut batch_grads = Gradients::zeros_like(&model);
            for &si in &batch {
                let seq = &data.sequences[si];
                let t_seq = seq.features.rows();
                let fwd = forward(&model, &seq.features)?;
                let (loss, mut dlogits) = cross_entropy(&fwd.posteriors, &seq.targets)?;
                let weight = t_seq as f64 / batch_frames as f64;
                dlogits.scale_in_place(S::from_f64(weight));
                let g = backward(&model, &fwd, &dlogits)?;
                batch_grads.add_scaled(&g, S::ONE)?;

                epoch_loss_sum += loss * t_seq as f64;
                epoch_frames += t_seq;
                for t in 0..t_seq {
                    if argmax_row(fwd.posteriors.row(t)) == argmax_row(seq.targets.row(t)) {
                        epoch_correct += 1;
                    }
                }
            }
            sgd_step_lr(&mut model, &batch_grads, &mut velocity, lr, cfg.momentum)?;
        }

        let stats = EpochStats {
            epoch: epoch + 1,
            loss: epoch_loss_sum / epoch_frames as f64,
            accuracy: epoch_correct as f64 / epoch_frames as f64,
        };
        if cfg.halve_lr_on_plateau && stats.loss >= prev_loss {
            lr *= 0.5;
        }
        prev_loss = stats.loss;
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok((model, trace))
}

/// Loss of the model on one sequence; the scalar function differentiated by
/// the finite-difference verifier.
pub fn model_loss<S: Scalar>(model: &Model<S>, x: &Matrix<S>, targets: &Matrix<S>) -> Result<f64> {
    let fwd = forward(model, x)?;
    let (loss, _) = cross_entropy(&fwd.posteriors, targets)?;
    Ok(loss)
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub checked: usize,
}

/// Verifies every analytic parameter gradient against central finite
/// differences of the loss, in the model's own precision (use `f64`).
///
/// The relative error uses `max(|fd|, |analytic|, 1e-6)` as denominator so
/// that exact zeros (dead ReLU paths) compare cleanly.
pub fn check_gradients(model: &Model<f64>, x: &Matrix<f64>, targets: &Matrix<f64>, step: f64) -> Result<GradCheck> {
    let fwd = forward(model, x)?;
    let (_, dlogits) = cross_entropy(&fwd.posteriors, targets)?;
    let analytic = backward(model, &fwd, &dlogits)?;

    let names = model.param_names();
    let mut work = model.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        checked: 0,
    };
    let n_tensors = model.params().len();
    for ti in 0..n_tensors {
        let n_elems = model.params()[ti].data().len();
        for ei in 0..n_elems {
            let orig = work.params()[ti].data()[ei];

            work.params_mut()[ti].data_mut()[ei] = orig + step;
            let up = model_loss(&work, x, targets)?;
            work.params_mut()[ti].data_mut()[ei] = orig - step;
            let down = model_loss(&work, x, targets)?;
            work.params_mut()[ti].data_mut()[ei] = orig;

            let fd = (up - down) / (2.0 * step);
            let an = analytic.tensors()[ti].data()[ei];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = format!("{}[{}]", names[ti], ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
