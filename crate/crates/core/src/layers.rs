//! Forward computation for memory blocks, dense/projection layers, and the
//! full model stack over whole sequences.
//!
//! All per-frame arithmetic lives in row kernels with a fixed accumulation
//! order (bias first, then inputs in ascending index, then taps in ascending
//! tap order). The streaming engine reuses the same kernels on ring buffers,
//! which makes stream and batch outputs identical to the last bit.

use crate::error::{Error, Result};
use crate::tensor::{accumulate_vec_mat, rand_init, softmax_rows, InitScheme, Matrix, Scalar, SeedRng};
use crate::topology::{CoeffMode, Skip, TopologySpec, Variant};

/// Tap coefficients and strides of one memory block.
///
/// `a` holds the look-back coefficients `a_0 ..= a_N1` (one row per tap,
/// current frame included as tap 0); `c` holds the lookahead coefficients
/// `c_1 ..= c_N2`. Rows have the block width in vector mode and width 1 in
/// scalar mode, where one coefficient is tied across all dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBlockParams<S: Scalar> {
    pub a: Matrix<S>,
    pub c: Matrix<S>,
    pub s1: usize,
    pub s2: usize,
    pub skip: Skip,
}

impl<S: Scalar> MemoryBlockParams<S> {
    pub fn n1(&self) -> usize {
        self.a.rows() - 1
    }

    pub fn n2(&self) -> usize {
        self.c.rows()
    }

    fn check_width(&self, d: usize) -> Result<()> {
        if self.a.rows() == 0 {
            return Err(Error::Internal("memory block needs the tap-0 coefficient".into()));
        }
        for (name, m) in [("a", &self.a), ("c", &self.c)] {
            if m.rows() > 0 && m.cols() != d && m.cols() != 1 {
                return Err(Error::shape(
                    format!("memory coefficients {name}"),
                    m.shape_string(),
                    format!("{}-wide frames", d),
                ));
            }
        }
        Ok(())
    }
}

/// Read access to frames by signed time index; `None` outside the sequence
/// realizes zero padding. Implemented by matrices and stream ring buffers.
pub trait FrameSource<S: Scalar> {
    fn frame(&self, t: isize) -> Option<&[S]>;
}

impl<S: Scalar> FrameSource<S> for Matrix<S> {
    fn frame(&self, t: isize) -> Option<&[S]> {
        if t >= 0 && (t as usize) < self.rows() {
            Some(self.row(t as usize))
        } else {
            None
        }
    }
}

fn add_weighted<S: Scalar>(out: &mut [S], coeff: &[S], frame: &[S]) {
    if coeff.len() == 1 {
        let c = coeff[0];
        for (o, &v) in out.iter_mut().zip(frame) {
            *o += c * v;
        }
    } else {
        for ((o, &c), &v) in out.iter_mut().zip(coeff).zip(frame) {
            *o += c * v;
        }
    }
}

/// One output frame of a memory block; the single code path for batch and
/// streaming evaluation.
///
/// `identity` selects the unconditioned current-frame term (present in the
/// compact and deep variants, absent in the plain FSMN encoding).
pub(crate) fn memory_block_row<S: Scalar>(
    params: &MemoryBlockParams<S>,
    identity: bool,
    src: &dyn FrameSource<S>,
    t: isize,
    skip_row: Option<&[S]>,
    out: &mut [S],
) {
    out.iter_mut().for_each(|o| *o = S::ZERO);
    if let Some(skip) = skip_row {
        for (o, &v) in out.iter_mut().zip(skip) {
            *o += v;
        }
    }
    if identity {
        if let Some(p) = src.frame(t) {
            for (o, &v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
    }
    for i in 0..=params.n1() {
        if let Some(p) = src.frame(t - (params.s1 * i) as isize) {
            add_weighted(out, params.a.row(i), p);
        }
    }
    for j in 1..=params.n2() {
        if let Some(p) = src.frame(t + (params.s2 * j) as isize) {
            add_weighted(out, params.c.row(j - 1), p);
        }
    }
}

fn apply_memory<S: Scalar>(
    p: &Matrix<S>,
    skip_in: Option<&Matrix<S>>,
    params: &MemoryBlockParams<S>,
    identity: bool,
) -> Result<Matrix<S>> {
    params.check_width(p.cols())?;
    if let Some(skip) = skip_in {
        if skip.shape() != p.shape() {
            return Err(Error::shape("memory skip input", skip.shape_string(), p.shape_string()));
        }
    }
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for t in 0..p.rows() {
        let skip_row = skip_in.map(|s| s.row(t));
        // Split borrow: read source rows from `p`, write into `out`.
        memory_block_row(params, identity, p, t as isize, skip_row, out.row_mut(t));
    }
    Ok(out)
}

/// Plain FSMN memory block: weighted past/future taps, no identity term,
/// unit strides.
pub fn memory_block_vfsmn<S: Scalar>(h: &Matrix<S>, params: &MemoryBlockParams<S>) -> Result<Matrix<S>> {
    if params.s1 != 1 || params.s2 != 1 {
        return Err(Error::Config("plain FSMN memory blocks take no strides".into()));
    }
    if params.skip != Skip::None {
        return Err(Error::Config("plain FSMN memory blocks take no skip input".into()));
    }
    apply_memory(h, None, params, false)
}

/// Compact-FSMN memory block: identity term plus taps, unit strides.
pub fn memory_block_cfsmn<S: Scalar>(p: &Matrix<S>, params: &MemoryBlockParams<S>) -> Result<Matrix<S>> {
    if params.s1 != 1 || params.s2 != 1 {
        return Err(Error::Config("compact FSMN memory blocks take no strides".into()));
    }
    if params.skip != Skip::None {
        return Err(Error::Config("compact FSMN memory blocks take no skip input".into()));
    }
    apply_memory(p, None, params, true)
}

/// Deep-FSMN memory block: identity term, strided taps, and an optional
/// identity skip from the memory output one block below.
pub fn memory_block_dfsmn<S: Scalar>(
    p: &Matrix<S>,
    skip_in: Option<&Matrix<S>>,
    params: &MemoryBlockParams<S>,
) -> Result<Matrix<S>> {
    match (params.skip, skip_in) {
        (Skip::Identity, None) => {
            return Err(Error::Config("block declares an identity skip but no skip input given".into()))
        }
        (Skip::None, Some(_)) => {
            return Err(Error::Config("skip input given to a block without a skip connection".into()))
        }
        _ => {}
    }
    apply_memory(p, skip_in, params, true)
}

/// Affine layer with optional ReLU and an optional second input path.
///
/// The second path carries a memory-block output into the next hidden layer
/// through its own weight matrix (plain-FSMN wiring).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S: Scalar> {
    pub w: Matrix<S>,
    pub w_mem: Option<Matrix<S>>,
    /// Bias as a `1 x out` row.
    pub b: Matrix<S>,
    pub relu: bool,
}

impl<S: Scalar> Dense<S> {
    pub fn in_width(&self) -> usize {
        self.w.rows()
    }

    pub fn out_width(&self) -> usize {
        self.w.cols()
    }

    /// One output frame; shared by batch and streaming paths.
    pub(crate) fn forward_row(&self, x: &[S], x_mem: Option<&[S]>, out: &mut [S]) {
        out.copy_from_slice(self.b.row(0));
        accumulate_vec_mat(x, &self.w, out);
        if let Some(wm) = &self.w_mem {
            accumulate_vec_mat(x_mem.expect("memory path input"), wm, out);
        }
        if self.relu {
            for o in out.iter_mut() {
                *o = o.maximum(S::ZERO);
            }
        }
    }

    /// Whole-sequence forward; returns pre-activations and activations.
    pub fn forward(&self, x: &Matrix<S>, x_mem: Option<&Matrix<S>>) -> Result<(Matrix<S>, Matrix<S>)> {
        if x.cols() != self.w.rows() {
            return Err(Error::shape("dense input", x.shape_string(), self.w.shape_string()));
        }
        match (&self.w_mem, x_mem) {
            (Some(wm), Some(xm)) => {
                if xm.cols() != wm.rows() || xm.rows() != x.rows() {
                    return Err(Error::shape("dense memory input", xm.shape_string(), wm.shape_string()));
                }
            }
            (Some(_), None) => {
                return Err(Error::shape("dense memory input", "missing".to_string(), "required".to_string()))
            }
            (None, Some(_)) => {
                return Err(Error::shape("dense memory input", "given".to_string(), "not wired".to_string()))
            }
            (None, None) => {}
        }
        let mut pre = Matrix::zeros(x.rows(), self.out_width());
        for t in 0..x.rows() {
            let row = pre.row_mut(t);
            row.copy_from_slice(self.b.row(0));
            accumulate_vec_mat(x.row(t), &self.w, row);
            if let Some(wm) = &self.w_mem {
                accumulate_vec_mat(x_mem.unwrap().row(t), wm, row);
            }
        }
        let post = if self.relu {
            let mut p = pre.clone();
            for v in p.data_mut() {
                *v = v.maximum(S::ZERO);
            }
            p
        } else {
            pre.clone()
        };
        Ok((pre, post))
    }
}

/// Hidden-layer update fed by both the raw signal and the memory output.
pub fn fsmn_next_hidden<S: Scalar>(h: &Matrix<S>, h_tilde: &Matrix<S>, params: &Dense<S>) -> Result<Matrix<S>> {
    if params.w_mem.is_none() {
        return Err(Error::Config("fsmn_next_hidden needs a layer with a memory-path matrix".into()));
    }
    let (_, post) = params.forward(h, Some(h_tilde))?;
    Ok(post)
}

/// One memory-block layer: hidden nonlinearity, linear projection, memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<S: Scalar> {
    pub hidden: Dense<S>,
    pub proj: Dense<S>,
    pub memory: MemoryBlockParams<S>,
}

/// A complete FSMN-family network, laid out exactly as its topology spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar> {
    pub spec: TopologySpec,
    pub blocks: Vec<Block<S>>,
    pub dense: Vec<Dense<S>>,
    pub pre_out: Dense<S>,
    pub output: Dense<S>,
}

fn coeff_cols(spec: &TopologySpec, block_width: usize) -> usize {
    match spec.coeff_mode {
        CoeffMode::Vector => block_width,
        CoeffMode::Scalar => 1,
    }
}

impl<S: Scalar> Model<S> {
    /// Whether memory outputs travel on a dedicated second path.
    pub fn split_memory_path(&self) -> bool {
        self.spec.variant == Variant::Fsmn
    }

    /// Whether memory blocks include the unconditioned current-frame term.
    pub fn memory_identity_term(&self) -> bool {
        self.spec.variant != Variant::Fsmn
    }

    /// All-zero parameters with the shapes dictated by `spec`.
    pub fn zeros(spec: TopologySpec) -> Result<Self> {
        spec.validate()?;
        let split = spec.variant == Variant::Fsmn;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut input = spec.stacked_input();
        for (i, b) in spec.blocks.iter().enumerate() {
            let hidden = Dense {
                w: Matrix::zeros(input, b.hidden_width),
                w_mem: (split && i > 0).then(|| Matrix::zeros(input, b.hidden_width)),
                b: Matrix::zeros(1, b.hidden_width),
                relu: true,
            };
            let proj = Dense {
                w: Matrix::zeros(b.hidden_width, b.proj_width),
                w_mem: None,
                b: Matrix::zeros(1, b.proj_width),
                relu: false,
            };
            let dc = coeff_cols(&spec, b.proj_width);
            let memory = MemoryBlockParams {
                a: Matrix::zeros(b.n1 + 1, dc),
                c: Matrix::zeros(b.n2, dc),
                s1: b.s1,
                s2: b.s2,
                skip: b.skip,
            };
            blocks.push(Block { hidden, proj, memory });
            input = b.proj_width;
        }
        let mut dense = Vec::with_capacity(spec.dense_layers);
        for i in 0..spec.dense_layers {
            dense.push(Dense {
                w: Matrix::zeros(input, spec.dense_width),
                w_mem: (split && i == 0).then(|| Matrix::zeros(input, spec.dense_width)),
                b: Matrix::zeros(1, spec.dense_width),
                relu: true,
            });
            input = spec.dense_width;
        }
        let pre_out = Dense {
            w: Matrix::zeros(input, spec.pre_output_proj),
            w_mem: (split && spec.dense_layers == 0).then(|| Matrix::zeros(input, spec.pre_output_proj)),
            b: Matrix::zeros(1, spec.pre_output_proj),
            relu: false,
        };
        let output = Dense {
            w: Matrix::zeros(spec.pre_output_proj, spec.output_dim),
            w_mem: None,
            b: Matrix::zeros(1, spec.output_dim),
            relu: false,
        };
        Ok(Model {
            spec,
            blocks,
            dense,
            pre_out,
            output,
        })
    }

    /// Random initialization: ReLU layers use uniform `±sqrt(6/fan_in)`,
    /// linear layers `±sqrt(6/(fan_in+fan_out))`, biases zero, tap
    /// coefficients uniform in `±0.08`.
    pub fn init(spec: TopologySpec, seed: u64) -> Result<Self> {
        let mut model = Model::zeros(spec)?;
        let mut rng = SeedRng::new(seed);
        let init_dense = |d: &mut Dense<S>, rng: &mut SeedRng| -> Result<()> {
            let denom = if d.relu {
                d.w.rows() as f64
            } else {
                (d.w.rows() + d.w.cols()) as f64
            };
            let bound = (6.0 / denom).sqrt();
            d.w = rand_init(rng, d.w.rows(), d.w.cols(), InitScheme::Uniform { lo: -bound, hi: bound })?;
            if let Some(wm) = &mut d.w_mem {
                let bound = (6.0 / wm.rows() as f64).sqrt();
                *wm = rand_init(rng, wm.rows(), wm.cols(), InitScheme::Uniform { lo: -bound, hi: bound })?;
            }
            Ok(())
        };
        for b in &mut model.blocks {
            init_dense(&mut b.hidden, &mut rng)?;
            init_dense(&mut b.proj, &mut rng)?;
            b.memory.a = rand_init(&mut rng, b.memory.a.rows(), b.memory.a.cols(), InitScheme::Uniform { lo: -0.08, hi: 0.08 })?;
            b.memory.c = rand_init(&mut rng, b.memory.c.rows(), b.memory.c.cols(), InitScheme::Uniform { lo: -0.08, hi: 0.08 })?;
        }
        for d in &mut model.dense {
            init_dense(d, &mut rng)?;
        }
        init_dense(&mut model.pre_out, &mut rng)?;
        init_dense(&mut model.output, &mut rng)?;
        Ok(model)
    }

    /// Parameter tensors in the canonical (checkpoint) order.
    pub fn params(&self) -> Vec<&Matrix<S>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.hidden.w);
            if let Some(wm) = &b.hidden.w_mem {
                v.push(wm);
            }
            v.push(&b.hidden.b);
            v.push(&b.proj.w);
            v.push(&b.proj.b);
            v.push(&b.memory.a);
            v.push(&b.memory.c);
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

    /// Mutable view of the same tensors, same order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut v: Vec<&mut Matrix<S>> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.hidden.w);
            if let Some(wm) = &mut b.hidden.w_mem {
                v.push(wm);
            }
            v.push(&mut b.hidden.b);
            v.push(&mut b.proj.w);
            v.push(&mut b.proj.b);
            v.push(&mut b.memory.a);
            v.push(&mut b.memory.c);
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

    /// Human-readable tensor names aligned with [`Model::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push(format!("block{i}.hidden.w"));
            if b.hidden.w_mem.is_some() {
                v.push(format!("block{i}.hidden.w_mem"));
            }
            v.push(format!("block{i}.hidden.b"));
            v.push(format!("block{i}.proj.w"));
            v.push(format!("block{i}.proj.b"));
            v.push(format!("block{i}.memory.a"));
            v.push(format!("block{i}.memory.c"));
        }
        for (i, d) in self.dense.iter().enumerate() {
            v.push(format!("dense{i}.w"));
            if d.w_mem.is_some() {
                v.push(format!("dense{i}.w_mem"));
            }
            v.push(format!("dense{i}.b"));
        }
        v.push("pre_out.w".into());
        if self.pre_out.w_mem.is_some() {
            v.push("pre_out.w_mem".into());
        }
        v.push("pre_out.b".into());
        v.push("output.w".into());
        v.push("output.b".into());
        v
    }

    /// Converts all parameters to another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            spec: self.spec.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    hidden: cast_dense(&b.hidden),
                    proj: cast_dense(&b.proj),
                    memory: MemoryBlockParams {
                        a: b.memory.a.cast(),
                        c: b.memory.c.cast(),
                        s1: b.memory.s1,
                        s2: b.memory.s2,
                        skip: b.memory.skip,
                    },
                })
                .collect(),
            dense: self.dense.iter().map(cast_dense).collect(),
            pre_out: cast_dense(&self.pre_out),
            output: cast_dense(&self.output),
        }
    }
}

fn cast_dense<S: Scalar, T: Scalar>(d: &Dense<S>) -> Dense<T> {
    Dense {
        w: d.w.cast(),
        w_mem: d.w_mem.as_ref().map(|m| m.cast()),
        b: d.b.cast(),
        relu: d.relu,
    }
}

/// Every intermediate of one forward pass, retained for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache<S: Scalar> {
    pub input: Matrix<S>,
    pub block_pre: Vec<Matrix<S>>,
    pub block_hidden: Vec<Matrix<S>>,
    pub block_proj: Vec<Matrix<S>>,
    pub block_memory: Vec<Matrix<S>>,
    pub dense_pre: Vec<Matrix<S>>,
    pub dense_hidden: Vec<Matrix<S>>,
    pub pre_out: Matrix<S>,
    pub logits: Matrix<S>,
    pub posteriors: Matrix<S>,
}

/// Whole-sequence forward pass over stacked input frames.
pub fn forward<S: Scalar>(model: &Model<S>, x: &Matrix<S>) -> Result<ForwardCache<S>> {
    let want = model.spec.stacked_input();
    if x.cols() != want {
        return Err(Error::shape(
            "model input",
            x.shape_string(),
            format!("Tx{want}"),
        ));
    }
    let split = model.split_memory_path();
    let identity = model.memory_identity_term();

    let mut cache = ForwardCache {
        input: x.clone(),
        block_pre: Vec::new(),
        block_hidden: Vec::new(),
        block_proj: Vec::new(),
        block_memory: Vec::new(),
        dense_pre: Vec::new(),
        dense_hidden: Vec::new(),
        pre_out: Matrix::zeros(0, 0),
        logits: Matrix::zeros(0, 0),
        posteriors: Matrix::zeros(0, 0),
    };

    let mut main = x.clone();
    let mut mem: Option<Matrix<S>> = None;
    for (i, block) in model.blocks.iter().enumerate() {
        let (pre, hidden) = block.hidden.forward(&main, mem.as_ref())?;
        let (_, proj) = block.proj.forward(&hidden, None)?;
        let skip_in = (block.memory.skip == Skip::Identity && i > 0).then(|| &cache.block_memory[i - 1]);
        let memory = apply_memory(&proj, skip_in, &block.memory, identity)?;
        cache.block_pre.push(pre);
        cache.block_hidden.push(hidden);
        cache.block_proj.push(proj.clone());
        if split {
            main = proj;
            mem = Some(memory.clone());
        } else {
            main = memory.clone();
            mem = None;
        }
        cache.block_memory.push(memory);
    }
    for d in &model.dense {
        let (pre, hidden) = d.forward(&main, if d.w_mem.is_some() { mem.as_ref() } else { None })?;
        if d.w_mem.is_some() {
            mem = None;
        }
        cache.dense_pre.push(pre);
        main = hidden.clone();
        cache.dense_hidden.push(hidden);
    }
    let (_, pre_out) = model
        .pre_out
        .forward(&main, if model.pre_out.w_mem.is_some() { mem.as_ref() } else { None })?;
    cache.pre_out = pre_out;
    let (_, logits) = model.output.forward(&cache.pre_out, None)?;
    cache.posteriors = softmax_rows(&logits);
    cache.logits = logits;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_init, InitScheme, SeedRng};
    use crate::topology::parse_topology;

    fn params_1d(a: &[f64], c: &[f64], s1: usize, s2: usize) -> MemoryBlockParams<f64> {
        MemoryBlockParams {
            a: Matrix::from_rows(&a.iter().map(|&v| vec![v]).collect::<Vec<_>>()),
            c: Matrix::from_rows(&c.iter().map(|&v| vec![v]).collect::<Vec<_>>()),
            s1,
            s2,
            skip: Skip::None,
        }
    }

    fn col(values: &[f64]) -> Matrix<f64> {
        Matrix::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>())
    }

    /// Independent direct-summation oracle for the memory-block formulas.
    fn memory_oracle(
        p: &Matrix<f64>,
        skip_in: Option<&Matrix<f64>>,
        params: &MemoryBlockParams<f64>,
        identity: bool,
    ) -> Matrix<f64> {
        let (t_len, d) = p.shape();
        let coeff = |m: &Matrix<f64>, i: usize, k: usize| -> f64 {
            if m.cols() == 1 {
                m.get(i, 0)
            } else {
                m.get(i, k)
            }
        };
        let mut out = Matrix::zeros(t_len, d);
        for t in 0..t_len as isize {
            for k in 0..d {
                let mut acc = 0.0;
                if let Some(s) = skip_in {
                    acc += s.get(t as usize, k);
                }
                if identity {
                    acc += p.get(t as usize, k);
                }
                for i in 0..=params.n1() {
                    let tap = t - (params.s1 * i) as isize;
                    if tap >= 0 && tap < t_len as isize {
                        acc += coeff(&params.a, i, k) * p.get(tap as usize, k);
                    }
                }
                for j in 1..=params.n2() {
                    let tap = t + (params.s2 * j) as isize;
                    if tap >= 0 && tap < t_len as isize {
                        acc += coeff(&params.c, j - 1, k) * p.get(tap as usize, k);
                    }
                }
                out.set(t as usize, k, acc);
            }
        }
        out
    }

    fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn vfsmn_identity_taps() {
        let h = col(&[3.0, -1.0, 2.0]);
        let params = params_1d(&[1.0], &[], 1, 1);
        assert_eq!(memory_block_vfsmn(&h, &params).unwrap(), h);
    }

    #[test]
    fn vfsmn_hand_case() {
        let h = col(&[1.0, 2.0, 3.0]);
        let params = params_1d(&[1.0, 0.5], &[0.25], 1, 1);
        let out = memory_block_vfsmn(&h, &params).unwrap();
        assert_eq!(out.data(), &[1.5, 3.25, 4.0]);
    }

    #[test]
    fn cfsmn_zero_coefficients_is_identity() {
        let p = col(&[5.0, -2.0, 0.5]);
        let params = params_1d(&[0.0, 0.0], &[0.0], 1, 1);
        assert_eq!(memory_block_cfsmn(&p, &params).unwrap(), p);
    }

    #[test]
    fn cfsmn_hand_case() {
        let p = col(&[1.0, 2.0, 3.0]);
        let params = params_1d(&[1.0, 0.5], &[0.25], 1, 1);
        let out = memory_block_cfsmn(&p, &params).unwrap();
        assert_eq!(out.data(), &[2.5, 5.25, 7.0]);
    }

    #[test]
    fn dfsmn_strided_tap_hand_case() {
        let p = col(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let params = params_1d(&[0.0, 1.0], &[], 2, 1);
        let out = memory_block_dfsmn(&p, None, &params).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn dfsmn_skip_skeleton() {
        let p = col(&[1.0, 2.0]);
        let skip = col(&[10.0, 20.0]);
        let mut params = params_1d(&[0.0], &[], 1, 1);
        params.skip = Skip::Identity;
        let out = memory_block_dfsmn(&p, Some(&skip), &params).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0]);
    }

    #[test]
    fn dfsmn_skip_argument_mismatch() {
        let p = col(&[1.0]);
        let mut params = params_1d(&[1.0], &[], 1, 1);
        params.skip = Skip::Identity;
        assert!(memory_block_dfsmn(&p, None, &params).is_err());
        params.skip = Skip::None;
        assert!(memory_block_dfsmn(&p, Some(&p), &params).is_err());
    }

    #[test]
    fn dfsmn_skip_width_mismatch_is_shape_error() {
        let p = Matrix::<f64>::zeros(3, 2);
        let skip = Matrix::<f64>::zeros(3, 3);
        let mut params = MemoryBlockParams {
            a: Matrix::zeros(1, 2),
            c: Matrix::zeros(0, 2),
            s1: 1,
            s2: 1,
            skip: Skip::Identity,
        };
        params.a.set(0, 0, 1.0);
        assert!(matches!(
            memory_block_dfsmn(&p, Some(&skip), &params),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dfsmn_unit_stride_equals_cfsmn() {
        let mut rng = SeedRng::new(17);
        for _ in 0..20 {
            let p: Matrix<f64> = rand_init(&mut rng, 9, 4, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
            let params = MemoryBlockParams {
                a: rand_init(&mut rng, 4, 4, InitScheme::Uniform { lo: -0.5, hi: 0.5 }).unwrap(),
                c: rand_init(&mut rng, 2, 4, InitScheme::Uniform { lo: -0.5, hi: 0.5 }).unwrap(),
                s1: 1,
                s2: 1,
                skip: Skip::None,
            };
            let d = memory_block_dfsmn(&p, None, &params).unwrap();
            let c = memory_block_cfsmn(&p, &params).unwrap();
            assert_eq!(d, c);
        }
    }

    #[test]
    fn memory_blocks_match_direct_summation_oracle() {
        let mut rng = SeedRng::new(23);
        for case in 0..30 {
            let t_len = 4 + case % 7;
            let d = 1 + case % 5;
            let n1 = case % 4;
            let n2 = (case / 2) % 3;
            let s1 = 1 + case % 3;
            let s2 = 1 + (case / 3) % 3;
            let p: Matrix<f64> =
                rand_init(&mut rng, t_len, d, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
            let scalar_mode = case % 2 == 0;
            let dc = if scalar_mode { 1 } else { d };
            let params = MemoryBlockParams {
                a: rand_init(&mut rng, n1 + 1, dc, InitScheme::Uniform { lo: -0.7, hi: 0.7 }).unwrap(),
                c: rand_init(&mut rng, n2, dc, InitScheme::Uniform { lo: -0.7, hi: 0.7 }).unwrap(),
                s1,
                s2,
                skip: Skip::None,
            };
            let got = memory_block_dfsmn(&p, None, &params).unwrap();
            let want = memory_oracle(&p, None, &params, true);
            assert!(max_abs_diff(&got, &want) <= 1e-12, "case {case}");
        }
    }

    #[test]
    fn memory_block_f32_matches_f64_oracle() {
        let mut rng = SeedRng::new(29);
        let p64: Matrix<f64> = rand_init(&mut rng, 12, 3, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let params64 = MemoryBlockParams {
            a: rand_init(&mut rng, 3, 3, InitScheme::Uniform { lo: -0.5, hi: 0.5 }).unwrap(),
            c: rand_init(&mut rng, 2, 3, InitScheme::Uniform { lo: -0.5, hi: 0.5 }).unwrap(),
            s1: 2,
            s2: 1,
            skip: Skip::None,
        };
        let p32: Matrix<f32> = p64.cast();
        let params32 = MemoryBlockParams {
            a: params64.a.cast(),
            c: params64.c.cast(),
            s1: 2,
            s2: 1,
            skip: Skip::None,
        };
        let got32 = memory_block_dfsmn(&p32, None, &params32).unwrap();
        let want = memory_oracle(&p64, None, &params64, true);
        for (g, w) in got32.data().iter().zip(want.data()) {
            let rel = (g.to_f64() - w).abs() / w.abs().max(1e-3);
            assert!(rel <= 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn fsmn_next_hidden_reductions() {
        let mut rng = SeedRng::new(41);
        let h: Matrix<f64> = rand_init(&mut rng, 6, 3, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let ht: Matrix<f64> = rand_init(&mut rng, 6, 3, InitScheme::Uniform { lo: 0.0, hi: 1.0 }).unwrap();

        // Zero memory path reduces to the plain dense layer.
        let w = rand_init(&mut rng, 3, 4, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let layer = Dense {
            w: w.clone(),
            w_mem: Some(Matrix::zeros(3, 4)),
            b: Matrix::zeros(1, 4),
            relu: true,
        };
        let out = fsmn_next_hidden(&h, &ht, &layer).unwrap();
        let plain = Dense { w, w_mem: None, b: Matrix::zeros(1, 4), relu: true };
        let (_, want) = plain.forward(&h, None).unwrap();
        assert_eq!(out, want);

        // W = 0, W_mem = I, b = 0 on nonnegative memory input passes it through.
        let mut eye = Matrix::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let layer = Dense {
            w: Matrix::zeros(3, 3),
            w_mem: Some(eye),
            b: Matrix::zeros(1, 3),
            relu: true,
        };
        let out = fsmn_next_hidden(&h, &ht, &layer).unwrap();
        assert_eq!(out, ht);
    }

    #[test]
    fn forward_zero_weights_gives_uniform_posteriors() {
        let spec = parse_topology("1*4-1x[6-3(0,0)]-1x6-3-5").unwrap();
        let model: Model<f64> = Model::zeros(spec).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.1, 0.7, 0.2]]);
        let fwd = forward(&model, &x).unwrap();
        for k in 0..5 {
            assert!((fwd.posteriors.get(0, k) - 0.2).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_posterior_rows_sum_to_one() {
        let mut rng = SeedRng::new(55);
        let spec = parse_topology("3*4-2x[8-4(2;1;2;1)]-2x8-4-6").unwrap();
        let model: Model<f64> = Model::init(spec.clone(), 7).unwrap();
        let x: Matrix<f64> =
            rand_init(&mut rng, 11, spec.stacked_input(), InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let fwd = forward(&model, &x).unwrap();
        for t in 0..fwd.posteriors.rows() {
            let sum: f64 = fwd.posteriors.row(t).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
        assert!(fwd.posteriors.is_all_finite());
    }

    #[test]
    fn forward_width_mismatch() {
        let spec = parse_topology("1*4-1x[6-3(0,0)]-1x6-3-5").unwrap();
        let model: Model<f32> = Model::zeros(spec).unwrap();
        let x = Matrix::<f32>::zeros(2, 7);
        assert!(matches!(forward(&model, &x), Err(Error::Shape { .. })));
    }

    /// Reduction chain: DFSMN with unit strides and no skips equals cFSMN;
    /// cFSMN with zero coefficients equals the projected DNN.
    #[test]
    fn full_model_reduction_chain() {
        let mut rng = SeedRng::new(71);
        for seed in 0..10u64 {
            let dfsmn_spec = parse_topology("dfsmn-noskip:1*5-2x[8-4(3;2;1;1)]-1x8-4-3").unwrap();
            let cfsmn_spec = parse_topology("cfsmn:1*5-2x[8-4(3,2)]-1x8-4-3").unwrap();
            let d_model: Model<f64> = Model::init(dfsmn_spec, seed).unwrap();
            let mut c_model: Model<f64> = Model::init(cfsmn_spec, seed).unwrap();
            // Same init order gives identical tensors; copy to be explicit.
            for (dst, src) in c_model.params_mut().into_iter().zip(d_model.params()) {
                *dst = src.clone();
            }
            let x: Matrix<f64> =
                rand_init(&mut rng, 9, 5, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
            let df = forward(&d_model, &x).unwrap();
            let cf = forward(&c_model, &x).unwrap();
            let diff = max_abs_diff(&df.logits, &cf.logits);
            assert!(diff <= 1e-12, "seed {seed}: {diff}");

            // Zero coefficients: memory output equals its input projection.
            let mut plain = c_model.clone();
            for b in &mut plain.blocks {
                b.memory.a.fill(0.0);
                b.memory.c.fill(0.0);
            }
            let pf = forward(&plain, &x).unwrap();
            for (pt, p) in pf.block_memory.iter().zip(pf.block_proj.iter()) {
                assert_eq!(pt, p);
            }
        }
    }
}
