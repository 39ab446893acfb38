//! Model-architecture notation: parsing, formatting, and static analysis.
//!
//! The notation follows the block form
//! `3*72-4x[2048-512(20,20)]-3x2048-512-9004`: input context and dimension,
//! one or more memory-block groups, the dense tail, a pre-output projection
//! width and the output size. Inside parentheses the two-argument form
//! `(N1,N2)` implies unit strides; the four-argument form `(N1;N2;s1;s2)`
//! sets them explicitly. `x` and `×` are interchangeable and whitespace is
//! ignored.
//!
//! An optional prefix selects the model family and coefficient mode, e.g.
//! `dfsmn:`, `cfsmn:`, `fsmn-scalar:`, `dfsmn-noskip:`. Without a prefix the
//! string denotes a DFSMN with identity skips and vector coefficients.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Skip-connection mode of one memory block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    None,
    Identity,
}

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Memory block without identity term; its output feeds the next layer
    /// through a dedicated weight matrix alongside the un-filtered signal.
    Fsmn,
    /// Memory block on a linear projection with an identity term.
    Cfsmn,
    /// cFSMN plus strides and identity skip connections between blocks.
    Dfsmn,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Fsmn => "fsmn",
            Variant::Cfsmn => "cfsmn",
            Variant::Dfsmn => "dfsmn",
        }
    }
}

/// Memory-block coefficient sharing: one vector per tap, or one scalar per tap
/// tied across dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffMode {
    Vector,
    Scalar,
}

/// One memory-block layer: nonlinear width, projection width, tap orders,
/// strides, and skip mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub hidden_width: usize,
    pub proj_width: usize,
    /// Look-back order: number of past taps (the current frame is tap 0 and
    /// always included on top of these).
    pub n1: usize,
    /// Lookahead order: number of future taps.
    pub n2: usize,
    pub s1: usize,
    pub s2: usize,
    pub skip: Skip,
}

/// Parsed architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologySpec {
    pub input_dim: usize,
    pub context_left: usize,
    pub context_right: usize,
    pub blocks: Vec<BlockSpec>,
    pub dense_layers: usize,
    pub dense_width: usize,
    pub pre_output_proj: usize,
    pub output_dim: usize,
    pub variant: Variant,
    pub coeff_mode: CoeffMode,
}

impl TopologySpec {
    /// Width of the stacked input the first layer consumes.
    pub fn stacked_input(&self) -> usize {
        (self.context_left + 1 + self.context_right) * self.input_dim
    }

    /// Validates the structural invariants shared by parser and builders.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.pre_output_proj == 0 || self.output_dim == 0 || self.dense_width == 0 {
            return Err(Error::Config("widths must be nonzero".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("at least one memory-block layer is required".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.hidden_width == 0 || b.proj_width == 0 {
                return Err(Error::Config(format!("block {i}: widths must be nonzero")));
            }
            if b.s1 == 0 || b.s2 == 0 {
                return Err(Error::Config(format!("block {i}: strides must be >= 1")));
            }
        }
        if self.blocks[0].skip == Skip::Identity {
            return Err(Error::Config(
                "first block has no lower memory block to skip from".into(),
            ));
        }
        let any_identity = self.blocks.iter().any(|b| b.skip == Skip::Identity);
        if any_identity {
            let w = self.blocks[0].proj_width;
            if self.blocks.iter().any(|b| b.proj_width != w) {
                return Err(Error::Config(
                    "identity skips require equal projection widths across blocks".into(),
                ));
            }
            if self.blocks[1..].iter().any(|b| b.skip != Skip::Identity) {
                return Err(Error::Config(
                    "skip mode must be uniform across blocks above the first".into(),
                ));
            }
        }
        match self.variant {
            Variant::Dfsmn => {}
            Variant::Fsmn | Variant::Cfsmn => {
                if self.blocks.iter().any(|b| b.s1 != 1 || b.s2 != 1) {
                    return Err(Error::Config(format!(
                        "{} memory blocks take no strides",
                        self.variant.name()
                    )));
                }
                if any_identity {
                    return Err(Error::Config(format!(
                        "{} has no skip connections",
                        self.variant.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when blocks above the first carry identity skips.
    pub fn has_skips(&self) -> bool {
        self.blocks.iter().any(|b| b.skip == Skip::Identity)
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor { text, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek_char() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek_char(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn error(&self, expected: &str) -> Error {
        let found = match self.text[self.pos..].chars().next() {
            Some(c) => format!("'{c}'"),
            None => "end of input".into(),
        };
        Error::Parse {
            offset: self.pos,
            expected: expected.into(),
            found,
        }
    }

    /// Consumes `c` (for 'x' also accepts '×').
    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        match self.peek_char() {
            Some(got) if got == c || (c == 'x' && got == '×') => {
                self.pos += got.len_utf8();
                Ok(())
            }
            _ => Err(self.error(&format!("'{c}'"))),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        match self.peek_char() {
            Some(got) if got == c || (c == 'x' && got == '×') => {
                self.pos += got.len_utf8();
                true
            }
            _ => false,
        }
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek_char() {
            if c.is_ascii_digit() {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.error("integer"));
        }
        self.text[start..self.pos]
            .parse::<usize>()
            .map_err(|_| Error::Parse {
                offset: start,
                expected: "integer in range".into(),
                found: self.text[start..self.pos].into(),
            })
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek_char() {
            if c.is_ascii_alphabetic() || c == '-' || c == '_' {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        self.text[start..self.pos].to_string()
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.text.len()
    }
}

/// Parses the architecture notation into a validated [`TopologySpec`].
pub fn parse_topology(text: &str) -> Result<TopologySpec> {
    let mut cur = Cursor::new(text);

    // Optional family prefix, e.g. "dfsmn-noskip-scalar:".
    let mut variant = Variant::Dfsmn;
    let mut coeff_mode = CoeffMode::Vector;
    let mut skips = true;
    cur.skip_ws();
    if cur.peek_char().map_or(false, |c| c.is_ascii_alphabetic()) {
        let start = cur.pos;
        let word = cur.word();
        if !cur.eat(':') {
            return Err(Error::Parse {
                offset: start,
                expected: "variant prefix ending in ':'".into(),
                found: format!("'{word}'"),
            });
        }
        let mut parts = word.split('-');
        variant = match parts.next() {
            Some("fsmn") => Variant::Fsmn,
            Some("cfsmn") => Variant::Cfsmn,
            Some("dfsmn") => Variant::Dfsmn,
            _ => {
                return Err(Error::Parse {
                    offset: start,
                    expected: "one of fsmn|cfsmn|dfsmn".into(),
                    found: format!("'{word}'"),
                })
            }
        };
        if variant != Variant::Dfsmn {
            skips = false;
        }
        for part in parts {
            match part {
                "noskip" if variant == Variant::Dfsmn => skips = false,
                "scalar" => coeff_mode = CoeffMode::Scalar,
                _ => {
                    return Err(Error::Parse {
                        offset: start,
                        expected: "prefix flag noskip|scalar".into(),
                        found: format!("'{part}'"),
                    })
                }
            }
        }
    }

    // Context and input dimension: "<ctx>*<dim>".
    let ctx_offset = cur.pos;
    let context = cur.integer()?;
    cur.expect('*')?;
    let input_dim = cur.integer()?;
    if context == 0 || context % 2 == 0 {
        return Err(Error::Parse {
            offset: ctx_offset,
            expected: "odd context count (symmetric window)".into(),
            found: context.to_string(),
        });
    }
    let context_left = (context - 1) / 2;
    let context_right = context_left;

    // Block groups: "<k>x[<hidden>-<proj>(<orders>)]", one or more.
    let mut blocks: Vec<BlockSpec> = Vec::new();
    let default_skip = |idx: usize| {
        if skips && idx > 0 {
            Skip::Identity
        } else {
            Skip::None
        }
    };
    loop {
        cur.expect('-')?;
        let count_offset = cur.pos;
        let count = cur.integer()?;
        cur.expect('x')?;
        if !cur.eat('[') {
            // Dense tail reached: "<Nd>x<width>-<proj>-<out>".
            let dense_layers = count;
            let dense_width = cur.integer()?;
            cur.expect('-')?;
            let pre_output_proj = cur.integer()?;
            cur.expect('-')?;
            let output_dim = cur.integer()?;
            if !cur.at_end() {
                return Err(cur.error("end of input"));
            }
            if blocks.is_empty() {
                return Err(Error::Parse {
                    offset: count_offset,
                    expected: "at least one block group '<k>x[...]'".into(),
                    found: "dense tail".into(),
                });
            }
            let spec = TopologySpec {
                input_dim,
                context_left,
                context_right,
                blocks,
                dense_layers,
                dense_width,
                pre_output_proj,
                output_dim,
                variant,
                coeff_mode,
            };
            spec.validate().map_err(|e| match e {
                Error::Config(msg) => Error::Parse {
                    offset: 0,
                    expected: msg,
                    found: "invalid topology".into(),
                },
                other => other,
            })?;
            return Ok(spec);
        }
        if count == 0 {
            return Err(Error::Parse {
                offset: count_offset,
                expected: "block repeat count >= 1".into(),
                found: "0".into(),
            });
        }
        let hidden_width = cur.integer()?;
        cur.expect('-')?;
        let proj_width = cur.integer()?;
        cur.expect('(')?;
        let n1 = cur.integer()?;
        let (n2, s1, s2);
        if cur.eat(',') {
            n2 = cur.integer()?;
            s1 = 1;
            s2 = 1;
        } else {
            cur.expect(';')?;
            n2 = cur.integer()?;
            cur.expect(';')?;
            s1 = cur.integer()?;
            cur.expect(';')?;
            s2 = cur.integer()?;
        }
        cur.expect(')')?;
        cur.expect(']')?;
        for _ in 0..count {
            let idx = blocks.len();
            blocks.push(BlockSpec {
                hidden_width,
                proj_width,
                n1,
                n2,
                s1,
                s2,
                skip: default_skip(idx),
            });
        }
    }
}

/// Canonical string for a spec; inverse of [`parse_topology`].
///
/// Always prints the variant prefix and the four-argument stride form.
/// Adjacent identical blocks are merged into one counted group.
pub fn format_topology(spec: &TopologySpec) -> String {
    let mut out = String::new();
    out.push_str(spec.variant.name());
    if spec.variant == Variant::Dfsmn && spec.blocks.len() > 1 && !spec.has_skips() {
        out.push_str("-noskip");
    }
    if spec.coeff_mode == CoeffMode::Scalar {
        out.push_str("-scalar");
    }
    out.push(':');
    let ctx = spec.context_left + 1 + spec.context_right;
    let _ = write!(out, "{}*{}", ctx, spec.input_dim);

    let mut i = 0;
    while i < spec.blocks.len() {
        let b = spec.blocks[i];
        let mut count = 1;
        // Skip mode differs between block 0 and later blocks by construction,
        // so grouping compares only the printed fields.
        while i + count < spec.blocks.len() {
            let n = spec.blocks[i + count];
            if (n.hidden_width, n.proj_width, n.n1, n.n2, n.s1, n.s2)
                == (b.hidden_width, b.proj_width, b.n1, b.n2, b.s1, b.s2)
            {
                count += 1;
            } else {
                break;
            }
        }
        let _ = write!(
            out,
            "-{}x[{}-{}({};{};{};{})]",
            count, b.hidden_width, b.proj_width, b.n1, b.n2, b.s1, b.s2
        );
        i += count;
    }

    let _ = write!(
        out,
        "-{}x{}-{}-{}",
        spec.dense_layers, spec.dense_width, spec.pre_output_proj, spec.output_dim
    );
    out
}

// ---------------------------------------------------------------------------
// Static analysis

/// Output delay decomposed into the memory-block sum and the input-stacking
/// future context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latency {
    /// Sum over blocks of lookahead order times lookahead stride.
    pub block_frames: usize,
    /// Future frames consumed by input context stacking.
    pub input_context: usize,
}

impl Latency {
    pub fn total(&self) -> usize {
        self.block_frames + self.input_context
    }
}

/// Emission delay of the model in input frames.
pub fn latency_frames(spec: &TopologySpec) -> Latency {
    Latency {
        block_frames: spec.blocks.iter().map(|b| b.n2 * b.s2).sum(),
        input_context: spec.context_right,
    }
}

/// Memory-block latency in milliseconds at the given frame period.
pub fn latency_ms(spec: &TopologySpec, frame_period_ms: f64) -> Result<f64> {
    if !(frame_period_ms > 0.0) {
        return Err(Error::Config(format!(
            "frame period must be positive, got {frame_period_ms}"
        )));
    }
    Ok(latency_frames(spec).block_frames as f64 * frame_period_ms)
}

/// Input window one output frame depends on: `(past, future)` in raw frames.
pub fn receptive_field(spec: &TopologySpec) -> (usize, usize) {
    let past: usize = spec.context_left + spec.blocks.iter().map(|b| b.n1 * b.s1).sum::<usize>();
    let future: usize = spec.context_right + spec.blocks.iter().map(|b| b.n2 * b.s2).sum::<usize>();
    (past, future)
}

/// Exact learnable-parameter count.
pub fn param_count(spec: &TopologySpec) -> usize {
    let mut total = 0usize;
    let mut input = spec.stacked_input();
    let fsmn = spec.variant == Variant::Fsmn;
    for (i, b) in spec.blocks.iter().enumerate() {
        // Hidden layer; consumers of a previous memory output carry the extra
        // memory-path matrix in the fsmn variant.
        total += input * b.hidden_width + b.hidden_width;
        if fsmn && i > 0 {
            total += input * b.hidden_width;
        }
        // Projection.
        total += b.hidden_width * b.proj_width + b.proj_width;
        // Tap coefficients.
        let taps = b.n1 + 1 + b.n2;
        total += match spec.coeff_mode {
            CoeffMode::Vector => taps * b.proj_width,
            CoeffMode::Scalar => taps,
        };
        input = b.proj_width;
    }
    for i in 0..spec.dense_layers {
        total += input * spec.dense_width + spec.dense_width;
        if fsmn && i == 0 {
            total += input * spec.dense_width;
        }
        input = spec.dense_width;
    }
    total += input * spec.pre_output_proj + spec.pre_output_proj;
    if fsmn && spec.dense_layers == 0 {
        total += input * spec.pre_output_proj;
    }
    total += spec.pre_output_proj * spec.output_dim + spec.output_dim;
    total
}

/// Model size in mebibytes at 4 bytes per parameter.
pub fn size_mb(spec: &TopologySpec) -> f64 {
    param_count(spec) as f64 * 4.0 / (1024.0 * 1024.0)
}

/// Multiply-accumulate counts per frame, per layer, for throughput reporting.
///
/// A memory block costs `d * (N1 + 1 + N2)` MACs per frame regardless of
/// stride: strides widen the tap span, not the tap count.
pub fn mac_counts(spec: &TopologySpec) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let mut input = spec.stacked_input() as u64;
    let fsmn = spec.variant == Variant::Fsmn;
    for (i, b) in spec.blocks.iter().enumerate() {
        let hw = b.hidden_width as u64;
        let pw = b.proj_width as u64;
        let mut hidden = input * hw;
        if fsmn && i > 0 {
            hidden += input * hw;
        }
        out.push((format!("block{i}.hidden"), hidden));
        out.push((format!("block{i}.proj"), hw * pw));
        out.push((format!("block{i}.memory"), pw * (b.n1 + 1 + b.n2) as u64));
        input = pw;
    }
    for i in 0..spec.dense_layers {
        let w = spec.dense_width as u64;
        let mut macs = input * w;
        if fsmn && i == 0 {
            macs += input * w;
        }
        out.push((format!("dense{i}"), macs));
        input = w;
    }
    let mut pre = input * spec.pre_output_proj as u64;
    if fsmn && spec.dense_layers == 0 {
        pre += input * spec.pre_output_proj as u64;
    }
    out.push(("pre_output".into(), pre));
    out.push((
        "output".into(),
        spec.pre_output_proj as u64 * spec.output_dim as u64,
    ));
    out
}
