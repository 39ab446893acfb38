//! Synthetic long-range-dependency tasks and the dataset binary format.
//!
//! Three task families probe the three architecture knobs separately:
//! `delayed_echo` needs look-back taps, `future_cue` needs lookahead taps,
//! and `sparse_parity` needs accumulation over a window.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, SeedRng};

/// One labelled sequence: per-frame features and target distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<S: Scalar> {
    pub features: Matrix<S>,
    pub targets: Matrix<S>,
}

/// A set of sequences at a common frame period.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset<S: Scalar> {
    pub sequences: Vec<Sequence<S>>,
    pub frame_period_ms: f64,
}

impl<S: Scalar> FrameDataset<S> {
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.features.rows()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.features.cols())
    }

    pub fn num_classes(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.targets.cols())
    }

    pub fn cast<T: Scalar>(&self) -> FrameDataset<T> {
        FrameDataset {
            sequences: self
                .sequences
                .iter()
                .map(|s| Sequence {
                    features: s.features.cast(),
                    targets: s.targets.cast(),
                })
                .collect(),
            frame_period_ms: self.frame_period_ms,
        }
    }
}

/// Which synthetic task to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Label at `t` is the class encoded in the features at `t - delay`.
    DelayedEcho { delay: usize },
    /// Label at `t` is the class encoded in the features at `t + lead`.
    FutureCue { lead: usize },
    /// Binary label: parity of marked events within `[t - window, t]`.
    SparseParity { window: usize },
}

/// Full description of a generated dataset.
#[derive(Debug, Clone, Copy)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl TaskSpec {
    fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::Config("dataset must have sequences and frames".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be nonzero".into()));
        }
        let horizon = match self.kind {
            TaskKind::DelayedEcho { delay } => delay,
            TaskKind::FutureCue { lead } => lead,
            TaskKind::SparseParity { window } => window,
        };
        if horizon >= self.frames_per_sequence {
            return Err(Error::Config(format!(
                "task horizon {horizon} must be below the sequence length {}",
                self.frames_per_sequence
            )));
        }
        match self.kind {
            TaskKind::SparseParity { .. } => {
                if self.num_classes != 2 {
                    return Err(Error::Config("sparse parity is a binary task".into()));
                }
            }
            _ => {
                if self.num_classes < 2 {
                    return Err(Error::Config("need at least two classes".into()));
                }
                if self.num_classes > self.feature_dim {
                    return Err(Error::Config(
                        "class signatures need feature_dim >= num_classes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Class signature vectors: orthogonal one-hot patterns scaled to unit energy,
/// so labels are decodable from a single frame by nearest signature.
pub fn class_signatures<S: Scalar>(num_classes: usize, feature_dim: usize) -> Matrix<S> {
    let mut m = Matrix::zeros(num_classes, feature_dim);
    for k in 0..num_classes {
        m.set(k, k, S::ONE);
    }
    m
}

/// Nearest-signature decoder used by the generator's self-check and tests.
pub fn decode_class<S: Scalar>(frame: &[S], signatures: &Matrix<S>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..signatures.rows() {
        let d: f64 = frame
            .iter()
            .zip(signatures.row(k))
            .map(|(&x, &s)| {
                let diff = x.to_f64() - s.to_f64();
                diff * diff
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Generates a deterministic dataset for `task`.
///
/// Frames whose defining frame falls outside the sequence (the first `delay`
/// frames of an echo task, the last `lead` frames of a cue task) get labels
/// drawn at random: they are chance frames by construction.
pub fn generate<S: Scalar>(task: &TaskSpec) -> Result<FrameDataset<S>> {
    task.validate()?;
    let root = SeedRng::new(task.seed);
    let signatures: Matrix<f64> = class_signatures(task.num_classes, task.feature_dim);
    let mut sequences = Vec::with_capacity(task.num_sequences);
    for si in 0..task.num_sequences {
        let mut rng = root.derive(si as u64);
        let t_len = task.frames_per_sequence;
        let k = task.num_classes;
        let mut features = Matrix::<f64>::zeros(t_len, task.feature_dim);
        let mut labels = vec![0usize; t_len];
        match task.kind {
            TaskKind::DelayedEcho { delay } => {
                let classes: Vec<usize> = (0..t_len).map(|_| rng.gen_range_usize(k)).collect();
                for t in 0..t_len {
                    emit_frame(&mut features, t, signatures.row(classes[t]), task.noise_std, &mut rng);
                    labels[t] = if t >= delay {
                        classes[t - delay]
                    } else {
                        rng.gen_range_usize(k)
                    };
                }
            }
            TaskKind::FutureCue { lead } => {
                let classes: Vec<usize> = (0..t_len).map(|_| rng.gen_range_usize(k)).collect();
                for t in 0..t_len {
                    emit_frame(&mut features, t, signatures.row(classes[t]), task.noise_std, &mut rng);
                    labels[t] = if t + lead < t_len {
                        classes[t + lead]
                    } else {
                        rng.gen_range_usize(k)
                    };
                }
            }
            TaskKind::SparseParity { window } => {
                let events: Vec<bool> = (0..t_len).map(|_| rng.gen_bool(0.15)).collect();
                for t in 0..t_len {
                    features.set(t, 0, if events[t] { 1.0 } else { 0.0 });
                    for d in 1..task.feature_dim {
                        features.set(t, d, rng.gaussian(0.0, 1.0));
                    }
                    if task.noise_std > 0.0 {
                        let v = features.get(t, 0) + rng.gaussian(0.0, task.noise_std);
                        features.set(t, 0, v);
                    }
                    let lo = t.saturating_sub(window);
                    let count = events[lo..=t].iter().filter(|&&e| e).count();
                    labels[t] = count % 2;
                }
            }
        }
        let mut targets = Matrix::<f64>::zeros(t_len, k);
        for (t, &l) in labels.iter().enumerate() {
            targets.set(t, l, 1.0);
        }
        sequences.push(Sequence {
            features: features.cast(),
            targets: targets.cast(),
        });
    }
    Ok(FrameDataset {
        sequences,
        frame_period_ms: 10.0,
    })
}

fn emit_frame(features: &mut Matrix<f64>, t: usize, signature: &[f64], noise_std: f64, rng: &mut SeedRng) {
    for (d, &s) in signature.iter().enumerate() {
        let noise = if noise_std > 0.0 { rng.gaussian(0.0, noise_std) } else { 0.0 };
        features.set(t, d, s + noise);
    }
}

// ---------------------------------------------------------------------------
// Binary dataset format
//
// magic "FSMD", u16 version = 1, u32 sequence count; per sequence:
// u32 T, u32 D, u32 K, then T*D feature f32s and T*K target f32s, row-major.
// All integers and floats little-endian.

const MAGIC: &[u8; 4] = b"FSMD";
const VERSION: u16 = 1;

pub fn save_dataset<S: Scalar>(data: &FrameDataset<S>, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(data.sequences.len()).map_err(|_| {
        Error::Config("too many sequences for the dataset format".into())
    })?.to_le_bytes());
    for seq in &data.sequences {
        let (t, d) = seq.features.shape();
        let k = seq.targets.cols();
        if seq.targets.rows() != t {
            return Err(Error::Data("feature and target lengths differ".into()));
        }
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        for &v in seq.features.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        for &v in seq.targets.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Slice reader tracking its offset for format diagnostics.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<FrameDataset<S>> {
    let buf = std::fs::read(path)?;
    parse_dataset(&buf)
}

pub fn parse_dataset<S: Scalar>(buf: &[u8]) -> Result<FrameDataset<S>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"FSMD\""),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("sequence count")?;
    let mut sequences = Vec::new();
    for i in 0..count {
        let header_at = r.pos;
        let t = r.u32("sequence length")? as usize;
        let d = r.u32("feature dim")? as usize;
        let k = r.u32("class count")? as usize;
        if t == 0 || d == 0 || k == 0 {
            return Err(Error::Format {
                offset: header_at,
                message: format!("sequence {i} has zero dimension ({t}x{d}, {k} classes)"),
            });
        }
        // Bound check before allocating: avoids huge allocations on garbage.
        let need = t
            .checked_mul(d + k)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: header_at,
                message: format!("sequence {i} size overflows"),
            })?;
        if need > buf.len() - r.pos {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("truncated: sequence {i} needs {need} more bytes"),
            });
        }
        let feat = r.f32s(t * d, "features")?;
        let targ = r.f32s(t * k, "targets")?;
        let features = Matrix::from_vec(t, d, feat.into_iter().map(|v| S::from_f64(v as f64)).collect())?;
        let targets = Matrix::from_vec(t, k, targ.into_iter().map(|v| S::from_f64(v as f64)).collect())?;
        sequences.push(Sequence { features, targets });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes after the last sequence", buf.len() - r.pos),
        });
    }
    Ok(FrameDataset {
        sequences,
        frame_period_ms: 10.0,
    })
}
