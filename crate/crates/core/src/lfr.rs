//! Lower-frame-rate preprocessing: context stacking, temporal decimation,
//! and soft-target construction.

use crate::data::{FrameDataset, Sequence};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Stacks `left` past and `right` future frames onto every frame.
///
/// Row `t` of the output is the concatenation of rows `t-left ..= t+right`,
/// with edge replication outside the sequence.
pub fn stack_context<S: Scalar>(features: &Matrix<S>, left: usize, right: usize) -> Matrix<S> {
    let t_len = features.rows();
    let d = features.cols();
    let mut out = Matrix::zeros(t_len, (left + 1 + right) * d);
    for t in 0..t_len {
        let orow = out.row_mut(t);
        for (slot, offset) in (-(left as isize)..=(right as isize)).enumerate() {
            let src = (t as isize + offset).clamp(0, t_len as isize - 1) as usize;
            orow[slot * d..(slot + 1) * d].copy_from_slice(features.row(src));
        }
    }
    out
}

/// Keeps rows `0, factor, 2*factor, ...`; output length is `ceil(T / factor)`.
pub fn decimate<S: Scalar>(features: &Matrix<S>, factor: usize) -> Result<Matrix<S>> {
    if factor == 0 {
        return Err(Error::Config("decimation factor must be >= 1".into()));
    }
    let t_len = features.rows();
    let out_len = t_len.div_ceil(factor);
    let mut out = Matrix::zeros(out_len, features.cols());
    for m in 0..out_len {
        out.row_mut(m).copy_from_slice(features.row(m * factor));
    }
    Ok(out)
}

/// Averages groups of `factor` one-hot rows into soft distributions.
///
/// A trailing partial group is averaged over its actual size, so every
/// output row still sums to 1.
pub fn soft_targets<S: Scalar>(hard: &Matrix<S>, factor: usize) -> Result<Matrix<S>> {
    if factor == 0 {
        return Err(Error::Config("target averaging factor must be >= 1".into()));
    }
    let t_len = hard.rows();
    let k = hard.cols();
    for t in 0..t_len {
        let row = hard.row(t);
        let ones = row.iter().filter(|v| (v.to_f64() - 1.0).abs() <= 1e-6).count();
        let zeros = row.iter().filter(|v| v.to_f64().abs() <= 1e-6).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Data(format!("target row {t} is not one-hot")));
        }
    }
    let out_len = t_len.div_ceil(factor);
    let mut out = Matrix::zeros(out_len, k);
    for m in 0..out_len {
        let start = m * factor;
        let end = ((m + 1) * factor).min(t_len);
        let group = (end - start) as f64;
        let orow: &mut [S] = out.row_mut(m);
        for t in start..end {
            for (o, &v) in orow.iter_mut().zip(hard.row(t)) {
                *o += v;
            }
        }
        for o in orow.iter_mut() {
            *o = S::from_f64(o.to_f64() / group);
        }
    }
    Ok(out)
}

/// Model-input preparation: context stacking on every sequence, then
/// optional decimation with soft-target averaging. The frame period scales
/// by the decimation factor.
pub fn prepare_dataset<S: Scalar>(
    data: &FrameDataset<S>,
    context_left: usize,
    context_right: usize,
    lfr_factor: usize,
) -> Result<FrameDataset<S>> {
    if lfr_factor == 0 {
        return Err(Error::Config("LFR factor must be >= 1".into()));
    }
    let mut sequences = Vec::with_capacity(data.sequences.len());
    for seq in &data.sequences {
        let stacked = stack_context(&seq.features, context_left, context_right);
        let (features, targets) = if lfr_factor > 1 {
            (
                decimate(&stacked, lfr_factor)?,
                soft_targets(&seq.targets, lfr_factor)?,
            )
        } else {
            (stacked, seq.targets.clone())
        };
        sequences.push(Sequence { features, targets });
    }
    Ok(FrameDataset {
        sequences,
        frame_period_ms: data.frame_period_ms * lfr_factor as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_init, InitScheme, SeedRng};
    use proptest::prelude::*;

    #[test]
    fn stack_identity_when_no_context() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(stack_context(&f, 0, 0), f);
    }

    #[test]
    fn stack_edge_replication_by_hand() {
        let f = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let s = stack_context(&f, 1, 1);
        assert_eq!(s.row(0), &[1.0, 1.0, 2.0]);
        assert_eq!(s.row(1), &[1.0, 2.0, 3.0]);
        assert_eq!(s.row(2), &[2.0, 3.0, 3.0]);
    }

    #[test]
    fn stack_width_law() {
        let mut rng = SeedRng::new(3);
        for (t, d, l, r) in [(5usize, 3usize, 2usize, 0usize), (1, 4, 3, 3), (7, 1, 0, 2)] {
            let f: Matrix<f32> = rand_init(&mut rng, t, d, InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
            let s = stack_context(&f, l, r);
            assert_eq!(s.shape(), (t, (l + 1 + r) * d));
        }
    }

    #[test]
    fn stacked_row_depends_only_on_window() {
        let mut rng = SeedRng::new(11);
        let f: Matrix<f64> = rand_init(&mut rng, 9, 2, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let s = stack_context(&f, 2, 1);
        let mut g = f.clone();
        // Perturb frame 7, outside the window [2, 5] of row 4.
        g.set(7, 0, 99.0);
        let s2 = stack_context(&g, 2, 1);
        assert_eq!(s.row(4), s2.row(4));
        assert_ne!(s.row(6), s2.row(6));
    }

    #[test]
    fn decimate_identity_and_index_arithmetic() {
        let f = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0], vec![6.0]]);
        assert_eq!(decimate(&f, 1).unwrap(), f);
        let d = decimate(&f, 3).unwrap();
        assert_eq!(d.rows(), 3);
        assert_eq!(d.data(), &[0.0, 3.0, 6.0]);
        assert!(matches!(decimate(&f, 0), Err(Error::Config(_))));
    }

    #[test]
    fn decimate_composes() {
        let mut rng = SeedRng::new(8);
        let f: Matrix<f32> = rand_init(&mut rng, 37, 2, InitScheme::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let once = decimate(&decimate(&f, 2).unwrap(), 3).unwrap();
        let direct = decimate(&f, 6).unwrap();
        assert_eq!(once, direct);
    }

    #[test]
    fn lfr_shapes_for_mandarin_config() {
        let mut rng = SeedRng::new(21);
        let f: Matrix<f32> = rand_init(&mut rng, 100, 80, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let stacked = stack_context(&f, 5, 5);
        assert_eq!(stacked.cols(), 880);
        let dec = decimate(&stacked, 3).unwrap();
        assert_eq!(dec.rows(), 34);
    }

    fn one_hot(labels: &[usize], k: usize) -> Matrix<f64> {
        let mut m = Matrix::zeros(labels.len(), k);
        for (t, &l) in labels.iter().enumerate() {
            m.set(t, l, 1.0);
        }
        m
    }

    #[test]
    fn soft_targets_hand_cases() {
        let hard = one_hot(&[0, 0, 1], 2);
        assert_eq!(soft_targets(&hard, 1).unwrap(), hard);
        let soft = soft_targets(&hard, 3).unwrap();
        assert_eq!(soft.rows(), 1);
        assert!((soft.get(0, 0) - 2.0 / 3.0).abs() <= 1e-12);
        assert!((soft.get(0, 1) - 1.0 / 3.0).abs() <= 1e-12);

        // Partial trailing group of two frames.
        let hard = one_hot(&[0, 0, 1, 0, 1], 2);
        let soft = soft_targets(&hard, 3).unwrap();
        assert_eq!(soft.rows(), 2);
        assert_eq!(soft.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn soft_targets_rejects_non_one_hot() {
        let bad = Matrix::from_rows(&[vec![0.5, 0.5]]);
        assert!(matches!(soft_targets(&bad, 3), Err(Error::Data(_))));
        let bad2 = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert!(matches!(soft_targets(&bad2, 3), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn soft_target_rows_sum_to_one(labels in prop::collection::vec(0usize..5, 1..40), factor in 1usize..5) {
            let hard = one_hot(&labels, 5);
            let soft = soft_targets(&hard, factor).unwrap();
            for m in 0..soft.rows() {
                let sum: f64 = soft.row(m).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                let group = factor.min(labels.len() - m * factor) as f64;
                for &v in soft.row(m) {
                    // Entries are multiples of 1/group.
                    let scaled = v * group;
                    prop_assert!((scaled - scaled.round()).abs() <= 1e-9);
                }
            }
        }
    }
}
