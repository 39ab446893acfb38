//! Whole-model properties that span topology analysis, stacking, and the
//! forward pass: the receptive-field perturbation oracle and time-shift
//! equivariance.

use fsmn_core::layers::{forward, Model};
use fsmn_core::lfr::stack_context;
use fsmn_core::tensor::{rand_init, InitScheme, Matrix, SeedRng};
use fsmn_core::topology::{receptive_field, BlockSpec, CoeffMode, Skip, TopologySpec, Variant};

/// Random small model spec exercising variants, strides, and skips.
fn random_spec(rng: &mut SeedRng) -> TopologySpec {
    let variant = match rng.gen_range_usize(3) {
        0 => Variant::Fsmn,
        1 => Variant::Cfsmn,
        _ => Variant::Dfsmn,
    };
    let skips = variant == Variant::Dfsmn && rng.gen_bool(0.7);
    let n_blocks = 1 + rng.gen_range_usize(3);
    let proj = 2 + rng.gen_range_usize(3);
    let blocks = (0..n_blocks)
        .map(|i| BlockSpec {
            hidden_width: 3 + rng.gen_range_usize(4),
            proj_width: proj,
            n1: rng.gen_range_usize(4),
            n2: rng.gen_range_usize(3),
            s1: if variant == Variant::Dfsmn { 1 + rng.gen_range_usize(3) } else { 1 },
            s2: if variant == Variant::Dfsmn { 1 + rng.gen_range_usize(3) } else { 1 },
            skip: if skips && i > 0 { Skip::Identity } else { Skip::None },
        })
        .collect();
    let ctx = rng.gen_range_usize(3);
    let spec = TopologySpec {
        input_dim: 1 + rng.gen_range_usize(3),
        context_left: ctx,
        context_right: ctx,
        blocks,
        dense_layers: rng.gen_range_usize(3),
        dense_width: 3 + rng.gen_range_usize(3),
        pre_output_proj: 2 + rng.gen_range_usize(3),
        output_dim: 2 + rng.gen_range_usize(4),
        variant,
        coeff_mode: if rng.gen_bool(0.25) { CoeffMode::Scalar } else { CoeffMode::Vector },
    };
    spec.validate().expect("generator produces valid specs");
    spec
}

fn model_output(model: &Model<f64>, raw: &Matrix<f64>) -> Matrix<f64> {
    let stacked = stack_context(raw, model.spec.context_left, model.spec.context_right);
    forward(model, &stacked).unwrap().posteriors
}

/// Perturbing any frame outside the receptive-field window leaves the probed
/// output row bit-identical; perturbing the extreme in-window frames changes
/// it.
#[test]
fn receptive_field_perturbation_oracle() {
    let mut rng = SeedRng::new(4242);
    for case in 0..50 {
        let spec = random_spec(&mut rng);
        let (past, future) = receptive_field(&spec);
        let model: Model<f64> = Model::init(spec.clone(), 9000 + case).unwrap();
        let t0 = past + 2;
        let t_len = past + future + 5;
        let raw: Matrix<f64> =
            rand_init(&mut rng, t_len, spec.input_dim, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let base = model_output(&model, &raw);

        let perturbed = |frame: usize| {
            let mut p = raw.clone();
            for d in 0..p.cols() {
                p.set(frame, d, p.get(frame, d) + 10.0);
            }
            model_output(&model, &p)
        };

        // Just outside on both sides: no bit of row t0 may change.
        assert_eq!(perturbed(t0 - past - 1).row(t0), base.row(t0), "case {case}: past boundary leaked");
        assert_eq!(perturbed(t0 + future + 1).row(t0), base.row(t0), "case {case}: future boundary leaked");

        // The extreme in-window frames must change some output.
        assert_ne!(perturbed(t0 - past), base, "case {case}: past extreme inert");
        assert_ne!(perturbed(t0 + future), base, "case {case}: future extreme inert");
    }
}

/// Tightness witness: with all-positive weights and coefficients every ReLU
/// stays active on positive inputs, so the extreme taps provably reach the
/// probed row itself.
#[test]
fn receptive_field_extremes_reach_probed_row() {
    let mut rng = SeedRng::new(77);
    for case in 0..10u64 {
        let spec = random_spec(&mut rng);
        let (past, future) = receptive_field(&spec);
        let mut model: Model<f64> = Model::init(spec.clone(), case).unwrap();
        for tensor in model.params_mut() {
            for v in tensor.data_mut() {
                *v = v.abs().max(1e-3);
            }
        }
        let t0 = past + 1;
        let t_len = past + future + 4;
        let raw: Matrix<f64> =
            rand_init(&mut rng, t_len, spec.input_dim, InitScheme::Uniform { lo: 0.5, hi: 1.5 }).unwrap();
        // Compare logits: with positive weights a positive input bump must
        // strictly raise them, regardless of softmax saturation.
        let logits_at = |input: &Matrix<f64>| {
            let stacked = stack_context(input, model.spec.context_left, model.spec.context_right);
            forward(&model, &stacked).unwrap().logits
        };
        let base = logits_at(&raw);
        for frame in [t0 - past, t0 + future] {
            let mut p = raw.clone();
            for d in 0..p.cols() {
                p.set(frame, d, p.get(frame, d) + 10.0);
            }
            let out = logits_at(&p);
            assert_ne!(out.row(t0), base.row(t0), "case {case}: frame {frame} inert at row {t0}");
        }
    }
}

/// Shifting the input shifts the output for frames whose receptive field lies
/// inside both sequences.
#[test]
fn time_shift_equivariance_away_from_boundaries() {
    let mut rng = SeedRng::new(515);
    for case in 0..20 {
        let spec = random_spec(&mut rng);
        let (past, future) = receptive_field(&spec);
        let model: Model<f64> = Model::init(spec.clone(), 300 + case).unwrap();
        let shift = 1 + rng.gen_range_usize(4);
        let t_len = past + future + shift + 6;
        let raw: Matrix<f64> =
            rand_init(&mut rng, t_len, spec.input_dim, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();

        // Shifted copy: rows `shift..` replay the original from row 0.
        let mut shifted = Matrix::zeros(t_len, spec.input_dim);
        for t in 0..t_len {
            for d in 0..spec.input_dim {
                let v = if t >= shift { raw.get(t - shift, d) } else { rng.gaussian(0.0, 1.0) };
                shifted.set(t, d, v);
            }
        }

        let out = model_output(&model, &raw);
        let out_shifted = model_output(&model, &shifted);
        let mut compared = 0;
        for t in (shift + past)..(t_len - future) {
            assert_eq!(out_shifted.row(t), out.row(t - shift), "case {case} frame {t}");
            compared += 1;
        }
        assert!(compared > 0);
    }
}
