mod common;

use common::{random_context, random_targets, small_gnp};
use gnp_core::gp::{cholesky_safe, Dataset};
use gnp_core::models::*;
use gnp_core::tensor::{check_gradients, Tape};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn covariance_is_pd_with_own_noise_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let model = GnpModel::new(small_gnp(), case).unwrap();
        let ctx = random_context(&mut rng, 10, -2.0, 2.0);
        let t = rng.gen_range(1..=12);
        let fdd = model.predict(&ctx, &random_targets(&mut rng, t, -2.0, 2.0)).unwrap();
        assert_eq!(fdd.dim(), t);
        let chol = cholesky_safe(&fdd.cov, 1e-10).unwrap();
        assert!(chol.jitter() <= 1e-10);
        let min = fdd.cov.clone().symmetric_eigenvalues().min();
        assert!(min >= model.noise_var() * (1.0 - 1e-10), "case {case}: {min}");
    }
}

#[test]
fn kernel_is_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for psd in [PsdMap::FactorProduct, PsdMap::Projection] {
        let model = GnpModel::new(GnpConfig { psd, ..small_gnp() }, 3).unwrap();
        for _ in 0..20 {
            let ctx = random_context(&mut rng, 8, -1.0, 1.0);
            let targets = random_targets(&mut rng, 7, -1.5, 1.5);
            let k = model.kernel_map(&model.encode_kernel(&ctx, &targets).unwrap(), &targets).unwrap();
            assert!((&k - k.transpose()).abs().max() < 1e-12);
            let min = k.clone().symmetric_eigenvalues().min();
            assert!(min >= -1e-10 * k.trace().max(1e-300), "{psd:?}: {min}");
        }
    }
}

#[test]
fn context_order_does_not_change_output_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gnp = Model::Gnp(GnpModel::new(small_gnp(), 5).unwrap());
    let cnp = Model::ConvCnp(ConvCnpModel::new(ConvCnpConfig::default(), 5).unwrap());
    for _ in 0..10 {
        let ctx = random_context(&mut rng, 10, -2.0, 2.0);
        let mut perm: Vec<usize> = (0..ctx.len()).collect();
        perm.shuffle(&mut rng);
        let targets = random_targets(&mut rng, 9, -2.0, 2.0);
        for model in [&gnp, &cnp] {
            let a = model.predict(&ctx, &targets).unwrap();
            let b = model.predict(&ctx.permuted(&perm), &targets).unwrap();
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.cov, b.cov);
        }
    }
}

fn max_shift_error(model: &GnpModel, ctx: &Dataset, targets: &[f64], tau: f64) -> f64 {
    let a = model.predict(ctx, targets).unwrap();
    let shifted: Vec<f64> = targets.iter().map(|x| x + tau).collect();
    let b = model.predict(&ctx.shifted(tau), &shifted).unwrap();
    (&a.mean - &b.mean).abs().max().max((&a.cov - &b.cov).abs().max())
}

#[test]
fn translation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = GnpModel::new(small_gnp(), 7).unwrap();
    let spacing = 1.0 / model.config().discretisation.points_per_unit;
    for _ in 0..10 {
        let ctx = random_context(&mut rng, 10, -2.0, 2.0);
        let targets = random_targets(&mut rng, 8, -2.0, 2.0);
        let tau = spacing * rng.gen_range(-40..=40) as f64;
        let err = max_shift_error(&model, &ctx, &targets, tau);
        assert!(err < 1e-6, "shift {tau}: {err}");
    }
    // The projected variant is only required to stay PSD; the shift error is
    // still small because the grid follows the data.
    let proj = GnpModel::new(GnpConfig { psd: PsdMap::Projection, ..small_gnp() }, 7).unwrap();
    let ctx = random_context(&mut rng, 6, -1.0, 1.0);
    let err = max_shift_error(&proj, &ctx, &[0.1, 0.7], 0.5);
    assert!(err.is_finite());
}

#[test]
fn zero_kernel_cnn_gives_zero_kernel() {
    let mut model = GnpModel::new(small_gnp(), 8).unwrap();
    let ids: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, name, _)| name.starts_with("kernel.cnn"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let ctx = Dataset::new(vec![0.2, -0.4], vec![1.0, -1.0]).unwrap();
    let targets = [0.0, 0.5, 1.0];
    let k = model.kernel_map(&model.encode_kernel(&ctx, &targets).unwrap(), &targets).unwrap();
    assert!(k.iter().all(|&v| v == 0.0));
    let fdd = model.predict(&ctx, &targets).unwrap();
    let expected = DMatrix::identity(3, 3) * model.noise_var();
    assert_eq!(fdd.cov, expected);
}

#[test]
fn interpolation_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for psd in [PsdMap::FactorProduct, PsdMap::Projection] {
        let model = GnpModel::new(GnpConfig { psd, ..small_gnp() }, 10).unwrap();
        let ctx = random_context(&mut rng, 6, -1.0, 1.0);
        let targets = random_targets(&mut rng, 5, -1.0, 1.0);
        let enc = model.encode_kernel(&ctx, &targets).unwrap();
        let (kg, psi) = model.grid_covariance(&enc, &targets).unwrap();
        let k = model.kernel_map(&enc, &targets).unwrap();
        let m = kg.nrows();
        let (_, dec) = model.kernel_lengthscales();
        for a in 0..targets.len() {
            for b in 0..targets.len() {
                let mut want = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        want += psi[(a, i)] * kg[(i, j)] * psi[(b, j)];
                    }
                }
                assert!((k[(a, b)] - want).abs() <= 1e-12 * want.abs().max(1.0), "{psd:?}");
            }
            for (i, &z) in enc.grid.axis.nodes.iter().enumerate() {
                let d = targets[a] - z;
                assert!((psi[(a, i)] - (-0.5 * d * d / (dec * dec)).exp()).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn source_channel_shapes_the_prior() {
    let model = GnpModel::new(small_gnp(), 11).unwrap();
    let targets = [-0.5, 0.0, 0.3, 1.0];
    let enc = model.encode_kernel(&Dataset::empty(), &targets).unwrap();
    let with = model.kernel_map(&enc, &targets).unwrap();
    let without = model.kernel_map(&enc.without_source(), &targets).unwrap();
    assert!((&with - &without).abs().max() > 1e-6);
    // Without the source channel the empty-context input is all zeros, so the
    // CNN output is a function of its biases alone.
    let first = without[(0, 0)];
    assert!(without.iter().all(|v| v.is_finite()));
    assert!(first >= 0.0);
}

#[test]
fn every_parameter_receives_gradient() {
    let model = GnpModel::new(GnpConfig { tie_decoder_lengthscale: false, ..small_gnp() }, 12).unwrap();
    let ctx = Dataset::new(vec![-0.6, 0.1, 0.8], vec![0.5, -0.3, 1.1]).unwrap();
    let target = Dataset::new(vec![-0.9, -0.2, 0.4, 1.0], vec![0.2, 0.0, -0.4, 0.9]).unwrap();
    let mut tape = Tape::new();
    let nodes = model.forward_on(&mut tape, model.params(), &ctx, &target.x).unwrap();
    let loss = tape.gaussian_nll(&target.y, nodes.mean, nodes.cov).unwrap();
    let grads = tape.backward(loss, model.params()).unwrap();
    for (id, name, _) in model.params().iter() {
        let g = grads.get(id);
        assert!(g.data().iter().any(|v| *v != 0.0), "no gradient reaches {name}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    for psd in [PsdMap::FactorProduct, PsdMap::Projection] {
        let cfg = GnpConfig {
            psd,
            tie_decoder_lengthscale: false,
            ..small_gnp()
        };
        let mut model = GnpModel::new(cfg, 13).unwrap();
        // Zero-initialised biases put many pre-activations exactly on the
        // leaky-ReLU kink; move to a generic point first.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let biases: Vec<_> = model.params().iter().filter(|(_, n, _)| n.ends_with("bias")).map(|(id, _, _)| id).collect();
        for id in biases {
            model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        let ctx = Dataset::new(vec![-0.6, 0.1, 0.8], vec![0.5, -0.3, 1.1]).unwrap();
        let target = Dataset::new(vec![-0.9, -0.2, 0.4], vec![0.2, 0.0, -0.4]).unwrap();
        let err = check_gradients(
            |store| {
                let mut tape = Tape::new();
                let n = model.forward_on(&mut tape, store, &ctx, &target.x)?;
                let loss = tape.gaussian_nll(&target.y, n.mean, n.cov)?;
                Ok((tape, loss))
            },
            model.params(),
            200,
            14,
        )
        .unwrap();
        assert!(err < 1e-4, "{psd:?}: {err}");
    }
}

#[test]
fn convcnp_is_diagonal_above_floor() {
    let cfg = ConvCnpConfig::default();
    let model = ConvCnpModel::new(cfg.clone(), 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let ctx = random_context(&mut rng, 10, -2.0, 2.0);
    let fdd = model.predict(&ctx, &random_targets(&mut rng, 12, -2.0, 2.0)).unwrap();
    for i in 0..12 {
        for j in 0..12 {
            if i == j {
                assert!(fdd.cov[(i, i)] >= cfg.variance_floor);
            } else {
                assert_eq!(fdd.cov[(i, j)], 0.0);
            }
        }
    }
}

#[test]
fn prior_extraction() {
    let model = GnpModel::new(small_gnp(), 17).unwrap();
    let lags: Vec<f64> = (-20..=20).map(|k| k as f64 * 0.1).collect();
    let cov = model.extract_prior_covariance(&lags).unwrap();
    assert!(cov.iter().all(|v| v.is_finite()));
    let var = model.extract_prior_covariance(&[0.0]).unwrap()[0];
    let fdd = model.predict(&Dataset::empty(), &[0.0]).unwrap();
    assert!((var - (fdd.cov[(0, 0)] - model.noise_var())).abs() < 1e-12);
}

#[test]
fn oversized_receptive_field_is_rejected() {
    let cfg = GnpConfig {
        kernel_cnn: CnnSpec {
            layers: 50,
            channels: 2,
            kernel_size: 5,
            bias: true,
        },
        ..GnpConfig::default()
    };
    assert!(GnpModel::new(cfg, 0).is_err());
    let ok = GnpConfig::default();
    let rf = ok.kernel_cnn.receptive_field() as f64 / ok.discretisation.points_per_unit;
    assert!(rf <= MAX_RECEPTIVE_FIELD);
}

#[test]
fn rebuilding_from_params_reproduces_predictions() {
    let spec = ModelSpec::Gnp(small_gnp());
    let a = Model::new(&spec, 18).unwrap();
    let b = Model::from_params(&spec, a.params().clone()).unwrap();
    let ctx = Dataset::new(vec![0.3], vec![1.0]).unwrap();
    assert_eq!(a.predict(&ctx, &[0.0, 0.5]).unwrap(), b.predict(&ctx, &[0.0, 0.5]).unwrap());
    let other = ModelSpec::Convcnp(ConvCnpConfig::default());
    assert!(Model::from_params(&other, a.params().clone()).is_err());
}
