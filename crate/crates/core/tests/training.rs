mod common;

use common::small_gnp;
use gnp_core::gp::gaussian_logpdf;
use gnp_core::models::{Model, ModelSpec};
use gnp_core::taskgen::{
    oracle_predict, sample_batch, EpisodeSizes, GeneratorSpec, OracleMode, Process, SplitSpec,
};
use gnp_core::tensor::{check_gradients, Tape, Tensor};
use gnp_core::training::*;
use gnp_core::Error;

fn eq() -> GeneratorSpec {
    GeneratorSpec::new(Process::eq())
}

fn small_model(seed: u64) -> Model {
    Model::new(&ModelSpec::Gnp(small_gnp()), seed).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        episodes_per_epoch: 32,
        batch_size: 8,
        validation_tasks: 8,
        record_timing: false,
        ..TrainConfig::new(eq(), epochs, 5)
    }
}

fn batch(n: usize, seed: u64) -> Vec<gnp_core::taskgen::Episode> {
    sample_batch(&eq(), &SplitSpec::interp_in_range(), &EpisodeSizes::default(), seed, 0, n).unwrap()
}

fn no_sink() -> impl FnMut(usize, &Model, &TrainHistory) -> gnp_core::Result<()> {
    |_, _, _| Ok(())
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let mut model = small_model(1);
    let before = model.clone();
    let mut history = TrainHistory::default();
    let mut saved = Vec::new();
    let mut sink = |e: usize, _: &Model, _: &TrainHistory| {
        saved.push(e);
        Ok(())
    };
    train(&quick_config(0), &mut model, &mut history, &mut sink).unwrap();
    assert_eq!(model, before);
    assert!(history.is_empty());
    assert_eq!(saved, vec![0]);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut model = small_model(2);
        let mut history = TrainHistory::default();
        train(&quick_config(2), &mut model, &mut history, &mut no_sink()).unwrap();
        let mut csv = Vec::new();
        history.write_csv(&mut csv).unwrap();
        (model, csv)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(String::from_utf8(ha).unwrap().lines().count(), 3);
}

#[test]
fn cadence_and_final_checkpoints() {
    let mut model = small_model(3);
    let mut history = TrainHistory::default();
    let mut saved = Vec::new();
    let mut sink = |e: usize, _: &Model, h: &TrainHistory| {
        assert_eq!(h.len(), e);
        saved.push(e);
        Ok(())
    };
    let config = TrainConfig {
        checkpoint_every: 2,
        ..quick_config(3)
    };
    train(&config, &mut model, &mut history, &mut sink).unwrap();
    assert_eq!(saved, vec![2, 3]);
}

#[test]
fn doubled_batch_has_same_loss() {
    let model = small_model(4);
    let eps = batch(6, 11);
    let doubled: Vec<_> = eps.iter().chain(eps.iter()).cloned().collect();
    let (a, ga) = nll_loss(&model, &eps).unwrap();
    let (b, gb) = nll_loss(&model, &doubled).unwrap();
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    for ((_, x), (_, y)) in ga.iter().zip(gb.iter()) {
        assert!(x.max_abs_diff(y) < 1e-10);
    }
}

#[test]
fn single_tape_loss_matches_per_episode_loss() {
    let model = small_model(5);
    let eps = batch(4, 12);
    let (loss, grads) = nll_loss(&model, &eps).unwrap();
    let mut tape = Tape::new();
    let node = nll_loss_on(&mut tape, &model, model.params(), &eps).unwrap();
    assert!((tape.value(node).data()[0] - loss).abs() < 1e-10);
    let g = tape.backward(node, model.params()).unwrap();
    for ((_, x), (_, y)) in g.iter().zip(grads.iter()) {
        assert!(x.max_abs_diff(y) < 1e-9);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut model = small_model(6);
    // Off the leaky-ReLU kinks: see the model gradient tests.
    let ids: Vec<_> = model.params().iter().filter(|(_, n, _)| n.ends_with("bias")).map(|(id, _, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (j, v) in model.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
            *v = 0.1 * (((k * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        }
    }
    let eps = batch(3, 13);
    let err = check_gradients(
        |store| {
            let mut tape = Tape::new();
            let loss = nll_loss_on(&mut tape, &model, store, &eps)?;
            Ok((tape, loss))
        },
        model.params(),
        150,
        3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn nll_of_exact_predictive_is_negative_logpdf() {
    let gen = eq();
    for ep in batch(5, 14) {
        let fdd = oracle_predict(&gen, &ep.context, &ep.target.x, OracleMode::Full).unwrap().unwrap();
        let n = fdd.dim();
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::vector(fdd.mean.iter().copied().collect()));
        let cov = tape.constant(Tensor::matrix(n, n, fdd.cov.transpose().iter().copied().collect()).unwrap());
        let nll = tape.gaussian_nll(&ep.target.y, mean, cov).unwrap();
        let want = -gaussian_logpdf(&ep.target.y, &fdd, 0.0).unwrap();
        assert!((tape.value(nll).data()[0] - want).abs() < 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn empty_batch_is_rejected() {
    let model = small_model(7);
    assert!(nll_loss(&model, &[]).is_err());
}

#[test]
fn nan_parameters_abort_training() {
    let mut model = small_model(8);
    let id = model.params().ids().next().unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let mut history = TrainHistory::default();
    let err = train(&quick_config(2), &mut model, &mut history, &mut no_sink()).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, step: 0 }), "{err}");
    assert!(history.is_empty());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut model = small_model(9);
    let mut history = TrainHistory::default();
    let bad = TrainConfig {
        batch_size: 5,
        ..quick_config(1)
    };
    assert!(matches!(train(&bad, &mut model, &mut history, &mut no_sink()), Err(Error::Config(_))));
    let overlap = TrainConfig {
        validation_stream: 10,
        ..quick_config(1)
    };
    assert!(train(&overlap, &mut model, &mut history, &mut no_sink()).is_err());
}

#[test]
fn oracle_gap_exceeds_half_a_nat() {
    let (gen, split, sizes) = (eq(), SplitSpec::interp_in_range(), EpisodeSizes::default());
    let full = evaluate(Predictor::Oracle(OracleMode::Full), &gen, &split, &sizes, 256, 3).unwrap().unwrap();
    let diag = evaluate(Predictor::Oracle(OracleMode::Diag), &gen, &split, &sizes, 256, 3).unwrap().unwrap();
    assert!(full.mean - diag.mean > 0.5, "{full:?} {diag:?}");
    assert!(full.ci95 > 0.0);
}

#[test]
fn evaluation_is_reproducible() {
    let model = small_model(10);
    let (gen, split, sizes) = (eq(), SplitSpec::interp_in_range(), EpisodeSizes::default());
    let a = evaluate(Predictor::Model(&model), &gen, &split, &sizes, 16, 4).unwrap();
    let b = evaluate(Predictor::Model(&model), &gen, &split, &sizes, 16, 4).unwrap();
    assert_eq!(a, b);
    let c = evaluate(Predictor::Oracle(OracleMode::Full), &gen, &split, &sizes, 16, 4).unwrap();
    let d = evaluate(Predictor::Oracle(OracleMode::Full), &gen, &split, &sizes, 16, 4).unwrap();
    assert_eq!(c, d);
}

#[test]
fn ci_halves_when_tasks_quadruple() {
    let (gen, split, sizes) = (eq(), SplitSpec::interp_in_range(), EpisodeSizes::default());
    let small = evaluate(Predictor::Oracle(OracleMode::Full), &gen, &split, &sizes, 200, 6).unwrap().unwrap();
    let large = evaluate(Predictor::Oracle(OracleMode::Full), &gen, &split, &sizes, 800, 6).unwrap().unwrap();
    let ratio = large.ci95 / small.ci95;
    assert!((ratio - 0.5).abs() <= 0.35 * 0.5, "{ratio}");
}

fn oracle_at_target_size(mode: OracleMode, target: usize) -> EvalResult {
    let sizes = EpisodeSizes {
        target,
        ..EpisodeSizes::default()
    };
    evaluate(Predictor::Oracle(mode), &eq(), &SplitSpec::interp_in_range(), &sizes, 512, 8)
        .unwrap()
        .unwrap()
}

/// Fails: on a fixed range, denser targets sharpen the sequential
/// conditionals, so the joint per-point score of the exact posterior grows
/// with the target count (≈1.03 at 16 vs ≈1.23 at 32).
#[test]
#[ignore = "does not hold for correlated predictives on a fixed input range"]
fn per_point_metric_is_size_stable_for_the_truth() {
    let (a, b) = (oracle_at_target_size(OracleMode::Full, 16), oracle_at_target_size(OracleMode::Full, 32));
    assert!((a.mean - b.mean).abs() < 2.0 * a.ci95.max(b.ci95), "{a:?} {b:?}");
}

#[test]
fn per_point_metric_is_size_stable_for_marginals() {
    let (a, b) = (oracle_at_target_size(OracleMode::Diag, 16), oracle_at_target_size(OracleMode::Diag, 32));
    assert!((a.mean - b.mean).abs() < 2.0 * a.ci95.max(b.ci95), "{a:?} {b:?}");
}

#[test]
fn oracles_have_no_opinion_on_non_gp_tasks() {
    let gen = GeneratorSpec::new(Process::sawtooth());
    let r = evaluate(
        Predictor::Oracle(OracleMode::Full),
        &gen,
        &SplitSpec::interp_in_range(),
        &EpisodeSizes::default(),
        4,
        1,
    )
    .unwrap();
    assert!(r.is_none());
}

#[test]
fn ci_matches_textbook_formula() {
    let scores = [1.0, 2.0, 4.0, 7.0];
    let r = EvalResult::from_scores(&scores, 0);
    // mean 3.5, sample variance 7, se sqrt(7/4)
    assert!((r.mean - 3.5).abs() < 1e-15);
    assert!((r.ci95 - 1.96 * (7.0f64 / 4.0).sqrt()).abs() < 1e-12);
    assert_eq!(EvalResult::from_scores(&[2.0], 0).ci95, 0.0);
}

#[test]
fn history_csv_schema() {
    let history = TrainHistory {
        epochs: vec![EpochRecord {
            epoch: 1,
            train_nll: 0.5,
            val_loglik: -0.25,
            seconds: 0.0,
        }],
    };
    let mut out = Vec::new();
    history.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("epoch,train_nll,val_loglik,seconds\n1,"));
    assert!(!text.contains('\r'));
}

/// 2048 episodes on the small model must gain at least half a nat of
/// validation log-likelihood over the untrained model.
#[test]
fn smoke_training_improves_validation() {
    let mut model = small_model(21);
    let config = TrainConfig {
        episodes_per_epoch: 256,
        validation_tasks: 64,
        record_timing: false,
        ..TrainConfig::new(eq(), 8, 21)
    };
    let val = sample_batch(
        &config.generator,
        &config.split,
        &config.sizes,
        config.seed,
        config.validation_stream,
        config.validation_tasks,
    )
    .unwrap();
    let initial: f64 = val
        .iter()
        .map(|ep| per_point_loglik(&model.predict(&ep.context, &ep.target.x).unwrap(), &ep.target.y).unwrap())
        .sum::<f64>()
        / val.len() as f64;
    let mut history = TrainHistory::default();
    train(&config, &mut model, &mut history, &mut no_sink()).unwrap();
    let last = history.last().unwrap().val_loglik;
    assert!(last >= initial + 0.5, "epoch 0 {initial:.3} → final {last:.3}");
}

#[test]
fn correlations_never_hurt_the_truth() {
    let (gen, split) = (eq(), SplitSpec::interp_in_range());
    let dense = EpisodeSizes {
        context_min: 5,
        ..EpisodeSizes::default()
    };
    let gap = |sizes: &EpisodeSizes, n, seed| {
        let full = evaluate(Predictor::Oracle(OracleMode::Full), &gen, &split, sizes, n, seed).unwrap().unwrap();
        let diag = evaluate(Predictor::Oracle(OracleMode::Diag), &gen, &split, sizes, n, seed).unwrap().unwrap();
        full.mean - diag.mean
    };
    for batch in 0..16u64 {
        for sizes in [EpisodeSizes::default(), dense] {
            let g = gap(&sizes, 32, 100 + batch);
            assert!(g >= 0.0, "batch {batch}: {g}");
        }
    }
    // The strict margin is a population statement; single batches of 32
    // scatter by about ±0.1 around it.
    let g = gap(&dense, 512, 99);
    assert!(g >= 0.3, "{g}");
}

fn desk_train_nll() -> Vec<f64> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eq_gnp_desk/history.csv");
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|c| c == "train_nll").unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// Ten-epoch blocks from epoch 5 on; the first four epochs are warm-up.
#[test]
fn smoothed_training_loss_never_rises() {
    let nll = desk_train_nll();
    let blocks: Vec<f64> = nll[4..].chunks_exact(10).map(mean).collect();
    assert!(blocks.len() >= 4, "{blocks:?}");
    assert!(blocks.windows(2).all(|w| w[1] <= w[0]), "{blocks:?}");
}

#[test]
#[ignore = "late in training the per-epoch drift is below the noise of a rolling mean step"]
fn rolling_training_loss_never_rises() {
    let nll = desk_train_nll();
    let rolling: Vec<f64> = nll[4..].windows(10).map(mean).collect();
    assert!(rolling.windows(2).all(|w| w[1] <= w[0]), "{rolling:?}");
}
