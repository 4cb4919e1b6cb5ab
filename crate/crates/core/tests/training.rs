use absolutenet::data::{synthesize, HrfConfig, Preset, SynthConfig, TrialSet};
use absolutenet::model::{AbsoluteNet, ModelConfig};
use absolutenet::rng::seeded;
use absolutenet::train::*;
use absolutenet::{Tape, Tensor};

fn easy(per_class: usize, seed: u64) -> TrialSet {
    let cfg = SynthConfig {
        hrf: HrfConfig::preset(Preset::Easy),
        trials_per_class: per_class,
        ..Default::default()
    };
    synthesize(&cfg, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs_select: epochs,
        epochs_retrain: 1,
        ..Default::default()
    }
}

fn fresh(seed: u64) -> AbsoluteNet<f32> {
    AbsoluteNet::build(&ModelConfig::default(), &mut seeded(seed)).unwrap()
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::from_f64(vec![2, 2], &[0.0, 0.0, 20.0, -20.0]).unwrap());
    let even = tape.softmax_cross_entropy(z, &[1, 0]).unwrap();
    // Row 0 is chance (ln 2), row 1 is confidently right (~0); the mean is ln 2 / 2.
    let expected = (2f64.ln() + (1.0 + (-40f64).exp()).ln()) / 2.0;
    assert!((tape.value(even).item() - expected).abs() < 1e-12);
}

#[test]
fn training_loss_drops_on_easy_data() {
    let set = easy(60, 11);
    let folds = stratified_folds(&set.labels, 5, 0).unwrap();
    let mut net = fresh(1);
    let out = fit(&mut net, &set, &folds[0].train, None, 5, &quick(5), 3).unwrap();
    let e = &out.report.epochs;
    assert_eq!(e.len(), 5);
    assert!(e[4].train_loss < e[0].train_loss, "{e:?}");
    assert!(e.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn same_seed_same_curve() {
    let set = easy(30, 2);
    let folds = stratified_folds(&set.labels, 5, 0).unwrap();
    let run = || {
        let mut net = fresh(4);
        let out = fit(&mut net, &set, &folds[0].train, Some(&folds[0].val), 2, &quick(2), 9).unwrap();
        (out.report.epochs, out.best)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    for ((_, x), (_, y)) in pa.iter().zip(pb.iter()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn single_epoch_gives_single_record() {
    let set = easy(20, 5);
    let folds = stratified_folds(&set.labels, 5, 0).unwrap();
    let mut net = fresh(0);
    let out = fit(&mut net, &set, &folds[0].train, Some(&folds[0].val), 1, &quick(1), 0).unwrap();
    assert_eq!(out.report.epochs.len(), 1);
    assert_eq!(out.report.selected_epoch, 1);
}

#[test]
fn checkpoint_is_the_lowest_validation_loss() {
    let set = easy(40, 8);
    let split = &stratified_folds(&set.labels, 5, 1).unwrap()[0];
    let mut net = fresh(2);
    let out = fit(&mut net, &set, &split.train, Some(&split.val), 6, &quick(6), 5).unwrap();
    let losses: Vec<f64> = out.report.epochs.iter().map(|e| e.val_loss.unwrap()).collect();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let first_min = losses.iter().position(|&l| l == min).unwrap() + 1;
    assert_eq!(out.report.selected_epoch, first_min);
    assert_eq!(out.report.best_val_loss, Some(min));
    // The stored checkpoint reproduces its own validation loss.
    *net.params_mut() = out.best;
    let (again, _) = loss_and_accuracy(&net, &set, &split.val).unwrap();
    assert_eq!(again, min);
}

#[test]
fn only_training_trials_reach_updates() {
    let set = easy(20, 3);
    let split = &stratified_folds(&set.labels, 5, 2).unwrap()[1];
    let mut net = fresh(0);
    let out = fit(&mut net, &set, &split.train, Some(&split.val), 1, &quick(1), 1).unwrap();
    assert_eq!(out.updated, split.train);

    let fold = run_fold(&set, split, &ModelConfig::default(), &quick(1)).unwrap();
    assert!(fold.leaked_test.is_empty());
    assert_eq!(fold.test.counts.total(), split.test.len());
}

#[test]
fn evaluate_matches_a_recount() {
    let set = easy(25, 6);
    let net = fresh(7);
    let idx: Vec<usize> = (0..set.len()).collect();
    let probs = predict(&net, &set, &idx).unwrap();
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, &label) in probs.iter().zip(&set.labels) {
        let positive = p[1] > p[0];
        match (positive, label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let m = evaluate(&net, &set, &idx).unwrap();
    assert_eq!((m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn_), (tp, fp, tn, fn_));
    assert_eq!(m.accuracy, (tp + tn) as f64 / set.len() as f64);
}

#[test]
fn cross_validation_report_and_csv() {
    let set = easy(20, 4);
    let options = CvOptions {
        max_folds: Some(2),
        ..Default::default()
    };
    let report = cross_validate(&set, &ModelConfig::default(), &quick(1), &options).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert_eq!(report.trainable_params, 49_088);
    let folds = folds_csv(&report);
    assert_eq!(folds.lines().next().unwrap(), FOLDS_CSV_HEADER);
    assert_eq!(folds.lines().count(), 3);
    let epochs = epochs_csv(&report);
    assert_eq!(epochs.lines().next().unwrap(), EPOCHS_CSV_HEADER);
    // One select and one retrain epoch per fold.
    assert_eq!(epochs.lines().count(), 1 + 2 * 2);

    let again = cross_validate(&set, &ModelConfig::default(), &quick(1), &options).unwrap();
    assert_eq!(folds, folds_csv(&again));
    assert_eq!(epochs, epochs_csv(&again));
}

#[test]
fn channel_mismatch_is_rejected() {
    let set = easy(10, 0);
    let model = ModelConfig::default().with_channels(14);
    assert!(cross_validate(&set, &model, &quick(1), &CvOptions::default()).is_err());
}

#[test]
fn recalibrated_statistics_match_one_big_batch() {
    use absolutenet::nn::Forward;
    let set = easy(50, 9);
    let mut net = fresh(3);
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut tape = Tape::new();
    let x = tape.constant(set.batch::<f32>(&idx).unwrap());
    let mut rng = seeded(0);
    let mut f = Forward::train(&mut tape, net.params(), &mut rng);
    net.logits(&mut f, x).unwrap();
    let updates = f.finish().updates;
    assert_eq!(updates.len(), 2);

    // 100 trials arrive as chunks of 64 and 36.
    recalibrate_batch_norm(&mut net, &set, &idx).unwrap();
    for u in &updates {
        let got = net.params().value(u.id).data();
        for (g, w) in got.iter().zip(u.batch.data()) {
            assert!((g - w).abs() <= 1e-4 * w.abs().max(1e-3), "{g} vs {w}");
        }
    }
}
