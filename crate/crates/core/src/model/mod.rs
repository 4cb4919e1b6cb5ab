//! The dual-branch network, its variants and its layer report.

mod config;
mod net;
mod report;

pub use config::{ablate, ModelConfig, Variant};
pub use net::{AbsoluteNet, NamedLayer};
pub use report::{LayerReport, LayerRow, REFERENCE, REFERENCE_TOTAL, REFERENCE_TRAINABLE};

/// Closed-form parameter count `(trainable, total)` of a config.
pub fn count_params(c: &ModelConfig) -> (usize, usize) {
    let v = c.variant;
    let mut trainable = 0;
    let mut width = 0;
    if v.has_spatial_temporal() {
        trainable += c.spatial_kernel * c.st_spatial_filters + 2 * c.st_spatial_filters;
        trainable += c.temporal_kernel * c.st_spatial_filters * c.st_temporal_filters;
        trainable += 2 * c.st_temporal_filters;
        width += c.st_temporal_filters;
    }
    if v.has_temporal_spatial() {
        trainable += c.temporal_kernel * c.ts_temporal_filters + 2 * c.ts_temporal_filters;
        trainable += c.spatial_kernel * c.ts_temporal_filters * c.ts_spatial_filters;
        trainable += 2 * c.ts_spatial_filters;
        width += c.ts_spatial_filters;
    }
    trainable += 2 * width;
    let moving = 2 * width;
    let mut features = width;
    if v.has_fusion1() {
        trainable += c.separable_kernel * width + width * c.separable_filters;
        trainable += 2 * c.separable_filters;
        features = c.separable_filters;
    }
    let mut length = c.input_samples - c.temporal_kernel + 1;
    if v.has_fusion2() {
        length = (length - c.pool_size) / c.pool_stride + 1;
    }
    trainable += features * c.head_units + c.head_units;
    trainable += length * c.head_units * c.classes + c.classes;
    (trainable, trainable + moving)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::{Forward, Mode};
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn build(c: &ModelConfig) -> AbsoluteNet<f32> {
        AbsoluteNet::build(c, &mut seeded(1)).unwrap()
    }

    fn batch(n: usize, c: &ModelConfig, seed: u64) -> Tensor<f32> {
        use rand::Rng as _;
        let mut rng = seeded(seed);
        let len = n * c.input_channels * c.input_samples;
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, c.input_channels, c.input_samples, 1], data).unwrap()
    }

    #[test]
    fn full_model_matches_reference_counts() {
        let net = build(&ModelConfig::default());
        assert_eq!(net.params().trainable_count(), 49_088);
        assert_eq!(
            net.params().trainable_count() + net.params().non_trainable_count(),
            49_328
        );
        let report = net.report();
        assert_eq!(report.compare_reference(), Vec::<String>::new());
        assert_eq!(report.row("Flatten").unwrap().output, vec![32]);
    }

    #[test]
    fn report_rows() {
        let report = build(&ModelConfig::default()).report();
        let row = |name: &str| {
            let r = report.row(name).unwrap();
            (r.output.clone(), r.params)
        };
        assert_eq!(row("Spatial Conv2D"), (vec![1, 150, 40], 1120));
        assert_eq!(row("Separable Conv2D"), (vec![1, 146, 10], 1560));
        assert_eq!(row("Average Pooling 2D"), (vec![1, 16, 10], 0));
        let sum: usize = report.rows.iter().map(|r| r.params).sum();
        assert_eq!(sum, report.total());
    }

    #[test]
    fn reference_table_is_self_consistent() {
        let sum: usize = REFERENCE.iter().map(|r| r.3).sum();
        assert_eq!(sum, REFERENCE_TOTAL);
        assert_eq!(REFERENCE_TOTAL - REFERENCE_TRAINABLE, 240);
    }

    #[test]
    fn every_variant_matches_hand_count() {
        let base = ModelConfig::default();
        let mut configs: Vec<ModelConfig> = (1..=4).map(|s| ablate(&base, s).unwrap()).collect();
        configs.push(base);
        configs.push(ModelConfig::single_modality());
        for c in configs {
            let net = build(&c);
            let p = net.params();
            let got = (p.trainable_count(), p.trainable_count() + p.non_trainable_count());
            assert_eq!(got, count_params(&c), "{}", c.variant.name());
            let report = net.report();
            assert_eq!((report.trainable, report.total()), got);
        }
    }

    #[test]
    fn single_modality_count() {
        let c = ModelConfig::single_modality();
        // 14·40 + 80 + 12000 + 120 + 100 + 40 + 14·20·60 + 120 + 240 + 1560 + 20 + 22 + 66
        assert_eq!(count_params(&c).0, 31_728);
        let r = build(&c).report();
        assert_eq!(r.rows[0].output, vec![14, 150, 1]);
        assert_eq!(r.row("Spatial Conv2D").unwrap().output, vec![1, 150, 40]);
    }

    #[test]
    fn ablation_shapes() {
        let base = ModelConfig::default();
        let r1 = build(&ablate(&base, 1).unwrap()).report();
        assert_eq!(r1.row("Batch Normalization").unwrap().params, 240);
        let r2 = build(&ablate(&base, 2).unwrap()).report();
        assert_eq!(r2.row("Batch Normalization").unwrap().output, vec![1, 146, 60]);
        let r3 = build(&ablate(&base, 3).unwrap()).report();
        assert_eq!(r3.row("Average Pooling 2D").unwrap().output, vec![1, 16, 120]);
        assert!(r3.row("Separable Conv2D").is_none());
        let r4 = build(&ablate(&base, 4).unwrap()).report();
        assert_eq!(r4.row("Flatten").unwrap().output, vec![292]);
        assert!(r4.row("Dropout").is_none());
    }

    #[test]
    fn oversized_pool_is_rejected() {
        let c = ModelConfig {
            pool_size: 147,
            ..Default::default()
        };
        assert!(AbsoluteNet::<f32>::build(&c, &mut seeded(0)).is_err());
    }

    #[test]
    fn forward_outputs_distributions() {
        let c = ModelConfig::default();
        let net = build(&c);
        let p = net.predict(&batch(4, &c, 2)).unwrap();
        assert_eq!(p.shape(), &[4, 2]);
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
        let rank3 = batch(4, &c, 2).reshape(vec![4, 28, 150]).unwrap();
        assert_eq!(net.predict(&rank3).unwrap(), p);
        assert_eq!(net.predict(&batch(4, &c, 2)).unwrap(), p);
    }

    #[test]
    fn zero_input_is_finite() {
        let c = ModelConfig::default();
        let p = build(&c).predict(&Tensor::zeros(vec![2, 28, 150, 1]).unwrap()).unwrap();
        assert!(p.all_finite());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = build(&ModelConfig::default());
        assert!(net.predict(&Tensor::zeros(vec![2, 14, 150, 1]).unwrap()).is_err());
        assert!(net.predict(&Tensor::zeros(vec![2, 28, 149]).unwrap()).is_err());
    }

    #[test]
    fn every_variant_takes_a_finite_training_step() {
        let base = ModelConfig::default();
        let mut configs: Vec<ModelConfig> = (1..=4).map(|s| ablate(&base, s).unwrap()).collect();
        configs.push(base);
        configs.push(ModelConfig::single_modality());
        for c in configs {
            let net = build(&c);
            let mut tape = Tape::new();
            let x = tape.leaf(batch(3, &c, 5));
            let mut rng = seeded(9);
            let mut f = Forward::new(&mut tape, net.params(), Mode::Train, Some(&mut rng));
            let logits = net.logits(&mut f, x).unwrap();
            let bound = f.finish();
            let loss = tape.softmax_cross_entropy(logits, &[0, 1, 1]).unwrap();
            let grads = tape.backward(loss).unwrap();
            assert!(tape.value(loss).item().is_finite());
            assert_eq!(
                bound.params.len(),
                net.params().iter().filter(|p| p.1.trainable).count()
            );
            for (_, v) in bound.params {
                assert!(grads.get(v).unwrap().all_finite(), "{}", c.variant.name());
            }
            assert_eq!(bound.updates.len(), 2);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let c = ModelConfig::default();
        let net = build(&c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        net.save(&path).unwrap();
        let mut other: AbsoluteNet<f32> = AbsoluteNet::build(&c, &mut seeded(99)).unwrap();
        other.load_params(&path).unwrap();
        let x = batch(2, &c, 4);
        assert_eq!(net.predict(&x).unwrap(), other.predict(&x).unwrap());
        let mut single: AbsoluteNet<f32> = build(&ModelConfig::single_modality());
        assert!(single.load_params(&path).is_err());
    }
}
