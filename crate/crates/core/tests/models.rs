use rand::Rng;
use ser_forge_core::featurize::FeatureKind;
use ser_forge_core::models::{gradient_check, parameter_count, symbolic_shapes, ModelConfig, ModelGraph, ModelInputs, ModelVariant};
use ser_forge_core::nn::checkpoint::Checkpoint;
use ser_forge_core::nn::{seed_rng, softmax_cross_entropy, Adadelta, LayerMode, Tape};
use ser_forge_core::Tensor;

fn random_inputs(config: &ModelConfig, batch: usize, seed: u64) -> ModelInputs<f32> {
    let mut rng = seed_rng(seed);
    let mut inputs = ModelInputs::new();
    for &kind in config.variant.required_features() {
        let (h, w) = config.input_shape(kind);
        let t = Tensor::from_fn(&[batch, h, w], |_| rng.gen_range(-1.0f32..1.0));
        inputs.insert(kind, t).unwrap();
    }
    inputs
}

/// Full-size inputs with narrow conv paths, so the real geometry is exercised
/// without the cost of 200 kernels per path.
fn full_geometry(v: ModelVariant) -> ModelConfig {
    ModelConfig {
        kernels_per_path: 2,
        text_filters_per_size: 3,
        fc_sizes: (12, 8),
        text_fc_size: 10,
        ..ModelConfig::new(v)
    }
}

#[test]
fn closed_form_count_matches_built_parameters() {
    for v in ModelVariant::ALL {
        for config in [ModelConfig::new(v), ModelConfig::reduced(v), full_geometry(v)] {
            let g = ModelGraph::<f32>::build(config.clone(), &mut seed_rng(0)).unwrap();
            assert_eq!(parameter_count(&config).unwrap(), g.params().scalar_count(), "{v}");
        }
    }
    let mut m1 = ModelConfig::reduced(ModelVariant::M1Text);
    m1.text_fc_size = 0;
    let g = ModelGraph::<f32>::build(m1.clone(), &mut seed_rng(0)).unwrap();
    assert_eq!(parameter_count(&m1).unwrap(), g.params().scalar_count());
}

#[test]
fn shape_audit_batch_three() {
    for v in ModelVariant::ALL {
        for config in [ModelConfig::reduced(v), full_geometry(v)] {
            let mut g = ModelGraph::<f32>::build(config.clone(), &mut seed_rng(1)).unwrap();
            let inputs = random_inputs(&config, 3, 2);
            for mode in [LayerMode::Train, LayerMode::Eval] {
                let mut tape = Tape::new(mode);
                g.forward(&mut tape, &inputs, &mut seed_rng(3)).unwrap();
                assert_eq!(tape.labeled_shapes(), symbolic_shapes(&config, 3).unwrap(), "{v}");
            }
        }
    }
}

#[test]
fn default_head_widths() {
    let find = |v, name: &str| {
        symbolic_shapes(&ModelConfig::new(v), 1)
            .unwrap()
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap()
            .1
    };
    assert_eq!(find(ModelVariant::M2aSpec, "speech.features"), vec![1, 3200]);
    assert_eq!(find(ModelVariant::M2bSpecDeep, "speech.features"), vec![1, 6400]);
    assert_eq!(find(ModelVariant::M1Text, "text.features"), vec![1, 400]);
    assert_eq!(find(ModelVariant::M4aSpecMfcc, "fusion"), vec![1, 800]);
    assert_eq!(find(ModelVariant::M4cTextMfcc, "fusion"), vec![1, 600]);
    assert_eq!(find(ModelVariant::M2aSpec, "spec.conv0"), vec![1, 200, 2, 2]);
}

#[test]
fn every_variant_emits_batch_by_four_and_is_deterministic() {
    for v in ModelVariant::ALL {
        let config = ModelConfig::reduced(v);
        let mut g = ModelGraph::<f32>::build(config.clone(), &mut seed_rng(4)).unwrap();
        let inputs = random_inputs(&config, 2, 5);
        let a = g.predict(&inputs).unwrap();
        let b = g.predict(&inputs).unwrap();
        assert_eq!(a.dims(), &[2, 4]);
        assert_eq!(a, b);
        assert!(a.all_finite());
    }
}

#[test]
fn zero_text_contributes_a_constant() {
    let config = ModelConfig::reduced(ModelVariant::M4cTextMfcc);
    let mut g = ModelGraph::<f32>::build(config.clone(), &mut seed_rng(6)).unwrap();
    let mut inputs = random_inputs(&config, 3, 7);
    inputs
        .insert(FeatureKind::Text, Tensor::zeros(&[3, 32, 300]))
        .unwrap();
    let logits = g.predict(&inputs).unwrap();

    // Same rows predicted one at a time with a fresh zero text matrix.
    for r in 0..3 {
        let mut single = ModelInputs::new();
        let mfcc = inputs.get(FeatureKind::Mfcc).unwrap();
        let row = mfcc.data()[r * 16 * 64..(r + 1) * 16 * 64].to_vec();
        single
            .insert(FeatureKind::Mfcc, Tensor::new(vec![1, 16, 64], row).unwrap())
            .unwrap();
        single
            .insert(FeatureKind::Text, Tensor::zeros(&[1, 32, 300]))
            .unwrap();
        assert_eq!(g.predict(&single).unwrap().data(), logits.row(r));
    }
}

#[test]
fn reduced_gradient_checks() {
    for v in ModelVariant::ALL {
        for seed in 0..2 {
            let r = gradient_check(v, seed, 60).unwrap();
            assert!(r.checked >= 50, "{v} seed {seed}: {r:?}");
            assert!(r.passes(1e-4), "{v} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    for v in ModelVariant::ALL {
        let config = ModelConfig {
            dropout_rate: 0.35,
            ..ModelConfig::reduced(v)
        };
        let mut g = ModelGraph::<f32>::build(config.clone(), &mut seed_rng(8)).unwrap();
        let inputs = random_inputs(&config, 4, 9);
        // One training step so that running statistics and accumulators move.
        let mut tape = Tape::new(LayerMode::Train);
        let logits = g.forward(&mut tape, &inputs, &mut seed_rng(10)).unwrap();
        let ce = softmax_cross_entropy(tape.value(logits), &[0, 1, 2, 3]).unwrap();
        tape.backward(logits, ce.grad, g.params_mut()).unwrap();
        Adadelta::default().step(g.params_mut()).unwrap();

        let path = dir.path().join(format!("{v}.serm"));
        g.to_checkpoint(true).write(&path).unwrap();
        let ckpt = Checkpoint::read(&path).unwrap();
        assert_eq!(ckpt.variant_id, v.id());
        let mut back = ModelGraph::<f32>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.config(), &config);
        assert_eq!(back.params(), g.params());
        let a = g.predict(&inputs).unwrap();
        let b = back.predict(&inputs).unwrap();
        assert_eq!(
            a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn checkpoint_variant_mismatch_is_rejected() {
    let g = ModelGraph::<f32>::build(ModelConfig::reduced(ModelVariant::M3Mfcc), &mut seed_rng(0)).unwrap();
    let mut ckpt = g.to_checkpoint(false);
    ckpt.variant_id = ModelVariant::M2aSpec.id();
    assert!(ModelGraph::<f32>::from_checkpoint(&ckpt).is_err());
}
