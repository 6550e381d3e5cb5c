//! Every selection method drives the iterative loop end to end on a tiny
//! model: shapes stay consistent, rows accumulate, and sizes shrink.

use prunekit::damage::DamageMethod;
use prunekit::data::{synth_generate, SynthConfig};
use prunekit::nn::model::{init_random, LayerSpec, ModelSpec};
use prunekit::nn::train::{train, TrainConfig};
use prunekit::nn::Activation;
use prunekit::prune::{
    prune_finetune_loop, PruneLevel, PruneSchedule, PruneScope, SelectionMethod,
};

fn fixture() -> (prunekit::nn::Model, prunekit::data::Dataset, prunekit::data::Dataset) {
    let cfg = SynthConfig {
        n_train: 1200,
        n_test: 500,
        feature_dim: 8,
        pos_balance_train: 0.7,
        pos_balance_test: 0.6,
        difficulty: 3.0,
        seed: 31,
    };
    let (train_ds, test_ds) = synth_generate(&cfg).unwrap();
    let spec = ModelSpec {
        input_dim: 8,
        hidden: vec![
            LayerSpec {
                width: 12,
                activation: Activation::Elu,
                batchnorm: true,
                dropout: 0.0,
            },
            LayerSpec {
                width: 8,
                activation: Activation::Elu,
                batchnorm: false,
                dropout: 0.0,
            },
        ],
        output_width: 1,
    };
    let m0 = init_random(&spec, 1).unwrap();
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 64,
        learning_rate: 0.1,
        seed: 2,
    };
    let base = train(&m0, &train_ds.as_batch(), &tc).unwrap();
    (base, train_ds, test_ds)
}

fn quick_schedule(level: PruneLevel, method: SelectionMethod) -> PruneSchedule {
    let mut s = PruneSchedule::new(level, method, 2, 7);
    s.damage_sample_count = 256;
    s.finetune.sample_count = 400;
    s.finetune.batch_size = 64;
    s
}

#[test]
fn every_parameter_method_completes_two_rounds() {
    let (base, train_ds, test_ds) = fixture();
    for method in [
        DamageMethod::Random,
        DamageMethod::Magnitude,
        DamageMethod::Obd,
        DamageMethod::ObdSd,
        DamageMethod::Lm,
    ] {
        let schedule = quick_schedule(PruneLevel::Parameter, SelectionMethod::Damage(method));
        let trace = prune_finetune_loop(&base, &schedule, &train_ds, &test_ds).unwrap();
        assert_eq!(trace.rows.len(), 3, "{}", method.name());
        assert!(trace.error.is_none());
        let params: Vec<usize> = trace.rows.iter().map(|r| r.surviving_params).collect();
        assert!(
            params.windows(2).all(|w| w[1] < w[0]),
            "{}: counts {:?} not strictly decreasing",
            method.name(),
            params
        );
        // masked zeros shrink the zipped size, never the raw size
        assert_eq!(trace.rows[0].sizes.raw_bytes, trace.rows[2].sizes.raw_bytes);
        assert!(trace.rows[2].sizes.zip_bytes < trace.rows[0].sizes.zip_bytes);
        if matches!(method, DamageMethod::Obd | DamageMethod::ObdSd) {
            assert!(trace.rows[1].vshape.is_some());
        } else {
            assert!(trace.rows[1].vshape.is_none());
        }
    }
}

#[test]
fn neuron_methods_shrink_structurally() {
    let (base, train_ds, test_ds) = fixture();
    for method in [
        SelectionMethod::Damage(DamageMethod::ObdSd),
        SelectionMethod::DropoutRegression,
        SelectionMethod::Merge,
    ] {
        let schedule = quick_schedule(PruneLevel::Neuron, method);
        let trace = prune_finetune_loop(&base, &schedule, &train_ds, &test_ds).unwrap();
        assert_eq!(trace.rows.len(), 3, "{}", method.name());
        let widths0 = &trace.rows[0].neurons_per_layer;
        let widths2 = &trace.rows[2].neurons_per_layer;
        assert_eq!(widths0, &vec![12, 8]);
        assert!(
            widths2.iter().zip(widths0).all(|(a, b)| a < b),
            "{}: widths {:?} -> {:?}",
            method.name(),
            widths0,
            widths2
        );
        // structural removal shrinks the raw payload
        assert!(trace.rows[2].sizes.raw_bytes < trace.rows[0].sizes.raw_bytes);
    }
}

#[test]
fn global_scope_honors_the_layer_floor() {
    let (base, train_ds, test_ds) = fixture();
    let mut schedule = quick_schedule(
        PruneLevel::Neuron,
        SelectionMethod::Damage(DamageMethod::Magnitude),
    );
    schedule.rounds = 3;
    schedule.scope = PruneScope::Global;
    schedule.fraction_per_round = 0.3;
    schedule.layer_floor = 3;
    let trace = prune_finetune_loop(&base, &schedule, &train_ds, &test_ds).unwrap();
    for row in &trace.rows {
        assert!(row.neurons_per_layer.iter().all(|&w| w >= 3), "{row:?}");
    }
    // 20 -> 14 -> 9 -> 6 total; the floor forces exactly (3, 3)
    let last = trace.rows.last().unwrap();
    assert_eq!(last.neurons_per_layer, vec![3, 3]);
    // one more round cannot satisfy the floor and is rejected, not fudged
    schedule.rounds = 4;
    assert!(prune_finetune_loop(&base, &schedule, &train_ds, &test_ds).is_err());
}

#[test]
fn parameter_level_rejects_neuron_only_methods() {
    let schedule = quick_schedule(PruneLevel::Parameter, SelectionMethod::Merge);
    assert!(schedule.validate().is_err());
    let schedule = quick_schedule(PruneLevel::Parameter, SelectionMethod::DropoutRegression);
    assert!(schedule.validate().is_err());
}
