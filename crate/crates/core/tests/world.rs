use mita::experiment::{build_source, clean_accuracy, ExperimentConfig};
use mita::baselines::{adapt_and_predict, Method};
use mita::diffnet::NetSpec;
use mita::scenarios::{apply_shift, LabeledBatch, ShiftKind, ShiftSpec};
use mita::seeds::mix_seed;

fn accuracy_on(net: &mita::diffnet::ParamNet, data: &LabeledBatch) -> f64 {
    let labels = adapt_and_predict(&Method::Source, net, &data.x, 0).unwrap().labels;
    let hits = labels.iter().zip(&data.y_hidden).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / data.len() as f64
}

#[test]
fn two_separated_blobs_train_to_high_accuracy() {
    let mut cfg = ExperimentConfig::default();
    cfg.source.num_classes = 2;
    cfg.source.means = Some(vec![vec![-0.5, -0.5], vec![0.5, 0.5]]);
    cfg.source.n_train_per_class = 300;
    cfg.source.n_test_per_class = 300;
    cfg.net = NetSpec::new(2, vec![16], 2).with_norm(true);
    cfg.training.steps = 300;
    let world = build_source(&cfg).unwrap();
    let acc = clean_accuracy(&world.trained.net, &world.test).unwrap().unwrap();
    assert!(acc >= 95.0, "clean accuracy {acc}");
}

#[test]
fn default_world_trains_to_high_accuracy() {
    let cfg = ExperimentConfig::default();
    let world = build_source(&cfg).unwrap();
    let acc = clean_accuracy(&world.trained.net, &world.test).unwrap().unwrap();
    assert!(acc >= 95.0, "clean accuracy {acc}");
    let losses = &world.trained.loss_trace;
    assert_eq!(losses.len(), cfg.training.steps);
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn source_accuracy_falls_with_severity() {
    let cfg = ExperimentConfig::default();
    let world = build_source(&cfg).unwrap();
    for kind in ShiftKind::ALL {
        let mut means = Vec::new();
        for sev in 1..=5u8 {
            let mut total = 0.0;
            for seed in 0..5u64 {
                let x = apply_shift(&world.test.x, &ShiftSpec::new(kind, sev), mix_seed(seed, sev as u64)).unwrap();
                let shifted = LabeledBatch::new(x, world.test.y_hidden.clone(), world.test.tags.clone()).unwrap();
                total += accuracy_on(&world.trained.net, &shifted);
            }
            means.push(total / 5.0);
        }
        for w in means.windows(2) {
            // allow a sampling wobble of a tenth of a point
            assert!(w[1] <= w[0] + 0.1, "{kind}: {means:?}");
        }
    }
}
