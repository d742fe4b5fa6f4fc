mod common;

use common::{check_triple, random_triple, relative_error, HeadKind};
use mita::batch::Batch;
use mita::diffnet::{grad_input, init_net, Activation, NetSpec, NormMode};
use mita::numerics::softmax;

#[test]
fn finite_differences_agree_on_random_triples() {
    let mut worst = (0.0f64, 0.0f64);
    let mut heads = std::collections::HashSet::new();
    for i in 0..100 {
        let t = random_triple(i);
        heads.insert(format!("{:?}/{:?}", t.head, t.mode));
        let (ep, ei) = check_triple(&t);
        assert!(ep < 1e-4, "triple {i}: parameter gradient relative error {ep:e}");
        assert!(ei < 1e-4, "triple {i}: input gradient relative error {ei:e}");
        worst = (worst.0.max(ep), worst.1.max(ei));
    }
    // every head under both norm modes
    assert_eq!(heads.len(), 8);
    assert!(worst.0 < 1e-4 && worst.1 < 1e-4);
}

#[test]
fn triples_cover_every_head() {
    let kinds: Vec<HeadKind> = (0..4).map(|i| random_triple(i).head).collect();
    assert_eq!(
        kinds,
        vec![HeadKind::MeanEnergy, HeadKind::MeanEntropy, HeadKind::Contrastive, HeadKind::CrossEntropy]
    );
}

#[test]
fn linear_input_gradient_matches_closed_form() {
    // E(x) = -logsumexp(Wx + b)  =>  dE/dx = -W^T softmax(Wx + b)
    for seed in 0..10 {
        let spec = NetSpec::new(3, vec![], 4);
        let net = init_net(&spec, seed).unwrap();
        let layout = spec.layout();
        let p = net.params();
        let w = &p[layout[0].weight.clone()];
        let b = &p[layout[0].bias.clone()];
        let rows = [[0.3, -0.7, 1.1], [-1.5, 0.2, 0.05]];
        let x = Batch::from_rows(&rows);
        let (_, g) = grad_input(&net, &x, NormMode::EvalRunningStats).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let z: Vec<f64> = (0..4)
                .map(|o| b[o] + (0..3).map(|i| w[o * 3 + i] * row[i]).sum::<f64>())
                .collect();
            let s = softmax(&z);
            let expect: Vec<f64> = (0..3).map(|i| -(0..4).map(|o| w[o * 3 + i] * s[o]).sum::<f64>()).collect();
            assert!(relative_error(g.row(r), &expect) < 1e-12, "seed {seed} row {r}");
        }
    }
}

#[test]
fn relu_nets_away_from_kinks() {
    // ReLU nets are piecewise smooth; with wide margins finite differences
    // stay on one piece.
    let spec = NetSpec::new(2, vec![4], 3).with_activation(Activation::Relu);
    let net = init_net(&spec, 11).unwrap();
    let x = Batch::from_rows(&[[0.41, -0.23], [-0.37, 0.52]]);
    let pre = net.forward(&x, NormMode::EvalRunningStats).unwrap();
    assert!(pre.is_finite());
    let (_, g) = grad_input(&net, &x, NormMode::EvalRunningStats).unwrap();
    let fd = common::fd_input(&net, &x, NormMode::EvalRunningStats);
    assert!(relative_error(g.as_slice(), &fd) < 1e-6);
}
