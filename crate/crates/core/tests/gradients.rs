mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{layer_reports, tinycnn_reports, TOL};
use hpcnn_core::model::{basic_block, GraphBuilder, LayerKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use hpcnn_core::nn::gradcheck::check_model;

#[test]
fn layer_ops_pass_on_20_seeds() {
    for seed in 0..20 {
        for (name, r) in layer_reports(seed) {
            assert!(r.passed, "seed {seed} {name}: {r:?}");
        }
    }
}

#[test]
fn tinycnn_passes_on_20_seeds() {
    let t0 = Instant::now();
    let mut covered: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..20 {
        for c in tinycnn_reports(seed, 12) {
            assert!(c.report.passed, "seed {seed} {}: {:?}", c.name, c.report);
            *covered.entry(c.name).or_default() += c.report.checked;
        }
    }
    // Probes on the first block cross ReLU/max-pool switches for most
    // coordinates, but every tensor must get some smooth coordinates overall.
    for (name, n) in &covered {
        assert!(*n > 0, "{name} never checked");
    }
    assert!(t0.elapsed().as_secs() < 60);
}

#[test]
fn residual_block_passes() {
    for (stride, cout) in [(1, 3), (2, 4)] {
        let mut b = GraphBuilder::<f64>::new([3, 6, 6]);
        let out = basic_block(&mut b, "block", 0, 3, cout, stride);
        let p = b.global_avg_pool("pool", out);
        let f = b.flatten("flatten", p);
        let model = b.build("block_probe", f, cout, 21).unwrap();
        let projections = model.count_nodes(|n| n.name.starts_with("block.shortcut") && matches!(n.kind, LayerKind::Conv(_)));
        assert_eq!(projections, usize::from(stride != 1 || cout != 3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = common::random(&[2, 3, 6, 6], &mut rng);
        for c in check_model(&model, &x, &[0, cout - 1], 20, TOL, 5).unwrap() {
            assert!(c.report.passed && c.report.checked > 0, "stride {stride} {}: {:?}", c.name, c.report);
        }
    }
}
