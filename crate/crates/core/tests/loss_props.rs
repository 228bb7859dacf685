//! Lovász-softmax range and monotonicity over random probability tables.

use proptest::prelude::*;

use s2tpv::tensor::{Graph, Tensor};
use s2tpv::train::lovasz_softmax;

fn lovasz(probs: &[f64], k: usize, targets: &[usize]) -> f64 {
    let mut g: Graph = Graph::new();
    let p = g.constant(Tensor::new(&[targets.len(), k], probs.to_vec()).unwrap());
    let l = lovasz_softmax(&mut g, p, targets).unwrap();
    g.value(l).item()
}

/// Rows of class probabilities with their targets.
fn table() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>)> {
    (2usize..5, 1usize..12).prop_flat_map(|(k, n)| {
        (
            Just(k),
            proptest::collection::vec(0.01f64..1.0, n * k).prop_map(move |raw| {
                raw.chunks(k)
                    .flat_map(|row| {
                        let s: f64 = row.iter().sum();
                        row.iter().map(move |v| v / s).collect::<Vec<_>>()
                    })
                    .collect()
            }),
            proptest::collection::vec(0..k, n),
        )
    })
}

proptest! {
    #[test]
    fn loss_lies_in_the_unit_interval((k, probs, targets) in table()) {
        let l = lovasz(&probs, k, &targets);
        prop_assert!((0.0..=1.0).contains(&l), "loss {}", l);
    }

    #[test]
    fn raising_one_target_probability_never_raises_the_loss((k, probs, targets) in table(), pick in any::<prop::sample::Index>(), share in 0.05f64..1.0) {
        let i = pick.index(targets.len());
        let at = i * k + targets[i];
        let mut raised = probs.clone();
        raised[at] += share * (1.0 - raised[at]);
        let (before, after) = (lovasz(&probs, k, &targets), lovasz(&raised, k, &targets));
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }
}

#[test]
fn a_lone_misranked_sample_decreases_strictly() {
    // two samples of class 0, one of class 1
    let targets = [0, 0, 1];
    let probs = [0.3, 0.7, 0.9, 0.1, 0.6, 0.4];
    let mut raised = probs;
    raised[0] = 0.8;
    assert!(lovasz(&raised, 2, &targets) < lovasz(&probs, 2, &targets));
}
