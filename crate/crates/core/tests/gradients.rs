use std::collections::BTreeMap;

use cemmaf_core::toy::{max_relative_error, random_dense_graph};
use cemmaf_core::{Activation, DenseNet, NodeId, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reverse_mode_matches_central_differences() {
    for seed in 0..20 {
        let case = random_dense_graph(seed).unwrap();
        let exact = case.graph.backward_grad(&case.inputs, case.loss).unwrap();
        let approx = case.graph.finite_diff_grad(&case.inputs, case.loss, 1e-5).unwrap();
        let err = max_relative_error(&exact, &approx);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        assert_eq!(exact.len(), case.inputs.len());
    }
}

#[test]
fn unrelated_inputs_get_zero_gradients() {
    let mut g = cemmaf_core::Graph::new();
    let a = g.input(&[2]).unwrap();
    let b = g.input(&[3]).unwrap();
    let s = g.sum(a).unwrap();
    let mut inputs: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    inputs.insert(a, Tensor::vector(vec![1.0, 2.0]).unwrap());
    inputs.insert(b, Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let grads = g.backward_grad(&inputs, s).unwrap();
    assert_eq!(grads[&a].data(), &[1.0, 1.0]);
    assert_eq!(grads[&b].data(), &[0.0, 0.0, 0.0]);
}

fn net(seed: u64) -> DenseNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseNet::random(
        vec![4, 6, 3],
        vec![Activation::Sigmoid, Activation::Sigmoid],
        &mut rng,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Vector-Jacobian products agree with differencing the forward pass.
    #[test]
    fn network_vjp_matches_forward_differences(
        seed in 0u64..1000,
        x in proptest::collection::vec(-2.0f64..2.0, 4),
        cot in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        let net = net(seed);
        let (out, grad) = net.vjp(&x, &cot).unwrap();
        prop_assert_eq!(out, net.forward(&x).unwrap());
        let h = 1e-6;
        for i in 0..x.len() {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += h;
            down[i] -= h;
            let fu: f64 = net.forward(&up).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum();
            let fd: f64 = net.forward(&down).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum();
            let fdiff = (fu - fd) / (2.0 * h);
            prop_assert!((fdiff - grad[i]).abs() < 1e-6, "{} vs {}", fdiff, grad[i]);
        }
    }

    /// The gradient is linear in the cotangent.
    #[test]
    fn vjp_is_linear_in_cotangent(
        seed in 0u64..1000,
        x in proptest::collection::vec(-2.0f64..2.0, 4),
        a in proptest::collection::vec(-1.0f64..1.0, 3),
        b in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        let net = net(seed);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (_, ga) = net.vjp(&x, &a).unwrap();
        let (_, gb) = net.vjp(&x, &b).unwrap();
        let (_, gs) = net.vjp(&x, &sum).unwrap();
        for i in 0..4 {
            prop_assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-12);
        }
    }
}
