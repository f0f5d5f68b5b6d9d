use proptest::prelude::*;
use stylestego_nn::{Graph, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ops_stay_finite_on_bounded_inputs(values in prop::collection::vec(-1e3f64..1e3, 32)) {
        let x = Tensor::new(&[4, 4, 2], values).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x);
        let outs = [
            g.sigmoid(v),
            g.tanh(v),
            g.leaky_relu(v, 0.2),
            g.instance_norm(v, 1e-5).unwrap(),
            g.global_avg_pool(v).unwrap(),
            g.upsample_nearest(v, 2).unwrap(),
            g.square(v),
        ];
        for o in outs {
            prop_assert!(g.value(o).is_finite());
        }
        let loss = g.bce_with_logits(v, 1.0);
        prop_assert!(g.value(loss).is_finite());
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.of(v).unwrap().is_finite());
    }
}
