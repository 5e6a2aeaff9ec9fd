use carafe_core::gradcheck::{
    check_op, finite_diff, registry, small_carafe, ConvOp, Elementwise, PlainOp, SignFlipped, DEFAULT_EPS,
    DEFAULT_TOL,
};
use carafe_core::nn::ConvLayerParams;
use carafe_core::{carafe_backward, carafe_forward, Direction, Normalizer, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn oracle_on_closed_forms() {
    let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![3.0, -2.0, 0.5, 10.0]).unwrap();
    let g = finite_diff(|t| Ok(t.sum()), &x, DEFAULT_EPS).unwrap();
    assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
    let g = finite_diff(|t| Ok(0.5 * t.dot(t)?), &x, DEFAULT_EPS).unwrap();
    assert!(g.max_abs_diff(&x).unwrap() < 1e-8);
    let a = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![0.3, 1.0, -4.0, 2.0]).unwrap();
    let g = finite_diff(|t| t.dot(&a), &x, DEFAULT_EPS).unwrap();
    assert!(g.max_abs_diff(&a).unwrap() < 1e-8);
}

#[test]
fn conv_and_softmax_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut conv = ConvOp { params: ConvLayerParams::init_uniform(3, 2, 3, &mut rng).unwrap(), stride: 2, pad: 1 };
    let r = check_op(&mut conv, Shape::new(1, 2, 5, 5).unwrap(), 2, 1e-6).unwrap();
    assert!(r.pass, "{r:?}");
    let mut sm = PlainOp::new(Elementwise::Softmax(25));
    let r = check_op(&mut sm, Shape::new(1, 25, 3, 3).unwrap(), 3, DEFAULT_TOL).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn corrupted_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let conv = ConvOp { params: ConvLayerParams::init_uniform(2, 2, 3, &mut rng).unwrap(), stride: 1, pad: 1 };
    let r = check_op(&mut SignFlipped(conv), Shape::new(1, 2, 4, 4).unwrap(), 5, DEFAULT_TOL).unwrap();
    assert!(!r.pass);
    assert!(r.worst_index.is_some());
}

#[test]
fn mean_of_carafe_output_matches_backward() {
    for direction in [Direction::Down, Direction::Up] {
        let op = small_carafe(direction, Normalizer::Softmax, 6).unwrap();
        let (cfg, mut params) = (op.cfg, op.params);
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 3, 4, 4).unwrap(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let (y, cache) = carafe_forward(&x, &params, &cfg).unwrap();
        let n = y.len() as f64;
        let gx = carafe_backward(&Tensor::filled(y.shape(), 1.0 / n), &cache, &mut params).unwrap();
        let num = finite_diff(|t| Ok(carafe_forward(t, &params, &cfg)?.0.reduce_mean()), &x, DEFAULT_EPS).unwrap();
        for (a, b) in gx.data().iter().zip(num.data()) {
            assert!(carafe_core::gradcheck::rel_error(*a, *b) < 1e-5, "{direction}: {a} vs {b}");
        }
    }
}

#[test]
fn registry_names_are_unique() {
    let names: Vec<_> = registry().iter().map(|r| r.name).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}
