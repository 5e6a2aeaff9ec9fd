use carafe_core::baselines::{avg_pool, bilinear_up, max_pool, nearest_up, resample_forward};
use carafe_core::{
    carafe_forward, CarafeConfig, CarafeParams, Direction, ResampleKind, ResampleOp, Shape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_kind_meets_the_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in ResampleKind::ALL {
        for sigma in 1..=3 {
            let op = ResampleOp::<f64>::new(kind, sigma, 2, &mut rng).unwrap();
            for h in 1..=7 {
                for w in 1..=7 {
                    let x = Tensor::<f64>::random_uniform(Shape::new(1, 2, h, w).unwrap(), -1.0, 1.0, &mut rng);
                    let y = resample_forward(&op, &x).unwrap();
                    let want = match kind.direction() {
                        Direction::Down => [1, 2, h.div_ceil(sigma), w.div_ceil(sigma)],
                        Direction::Up => [1, 2, sigma * h, sigma * w],
                    };
                    assert_eq!(y.shape().dims(), want, "{kind} sigma {sigma} {h}x{w}");
                }
            }
        }
    }
}

#[test]
fn documented_values() {
    let x = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![3.5]).unwrap();
    assert_eq!(nearest_up(&x, 2).unwrap().data(), &[3.5; 4]);
    let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    assert_eq!(avg_pool(&x, 2).unwrap().data(), &[4.0]);
    let c = Tensor::<f64>::new([1, 2, 3, 4], 0.7).unwrap();
    assert!(bilinear_up(&c, 2).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn avg_pool_matches_uniform_carafe_where_padding_is_unused() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for sigma in [1usize, 3] {
        let cfg = CarafeConfig::down(sigma).with_kernels(3, sigma);
        let mut p = CarafeParams::<f64>::init(2, &cfg, &mut rng).unwrap();
        p.zero_encoder();
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 2, 10, 11).unwrap(), -1.0, 1.0, &mut rng);
        let (y, _) = carafe_forward(&x, &p, &cfg).unwrap();
        let a = avg_pool(&x, sigma).unwrap();
        let r = sigma / 2;
        for c in 0..2 {
            for i in 0..y.shape().h {
                for j in 0..y.shape().w {
                    let (si, sj) = (sigma * i, sigma * j);
                    if si >= r && sj >= r && si + r < 10 && sj + r < 11 {
                        assert!((y.get(0, c, i, j) - a.get(0, c, i, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn max_pool_dominates_avg_pool(sigma in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 2, h, w).unwrap(), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let (m, _) = max_pool(&x, sigma).unwrap();
        let a = avg_pool(&x, sigma).unwrap();
        prop_assert!(m.data().iter().zip(a.data()).all(|(m, a)| m >= a));
    }
}
