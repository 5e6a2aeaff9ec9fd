use carafe_core::{Shape, Tensor};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 4]> {
    (1usize..4, 1usize..4, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #[test]
    fn write_then_read(d in dims(), v in -1e6f64..1e6) {
        let mut t = Tensor::<f64>::new(d, 0.0).unwrap();
        for b in 0..d[0] { for c in 0..d[1] { for i in 0..d[2] { for j in 0..d[3] {
            let x = v + (((b * 7 + c) * 13 + i) * 17 + j) as f64;
            t.set(b, c, i, j, x);
            prop_assert_eq!(t.get(b, c, i, j), x);
            let off = ((b * d[1] + c) * d[2] + i) * d[3] + j;
            prop_assert_eq!(t.data()[off], x);
        }}}}
    }

    #[test]
    fn window_matches_indexing(d in dims(), k in prop::sample::select(vec![1usize, 3, 5, 7]), ci in 0usize..7, cj in 0usize..7, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::random_uniform(Shape::try_from(d).unwrap(), -1.0, 1.0, &mut rng);
        let (ci, cj) = (ci % d[2], cj % d[3]);
        let win = t.read_window(d[0] - 1, d[1] - 1, (ci, cj), k).unwrap();
        let r = (k / 2) as isize;
        for dn in -r..=r {
            for dm in -r..=r {
                let (i, j) = (ci as isize + dn, cj as isize + dm);
                let inside = i >= 0 && j >= 0 && (i as usize) < d[2] && (j as usize) < d[3];
                let want = if inside { t.get(d[0] - 1, d[1] - 1, i as usize, j as usize) } else { 0.0 };
                prop_assert_eq!(win.at(dn, dm), want);
            }
        }
        if k == 1 {
            prop_assert_eq!(win.values, vec![t.get(d[0] - 1, d[1] - 1, ci, cj)]);
        }
    }

    #[test]
    fn data_length_is_product(d in dims()) {
        let t = Tensor::<f32>::new(d, 1.0).unwrap();
        prop_assert_eq!(t.len(), d.iter().product::<usize>());
    }
}

#[test]
fn reduce_mean_of_constant() {
    let t = Tensor::<f64>::new([2, 3, 4, 5], 1.5).unwrap();
    assert_eq!(t.reduce_mean(), 1.5);
    assert_eq!(t.len(), 120);
}

#[test]
fn mismatched_shapes_rejected() {
    let a = Tensor::<f64>::new([1, 1, 1, 2], 1.0).unwrap();
    let b = Tensor::<f64>::new([1, 1, 2, 1], 1.0).unwrap();
    assert!(a.add(&b).is_err());
}
