mod common;

use common::{brute_force_assignment, random_box};
use fusiondet::autodiff::{Tape, Tensor};
use fusiondet::geom::Box7;
use fusiondet::xua::{assignment_cost, delta_d, delta_d_var, hungarian, match_boxes, uncertainty_loss};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(m, n)| prop::collection::vec(prop::collection::vec(0.0..100.0f64, n), m))
}

fn boxes(n: usize, seed: u64) -> Vec<Box7> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_box(&mut rng, (0.0, 0.0), 20.0)).collect()
}

proptest! {
    #[test]
    fn hungarian_is_optimal(cost in cost_matrix()) {
        let pairs = hungarian(&cost).unwrap();
        let (m, n) = (cost.len(), cost[0].len());
        prop_assert_eq!(pairs.len(), m.min(n));
        let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(rows.len(), pairs.len());
        prop_assert_eq!(cols.len(), pairs.len());
        let got = assignment_cost(&cost, &pairs);
        prop_assert!((got - brute_force_assignment(&cost)).abs() < 1e-9);
    }

    #[test]
    fn delta_is_symmetric_and_weights_bounded(k in 1usize..8, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (boxes(k, s1), boxes(k, s2));
        let ab = delta_d(&a, &b).unwrap();
        let ba = delta_d(&b, &a).unwrap();
        prop_assert_eq!(&ab, &ba);
        for d in ab.iter().flatten() {
            prop_assert!(*d >= 0.0);
            let w = (-d).exp();
            prop_assert!(w > 0.0 && w <= 1.0);
        }
        prop_assert!(ab[0][6] <= std::f64::consts::PI);
        prop_assert!(delta_d(&a, &a).unwrap().iter().flatten().all(|&d| d == 0.0));
    }

    #[test]
    fn matching_pairs_every_box_of_the_smaller_side(m in 0usize..6, n in 0usize..6, seed in any::<u64>()) {
        let (l, r) = (boxes(m, seed), boxes(n, seed.wrapping_add(1)));
        let res = match_boxes(&l, &r, None).unwrap();
        prop_assert_eq!(res.k(), m.min(n));
        prop_assert!(res.pairs.windows(2).all(|w| w[0].0 < w[1].0));
    }
}

#[test]
fn uncertainty_term_pulls_matched_boxes_together() {
    let (a, b) = (boxes(3, 1), boxes(3, 2));
    let flat = |bs: &[Box7]| Tensor::matrix(bs.len(), 7, bs.iter().flat_map(|x| x.to_array()).collect()).unwrap();
    let lambda = 0.5;
    let objective = |l: &Tensor| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let lv = t.input(l.clone()).unwrap();
        let rv = t.constant(flat(&b)).unwrap();
        let d = delta_d_var(&mut t, lv, rv).unwrap();
        let zero = t.constant(Tensor::zeros(&[3, 7])).unwrap();
        let loss = uncertainty_loss(&mut t, zero, d, lambda).unwrap();
        let v = t.value(loss).item();
        (v, t.backward(loss).unwrap().wrt(lv).unwrap().data().to_vec())
    };
    let start = flat(&a);
    let (before, grad) = objective(&start);
    let expected = lambda / 21.0;
    for g in &grad {
        assert!((g.abs() - expected).abs() < 1e-12);
    }
    let stepped: Vec<f64> = start.data().iter().zip(&grad).map(|(x, g)| x - 1e-3 * g.signum()).collect();
    let (after, _) = objective(&Tensor::matrix(3, 7, stepped.clone()).unwrap());
    assert!(after < before);
    let old = delta_d(&a, &b).unwrap();
    let moved: Vec<Box7> = stepped.chunks(7).map(|c| Box7::from_array(c.try_into().unwrap()).unwrap()).collect();
    let new = delta_d(&moved, &b).unwrap();
    for (o, n) in old.iter().flatten().zip(new.iter().flatten()) {
        assert!(n < o, "{n} vs {o}");
    }
}
