mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssnet::losses::{
    bce, dice, loss_terms, map_shadow_to_surface, map_surface_to_shadow, tcc_loss, total_loss,
    MappingParams,
};
use ssnet::phantom::{generate_sample, PhantomSpec};
use ssnet::Mask;
use tch::{Kind, Tensor};

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

#[test]
fn bce_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let p = random_grid(&mut rng, h, w, 0.0, 1.0);
        let q = random_grid(&mut rng, h, w, 0.0, 1.0);
        let got = scalar(&bce(&to_tensor(&p), &to_tensor(&q)).unwrap());
        assert!((got - oracle_bce(&p, &q)).abs() < 1e-9);
    }
}

#[test]
fn mappings_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..20), rng.random_range(1..10));
        let t = rng.random_range(1..6);
        let g = random_grid(&mut rng, h, w, 0.0, 1.0);
        let params = MappingParams::new(t as i64).unwrap();
        let f1 = from_tensor(&map_surface_to_shadow(&to_tensor(&g), &params).unwrap());
        let f2 = from_tensor(&map_shadow_to_surface(&to_tensor(&g), &params).unwrap());
        assert_eq!(f1, oracle_f1(&g));
        assert!(max_abs_diff(&f2, &oracle_f2(&g, t)) < 1e-15);
    }
}

#[test]
fn mappings_act_per_image_in_a_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_grid(&mut rng, 6, 5, 0.0, 1.0);
    let b = random_grid(&mut rng, 6, 5, 0.0, 1.0);
    let batch = Tensor::stack(&[to_tensor(&a), to_tensor(&b)], 0).unsqueeze(1);
    let p = MappingParams::new(2).unwrap();
    let out = map_shadow_to_surface(&batch, &p).unwrap();
    assert_eq!(from_tensor(&out.get(1).get(0)), oracle_f2(&b, 2));
    let out = map_surface_to_shadow(&batch, &p).unwrap();
    assert_eq!(from_tensor(&out.get(0).get(0)), oracle_f1(&a));
}

#[test]
fn tcc_at_half_maps_matches_oracle() {
    let (h, w, t) = (8, 8, 3);
    let zero = vec![vec![0.0; w]; h];
    let half = vec![vec![0.5; w]; h];
    let params = MappingParams::new(t as i64).unwrap();
    let got = scalar(
        &tcc_loss(&to_tensor(&zero), &to_tensor(&zero), &to_tensor(&half), &to_tensor(&half), &params)
            .unwrap(),
    );
    let want = oracle_tcc(&zero, &zero, &half, &half, t);
    assert!(got.is_finite() && got > 0.0);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = Tensor::zeros([4, 4], (Kind::Double, tch::Device::Cpu));
    let b = Tensor::zeros([4, 5], (Kind::Double, tch::Device::Cpu));
    let p = MappingParams::default();
    assert!(tcc_loss(&a, &a, &a, &b, &p).is_err());
    assert!(total_loss(&a, &b, &a, &a, &p, false).is_err());
    assert!(dice(&Mask::zeros((2, 2)), &Mask::zeros((2, 3))).is_err());
}

/// Autodiff gradients of the loss ops against central differences of the
/// scalar-loop oracles (ε = 1e-4).
#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 1e-4;
    let t = 3usize;
    let params = MappingParams::new(t as i64).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let y1 = binary_grid(&mut rng, 8, 8, 0.3);
        let y2 = binary_grid(&mut rng, 8, 8, 0.5);
        let h1 = random_grid(&mut rng, 8, 8, 0.05, 0.95);
        let h2 = random_grid(&mut rng, 8, 8, 0.05, 0.95);

        let q = leaf(&h1);
        bce(&to_tensor(&y1), &q).unwrap().backward();
        let fd = fd_gradient(|x| oracle_bce(&y1, x), &h1, eps);
        worst = worst.max(rel_err(&from_tensor(&q.grad()), &fd));

        let (a, b) = (leaf(&h1), leaf(&h2));
        tcc_loss(&to_tensor(&y1), &to_tensor(&y2), &a, &b, &params).unwrap().backward();
        let fd_a = fd_gradient(|x| oracle_tcc(&y1, &y2, x, &h2, t), &h1, eps);
        let fd_b = fd_gradient(|x| oracle_tcc(&y1, &y2, &h1, x, t), &h2, eps);
        worst = worst.max(rel_err(&from_tensor(&a.grad()), &fd_a));
        worst = worst.max(rel_err(&from_tensor(&b.grad()), &fd_b));

        for tcc_on in [false, true] {
            let (a, b) = (leaf(&h1), leaf(&h2));
            loss_terms(&to_tensor(&y1), &to_tensor(&y2), &a, &b, &params, tcc_on)
                .unwrap()
                .total
                .backward();
            let fd_a = fd_gradient(|x| oracle_total(&y1, &y2, x, &h2, t, tcc_on), &h1, eps);
            let fd_b = fd_gradient(|x| oracle_total(&y1, &y2, &h1, x, t, tcc_on), &h2, eps);
            worst = worst.max(rel_err(&from_tensor(&a.grad()), &fd_a));
            worst = worst.max(rel_err(&from_tensor(&b.grad()), &fd_b));
        }
    }
    assert!(worst < 1e-3, "worst relative gradient error {worst:e}");
}

#[test]
fn phantom_masks_are_exact_mapping_pairs() {
    let spec = PhantomSpec::default();
    let params = MappingParams::new(spec.band_thickness as i64).unwrap();
    for seed in 0..100 {
        let s = generate_sample(&spec, seed).unwrap();
        let y1 = to_tensor(&mask_to_grid(&s.y1));
        let y2 = to_tensor(&mask_to_grid(&s.y2));
        let f1 = map_surface_to_shadow(&y1, &params).unwrap();
        let f2 = map_shadow_to_surface(&y2, &params).unwrap();
        let m = |t: &Tensor| from_tensor(t);
        assert_eq!(oracle_dice(&m(&f1), &m(&y2)), 1.0, "seed {seed}");
        assert_eq!(oracle_dice(&m(&f2), &m(&y1)), 1.0, "seed {seed}");
        let tcc = scalar(&tcc_loss(&y1, &y2, &y1, &y2, &params).unwrap());
        assert!(tcc < 2e-6, "seed {seed}: tcc {tcc}");
        let total = total_loss(&y1, &y2, &y1, &y2, &params, true).unwrap();
        assert!(total.total < 1e-5);
        assert_eq!(total.total, total.bce_surface + total.bce_shadow + total.tcc);
    }
}

#[test]
fn dice_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let a = binary_grid(&mut rng, h, w, 0.3);
        let b = binary_grid(&mut rng, h, w, 0.3);
        let ma = Mask::from_shape_fn((h, w), |(y, x)| a[y][x] as u8);
        let mb = Mask::from_shape_fn((h, w), |(y, x)| b[y][x] as u8);
        assert!((dice(&ma, &mb).unwrap() - oracle_dice(&a, &b)).abs() < 1e-15);
    }
}

fn grid_strategy() -> impl Strategy<Value = Grid> {
    (1usize..10, 1usize..8).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop::collection::vec(0.0f64..=1.0, w), h)
    })
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0u8..=1, h * w),
            prop::collection::vec(0u8..=1, h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    Mask::from_shape_vec((h, w), a).unwrap(),
                    Mask::from_shape_vec((h, w), b).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f1_is_idempotent_and_monotone(g in grid_strategy()) {
        let p = MappingParams::default();
        let once = map_surface_to_shadow(&to_tensor(&g), &p).unwrap();
        let twice = map_surface_to_shadow(&once, &p).unwrap();
        prop_assert!(once.equal(&twice));
        let o = from_tensor(&once);
        for y in 1..o.len() {
            for x in 0..o[0].len() {
                prop_assert!(o[y][x] >= o[y - 1][x]);
            }
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn losses_are_non_negative(p in grid_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (p.len(), p[0].len());
        let q = random_grid(&mut rng, h, w, 0.0, 1.0);
        let yb = binary_grid(&mut rng, h, w, 0.5);
        prop_assert!(scalar(&bce(&to_tensor(&p), &to_tensor(&q)).unwrap()) >= 0.0);
        let b = total_loss(&to_tensor(&yb), &to_tensor(&yb), &to_tensor(&q), &to_tensor(&p), &MappingParams::new(2).unwrap(), true).unwrap();
        prop_assert!(b.bce_surface >= 0.0 && b.bce_shadow >= 0.0 && b.tcc >= 0.0);
        prop_assert_eq!(b.total, b.bce_surface + b.bce_shadow + b.tcc);
    }
}
