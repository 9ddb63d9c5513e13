use ovfree::c64;
use ovfree::killer::{
    build_killer, dense_targets, eval_killer, halfplane_check, killer_derivative, non_invertibility_witness,
    prefix_family,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn derivative_matches_central_difference() {
    let f = build_killer(&[c64(0.0, 1.0), c64(1.0, 1.0), c64(0.3, 2.0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let h = 1e-6;
    for _ in 0..100 {
        let z = c64(rng.random_range(-3.0..3.0), rng.random_range(0.2..3.0));
        let fd = (eval_killer(&f, z + h) - eval_killer(&f, z - h)) / (2.0 * h);
        assert!((fd - killer_derivative(&f, z)).norm() <= 1e-6, "{z}");
    }
}

#[test]
fn images_stay_above() {
    let f = build_killer(&dense_targets(12)).unwrap();
    assert!(halfplane_check(&f, 10_000, 4) >= 0.0);
}

#[test]
fn adding_targets_keeps_earlier_kills() {
    let targets = dense_targets(10);
    for f in prefix_family(&targets, &[1, 2, 4, 7, 10]).unwrap() {
        for z in &f.targets {
            assert!(killer_derivative(&f, *z).norm() <= 1e-10, "{z}");
        }
    }
}

#[test]
fn witnesses_at_targets_and_elsewhere() {
    let f = build_killer(&[c64(0.0, 1.0), c64(1.0, 1.0), c64(0.3, 2.0)]).unwrap();
    for z in &f.targets {
        let rep = non_invertibility_witness(&f, *z, 1e-3).unwrap();
        assert!(rep.quadratic_contact, "{rep:?}");
        assert!(rep.pair.0 != rep.pair.1);
        assert!(rep.pair_image_distance <= 1e-2 * rep.delta, "{rep:?}");
    }
    let z = c64(-2.0, 3.0);
    assert!(killer_derivative(&f, z).norm() > 0.1);
    let rep = non_invertibility_witness(&f, z, 1e-3).unwrap();
    assert!(rep.locally_invertible && !rep.quadratic_contact);
}
