mod common;

use common::{random_inputs, random_model};
use dgp::kernels::{gen_basis_cov, se_ard_cov, BasisPoint, KernelHyper};
use dgp::model::{kl_normal_prior, predict};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn prior_kernel_is_symmetric_and_bounded(
        x in prop::collection::vec(-5.0f64..5.0, 2),
        y in prop::collection::vec(-5.0f64..5.0, 2),
        rho in 0.1f64..3.0,
        s in 0.1f64..3.0,
    ) {
        let h = KernelHyper::new(rho, &[s, s]).unwrap();
        let kxy = se_ard_cov(&x, &y, &h).unwrap();
        prop_assert_eq!(kxy, se_ard_cov(&y, &x, &h).unwrap());
        prop_assert!(kxy >= 0.0 && kxy <= rho * rho * (1.0 + 1e-15));
    }

    #[test]
    fn basis_kernel_never_exceeds_one(
        x in -3.0f64..3.0, y in -3.0f64..3.0, s in 0.2f64..2.0, c in 0.2f64..4.0, c2 in 0.2f64..4.0,
    ) {
        let h = KernelHyper::new(1.0, &[s]).unwrap();
        let b1 = BasisPoint { location: vec![x], log_multipliers: vec![c.ln()] };
        let b2 = BasisPoint { location: vec![y], log_multipliers: vec![c2.ln()] };
        let v = gen_basis_cov(&b1, &b2, &h).unwrap();
        prop_assert!(v >= 0.0 && v <= 1.0 + 1e-15);
    }

    #[test]
    fn kl_nonnegative_and_variance_bounded(seed in 0u64..500, ma in 0usize..7, mb in 0usize..6, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(&mut rng, ma, mb, d);
        prop_assert!(kl_normal_prior(&m).unwrap() >= -1e-12);
        let q = random_inputs(&mut rng, 10, d);
        let p = predict(&m, &q).unwrap();
        let rho2 = m.hyper.amplitude().powi(2);
        prop_assert!(p.variance.iter().all(|v| *v >= 0.0 && *v <= rho2 + 1e-9));
    }

    #[test]
    fn layout_transfer_matches_zero_padded_model(ma in 0usize..5, mb in 0usize..4, d in 1usize..3, ga in 0usize..3, gb in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64((ma * 31 + mb * 7 + d) as u64);
        let m = random_model(&mut rng, ma, mb, d);
        let zero = BasisPoint { location: vec![0.0; d], log_multipliers: vec![0.0; d] };
        let mut grown = m.clone();
        grown.alpha.extend(std::iter::repeat_n(zero.clone(), ga));
        grown.beta.extend(std::iter::repeat_n(zero, gb));
        grown.a = m.a.clone().resize_vertically(ma + ga, 0.0);
        grown.l = m.l.clone().resize(mb + gb, mb + gb, 0.0);
        let moved = m.layout().transfer(&m.to_flat(), &grown.layout()).unwrap();
        prop_assert_eq!(moved, grown.to_flat());
    }
}
