//! Property tests over randomly generated well-typed terms.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use qcl::pure_check::{check_term, typecheck_unitary};
use qcl::pure_core::{PureTerm, UnitaryExpr};
use qcl::pure_denot::{interp_term_at, interp_unitary_at, TruncationConfig};
use qcl::pure_eval::{equal_terms, normalize, NormalValue};

fn cfg() -> TruncationConfig {
    TruncationConfig::with_dim(QNAT_DIM)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_terms_are_well_typed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ctx, t, q) = gen_open(&mut rng, MAX_DIM);
        prop_assert!(check_term(&ctx, &t, &q).is_ok(), "{}", t);
    }

    #[test]
    fn normal_forms_are_normal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gen_type(&mut rng, MAX_DIM, 3);
        let t = gen_closed(&mut rng, &q, 3);
        let v = normalize(&t).unwrap();
        prop_assert!((v.norm_sqr() - 1.0).abs() < 1e-9);
        prop_assert_eq!(NormalValue::from_term(&v.to_term()), Some(v.clone()));
        prop_assert!(equal_terms(&t, &v.to_term()).unwrap());
    }

    #[test]
    fn normal_form_matches_denotation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gen_type(&mut rng, MAX_DIM, 3);
        let t = gen_closed(&mut rng, &q, 3);
        let direct = interp_term_at(&vec![], &t, &q, &cfg()).unwrap();
        let via_normal = interp_term_at(&vec![], &normalize(&t).unwrap().to_term(), &q, &cfg()).unwrap();
        prop_assert!(direct.max_diff(&via_normal) < 1e-9);
    }

    #[test]
    fn adjoint_inverts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gen_type(&mut rng, MAX_DIM, 3);
        let u = gen_unitary(&mut rng, &q, 3);
        let t = gen_closed(&mut rng, &q, 2);
        let back = PureTerm::apply(UnitaryExpr::adjoint(u.clone()), PureTerm::apply(u, t.clone()));
        prop_assert!(equal_terms(&t, &back).unwrap());
    }

    #[test]
    fn adjoint_denotes_conjugate_transpose(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gen_type(&mut rng, 16, 2);
        let u = gen_unitary(&mut rng, &q, 2);
        prop_assert!(typecheck_unitary(&u).is_ok());
        let (m, _) = interp_unitary_at(&u, &q, &q, &cfg()).unwrap();
        let (a, _) = interp_unitary_at(&UnitaryExpr::adjoint(u), &q, &q, &cfg()).unwrap();
        prop_assert!(m.adjoint().max_diff(&a) < 1e-9);
    }
}
