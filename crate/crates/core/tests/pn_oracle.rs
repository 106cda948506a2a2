use cemmaf_core::pn::{pn_objective, solve_pn, PnHyperParams, PnOutcome};
use cemmaf_core::toy::{pn_grid_oracle, pn_line_instance};
use cemmaf_core::{DenseNet, Image, ModelBundle, Tensor};
use cemmaf_core::{Activation, Attribute};

#[test]
fn line_family_matches_grid_oracle() {
    for seed in 0..20 {
        let inst = pn_line_instance(seed).unwrap();
        let z_x0 = inst.bundle.latent_code(&inst.x0).unwrap()[0];
        let oracle = pn_grid_oracle(&inst.bundle, z_x0, 0, inst.hp.kappa, (-0.5, 1.5, 1e-3))
            .unwrap()
            .expect("the family always has a valid region");
        let r = match solve_pn(&inst.bundle, &inst.x0, &inst.hp).unwrap() {
            PnOutcome::Found(r) => r,
            PnOutcome::NotFound(_) => panic!("seed {seed}: no PN found"),
        };
        assert_eq!(r.predicted, 1);
        assert!(r.margin >= inst.hp.kappa);
        let gap = (r.z[0] - oracle).abs();
        assert!(gap < 0.02, "seed {seed}: solver {} vs oracle {oracle}", r.z[0]);
        // Valid points with smaller latent distance do not exist.
        assert!(r.latent_distance() + 1e-3 >= (oracle - z_x0).abs());
    }
}

#[test]
fn logged_terms_match_recomputation() {
    for seed in 0..5 {
        let inst = pn_line_instance(seed).unwrap();
        let r = match solve_pn(&inst.bundle, &inst.x0, &inst.hp).unwrap() {
            PnOutcome::Found(r) => r,
            PnOutcome::NotFound(_) => panic!("no PN"),
        };
        let (total, terms) =
            pn_objective(&inst.bundle, &inst.x0, &r.log.z_x0, r.t0(), &r.z, &inst.hp, r.c).unwrap();
        assert!((total - r.objective).abs() < 1e-9);
        for (a, b) in terms.as_array().iter().zip(r.terms.as_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Darkness rises on the way to the other class.
        assert_eq!(r.added().map(|a| a.name.as_str()).collect::<Vec<_>>(), ["darkness"]);
        assert_eq!(r.violations().count(), 0);
    }
}

#[test]
fn constant_classifier_exhausts_the_schedule() {
    let bundle = ModelBundle::new(
        [1, 2, 1],
        2,
        vec!["a".into(), "b".into(), "c".into()],
        DenseNet::linear(
            Tensor::matrix(3, 2, vec![0.0; 6]).unwrap(),
            Tensor::vector(vec![3.0, 1.0, 0.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap(),
        DenseNet::identity(2).unwrap(),
        None,
        vec![Attribute::new("first", DenseNet::linear(
            Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            Tensor::vector(vec![0.0]).unwrap(),
            Activation::Identity,
        ).unwrap(), 0.0, 1.0).unwrap()],
    )
    .unwrap();
    let hp = PnHyperParams {
        iters: 50,
        ..PnHyperParams::default()
    };
    let x0 = Image::new(1, 2, 1, vec![0.4, 0.6]).unwrap();
    match solve_pn(&bundle, &x0, &hp).unwrap() {
        PnOutcome::NotFound(log) => {
            assert_eq!(log.t0, 0);
            assert_eq!(log.c_schedule(), vec![1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8]);
            assert!(log.rounds.iter().all(|r| !r.found));
        }
        PnOutcome::Found(_) => panic!("constant classifier cannot be flipped"),
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let inst = pn_line_instance(0).unwrap();
    let wrong = Image::new(2, 1, 1, vec![0.1, 0.2]).unwrap();
    assert!(solve_pn(&inst.bundle, &wrong, &inst.hp).is_err());
}
