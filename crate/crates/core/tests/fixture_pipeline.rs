//! End-to-end checks on the default fixture bundle.

use std::sync::OnceLock;

use cemmaf_core::fixture::{read_fixture_manifest, train_fixture, FixtureConfig, FixtureSet};
use cemmaf_core::metrics::{pp_accuracy, pp_correlation, ExplanationRecord};
use cemmaf_core::pn::{pn_objective, solve_pn, PnHyperParams, PnOutcome};
use cemmaf_core::pp::{pp_objective, pp_score_trace, solve_pp, PpHyperParams};
use cemmaf_core::{grid_segment, MaskVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> &'static FixtureSet {
    static SET: OnceLock<FixtureSet> = OnceLock::new();
    SET.get_or_init(|| train_fixture(&FixtureConfig::default(), 7).unwrap())
}

#[test]
fn fixture_quality() {
    let set = fixture();
    assert!(set.manifest.train_accuracy >= 0.95, "{}", set.manifest.train_accuracy);
    assert!(set.manifest.reconstruction_mae < 0.1, "{}", set.manifest.reconstruction_mae);
    assert_eq!(set.images.len(), 10);
    let correct = set.manifest.images.iter().filter(|i| i.label == i.predicted).count();
    assert!(correct >= 9, "{correct}/10 fixture images classified as their blob");
}

#[test]
fn fixture_output_is_deterministic() {
    let cfg = FixtureConfig {
        samples_per_class: 10,
        classifier_epochs: 20,
        autoencoder_epochs: 10,
        ..FixtureConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_fixture(&cfg, 42).unwrap().write(a.path()).unwrap();
    train_fixture(&cfg, 42).unwrap().write(b.path()).unwrap();
    let mut files = Vec::new();
    for sub in ["", "bundle", "images"] {
        for entry in std::fs::read_dir(a.path().join(sub)).unwrap() {
            let path = entry.unwrap().path();
            if path.is_file() {
                files.push(path.strip_prefix(a.path()).unwrap().to_path_buf());
            }
        }
    }
    assert!(files.len() > 10);
    for rel in files {
        assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
    }
    assert_eq!(read_fixture_manifest(a.path()).unwrap().seed, 42);

    let c = tempfile::tempdir().unwrap();
    train_fixture(&cfg, 43).unwrap().write(c.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("bundle/classifier.cmaf")).unwrap(),
        std::fs::read(c.path().join("bundle/classifier.cmaf")).unwrap()
    );
}

#[test]
fn pertinent_negatives_on_fixture() {
    let set = fixture();
    let hp = PnHyperParams::default();
    let mut found = 0;
    for x0 in &set.images {
        let PnOutcome::Found(r) = solve_pn(&set.bundle, x0, &hp).unwrap() else {
            continue;
        };
        found += 1;
        assert_ne!(r.predicted, r.t0());
        assert!(r.margin >= hp.kappa);
        assert!(r.added().count() >= 1);
        let (total, terms) = pn_objective(&set.bundle, x0, &r.log.z_x0, r.t0(), &r.z, &hp, r.c).unwrap();
        assert!((total - r.objective).abs() < 1e-9);
        for (a, b) in terms.as_array().iter().zip(r.terms.as_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert!(found >= 8, "only {found}/10 fixture images have a PN");
}

#[test]
fn pertinent_positives_on_fixture() {
    let set = fixture();
    let hp = PpHyperParams::default();
    let mut records = Vec::new();
    for x0 in &set.images {
        let partition = grid_segment(x0.height(), x0.width(), 200).unwrap();
        let r = solve_pp(&set.bundle, x0, &partition, &hp).unwrap().found().cloned().unwrap();
        assert_eq!(set.bundle.predict(&r.image).unwrap(), r.t0);
        if let (Some(terms), Some(c)) = (r.terms, r.c) {
            let mask = MaskVector::new(r.relaxed_mask.clone()).unwrap();
            let (total, again) = pp_objective(&set.bundle, x0, &partition, &mask, r.t0, &hp, c).unwrap();
            assert!((total - r.objective.unwrap()).abs() < 1e-9);
            for (a, b) in again.as_array().iter().zip(terms.as_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        records.push(ExplanationRecord {
            n_selected: r.selected.len(),
            predicted: r.predicted,
            t0: r.t0,
            score_trace: r.score_trace.clone(),
        });
    }
    assert_eq!(pp_accuracy(&records).unwrap(), 100.0);
}

/// The relaxed-mask ranking raises the original-class score earlier than a
/// random ranking of the same superpixels, giving a more negative correlation.
#[test]
fn solver_ranking_correlates_better_than_random() {
    let set = fixture();
    let hp = PpHyperParams::default();
    let (mut ours, mut random) = (Vec::new(), Vec::new());
    for (i, x0) in set.images.iter().enumerate() {
        let partition = grid_segment(x0.height(), x0.width(), 200).unwrap();
        let r = solve_pp(&set.bundle, x0, &partition, &hp).unwrap().found().cloned().unwrap();
        let top: Vec<usize> = r.ranking.iter().copied().take(16).collect();
        let trace = pp_score_trace(&set.bundle, x0, &partition, &top, r.t0, 0.0).unwrap();
        ours.extend(pp_correlation(&trace));
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + i as u64);
            let mut order: Vec<usize> = (0..partition.count()).collect();
            order.shuffle(&mut rng);
            order.truncate(16);
            let trace = pp_score_trace(&set.bundle, x0, &partition, &order, r.t0, 0.0).unwrap();
            random.extend(pp_correlation(&trace));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!ours.is_empty() && !random.is_empty());
    assert!(mean(&ours) <= mean(&random), "{} vs {}", mean(&ours), mean(&random));
}
