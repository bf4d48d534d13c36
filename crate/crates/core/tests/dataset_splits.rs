use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};
use syngrid_core::dataset::{build_split, read_split, write_split, Episode, SplitConfig, SplitName, SplitSpec};
use syngrid_core::oracle::oracle;
use syngrid_core::syntax::{mask_from_dependency, parse_dependency};

fn cfg(split: SplitName, train: usize, test: usize) -> SplitConfig {
    SplitConfig { seed: 11, split, train_size: train, test_size: test, val_size: 50, max_relations: 2 }
}

fn cell(ep: &Episode) -> String {
    format!("{:?}/{:?}/{}", ep.ast.verb, ep.ast.adverb, ep.ast.num_relations())
}

#[test]
fn random_split_sides_look_alike() {
    let c = build_split(&cfg(SplitName::Random, 4000, 2000)).unwrap();
    let mut table: BTreeMap<String, [f64; 2]> = BTreeMap::new();
    for (side, eps) in [&c.train, &c.test].into_iter().enumerate() {
        for ep in eps {
            table.entry(cell(ep)).or_default()[side] += 1.0;
        }
    }
    let totals = [c.train.len() as f64, c.test.len() as f64];
    let grand = totals[0] + totals[1];
    let mut stat = 0.0;
    for counts in table.values() {
        let row = counts[0] + counts[1];
        for side in 0..2 {
            let expected = row * totals[side] / grand;
            stat += (counts[side] - expected).powi(2) / expected;
        }
    }
    let df = (table.len() - 1) as f64;
    let p = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat:.2} on {df} dof, p = {p:.4}");
}

#[test]
fn ast_and_text_predicates_agree() {
    for split in SplitName::ALL {
        let c = build_split(&cfg(split, 300, 100)).unwrap();
        let spec = SplitSpec::new(split);
        for ep in c.train.iter().chain(&c.test).chain(&c.val) {
            assert_eq!(spec.held_out(&ep.ast), spec.held_out_text(&ep.command()), "{}", ep.command());
        }
        if split != SplitName::Random {
            assert!(c.train.iter().all(|e| !spec.held_out(&e.ast)));
            assert!(c.test.iter().chain(&c.val).all(|e| spec.held_out(&e.ast)));
        }
    }
}

#[test]
fn c1_train_has_one_relation_at_most() {
    let c = build_split(&cfg(SplitName::C1ClauseDepth, 500, 100)).unwrap();
    assert!(c.train.iter().all(|e| e.ast.num_relations() <= 1));
    assert!(c.test.iter().all(|e| e.ast.num_relations() == 2));
}

#[test]
fn episodes_are_internally_consistent() {
    let c = build_split(&cfg(SplitName::B2RelationCooccur, 300, 100)).unwrap();
    for ep in c.train.iter().chain(&c.test) {
        assert_eq!(oracle(&ep.world, &ep.ast).unwrap(), ep.actions);
        let tokens = syngrid_core::grammar::render(&ep.ast);
        assert_eq!(ep.mask, mask_from_dependency(&parse_dependency(&ep.ast, &tokens).unwrap()));
    }
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = cfg(SplitName::A1ColorShape, 120, 40);
    let c = build_split(&config).unwrap();
    for include_mask in [false, true] {
        write_split(dir.path(), &config, &c, include_mask).unwrap();
        let (manifest, back) = read_split(dir.path()).unwrap();
        assert_eq!(manifest.masks_included, include_mask);
        assert_eq!(manifest.train_size, 120);
        assert_eq!(back.train.len(), c.train.len());
        for (a, b) in back.train.iter().chain(&back.test).zip(c.train.iter().chain(&c.test)) {
            assert_eq!(a.command(), b.command());
            assert_eq!(a.world, b.world);
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.mask, b.mask);
        }
    }
}

#[test]
fn zero_sizes_are_rejected() {
    assert!(build_split(&cfg(SplitName::Random, 0, 10)).is_err());
    assert!(build_split(&cfg(SplitName::Random, 10, 0)).is_err());
}
