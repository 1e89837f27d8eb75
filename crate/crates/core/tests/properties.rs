mod common;

use groundintent::catalog::{normalize_text, CatalogRecord, EntityKind, EntityStore, Query, Taxonomy, Vertical};
use groundintent::disambiguation::{resolve, ConflictWhitelist};
use groundintent::fuzzy::{fuzzy_score, partial_ratio_score, token_set_score};
use groundintent::reasoner::IntentTuple;
use groundintent::retrieval::{build_index, hash_encoder, semantic_topn};
use proptest::prelude::*;

fn taxonomy() -> Taxonomy {
    Taxonomy::new(
        ["a", "b", "c"]
            .iter()
            .map(|v| Vertical {
                id: (*v).into(),
                display_name: v.to_string(),
            })
            .collect(),
    )
    .unwrap()
}

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec("[a-e]{1,4}", 0..4).prop_map(|t| t.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topn_matches_brute_force(
        names in proptest::collection::vec("[a-f]{1,6}( [a-f]{1,6}){0,2}", 1..40),
        query in "[a-f]{0,8}( [a-f]{1,5})?",
        n in 1usize..50,
        dim in 4usize..64,
        seed in any::<u64>(),
    ) {
        let records: Vec<CatalogRecord> = names.iter().enumerate().map(|(i, name)| CatalogRecord {
            entity_id: format!("e{i:03}"),
            name: name.clone(),
            kind: EntityKind::Merchant,
            vertical: "a".into(),
            aliases: vec![],
        }).collect();
        let store = EntityStore::from_records(records, taxonomy(), 1).unwrap();
        let encoder = hash_encoder(dim, seed).unwrap();
        let index = build_index(&store, &encoder).unwrap();
        let q = Query::new(query);
        let got: Vec<(String, f64)> = semantic_topn(&index, &q, &encoder, n).unwrap()
            .into_iter().map(|m| (m.entity_id, m.cosine)).collect();
        let want = common::brute_force_topn(&index, &encoder, &q.normalized, n);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn scores_are_bounded_and_blend_convexly(q in text(), e in text(), alpha in 0.0f64..=1.0) {
        let ts = token_set_score(&q, &e);
        let pr = partial_ratio_score(&q, &e);
        prop_assert!((0.0..=1.0).contains(&ts) && (0.0..=1.0).contains(&pr));
        let f = fuzzy_score(&q, &e, alpha);
        prop_assert!(f >= ts.min(pr) - 1e-12 && f <= ts.max(pr) + 1e-12);
        prop_assert_eq!(fuzzy_score(&q, &e, 1.0), ts);
    }

    #[test]
    fn scores_are_symmetric(q in text(), e in text()) {
        prop_assert!((token_set_score(&q, &e) - token_set_score(&e, &q)).abs() < 1e-12);
        prop_assert!((partial_ratio_score(&q, &e) - partial_ratio_score(&e, &q)).abs() < 1e-12);
    }

    #[test]
    fn identical_strings_score_one(s in text(), alpha in 0.0f64..=1.0) {
        prop_assert_eq!(fuzzy_score(&s, &s, alpha), 1.0);
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,24}") {
        let once = normalize_text(&s);
        prop_assert_eq!(normalize_text(&once), once);
    }

    #[test]
    fn resolution_picks_a_tuple_member(p in 0usize..3, s in proptest::option::of(0usize..3), pairs in proptest::collection::vec((0usize..3, 0usize..3), 0..4)) {
        let ids = ["a", "b", "c"];
        let t = taxonomy();
        let secondary = s.filter(|s| *s != p).map(|s| ids[s].into());
        let tuple = IntentTuple::new(ids[p].into(), secondary, &t).unwrap();
        let w = ConflictWhitelist::new(
            "p",
            pairs.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (ids[a].into(), ids[b].into())),
            &t,
        ).unwrap();
        let r = resolve(&tuple, &w);
        prop_assert!(r.final_vertical == tuple.primary || Some(&r.final_vertical) == tuple.secondary.as_ref());
    }
}
