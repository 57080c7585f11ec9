mod common;

use common::{metric_oracle, random_tree, random_unit, risk_oracle, TreeOracle};
use hierprompt::embed::{aggregate_class_embedding, dot, EmbeddingVector};
use hierprompt::eval::evaluate;
use hierprompt::promptgen::{build_prompt_set, comparative_prompts, path_prompts, PromptKind, PromptPlan};
use hierprompt::zeroshot::{argmax, argmin, crm_risks, scaled_softmax};
use hierprompt::{DistanceMatrix, LabelHierarchy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tree(seed: u64, n: usize) -> (LabelHierarchy, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = random_tree(&mut rng, n);
    (LabelHierarchy::parse(&t.edge_list).unwrap(), t.parent)
}

fn id(h: &LabelHierarchy, i: usize) -> hierprompt::NodeId {
    h.lookup(&common::name(i)).unwrap()
}

fn rows(d: &DistanceMatrix) -> Vec<Vec<u32>> {
    (0..d.k()).map(|i| d.row(i).to_vec()).collect()
}

fn unit(v: Vec<f32>) -> EmbeddingVector {
    EmbeddingVector::new(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_match_ancestor_intersection(seed: u64, n in 2usize..120) {
        let (h, parent) = tree(seed, n);
        let o = TreeOracle::new(&parent);
        for a in 0..n {
            for b in (0..n).step_by(3) {
                prop_assert_eq!(h.hierarchical_distance(id(&h, a), id(&h, b)) as usize, o.distance(a, b));
            }
            prop_assert_eq!(h.node_height(id(&h, a)) as usize, o.height(a));
            prop_assert_eq!(h.depth(id(&h, a)) as usize, o.depth(a));
        }
    }

    #[test]
    fn leaf_distances_are_an_ultrametric(seed: u64, n in 3usize..60) {
        let (h, _) = tree(seed, n);
        let d = h.distance_matrix();
        let k = d.k();
        for a in 0..k {
            prop_assert_eq!(d.get(a, a), 0);
            for b in 0..k {
                prop_assert_eq!(d.get(a, b), d.get(b, a));
                prop_assert!(d.get(a, b) <= h.height());
                for c in 0..k {
                    prop_assert!(d.get(a, c) <= d.get(a, b).max(d.get(b, c)));
                }
            }
        }
    }

    #[test]
    fn edge_list_round_trips(seed: u64, n in 1usize..80) {
        let (h, _) = tree(seed, n);
        let text = h.to_edge_list();
        let again = LabelHierarchy::parse(&text).unwrap();
        prop_assert_eq!(again.to_edge_list(), text);
        prop_assert_eq!(again.leaf_names(), h.leaf_names());
    }

    #[test]
    fn prompt_counts_follow_the_tree(seed: u64, n in 2usize..80) {
        let (h, parent) = tree(seed, n);
        let o = TreeOracle::new(&parent);
        let root = h.name(h.root()).to_string();
        for leaf in o.leaves() {
            let y = id(&h, leaf);
            prop_assert_eq!(comparative_prompts(&h, y).len(), o.comparative_count(leaf));
            prop_assert_eq!(path_prompts(&h, y).len(), 3 * o.non_root_ancestors(leaf).len());
            prop_assert_eq!(h.ancestor_path(y).len(), o.depth(leaf) - 1);

            let peers: Vec<_> = h.leaf_peers(y).into_iter()
                .chain(h.ancestor_peers(y).into_iter().flat_map(|(_, p)| p))
                .collect();
            prop_assert!(!peers.contains(&y));
            for a in h.ancestor_path(y) {
                prop_assert!(!peers.contains(&a));
            }

            let Ok(full) = build_prompt_set(&h, y, PromptPlan::full()) else { continue };
            for p in &full {
                prop_assert_ne!(&p.related_class, &root);
                prop_assert_eq!(p.text.matches(p.query_class.as_str()).count(), 1);
            }
            for plan in PromptPlan::all() {
                if let Ok(sub) = build_prompt_set(&h, y, plan) {
                    for p in &sub {
                        prop_assert!(full.contains(p), "{:?} missing from full set", p);
                    }
                }
            }
        }
    }

    #[test]
    fn aggregation_invariances(seed: u64, m in 1usize..8, dim in 2usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<Vec<f32>> = (0..m).map(|_| random_unit(&mut rng, dim)).collect();
        let base = aggregate_class_embedding(&vs.iter().cloned().map(unit).collect::<Vec<_>>());
        // random unit vectors can cancel; only check non-degenerate cases
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        prop_assert!((base.norm() - 1.0).abs() < 1e-6);

        let mut perm = vs.clone();
        perm.reverse();
        let p = aggregate_class_embedding(&perm.into_iter().map(unit).collect::<Vec<_>>()).unwrap();
        prop_assert!(dot(p.as_slice(), base.as_slice()) > 1.0 - 1e-6);

        let dup: Vec<_> = vs.iter().chain(vs.iter()).cloned().map(unit).collect();
        let dd = aggregate_class_embedding(&dup).unwrap();
        prop_assert!(dot(dd.as_slice(), base.as_slice()) > 1.0 - 1e-6);

        let scale: f32 = rng.random_range(0.01..100.0);
        let mut scaled = vs.clone();
        scaled[0].iter_mut().for_each(|x| *x *= scale);
        let s = aggregate_class_embedding(&scaled.into_iter().map(unit).collect::<Vec<_>>()).unwrap();
        prop_assert!(dot(s.as_slice(), base.as_slice()) > 1.0 - 1e-6);
    }

    #[test]
    fn crm_on_a_flat_hierarchy_is_argmax(seed: u64, k in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let risks = crm_risks(&logits, &DistanceMatrix::flat(k), 100.0).unwrap();
        prop_assert_eq!(argmin(&risks), argmax(&logits));
    }

    #[test]
    fn crm_matches_brute_force_and_scale_commutes(seed: u64, n in 3usize..40, s in 0.5f64..200.0) {
        let (h, _) = tree(seed, n);
        let d = h.distance_matrix();
        let k = d.k();
        prop_assume!(k >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let risks = crm_risks(&logits, &d, s).unwrap();
        let oracle = risk_oracle(&logits, &rows(&d), s);
        for (a, b) in risks.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let p = scaled_softmax(&logits, s);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let pre: Vec<f64> = logits.iter().map(|l| l * s).collect();
        let r1 = crm_risks(&pre, &d, 1.0).unwrap();
        for (a, b) in risks.iter().zip(&r1) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert_eq!(argmin(&risks), argmin(&r1));
    }

    #[test]
    fn metrics_match_oracle_and_identity(seed: u64, n in 2usize..60, count in 1usize..300) {
        let (h, _) = tree(seed, n);
        let d = h.distance_matrix();
        let k = d.k();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let truth: Vec<usize> = (0..count).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = truth.iter()
            .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..k) })
            .collect();
        let r = evaluate(&pred, &truth, &d).unwrap();
        let (top1, sev, hd, mistakes) = metric_oracle(&pred, &truth, &rows(&d));
        prop_assert_eq!(r.top1, top1);
        prop_assert_eq!(r.severity, sev);
        prop_assert_eq!(r.hd_at_1, hd);
        prop_assert_eq!(r.n_mistakes as usize, mistakes);
        prop_assert!((r.hd_at_1 - r.severity * (1.0 - r.top1)).abs() < 1e-12);
        prop_assert_eq!(r.histogram.total() as usize, mistakes);
        if mistakes > 0 {
            prop_assert!(r.severity >= 1.0);
        }

        let mut idx: Vec<usize> = (0..count).collect();
        idx.reverse();
        let rp = evaluate(
            &idx.iter().map(|&i| pred[i]).collect::<Vec<_>>(),
            &idx.iter().map(|&i| truth[i]).collect::<Vec<_>>(),
            &d,
        ).unwrap();
        prop_assert_eq!((rp.top1, rp.severity, rp.hd_at_1), (r.top1, r.severity, r.hd_at_1));
    }
}

#[test]
fn lp_only_fallback_for_root_attached_leaf() {
    let h = LabelHierarchy::parse("ROOT\tr\na\tr\nb\tr\nc\tb\nd\tb\n").unwrap();
    let a = h.lookup("a").unwrap();
    let lp = build_prompt_set(&h, a, PromptPlan::new(true, false, false).unwrap()).unwrap();
    assert_eq!(lp.len(), 1);
    assert_eq!(lp[0].kind, PromptKind::AncestorPeer);
    assert_eq!(lp[0].text, "How does a look differently from b?");

    // leaves with leaf peers keep plain LP prompts
    let c = h.lookup("c").unwrap();
    let lp = build_prompt_set(&h, c, PromptPlan::new(true, false, false).unwrap()).unwrap();
    assert_eq!(lp.len(), 1);
    assert_eq!(lp[0].kind, PromptKind::LeafPeer);
}
