use proptest::prelude::*;

use kbvqa::harness::{vqa_accuracy, TrainConfig};
use kbvqa::knowledge::{flatten_triplet, Vocabulary};
use kbvqa::reader::{combined_loss, sigmoid, InstanceWeight};
use kbvqa::retriever::{cosine, rank, retriever_loss, KnowledgeIndex, PseudoLabel};
use kbvqa::tensor::{Graph, Tensor};

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-6
}

proptest! {
    #[test]
    fn sigmoid_is_symmetric(d in -50.0f64..50.0) {
        prop_assert!((sigmoid(d) + sigmoid(-d) - 1.0).abs() <= 1e-15);
        let w = InstanceWeight::Smooth.weight(d);
        prop_assert!((0.0..=1.0).contains(&w));
        let b = InstanceWeight::Binary.weight(d);
        prop_assert_eq!(b, if d > 0.0 { 1.0 } else { 0.0 });
    }

    #[test]
    fn pseudo_labels_lie_in_unit_interval(d in -50.0f64..50.0) {
        let t = PseudoLabel::Smooth.target(d);
        prop_assert!((-1.0..=1.0).contains(&t));
        prop_assert_eq!(t, d.tanh());
        let b = PseudoLabel::Binary.target(d);
        prop_assert!(b == 1.0 || b == -1.0);
    }

    #[test]
    fn retrieval_loss_is_bounded(delta in -20.0f64..20.0, sims in prop::collection::vec(-1.0f64..=1.0, 1..6)) {
        let mut g = Graph::new();
        let vars: Vec<_> = sims.iter().map(|&s| g.constant(Tensor::scalar(s))).collect();
        let l = retriever_loss(&mut g, delta, &vars).unwrap();
        let v = g.scalar_value(l);
        prop_assert!((0.0..=4.0).contains(&v), "{v}");
    }

    #[test]
    fn cosine_ignores_positive_scale(a in vector(6), b in vector(6), alpha in 1e-3f64..1e3) {
        prop_assume!(nonzero(&a) && nonzero(&b));
        let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
        let c = cosine(&a, &b).unwrap();
        prop_assert!((cosine(&scaled, &b).unwrap() - c).abs() <= 1e-12);
        prop_assert!(c.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn accuracy_is_monotone_in_matches(count in 0usize..=10) {
        let annotators: Vec<&str> = (0..10).map(|i| if i < count { "yes" } else { "no" }).collect();
        let a = vqa_accuracy("yes", &annotators);
        prop_assert!((0.0..=1.0).contains(&a));
        if count >= 3 {
            prop_assert_eq!(a, 1.0);
        }
        if count < 10 {
            let mut more = annotators.clone();
            more[count] = "yes";
            prop_assert!(vqa_accuracy("yes", &more) >= a);
        }
    }

    #[test]
    fn combined_loss_is_linear_in_lambda(
        reader in prop::collection::vec(0.0f64..5.0, 1..5),
        l_ret in 0.0f64..4.0,
        l1 in 0.0f64..10.0,
        l2 in 0.0f64..10.0,
    ) {
        let total = |lambda: f64| {
            let mut g = Graph::new();
            let w: Vec<_> = reader.iter().map(|&r| g.constant(Tensor::scalar(r))).collect();
            let r = g.constant(Tensor::scalar(l_ret));
            let t = combined_loss(&mut g, &w, r, lambda).unwrap();
            g.scalar_value(t)
        };
        let diff = total(l2) - total(l1);
        prop_assert!((diff - (l2 - l1) * l_ret).abs() <= 1e-12 * (1.0 + diff.abs()));
    }

    #[test]
    fn ranking_matches_a_full_sort(rows in prop::collection::vec(vector(4), 1..30), query in vector(4), t in 1usize..6) {
        prop_assume!(nonzero(&query) && rows.iter().all(|r| nonzero(r)));
        let n = rows.len();
        let index = KnowledgeIndex::from_vectors(Tensor::new(vec![n, 4], rows.concat()).unwrap(), 0).unwrap();
        let t = t.min(n);
        let got = rank(&query, &index, t).unwrap().entry_ids;
        let mut order: Vec<(f64, usize)> = rows.iter().enumerate().map(|(i, r)| (cosine(&query, r).unwrap(), i)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = order.iter().take(t).map(|&(_, i)| i).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn learning_rate_decays_geometrically(lr in 1e-6f64..1e-1, e in 0usize..40) {
        let c = TrainConfig { lr, ..TrainConfig::desk() };
        prop_assert_eq!(c.lr_at(e), lr * 0.75f64.powi(e as i32));
    }

    #[test]
    fn flattened_triplets_tokenize_to_their_words(s in "[a-z]{1,6}", r in "[a-z]{1,6}( [a-z]{1,6})?", o in "[a-z]{1,6}") {
        let sentence = flatten_triplet(&s, &r, &o).unwrap();
        let vocab = Vocabulary::build([sentence.as_str()]).unwrap();
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let ids = vocab.tokenize(&sentence);
        prop_assert_eq!(ids.len(), words.len());
        for (id, w) in ids.iter().zip(words) {
            prop_assert_eq!(vocab.token(*id), Some(w));
        }
    }
}
