use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::data::{prepare_splits, Vocabulary};
use crate::denoiser::DenoiserConfig;
use crate::synthetic;

fn q(s: u32, r: u32, o: u32, t: u32) -> Quadruple {
    Quadruple::new(s, r, o, t)
}

fn set(items: &[u32]) -> BTreeSet<u32> {
    items.iter().copied().collect()
}

#[test]
fn filter_index_examples() {
    let one = FilterIndex::build(&[&[q(0, 1, 2, 3)]]);
    assert_eq!(one.len(), 1);
    assert_eq!(one.objects(0, 1, 3), Some(&set(&[2])));
    let two = FilterIndex::build(&[&[q(0, 1, 2, 3)], &[q(0, 1, 4, 3), q(0, 1, 2, 4)]]);
    assert_eq!(two.objects(0, 1, 3), Some(&set(&[2, 4])));
    assert_eq!(two.len(), 2);
    assert!(two.objects(1, 1, 3).is_none());
}

#[test]
fn filter_from_raw_includes_inverses() {
    let vocab = Vocabulary {
        num_entities: 3,
        num_base_relations: 2,
        max_time: 0,
    };
    let f = FilterIndex::from_raw(&[&[q(0, 1, 2, 0)]], &vocab).unwrap();
    assert_eq!(f.objects(2, 3, 0), Some(&set(&[0])));
}

#[test]
fn filtered_rank_examples() {
    let scores = [0.9, 0.1, 0.5];
    assert_eq!(filtered_rank(&scores, 2, None).unwrap(), 2);
    assert_eq!(filtered_rank(&scores, 2, Some(&set(&[0]))).unwrap(), 1);
    assert_eq!(filtered_rank(&[0.3; 5], 1, None).unwrap(), 5);
    // the gold inside its own filter set is still ranked
    assert_eq!(filtered_rank(&scores, 2, Some(&set(&[0, 2]))).unwrap(), 1);
    assert!(matches!(filtered_rank(&scores, 3, None), Err(Error::Index { .. })));
}

#[test]
fn metric_examples() {
    let r = MetricReport::from_ranks(vec![1, 2, 4]).unwrap();
    assert!((r.mrr - 0.58333).abs() < 1e-5);
    assert!((r.mrr - 1.75 / 3.0).abs() < 1e-15);
    assert_eq!(r.hits1, 1.0 / 3.0);
    assert_eq!(r.hits3, 2.0 / 3.0);
    assert_eq!(r.hits10, 1.0);
    assert_eq!(r.count, 3);
    assert!(MetricReport::from_ranks(Vec::new()).is_err());
    assert!(MetricReport::from_ranks(vec![0]).is_err());

    let sub = r.subset(&[false, true, true]).unwrap();
    assert_eq!(sub.ranks, [2, 4]);
    let err = r.subset(&[false; 3]).unwrap_err();
    assert_eq!(alloc::format!("{err}"), "empty subset");
}

#[test]
fn unseen_queries() {
    let vocab = Vocabulary {
        num_entities: 4,
        num_base_relations: 1,
        max_time: 5,
    };
    let train = [q(0, 0, 1, 0)];
    let test = [q(0, 0, 1, 5), q(0, 0, 2, 5)];
    let p = prepare_splits(&train, &[], &test, &vocab, 2, 10).unwrap();
    let mask = unseen_mask(&train, &vocab, &p.test).unwrap();
    // forward and inverse of each test fact
    assert_eq!(mask, [false, false, true, true]);
}

/// Sorts candidates by score with the gold last among ties and reads off
/// its position after dropping filtered entities.
fn oracle_rank(scores: &[f64], gold: usize, filter: &BTreeSet<u32>) -> usize {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&e| e == gold || !filter.contains(&(e as u32)))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == gold).cmp(&(b == gold)))
    });
    order.iter().position(|&e| e == gold).unwrap() + 1
}

fn toy_kg() -> impl Strategy<Value = (usize, Vec<Quadruple>, Vec<Vec<f64>>)> {
    (2usize..=10).prop_flat_map(|e| {
        let fact = (0..e as u32, 0..2u32, 0..e as u32, 0..4u32).prop_map(|(s, r, o, t)| q(s, r, o, t));
        prop::collection::vec(fact, 1..=30).prop_flat_map(move |facts| {
            let n = facts.len();
            let scores = prop::collection::vec(prop::collection::vec((0..6u8).prop_map(f64::from), e), n);
            (Just(e), Just(facts), scores)
        })
    })
}

proptest! {
    #[test]
    fn metrics_match_exhaustive_reference((e, facts, scores) in toy_kg()) {
        let filter = FilterIndex::build(&[&facts]);
        let mut ranks = Vec::new();
        let mut expected = Vec::new();
        for (f, row) in facts.iter().zip(&scores) {
            let key = filter.objects(f.subject, f.relation, f.time).unwrap();
            prop_assert!(key.contains(&f.object));
            let r = filtered_rank(row, f.object as usize, Some(key)).unwrap();
            let raw = filtered_rank(row, f.object as usize, None).unwrap();
            prop_assert!(r <= raw);
            prop_assert!(r >= 1 && r <= e - (key.len() - 1));
            prop_assert_eq!(r, oracle_rank(row, f.object as usize, key));
            ranks.push(r);
            expected.push(oracle_rank(row, f.object as usize, key));
        }
        let report = MetricReport::from_ranks(ranks).unwrap();
        let n = expected.len() as f64;
        let mrr = expected.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        prop_assert_eq!(report.mrr, mrr);
        for (k, h) in [(1, report.hits1), (3, report.hits3), (10, report.hits10)] {
            prop_assert_eq!(h, expected.iter().filter(|&&r| r <= k).count() as f64 / n);
        }
        prop_assert!(report.hits1 <= report.hits3 && report.hits3 <= report.hits10);
        prop_assert!(report.mrr > 0.0 && report.mrr <= 1.0);
        if e <= 10 {
            prop_assert_eq!(report.hits10, 1.0);
        }
    }
}

struct Fixture {
    params: DenoiserParams,
    schedule: NoiseSchedule,
    test: Vec<HistorySample>,
    filter: FilterIndex,
}

fn fixture() -> Fixture {
    let config = DenoiserConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
        dropout: 0.2,
        history_len: 3,
        steps: 4,
        max_gap: 6,
        tie_scoring: true,
    };
    let quads = synthetic::cyclic(5, 2, 12);
    let vocab = Vocabulary::from_splits(&[&quads]).unwrap();
    let g = synthetic::split_at(&quads, 8, 10, vocab);
    let p = prepare_splits(&g.train, &g.valid, &g.test, &vocab, 3, 6).unwrap();
    Fixture {
        params: DenoiserParams::init(&config, &vocab, 2).unwrap(),
        schedule: NoiseSchedule::linear(4, 1.0, 0.01, 0.99).unwrap(),
        test: p.test,
        filter: FilterIndex::from_raw(&[&g.train, &g.valid, &g.test], &vocab).unwrap(),
    }
}

#[test]
fn evaluation_is_seeded_and_chunk_independent() {
    let f = fixture();
    let opts = EvalOptions::default();
    let a = evaluate(&f.test, &f.params, &f.schedule, &f.filter, &opts).unwrap();
    let b = evaluate(&f.test, &f.params, &f.schedule, &f.filter, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.count, 20);

    let full = score_queries(&f.params, &f.schedule, &f.test, 0, &opts).unwrap();
    let one = EvalOptions { chunk: 1, ..opts };
    assert_eq!(full, score_queries(&f.params, &f.schedule, &f.test, 0, &one).unwrap());
    let tail = score_queries(&f.params, &f.schedule, &f.test[7..], 7, &one).unwrap();
    assert_eq!(&full[7 * 5..], &tail[..]);

    let other = EvalOptions { seed: 1, ..opts };
    assert_ne!(full, score_queries(&f.params, &f.schedule, &f.test, 0, &other).unwrap());
}

#[test]
fn repeats_average_independent_draws() {
    let f = fixture();
    let one = EvalOptions::default();
    let two = EvalOptions { repeats: 2, ..one };
    let s1 = score_queries(&f.params, &f.schedule, &f.test, 0, &one).unwrap();
    let s2 = score_queries(&f.params, &f.schedule, &f.test, 0, &two).unwrap();
    assert_ne!(s1, s2);
    assert!(s2.iter().all(|v| v.is_finite()));
}

#[test]
fn iterative_sampling_runs() {
    let f = fixture();
    let opts = EvalOptions {
        iterative: true,
        ..EvalOptions::default()
    };
    let r = evaluate(&f.test, &f.params, &f.schedule, &f.filter, &opts).unwrap();
    assert_eq!(r, evaluate(&f.test, &f.params, &f.schedule, &f.filter, &opts).unwrap());
    assert!(r.hits1 <= r.hits3 && r.hits3 <= r.hits10);
}

#[test]
fn empty_query_set_is_an_error() {
    let f = fixture();
    assert!(matches!(
        evaluate(&[], &f.params, &f.schedule, &f.filter, &EvalOptions::default()),
        Err(Error::Empty(_))
    ));
}

#[test]
fn frequency_baseline_counts_past_objects() {
    let vocab = Vocabulary {
        num_entities: 4,
        num_base_relations: 1,
        max_time: 3,
    };
    let train = [q(0, 0, 1, 0), q(0, 0, 1, 1), q(0, 0, 2, 1)];
    let test = [q(0, 0, 2, 3), q(0, 0, 1, 3)];
    let filter = FilterIndex::from_raw(&[&train, &test], &vocab).unwrap();
    let r = frequency_baseline(&train, &[], &test, &vocab, &filter).unwrap();
    // queries: (0,0,?)=2 with 1 filtered -> 1; inverse (2,1,?)=0 seen once -> 1;
    // (0,0,?)=1 with 2 filtered -> 1; inverse (1,1,?)=0 seen twice -> 1
    assert_eq!(r.ranks, [1, 1, 1, 1]);

    let unfiltered = FilterIndex::default();
    let r = frequency_baseline(&train, &[], &test, &vocab, &unfiltered).unwrap();
    // 2 trails 1 (count 1 vs 2); 1 leads
    assert_eq!(r.ranks, [2, 1, 1, 1]);
}
