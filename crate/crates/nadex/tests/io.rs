use std::path::Path;

use nadex::dataset::{format_quadruples, parse_quadruples, subsample};
use nadex::run::evaluate_parallel;
use nadex_core::data::{prepare_splits, Quadruple, Vocabulary};
use nadex_core::denoiser::{DenoiserConfig, DenoiserParams};
use nadex_core::diffusion::NoiseSchedule;
use nadex_core::eval::{evaluate, EvalOptions, FilterIndex};
use nadex_core::synthetic;
use proptest::prelude::*;

proptest! {
    #[test]
    fn quadruple_files_round_trip(
        raw in prop::collection::vec((0u32..50, 0u32..10, 0u32..50, 0u32..400), 0..40),
        granularity in 1u32..48,
    ) {
        let quads: Vec<Quadruple> = raw.iter().map(|&(s, r, o, t)| Quadruple::new(s, r, o, t)).collect();
        let text = format_quadruples(&quads, granularity);
        let back = parse_quadruples(&text, granularity, Path::new("mem")).unwrap();
        prop_assert_eq!(back, quads);
    }

    #[test]
    fn subsample_keeps_order_and_is_seeded(n in 0usize..200, fraction in 0.0f64..=1.0, seed in 0u64..100) {
        let quads: Vec<Quadruple> = (0..n as u32).map(|i| Quadruple::new(i, 0, i, i)).collect();
        let a = subsample(&quads, fraction, seed);
        prop_assert_eq!(&a, &subsample(&quads, fraction, seed));
        prop_assert!(a.windows(2).all(|w| w[0].time < w[1].time));
        prop_assert!(a.len() <= n);
    }
}

#[test]
fn parse_errors_name_the_line() {
    let err = parse_quadruples("0\t1\t2\t0\n0\t1\tx\t24\n", 24, Path::new("train.txt")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("train.txt") && msg.contains('2'), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn parallel_evaluation_matches_single_thread() {
    let config = DenoiserConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 16,
        dropout: 0.0,
        history_len: 3,
        steps: 4,
        max_gap: 6,
        tie_scoring: false,
    };
    let quads = synthetic::noisy_cyclic(7, 3, 30, 0.3, 2);
    let vocab = Vocabulary::from_splits(&[&quads]).unwrap();
    let g = synthetic::split_at(&quads, 20, 25, vocab);
    let p = prepare_splits(&g.train, &g.valid, &g.test, &vocab, 3, 6).unwrap();
    let filter = FilterIndex::from_raw(&[&g.train, &g.valid, &g.test], &vocab).unwrap();
    let params = DenoiserParams::init(&config, &vocab, 9).unwrap();
    let schedule = NoiseSchedule::linear(4, 1.0, 0.05, 0.95).unwrap();
    for iterative in [false, true] {
        let serial = evaluate(&p.test, &params, &schedule, &filter, &EvalOptions { iterative, repeats: 2, ..EvalOptions::default() }).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let options = EvalOptions {
            iterative,
            repeats: 2,
            chunk: 7,
            ..EvalOptions::default()
        };
        let parallel = pool.install(|| evaluate_parallel(&p.test, &params, &schedule, &filter, &options)).unwrap();
        assert_eq!(serial, parallel);
    }
}
