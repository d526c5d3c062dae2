use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use super::*;

fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        dropout: 0.2,
        history_len: 4,
        steps: 5,
        max_gap: 8,
        tie_scoring: true,
    }
}

fn vocab(entities: usize, relations: usize) -> Vocabulary {
    Vocabulary {
        num_entities: entities,
        num_base_relations: relations,
        max_time: 10,
    }
}

fn random_input(tape: &mut Tape, rows: usize, h: usize, seed: u64) -> (Var, Vec<f64>) {
    let mut rng = crate::Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    (tape.constant(vec![rows, h], data.clone()).unwrap(), data)
}

fn run(params: &DenoiserParams, data: &[f64], n: usize, mask: &[bool], train: bool, seed: u64) -> Vec<f64> {
    let cfg = params.config();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let input = tape
        .constant(vec![n * cfg.seq_len(), cfg.hidden], data.to_vec())
        .unwrap();
    let mut rng = crate::Rng::seed_from_u64(seed);
    let out = denoise(&mut tape, &vars, cfg, input, n, 3, mask, train, &mut rng).unwrap();
    assert_eq!(tape.shape(out), &[n, cfg.hidden]);
    tape.value(out).to_vec()
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = small_config();
    let a = DenoiserParams::init(&cfg, &vocab(7, 3), 42).unwrap();
    let b = DenoiserParams::init(&cfg, &vocab(7, 3), 42).unwrap();
    assert_eq!(a, b);
    let c = DenoiserParams::init(&cfg, &vocab(7, 3), 43).unwrap();
    assert_ne!(a.entity, c.entity);
    assert_eq!(a.parameter_count(), b.parameter_count());
    assert!(a.named().iter().all(|(_, t)| t.requires_grad()));
    // biases start at zero, norms at unit gain
    assert!(a.layers[0].bq.data().iter().all(|&v| v == 0.0));
    assert!(a.final_gain.data().iter().all(|&v| v == 1.0));
}

#[test]
fn full_scale_entity_table_shape() {
    let cfg = DenoiserConfig {
        layers: 1,
        ..DenoiserConfig::default()
    };
    let p = DenoiserParams::init(&cfg, &vocab(6869, 230), 0).unwrap();
    assert_eq!(p.entity.shape(), &[6869, 200]);
    assert_eq!(p.relation.shape(), &[460, 200]);
    assert_eq!(p.time_gap.shape(), &[513, 200]);
    assert_eq!(p.position.shape(), &[33, 200]);
    assert_eq!(p.step.shape(), &[50, 200]);
}

#[test]
fn embedding_init_has_expected_spread() {
    let cfg = small_config();
    let p = DenoiserParams::init(&cfg, &vocab(500, 3), 1).unwrap();
    let d = p.entity.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
    let n = d.len() as f64;
    assert!(mean.abs() < 4.0 * EMBEDDING_INIT_STD / libm::sqrt(n));
    assert!((libm::sqrt(var) / EMBEDDING_INIT_STD - 1.0).abs() < 0.05);
}

#[test]
fn config_validation() {
    let mut cfg = small_config();
    cfg.heads = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small_config();
    cfg.layers = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = small_config();
    cfg.dropout = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn output_shape_and_inference_determinism() {
    let cfg = small_config();
    let p = DenoiserParams::init(&cfg, &vocab(6, 2), 3).unwrap();
    let n = 3;
    let mut tape = Tape::new();
    let (_, data) = random_input(&mut tape, n * cfg.seq_len(), cfg.hidden, 9);
    let mask = vec![true; n * cfg.seq_len()];
    let a = run(&p, &data, n, &mask, false, 1);
    let b = run(&p, &data, n, &mask, false, 2);
    assert_eq!(a, b);
    let c = run(&p, &data, n, &mask, true, 1);
    assert_ne!(a, c);
}

#[test]
fn padding_content_is_ignored() {
    let cfg = small_config();
    let p = DenoiserParams::init(&cfg, &vocab(6, 2), 3).unwrap();
    let seq = cfg.seq_len();
    let n = 2;
    let mut tape = Tape::new();
    let (_, mut data) = random_input(&mut tape, n * seq, cfg.hidden, 10);
    // first sequence: two pads; second: one pad
    let mut mask = vec![true; n * seq];
    mask[0] = false;
    mask[1] = false;
    mask[seq] = false;
    let before = run(&p, &data, n, &mask, false, 0);
    for row in [0usize, 1, seq] {
        for c in 0..cfg.hidden {
            data[row * cfg.hidden + c] = 1e3 * (c as f64 + 1.0);
        }
    }
    let after = run(&p, &data, n, &mask, false, 0);
    assert_eq!(before, after);
}

#[test]
fn swapping_history_positions_changes_output() {
    let cfg = small_config();
    let p = DenoiserParams::init(&cfg, &vocab(6, 2), 5).unwrap();
    let seq = cfg.seq_len();
    let h = cfg.hidden;
    let mut tape = Tape::new();
    let (_, data) = random_input(&mut tape, seq, h, 12);
    let mask = vec![true; seq];
    let before = run(&p, &data, 1, &mask, false, 0);
    let mut swapped = data.clone();
    for c in 0..h {
        swapped.swap(h + c, 2 * h + c);
    }
    let after = run(&p, &swapped, 1, &mask, false, 0);
    assert_ne!(before, after);
}

#[test]
fn masked_target_slot_is_a_contract_error() {
    let cfg = small_config();
    let p = DenoiserParams::init(&cfg, &vocab(6, 2), 3).unwrap();
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let (input, _) = random_input(&mut tape, cfg.seq_len(), cfg.hidden, 1);
    let mut mask = vec![false; cfg.seq_len()];
    mask[0] = true;
    let mut rng = crate::Rng::seed_from_u64(0);
    let err = denoise(&mut tape, &vars, &cfg, input, 1, 1, &mask, false, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn scoring_examples() {
    let mut tape = Tape::new();
    let table = tape
        .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
        .unwrap();
    let o = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let y = score_entities(&mut tape, o, table, 1.0).unwrap();
    let e = libm::exp(1.0);
    assert!((tape.value(y)[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((tape.value(y)[0] - 0.731).abs() < 5e-4);
    assert!((tape.value(y)[1] - 0.269).abs() < 5e-4);

    let table3 = tape
        .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0])
        .unwrap();
    let ortho = tape.constant(vec![1, 3], vec![0.0, 0.0, 2.0]).unwrap();
    let y = score_entities(&mut tape, ortho, table3, 0.5).unwrap();
    assert!(tape.value(y).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    assert!(matches!(
        score_entities(&mut tape, o, table, 0.0),
        Err(Error::Config(_))
    ));
}

fn history(objects: [u32; 4], mask: [bool; 4], relation: u32, object: u32) -> HistorySample {
    HistorySample {
        subject: 0,
        relation,
        time: 5,
        object,
        objects: objects.to_vec(),
        relations: vec![0, 1, 2, 3],
        time_gaps: vec![4, 3, 2, 20],
        mask: mask.to_vec(),
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for tie in [true, false] {
        let cfg = DenoiserConfig {
            dropout: 0.0,
            tie_scoring: tie,
            ..small_config()
        };
        let p = DenoiserParams::init(&cfg, &vocab(6, 2), 8).unwrap();
        let samples = [
            history([1, 2, 3, 4], [true; 4], 1, 5),
            history([0, 0, 2, 5], [false, false, true, true], 2, 0),
        ];
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true);
        let emb = embed_history(&mut tape, &vars, &cfg, &samples).unwrap();
        let mut rng = crate::Rng::seed_from_u64(0);
        let target = tape
            .constant(vec![2, cfg.hidden], crate::diffusion::gaussian(&mut rng, 2 * cfg.hidden))
            .unwrap();
        let seq = crate::diffusion::assemble_sequence(
            &mut tape,
            emb.objects,
            target,
            emb.conditioning,
            2,
            cfg.history_len,
        )
        .unwrap();
        let out = denoise(&mut tape, &vars, &cfg, seq, 2, 2, &emb.mask, true, &mut rng).unwrap();
        let probs = score_entities(&mut tape, out, vars.scoring_table(), 0.5).unwrap();
        let picked = tape.pick(probs, &[5, 0]).unwrap();
        let logp = tape.log(picked).unwrap();
        let loss = tape.mean(logp).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut params = p.clone();
        params.absorb_gradients(&grads, &vars).unwrap();
        for (name, t) in params.named() {
            let g = t.grad().unwrap();
            assert!(g.iter().any(|&v| v != 0.0), "no gradient reached `{name}`");
        }
    }
}

#[test]
fn load_named_round_trip_and_mismatch() {
    let cfg = small_config();
    let a = DenoiserParams::init(&cfg, &vocab(6, 2), 1).unwrap();
    let mut b = DenoiserParams::init(&cfg, &vocab(6, 2), 2).unwrap();
    let values: Vec<(String, Tensor)> = a.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    b.load_named(&values).unwrap();
    assert_eq!(a, b);
    assert!(b.load_named(&values[1..]).is_err());
}
