mod common;

use capsal::numerics::Tensor;
use capsal::seq2seq::{
    DescriptorSequence, EncoderKind, EncoderState, Encoding, LstmCell, Model, ModelParams, BOS, EOS,
};
use common::{random_seq, toy_params};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gate(w: &Tensor, b: &Tensor, xh: &[f64], j: usize) -> f64 {
    let cols = w.cols();
    b.data()[j]
        + xh.iter()
            .enumerate()
            .map(|(k, v)| v * w.data()[k * cols + j])
            .sum::<f64>()
}

/// Scalar reference LSTM step.
fn lstm_ref(cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let n = h.len();
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for j in 0..n {
        let i = sigmoid(gate(&cell.w_input, &cell.b_input, &xh, j));
        let f = sigmoid(gate(&cell.w_forget, &cell.b_forget, &xh, j));
        let o = sigmoid(gate(&cell.w_output, &cell.b_output, &xh, j));
        let g = gate(&cell.w_candidate, &cell.b_candidate, &xh, j).tanh();
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

fn reduce_ref(p: &ModelParams, x: &[f64]) -> Vec<f64> {
    let cols = p.reduce_w.cols();
    (0..cols)
        .map(|j| {
            p.reduce_b.data()[j]
                + x.iter()
                    .enumerate()
                    .map(|(k, v)| v * p.reduce_w.data()[k * cols + j])
                    .sum::<f64>()
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn three_step_encoding_matches_scalar_reference() {
    let p = toy_params(3, None, EncoderKind::Lstm);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seq = random_seq(&mut rng, 3, 3);
    let enc = Model::new(&p).encode(&seq).unwrap();
    let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
    for (i, item) in seq.items().iter().enumerate() {
        (h, c) = lstm_ref(&p.encoder, &reduce_ref(&p, item), &h, &c);
        assert!(close(&enc.hidden_states[i], &h, 1e-12));
    }
    assert!(close(&enc.z.hidden, &h, 1e-12));
    assert!(close(&enc.z.cell, &c, 1e-12));
}

#[test]
fn zero_encoder_weights_give_zero_state() {
    let mut p = toy_params(4, None, EncoderKind::Lstm);
    p.encoder = LstmCell::zeros(p.encoder.input(), p.encoder.hidden());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = Model::new(&p).encode(&random_seq(&mut rng, 5, 3)).unwrap();
    assert!(enc.z.hidden.iter().chain(&enc.z.cell).all(|&v| v == 0.0));
}

#[test]
fn greedy_decoding_is_deterministic_and_counts_steps() {
    let p = toy_params(5, None, EncoderKind::Lstm);
    let model = Model::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq = random_seq(&mut rng, 4, 3);
    let a = model.greedy_caption(&seq, 6).unwrap();
    let steps = model.decoder_steps();
    let b = model.greedy_caption(&seq, 6).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6);
    // one step per emitted word, plus the step that produced EOS if any
    assert!(steps == a.len() || steps == a.len() + 1);
    assert!(a.iter().all(|&t| t != BOS && t != EOS));
}

#[test]
fn eos_first_gives_empty_caption() {
    let mut p = toy_params(6, None, EncoderKind::Lstm);
    p.out_b.data_mut()[EOS] = 1e3;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = random_seq(&mut rng, 2, 3);
    let model = Model::new(&p);
    assert!(model.greedy_caption(&seq, 10).unwrap().is_empty());
    assert_eq!(model.decoder_steps(), 1);
}

#[test]
fn decode_distribution_matches_full_model() {
    let p = toy_params(7, None, EncoderKind::Lstm);
    let model = Model::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seq = random_seq(&mut rng, 3, 3);
    let z = model.encode(&seq).unwrap().z;
    let prefix = [BOS, 5, 6, 4];
    let d = model.decode_distribution(&z, &prefix).unwrap();
    let full = model.next_word_distribution(&seq, &prefix).unwrap();
    assert!(close(d.dist.probs(), full.probs(), 1e-14));
    assert!(!d.substituted_unk);
    assert!((d.dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn out_of_vocabulary_prefix_is_flagged() {
    let p = toy_params(7, None, EncoderKind::Lstm);
    let model = Model::new(&p);
    let z = EncoderState {
        hidden: vec![0.1; 4],
        cell: vec![0.0; 4],
    };
    assert!(
        model
            .decode_distribution(&z, &[BOS, 99])
            .unwrap()
            .substituted_unk
    );
    assert!(model.decode_distribution(&z, &[5]).is_err());
}

#[test]
fn mean_encoder_matches_reference() {
    let p = toy_params(8, None, EncoderKind::Mean);
    let model = Model::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = random_seq(&mut rng, 4, 3);
    let (mean, z) = model.encode_mean(&seq).unwrap();
    let reduced: Vec<Vec<f64>> = seq.items().iter().map(|x| reduce_ref(&p, x)).collect();
    let expect: Vec<f64> = (0..2)
        .map(|j| reduced.iter().map(|r| r[j]).sum::<f64>() / 4.0)
        .collect();
    assert!(close(&mean, &expect, 1e-14));
    let (h, c) = lstm_ref(&p.encoder, &expect, &[0.0; 4], &[0.0; 4]);
    assert!(close(&z.hidden, &h, 1e-12));
    assert!(close(&z.cell, &c, 1e-12));
    assert_eq!(model.encode(&seq).unwrap().z, z);
}

proptest! {
    #[test]
    fn mean_encoding_ignores_item_order(seed in 0u64..1000, m in 1usize..6, shift in 0usize..6) {
        let p = toy_params(9, None, EncoderKind::Mean);
        let model = Model::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_seq(&mut rng, m, 3);
        let order: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let (a, za) = model.encode_mean(&seq).unwrap();
        let (b, zb) = model.encode_mean(&seq.permuted(&order).unwrap()).unwrap();
        prop_assert!(close(&a, &b, 1e-12));
        prop_assert!(close(&za.hidden, &zb.hidden, 1e-12));
    }
}

#[test]
fn zeroed_attention_scorer_is_uniform() {
    let mut p = toy_params(10, Some(3), EncoderKind::Lstm);
    let a = p.attention.as_mut().unwrap();
    a.w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let model = Model::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = model.encode(&random_seq(&mut rng, 5, 3)).unwrap();
    let out = model.soft_attention_decode(&enc, &[BOS, 4, 5]).unwrap();
    assert_eq!(out.alphas.len(), 3);
    for row in &out.alphas {
        assert!(row.iter().all(|&a| (a - 0.2).abs() < 1e-15));
    }
}

#[test]
fn single_item_attention_is_certain() {
    let p = toy_params(11, Some(3), EncoderKind::Lstm);
    let model = Model::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let enc = model.encode(&random_seq(&mut rng, 1, 3)).unwrap();
    let out = model.soft_attention_decode(&enc, &[BOS, 6]).unwrap();
    assert!(out.alphas.iter().all(|r| r == &[1.0]));
}

#[test]
fn identical_hidden_states_give_that_state_as_context() {
    let p = toy_params(12, Some(3), EncoderKind::Lstm);
    let model = Model::new(&p);
    let h = vec![0.3, -0.2, 0.5, 0.1];
    let z = EncoderState {
        hidden: vec![0.2, 0.1, -0.4, 0.3],
        cell: vec![0.5, -0.1, 0.0, 0.2],
    };
    let one = Encoding {
        z: z.clone(),
        hidden_states: vec![h.clone()],
    };
    let many = Encoding {
        z,
        hidden_states: vec![h; 4],
    };
    let prefix = [BOS, 4, 7];
    let a = model.soft_attention_decode(&one, &prefix).unwrap();
    let b = model.soft_attention_decode(&many, &prefix).unwrap();
    assert!(close(a.dist.probs(), b.dist.probs(), 1e-14));
    for row in &b.alphas {
        assert!(row.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

#[test]
fn attention_decode_matches_full_model() {
    let p = toy_params(13, Some(3), EncoderKind::Lstm);
    let model = Model::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_seq(&mut rng, 3, 3);
    let enc = model.encode(&seq).unwrap();
    let prefix = [BOS, 5, 4];
    let a = model.soft_attention_decode(&enc, &prefix).unwrap();
    let b = model.next_word_distribution(&seq, &prefix).unwrap();
    assert!(close(a.dist.probs(), b.probs(), 1e-14));
    assert!(model.decode_distribution(&enc.z, &prefix).is_err());
}

#[test]
fn mismatched_descriptor_dimension_is_rejected() {
    let p = toy_params(1, None, EncoderKind::Lstm);
    let seq = DescriptorSequence::from_items(vec![vec![0.0; 5]]).unwrap();
    assert!(Model::new(&p).encode(&seq).is_err());
}
