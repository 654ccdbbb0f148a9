#![allow(dead_code)]

use capsal::seq2seq::{
    DescriptorSequence, EncoderKind, Grid, ModelConfig, ModelParams, Pooling, Vocabulary,
};
use capsal::training::{batch_loss, loss_and_gradients, Example};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_vocab() -> Vocabulary {
    Vocabulary::new(&["a", "red", "ball", "then"]).unwrap()
}

/// Small model with parameters spread over [-0.6, 0.6] so every gate is
/// away from its linear regime.
pub fn toy_params(seed: u64, attention: Option<usize>, encoder: EncoderKind) -> ModelParams {
    let config = ModelConfig {
        d_feat: 3,
        d_red: 2,
        d_emb: 3,
        hidden: 4,
        encoder,
        attention,
    };
    let mut p = ModelParams::init(config, toy_vocab(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    p
}

pub fn random_seq(rng: &mut ChaCha8Rng, m: usize, d: usize) -> DescriptorSequence {
    DescriptorSequence::from_items(
        (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    )
    .unwrap()
}

/// m random g×g grids of d-dimensional cells, mean-pooled.
pub fn random_grid_seq(rng: &mut ChaCha8Rng, g: usize, m: usize, d: usize) -> DescriptorSequence {
    let grids = (0..m)
        .map(|_| {
            let cells = (0..g * g)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            Grid::new(g, cells).unwrap()
        })
        .collect();
    DescriptorSequence::from_grids(grids, Pooling::Mean).unwrap()
}

/// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` between the
/// analytic gradient and central differences with step `h`.
pub fn gradient_check(params: &ModelParams, batch: &[Example<'_>], h: f64) -> Vec<(String, f64)> {
    let (_, grads) = loss_and_gradients(params, batch).unwrap();
    let mut out = Vec::new();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    for (k, name) in names.iter().enumerate() {
        let len = analytic[k].len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].1.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[k].1.data_mut()[j] -= h;
            *slot = (batch_loss(&plus, batch).unwrap() - batch_loss(&minus, batch).unwrap())
                / (2.0 * h);
        }
        let diff: f64 = analytic[k]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic[k].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        out.push((name.clone(), if denom == 0.0 { 0.0 } else { diff / denom }));
    }
    out
}
