use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{distribution_from_softmax_row, Distribution, Tensor};
use crate::seq2seq::net::Net;
use crate::seq2seq::{DescriptorSequence, ModelParams, BOS, EOS, UNK};

/// Final encoder (hidden, cell) state, the fixed-length vector z.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub z: EncoderState,
    /// h^e_1..h^e_m (a single entry for the mean encoder).
    pub hidden_states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub dist: Distribution,
    /// True when a prefix token was outside the vocabulary and replaced by UNK.
    pub substituted_unk: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDecoded {
    pub dist: Distribution,
    /// Attention weights over the encoded items, one row per decoder step.
    pub alphas: Vec<Vec<f64>>,
}

/// Read-only inference view over trained parameters.
///
/// Counts decoder LSTM step evaluations (one per sequence per step) so the
/// cost of probing can be measured.
pub struct Model<'p> {
    params: &'p ModelParams,
    steps: AtomicUsize,
}

fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).expect("non-empty row")
}

impl<'p> Model<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Model {
            params,
            steps: AtomicUsize::new(0),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn decoder_steps(&self) -> usize {
        self.steps.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_steps(&self) {
        self.steps.store(0, Ordering::Relaxed);
    }

    fn net(&self) -> Net<'_> {
        Net::new(self.params, Some(&self.steps))
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<bool> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::contract("decoder prefix must begin with BOS"));
        }
        Ok(prefix.iter().any(|&t| t >= self.params.vocab_size()))
    }

    pub fn encode(&self, seq: &DescriptorSequence) -> Result<Encoding> {
        let inputs: Vec<Tensor> = seq.items().iter().map(|v| row_tensor(v)).collect();
        let mut net = self.net();
        let (hs, z) = net.encode(&inputs)?;
        Ok(Encoding {
            z: EncoderState {
                hidden: net.g.value(z.h).data().to_vec(),
                cell: net.g.value(z.c).data().to_vec(),
            },
            hidden_states: hs.iter().map(|&h| net.g.value(h).data().to_vec()).collect(),
        })
    }

    /// Mean of the reduced descriptors and the state of one encoder step on it.
    pub fn encode_mean(&self, seq: &DescriptorSequence) -> Result<(Vec<f64>, EncoderState)> {
        if seq.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        if seq.dim() != self.params.config.d_feat {
            return Err(Error::contract("descriptor dimension mismatch"));
        }
        let mut net = self.net();
        let mut reduced = Vec::with_capacity(seq.len());
        for v in seq.items() {
            reduced.push(net.reduced(&row_tensor(v))?);
        }
        let mean = net.mean(&reduced)?;
        let zero = net.zero_state(1);
        let z = net.encoder_step(mean, zero)?;
        Ok((
            net.g.value(mean).data().to_vec(),
            EncoderState {
                hidden: net.g.value(z.h).data().to_vec(),
                cell: net.g.value(z.c).data().to_vec(),
            },
        ))
    }

    /// `P(y_t | y_{1:t-1}, z)` after running the decoder over `prefix` from z.
    pub fn decode_distribution(&self, z: &EncoderState, prefix: &[usize]) -> Result<Decoded> {
        if self.params.has_attention() {
            return Err(Error::contract(
                "attention models decode with soft_attention_decode",
            ));
        }
        let substituted_unk = self.check_prefix(prefix)?;
        let mut net = self.net();
        let mut state = net.state_from(row_tensor(&z.hidden), row_tensor(&z.cell));
        let mut logits = None;
        for &tok in prefix {
            let (next, l, _) = net.decoder_step(&[tok], state, None)?;
            state = next;
            logits = Some(l);
        }
        let probs = net.g.softmax_rows(logits.expect("non-empty prefix"));
        Ok(Decoded {
            dist: distribution_from_softmax_row(net.g.value(probs).data()),
            substituted_unk,
        })
    }

    /// Decodes `prefix` with per-step soft attention over the encoded items.
    pub fn soft_attention_decode(
        &self,
        encoding: &Encoding,
        prefix: &[usize],
    ) -> Result<AttentionDecoded> {
        if !self.params.has_attention() {
            return Err(Error::contract("model has no attention parameters"));
        }
        self.check_prefix(prefix)?;
        let mut net = self.net();
        let hs: Vec<_> = encoding
            .hidden_states
            .iter()
            .map(|h| net.g.constant(row_tensor(h)))
            .collect();
        let cache = net.attention_cache(&hs)?;
        let z = &encoding.z;
        let mut state = net.state_from(row_tensor(&z.hidden), row_tensor(&z.cell));
        let mut logits = None;
        let mut alphas = Vec::with_capacity(prefix.len());
        for &tok in prefix {
            let (next, l, alpha) = net.decoder_step(&[tok], state, cache.as_ref())?;
            state = next;
            logits = Some(l);
            let alpha = alpha.expect("attention step yields weights");
            alphas.push(net.g.value(alpha).data().to_vec());
        }
        let probs = net.g.softmax_rows(logits.expect("non-empty prefix"));
        Ok(AttentionDecoded {
            dist: distribution_from_softmax_row(net.g.value(probs).data()),
            alphas,
        })
    }

    /// Next-word distribution from the full input, for either model variant.
    pub fn next_word_distribution(
        &self,
        seq: &DescriptorSequence,
        prefix: &[usize],
    ) -> Result<Distribution> {
        let refs: Vec<&[f64]> = seq.items().iter().map(Vec::as_slice).collect();
        let steps = self.teacher_forced_batch(&[refs], prefix)?;
        Ok(steps
            .into_iter()
            .next()
            .and_then(|s| s.into_iter().last())
            .expect("one sequence, non-empty prefix"))
    }

    /// Greedy decoding: repeatedly take the most probable word (lowest index on
    /// ties) until EOS or `max_len` words. BOS and EOS are not returned.
    pub fn greedy_caption(&self, seq: &DescriptorSequence, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        let inputs: Vec<Tensor> = seq.items().iter().map(|v| row_tensor(v)).collect();
        let mut net = self.net();
        let (hs, mut state) = net.encode(&inputs)?;
        let cache = net.attention_cache(&hs)?;
        let mut words = Vec::new();
        let mut prev = BOS;
        while words.len() < max_len {
            let (next, logits, _) = net.decoder_step(&[prev], state, cache.as_ref())?;
            state = next;
            let probs = net.g.softmax_rows(logits);
            let word = distribution_from_softmax_row(net.g.value(probs).data()).argmax();
            if word == EOS {
                break;
            }
            words.push(word);
            prev = word;
        }
        Ok(words)
    }

    /// Teacher-forced decoding of many equal-length sequences at once.
    ///
    /// `sequences[b]` lists the descriptor items of sequence `b`. The decoder
    /// is fed `tokens` (starting with BOS) and the result holds, per sequence,
    /// one distribution per fed token. Each row of the batch is computed
    /// independently, so results do not depend on batch composition.
    pub fn teacher_forced_batch(
        &self,
        sequences: &[Vec<&[f64]>],
        tokens: &[usize],
    ) -> Result<Vec<Vec<Distribution>>> {
        self.check_prefix(tokens)?;
        let Some(first) = sequences.first() else {
            return Ok(Vec::new());
        };
        let m = first.len();
        if m == 0 || sequences.iter().any(|s| s.len() != m) {
            return Err(Error::contract(
                "batched sequences must share a non-zero length",
            ));
        }
        let batch = sequences.len();
        let inputs: Vec<Tensor> = (0..m)
            .map(|i| {
                let d = sequences[0][i].len();
                let mut data = Vec::with_capacity(batch * d);
                for s in sequences {
                    if s[i].len() != d {
                        return Err(Error::contract("descriptor dimensions differ in batch"));
                    }
                    data.extend_from_slice(s[i]);
                }
                Tensor::matrix(batch, d, data)
            })
            .collect::<Result<_>>()?;
        let mut net = self.net();
        let (hs, mut state) = net.encode(&inputs)?;
        let cache = net.attention_cache(&hs)?;
        let mut out: Vec<Vec<Distribution>> = vec![Vec::with_capacity(tokens.len()); batch];
        for &tok in tokens {
            let fed = vec![tok; batch];
            let (next, logits, _) = net.decoder_step(&fed, state, cache.as_ref())?;
            state = next;
            let probs = net.g.softmax_rows(logits);
            let p = net.g.value(probs);
            for (b, dists) in out.iter_mut().enumerate() {
                dists.push(distribution_from_softmax_row(p.row(b)));
            }
        }
        Ok(out)
    }
}

/// Replaces tokens outside the vocabulary by UNK.
pub fn sanitize_tokens(tokens: &[usize], vocab_size: usize) -> Vec<usize> {
    tokens
        .iter()
        .map(|&t| if t < vocab_size { t } else { UNK })
        .collect()
}
