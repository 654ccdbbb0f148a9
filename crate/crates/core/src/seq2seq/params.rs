use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seq2seq::Vocabulary;

pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

/// Which encoder summarises the descriptor sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// LSTM over the items; z is the final (hidden, cell) state.
    #[default]
    Lstm,
    /// One encoder step on the mean of the reduced items.
    Mean,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "mean" => Ok(EncoderKind::Mean),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Lstm => "lstm",
            EncoderKind::Mean => "mean",
        })
    }
}

/// Model dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_red: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub encoder: EncoderKind,
    /// Attention width; `None` builds the plain encoder-decoder.
    pub attention: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_feat: 24,
            d_red: 16,
            d_emb: 16,
            hidden: 64,
            encoder: EncoderKind::Lstm,
            attention: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_feat, self.d_red, self.d_emb, self.hidden];
        if dims.contains(&0) || self.attention == Some(0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.attention.is_some() && self.encoder != EncoderKind::Lstm {
            return Err(Error::Config(
                "soft attention needs the lstm encoder".into(),
            ));
        }
        Ok(())
    }

    pub fn decoder_input(&self) -> usize {
        match self.attention {
            Some(_) => self.d_emb + self.hidden,
            None => self.d_emb,
        }
    }
}

/// LSTM gate weights; each matrix maps `[input ⊕ hidden]` to `hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_input: Tensor,
    pub w_forget: Tensor,
    pub w_output: Tensor,
    pub w_candidate: Tensor,
    pub b_input: Tensor,
    pub b_forget: Tensor,
    pub b_output: Tensor,
    pub b_candidate: Tensor,
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[input + hidden, hidden]);
        let b = Tensor::zeros(&[hidden]);
        LstmCell {
            w_input: w.clone(),
            w_forget: w.clone(),
            w_output: w.clone(),
            w_candidate: w,
            b_input: b.clone(),
            b_forget: b.clone(),
            b_output: b.clone(),
            b_candidate: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_input.len()
    }

    pub fn input(&self) -> usize {
        self.w_input.shape()[0] - self.hidden()
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.w_input,
            &self.w_forget,
            &self.w_output,
            &self.w_candidate,
            &self.b_input,
            &self.b_forget,
            &self.b_output,
            &self.b_candidate,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_input,
            &mut self.w_forget,
            &mut self.w_output,
            &mut self.w_candidate,
            &mut self.b_input,
            &mut self.b_forget,
            &mut self.b_output,
            &mut self.b_candidate,
        ]
    }
}

const CELL_NAMES: [&str; 8] = [
    "w_input",
    "w_forget",
    "w_output",
    "w_candidate",
    "b_input",
    "b_forget",
    "b_output",
    "b_candidate",
];

/// Soft-attention scorer `e_ti = wᵀ tanh(h W_a + v_i U_a + b_a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: Tensor,
    pub w_a: Tensor,
    pub u_a: Tensor,
    pub b_a: Tensor,
}

/// Every trainable tensor of the captioner.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub embedding: Tensor,
    pub reduce_w: Tensor,
    pub reduce_b: Tensor,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub attention: Option<AttentionParams>,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config` and `vocab`.
    pub fn zeros(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let v = vocab.len();
        let h = config.hidden;
        let attention = config.attention.map(|a| AttentionParams {
            w: Tensor::zeros(&[a, 1]),
            w_a: Tensor::zeros(&[h, a]),
            u_a: Tensor::zeros(&[h, a]),
            b_a: Tensor::zeros(&[a]),
        });
        Ok(ModelParams {
            embedding: Tensor::zeros(&[v, config.d_emb]),
            reduce_w: Tensor::zeros(&[config.d_feat, config.d_red]),
            reduce_b: Tensor::zeros(&[config.d_red]),
            encoder: LstmCell::zeros(config.d_red, h),
            decoder: LstmCell::zeros(config.decoder_input(), h),
            out_w: Tensor::zeros(&[h, v]),
            out_b: Tensor::zeros(&[v]),
            attention,
            config,
            vocab,
        })
    }

    /// Uniform `[-0.08, 0.08]` weights from a seeded generator, forget-gate
    /// biases at 1.0.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in p.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.random_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        p.encoder.b_forget = Tensor::filled(&[p.config.hidden], FORGET_BIAS);
        p.decoder.b_forget = Tensor::filled(&[p.config.hidden], FORGET_BIAS);
        Ok(p)
    }

    /// Same shapes, every value zero; used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    /// Named tensors in a fixed order; the position is the parameter id.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("reduce.w".into(), &self.reduce_w),
            ("reduce.b".into(), &self.reduce_b),
        ];
        for (n, t) in CELL_NAMES.iter().zip(self.encoder.tensors()) {
            out.push((format!("encoder.{n}"), t));
        }
        for (n, t) in CELL_NAMES.iter().zip(self.decoder.tensors()) {
            out.push((format!("decoder.{n}"), t));
        }
        out.push(("output.w".into(), &self.out_w));
        out.push(("output.b".into(), &self.out_b));
        if let Some(a) = &self.attention {
            out.push(("attention.w".into(), &a.w));
            out.push(("attention.w_a".into(), &a.w_a));
            out.push(("attention.u_a".into(), &a.u_a));
            out.push(("attention.b_a".into(), &a.b_a));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("reduce.w".into(), &mut self.reduce_w),
            ("reduce.b".into(), &mut self.reduce_b),
        ];
        for (n, t) in CELL_NAMES.iter().zip(self.encoder.tensors_mut()) {
            out.push((format!("encoder.{n}"), t));
        }
        for (n, t) in CELL_NAMES.iter().zip(self.decoder.tensors_mut()) {
            out.push((format!("decoder.{n}"), t));
        }
        out.push(("output.w".into(), &mut self.out_w));
        out.push(("output.b".into(), &mut self.out_b));
        if let Some(a) = &mut self.attention {
            out.push(("attention.w".into(), &mut a.w));
            out.push(("attention.w_a".into(), &mut a.w_a));
            out.push(("attention.u_a".into(), &mut a.u_a));
            out.push(("attention.b_a".into(), &mut a.b_a));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
