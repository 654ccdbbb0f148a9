//! Graph construction shared by training and inference.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::seq2seq::{EncoderKind, ModelParams, UNK};

#[derive(Clone, Copy)]
pub(crate) struct CellVars {
    w: [Var; 4],
    b: [Var; 4],
}

#[derive(Clone, Copy)]
struct AttnVars {
    w: Var,
    w_a: Var,
    u_a: Var,
    b_a: Var,
}

/// (hidden, cell) pair, one row per batch element.
#[derive(Clone, Copy)]
pub(crate) struct State {
    pub h: Var,
    pub c: Var,
}

/// Encoder outputs plus the pre-projected attention keys.
pub(crate) struct AttnCache {
    hs: Vec<Var>,
    keys: Vec<Var>,
}

pub(crate) struct Net<'a> {
    pub params: &'a ModelParams,
    pub g: Graph<'a>,
    embedding: Var,
    reduce_w: Var,
    reduce_b: Var,
    encoder: CellVars,
    decoder: CellVars,
    out_w: Var,
    out_b: Var,
    attention: Option<AttnVars>,
    steps: Option<&'a AtomicUsize>,
}

impl<'a> Net<'a> {
    /// Registers every parameter tensor on a fresh graph, in `tensors()` order.
    pub fn new(params: &'a ModelParams, steps: Option<&'a AtomicUsize>) -> Self {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, (_, t))| g.param(i, t))
            .collect();
        let cell = |base: usize| CellVars {
            w: [vars[base], vars[base + 1], vars[base + 2], vars[base + 3]],
            b: [
                vars[base + 4],
                vars[base + 5],
                vars[base + 6],
                vars[base + 7],
            ],
        };
        let attention = params.attention.as_ref().map(|_| AttnVars {
            w: vars[21],
            w_a: vars[22],
            u_a: vars[23],
            b_a: vars[24],
        });
        Net {
            params,
            embedding: vars[0],
            reduce_w: vars[1],
            reduce_b: vars[2],
            encoder: cell(3),
            decoder: cell(11),
            out_w: vars[19],
            out_b: vars[20],
            attention,
            g,
            steps,
        }
    }

    pub fn zero_state(&mut self, batch: usize) -> State {
        let h = self.params.config.hidden;
        State {
            h: self.g.constant(Tensor::zeros(&[batch, h])),
            c: self.g.constant(Tensor::zeros(&[batch, h])),
        }
    }

    pub fn state_from(&mut self, h: Tensor, c: Tensor) -> State {
        State {
            h: self.g.constant(h),
            c: self.g.constant(c),
        }
    }

    fn lstm_step(&mut self, cell: CellVars, x: Var, state: State) -> Result<State> {
        let xh = self.g.concat_cols(&[x, state.h])?;
        let mut gates = [x; 4];
        for k in 0..4 {
            let pre = self.g.matmul(xh, cell.w[k])?;
            gates[k] = self.g.add_row(pre, cell.b[k])?;
        }
        let i = self.g.sigmoid(gates[0]);
        let f = self.g.sigmoid(gates[1]);
        let o = self.g.sigmoid(gates[2]);
        let cand = self.g.tanh(gates[3]);
        let keep = self.g.mul(f, state.c)?;
        let write = self.g.mul(i, cand)?;
        let c = self.g.add(keep, write)?;
        let tc = self.g.tanh(c);
        let h = self.g.mul(o, tc)?;
        Ok(State { h, c })
    }

    pub fn encoder_step(&mut self, x: Var, state: State) -> Result<State> {
        self.lstm_step(self.encoder, x, state)
    }

    fn reduce(&mut self, x: Var) -> Result<Var> {
        let r = self.g.matmul(x, self.reduce_w)?;
        self.g.add_row(r, self.reduce_b)
    }

    /// Encodes time-major inputs (`inputs[i]` is `[B × d_feat]`).
    ///
    /// Returns the per-step hidden states and the final state z.
    pub fn encode(&mut self, inputs: &[Tensor]) -> Result<(Vec<Var>, State)> {
        let d_feat = self.params.config.d_feat;
        let Some(first) = inputs.first() else {
            return Err(Error::contract("cannot encode an empty sequence"));
        };
        let batch = first.rows();
        if inputs
            .iter()
            .any(|t| t.cols() != d_feat || t.rows() != batch)
        {
            return Err(Error::contract(format!(
                "descriptor dimension must be {d_feat} for every item"
            )));
        }
        let mut reduced = Vec::with_capacity(inputs.len());
        for t in inputs {
            let x = self.g.constant(t.clone());
            reduced.push(self.reduce(x)?);
        }
        let mut state = self.zero_state(batch);
        match self.params.config.encoder {
            EncoderKind::Lstm => {
                let mut hs = Vec::with_capacity(reduced.len());
                for x in reduced {
                    state = self.lstm_step(self.encoder, x, state)?;
                    hs.push(state.h);
                }
                Ok((hs, state))
            }
            EncoderKind::Mean => {
                let mean = self.mean(&reduced)?;
                state = self.encoder_step(mean, state)?;
                Ok((vec![state.h], state))
            }
        }
    }

    /// Elementwise average of reduced descriptors, summed in item order.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.g.add(acc, x)?;
        }
        Ok(self.g.scale(acc, 1.0 / xs.len() as f64))
    }

    pub fn reduced(&mut self, input: &Tensor) -> Result<Var> {
        let x = self.g.constant(input.clone());
        self.reduce(x)
    }

    pub fn attention_cache(&mut self, hs: &[Var]) -> Result<Option<AttnCache>> {
        let Some(a) = self.attention else {
            return Ok(None);
        };
        let mut keys = Vec::with_capacity(hs.len());
        for &h in hs {
            let k = self.g.matmul(h, a.u_a)?;
            keys.push(self.g.add_row(k, a.b_a)?);
        }
        Ok(Some(AttnCache {
            hs: hs.to_vec(),
            keys,
        }))
    }

    /// Attention weights `[B × m]` and context `[B × hidden]` for query `h_prev`.
    fn attend(&mut self, cache: &AttnCache, h_prev: Var) -> Result<(Var, Var)> {
        let a = self
            .attention
            .expect("attention vars exist when a cache exists");
        let q = self.g.matmul(h_prev, a.w_a)?;
        let mut scores = Vec::with_capacity(cache.keys.len());
        for &k in &cache.keys {
            let pre = self.g.add(q, k)?;
            let act = self.g.tanh(pre);
            scores.push(self.g.matmul(act, a.w)?);
        }
        let e = self.g.concat_cols(&scores)?;
        let alpha = self.g.softmax_rows(e);
        let mut ctx = None;
        for (i, &h) in cache.hs.iter().enumerate() {
            let w = self.g.slice_cols(alpha, i, 1)?;
            let term = self.g.mul_col(w, h)?;
            ctx = Some(match ctx {
                None => term,
                Some(acc) => self.g.add(acc, term)?,
            });
        }
        Ok((alpha, ctx.expect("non-empty attention cache")))
    }

    /// One decoder step fed with the previous tokens (one per row).
    ///
    /// Returns the new state, the output logits and, for the attention
    /// variant, this step's attention weights.
    pub fn decoder_step(
        &mut self,
        tokens: &[usize],
        state: State,
        cache: Option<&AttnCache>,
    ) -> Result<(State, Var, Option<Var>)> {
        let v = self.params.vocab_size();
        let ids: Vec<usize> = tokens
            .iter()
            .map(|&t| if t < v { t } else { UNK })
            .collect();
        let emb = self.g.gather(self.embedding, &ids)?;
        let (input, alpha) = match (self.attention.is_some(), cache) {
            (false, _) => (emb, None),
            (true, Some(cache)) => {
                let (alpha, ctx) = self.attend(cache, state.h)?;
                (self.g.concat_cols(&[emb, ctx])?, Some(alpha))
            }
            (true, None) => {
                return Err(Error::contract(
                    "attention model needs the encoded sequence",
                ));
            }
        };
        let next = self.lstm_step(self.decoder, input, state)?;
        let logits = self.g.matmul(next.h, self.out_w)?;
        let logits = self.g.add_row(logits, self.out_b)?;
        if let Some(counter) = self.steps {
            counter.fetch_add(tokens.len(), Ordering::Relaxed);
        }
        Ok((next, logits, alpha))
    }
}
