use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A strictly positive probability vector produced by [`softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Tensor,
}

impl Distribution {
    pub fn probs(&self) -> &[f64] {
        self.probs.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs.data()[k]
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_lowest(self.probs.data())
    }
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax of a single row, written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        // keep every entry strictly positive even when exp underflows
        *o = (*o / total).max(f64::MIN_POSITIVE);
    }
}

pub fn softmax(logits: &[f64]) -> Result<Distribution> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(Distribution {
        probs: Tensor::vector(out)?,
    })
}

/// Wraps a row that is already a softmax output.
pub(crate) fn distribution_from_softmax_row(row: &[f64]) -> Distribution {
    Distribution {
        probs: Tensor::vector(row.to_vec()).expect("non-empty softmax row"),
    }
}

/// `Σ p_k ln(p_k / q_k)` with the convention `0 · ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!(
            "kl support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk > 0.0 {
            total += pk * (pk / qk).ln();
        }
    }
    // rounding can leave tiny negative totals for near-identical inputs
    Ok(total.max(0.0))
}

pub fn one_hot(len: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[k] = 1.0;
    v
}
