//! Versioned text checkpoint.
//!
//! ```text
//! capsal-checkpoint v1
//! token <bos>
//! ...
//! hparam d_feat 24
//! ...
//! tensor embedding 19x16 <hex>
//! ...
//! end
//! ```
//!
//! Every value is written as the 16-digit hex of its IEEE-754 bits, so a
//! save/load round trip is bit exact and the bytes depend only on the values.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seq2seq::{EncoderKind, ModelConfig, ModelParams, Vocabulary};

const MAGIC: &str = "capsal-checkpoint v1";

pub fn encode_f64s(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        write!(s, "{:016x}", v.to_bits()).expect("writing to a String");
    }
    s
}

pub fn decode_f64s(hex: &str) -> Result<Vec<f64>> {
    if hex.len() % 16 != 0 || !hex.is_ascii() {
        return Err(Error::format("hex payload length is not a multiple of 16"));
    }
    (0..hex.len() / 16)
        .map(|i| {
            u64::from_str_radix(&hex[i * 16..(i + 1) * 16], 16)
                .map(f64::from_bits)
                .map_err(|e| Error::format(format!("bad hex value: {e}")))
        })
        .collect()
}

pub fn to_string(params: &ModelParams) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for t in params.vocab.tokens() {
        writeln!(out, "token {t}").unwrap();
    }
    let c = &params.config;
    writeln!(out, "hparam d_feat {}", c.d_feat).unwrap();
    writeln!(out, "hparam d_red {}", c.d_red).unwrap();
    writeln!(out, "hparam d_emb {}", c.d_emb).unwrap();
    writeln!(out, "hparam hidden {}", c.hidden).unwrap();
    writeln!(out, "hparam encoder {}", c.encoder).unwrap();
    writeln!(out, "hparam attention {}", c.attention.unwrap_or(0)).unwrap();
    for (name, t) in params.tensors() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(
            out,
            "tensor {name} {} {}",
            dims.join("x"),
            encode_f64s(t.data())
        )
        .unwrap();
    }
    out.push_str("end\n");
    out
}

pub fn from_str(text: &str) -> Result<ModelParams> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format("not a capsal checkpoint (bad header)"));
    }
    let mut tokens = Vec::new();
    let mut config = ModelConfig::default();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut ended = false;
    for line in lines {
        let mut parts = line.splitn(2, ' ');
        let kind = parts.next().unwrap_or("");
        let rest = parts.next().unwrap_or("");
        match kind {
            "token" => tokens.push(rest.to_string()),
            "hparam" => {
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::format(format!("bad hparam line {line:?}")))?;
                let num = || {
                    value
                        .parse::<usize>()
                        .map_err(|_| Error::format(format!("bad value for {key}: {value}")))
                };
                match key {
                    "d_feat" => config.d_feat = num()?,
                    "d_red" => config.d_red = num()?,
                    "d_emb" => config.d_emb = num()?,
                    "hidden" => config.hidden = num()?,
                    "encoder" => config.encoder = value.parse::<EncoderKind>()?,
                    "attention" => config.attention = Some(num()?).filter(|&a| a > 0),
                    other => return Err(Error::format(format!("unknown hparam {other}"))),
                }
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(Error::format(format!(
                        "bad tensor line for {:?}",
                        f.first()
                    )));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::format(format!("bad shape for {}", f[0])))?;
                tensors.push((f[0].to_string(), Tensor::new(shape, decode_f64s(f[2])?)?));
            }
            "end" => {
                ended = true;
                break;
            }
            "" => {}
            other => return Err(Error::format(format!("unknown record {other:?}"))),
        }
    }
    if !ended {
        return Err(Error::format("truncated checkpoint (missing end)"));
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let mut params = ModelParams::zeros(config, vocab)?;
    {
        let mut slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::format(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), (found, t)) in slots.iter_mut().zip(tensors) {
            if *name != found || slot.shape() != t.shape() {
                return Err(Error::format(format!(
                    "tensor {found} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_str(&std::fs::read_to_string(path)?)
}
