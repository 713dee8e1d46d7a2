use super::forward::{check_tokens, forward_cached, RouterBias};
use super::params::Parameters;
use super::trace::RoutingTrace;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Continuation produced by greedy decoding plus the routing trace over
/// `prompt ⊕ continuation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T> {
    pub tokens: Vec<u32>,
    pub trace: RoutingTrace<T>,
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Argmax decoding until the end token, `max_new` tokens, or the context limit.
/// The end token, when produced, is part of the continuation.
pub fn greedy_decode<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[u32],
    max_new: usize,
) -> Result<Decoded<T>> {
    decode_with_bias(params, prompt, max_new, None)
}

pub(crate) fn decode_with_bias<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[u32],
    max_new: usize,
    bias: Option<&RouterBias<T>>,
) -> Result<Decoded<T>> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    check_tokens(params, prompt)?;
    let eos = params.config.eos();
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        if seq.len() >= params.config.max_seq_len {
            break;
        }
        let (logits, _) = forward_cached(params, &seq, bias)?;
        let next = argmax(logits.row(seq.len() - 1));
        seq.push(next);
        if next == eos {
            break;
        }
    }
    let (_, cache) = forward_cached(params, &seq, bias)?;
    let generated = (prompt.len()..seq.len()).collect();
    Ok(Decoded {
        tokens: seq[prompt.len()..].to_vec(),
        trace: cache.trace(generated),
    })
}
