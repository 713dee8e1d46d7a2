use super::forward::forward;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, softmax, Matrix};

/// Next-token targets for `seq` with the loss restricted to tokens at index
/// `>= first_scored` (e.g. the response start). Position `t` predicts `seq[t+1]`.
pub fn next_token_targets(seq: &[u32], first_scored: usize) -> (Vec<u32>, Vec<bool>) {
    let n = seq.len();
    let mut targets = vec![0u32; n];
    let mut mask = vec![false; n];
    for t in 0..n.saturating_sub(1) {
        targets[t] = seq[t + 1];
        mask[t] = t + 1 >= first_scored;
    }
    (targets, mask)
}

fn check_shapes<T: Scalar>(logits: &Matrix<T>, targets: &[u32], mask: &[bool]) -> Result<usize> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::Input(format!(
            "targets/mask length {}/{} vs {} logit rows",
            targets.len(),
            mask.len(),
            logits.rows()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    if let Some((_, &t)) = targets
        .iter()
        .zip(mask)
        .find(|(&t, &m)| m && t as usize >= logits.cols())
    {
        return Err(Error::Input(format!("target {t} out of vocabulary")));
    }
    Ok(count)
}

/// Mean natural-log NLL over masked positions.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[u32], mask: &[bool]) -> Result<T> {
    let count = check_shapes(logits, targets, mask)?;
    let mut total = T::zero();
    for t in (0..logits.rows()).filter(|&t| mask[t]) {
        total -= log_softmax(logits.row(t))[targets[t] as usize];
    }
    Ok(total / T::lit(count as f64))
}

/// Cross-entropy together with `∂loss/∂logits`, scaled by `weight`.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[u32],
    mask: &[bool],
    weight: T,
) -> Result<(T, Matrix<T>)> {
    let count = check_shapes(logits, targets, mask)?;
    let inv = T::one() / T::lit(count as f64);
    let mut total = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for t in (0..logits.rows()).filter(|&t| mask[t]) {
        let row = logits.row(t);
        let target = targets[t] as usize;
        total -= log_softmax(row)[target];
        let p = softmax(row);
        let g = grad.row_mut(t);
        for (gi, pi) in g.iter_mut().zip(p) {
            *gi = pi * inv * weight;
        }
        g[target] -= inv * weight;
    }
    Ok((total * inv, grad))
}

/// Perplexity of `response` given `prompt`: `exp` of the mean NLL over response
/// tokens only. An empty response yields [`Error::EmptyMask`].
pub fn sequence_ppl<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[u32],
    response: &[u32],
) -> Result<T> {
    if response.is_empty() {
        return Err(Error::EmptyMask);
    }
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let seq: Vec<u32> = prompt.iter().chain(response).copied().collect();
    let (logits, _) = forward(params, &seq, false)?;
    let (targets, mask) = next_token_targets(&seq, prompt.len());
    Ok(cross_entropy(&logits, &targets, &mask)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Matrix::<f64>::zeros(3, 4);
        let ce = cross_entropy(&logits, &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        assert!((ce - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = Matrix::<f64>::zeros(1, 3);
            logits.set(0, 2, margin);
            let ce = cross_entropy(&logits, &[2], &[true]).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn matches_independent_log_softmax() {
        let logits = Matrix::from_vec(3, 3, vec![0.3, -1.2, 2.0, 1.1, 0.0, -0.4, -2.0, 0.7, 0.9]);
        let targets = [2u32, 0, 1];
        let mask = [true, false, true];
        // independent oracle: -log(exp(z_y) / Σ exp(z))
        let nll = |row: &[f64], y: usize| {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / s).ln()
        };
        let expect = (nll(logits.row(0), 2) + nll(logits.row(2), 1)) / 2.0;
        let got = cross_entropy(&logits, &targets, &mask).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let logits = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            cross_entropy(&logits, &[0, 0], &[false, false]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn targets_shift_by_one() {
        let (t, m) = next_token_targets(&[5, 6, 7, 8], 2);
        assert_eq!(t[..3], [6, 7, 8]);
        assert_eq!(m, vec![false, true, true, false]);
    }
}
