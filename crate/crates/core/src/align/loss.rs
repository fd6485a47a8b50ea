use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub const NORM_TOLERANCE: f64 = 1e-3;
pub const MIN_TEMPERATURE: f64 = 1.0;
pub const MAX_TEMPERATURE: f64 = 100.0;

fn check_rows<T: Scalar>(tape: &Tape<T>, e: Var, other: &[usize]) -> Result<()> {
    let s = tape.shape(e);
    if s.len() != 2 || s != other {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: s.to_vec(),
            rhs: other.to_vec(),
        }
        .into());
    }
    if s[0] == 0 {
        return Err(TensorError::EmptyBatch.into());
    }
    for (row, r) in tape.value(e).data().chunks(s[1]).enumerate() {
        let norm = r.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Unnormalized { row, norm });
        }
    }
    Ok(())
}

/// Cross entropy of `S = E_c·E_iᵀ·t` against the diagonal. The asymmetric
/// form scores each caption against all images; the symmetric form averages
/// it with the image-to-caption direction. `t` is a single-element variable.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ec: Var,
    ei: Var,
    t: Var,
    symmetric: bool,
) -> Result<Var> {
    let shape = tape.shape(ec).to_vec();
    check_rows(tape, ec, &shape)?;
    check_rows(tape, ei, &shape)?;
    let b = shape[0];
    let targets: Vec<usize> = (0..b).collect();
    let it = tape.transpose(ei)?;
    let s = tape.matmul(ec, it)?;
    let s = tape.scale_by(s, t)?;
    let rows = tape.softmax_cross_entropy(s, &targets)?;
    if !symmetric {
        return Ok(rows);
    }
    let st = tape.transpose(s)?;
    let cols = tape.softmax_cross_entropy(st, &targets)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, T::lit(0.5))?)
}

/// Text-to-text alignment loss; always symmetric.
pub fn text_text_loss<T: Scalar>(tape: &mut Tape<T>, e_en: Var, e_x: Var, t: Var) -> Result<Var> {
    contrastive_loss(tape, e_en, e_x, t, true)
}

/// Loss value for row-major embedding lists, without gradients.
pub fn contrastive_loss_value<T: Scalar>(
    ec: &[Vec<T>],
    ei: &[Vec<T>],
    t: T,
    symmetric: bool,
) -> Result<T> {
    if ec.is_empty() || ei.is_empty() {
        return Err(TensorError::EmptyBatch.into());
    }
    let to_tensor = |rows: &[Vec<T>]| -> Result<Tensor<T>> {
        let p = rows[0].len();
        Ok(Tensor::new(vec![rows.len(), p], rows.concat())?)
    };
    let mut tape = Tape::new();
    let a = tape.constant(to_tensor(ec)?);
    let b = tape.constant(to_tensor(ei)?);
    let tv = tape.constant(Tensor::scalar(t));
    let l = contrastive_loss(&mut tape, a, b, tv, symmetric)?;
    Ok(tape.value(l).item())
}

/// Clamps a log-temperature so that `exp(log_t)` stays in `[1, 100]`.
pub fn clamp_log_temperature<T: Scalar>(log_t: T) -> T {
    let lo = T::lit(MIN_TEMPERATURE.ln());
    let max = T::lit(MAX_TEMPERATURE);
    let mut hi = max.ln();
    // ln rounds up in some precisions; step down until exp stays in range
    while hi.exp() > max {
        hi = hi - hi * T::epsilon();
    }
    log_t.max(lo).min(hi)
}
