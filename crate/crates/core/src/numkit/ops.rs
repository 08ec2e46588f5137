use super::tape::{softmax_row_in_place, LN_CLAMP};
use super::{Result, Tensor, TensorError};

/// Temperature softmax of a vector: `exp(z_i/tau) / sum_j exp(z_j/tau)`,
/// computed with max-subtraction.
pub fn softmax_tau(z: &Tensor, tau: f64) -> Result<Tensor> {
    let mut data = z.data().to_vec();
    softmax_tau_slice(&mut data, tau)?;
    Tensor::new(z.shape().to_vec(), data)
}

/// In-place temperature softmax over a flat slice.
pub fn softmax_tau_slice(z: &mut [f64], tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(TensorError::InvalidParameter {
            name: "tau",
            reason: format!("temperature must be positive, got {tau}"),
        });
    }
    if z.is_empty() {
        return Err(TensorError::InvalidParameter {
            name: "z",
            reason: "softmax of an empty vector".into(),
        });
    }
    softmax_row_in_place(z, tau);
    Ok(())
}

/// Kullback-Leibler divergence `sum_i p_i ln(p_i / q_i)` with the
/// `0 ln 0 = 0` convention; `q` entries are clamped at 1e-12 before the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(TensorError::DimensionMismatch {
            op: "kl_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| x < 0.0) {
            return Err(TensorError::InvalidParameter {
                name,
                reason: "distribution has a negative entry".into(),
            });
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(TensorError::InvalidParameter {
                name,
                reason: format!("distribution sums to {sum}, not 1"),
            });
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi / qi.max(LN_CLAMP)).ln();
        }
    }
    Ok(kl)
}

/// Cosine-similarity fusion weight `psi = (1 + a.b / (|a| |b|)) / 2`, clamped
/// to [0, 1]. A zero-norm side falls back to the neutral weight 0.5.
pub fn cosine_weight(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TensorError::DimensionMismatch {
            op: "cosine_weight",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.5);
    }
    let psi = (1.0 + dot / (na * nb)) / 2.0;
    Ok(psi.clamp(0.0, 1.0))
}
