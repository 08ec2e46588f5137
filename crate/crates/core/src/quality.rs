//! Image-quality and classification metrics: PSNR, global-statistics SSIM,
//! accuracy, and confusion matrix.

use crate::numkit::{Result, Tensor, TensorError};

/// SSIM stabilizers derived from the dynamic range `l` as `c1 = (0.01 l)^2`,
/// `c2 = (0.03 l)^2`.
#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimParams {
    pub fn for_range(l: f64) -> Self {
        SsimParams {
            c1: (0.01 * l) * (0.01 * l),
            c2: (0.03 * l) * (0.03 * l),
            dynamic_range: l,
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        // pixels normalized to [0, 1] throughout the simulator
        SsimParams::for_range(1.0)
    }
}

fn check_same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(TensorError::DimensionMismatch {
            op,
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    Ok(())
}

fn mse(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.numel() as f64;
    x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio `10 log10(max_i^2 / MSE)` in decibels.
/// Identical images yield positive infinity.
pub fn psnr(x: &Tensor, xhat: &Tensor, max_i: f64) -> Result<f64> {
    check_same_shape("psnr", x, xhat)?;
    if max_i <= 0.0 {
        return Err(TensorError::InvalidParameter {
            name: "max_i",
            reason: format!("peak value must be positive, got {max_i}"),
        });
    }
    let e = mse(x, xhat);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_i * max_i / e).log10())
}

/// Structural similarity over whole-image statistics (means, variances,
/// covariance); no sliding window.
pub fn ssim(x: &Tensor, xhat: &Tensor, params: &SsimParams) -> Result<f64> {
    check_same_shape("ssim", x, xhat)?;
    let n = x.numel() as f64;
    let mu_x = x.data().iter().sum::<f64>() / n;
    let mu_y = xhat.data().iter().sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in x.data().iter().zip(xhat.data()) {
        var_x += (a - mu_x) * (a - mu_x);
        var_y += (b - mu_y) * (b - mu_y);
        cov += (a - mu_x) * (b - mu_y);
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    let num = (2.0 * mu_x * mu_y + params.c1) * (2.0 * cov + params.c2);
    let den = (mu_x * mu_x + mu_y * mu_y + params.c1) * (var_x + var_y + params.c2);
    Ok(num / den)
}

/// Confusion counts: entry `(i, j)` is how often truth `i` was predicted `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: usize = (0..self.classes).map(|i| self.get(i, i)).sum();
        trace as f64 / total as f64
    }
}

pub fn confusion(preds: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(TensorError::DimensionMismatch {
            op: "confusion",
            left: vec![preds.len()],
            right: vec![truths.len()],
        });
    }
    let mut counts = vec![0usize; classes * classes];
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(TensorError::InvalidParameter {
                name: "class",
                reason: format!("class index out of range: pred {p}, truth {t}, classes {classes}"),
            });
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}
