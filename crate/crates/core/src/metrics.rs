//! Frame-prediction metrics: per-pixel MSE, Gaussian-windowed SSIM, and
//! whole-test-set evaluation reports.
//!
//! MSE is the per-pixel mean of squared differences (not a per-image sum),
//! so values for `[0,1]` images land in the 1e-4–1e-3 range the reports
//! quote. SSIM follows the standard construction: local means, variances,
//! and covariance under an 11×11 σ=1.5 Gaussian window, stabilized by
//! `C1=(K1·L)²` and `C2=(K2·L)²`, averaged over all fully valid window
//! positions. Set-level results average per-image SSIM over the set (the
//! alternative — one global mean of all local values — differs only through
//! per-image window counts; we fix the former).
//!
//! All accumulation is in `f64` regardless of the input scalar type.

use rayon::prelude::*;

use crate::data::{windows, DrivingLog, NormalizationStats};
use crate::error::{Error, Result};
use crate::model::PredictiveModel;
use crate::tensor::{Scalar, Tensor};

/// SSIM window and stabilization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    /// Side length of the Gaussian window, in pixels.
    pub window: usize,
    /// Standard deviation of the Gaussian window, in pixels.
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values (1.0 for `[0,1]` images).
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// The 1-D Gaussian tap vector; the 2-D window is its outer product and
    /// sums to 1 within 1e-9.
    pub fn gaussian_kernel(&self) -> Vec<f64> {
        let n = self.window;
        let c = (n as f64 - 1.0) / 2.0;
        let mut taps: Vec<f64> = (0..n)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        for t in &mut taps {
            *t /= sum;
        }
        taps
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "SSIM parameters must be positive: window {}, sigma {}, range {}",
                self.window, self.sigma, self.dynamic_range
            )));
        }
        Ok(())
    }
}

/// Mean squared pixel difference, accumulated in `f64`.
pub fn mse_image<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shapes("mse_image", pred.shape(), gt.shape()));
    }
    if pred.numel() == 0 {
        return Err(Error::InvalidConfig("mse_image on empty tensor".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p.to_f64() - g.to_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Valid-extent separable correlation of an `h×w` image with a 1-D kernel
/// applied along both axes. Returns the `(h−k+1)×(w−k+1)` result.
fn convolve_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kt) in kernel.iter().enumerate() {
                acc += kt * img[y * w + x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kt) in kernel.iter().enumerate() {
                acc += kt * rows[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Structural similarity of two single-channel images, in `[−1, 1]`.
///
/// Local Gaussian-weighted statistics are computed at every position where
/// the window lies fully inside the image; the result is the mean of the
/// local SSIM map. Symmetric in its arguments.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    if pred.shape() != gt.shape() {
        return Err(Error::shapes("ssim", pred.shape(), gt.shape()));
    }
    if pred.rank() != 3 || pred.shape()[2] != 1 {
        return Err(Error::InvalidConfig(format!(
            "ssim expects [H,W,1] images, got {:?}",
            pred.shape()
        )));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    if h < params.window || w < params.window {
        return Err(Error::InvalidConfig(format!(
            "image {h}×{w} is smaller than the {0}×{0} SSIM window",
            params.window
        )));
    }
    let x: Vec<f64> = pred.data().iter().map(|v| v.to_f64()).collect();
    let y: Vec<f64> = gt.data().iter().map(|v| v.to_f64()).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();

    let kernel = params.gaussian_kernel();
    let mx = convolve_valid(&x, h, w, &kernel);
    let my = convolve_valid(&y, h, w, &kernel);
    let mxx = convolve_valid(&xx, h, w, &kernel);
    let myy = convolve_valid(&yy, h, w, &kernel);
    let mxy = convolve_valid(&xy, h, w, &kernel);

    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut acc = 0.0f64;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

/// Per-log slice of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSummary {
    pub n_samples: usize,
    pub mean_mse: f64,
    pub mean_ssim: f64,
}

/// Aggregate metrics of a model over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Model name as reported (`sdf-tiling`, `sdf-vector`, `copy`).
    pub model: String,
    pub n_samples: usize,
    /// Arithmetic mean per-pixel MSE over all samples (raw units).
    pub mean_mse: f64,
    /// Arithmetic mean per-image SSIM over all samples.
    pub mean_ssim: f64,
    /// One summary per input log, in input order.
    pub per_log: Vec<LogSummary>,
}

impl EvalReport {
    /// Mean MSE in 1e-4 units, the convention of the result tables.
    pub fn mse_e4(&self) -> f64 {
        self.mean_mse * 1e4
    }

    /// The one-line text form: `model=<name> n=<int> mse_e4=<4dp> ssim=<4dp>`.
    pub fn summary_line(&self) -> String {
        format!(
            "model={} n={} mse_e4={:.4} ssim={:.4}",
            self.model,
            self.n_samples,
            self.mse_e4(),
            self.mean_ssim
        )
    }

    /// Per-log breakdown as CSV: `log,n,mse_e4,ssim`.
    pub fn per_log_csv(&self) -> String {
        let mut out = String::from("log,n,mse_e4,ssim\n");
        for (i, l) in self.per_log.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                i,
                l.n_samples,
                l.mean_mse * 1e4,
                l.mean_ssim
            ));
        }
        out
    }
}

/// Runs `model` over every windowed sample of `logs` (windows of the model's
/// configured size, actions normalized with `stats`), clamps predictions to
/// `[0,1]`, and averages both metrics. Sample order is deterministic; samples
/// may be scored in parallel but sums are accumulated sequentially in `f64`.
pub fn evaluate(
    model: &PredictiveModel<f32>,
    logs: &[DrivingLog],
    stats: &NormalizationStats,
    params: &SsimParams,
) -> Result<EvalReport> {
    let w = model.config().window();
    let counts: Vec<usize> = logs.iter().map(|l| l.n_windows(w)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDataset(format!(
            "no windowed samples: {} log(s) with window size {w}",
            logs.len()
        )));
    }

    // Score samples log by log; each log's windows can shard across workers.
    let mut per_log = Vec::with_capacity(logs.len());
    let (mut sum_mse, mut sum_ssim) = (0.0f64, 0.0f64);
    for (log, &n) in logs.iter().zip(&counts) {
        if n == 0 {
            per_log.push(LogSummary {
                n_samples: 0,
                mean_mse: 0.0,
                mean_ssim: 0.0,
            });
            continue;
        }
        let samples: Vec<_> = windows(log, w, stats).collect();
        let scores: Vec<(f64, f64)> = samples
            .par_iter()
            .map(|s| {
                let pred = model
                    .predict(&s.history, &s.action)?
                    .frame
                    .clamp(0.0, 1.0);
                Ok((mse_image(&pred, &s.target)?, ssim(&pred, &s.target, params)?))
            })
            .collect::<Result<_>>()?;
        let (mut lm, mut ls) = (0.0f64, 0.0f64);
        for &(m, s) in &scores {
            lm += m;
            ls += s;
        }
        sum_mse += lm;
        sum_ssim += ls;
        per_log.push(LogSummary {
            n_samples: n,
            mean_mse: lm / n as f64,
            mean_ssim: ls / n as f64,
        });
    }
    Ok(EvalReport {
        model: model.kind().name().to_string(),
        n_samples: total,
        mean_mse: sum_mse / total as f64,
        mean_ssim: sum_ssim / total as f64,
        per_log,
    })
}
