//! Evaluation metrics and report generation: PSNR, SSIM, perceptual
//! distance, landmark displacement, and the gradient-based sharpness
//! difference, plus JSON/Markdown reports.

use serde::{Deserialize, Serialize};

use stylesplat_grad::{Graph, Tensor};

use crate::error::{Error, Result};
use crate::objectives::{loss_perceptual, FeatureExtractor};

/// PSNR is capped here so identical frames stay finite in reports.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0,1].
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr shapes");
    let mut mse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        mse += (x - y) * (x - y);
    }
    mse /= a.numel() as f64;
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// SSIM with the standard 11x11 Gaussian window (sigma 1.5), K=(0.01,0.03),
/// dynamic range 1. Windows are valid-mode; channels are averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim shapes");
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    const WIN: usize = 11;
    assert!(h >= WIN && w >= WIN, "image smaller than ssim window");
    let kernel = gaussian_kernel(WIN, 1.5);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..=h - WIN {
            for j in 0..=w - WIN {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for u in 0..WIN {
                    for v in 0..WIN {
                        let k = kernel[u * WIN + v];
                        let x = pa[(i + u) * w + j + v];
                        let y = pb[(i + u) * w + j + v];
                        mx += k * x;
                        my += k * y;
                        mxx += k * x * x;
                        myy += k * y * y;
                        mxy += k * x * y;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    total / count as f64
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n as f64 - 1.0) / 2.0;
    let mut k = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            k[i * n + j] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Perceptual distance via the registered extractor (same recipe as the
/// stage-3 perceptual loss).
pub fn lpips(a: &Tensor, b: &Tensor, extractor: &dyn FeatureExtractor) -> f64 {
    let mut g = Graph::new();
    let na = g.constant(a.clone());
    let nb = g.constant(b.clone());
    let l = loss_perceptual(&mut g, extractor, na, nb);
    g.value(l).item()
}

/// Mean Euclidean landmark displacement in pixels.
pub fn f_lmd(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "landmark sets".into(),
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut total = 0.0;
    for (p, q) in pred.iter().zip(gt) {
        total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    }
    Ok(total / pred.len() as f64)
}

/// Sharpness difference: mean absolute difference between the summed
/// forward-difference gradient magnitudes |dx| + |dy| of the two images.
/// Zero for any pair of constant images; lower is better.
pub fn sharpness_difference(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "sd shapes");
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    assert!(h >= 2 && w >= 2, "image too small for gradients");
    let grad_mag = |img: &Tensor, ch: usize, i: usize, j: usize| {
        let p = &img.data()[ch * h * w..(ch + 1) * h * w];
        let dx = p[i * w + j + 1] - p[i * w + j];
        let dy = p[(i + 1) * w + j] - p[i * w + j];
        dx.abs() + dy.abs()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                total += (grad_mag(a, ch, i, j) - grad_mag(b, ch, i, j)).abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Per-frame metric values; absent metrics stay None.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub sd: Option<f64>,
    pub flmd: Option<f64>,
}

/// Aggregated metrics for one method/dataset pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub sd: Option<f64>,
    pub flmd: Option<f64>,
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn from_frames(method: &str, dataset: &str, frames: Vec<FrameMetrics>) -> Self {
        let avg = |f: &dyn Fn(&FrameMetrics) -> Option<f64>| {
            let vals: Vec<f64> = frames.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            psnr: avg(&|m| m.psnr),
            ssim: avg(&|m| m.ssim),
            lpips: avg(&|m| m.lpips),
            sd: avg(&|m| m.sd),
            flmd: avg(&|m| m.flmd),
            frames,
        }
    }
}

/// Markdown table over one or more reports. SD and LPIPS additionally
/// appear in their conventional scaled forms (x10^-1 and x10^2).
pub fn reports_to_markdown(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    out.push_str("| Methods | F-LMD↓ | SD↓ | SD↓ (×10⁻¹) | PSNR↑ | LPIPS↓ | LPIPS↓ (×10²) | SSIM↑ |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    let fmt = |v: Option<f64>, scale: f64| match v {
        Some(x) => format!("{:.2}", x * scale),
        None => "–".to_string(),
    };
    for r in reports {
        out.push_str(&format!(
            "| {} ({}) | {} | {} | {} | {} | {} | {} | {} |\n",
            r.method,
            r.dataset,
            fmt(r.flmd, 1.0),
            fmt(r.sd, 1.0),
            fmt(r.sd, 0.1),
            fmt(r.psnr, 1.0),
            fmt(r.lpips, 1.0),
            fmt(r.lpips, 100.0),
            match r.ssim {
                Some(x) => format!("{x:.3}"),
                None => "–".to_string(),
            },
        ));
    }
    out
}
