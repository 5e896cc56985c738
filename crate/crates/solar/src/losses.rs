//! Image-space losses: L1, windowed SSIM (with analytic gradients), the
//! combined rendering loss, and PSNR for reporting.

use crate::render::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean absolute error over all pixels and channels.
pub fn l1_loss(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.pixels.len(), b.pixels.len());
    let n = a.pixels.len() as f64;
    a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n
}

/// dL1/da. The subgradient at exact equality is taken as zero.
pub fn l1_backward(a: &Image, b: &Image) -> Image {
    let n = a.pixels.len() as f64;
    let pixels = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| {
            if x > y {
                1.0 / n
            } else if x < y {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Image { width: a.width, height: a.height, pixels }
}

/// Normalized Gaussian window used by SSIM.
fn ssim_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn window_stats(
    a: &Image,
    b: &Image,
    ch: usize,
    wx: usize,
    wy: usize,
    w: &[f64],
) -> WindowStats {
    let (mut mu_x, mut mu_y, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..SSIM_WINDOW {
        for dx in 0..SSIM_WINDOW {
            let wt = w[dy * SSIM_WINDOW + dx];
            let i = ((wy + dy) * a.width + wx + dx) * 3 + ch;
            let x = a.pixels[i];
            let y = b.pixels[i];
            mu_x += wt * x;
            mu_y += wt * y;
            xx += wt * x * x;
            yy += wt * y * y;
            xy += wt * x * y;
        }
    }
    WindowStats {
        mu_x,
        mu_y,
        var_x: xx - mu_x * mu_x,
        var_y: yy - mu_y * mu_y,
        cov: xy - mu_x * mu_y,
    }
}

fn ssim_term(st: &WindowStats) -> f64 {
    let a1 = 2.0 * st.mu_x * st.mu_y + SSIM_C1;
    let a2 = 2.0 * st.cov + SSIM_C2;
    let b1 = st.mu_x * st.mu_x + st.mu_y * st.mu_y + SSIM_C1;
    let b2 = st.var_x + st.var_y + SSIM_C2;
    (a1 * a2) / (b1 * b2)
}

/// Mean SSIM over valid (fully interior) windows, averaged over channels.
/// Images smaller than the window compare as identical (SSIM = 1).
pub fn ssim(a: &Image, b: &Image) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return 1.0;
    }
    let w = ssim_window();
    let nx = a.width - SSIM_WINDOW + 1;
    let ny = a.height - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for ch in 0..3 {
        for wy in 0..ny {
            for wx in 0..nx {
                total += ssim_term(&window_stats(a, b, ch, wx, wy, &w));
            }
        }
    }
    total / (3 * nx * ny) as f64
}

/// dSSIM/da (gradient of the mean SSIM w.r.t. the first image).
pub fn ssim_backward(a: &Image, b: &Image) -> Image {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let mut grad = Image::new(a.width, a.height);
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return grad;
    }
    let w = ssim_window();
    let nx = a.width - SSIM_WINDOW + 1;
    let ny = a.height - SSIM_WINDOW + 1;
    let scale = 1.0 / (3 * nx * ny) as f64;
    for ch in 0..3 {
        for wy in 0..ny {
            for wx in 0..nx {
                let st = window_stats(a, b, ch, wx, wy, &w);
                let a1 = 2.0 * st.mu_x * st.mu_y + SSIM_C1;
                let a2 = 2.0 * st.cov + SSIM_C2;
                let b1 = st.mu_x * st.mu_x + st.mu_y * st.mu_y + SSIM_C1;
                let b2 = st.var_x + st.var_y + SSIM_C2;
                // factored so that identical images produce an exactly
                // zero gradient (r1 = r2 = 1 bitwise): Adam takes
                // lr-sized steps on arbitrarily small gradients, so a
                // "perfect frame" must not leak rounding noise
                let d_a1 = a2 / (b1 * b2);
                let d_a2 = a1 / (b1 * b2);
                let r1 = a1 / b1;
                let r2 = a2 / b2;
                let d_mu_x = 2.0 * d_a1 * (st.mu_y - r1 * st.mu_x);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wt = w[dy * SSIM_WINDOW + dx];
                        let i = ((wy + dy) * a.width + wx + dx) * 3 + ch;
                        let x = a.pixels[i];
                        let y = b.pixels[i];
                        grad.pixels[i] += scale
                            * wt
                            * (d_mu_x
                                + 2.0 * d_a2 * ((y - st.mu_y) - r2 * (x - st.mu_x)));
                    }
                }
            }
        }
    }
    grad
}

/// Combined rendering loss (1-λ)·L1 + λ·(1-SSIM) and its gradient w.r.t.
/// the rendered image.
pub fn rendering_loss(rendered: &Image, target: &Image, lambda_ssim: f64) -> (f64, Image) {
    let l1 = l1_loss(rendered, target);
    let ss = ssim(rendered, target);
    let loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ss);
    let gl1 = l1_backward(rendered, target);
    let gss = ssim_backward(rendered, target);
    let pixels = gl1
        .pixels
        .iter()
        .zip(&gss.pixels)
        .map(|(a, b)| (1.0 - lambda_ssim) * a - lambda_ssim * b)
        .collect();
    (loss, Image { width: rendered.width, height: rendered.height, pixels })
}

/// Loss weights for the three-term objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_e: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_ssim: 0.2, lambda_e: 0.004, lambda_s: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        if self.lambda_ssim < 0.0 || self.lambda_ssim >= 1.0 {
            return Err(crate::Error::InvalidConfig(format!(
                "lambda_ssim must be in [0, 1), got {}",
                self.lambda_ssim
            )));
        }
        if self.lambda_e < 0.0 || self.lambda_s < 0.0 {
            return Err(crate::Error::InvalidConfig(
                "lambda_e and lambda_s must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Mean soft activation over anchors: L_s = (1/N)·Σ σ(m_n).
pub fn sparsity_loss(scores: &[f64]) -> crate::Result<f64> {
    if scores.is_empty() {
        return Err(crate::Error::InvalidConfig("sparsity loss over empty anchor set".into()));
    }
    let sig = |x: f64| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    Ok(scores.iter().map(|&m| sig(m)).sum::<f64>() / scores.len() as f64)
}

/// Differentiable [`sparsity_loss`] over an [N,1] score node.
pub fn sparsity_loss_node(
    tape: &mut crate::autodiff::Tape,
    scores: crate::autodiff::Node,
) -> crate::Result<crate::autodiff::Node> {
    let soft = tape.sigmoid(scores)?;
    tape.mean(soft)
}

/// L = L_r + λ_e·L_e + λ_s·L_s.
pub fn total_loss(render_l: f64, entropy_l: f64, sparsity_l: f64, w: &LossWeights) -> f64 {
    render_l + w.lambda_e * entropy_l + w.lambda_s * sparsity_l
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 100 dB
/// so exact reconstructions report a finite sentinel.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.pixels.len(), b.pixels.len());
    let n = a.pixels.len() as f64;
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return 100.0;
    }
    (-10.0 * mse.log10()).min(100.0)
}
