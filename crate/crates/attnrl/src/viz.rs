//! Attention-map normalization, heatmap colorization, alpha-blended
//! overlays, perturbation saliency maps, and portable image output
//! (binary PPM/PGM).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Saliency defaults: Gaussian blur σ_A = 3, mask σ = 5, one sample in
/// every five pixels.
pub const SIGMA_BLUR: f64 = 3.0;
pub const SIGMA_MASK: f64 = 5.0;
pub const SALIENCY_STRIDE: usize = 5;

/// Normalized attention values in [0,1] with a provenance label.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub label: String,
}

/// Interleaved RGB bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// (a − min)/(max − min); a constant input maps to all zeros.
pub fn normalize_attention(a: &Tensor) -> Result<Heatmap> {
    let s = a.shape();
    if s.len() != 2 || a.numel() == 0 {
        return Err(Error::shape(
            "normalize_attention",
            format!("expected non-empty [H, W], got {s:?}"),
        ));
    }
    let data = a.to_vec();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        data.iter().map(|&v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; data.len()]
    };
    Ok(Heatmap { values, h: s[0], w: s[1], label: String::new() })
}

/// Piecewise-linear color scale over fixed stops:
/// blue (0,0,255) → green (0,255,0) → yellow (255,255,0) → red (255,0,0)
/// at positions 0, 1/3, 2/3, 1.
pub fn colormap(heat: &Heatmap) -> RgbImage {
    let mut data = Vec::with_capacity(heat.values.len() * 3);
    for &v in &heat.values {
        let t = v.clamp(0.0, 1.0);
        let (r, g, b) = if t <= 1.0 / 3.0 {
            let u = 3.0 * t;
            (0.0, 255.0 * u, 255.0 * (1.0 - u))
        } else if t <= 2.0 / 3.0 {
            let u = 3.0 * t - 1.0;
            (255.0 * u, 255.0, 0.0)
        } else {
            let u = 3.0 * t - 2.0;
            (255.0, 255.0 * (1.0 - u), 0.0)
        };
        data.push(r.round() as u8);
        data.push(g.round() as u8);
        data.push(b.round() as u8);
    }
    RgbImage { h: heat.h, w: heat.w, data }
}

/// out = alpha·heat + (1−alpha)·frame, rounded to the nearest byte.
/// The grayscale frame is replicated across the three channels.
pub fn overlay(frame: &Tensor, heat: &RgbImage, alpha: f64) -> Result<RgbImage> {
    let s = frame.shape();
    if s.len() != 2 || s[0] != heat.h || s[1] != heat.w {
        return Err(Error::shape(
            "overlay",
            format!("frame {s:?} vs heatmap {}x{}", heat.h, heat.w),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0,1]")));
    }
    let gray = frame.to_vec();
    let mut data = Vec::with_capacity(heat.data.len());
    for (i, &g) in gray.iter().enumerate() {
        for c in 0..3 {
            let blended = alpha * heat.data[i * 3 + c] as f64 + (1.0 - alpha) * g;
            data.push(blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage { h: heat.h, w: heat.w, data })
}

/// Gaussian blur with separable kernels truncated at 3σ. Kernel weights are
/// renormalized at the borders, so a constant image blurs to itself exactly.
pub fn gaussian_blur(frame: &Tensor, sigma: f64) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 2 {
        return Err(Error::shape("gaussian_blur", format!("expected [H, W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> =
        (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let src = frame.to_vec();
    let pass = |input: &[f64], rows: usize, cols: usize, horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for y in 0..rows {
            for x in 0..cols {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let d = ki as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if sy < 0 || sy >= rows as isize || sx < 0 || sx >= cols as isize {
                        continue;
                    }
                    acc += kv * input[sy as usize * cols + sx as usize];
                    weight += kv;
                }
                out[y * cols + x] = acc / weight;
            }
        }
        out
    };
    let blurred = pass(&pass(&src, h, w, true), h, w, false);
    Tensor::from_vec(blurred, &[h, w])
}

/// Localized blur: Φ = I∘(1−M) + blur(I, σ_A)∘M with M a 2-D Gaussian
/// centered at (i, j), peak normalized to 1.
pub fn perturb(frame: &Tensor, i: usize, j: usize, sigma_blur: f64, sigma_mask: f64) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 2 || i >= s[0] || j >= s[1] {
        return Err(Error::shape(
            "perturb",
            format!("center ({i}, {j}) outside frame {s:?}"),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let blurred = gaussian_blur(frame, sigma_blur)?.to_vec();
    let src = frame.to_vec();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - i as f64;
            let dx = x as f64 - j as f64;
            let m = (-(dy * dy + dx * dx) / (2.0 * sigma_mask * sigma_mask)).exp();
            out[y * w + x] = src[y * w + x] * (1.0 - m) + blurred[y * w + x] * m;
        }
    }
    Tensor::from_vec(out, &[h, w])
}

/// Which network output the saliency metric measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencyMode {
    Policy,
    Value,
}

/// Evaluation hook: a frame (raw [H×W]) to (policy logits, baseline).
pub type EvalFn<'a> = dyn FnMut(&Tensor) -> Result<(Vec<f64>, f64)> + 'a;

/// Perturbation saliency: S(i,j) = ½‖π(I) − π(Φ(I,i,j))‖² (or the value
/// analog) sampled at every `stride`-th pixel, bilinearly interpolated in
/// between, then normalized to [0,1].
pub fn saliency_map(
    eval: &mut EvalFn,
    frame: &Tensor,
    mode: SaliencyMode,
    stride: usize,
    sigma_blur: f64,
    sigma_mask: f64,
) -> Result<Heatmap> {
    let s = frame.shape();
    if s.len() != 2 || stride == 0 {
        return Err(Error::shape(
            "saliency_map",
            format!("frame {s:?}, stride {stride}"),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let (base_logits, base_value) = eval(frame)?;
    let grid_h = h.div_ceil(stride);
    let grid_w = w.div_ceil(stride);
    let mut grid = vec![0.0; grid_h * grid_w];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let (i, j) = (gy * stride, gx * stride);
            let perturbed = perturb(frame, i, j, sigma_blur, sigma_mask)?;
            let (logits, value) = eval(&perturbed)?;
            grid[gy * grid_w + gx] = match mode {
                SaliencyMode::Policy => {
                    0.5 * base_logits
                        .iter()
                        .zip(logits.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                }
                SaliencyMode::Value => 0.5 * (base_value - value) * (base_value - value),
            };
        }
    }
    // bilinear upsample of the sampled grid back to frame resolution
    let mut full = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / stride as f64;
            let fx = x as f64 / stride as f64;
            let y0 = (fy.floor() as usize).min(grid_h - 1);
            let x0 = (fx.floor() as usize).min(grid_w - 1);
            let y1 = (y0 + 1).min(grid_h - 1);
            let x1 = (x0 + 1).min(grid_w - 1);
            let ty = fy - y0 as f64;
            let tx = fx - x0 as f64;
            let v00 = grid[y0 * grid_w + x0];
            let v01 = grid[y0 * grid_w + x1];
            let v10 = grid[y1 * grid_w + x0];
            let v11 = grid[y1 * grid_w + x1];
            full[y * w + x] = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
        }
    }
    normalize_attention(&Tensor::from_vec(full, &[h, w])?)
}

/// Nearest-neighbor upscale of a heatmap to the target resolution (used to
/// project attention maps back onto frames).
pub fn upscale_nearest(heat: &Heatmap, h: usize, w: usize) -> Heatmap {
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        let sy = y * heat.h / h;
        for x in 0..w {
            let sx = x * heat.w / w;
            values[y * w + x] = heat.values[sy * heat.w + sx];
        }
    }
    Heatmap { values, h, w, label: heat.label.clone() }
}

// ── image files ──────────────────────────────────────────────────────

/// Binary PPM (P6, maxval 255): magic, newline, "W H", newline, "255",
/// newline, then raw interleaved RGB bytes row-major.
pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", img.w, img.h)?;
    file.write_all(&img.data)?;
    Ok(())
}

/// Binary PGM (P5) for grayscale frames; values are rounded to bytes.
pub fn write_pgm(frame: &Tensor, path: &Path) -> Result<()> {
    let s = frame.shape();
    if s.len() != 2 {
        return Err(Error::shape("write_pgm", format!("expected [H, W], got {s:?}")));
    }
    let bytes: Vec<u8> =
        frame.to_vec().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{} {}\n255\n", s[1], s[0])?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Read back a binary P6/P5 file. Returns (magic, width, height, payload).
pub fn read_pnm(path: &Path) -> Result<(String, usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let header_err = || Error::Contract(format!("malformed PNM header in {}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).to_string());
    }
    if fields.len() < 4 {
        return Err(header_err());
    }
    pos += 1; // single whitespace after maxval
    let magic = fields[0].clone();
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    if fields[3] != "255" {
        return Err(header_err());
    }
    Ok((magic, w, h, raw[pos..].to_vec()))
}

#[cfg(test)]
mod tests;
