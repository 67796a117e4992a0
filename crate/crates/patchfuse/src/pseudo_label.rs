//! From patch scores to pixel-level pseudo masks.
//!
//! The patch-grid score map is bilinearly upsampled to image resolution, a
//! fixed pseudo-score gives the background channel, a per-pixel argmax
//! produces the baseline pseudo mask, and a fully connected CRF with
//! Gaussian spatial and bilateral kernels sharpens it by mean-field
//! iteration. Message passing is exact brute force over all pixel pairs:
//! desk-scale images are small enough that correctness beats speed.

use crate::tensor::{Tensor, TensorError};
use std::io::Write as _;
use std::path::Path;

/// Label value reserved for pixels excluded from evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class probabilities `[H, W, C+1]`; channel 0 is background.
/// Every pixel's vector sums to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    tensor: Tensor,
}

impl ProbMap {
    pub fn new(tensor: Tensor) -> Result<Self, TensorError> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[2] < 2 {
            return Err(TensorError::contract(
                "ProbMap",
                format!("expected [H, W, C+1] with C >= 1, got {shape:?}"),
            ));
        }
        let channels = shape[2];
        for (i, pixel) in tensor.values().chunks_exact(channels).enumerate() {
            let total: f64 = pixel.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(TensorError::contract(
                    "ProbMap",
                    format!("pixel {i} sums to {total}, not 1"),
                ));
            }
            if pixel.iter().any(|&v| v < 0.0) {
                return Err(TensorError::contract(
                    "ProbMap",
                    format!("pixel {i} has a negative probability"),
                ));
            }
        }
        Ok(ProbMap { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// Channel count including background.
    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Per-pixel integer labels: 0 background, 1..=C foreground,
/// [`IGNORE_LABEL`] ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    labels: Vec<u8>,
    height: usize,
    width: usize,
}

impl PseudoMask {
    pub fn new(labels: Vec<u8>, height: usize, width: usize) -> Result<Self, TensorError> {
        if labels.len() != height * width {
            return Err(TensorError::contract(
                "PseudoMask",
                format!(
                    "{} labels for {height}x{width} mask",
                    labels.len()
                ),
            ));
        }
        Ok(PseudoMask {
            labels,
            height,
            width,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Distinct non-ignore labels present, ascending.
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=254u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Mean-field CRF settings. Sigmas are strictly positive; kernel weights may
/// be zero (which turns the corresponding kernel off).
#[derive(Debug, Clone, PartialEq)]
pub struct CrfConfig {
    pub iterations: usize,
    /// Stddev of the spatial (smoothness) kernel, in pixels.
    pub spatial_sigma: f64,
    /// Spatial stddev of the bilateral (appearance) kernel, in pixels.
    pub bilateral_sigma_xy: f64,
    /// Color stddev of the bilateral kernel, in [0, 1] intensity units.
    pub bilateral_sigma_rgb: f64,
    pub spatial_weight: f64,
    pub bilateral_weight: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            iterations: 10,
            spatial_sigma: 3.0,
            bilateral_sigma_xy: 32.0,
            bilateral_sigma_rgb: 0.25,
            spatial_weight: 3.0,
            bilateral_weight: 5.0,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.iterations == 0 {
            return Err(TensorError::contract("CrfConfig", "iterations must be >= 1"));
        }
        for (name, v) in [
            ("spatial_sigma", self.spatial_sigma),
            ("bilateral_sigma_xy", self.bilateral_sigma_xy),
            ("bilateral_sigma_rgb", self.bilateral_sigma_rgb),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TensorError::contract(
                    "CrfConfig",
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        for (name, v) in [
            ("spatial_weight", self.spatial_weight),
            ("bilateral_weight", self.bilateral_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TensorError::contract(
                    "CrfConfig",
                    format!("{name} must be non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Channel-wise separable bilinear upsampling of a `[gh, gw, C]` grid to
/// `(height, width)`, half-pixel-centered (align-corners false). Constant
/// inputs map to constants.
pub fn upsample_bilinear(
    grid: &Tensor,
    height: usize,
    width: usize,
) -> Result<Tensor, TensorError> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(TensorError::contract(
            "upsample_bilinear",
            format!("expected [gh, gw, C], got {shape:?}"),
        ));
    }
    let (gh, gw, channels) = (shape[0], shape[1], shape[2]);
    if gh == 0 || gw == 0 {
        return Err(TensorError::contract("upsample_bilinear", "empty grid"));
    }
    if height == 0 || width == 0 {
        return Err(TensorError::contract(
            "upsample_bilinear",
            "target dimensions must be positive",
        ));
    }
    let src = grid.values();
    let mut out = vec![0.0; height * width * channels];
    let scale_y = gh as f64 / height as f64;
    let scale_x = gw as f64 / width as f64;
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (gh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let fy = sy - y0 as f64;
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (gw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let fx = sx - x0 as f64;
            let dst = (y * width + x) * channels;
            for c in 0..channels {
                let v00 = src[(y0 * gw + x0) * channels + c];
                let v01 = src[(y0 * gw + x1) * channels + c];
                let v10 = src[(y1 * gw + x0) * channels + c];
                let v11 = src[(y1 * gw + x1) * channels + c];
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out[dst + c] = top + (bottom - top) * fy;
            }
        }
    }
    Tensor::new(out, &[height, width, channels])
}

/// Attach a background channel with fixed pseudo-score `tau` and renormalize
/// per pixel: `[H, W, C] -> [H, W, C+1]` with background at channel 0.
/// A foreground maximum exactly equal to `tau` loses to background, because
/// the later argmax breaks ties toward the lower channel.
pub fn make_probmap(upsampled: &Tensor, tau: f64) -> Result<ProbMap, TensorError> {
    let shape = upsampled.shape();
    if shape.len() != 3 {
        return Err(TensorError::contract(
            "make_probmap",
            format!("expected [H, W, C], got {shape:?}"),
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TensorError::contract(
            "make_probmap",
            format!("tau must lie in (0, 1), got {tau}"),
        ));
    }
    if upsampled.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(TensorError::contract(
            "make_probmap",
            "scores must lie in [0, 1]",
        ));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; h * w * (c + 1)];
    for (pixel, src) in upsampled.values().chunks_exact(c).enumerate() {
        let dst = pixel * (c + 1);
        let total = tau + src.iter().sum::<f64>();
        out[dst] = tau / total;
        for (k, &v) in src.iter().enumerate() {
            out[dst + 1 + k] = v / total;
        }
    }
    ProbMap::new(Tensor::new(out, &[h, w, c + 1])?)
}

/// Per-pixel argmax over all channels; ties break toward the lower channel
/// index (background first).
pub fn argmax_mask(pm: &ProbMap) -> PseudoMask {
    let channels = pm.channels();
    let labels = pm
        .tensor()
        .values()
        .chunks_exact(channels)
        .map(|pixel| {
            let mut best = 0usize;
            for (k, &v) in pixel.iter().enumerate() {
                if v > pixel[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    PseudoMask::new(labels, pm.height(), pm.width()).expect("probmap geometry is consistent")
}

/// Mean-field inference over a fully connected CRF with Gaussian spatial and
/// bilateral pairwise kernels and Potts compatibility. The input probability
/// map provides the unary potentials; `image` must be `[H, W, 3]` with
/// values in `[0, 1]`. Exact brute-force message passing; deterministic.
pub fn crf_refine(
    pm: &ProbMap,
    image: &Tensor,
    cfg: &CrfConfig,
) -> Result<ProbMap, TensorError> {
    cfg.validate()?;
    let (h, w, channels) = (pm.height(), pm.width(), pm.channels());
    if image.shape() != [h, w, 3] {
        return Err(TensorError::ShapeMismatch {
            op: "crf_refine",
            lhs: image.shape().to_vec(),
            rhs: vec![h, w, 3],
        });
    }
    let n = h * w;
    let rgb = image.values();

    // Unaries: negative log of the input probabilities (clamped).
    let log_unary: Vec<f64> = pm
        .tensor()
        .values()
        .iter()
        .map(|&p| p.max(1e-12).ln())
        .collect();

    // Both kernels decay with squared pixel distance; precompute those
    // factors per (|dy|, |dx|) offset so each pair costs one exp (color).
    let inv2_s = 1.0 / (2.0 * cfg.spatial_sigma * cfg.spatial_sigma);
    let inv2_bxy = 1.0 / (2.0 * cfg.bilateral_sigma_xy * cfg.bilateral_sigma_xy);
    let inv2_brgb = 1.0 / (2.0 * cfg.bilateral_sigma_rgb * cfg.bilateral_sigma_rgb);
    let mut spatial_table = vec![0.0; h * w];
    let mut bilateral_xy_table = vec![0.0; h * w];
    for dy in 0..h {
        for dx in 0..w {
            let d2 = (dy * dy + dx * dx) as f64;
            spatial_table[dy * w + dx] = (-d2 * inv2_s).exp();
            bilateral_xy_table[dy * w + dx] = (-d2 * inv2_bxy).exp();
        }
    }
    let kernel = |i: usize, j: usize| -> f64 {
        let (yi, xi) = (i / w, i % w);
        let (yj, xj) = (j / w, j % w);
        let off = (yi.abs_diff(yj)) * w + (xi.abs_diff(xj));
        let mut k = cfg.spatial_weight * spatial_table[off];
        if cfg.bilateral_weight > 0.0 {
            let (ri, rj) = (&rgb[i * 3..i * 3 + 3], &rgb[j * 3..j * 3 + 3]);
            let dc2: f64 = ri
                .iter()
                .zip(rj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            k += cfg.bilateral_weight * bilateral_xy_table[off] * (-dc2 * inv2_brgb).exp();
        }
        k
    };

    // Materialize the pair matrix when it fits comfortably; otherwise
    // recompute kernel values every iteration.
    let cached: Option<Vec<f64>> = if n * n <= 64_000_000 / 8 {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let k = kernel(i, j);
                m[i * n + j] = k;
                m[j * n + i] = k;
            }
        }
        Some(m)
    } else {
        None
    };
    let self_weight = cfg.spatial_weight + cfg.bilateral_weight;

    let mut q: Vec<f64> = pm.tensor().values().to_vec();
    let mut messages = vec![0.0; n * channels];
    for _ in 0..cfg.iterations {
        // messages[i][l] = sum_{j != i} k(i, j) q[j][l]
        match &cached {
            Some(matrix) => {
                messages.iter_mut().for_each(|m| *m = 0.0);
                for i in 0..n {
                    let row = &matrix[i * n..(i + 1) * n];
                    let out = &mut messages[i * channels..(i + 1) * channels];
                    for (j, &k) in row.iter().enumerate() {
                        let qj = &q[j * channels..(j + 1) * channels];
                        for (o, &p) in out.iter_mut().zip(qj) {
                            *o += k * p;
                        }
                    }
                }
            }
            None => {
                messages.iter_mut().for_each(|m| *m = 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = kernel(i, j);
                        let qj = &q[j * channels..(j + 1) * channels];
                        let out = &mut messages[i * channels..(i + 1) * channels];
                        for (o, &p) in out.iter_mut().zip(qj) {
                            *o += k * p;
                        }
                    }
                }
            }
        }
        // Potts update: a label is penalized by the mass of all other
        // labels in the neighborhood; self-contribution is excluded.
        for i in 0..n {
            let base = i * channels;
            let mut total_message = 0.0;
            for l in 0..channels {
                messages[base + l] -= self_weight * q[base + l];
                total_message += messages[base + l];
            }
            let mut max_logit = f64::NEG_INFINITY;
            let mut logits = vec![0.0; channels];
            for l in 0..channels {
                let penalty = total_message - messages[base + l];
                logits[l] = log_unary[base + l] - penalty;
                max_logit = max_logit.max(logits[l]);
            }
            let mut norm = 0.0;
            for l in 0..channels {
                let e = (logits[l] - max_logit).exp();
                q[base + l] = e;
                norm += e;
            }
            for l in 0..channels {
                q[base + l] /= norm;
            }
        }
    }
    ProbMap::new(Tensor::new(q, &[h, w, channels])?)
}

/// Write a mask as an 8-bit single-channel PNG.
pub fn save_mask(path: &Path, mask: &PseudoMask) -> Result<(), crate::error::Error> {
    let img = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.labels().to_vec(),
    )
    .expect("mask buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Read a mask written by [`save_mask`] (any 8-bit single-channel image).
pub fn load_mask(path: &Path) -> Result<PseudoMask, crate::error::Error> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(crate::error::Error::Data(format!(
                "mask {} is not 8-bit single-channel (got {:?})",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(PseudoMask::new(gray.into_raw(), h, w).expect("buffer matches dimensions"))
}

/// Write the palette sidecar naming every label value used in the masks.
pub fn save_palette(path: &Path, class_names: &[String]) -> Result<(), crate::error::Error> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "0 background")?;
    for (i, name) in class_names.iter().enumerate() {
        writeln!(file, "{} {name}", i + 1)?;
    }
    writeln!(file, "{IGNORE_LABEL} ignore")?;
    Ok(())
}
