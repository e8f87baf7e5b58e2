//! Grayscale conversion, area decimation, histogram equalization and
//! per-image z-score normalization.

use crate::error::{Error, Result};
use crate::frame::{EyeFrame, GrayImage, NormalizedImage};

/// Side length the CNN consumes.
pub const CNN_INPUT_SIZE: u32 = 64;

/// Lower bound on the standard deviation used by [`normalize`]; constant
/// images therefore normalize to all zeros.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Rec. 601 luma in integer thousandths, rounded half up. Integer weights
/// summing to exactly 1000 make a uniform +k on all channels come out as +k.
pub fn to_grayscale(frame: &EyeFrame) -> GrayImage {
    let data = frame
        .as_raw()
        .chunks_exact(3)
        .map(|p| {
            let y = (299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000;
            y as u8
        })
        .collect();
    GrayImage::new(frame.width(), frame.height(), data).expect("dimensions carried over")
}

/// Per-axis area weights: output cell `o` covers source interval
/// `[o * src / dst, (o + 1) * src / dst)`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = hi.min(s as f64 + 1.0) - lo.max(s as f64);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

fn resample(
    data: &[u8],
    width: usize,
    height: usize,
    channels: usize,
    tw: usize,
    th: usize,
) -> Vec<u8> {
    if width == tw && height == th {
        return data.to_vec();
    }
    let wx = area_weights(width, tw);
    let wy = area_weights(height, th);
    let mut out = Vec::with_capacity(tw * th * channels);
    let mut acc = vec![0.0f64; channels];
    for row_weights in &wy {
        for col_weights in &wx {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut total = 0.0;
            for &(sy, wyv) in row_weights {
                for &(sx, wxv) in col_weights {
                    let w = wyv * wxv;
                    total += w;
                    let base = (sy * width + sx) * channels;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += w * data[base + c] as f64;
                    }
                }
            }
            out.extend(acc.iter().map(|a| (a / total).round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

/// Box-filter resampling of an RGB frame to `target`x`target`. The identity
/// on frames already at the target size.
pub fn decimate(frame: &EyeFrame, target: u32) -> EyeFrame {
    let data = resample(
        frame.as_raw(),
        frame.width() as usize,
        frame.height() as usize,
        3,
        target as usize,
        target as usize,
    );
    EyeFrame::from_rgb(target, target, data)
        .expect("target size is at least 3")
        .with_side(frame.eye_side)
        .with_index(frame.frame_index)
}

pub fn decimate_gray(img: &GrayImage, width: u32, height: u32) -> GrayImage {
    let data = resample(
        img.as_raw(),
        img.width() as usize,
        img.height() as usize,
        1,
        width as usize,
        height as usize,
    );
    GrayImage::new(width, height, data).expect("non-empty target")
}

/// Classic CDF-based histogram equalization:
/// `h(v) = round((cdf(v) - cdf_min) / (N - cdf_min) * 255)`.
/// Constant images come back unchanged.
pub fn hist_equalize(img: &GrayImage) -> GrayImage {
    let mut hist = [0usize; 256];
    for &v in img.as_raw() {
        hist[v as usize] += 1;
    }
    let n = img.as_raw().len();
    let mut cdf = [0usize; 256];
    let mut running = 0;
    for (v, &count) in hist.iter().enumerate() {
        running += count;
        cdf[v] = running;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if cdf_min == n {
        return img.clone();
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for v in 0..256 {
        let num = cdf[v].saturating_sub(cdf_min) as f64;
        lut[v] = (num / denom * 255.0).round() as u8;
    }
    img.map(|v| lut[v as usize])
}

fn normalize_values(channels: usize, width: usize, height: usize, chw: Vec<f64>) -> NormalizedImage {
    let n = chw.len() as f64;
    let mean = chw.iter().sum::<f64>() / n;
    let var = chw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std_dev = var.sqrt().max(SIGMA_FLOOR);
    let values = chw.into_iter().map(|v| (v - mean) / std_dev).collect();
    NormalizedImage {
        width,
        height,
        channels,
        values,
        mean,
        std_dev,
    }
}

/// `(I - mean) / sigma` with scalar per-image statistics over all channels,
/// laid out channel-major.
pub fn normalize(frame: &EyeFrame) -> NormalizedImage {
    let w = frame.width() as usize;
    let h = frame.height() as usize;
    let raw = frame.as_raw();
    let mut chw = vec![0.0; raw.len()];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            chw[c * w * h + i] = px[c] as f64;
        }
    }
    normalize_values(3, w, h, chw)
}

pub fn normalize_gray(img: &GrayImage) -> NormalizedImage {
    let values = img.as_raw().iter().map(|&v| v as f64).collect();
    normalize_values(1, img.width() as usize, img.height() as usize, values)
}

/// Normalizes raw real-valued samples (single channel).
pub fn normalize_slice(width: usize, height: usize, values: &[f64]) -> Result<NormalizedImage> {
    if values.is_empty() || values.len() != width * height {
        return Err(Error::BufferLength {
            expected: width * height,
            actual: values.len(),
        });
    }
    Ok(normalize_values(1, width, height, values.to_vec()))
}

/// The CNN input contract: decimate to 64x64, then z-score normalize.
pub fn prepare_cnn_input(frame: &EyeFrame) -> NormalizedImage {
    normalize(&decimate(frame, CNN_INPUT_SIZE))
}
