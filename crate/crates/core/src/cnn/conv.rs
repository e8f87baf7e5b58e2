//! Direct valid convolution, blocked so the inner loops stay in registers.
//!
//! Accumulators cover `FB` filters by `XB` adjacent outputs of one row.
//! For every kernel tap the block reuses one row segment of input across
//! all `FB` filters, which keeps the loop bound by multiply-adds instead of
//! memory traffic. Columns past the last full `XB` block take a scalar path.
//!
//! On x86-64 machines with AVX2 and FMA a copy compiled for those features
//! is picked at runtime; results then differ from the portable path in the
//! last bits because the multiply-adds are fused.

use super::ConvLayer;

const XB: usize = 8;

/// Bias-free sums for the top-left `out_h`x`out_w` outputs, written
/// filter-major into `out`.
pub(crate) fn conv_sums(layer: &ConvLayer, input: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, out: &mut Vec<f64>) {
    debug_assert!(out_h + layer.kernel <= h + 1 && out_w + layer.kernel <= w + 1);
    debug_assert_eq!(input.len(), layer.in_channels * h * w);
    out.clear();
    out.resize(layer.filters * out_h * out_w, 0.0);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected just above.
        unsafe { all_blocks_fma(layer, input, h, w, out_h, out_w, out) };
        return;
    }
    all_blocks::<false>(layer, input, h, w, out_h, out_w, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn all_blocks_fma(layer: &ConvLayer, input: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, out: &mut [f64]) {
    all_blocks::<true>(layer, input, h, w, out_h, out_w, out);
}

#[inline(always)]
fn all_blocks<const FUSED: bool>(layer: &ConvLayer, input: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, out: &mut [f64]) {
    let mut f = 0;
    while f + 4 <= layer.filters {
        block::<4, FUSED>(layer, f, input, h, w, out_h, out_w, out);
        f += 4;
    }
    while f < layer.filters {
        block::<1, FUSED>(layer, f, input, h, w, out_h, out_w, out);
        f += 1;
    }
}

#[inline(always)]
fn madd<const FUSED: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FUSED {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn block<const FB: usize, const FUSED: bool>(
    layer: &ConvLayer,
    f0: usize,
    input: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    out: &mut [f64],
) {
    let k = layer.kernel;
    let taps = layer.in_channels * k * k;
    let weights: [&[f64]; FB] = std::array::from_fn(|i| &layer.weights[(f0 + i) * taps..(f0 + i + 1) * taps]);
    let plane = out_h * out_w;
    let full = out_w / XB * XB;
    for oy in 0..out_h {
        let mut x0 = 0;
        while x0 < full {
            let mut acc = [[0.0f64; XB]; FB];
            let mut t = 0;
            for c in 0..layer.in_channels {
                for ky in 0..k {
                    let row = (c * h + oy + ky) * w + x0;
                    for kx in 0..k {
                        let src: &[f64; XB] = input[row + kx..row + kx + XB].try_into().unwrap();
                        for fi in 0..FB {
                            let wv = weights[fi][t];
                            for j in 0..XB {
                                acc[fi][j] = madd::<FUSED>(wv, src[j], acc[fi][j]);
                            }
                        }
                        t += 1;
                    }
                }
            }
            for fi in 0..FB {
                let dst = (f0 + fi) * plane + oy * out_w + x0;
                out[dst..dst + XB].copy_from_slice(&acc[fi]);
            }
            x0 += XB;
        }
        for ox in full..out_w {
            let mut acc = [0.0f64; FB];
            let mut t = 0;
            for c in 0..layer.in_channels {
                for ky in 0..k {
                    let row = (c * h + oy + ky) * w + ox;
                    for kx in 0..k {
                        let v = input[row + kx];
                        for fi in 0..FB {
                            acc[fi] = madd::<FUSED>(weights[fi][t], v, acc[fi]);
                        }
                        t += 1;
                    }
                }
            }
            for fi in 0..FB {
                out[(f0 + fi) * plane + oy * out_w + ox] = acc[fi];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(layer: &ConvLayer, input: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
        let k = layer.kernel;
        let mut out = vec![0.0; layer.filters * out_h * out_w];
        for f in 0..layer.filters {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut z = 0.0;
                    for c in 0..layer.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                z += layer.weights[((f * layer.in_channels + c) * k + ky) * k + kx]
                                    * input[(c * h + oy + ky) * w + ox + kx];
                            }
                        }
                    }
                    out[(f * out_h + oy) * out_w + ox] = z;
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_naive_loops(
            filters in 1usize..7,
            channels in 1usize..4,
            k in 1usize..4,
            h in 4usize..14,
            w in 4usize..24,
            seed in any::<u64>(),
        ) {
            let val = |i: usize| ((crate::corpus::mix(seed, i as u64) % 2001) as f64 - 1000.0) / 500.0;
            let layer = ConvLayer {
                filters,
                in_channels: channels,
                kernel: k,
                weights: (0..filters * channels * k * k).map(val).collect(),
                bias: vec![0.0; filters],
            };
            let input: Vec<f64> = (0..channels * h * w).map(|i| val(i + 10_000)).collect();
            let (oh, ow) = (h + 1 - k, w + 1 - k);
            let mut out = Vec::new();
            conv_sums(&layer, &input, h, w, oh, ow, &mut out);
            let reference = naive(&layer, &input, h, w, oh, ow);
            for (a, b) in out.iter().zip(&reference) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // A cropped output region matches the same region of the full result.
            let (ch, cw) = (oh.div_ceil(2), ow.div_ceil(2));
            conv_sums(&layer, &input, h, w, ch, cw, &mut out);
            for f in 0..filters {
                for y in 0..ch {
                    for x in 0..cw {
                        prop_assert!((out[(f * ch + y) * cw + x] - reference[(f * oh + y) * ow + x]).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
