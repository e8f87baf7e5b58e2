//! Exact gradients of the summed squared error.
//!
//! The global pool at the end of the conv stack routes each filter's
//! gradient through a single 3x3 window, and the first pool through one
//! position per cell, so backward work is tiny next to the forward pass.

use rayon::prelude::*;

use super::{ForwardCache, Network, Sample, Workspace};
use crate::classifier::argmax_first;

/// Items per parallel work unit. Partial sums are combined in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 32;

/// Parameter-shaped gradient buffers, in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub parts: [Vec<f64>; 8],
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let p = net.params();
        Gradients {
            parts: std::array::from_fn(|i| vec![0.0; p[i].len()]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.parts
            .iter()
            .flat_map(|p| p.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.iter().copied()).collect()
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.parts.iter_mut().zip(&other.parts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Totals over a batch at fixed weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub misclassified: usize,
    pub count: usize,
    pub gradients: Gradients,
}

impl BatchStats {
    pub fn error_rate(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.misclassified as f64 / self.count as f64
        }
    }
}

impl Network {
    /// Adds one sample's gradient into `g` and returns its loss.
    pub(crate) fn accumulate(&self, input: &[f64], class: usize, cache: &ForwardCache, g: &mut Gradients) -> f64 {
        let a = &self.arch;
        let k = a.kernel;
        let [g_c1w, g_c1b, g_c2w, g_c2b, g_h_w, g_h_b, g_o_w, g_o_b] = &mut g.parts;

        let mut loss = 0.0;
        let d_out: Vec<f64> = cache
            .output
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let t = if i == class { 1.0 } else { -1.0 };
                loss += (y - t) * (y - t);
                2.0 * (y - t) * (1.0 - y * y)
            })
            .collect();

        let hidden = &cache.hidden;
        let mut d_hidden = vec![0.0; hidden.len()];
        for (o, &dz) in d_out.iter().enumerate() {
            g_o_b[o] += dz;
            let row = &self.fc_out.weights[o * hidden.len()..(o + 1) * hidden.len()];
            let g_row = &mut g_o_w[o * hidden.len()..(o + 1) * hidden.len()];
            for j in 0..hidden.len() {
                g_row[j] += dz * hidden[j];
                d_hidden[j] += dz * row[j];
            }
        }

        let pooled2 = &cache.pool2;
        let mut d_pool2 = vec![0.0; pooled2.len()];
        for (j, dh) in d_hidden.iter().enumerate() {
            let dz = dh * (1.0 - hidden[j] * hidden[j]);
            g_h_b[j] += dz;
            let row = &self.fc1.weights[j * pooled2.len()..(j + 1) * pooled2.len()];
            let g_row = &mut g_h_w[j * pooled2.len()..(j + 1) * pooled2.len()];
            for i in 0..pooled2.len() {
                g_row[i] += dz * pooled2[i];
                d_pool2[i] += dz * row[i];
            }
        }

        let p1 = a.pool1_size();
        let span2 = a.conv2_size();
        let cells2 = (span2 / a.pool2()).pow(2);
        let c1 = a.conv1_filters;
        let pooled1 = &cache.pool1;
        let mut d_pool1 = vec![0.0; pooled1.len()];
        for (i, dp) in d_pool2.iter().enumerate() {
            let dz = dp * (1.0 - pooled2[i] * pooled2[i]);
            let f = i / cells2;
            let pos = cache.pool2_arg[i] as usize;
            let (oy, ox) = (pos / span2, pos % span2);
            g_c2b[f] += dz;
            for c in 0..c1 {
                for ky in 0..k {
                    for kx in 0..k {
                        let w = ((f * c1 + c) * k + ky) * k + kx;
                        let src = (c * p1 + oy + ky) * p1 + ox + kx;
                        g_c2w[w] += dz * pooled1[src];
                        d_pool1[src] += dz * self.conv2.weights[w];
                    }
                }
            }
        }

        let n = a.input_size;
        let span1 = p1 * a.pool1;
        let cells1 = p1 * p1;
        let cin = a.input_channels;
        for (i, dp) in d_pool1.iter().enumerate() {
            if *dp == 0.0 {
                continue;
            }
            let dz = dp * (1.0 - pooled1[i] * pooled1[i]);
            let f = i / cells1;
            let pos = cache.pool1_arg[i] as usize;
            let (oy, ox) = (pos / span1, pos % span1);
            g_c1b[f] += dz;
            for c in 0..cin {
                for ky in 0..k {
                    let src = (c * n + oy + ky) * n + ox;
                    let w = ((f * cin + c) * k + ky) * k;
                    for kx in 0..k {
                        g_c1w[w + kx] += dz * input[src + kx];
                    }
                }
            }
        }
        loss
    }

    /// Summed loss, misclassification count and gradient over `batch`.
    pub fn batch_gradient(&self, batch: &[&Sample]) -> BatchStats {
        let partials: Vec<(f64, usize, Gradients)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut ws = Workspace::default();
                let mut cache = ForwardCache::default();
                let mut g = Gradients::zeros_like(self);
                let mut loss = 0.0;
                let mut wrong = 0;
                for s in chunk {
                    self.forward_cached(&s.input.values, &mut ws, &mut cache);
                    if argmax_first(&cache.output) != s.class {
                        wrong += 1;
                    }
                    loss += self.accumulate(&s.input.values, s.class, &cache, &mut g);
                }
                (loss, wrong, g)
            })
            .collect();

        let mut stats = BatchStats {
            loss: 0.0,
            misclassified: 0,
            count: batch.len(),
            gradients: Gradients::zeros_like(self),
        };
        for (loss, wrong, g) in &partials {
            stats.loss += loss;
            stats.misclassified += wrong;
            stats.gradients.add(g);
        }
        stats
    }

    /// Summed loss over `batch` without gradients.
    pub fn batch_loss(&self, batch: &[&Sample]) -> f64 {
        let mut ws = Workspace::default();
        let mut cache = ForwardCache::default();
        batch
            .iter()
            .map(|s| {
                self.forward_cached(&s.input.values, &mut ws, &mut cache);
                super::loss(&cache.output, s.class)
            })
            .sum()
    }

    /// `w <- w - rate * g` for every parameter.
    pub fn apply_step(&mut self, g: &Gradients, rate: f64) {
        for (p, d) in self.params_mut().into_iter().zip(&g.parts) {
            for (w, dw) in p.iter_mut().zip(d) {
                *w -= rate * dw;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Architecture;
    use super::*;
    use crate::frame::NormalizedImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(pool1: usize) -> Architecture {
        Architecture {
            input_size: 8,
            input_channels: 1,
            kernel: 3,
            conv1_filters: 2,
            pool1,
            conv2_filters: 2,
            hidden: 3,
            outputs: 4,
        }
    }

    fn sample(arch: &Architecture, seed: u64, class: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = arch.input_size * arch.input_size * arch.input_channels;
        Sample {
            input: NormalizedImage {
                width: arch.input_size,
                height: arch.input_size,
                channels: arch.input_channels,
                values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                mean: 0.0,
                std_dev: 1.0,
            },
            class,
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_item_gradients() {
        let arch = tiny(2);
        let net = Network::random(arch, 3, 0.5).unwrap();
        let items: Vec<Sample> = (0..70).map(|i| sample(&arch, i, (i % 4) as usize)).collect();
        let refs: Vec<&Sample> = items.iter().collect();
        let whole = net.batch_gradient(&refs);

        let mut manual = Gradients::zeros_like(&net);
        let mut loss = 0.0;
        for s in &items {
            let one = net.batch_gradient(&[s]);
            manual.add(&one.gradients);
            loss += one.loss;
        }
        assert!((whole.loss - loss).abs() < 1e-9);
        assert!((whole.loss - net.batch_loss(&refs)).abs() < 1e-9);
        for (a, b) in whole.gradients.flat().iter().zip(manual.flat()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn step_against_gradient_lowers_loss() {
        let arch = tiny(1);
        let mut net = Network::random(arch, 11, 0.5).unwrap();
        let items: Vec<Sample> = (0..8).map(|i| sample(&arch, 50 + i, (i % 4) as usize)).collect();
        let refs: Vec<&Sample> = items.iter().collect();
        let before = net.batch_gradient(&refs);
        net.apply_step(&before.gradients, 1e-3);
        assert!(net.batch_loss(&refs) < before.loss);
    }
}
