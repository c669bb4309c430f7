//! Wall-clock throughput across width multipliers.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_lytnet, NetworkConfig};
use crate::tensor::Tensor;

/// Width multipliers of the reference comparison, widest first.
pub const WIDTHS: [f64; 7] = [1.4, 1.25, 1.0, 0.9375, 0.875, 0.75, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub alpha: f64,
    /// Analytic multiply-accumulates for one image.
    pub flops: u64,
    /// Fastest single-image forward pass.
    pub seconds: f64,
    pub images_per_second: f64,
}

/// Times one-image inference for each width. Runs are interleaved across
/// widths so drift in machine load hits them alike; the fastest run counts.
pub fn measure(widths: &[f64], input: (usize, usize), runs: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid("widths must be positive"));
    }
    let (h, w) = input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::<f32>::uniform([1, 3, h, w], 2.0, &mut rng);
    let nets = widths
        .iter()
        .map(|&alpha| build_lytnet::<f32>(NetworkConfig::default().with_width(alpha).with_input(h, w), seed))
        .collect::<Result<Vec<_>>>()?;
    for (net, params) in &nets {
        net.forward(params, &image)?;
    }
    let mut best = vec![f64::INFINITY; nets.len()];
    for _ in 0..runs.max(1) {
        for ((net, params), b) in nets.iter().zip(&mut best) {
            let t = Instant::now();
            net.forward(params, &image)?;
            *b = b.min(t.elapsed().as_secs_f64());
        }
    }
    Ok(widths
        .iter()
        .zip(&nets)
        .zip(best)
        .map(|((&alpha, (net, _)), seconds)| {
            log::info!("alpha {alpha}: {seconds:.4}s");
            BenchRow {
                alpha,
                flops: net.count_flops(),
                seconds,
                images_per_second: 1.0 / seconds,
            }
        })
        .collect())
}
