//! Throughput measurement: batch 1, fixed random input, wall-clock timing.

use std::time::Instant;

use patchprune::io::ImageRGB;
use patchprune::model::{Model, ModelConfig};
use patchprune::Exec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config_echo: ModelConfig,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub images_per_second: f64,
    pub latencies_ms: Vec<f64>,
    /// Counted MACs of one forward pass on the benchmark input.
    pub macs_per_image: u64,
}

impl BenchResult {
    pub fn mean_latency_ms(&self) -> f64 {
        self.latencies_ms.iter().sum::<f64>() / self.latencies_ms.len() as f64
    }

    pub fn median_latency_ms(&self) -> f64 {
        let mut v = self.latencies_ms.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

pub fn run_bench(
    model: &Model,
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<BenchResult, CliError> {
    if iters == 0 {
        return Err(CliError::Usage(
            "--iters must be at least 1 measured iteration".into(),
        ));
    }
    let image = ImageRGB::random(model.config.image_size, seed);

    let counted = Exec::counting();
    model.forward(&image, &counted)?;
    let macs_per_image = counted.macs();

    let exec = Exec::default();
    for _ in 0..warmup {
        model.forward(&image, &exec)?;
    }
    let mut latencies_ms = Vec::with_capacity(iters);
    let start = Instant::now();
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(model.forward(&image, &exec)?);
        latencies_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let total = start.elapsed().as_secs_f64();
    Ok(BenchResult {
        config_echo: model.config.clone(),
        warmup_iters: warmup,
        measured_iters: iters,
        images_per_second: iters as f64 / total,
        latencies_ms,
        macs_per_image,
    })
}
