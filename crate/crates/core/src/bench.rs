//! Timing of shared-trunk encoding against per-patch trunk recomputation.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fisher::fisher_layer_forward;
use crate::net::FisherNet;
use crate::patches::Rect;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub patches: usize,
    /// Median seconds per image encoding with one trunk pass.
    pub shared_secs: f64,
    /// Median seconds per image encoding with one trunk pass per patch.
    pub per_patch_secs: f64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.per_patch_secs / self.shared_secs
    }

    pub fn csv(&self) -> String {
        format!(
            "patches,shared_secs,per_patch_secs,speedup\n{},{},{},{}\n",
            self.patches,
            self.shared_secs,
            self.per_patch_secs,
            self.speedup()
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Encodes `image` through the Fisher layer `repeats` times each way and
/// reports median wall-clock times. `rects` defaults to the dense grid.
pub fn bench_encoding<T: Scalar>(
    net: &FisherNet<T>,
    image: &Tensor<T>,
    rects: Option<&[Rect]>,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    let (_, h, w) = image.dims3()?;
    let rects = match rects {
        Some(r) => r.to_vec(),
        None => net.patch_rects(h, w)?,
    };
    if rects.is_empty() {
        return Err(Error::NoPatches);
    }
    let mut shared = Vec::with_capacity(repeats);
    let mut per_patch = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let x = net.descriptors(image, Some(&rects))?;
        std::hint::black_box(fisher_layer_forward(&x, &net.fisher)?);
        shared.push(t.elapsed().as_secs_f64());

        let t = Instant::now();
        let x = net.descriptors_per_patch(image, &rects)?;
        std::hint::black_box(fisher_layer_forward(&x, &net.fisher)?);
        per_patch.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        patches: rects.len(),
        shared_secs: median(shared),
        per_patch_secs: median(per_patch),
    })
}
