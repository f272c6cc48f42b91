//! Anomaly map assembly: per-level cosine-distance maps are upsampled to
//! the input resolution, summed, and Gaussian-smoothed. These steps run on
//! plain CPU arrays since they are inference-only.

use super::{ModelOutput, cosine_distance_map};
use burn::prelude::*;
use ndarray::Array2;

pub struct AnomalyMap {
    /// Smoothed sum of the per-level maps, at input resolution.
    pub combined: Array2<f32>,
    /// Upsampled (unsmoothed) map for each feature level, fine-to-coarse.
    pub per_level: Vec<Array2<f32>>,
}

/// Half-pixel-aligned bilinear resize with edge clamping.
pub fn bilinear_upsample(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = (sy - y0 as f64) as f32;
        let fx = (sx - x0 as f64) as f32;
        let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
        let bot = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Separable Gaussian blur with edge-clamped sampling; radius 3*sigma.
pub fn gaussian_blur(src: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();

    let (h, w) = src.dim();
    let mut horiz = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += src[(y, sx)] * kv;
            }
            horiz[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += horiz[(sy, x)] * kv;
            }
            out[(y, x)] = acc;
        }
    }
    out
}

fn level_maps_to_arrays<B: Backend>(map: Tensor<B, 3>) -> Vec<Array2<f32>> {
    let [b, h, w] = map.dims();
    let data: Vec<f32> = map
        .into_data()
        .convert::<f32>()
        .to_vec()
        .expect("contiguous f32 map");
    (0..b)
        .map(|i| {
            Array2::from_shape_vec((h, w), data[i * h * w..(i + 1) * h * w].to_vec()).unwrap()
        })
        .collect()
}

/// One anomaly map per batch element.
pub fn anomaly_maps_from_features<B: Backend>(
    output: &ModelOutput<B>,
    out_h: usize,
    out_w: usize,
    sigma: f64,
) -> Vec<AnomalyMap> {
    let batch = output.teacher[0].dims()[0];
    // per_level_batches[level][batch] at feature resolution
    let per_level_batches: Vec<Vec<Array2<f32>>> = output
        .teacher
        .iter()
        .zip(output.student.iter())
        .map(|(t, s)| level_maps_to_arrays(cosine_distance_map(t.clone(), s.clone())))
        .collect();

    (0..batch)
        .map(|i| {
            let per_level: Vec<Array2<f32>> = per_level_batches
                .iter()
                .map(|level| bilinear_upsample(&level[i], out_h, out_w))
                .collect();
            let mut sum = Array2::<f32>::zeros((out_h, out_w));
            for level in &per_level {
                sum += level;
            }
            AnomalyMap {
                combined: gaussian_blur(&sum, sigma),
                per_level,
            }
        })
        .collect()
}
