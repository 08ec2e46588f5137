//! Class-conditional synthetic shape images: a separable desk-scale stand-in
//! for the usual image benchmarks.

use super::{DataError, Dataset, Result};
use crate::numkit::{streams, Rng, Tensor};

const FOREGROUND: f64 = 0.85;
const BACKGROUND: f64 = 0.08;
const NOISE_SD: f64 = 0.1;

/// Generate `n` single-channel images of `classes` shape families (bars,
/// cross, ring, disk, checkerboard, stripes, frame, corner, x-cross), with
/// per-pixel gaussian noise, clamped to [0, 1] and quantized to the u8 grid so
/// IDX round-trips are exact. Deterministic under `seed`.
pub fn synth_shapes(n: usize, classes: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(DataError::InvalidSpec(format!(
            "classes must be in 2..=10, got {classes}"
        )));
    }
    if height < 8 || width < 8 {
        return Err(DataError::InvalidSpec(format!(
            "images must be at least 8x8, got {height}x{width}"
        )));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::new(seed, streams::synth(i as u64));
        let class = i % classes;
        let jy = rng.below(3) as isize - 1;
        let jx = rng.below(3) as isize - 1;
        let mut data = vec![BACKGROUND; height * width];
        for y in 0..height {
            for x in 0..width {
                let sy = y as isize - jy;
                let sx = x as isize - jx;
                if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                    continue;
                }
                if shape_mask(class, sy as usize, sx as usize, height, width) {
                    data[y * width + x] = FOREGROUND;
                }
            }
        }
        for v in &mut data {
            let noisy = (*v + rng.gauss(0.0, NOISE_SD)).clamp(0.0, 1.0);
            *v = (noisy * 255.0).round() / 255.0;
        }
        images.push(
            Tensor::new(vec![height, width, 1], data)
                .map_err(|e| DataError::Invalid(e.to_string()))?,
        );
        labels.push(class);
    }
    Dataset::new(images, labels, classes)
}

fn shape_mask(class: usize, y: usize, x: usize, h: usize, w: usize) -> bool {
    let cy = h as f64 / 2.0 - 0.5;
    let cx = w as f64 / 2.0 - 0.5;
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    let r = (dy * dy + dx * dx).sqrt();
    let band_h = (h / 4).max(2);
    let band_w = (w / 4).max(2);
    match class {
        // horizontal bar
        0 => y >= h / 2 - band_h / 2 && y < h / 2 + band_h.div_ceil(2),
        // vertical bar
        1 => x >= w / 2 - band_w / 2 && x < w / 2 + band_w.div_ceil(2),
        // cross
        2 => {
            shape_mask(0, y, x, h, w) || shape_mask(1, y, x, h, w)
        }
        // ring
        3 => {
            let outer = h.min(w) as f64 * 0.42;
            let inner = h.min(w) as f64 * 0.24;
            r <= outer && r >= inner
        }
        // solid disk
        4 => r <= h.min(w) as f64 * 0.28,
        // checkerboard
        5 => ((y / band_h.max(1)) + (x / band_w.max(1))) % 2 == 0,
        // main diagonal band
        6 => {
            let d = y as f64 / h as f64 - x as f64 / w as f64;
            d.abs() <= 0.18
        }
        // frame
        7 => y < 2 || x < 2 || y >= h - 2 || x >= w - 2,
        // corner square
        8 => y < h / 2 && x < w / 2,
        // anti-diagonal band
        9 => {
            let d = y as f64 / h as f64 + x as f64 / w as f64 - 1.0;
            d.abs() <= 0.18
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_samples_gives_empty_dataset() {
        let ds = synth_shapes(0, 4, 8, 8, 1).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn same_seed_is_deterministic() {
        let a = synth_shapes(20, 4, 12, 12, 7).unwrap();
        let b = synth_shapes(20, 4, 12, 12, 7).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(synth_shapes(4, 1, 8, 8, 0).is_err());
        assert!(synth_shapes(4, 11, 8, 8, 0).is_err());
        assert!(synth_shapes(4, 3, 4, 8, 0).is_err());
    }

    #[test]
    fn classes_are_separable_by_nearest_neighbor() {
        // 1-NN sanity oracle: train on half, classify the held-out half.
        let ds = synth_shapes(200, 4, 16, 16, 21).unwrap();
        let (train, held): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| (i / 4) % 2 == 0);
        let mut correct = 0;
        for &i in &held {
            let mut best = (f64::INFINITY, 0usize);
            for &j in &train {
                let d: f64 = ds.images[i]
                    .data()
                    .iter()
                    .zip(ds.images[j].data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, ds.labels[j]);
                }
            }
            if best.1 == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / held.len() as f64;
        assert!(acc >= 0.9, "1-NN accuracy {acc} below 0.9");
    }
}
