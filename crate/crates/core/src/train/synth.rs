//! Synthetic optical/SAR pairs.
//!
//! Both views share one scene: 2 to 6 convex polygons over a smooth
//! background. The optical view gets a colour per polygon with a linear
//! shading ramp; the SAR view is a dark background with bright targets,
//! multiplied by unit-mean gamma speckle of shape [`SPECKLE_LOOKS`].

use rand_distr::{Distribution, Gamma};

use crate::rng::{derive_seed, Xoshiro256pp};
use crate::tensor::Tensor;

/// Number of looks of the speckle model (gamma shape; scale is its inverse).
pub const SPECKLE_LOOKS: f64 = 4.0;

/// A rendered scene with the ground-truth polygon support.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub optical: Tensor,
    pub sar: Tensor,
    /// `true` inside any polygon, row-major `H×W`.
    pub support: Vec<bool>,
}

struct Polygon {
    pts: Vec<(f64, f64)>,
    centre: (f64, f64),
    radius: f64,
}

impl Polygon {
    fn random(size: usize, rng: &mut Xoshiro256pp) -> Self {
        let s = size as f64;
        let centre = (
            rng.uniform_in(0.15, 0.85) * s,
            rng.uniform_in(0.15, 0.85) * s,
        );
        let (rx, ry) = (
            rng.uniform_in(0.12, 0.25) * s,
            rng.uniform_in(0.12, 0.25) * s,
        );
        let k = rng.int_in(3, 7);
        // Jittered even spacing keeps vertices in angular order without slivers.
        let step = std::f64::consts::TAU / k as f64;
        let phase = rng.uniform_in(0.0, step);
        let angles: Vec<f64> = (0..k)
            .map(|i| phase + step * (i as f64 + rng.uniform_in(-0.3, 0.3)))
            .collect();
        let pts = angles
            .iter()
            .map(|a| (centre.0 + rx * a.cos(), centre.1 + ry * a.sin()))
            .collect();
        Self {
            pts,
            centre,
            radius: rx.max(ry),
        }
    }

    /// Points on an ellipse in angular order form a convex polygon, so a
    /// point is inside iff it is on the same side of every edge.
    fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.pts.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let (ax, ay) = self.pts[i];
            let (bx, by) = self.pts[(i + 1) % n];
            let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            if cross != 0.0 {
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    return false;
                }
            }
        }
        true
    }
}

fn texture(size: usize, rng: &mut Xoshiro256pp) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_in(-0.3, 0.3),
                rng.uniform_in(-0.3, 0.3),
                rng.uniform_in(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            out.push(v / 3.0);
        }
    }
    out
}

/// Renders the scene for `seed` at `size×size`.
pub fn synth_scene(seed: u64, size: usize) -> Scene {
    let mut rng = Xoshiro256pp::seed_from(derive_seed(seed, &[0x5C3E]));
    let plane = size * size;
    let tex = texture(size, &mut rng);
    let base: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.08, 0.2)).collect();
    let mut optical = vec![0.0; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            optical[c * plane + i] = base[c] + 0.05 * tex[i];
        }
    }
    let mut sar_clean: Vec<f64> = tex.iter().map(|t| 0.15 + 0.03 * t).collect();
    let mut support = vec![false; plane];

    let count = rng.int_in(2, 6);
    for _ in 0..count {
        let poly = Polygon::random(size, &mut rng);
        let rgb: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.55, 0.95)).collect();
        let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
        let (gx, gy) = (angle.cos(), angle.sin());
        let bright = rng.uniform_in(0.6, 0.85);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !poly.contains(px, py) {
                    continue;
                }
                let i = y * size + x;
                support[i] = true;
                let ramp = ((px - poly.centre.0) * gx + (py - poly.centre.1) * gy) / poly.radius;
                let shade = 0.9 + 0.1 * ramp.clamp(-1.0, 1.0);
                for c in 0..3 {
                    optical[c * plane + i] = rgb[c] * shade;
                }
                sar_clean[i] = bright;
            }
        }
    }

    let gamma = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).expect("valid gamma");
    let sar: Vec<f64> = sar_clean
        .iter()
        .map(|v| (v * gamma.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    let optical = optical.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Scene {
        optical: Tensor::new(&[3, size, size], optical).expect("optical shape"),
        sar: Tensor::new(&[1, size, size], sar).expect("sar shape"),
        support,
    }
}

/// `(optical [3, H, W], sar [1, H, W])` with values in `[0, 1]`.
pub fn synth_pair(seed: u64, size: usize) -> (Tensor, Tensor) {
    let s = synth_scene(seed, size);
    (s.optical, s.sar)
}

/// `k×k` box filter with edge clamping on a single-channel plane.
pub fn box_blur(plane: &[f64], size: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let n = size as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, n - 1);
                    let xx = (x + dx).clamp(0, n - 1);
                    acc += plane[(yy * n + xx) as usize];
                }
            }
            out[(y * n + x) as usize] = acc / (k * k) as f64;
        }
    }
    out
}

/// Intersection over union of two boolean masks.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Structure masks recovered from each view by thresholding.
pub fn structure_masks(optical: &Tensor, sar: &Tensor) -> (Vec<bool>, Vec<bool>) {
    let size = optical.shape()[1];
    let plane = size * size;
    let opt: Vec<bool> = (0..plane)
        .map(|i| (0..3).map(|c| optical.data()[c * plane + i]).sum::<f64>() / 3.0 > 0.35)
        .collect();
    let sar: Vec<bool> = box_blur(sar.data(), size, 3)
        .iter()
        .map(|&v| v > 0.40)
        .collect();
    (opt, sar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = synth_pair(3, 64);
        let b = synth_pair(3, 64);
        assert_eq!(a, b);
        assert_ne!(a, synth_pair(4, 64));
        for v in a.0.data().iter().chain(a.1.data()) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn views_share_structure() {
        for seed in 0..20 {
            let s = synth_scene(seed, 64);
            let (o, r) = structure_masks(&s.optical, &s.sar);
            assert!(iou(&o, &r) > 0.9, "seed {seed}: {}", iou(&o, &r));
            assert!(iou(&o, &s.support) > 0.95);
        }
    }
}
