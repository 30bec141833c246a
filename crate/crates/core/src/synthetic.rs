//! Procedural test scenes: shaded backgrounds with discs, bars and stripes.
//! Used for smoke tests and small end-to-end experiments.

use rand::Rng;

use crate::image::ImagePlane;
use crate::rng::{substream, GLOBAL_STREAM};

enum Shape {
    Disc {
        cy: f64,
        cx: f64,
        r: f64,
        v: f64,
    },
    Bar {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
        v: f64,
    },
    Stripes {
        cy: f64,
        cx: f64,
        r: f64,
        angle: f64,
        period: f64,
        v: f64,
    },
}

/// Soft inside/outside transition over about one pixel.
fn edge(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// A grayscale scene in [0, 255], fully determined by `seed`.
pub fn scene(width: usize, height: usize, seed: u64) -> ImagePlane {
    let mut rng = substream(seed, 0x5CE7E, GLOBAL_STREAM);
    let (w, h) = (width as f64, height as f64);
    let base = rng.random_range(60.0..190.0);
    let gx = rng.random_range(-60.0..60.0) / w.max(1.0);
    let gy = rng.random_range(-60.0..60.0) / h.max(1.0);
    let n_shapes = rng.random_range(6..12);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let v = rng.random_range(0.0..255.0);
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc {
                cy,
                cx,
                r: rng.random_range(0.05..0.3) * w.min(h),
                v,
            },
            1 => {
                let (dy, dx) = (rng.random_range(0.05..0.4) * h, rng.random_range(0.05..0.4) * w);
                Shape::Bar {
                    y0: cy - dy,
                    x0: cx - dx,
                    y1: cy + dy,
                    x1: cx + dx,
                    v,
                }
            }
            _ => Shape::Stripes {
                cy,
                cx,
                r: rng.random_range(0.1..0.35) * w.min(h),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                period: rng.random_range(3.0..9.0),
                v,
            },
        };
        shapes.push(shape);
    }
    ImagePlane::from_fn(width, height, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut val = base + gx * x + gy * y;
        for s in &shapes {
            match *s {
                Shape::Disc { cy, cx, r, v } => {
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r;
                    let a = edge(d);
                    val = (1.0 - a) * val + a * v;
                }
                Shape::Bar { y0, x0, y1, x1, v } => {
                    let d = (y0 - y).max(y - y1).max(x0 - x).max(x - x1);
                    let a = edge(d);
                    val = (1.0 - a) * val + a * v;
                }
                Shape::Stripes {
                    cy,
                    cx,
                    r,
                    angle,
                    period,
                    v,
                } => {
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r;
                    let t = (x - cx) * angle.cos() + (y - cy) * angle.sin();
                    let wave = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * t / period).sin();
                    let a = edge(d) * wave;
                    val = (1.0 - a) * val + a * v;
                }
            }
        }
        val.clamp(0.0, 255.0)
    })
}
