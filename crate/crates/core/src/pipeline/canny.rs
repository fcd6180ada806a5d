//! Canny edge detector: Gaussian smoothing (σ = 1.4), Sobel gradients,
//! non-maximum suppression along the quantised gradient direction and
//! double-threshold hysteresis.
//!
//! Thresholds are in units of Sobel magnitude on a `[0, 1]` luma plane; a
//! hard unit step has a peak magnitude of roughly 1.1 after smoothing.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{Mask, Plane};

pub const SIGMA: f64 = 1.4;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Vec<f64> {
    let (w, h) = (p.width, p.height);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * f64::from(p.data[y * w + clamp_idx(x as i64 + j as i64 - r, w)]))
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp_idx(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Sobel `(gx, gy)` with replicated borders; `gy` grows downwards.
pub fn sobel(v: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: i64, y: i64| v[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Neighbour offset along the gradient, quantised to 0°, 45°, 90°, 135°.
fn direction(gx: f64, gy: f64) -> (i64, i64) {
    let mut a = gy.atan2(gx).to_degrees();
    if a < 0.0 {
        a += 180.0;
    }
    if !(22.5..157.5).contains(&a) {
        (1, 0)
    } else if a < 67.5 {
        (1, 1)
    } else if a < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Thinned gradient magnitude: zero wherever a pixel is not a ridge.
pub fn non_max_suppression(mag: &[f64], gx: &[f64], gy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let m = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v == 0.0 {
                continue;
            }
            let (dx, dy) = direction(gx[i], gy[i]);
            // Strict on one side, non-strict on the other: a two-pixel
            // plateau keeps exactly one pixel.
            if v > m(x - dx, y - dy) && v >= m(x + dx, y + dy) {
                out[i] = v;
            }
        }
    }
    out
}

/// 8-connected hysteresis: strong pixels seed, weak pixels extend.
pub fn hysteresis(thin: &[f64], w: usize, h: usize, low: f64, high: f64) -> Mask {
    let mut edges = Mask::new(w, h);
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high && v > 0.0 {
            edges.set(i % w, i / w, true);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges.get(nx as usize, ny as usize) && thin[j] >= low && thin[j] > 0.0 {
                    edges.set(nx as usize, ny as usize, true);
                    queue.push_back(j);
                }
            }
        }
    }
    edges
}

pub fn canny_edges(image: &Plane, low: f64, high: f64) -> Result<Mask> {
    if !(low.is_finite() && high.is_finite() && 0.0 <= low && low < high) {
        return Err(Error::invalid(format!(
            "canny thresholds need 0 <= low < high, got low={low} high={high}"
        )));
    }
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(Error::invalid("canny on an empty image"));
    }
    let smooth = gaussian_blur(image, SIGMA);
    let (gx, gy) = sobel(&smooth, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let thin = non_max_suppression(&mag, &gx, &gy, w, h);
    Ok(hysteresis(&thin, w, h, low, high))
}

/// Random threshold pair as used for canny conditioning.
pub fn random_thresholds<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let low = rng.random_range(0.05..0.2);
    let high = low + rng.random_range(0.1..0.4);
    (low, high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step(w: usize, h: usize, at: usize) -> Plane {
        Plane::from_fn(w, h, |x, _| if x < at { 0.0 } else { 1.0 })
    }

    #[test]
    fn constant_image_has_no_edges() {
        let p = Plane::from_fn(16, 16, |_, _| 0.4);
        assert!(canny_edges(&p, 0.01, 0.02).unwrap().is_empty());
    }

    #[test]
    fn vertical_step_gives_one_pixel_line() {
        let p = step(32, 20, 16);
        let e = canny_edges(&p, 0.1, 0.3).unwrap();
        for y in 0..20 {
            let cols: Vec<usize> = (0..32).filter(|&x| e.get(x, y)).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            assert!(cols[0] == 15 || cols[0] == 16);
        }
        let col0: Vec<usize> = (0..32).filter(|&x| e.get(x, 0)).collect();
        assert!((0..20).all(|y| e.get(col0[0], y)));
    }

    #[test]
    fn raising_low_never_adds_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..24 * 24).map(|_| rng.random::<f32>()).collect();
        let p = Plane::from_fn(24, 24, |x, y| noise[y * 24 + x]);
        let p2 = Plane::from_fn(24, 24, |x, y| if (x / 6 + y / 6) % 2 == 0 { 0.2 } else { 0.8 });
        for img in [p, p2] {
            let mut prev: Option<Mask> = None;
            for low in [0.0, 0.05, 0.1, 0.2, 0.3] {
                let e = canny_edges(&img, low, 0.5).unwrap();
                if let Some(pm) = &prev {
                    assert!(e.is_subset_of(pm).unwrap());
                }
                prev = Some(e);
            }
        }
    }

    #[test]
    fn degenerate_thresholds_rejected() {
        let p = step(8, 8, 4);
        assert!(canny_edges(&p, 0.3, 0.3).is_err());
        assert!(canny_edges(&p, -0.1, 0.3).is_err());
        assert!(canny_edges(&p, 0.1, f64::NAN).is_err());
    }
}
