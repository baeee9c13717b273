//! Planar image resampling on `C×H×W` tensors.

use crate::tensor::Tensor;

/// Bilinear sample of one plane; cells outside the image read as zero.
pub fn sample_zero_fill(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (ty, tx) = (y - y0, x - x0);
    let fetch = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = lerp(fetch(y0, x0), fetch(y0, x0 + 1.0), tx);
    let bottom = lerp(fetch(y0 + 1.0, x0), fetch(y0 + 1.0, x0 + 1.0), tx);
    lerp(top, bottom, ty)
}

/// Bilinear sample with coordinates clamped to the image.
pub fn sample_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
    let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
    lerp(top, bottom, ty)
}

// `a + t(b − a)` returns `a` exactly when `a == b`, so flat regions stay flat.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

/// Maps every output pixel through `src_of(y, x) → (sy, sx)` and samples it.
pub fn remap(img: &Tensor, out_h: usize, out_w: usize, zero_fill: bool, src_of: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (c, h, w) = dims(img);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = src_of(y as f64, x as f64);
                out.push(if zero_fill {
                    sample_zero_fill(plane, h, w, sy, sx)
                } else {
                    sample_clamped(plane, h, w, sy, sx)
                });
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("remap shape")
}

/// Bilinear resize with half-pixel centres.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (_, h, w) = dims(img);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    remap(img, out_h, out_w, false, |y, x| ((y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5))
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (c, h, w) = dims(img);
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        img.data()[i - x + (w - 1 - x)]
    })
}

pub fn flip_vertical(img: &Tensor) -> Tensor {
    let (c, h, w) = dims(img);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.data()[(ch * h + (h - 1 - y)) * w + x]
    })
}

/// Rotation about the image centre; uncovered corners become zero.
pub fn rotate(img: &Tensor, degrees: f64) -> Tensor {
    let (_, h, w) = dims(img);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    remap(img, h, w, true, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    })
}

/// Centre crop by `factor ≥ 1`, resized back to the original size.
pub fn zoom(img: &Tensor, factor: f64) -> Tensor {
    let (_, h, w) = dims(img);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    remap(img, h, w, true, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
}

/// Contrast about mid-grey then brightness shift, clamped to `[0, 1]`.
pub fn adjust_lighting(img: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    let data = img.data().iter().map(|v| ((v - 0.5) * (1.0 + contrast) + 0.5 + brightness).clamp(0.0, 1.0)).collect();
    Tensor::new(img.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::from_fn(&[1, 5, 6], |i| i as f64 / 30.0)
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
        assert_eq!(flip_horizontal(&img).at(&[0, 0, 0]), img.at(&[0, 0, 5]));
    }

    #[test]
    fn full_turn_matches_identity() {
        let img = ramp();
        for (a, b) in rotate(&img, 360.0).data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let img = Tensor::from_fn(&[1, 3, 3], |i| if i == 0 { 1.0 } else { 0.0 });
        let r = rotate(&img, 90.0);
        assert!((r.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.at(&[0, 0, 0]) < 1e-9);
    }

    #[test]
    fn resize_keeps_constants_and_identity() {
        let flat = Tensor::filled(&[1, 7, 9], 128.0 / 255.0);
        let small = resize(&flat, 4, 4);
        assert!(small.data().iter().all(|&v| v == 128.0 / 255.0));
        assert_eq!(resize(&ramp(), 5, 6), ramp());
    }
}
