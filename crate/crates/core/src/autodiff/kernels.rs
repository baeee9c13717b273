//! Raw numeric kernels on flat row-major slices. No graph bookkeeping here.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.stride == 0 || self.kh == 0 || self.kw == 0 || self.kh > ph || self.kw > pw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (oh·ow)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, oh: usize, ow: usize, cols: &mut [f64]) {
    let ohw = oh * ow;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ohw;
                for oy in 0..oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im_acc(cols: &[f64], g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f64]) {
    let ohw = oh * ow;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ohw;
                for oy in 0..oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation: `x[N×C×H×W]`, `w[F×C×kh×kw]` → `N×F×oh×ow`.
pub fn conv2d_forward(x: &[f64], w: &[f64], batch: usize, filters: usize, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let ohw = oh * ow;
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * filters * ohw];
    let mut cols = vec![0.0; g.col_rows() * ohw];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], g, oh, ow, &mut cols);
        matmul_acc(w, &cols, &mut out[n * filters * ohw..(n + 1) * filters * ohw], filters, g.col_rows(), ohw);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    batch: usize,
    filters: usize,
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let ohw = oh * ow;
    let in_len = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * ohw];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..batch {
        let dout_n = &dout[n * filters * ohw..(n + 1) * filters * ohw];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], g, oh, ow, &mut cols);
            matmul_a_bt_acc(dout_n, &cols, dw, filters, rows, ohw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            cols.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_b_acc(w, dout_n, &mut cols, filters, rows, ohw);
            col2im_acc(&cols, g, oh, ow, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        if self.stride == 0 || self.kh == 0 || self.kw == 0 || self.kh > self.height || self.kw > self.width {
            return None;
        }
        Some(((self.height - self.kh) / self.stride + 1, (self.width - self.kw) / self.stride + 1))
    }
}

/// Max pooling; returns outputs and the flat input index chosen for each output.
/// Ties resolve to the first maximal cell in row-major order.
pub fn maxpool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let plane = g.height * g.width;
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    let mut arg = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let idx = p * plane + (oy * g.stride + i) * g.width + ox * g.stride + j;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn avgpool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let plane = g.height * g.width;
    let area = (g.kh * g.kw) as f64;
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for i in 0..g.kh {
                    let base = p * plane + (oy * g.stride + i) * g.width + ox * g.stride;
                    s += x[base..base + g.kw].iter().sum::<f64>();
                }
                out.push(s / area);
            }
        }
    }
    out
}

pub fn avgpool_backward(dout: &[f64], g: &PoolGeom, dx: &mut [f64]) {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let plane = g.height * g.width;
    let area = (g.kh * g.kw) as f64;
    for p in 0..g.planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dout[(p * oh + oy) * ow + ox] / area;
                for i in 0..g.kh {
                    let base = p * plane + (oy * g.stride + i) * g.width + ox * g.stride;
                    dx[base..base + g.kw].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
}

/// Row-wise softmax of an `n×k` score matrix, max-subtracted.
pub fn softmax_rows(scores: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        let row = &scores[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * k..(r + 1) * k];
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(row) {
            *d = (s - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

/// Per-row cross-entropy `logsumexp(s) − s_y`, max-subtracted.
pub fn cross_entropy_rows(scores: &[f64], n: usize, k: usize, labels: &[usize]) -> Vec<f64> {
    (0..n)
        .map(|r| {
            let row = &scores[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            lse - row[labels[r]]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ·c has shape k×n
        let mut atc = vec![0.0; k * n];
        matmul_at_b_acc(&a, &c, &mut atc, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((atc[p * n + j] - want).abs() < 1e-12);
            }
        }
        // c·bᵀ has shape m×k
        let mut cbt = vec![0.0; m * k];
        matmul_a_bt_acc(&c, &b, &mut cbt, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((cbt[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_geometry_floor_division() {
        let g = ConvGeom { channels: 1, height: 8, width: 7, kh: 3, kw: 3, stride: 2, padding: 1 };
        assert_eq!(g.output_hw(), Some((4, 4)));
        let bad = ConvGeom { kh: 11, ..g };
        assert_eq!(bad.output_hw(), None);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let g = PoolGeom { planes: 1, height: 2, width: 2, kh: 2, kw: 2, stride: 2 };
        let (out, arg) = maxpool_forward(&[3.0, 3.0, 3.0, 3.0], &g);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![0]);
    }
}
