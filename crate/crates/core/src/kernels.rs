//! Raw forward/backward kernels over flat slices. Shapes are validated by the
//! graph layer before any of these run.

use crate::element::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// A 1×1, stride-1, unpadded conv reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `C[m×n] = alpha·A·B + beta·C`, all row-major and contiguous.
fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `C[m×n] = A·Bᵀ + beta·C` where B is stored row-major as `n×k`.
fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `C[m×n] = Aᵀ·B + beta·C` where A is stored row-major as `k×m`.
fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    gemm_nn(m, k, n, a, b, T::ZERO, &mut out);
    out
}

/// Gradients of `a[m×k] · b[k×n]` given `dy[m×n]`.
pub fn matmul_backward<T: Element>(a: &[T], b: &[T], dy: &[T], m: usize, k: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::ZERO; m * k];
    gemm_nt(m, n, k, dy, b, T::ZERO, &mut da);
    let mut db = vec![T::ZERO; k * n];
    gemm_tn(k, m, n, a, dy, T::ZERO, &mut db);
    (da, db)
}

fn im2col<T: Element>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (x, v) in line.iter_mut().enumerate() {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::ZERO } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (x, &v) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Direct (im2col + GEMM) convolution without bias.
pub fn conv2d<T: Element>(g: &ConvGeometry, input: &[T], weight: &[T]) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let in_size = g.in_channels * g.height * g.width;
    let patch = g.patch_len();
    let mut out = vec![T::ZERO; g.batch * g.out_channels * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; patch * plane] };
    for n in 0..g.batch {
        let image = &input[n * in_size..(n + 1) * in_size];
        let dst = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if g.is_pointwise() {
            gemm_nn(g.out_channels, patch, plane, weight, image, T::ZERO, dst);
        } else {
            im2col(g, image, &mut col);
            gemm_nn(g.out_channels, patch, plane, weight, &col, T::ZERO, dst);
        }
    }
    out
}

/// Returns `(d_input, d_weight)`. `need_input` skips the input gradient when no
/// upstream node wants it.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    dy: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_h() * g.out_w();
    let in_size = g.in_channels * g.height * g.width;
    let patch = g.patch_len();
    let mut dx = need_input.then(|| vec![T::ZERO; g.batch * in_size]);
    let mut dw = need_weight.then(|| vec![T::ZERO; g.out_channels * patch]);
    let pointwise = g.is_pointwise();
    let mut col = vec![T::ZERO; if pointwise { 0 } else { patch * plane }];
    let mut dcol = vec![T::ZERO; if pointwise || !need_input { 0 } else { patch * plane }];
    for n in 0..g.batch {
        let image = &input[n * in_size..(n + 1) * in_size];
        let grad = &dy[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if let Some(dw) = dw.as_mut() {
            let beta = if n == 0 { T::ZERO } else { T::ONE };
            if pointwise {
                gemm_nt(g.out_channels, plane, patch, grad, image, beta, dw);
            } else {
                im2col(g, image, &mut col);
                gemm_nt(g.out_channels, plane, patch, grad, &col, beta, dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_size..(n + 1) * in_size];
            if pointwise {
                gemm_tn(patch, g.out_channels, plane, weight, grad, T::ZERO, dst);
            } else {
                gemm_tn(patch, g.out_channels, plane, weight, grad, T::ZERO, &mut dcol);
                col2im(g, &dcol, dst);
            }
        }
    }
    (dx, dw)
}

/// Per-channel batch-norm statistics layout: `x` is `[N, C, S]` flattened.
#[derive(Debug, Clone, Copy)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    fn for_each_channel_slice<'a, T>(&self, x: &'a [T], c: usize) -> impl Iterator<Item = &'a [T]> + 'a {
        let (channels, spatial) = (self.channels, self.spatial);
        (0..self.batch).map(move |n| {
            let base = (n * channels + c) * spatial;
            &x[base..base + spatial]
        })
    }

    fn count(&self) -> usize {
        self.batch * self.spatial
    }
}

/// Biased mean and variance per channel.
pub fn channel_moments<T: Element>(layout: &ChannelLayout, x: &[T]) -> (Vec<T>, Vec<T>) {
    let m = T::from_usize(layout.count());
    let mut mean = vec![T::ZERO; layout.channels];
    let mut var = vec![T::ZERO; layout.channels];
    for c in 0..layout.channels {
        let s: T = layout.for_each_channel_slice(x, c).flat_map(|s| s.iter().copied()).sum();
        let mu = s / m;
        let ss: T = layout.for_each_channel_slice(x, c).flat_map(|s| s.iter().map(move |&v| (v - mu) * (v - mu))).sum();
        mean[c] = mu;
        var[c] = ss / m;
    }
    (mean, var)
}

/// Normalizes with the given statistics. Returns `(y, x_hat, inv_std)`.
pub fn batchnorm_apply<T: Element>(
    layout: &ChannelLayout,
    x: &[T],
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    for n in 0..layout.batch {
        for c in 0..layout.channels {
            let base = (n * layout.channels + c) * layout.spatial;
            for i in base..base + layout.spatial {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`. In training mode the batch statistics are
/// differentiated through; in eval mode they are constants.
pub fn batchnorm_backward<T: Element>(
    layout: &ChannelLayout,
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(layout.count());
    let mut dgamma = vec![T::ZERO; layout.channels];
    let mut dbeta = vec![T::ZERO; layout.channels];
    for c in 0..layout.channels {
        let mut sg = T::ZERO;
        let mut sb = T::ZERO;
        for n in 0..layout.batch {
            let base = (n * layout.channels + c) * layout.spatial;
            for i in base..base + layout.spatial {
                sg += dy[i] * xhat[i];
                sb += dy[i];
            }
        }
        dgamma[c] = sg;
        dbeta[c] = sb;
    }
    let mut dx = vec![T::ZERO; dy.len()];
    for n in 0..layout.batch {
        for c in 0..layout.channels {
            let base = (n * layout.channels + c) * layout.spatial;
            let k = gamma[c] * inv_std[c];
            for i in base..base + layout.spatial {
                dx[i] = if train { k * (dy[i] - (dbeta[c] + xhat[i] * dgamma[c]) / m) } else { k * dy[i] };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Start/end of the `i`-th adaptive pooling window over `len` inputs.
fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub fn adaptive_avg_pool<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::ZERO; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let mut s = T::ZERO;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += src[y * w + xx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = s / T::from_usize((y1 - y0) * (x1 - x0));
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Element>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut dx = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let g = dy[(p * oh + oy) * ow + ox] / T::from_usize((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Numerically stable row softmax of `logits / temperature`.
pub fn softmax_rows<T: Element>(logits: &[T], classes: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::ZERO; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().fold(row[0], |m, &v| m.max(v)) / temperature;
        let mut z = T::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v / temperature - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
    out
}

/// Row-wise `log_softmax(logits / temperature)`.
pub fn log_softmax_rows<T: Element>(logits: &[T], classes: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::ZERO; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().fold(row[0], |m, &v| m.max(v)) / temperature;
        let z: T = row.iter().map(|&v| (v / temperature - max).exp()).sum();
        let log_z = z.ln() + max;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v / temperature - log_z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sliding-window reference convolution.
    fn conv_reference(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for c in 0..g.in_channels {
                            for ki in 0..g.kernel_h {
                                for kj in 0..g.kernel_w {
                                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (xx * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    s += x[((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n as u64).map(|i| (((i * 2654435761 + salt * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn conv_matches_sliding_window() {
        for (k, stride, padding) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (2, 1, 0)] {
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                height: 7,
                width: 6,
                out_channels: 4,
                kernel_h: k,
                kernel_w: k,
                stride,
                padding,
            };
            let x = pseudo(2 * 3 * 7 * 6, 1);
            let w = pseudo(4 * 3 * k * k, 2);
            let got = conv2d(&g, &x, &w);
            let want = conv_reference(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={padding}");
            }
        }
    }

    #[test]
    fn adaptive_pool_windows_cover_input() {
        assert_eq!(adaptive_window(0, 7, 4), (0, 2));
        assert_eq!(adaptive_window(3, 7, 4), (5, 7));
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = adaptive_avg_pool(&x, 1, (4, 4), (2, 2));
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, 1000.0, 0.0, -1000.0], 3, 1.0);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[3] - 1.0).abs() < 1e-15);
    }
}
