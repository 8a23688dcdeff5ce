//! Dense row-major `f64` tensors and the handful of kernels the network needs.
//!
//! Every reduction runs in a fixed loop order so results are bit-reproducible
//! across runs. Public kernels validate shapes and reject non-finite output.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be rank {rank}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Standard matrix product. Each output element sums over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (p, &x) in row.iter().enumerate() {
                acc += x * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    let out = Tensor { shape: vec![m, n], data: out };
    out.check_finite("matmul")?;
    Ok(out)
}

/// `y[b, o] = sum_i x[b, i] * w[o, i]` for activations `x: [B, in]` and weights `w: [out, in]`.
pub fn linear(x: &[f64], batch: usize, w: &Tensor) -> Vec<f64> {
    let (out_f, in_f) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), batch * in_f);
    let mut y = vec![0.0; batch * out_f];
    for b in 0..batch {
        let xr = &x[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let wr = &w.data[o * in_f..(o + 1) * in_f];
            let mut acc = 0.0;
            for (xi, wi) in xr.iter().zip(wr) {
                acc += xi * wi;
            }
            y[b * out_f + o] = acc;
        }
    }
    y
}

/// Backward of [`linear`]: accumulates into `grad_w` and returns the input gradient
/// when `want_input` is set.
pub fn linear_backward(
    x: &[f64],
    batch: usize,
    w: &Tensor,
    grad_y: &[f64],
    grad_w: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (out_f, in_f) = (w.shape[0], w.shape[1]);
    for b in 0..batch {
        let xr = &x[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let g = grad_y[b * out_f + o];
            if g == 0.0 {
                continue;
            }
            let gw = &mut grad_w[o * in_f..(o + 1) * in_f];
            for (gwi, xi) in gw.iter_mut().zip(xr) {
                *gwi += g * xi;
            }
        }
    }
    if !want_input {
        return None;
    }
    let mut gx = vec![0.0; batch * in_f];
    for b in 0..batch {
        let gxr = &mut gx[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let g = grad_y[b * out_f + o];
            if g == 0.0 {
                continue;
            }
            let wr = &w.data[o * in_f..(o + 1) * in_f];
            for (gxi, wi) in gxr.iter_mut().zip(wr) {
                *gxi += g * wi;
            }
        }
    }
    Some(gx)
}

/// Geometry of a 2-d cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::ShapeMismatch(format!(
                "kernel {}x{} exceeds padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    /// Rejects geometries whose last window would not land exactly on the padded edge.
    pub fn check_integral(&self) -> Result<()> {
        self.output_hw()?;
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if !(ph - self.kernel_h).is_multiple_of(self.stride) || !(pw - self.kernel_w).is_multiple_of(self.stride) {
            return Err(Error::InvalidShape(format!(
                "non-integral conv output: padded {ph}x{pw}, kernel {}x{}, stride {}",
                self.kernel_h, self.kernel_w, self.stride
            )));
        }
        Ok(())
    }

    /// Multiply-accumulate count for one image.
    pub fn macs(&self) -> Result<u64> {
        let (oh, ow) = self.output_hw()?;
        Ok((self.out_channels * self.in_channels * self.kernel_h * self.kernel_w * oh * ow) as u64)
    }
}

/// Cross-correlation of `input: [N, C, H, W]` with `kernel: [O, C, kh, kw]`, zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    if input.shape[1] != kernel.shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input has {} channels, kernel expects {}",
            input.shape[1], kernel.shape[1]
        )));
    }
    let geo = ConvGeometry {
        in_channels: input.shape[1],
        out_channels: kernel.shape[0],
        height: input.shape[2],
        width: input.shape[3],
        kernel_h: kernel.shape[2],
        kernel_w: kernel.shape[3],
        stride,
        padding,
    };
    geo.check_integral()?;
    let (oh, ow) = geo.output_hw()?;
    let n = input.shape[0];
    let data = conv2d_raw(&input.data, n, &kernel.data, &geo);
    let out = Tensor { shape: vec![n, geo.out_channels, oh, ow], data };
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Unchecked conv kernel over `n` stacked images. Geometry must be valid.
pub(crate) fn conv2d_raw(input: &[f64], n: usize, kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let (c_in, h, w) = (g.in_channels, g.height, g.width);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let mut out = vec![0.0; n * g.out_channels * oh * ow];
    for b in 0..n {
        for o in 0..g.out_channels {
            let out_plane = &mut out[(b * g.out_channels + o) * oh * ow..][..oh * ow];
            for c in 0..c_in {
                let in_plane = &input[(b * c_in + c) * h * w..][..h * w];
                let kern = &kernel[(o * c_in + c) * kh * kw..][..kh * kw];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let kv = kern[ki * kw + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * s + ki) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &in_plane[iy as usize * w..][..w];
                            let orow = &mut out_plane[y * ow..][..ow];
                            for (x, ov) in orow.iter_mut().enumerate() {
                                let ix = (x * s + kj) as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    *ov += kv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the kernel gradient into `grad_kernel` and optionally returns the input gradient.
pub(crate) fn conv2d_backward_raw(
    input: &[f64],
    n: usize,
    kernel: &[f64],
    g: &ConvGeometry,
    grad_out: &[f64],
    grad_kernel: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let (c_in, h, w) = (g.in_channels, g.height, g.width);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let mut grad_in = if want_input { vec![0.0; input.len()] } else { Vec::new() };
    for b in 0..n {
        for o in 0..g.out_channels {
            let go_plane = &grad_out[(b * g.out_channels + o) * oh * ow..][..oh * ow];
            for c in 0..c_in {
                let in_off = (b * c_in + c) * h * w;
                let k_off = (o * c_in + c) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let kv = kernel[k_off + ki * kw + kj];
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let iy = (y * s + ki) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row_off = in_off + iy as usize * w;
                            for x in 0..ow {
                                let ix = (x * s + kj) as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let go = go_plane[y * ow + x];
                                acc += go * input[row_off + ix as usize];
                                if want_input {
                                    grad_in[row_off + ix as usize] += go * kv;
                                }
                            }
                        }
                        grad_kernel[k_off + ki * kw + kj] += acc;
                    }
                }
            }
        }
    }
    want_input.then_some(grad_in)
}

/// Mean over non-overlapping 2x2 windows of `[N, C, H, W]`.
pub fn avgpool2(input: &Tensor) -> Result<Tensor> {
    expect_rank(input, 4, "avgpool2 input")?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!("avgpool2 needs even spatial dims, got {h}x{w}")));
    }
    let data = avgpool2_raw(&input.data, n * c, h, w);
    Ok(Tensor { shape: vec![n, c, h / 2, w / 2], data })
}

pub(crate) fn avgpool2_raw(input: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x];
                let b = src[2 * y * w + 2 * x + 1];
                let c = src[(2 * y + 1) * w + 2 * x];
                let d = src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = (a + b + c + d) * 0.25;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward_raw(grad_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gi = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                gi[p * h * w + y * w + x] = 0.25 * grad_out[p * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_conv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, w] = input.shape()[..] else { unreachable!() };
        let [o, _, kh, kw] = kernel.shape()[..] else { unreachable!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (x * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * kernel.data()[((oc * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn matmul_identity_and_projector() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&p, &b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        for (m, k, n) in [(3, 4, 2), (16, 16, 16), (1, 9, 5)] {
            let a = rng.normal_tensor(&[m, k], 1.0);
            let b = rng.normal_tensor(&[k, n], 1.0);
            let mut expected = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        expected[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                    }
                }
            }
            assert!(rel_close(matmul(&a, &b).unwrap().data(), &expected, 1e-12));
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(&[2, 1, 5, 4], 1.0);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, 1, 1).unwrap().data(), x.data());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = Rng::new(11);
        let cases = [([1, 2, 5, 5], [3, 2, 3, 3], 1, 0), ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1), ([1, 2, 9, 9], [2, 2, 3, 3], 2, 1), ([1, 4, 15, 15], [2, 4, 1, 1], 2, 0)];
        for (ishape, kshape, stride, pad) in cases {
            let x = rng.normal_tensor(&ishape, 1.0);
            let k = rng.normal_tensor(&kshape, 1.0);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            assert!(rel_close(y.data(), &naive_conv(&x, &k, stride, pad), 1e-12));
        }
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 2, 0), Err(Error::InvalidShape(_))));
        let big = Tensor::zeros(&[1, 1, 7, 7]);
        assert!(conv2d(&x, &big, 1, 1).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor(&[2, 2, 5, 5], 1.0);
        let k = rng.normal_tensor(&[3, 2, 3, 3], 1.0);
        let g = ConvGeometry { in_channels: 2, out_channels: 3, height: 5, width: 5, kernel_h: 3, kernel_w: 3, stride: 2, padding: 1 };
        let y = conv2d_raw(x.data(), 2, k.data(), &g);
        let up: Vec<f64> = (0..y.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let loss = |x: &[f64], k: &[f64]| -> f64 {
            conv2d_raw(x, 2, k, &g).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let mut gk = vec![0.0; k.len()];
        let gx = conv2d_backward_raw(x.data(), 2, k.data(), &g, &up, &mut gk, true).unwrap();
        let h = 1e-6;
        for i in (0..k.len()).step_by(5) {
            let mut kp = k.data().to_vec();
            kp[i] += h;
            let mut km = k.data().to_vec();
            km[i] -= h;
            let fd = (loss(x.data(), &kp) - loss(x.data(), &km)) / (2.0 * h);
            assert!((fd - gk[i]).abs() < 1e-7, "kernel {i}: {fd} vs {}", gk[i]);
        }
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.data().to_vec();
            xp[i] += h;
            let mut xm = x.data().to_vec();
            xm[i] -= h;
            let fd = (loss(&xp, k.data()) - loss(&xm, k.data())) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7, "input {i}: {fd} vs {}", gx[i]);
        }
    }

    #[test]
    fn avgpool_windows() {
        let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(avgpool2(&ones).unwrap().data(), &[1.0]);
        let w = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(avgpool2(&w).unwrap().data(), &[3.0]);
        let c = Tensor::full(&[2, 3, 4, 6], 0.7);
        assert!(avgpool2(&c).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(avgpool2(&Tensor::zeros(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
