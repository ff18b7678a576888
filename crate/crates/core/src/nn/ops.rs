//! Forward and backward kernels on plain tensors.
//!
//! These are shared by the recorded graph (training) and the tape-free
//! inference path, so both produce bit-identical activations.

use super::{NnError, Tensor};

/// Row-major C = alpha·op(A)·op(B) + beta·C through explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() > (m - 1) * rsc + n - 1);
    // SAFETY: callers pass slices covering the strided extents; checked in debug
    // builds by the asserts below.
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    debug_assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_same3x3(&self) -> bool {
        self.kernel == 3 && self.stride == 1 && self.pad == 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Padding that keeps spatial extent for an odd kernel: 1 for 3×3, 0 for 1×1.
pub fn same_padding(kernel: usize) -> usize {
    kernel / 2
}

/// Geometry of a convolution over the channel concatenation of `parts`.
pub fn conv_geometry(parts: &[&Tensor], weight: &Tensor, stride: usize, pad: usize) -> Result<ConvGeometry, NnError> {
    let first = parts.first().ok_or_else(|| NnError::shape("conv2d", "no inputs"))?;
    let (n, _, h, w) = first.nchw()?;
    let mut c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.nchw()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(NnError::shape("conv2d", format!("input parts {:?} and {:?} disagree", p.dims(), first.dims())));
        }
        c += pc;
    }
    let (o, wc, kh, kw) = weight.nchw()?;
    if wc != c {
        return Err(NnError::shape("conv2d", format!("input has {c} channels, weights expect {wc}")));
    }
    if kh != kw || kh == 0 {
        return Err(NnError::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(NnError::shape("conv2d", "stride must be positive"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(NnError::shape("conv2d", format!("{h}x{w} input smaller than {kh}x{kw} kernel")));
    }
    Ok(ConvGeometry {
        batch: n,
        channels: c,
        height: h,
        width: w,
        out_channels: o,
        kernel: kh,
        stride,
        pad,
        out_height: (h + 2 * pad - kh) / stride + 1,
        out_width: (w + 2 * pad - kw) / stride + 1,
    })
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.plane()..(c + 1) * g.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.plane()..(c + 1) * g.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Channel plane `c` (global index across parts) of sample `s`.
fn part_plane<'a>(parts: &[&'a Tensor], g: &ConvGeometry, s: usize, mut c: usize) -> &'a [f64] {
    for p in parts {
        let pc = p.dims()[1];
        if c < pc {
            let start = (s * pc + c) * g.plane();
            return &p.data()[start..start + g.plane()];
        }
        c -= pc;
    }
    unreachable!("channel index checked by conv_geometry")
}

/// Copy an h × w plane into the interior of a zero-bordered (h+2) × (w+2) buffer.
fn pad_plane(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let pw = w + 2;
    for y in 0..h {
        dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

// The hot loops below are compiled twice: once for the baseline target and
// once with AVX2 enabled, picked at runtime. Vector width only changes how
// many independent lanes run together, never the per-element operation
// order, so both variants produce identical bits.
macro_rules! simd_dispatch {
    ($(#[$doc:meta])* fn $name:ident($($arg:ident: $ty:ty),*) $(-> $ret:ty)? $body:block) => {
        $(#[$doc])*
        #[inline]
        fn $name($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn generic($($arg: $ty),*) $(-> $ret)? $body

            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn avx2($($arg: $ty),*) $(-> $ret)? {
                    generic($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { avx2($($arg),*) };
                }
            }
            generic($($arg),*)
        }
    };
}

simd_dispatch! {
    /// `out += correlate(padded, k)` for a 3×3 kernel on a zero-bordered plane.
    fn correlate3x3_acc(padded: &[f64], k: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let pw = w + 2;
        let (k0, k1, k2, k3, k4, k5, k6, k7, k8) = (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]);
        for y in 0..h {
            let r0 = &padded[y * pw..y * pw + pw];
            let r1 = &padded[(y + 1) * pw..(y + 1) * pw + pw];
            let r2 = &padded[(y + 2) * pw..(y + 2) * pw + pw];
            let o = &mut out[y * w..y * w + w];
            let (r0a, r0b, r0c) = (&r0[..w], &r0[1..w + 1], &r0[2..w + 2]);
            let (r1a, r1b, r1c) = (&r1[..w], &r1[1..w + 1], &r1[2..w + 2]);
            let (r2a, r2b, r2c) = (&r2[..w], &r2[1..w + 1], &r2[2..w + 2]);
            for x in 0..w {
                let top = k0 * r0a[x] + k1 * r0b[x] + k2 * r0c[x];
                let mid = k3 * r1a[x] + k4 * r1b[x] + k5 * r1c[x];
                let bot = k6 * r2a[x] + k7 * r2b[x] + k8 * r2c[x];
                o[x] += top + mid + bot;
            }
        }
    }
}

simd_dispatch! {
    /// `gk[ky·3+kx] += Σ dy[y, x] · padded[y+ky, x+kx]`, summed row by row
    /// with eight fixed partial-sum lanes per row.
    fn kernel_grad3x3_acc(padded: &[f64], dy: &[f64], h: usize, w: usize, gk: &mut [f64]) {
        let pw = w + 2;
        let mut acc = [0.0f64; 9];
        for ky in 0..3 {
            for kx in 0..3 {
                let mut total = 0.0;
                for y in 0..h {
                    let xr = &padded[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                    let d = &dy[y * w..(y + 1) * w];
                    let mut lanes = [0.0f64; 8];
                    let cx = xr.chunks_exact(8);
                    let cd = d.chunks_exact(8);
                    let (rx, rd) = (cx.remainder(), cd.remainder());
                    for (a, b) in cd.zip(cx) {
                        for i in 0..8 {
                            lanes[i] += a[i] * b[i];
                        }
                    }
                    let mut tail = 0.0;
                    for (a, b) in rd.iter().zip(rx) {
                        tail += a * b;
                    }
                    total += ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
                        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
                        + tail;
                }
                acc[ky * 3 + kx] = total;
            }
        }
        for (g, a) in gk.iter_mut().zip(acc) {
            *g += a;
        }
    }
}

fn check_bias(bias: Option<&Tensor>, o: usize) -> Result<(), NnError> {
    match bias {
        Some(b) if b.len() != o => Err(NnError::shape("conv2d", format!("bias length {} for {o} outputs", b.len()))),
        _ => Ok(()),
    }
}

/// 2-D cross-correlation. `weight` is O × C × k × k, `bias` has length O.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor, NnError> {
    conv2d_parts(&[input], weight, bias, stride, pad)
}

/// Convolution over the channel concatenation of `parts`, without
/// materializing the concatenation when the kernel is 3×3/same or 1×1.
pub fn conv2d_parts(
    parts: &[&Tensor],
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor, NnError> {
    let g = conv_geometry(parts, weight, stride, pad)?;
    check_bias(bias, g.out_channels)?;
    let (n, o) = (g.batch, g.out_channels);
    let ncols = g.col_cols();
    let mut out = vec![0.0; n * o * ncols];
    for s in 0..n {
        let y = &mut out[s * o * ncols..(s + 1) * o * ncols];
        if let Some(b) = bias {
            for (oc, row) in y.chunks_mut(ncols).enumerate() {
                row.fill(b.data()[oc]);
            }
        }
    }
    if g.is_same3x3() {
        let mut padded = vec![0.0; (g.height + 2) * (g.width + 2)];
        for s in 0..n {
            let y = &mut out[s * o * ncols..(s + 1) * o * ncols];
            for c in 0..g.channels {
                pad_plane(part_plane(parts, &g, s, c), g.height, g.width, &mut padded);
                for (oc, plane) in y.chunks_mut(ncols).enumerate() {
                    let k = &weight.data()[(oc * g.channels + c) * 9..(oc * g.channels + c) * 9 + 9];
                    correlate3x3_acc(&padded, k, g.height, g.width, plane);
                }
            }
        }
    } else if g.is_pointwise() {
        for s in 0..n {
            let y = &mut out[s * o * ncols..(s + 1) * o * ncols];
            let mut c0 = 0;
            for p in parts {
                let pc = p.dims()[1];
                let x = &p.data()[s * pc * ncols..(s + 1) * pc * ncols];
                gemm(o, pc, ncols, &weight.data()[c0..], g.channels, 1, x, ncols, 1, y, ncols, 1.0);
                c0 += pc;
            }
        }
    } else {
        let joined;
        let input = if parts.len() == 1 {
            parts[0]
        } else {
            joined = concat_channels(parts)?;
            &joined
        };
        let rows = g.col_rows();
        let in_per = g.channels * g.plane();
        let mut cols = vec![0.0; rows * ncols];
        for s in 0..n {
            im2col(&input.data()[s * in_per..(s + 1) * in_per], &g, &mut cols);
            let y = &mut out[s * o * ncols..(s + 1) * o * ncols];
            gemm(o, rows, ncols, weight.data(), rows, 1, &cols, ncols, 1, y, ncols, 1.0);
        }
    }
    Tensor::new(vec![n, o, g.out_height, g.out_width], out)
}

pub struct ConvGrads {
    /// One gradient buffer per input part.
    pub inputs: Vec<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    parts: &[&Tensor],
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &[f64],
) -> Result<ConvGrads, NnError> {
    let g = conv_geometry(parts, weight, stride, pad)?;
    let (n, o) = (g.batch, g.out_channels);
    let ncols = g.col_cols();
    if grad_out.len() != n * o * ncols {
        return Err(NnError::shape("conv2d_backward", "gradient length does not match output"));
    }
    let mut gins: Vec<Vec<f64>> = parts.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; o];
    for s in 0..n {
        let dy = &grad_out[s * o * ncols..(s + 1) * o * ncols];
        for (oc, row) in dy.chunks(ncols).enumerate() {
            gb[oc] += row.iter().sum::<f64>();
        }
    }
    if g.is_same3x3() {
        let (h, w) = (g.height, g.width);
        let pp = (h + 2) * (w + 2);
        let mut gpad = vec![0.0; o * pp];
        let mut xpad = vec![0.0; pp];
        let mut flipped = [0.0f64; 9];
        for s in 0..n {
            let dy = &grad_out[s * o * ncols..(s + 1) * o * ncols];
            for oc in 0..o {
                pad_plane(&dy[oc * ncols..(oc + 1) * ncols], h, w, &mut gpad[oc * pp..(oc + 1) * pp]);
            }
            let mut c = 0;
            for (pi, p) in parts.iter().enumerate() {
                let pc = p.dims()[1];
                for lc in 0..pc {
                    let start = (s * pc + lc) * g.plane();
                    let x = &p.data()[start..start + g.plane()];
                    pad_plane(x, h, w, &mut xpad);
                    let gin = &mut gins[pi][start..start + g.plane()];
                    for oc in 0..o {
                        let kbase = (oc * g.channels + c) * 9;
                        let k = &weight.data()[kbase..kbase + 9];
                        for (i, f) in flipped.iter_mut().enumerate() {
                            *f = k[8 - i];
                        }
                        correlate3x3_acc(&gpad[oc * pp..(oc + 1) * pp], &flipped, h, w, gin);
                        let dyo = &dy[oc * ncols..(oc + 1) * ncols];
                        kernel_grad3x3_acc(&xpad, dyo, h, w, &mut gw[kbase..kbase + 9]);
                    }
                    c += 1;
                }
            }
        }
    } else if g.is_pointwise() {
        for s in 0..n {
            let dy = &grad_out[s * o * ncols..(s + 1) * o * ncols];
            let mut c0 = 0;
            for (pi, p) in parts.iter().enumerate() {
                let pc = p.dims()[1];
                let x = &p.data()[s * pc * ncols..(s + 1) * pc * ncols];
                // dW[:, c0..c0+pc] += dY · Xᵀ
                gemm(o, ncols, pc, dy, ncols, 1, x, 1, ncols, &mut gw[c0..], g.channels, 1.0);
                // dX = W[:, c0..c0+pc]ᵀ · dY
                let dx = &mut gins[pi][s * pc * ncols..(s + 1) * pc * ncols];
                gemm(pc, o, ncols, &weight.data()[c0..], 1, g.channels, dy, ncols, 1, dx, ncols, 0.0);
                c0 += pc;
            }
        }
    } else {
        let joined;
        let input = if parts.len() == 1 {
            parts[0]
        } else {
            joined = concat_channels(parts)?;
            &joined
        };
        let rows = g.col_rows();
        let in_per = g.channels * g.plane();
        let mut gin = vec![0.0; input.len()];
        let mut cols = vec![0.0; rows * ncols];
        let mut dcols = vec![0.0; rows * ncols];
        for s in 0..n {
            let dy = &grad_out[s * o * ncols..(s + 1) * o * ncols];
            im2col(&input.data()[s * in_per..(s + 1) * in_per], &g, &mut cols);
            gemm(o, ncols, rows, dy, ncols, 1, &cols, 1, ncols, &mut gw, rows, 1.0);
            gemm(rows, o, ncols, weight.data(), 1, rows, dy, ncols, 1, &mut dcols, ncols, 0.0);
            col2im(&dcols, &g, &mut gin[s * in_per..(s + 1) * in_per]);
        }
        let channels: Vec<usize> = parts.iter().map(|p| p.dims()[1]).collect();
        gins = concat_channels_backward(&channels, n, g.plane(), &gin);
    }
    Ok(ConvGrads {
        inputs: gins,
        weight: gw,
        bias: gb,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor::new(input.dims().to_vec(), data).expect("same shape")
}

pub fn relu_backward(input: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

fn check_slopes(input: &Tensor, slopes: &Tensor) -> Result<(usize, usize, usize), NnError> {
    let (n, c, h, w) = input.nchw()?;
    if slopes.len() != c {
        return Err(NnError::shape("prelu", format!("{} slopes for {c} channels", slopes.len())));
    }
    Ok((n, c, h * w))
}

/// Parametric ReLU with one negative slope per channel. The `x ≥ 0` branch
/// is the identity, so the derivative at exactly zero is 1.
pub fn prelu(input: &Tensor, slopes: &Tensor) -> Result<Tensor, NnError> {
    let (n, c, plane) = check_slopes(input, slopes)?;
    let mut data = input.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let a = slopes.data()[ch];
            let base = (s * c + ch) * plane;
            for v in &mut data[base..base + plane] {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
    }
    Tensor::new(input.dims().to_vec(), data)
}

pub fn prelu_backward(input: &Tensor, slopes: &Tensor, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let (n, c, plane) = check_slopes(input, slopes)?;
    let mut gin = vec![0.0; input.len()];
    let mut ga = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let a = slopes.data()[ch];
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let x = input.data()[i];
                if x >= 0.0 {
                    gin[i] = grad_out[i];
                } else {
                    gin[i] = a * grad_out[i];
                    ga[ch] += x * grad_out[i];
                }
            }
        }
    }
    Ok((gin, ga))
}

/// 2×2 average pooling with stride 2; spatial extents must be even.
pub fn avg_pool2x2(input: &Tensor) -> Result<Tensor, NnError> {
    let (n, c, h, w) = input.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::shape("avg_pool2x2", format!("odd extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let x = input.data();
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = 0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2x2_backward(input_dims: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (input_dims[0], input_dims[1], input_dims[2], input_dims[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * ow + x / 2];
            }
        }
    }
    gin
}

/// N × C × H × W → N × C spatial means.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, NnError> {
    let (n, c, h, w) = input.nchw()?;
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(input_dims: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let plane = input_dims[2] * input_dims[3];
    let scale = 1.0 / plane as f64;
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
        .collect()
}

/// Concatenate N × Cᵢ × H × W tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, NnError> {
    let first = parts.first().ok_or_else(|| NnError::shape("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.nchw()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.nchw()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(NnError::shape(
                "concat_channels",
                format!("{:?} does not match {:?}", p.dims(), first.dims()),
            ));
        }
        total += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for p in parts {
            let pc = p.dims()[1];
            data.extend_from_slice(&p.data()[s * pc * plane..(s + 1) * pc * plane]);
        }
    }
    Tensor::new(vec![n, total, h, w], data)
}

/// Split a concatenated gradient back into per-part gradients.
pub fn concat_channels_backward(part_channels: &[usize], n: usize, plane: usize, grad_out: &[f64]) -> Vec<Vec<f64>> {
    let total: usize = part_channels.iter().sum();
    let mut out: Vec<Vec<f64>> = part_channels.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
    for s in 0..n {
        let mut offset = s * total * plane;
        for (i, &c) in part_channels.iter().enumerate() {
            out[i].extend_from_slice(&grad_out[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    out
}

/// `input` N × F, `weight` O × F, `bias` O → N × O.
pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, NnError> {
    let (n, f) = input.matrix()?;
    let (o, wf) = weight.matrix()?;
    if wf != f {
        return Err(NnError::shape("fully_connected", format!("{f} features, weights expect {wf}")));
    }
    let mut out = vec![0.0; n * o];
    if let Some(b) = bias {
        if b.len() != o {
            return Err(NnError::shape("fully_connected", format!("bias length {} for {o} outputs", b.len())));
        }
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, f, o, input.data(), f, 1, weight.data(), 1, f, &mut out, o, 1.0);
    Tensor::new(vec![n, o], out)
}

pub fn fully_connected_backward(input: &Tensor, weight: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, f) = (input.dims()[0], input.dims()[1]);
    let o = weight.dims()[0];
    let mut gin = vec![0.0; n * f];
    gemm(n, o, f, grad_out, o, 1, weight.data(), f, 1, &mut gin, f, 0.0);
    let mut gw = vec![0.0; o * f];
    gemm(o, n, f, grad_out, 1, o, input.data(), f, 1, &mut gw, f, 0.0);
    let mut gb = vec![0.0; o];
    for row in grad_out.chunks(o) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    (gin, gw, gb)
}

/// Row-wise softmax over an N × K matrix, stabilized by max subtraction.
pub fn softmax(input: &Tensor) -> Result<Tensor, NnError> {
    let (_, k) = input.matrix()?;
    let mut data = input.data().to_vec();
    for row in data.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(input.dims().to_vec(), data)
}

pub fn softmax_backward(probs: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let k = probs.dims()[1];
    let mut gin = vec![0.0; probs.len()];
    for ((p, g), d) in probs.data().chunks(k).zip(grad_out.chunks(k)).zip(gin.chunks_mut(k)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for i in 0..k {
            d[i] = p[i] * (g[i] - dot);
        }
    }
    gin
}

/// Tolerance on probability row sums accepted by [`cross_entropy`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

pub fn check_distribution(probs: &Tensor, targets: &Tensor) -> Result<(usize, usize), NnError> {
    let (n, k) = probs.matrix()?;
    if targets.dims() != probs.dims() {
        return Err(NnError::shape(
            "cross_entropy",
            format!("targets {:?} vs probs {:?}", targets.dims(), probs.dims()),
        ));
    }
    for (row, p) in probs.data().chunks(k).enumerate() {
        let sum: f64 = p.iter().sum();
        if !((sum - 1.0).abs() <= DISTRIBUTION_TOLERANCE) || p.iter().any(|&v| v < 0.0) {
            return Err(NnError::InvalidDistribution { row, sum });
        }
    }
    Ok((n, k))
}

/// Mean over the batch of `−Σₖ yₖ·ln pₖ`.
pub fn cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64, NnError> {
    let (n, _) = check_distribution(probs, targets)?;
    let mut total = 0.0;
    for (&p, &y) in probs.data().iter().zip(targets.data()) {
        if y != 0.0 {
            total -= y * p.ln();
        }
    }
    Ok(total / n as f64)
}
