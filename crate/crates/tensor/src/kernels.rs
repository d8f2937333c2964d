//! Raw forward/backward kernels over row-major buffers.
//!
//! These carry no graph bookkeeping; [`crate::Graph`] wires them together and
//! the data pipeline calls the forward halves directly on plain tensors.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: (usize, usize)) -> Result<Self> {
        let [b, cin, h, w] = as4(input)?;
        let [cout, kcin, kh, kw] = as4(kernel)?;
        if kcin != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel expects {kcin} input channels, input has {cin}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * padding.0 < kh || w + 2 * padding.1 < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * padding.0, w + 2 * padding.1),
            ));
        }
        Ok(Self {
            batch: b,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: (kh, kw),
            stride,
            padding,
        })
    }

    pub fn out_extents(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride + 1,
            (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride + 1,
        )
    }

    pub fn out_shape(&self) -> [usize; 4] {
        let (ho, wo) = self.out_extents();
        [self.batch, self.out_channels, ho, wo]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == (0, 0)
    }
}

fn as4(shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| TensorError::shape("conv2d", format!("expected rank 4, got {shape:?}")))
}

/// Unfolds one batch item into a `[Cin*kh*kw, Ho*Wo]` column matrix.
fn im2col(g: &ConvGeometry, input: &[f64], col: &mut [f64]) {
    let (ho, wo) = g.out_extents();
    let (kh, kw) = g.kernel;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let n = ho * wo;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - ph;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..][..g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pw;
                        *d = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto the input grid, summing overlaps.
fn col2im(g: &ConvGeometry, col: &[f64], grad_input: &mut [f64]) {
    let (ho, wo) = g.out_extents();
    let (kh, kw) = g.kernel;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let n = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - ph;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - pw;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view(rows: usize, cols: usize, data: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer matches matrix extents")
}

fn view_mut(rows: usize, cols: usize, data: &mut [f64]) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer matches matrix extents")
}

/// Cross-correlation of `input` with `kernel`.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_extents();
    let n = ho * wo;
    let k = g.patch_len();
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.out_channels * n;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * n] };
    let w = view(g.out_channels, k, kernel);
    for b in 0..g.batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let cols = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        let mut o = view_mut(g.out_channels, n, &mut out[b * out_stride..(b + 1) * out_stride]);
        general_mat_mul(1.0, &w, &view(k, n, cols), 0.0, &mut o);
    }
    out
}

/// Accumulates kernel and input gradients of a convolution.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_extents();
    let n = ho * wo;
    let k = g.patch_len();
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.out_channels * n;
    let mut col = vec![0.0; k * n];
    let w = view(g.out_channels, k, kernel);
    let mut grad_input = grad_input;
    let mut grad_kernel = grad_kernel.map(|gk| view_mut(g.out_channels, k, gk));
    for b in 0..g.batch {
        let dy = view(g.out_channels, n, &grad_out[b * out_stride..(b + 1) * out_stride]);
        if let Some(gk) = grad_kernel.as_mut() {
            let x = &input[b * in_stride..(b + 1) * in_stride];
            let cols = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            general_mat_mul(1.0, &dy, &view(k, n, cols).t(), 1.0, gk);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let gx = &mut gi[b * in_stride..(b + 1) * in_stride];
            if g.is_pointwise() {
                general_mat_mul(1.0, &w.t(), &dy, 1.0, &mut view_mut(k, n, gx));
            } else {
                general_mat_mul(1.0, &w.t(), &dy, 0.0, &mut view_mut(k, n, &mut col));
                col2im(g, &col, gx);
            }
        }
    }
}

/// Windowed pooling geometry over `[B, C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: (usize, usize),
    pub stride: usize,
}

impl PoolGeometry {
    pub fn new(shape: &[usize], window: (usize, usize), stride: usize) -> Result<Self> {
        let [b, c, h, w] = shape
            .try_into()
            .map_err(|_| TensorError::shape("pool", format!("expected rank 4, got {shape:?}")))?;
        if window.0 == 0 || window.1 == 0 || stride == 0 {
            return Err(TensorError::shape("pool", "window and stride must be positive"));
        }
        if window.0 > h || window.1 > w {
            return Err(TensorError::shape(
                "pool",
                format!("window {window:?} larger than input {h}x{w}"),
            ));
        }
        Ok(Self {
            planes: b * c,
            height: h,
            width: w,
            window,
            stride,
        })
    }

    pub fn out_extents(&self) -> (usize, usize) {
        (
            (self.height - self.window.0) / self.stride + 1,
            (self.width - self.window.1) / self.stride + 1,
        )
    }
}

/// Max pooling. Returns values and the flat input index chosen for each
/// output; the first maximum in row-major window order wins ties.
pub fn max_pool_forward(g: &PoolGeometry, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = g.out_extents();
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    let mut arg = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for ky in 0..g.window.0 {
                    for kx in 0..g.window.1 {
                        let at = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if best_at == usize::MAX || input[at] > best {
                            best = input[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(g: &PoolGeometry, input: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_extents();
    let norm = 1.0 / (g.window.0 * g.window.1) as f64;
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..g.window.0 {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    acc += input[row..row + g.window.1].iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &PoolGeometry, grad_out: &[f64], grad_input: &mut [f64]) {
    let (ho, wo) = g.out_extents();
    let norm = 1.0 / (g.window.0 * g.window.1) as f64;
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = grad_out[(p * ho + oy) * wo + ox] * norm;
                for ky in 0..g.window.0 {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    for v in &mut grad_input[row..row + g.window.1] {
                        *v += gv;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    /// Bilinear with half-pixel centers (align-corners off).
    Bilinear,
}

/// Interpolation taps for one axis: output index → `(i0, i1, w0, w1)`.
pub fn resize_taps(input: usize, output: usize, mode: ResizeMode) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| match mode {
            ResizeMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(input - 1);
                (i, i, 1.0, 0.0)
            }
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                (i0, i1, 1.0 - frac, frac)
            }
        })
        .collect()
}

pub fn resize_forward(planes: usize, (h, w): (usize, usize), (ho, wo): (usize, usize), mode: ResizeMode, input: &[f64]) -> Vec<f64> {
    let ty = resize_taps(h, ho, mode);
    let tx = resize_taps(w, wo, mode);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                out.push(
                    wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]),
                );
            }
        }
    }
    out
}

pub fn resize_backward(
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    mode: ResizeMode,
    grad_out: &[f64],
    grad_input: &mut [f64],
) {
    let ty = resize_taps(h, ho, mode);
    let tx = resize_taps(w, wo, mode);
    for p in 0..planes {
        let dst = &mut grad_input[p * h * w..(p + 1) * h * w];
        let go = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = go[oy * wo + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(shape: &[usize], axis: usize, input: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| input[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (input[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward(shape: &[usize], axis: usize, output: &[f64], grad_out: &[f64], grad_input: &mut [f64]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| grad_out[at(j)] * output[at(j)]).sum();
            for j in 0..len {
                grad_input[at(j)] += output[at(j)] * (grad_out[at(j)] - dot);
            }
        }
    }
}

/// Max-pools a `[B, C, H, W]` tensor with a square window equal to its stride.
pub fn max_pool(t: &Tensor, factor: usize) -> Result<Tensor> {
    let g = PoolGeometry::new(t.shape(), (factor, factor), factor)?;
    let (ho, wo) = g.out_extents();
    let (values, _) = max_pool_forward(&g, t.data());
    Tensor::from_vec(&[t.shape()[0], t.shape()[1], ho, wo], values)
}

/// Resizes the spatial extents of a `[B, C, H, W]` tensor.
pub fn resize(t: &Tensor, (ho, wo): (usize, usize), mode: ResizeMode) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if ho == 0 || wo == 0 {
        return Err(TensorError::shape("resize", "target extents must be positive"));
    }
    Tensor::from_vec(&[b, c, ho, wo], resize_forward(b * c, (h, w), (ho, wo), mode, t.data()))
}
