//! Raw NCHW kernels. Shapes are validated by the graph before calling in.

use super::Real;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one CHW image into a `(C·k·k) × (oh·ow)` matrix.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into a CHW image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    out_c: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let out_len = out_c * ncols;
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    for b in 0..n {
        let img = &x[b * in_len..(b + 1) * in_len];
        let col_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        let y = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (o, chunk) in y.chunks_mut(ncols).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_c,
            rows,
            ncols,
            T::one(),
            weight,
            (rows as isize, 1),
            col_ref,
            (ncols as isize, 1),
            beta,
            y,
            (ncols as isize, 1),
        );
    }
    out
}

/// Accumulates kernel, bias and (optionally) input gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    out_c: usize,
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: Option<&mut [T]>,
    mut grad_x: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let out_len = out_c * ncols;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    let mut grad_cols = if grad_x.is_some() && !g.is_pointwise() {
        vec![T::zero(); rows * ncols]
    } else {
        Vec::new()
    };

    if let Some(gb) = grad_b {
        for b in 0..n {
            let gy = &grad_out[b * out_len..(b + 1) * out_len];
            for (o, chunk) in gy.chunks(ncols).enumerate() {
                gb[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }

    for b in 0..n {
        let img = &x[b * in_len..(b + 1) * in_len];
        let gy = &grad_out[b * out_len..(b + 1) * out_len];
        let col_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(
            out_c,
            ncols,
            rows,
            T::one(),
            gy,
            (ncols as isize, 1),
            col_ref,
            (1, ncols as isize),
            T::one(),
            grad_w,
            (rows as isize, 1),
        );
        if let Some(gx) = grad_x.as_deref_mut() {
            let gx_img = &mut gx[b * in_len..(b + 1) * in_len];
            // dcols = Wᵀ · dY
            if g.is_pointwise() {
                T::gemm(
                    rows,
                    out_c,
                    ncols,
                    T::one(),
                    weight,
                    (1, rows as isize),
                    gy,
                    (ncols as isize, 1),
                    T::one(),
                    gx_img,
                    (ncols as isize, 1),
                );
            } else {
                T::gemm(
                    rows,
                    out_c,
                    ncols,
                    T::one(),
                    weight,
                    (1, rows as isize),
                    gy,
                    (ncols as isize, 1),
                    T::zero(),
                    &mut grad_cols,
                    (ncols as isize, 1),
                );
                col2im(&grad_cols, g, gx_img);
            }
        }
    }
}

/// `log(1 + Σ exp(z_j))`, stable for large and very negative exponents.
pub fn log1p_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(0.0f64, f64::max);
    if m == 0.0 {
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        // ln_1p only pays off for small sums; ln(1 + s) keeps ln(n) exact for integer s.
        if s < 0.5 {
            s.ln_1p()
        } else {
            (1.0 + s).ln()
        }
    } else {
        m + ((-m).exp() + z.iter().map(|v| (v - m).exp()).sum::<f64>()).ln()
    }
}
