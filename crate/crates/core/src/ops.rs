//! Differentiable building blocks on single-sample `[C, H, W]` feature maps.
//!
//! Every forward op has a matching backward that takes the forward inputs
//! (not cached intermediates) plus the upstream gradient. Convolutions are
//! lowered to one GEMM through an im2col buffer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{
    Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis,
    LinalgScalar, ScalarOperand,
};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point element type the network and losses are generic over.
/// Training runs in `f32`; gradient verification runs in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + NumAssign
        + LinalgScalar
        + ScalarOperand
        + Sum
        + Send
        + Sync
        + Debug
        + Display
        + Default
        + 'static
{
}

/// Unfold a `[C, H, W]` map into `[C*k*k, H*W]` columns for a same-padded `k x k` kernel.
pub fn im2col<T: Scalar>(input: ArrayView3<T>, k: usize) -> Array2<T> {
    let (c, h, w) = input.dim();
    let pad = k / 2;
    let hw = h * w;
    let mut cols = Array2::<T>::zeros((c * k * k, hw));
    let contiguous = input.as_standard_layout();
    let src = contiguous.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut dst[row * hw..(row + 1) * hw];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx0 = x0 + kx - pad;
                    let sx1 = x1 + kx - pad;
                    out[y * w + x0..y * w + x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` map.
pub fn col2im<T: Scalar>(cols: ArrayView2<T>, c: usize, h: usize, w: usize, k: usize) -> Array3<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut out = Array3::<T>::zeros((c, h, w));
    let contiguous = cols.as_standard_layout();
    let src = contiguous.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &src[row * hw..(row + 1) * hw];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx0 = x0 + kx - pad;
                    for (dx, &g) in col[y * w + x0..y * w + x1].iter().enumerate() {
                        let t = &mut plane[sy * w + sx0 + dx];
                        *t += g;
                    }
                }
            }
        }
    }
    out
}

/// `a` in row-major layout, copying only when needed.
pub fn standard<T: Scalar, D: ndarray::Dimension>(a: ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn flat_weight<T: Scalar>(weight: &ArrayView4<T>) -> Array2<T> {
    let (co, ci, kh, kw) = weight.dim();
    weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("contiguous weight")
}

/// Same-padded, stride-1 2-D convolution. `weight` is `[C_out, C_in, k, k]` with odd `k`.
pub fn conv2d<T: Scalar>(input: ArrayView3<T>, weight: ArrayView4<T>, bias: ArrayView1<T>) -> Array3<T> {
    let (c, h, w) = input.dim();
    let (co, ci, k, k2) = weight.dim();
    assert_eq!(ci, c, "conv2d input channels");
    assert_eq!(k, k2, "square kernels only");
    let w2 = flat_weight(&weight);
    let mut out = if k == 1 {
        let flat = input
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous input");
        w2.dot(&flat)
    } else {
        w2.dot(&im2col(input, k))
    };
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    standard(out).into_shape_with_order((co, h, w)).expect("output reshape")
}

pub struct ConvGrads<T> {
    pub input: Option<Array3<T>>,
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

/// Backward pass of [`conv2d`]. The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: ArrayView3<T>,
    weight: ArrayView4<T>,
    grad_out: ArrayView3<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let (c, h, w) = input.dim();
    let (co, ci, k, _) = weight.dim();
    let g2 = grad_out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, h * w))
        .expect("contiguous grad");
    let cols = if k == 1 {
        input
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous input")
    } else {
        im2col(input, k)
    };
    let gw = g2.dot(&cols.t());
    let gb = g2.sum_axis(Axis(1));
    let gin = need_input.then(|| {
        let w2 = flat_weight(&weight);
        let gcols = w2.t().dot(&g2);
        if k == 1 {
            standard(gcols).into_shape_with_order((c, h, w)).expect("input reshape")
        } else {
            col2im(gcols.view(), c, h, w, k)
        }
    });
    ConvGrads {
        input: gin,
        weight: standard(gw).into_shape_with_order((co, ci, k, k)).expect("weight reshape"),
        bias: gb,
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gate `grad` by the ReLU output `activation` (zero where the unit was inactive).
pub fn relu_backward<T: Scalar>(activation: ArrayView3<T>, mut grad: Array3<T>) -> Array3<T> {
    ndarray::Zip::from(&mut grad)
        .and(&activation)
        .for_each(|g, &a| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
    grad
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn max_pool2<T: Scalar>(input: ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = input.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array3::from_shape_fn((c, ho, wo), |(ci, y, x)| {
        let (y0, x0) = (2 * y, 2 * x);
        let a = input[[ci, y0, x0]];
        let b = input[[ci, y0, x0 + 1]];
        let d = input[[ci, y0 + 1, x0]];
        let e = input[[ci, y0 + 1, x0 + 1]];
        a.max(b).max(d.max(e))
    })
}

/// Route each pooled gradient to the first maximal element of its window.
pub fn max_pool2_backward<T: Scalar>(input: ArrayView3<T>, grad_out: ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = input.dim();
    let (_, ho, wo) = grad_out.dim();
    let mut gin = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let (y0, x0) = (2 * y, 2 * x);
                let mut best = (y0, x0);
                let mut best_v = input[[ci, y0, x0]];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = input[[ci, y0 + dy, x0 + dx]];
                    if v > best_v {
                        best_v = v;
                        best = (y0 + dy, x0 + dx);
                    }
                }
                gin[[ci, best.0, best.1]] += grad_out[[ci, y, x]];
            }
        }
    }
    gin
}

/// Source taps `(i0, i1, w0, w1)` for each output coordinate of a 2x bilinear
/// upsample with half-pixel centers (`align_corners = false`).
fn bilinear_taps<T: Scalar>(n_in: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, T::from_f64_lossy(1.0 - l1), T::from_f64_lossy(l1))
        })
        .collect()
}

pub fn upsample_bilinear2<T: Scalar>(input: ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = input.dim();
    let ty = bilinear_taps::<T>(h);
    let tx = bilinear_taps::<T>(w);
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, oy, ox)| {
        let (y0, y1, wy0, wy1) = ty[oy];
        let (x0, x1, wx0, wx1) = tx[ox];
        wy0 * (wx0 * input[[ci, y0, x0]] + wx1 * input[[ci, y0, x1]])
            + wy1 * (wx0 * input[[ci, y1, x0]] + wx1 * input[[ci, y1, x1]])
    })
}

pub fn upsample_bilinear2_backward<T: Scalar>(grad_out: ArrayView3<T>) -> Array3<T> {
    let (c, ho, wo) = grad_out.dim();
    let (h, w) = (ho / 2, wo / 2);
    let ty = bilinear_taps::<T>(h);
    let tx = bilinear_taps::<T>(w);
    let mut gin = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = grad_out[[ci, oy, ox]];
                gin[[ci, y0, x0]] += g * wy0 * wx0;
                gin[[ci, y0, x1]] += g * wy0 * wx1;
                gin[[ci, y1, x0]] += g * wy1 * wx0;
                gin[[ci, y1, x1]] += g * wy1 * wx1;
            }
        }
    }
    gin
}

pub fn concat_channels<T: Scalar>(a: ArrayView3<T>, b: ArrayView3<T>) -> Array3<T> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("matching spatial dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn naive_conv(input: &Array3<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
        let (c, h, w) = input.dim();
        let (co, _, k, _) = weight.dim();
        let pad = (k / 2) as isize;
        Array3::from_shape_fn((co, h, w), |(o, y, x)| {
            let mut acc = bias[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = x as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += weight[[o, ci, ky, kx]] * input[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in [1, 3] {
            let input = random3(&mut rng, (3, 5, 6));
            let weight = Array::from_shape_simple_fn((4, 3, k, k), || rng.random_range(-1.0..1.0));
            let bias = Array::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let fast = conv2d(input.view(), weight.view(), bias.view());
            let slow = naive_conv(&input, &weight, &bias);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Adjoint identity <A x, y> = <x, A^T y> checks every backward op against its forward.
    #[test]
    fn backward_ops_are_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random3(&mut rng, (2, 4, 6));

        let up = upsample_bilinear2(x.view());
        let gy = random3(&mut rng, up.dim());
        let lhs: f64 = (&up * &gy).sum();
        let rhs: f64 = (&x * &upsample_bilinear2_backward(gy.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let cols = im2col(x.view(), 3);
        let gc = Array::from_shape_simple_fn(cols.dim(), || rng.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &gc).sum();
        let rhs: f64 = (&x * &col2im(gc.view(), 2, 4, 6, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_weight_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random3(&mut rng, (2, 4, 4));
        let mut weight = Array::from_shape_simple_fn((3, 2, 3, 3), || rng.random_range(-1.0..1.0));
        let bias = Array::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let probe = random3(&mut rng, (3, 4, 4));
        let objective = |wt: &Array4<f64>, inp: &Array3<f64>| -> f64 {
            (&conv2d(inp.view(), wt.view(), bias.view()) * &probe).sum()
        };
        let grads = conv2d_backward(input.view(), weight.view(), probe.view(), true);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 1], [2, 0, 1, 2]] {
            let orig = weight[idx];
            weight[idx] = orig + h;
            let up = objective(&weight, &input);
            weight[idx] = orig - h;
            let down = objective(&weight, &input);
            weight[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads.weight[idx]).abs() < 1e-7, "{fd} vs {}", grads.weight[idx]);
        }
        let gin = grads.input.unwrap();
        let mut inp = input.clone();
        for idx in [[0, 0, 0], [1, 3, 2]] {
            let orig = inp[idx];
            inp[idx] = orig + h;
            let up = objective(&weight, &inp);
            inp[idx] = orig - h;
            let down = objective(&weight, &inp);
            inp[idx] = orig;
            assert!(((up - down) / (2.0 * h) - gin[idx]).abs() < 1e-7);
        }
        let bias_fd: f64 = probe.index_axis(Axis(0), 1).sum();
        assert!((grads.bias[1] - bias_fd).abs() < 1e-12);
    }

    #[test]
    fn pool_routes_to_first_max() {
        let x = array![[[1.0, 3.0], [3.0, 0.0]]];
        assert_eq!(max_pool2(x.view()), array![[[3.0]]]);
        let g = max_pool2_backward(x.view(), array![[[2.0]]].view());
        assert_eq!(g, array![[[0.0, 2.0], [0.0, 0.0]]]);
    }

    #[test]
    fn upsample_constant_is_constant() {
        let x = Array3::<f64>::from_elem((1, 3, 3), 0.25);
        assert!(upsample_bilinear2(x.view()).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_interpolates_half_pixel_centers() {
        let x = array![[[0.0, 4.0]]];
        let y = upsample_bilinear2(x.view());
        // output columns sample at source x = 0 (clamped), 0.25, 0.75, 1.0 (clamped)
        assert_eq!(y.slice(ndarray::s![0, 0, ..]).to_vec(), vec![0.0, 1.0, 3.0, 4.0]);
    }
}
