//! Dense f64 building blocks with hand-written backward passes.
//!
//! Layouts: vectors are `Array1`, feature maps are `(C, H, W)`, linear
//! weights are `(out, in)`, convolution weights are `(C_out, C_in, k, k)`
//! and transposed-convolution weights are `(C_in, C_out, k, k)`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    /// Weights drawn from `N(0, std²)`, zero bias.
    pub fn normal<R: Rng + ?Sized>(out: usize, inp: usize, std: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        Linear {
            weight: Array2::from_shape_simple_fn((out, inp), || n.sample(rng)),
            bias: Array1::zeros(out),
        }
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView1<'_, f64>,
        grad_out: ArrayView1<'_, f64>,
        grad: &mut Linear,
    ) -> Array1<f64> {
        for (mut row, &g) in grad.weight.rows_mut().into_iter().zip(grad_out.iter()) {
            row.scaled_add(g, &x);
        }
        grad.bias += &grad_out;
        self.weight.t().dot(&grad_out)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

pub fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise L2 normalization. Returns the normalized rows and their norms.
pub fn l2_normalize_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut out = x.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    (out, norms)
}

/// Backward of `y = x / |x|` for one row: `dx = (dy - y (y·dy)) / |x|`.
pub fn l2_normalize_backward(
    y: ArrayView1<'_, f64>,
    norm: f64,
    grad_y: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let proj = y.dot(&grad_y);
    (&grad_y - &(&y * proj)) / norm
}

/// Plain 2-D convolution of a `(C_in, H, W)` map with zero padding.
pub fn conv2d(
    x: ArrayView3<'_, f64>,
    weight: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let (cout, wcin, k, _) = weight.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Array3::zeros((cout, oh, ow));
    for co in 0..cout {
        let wk = weight.index_axis(Axis(0), co);
        let mut plane = out.index_axis_mut(Axis(0), co);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += wk[[ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
                plane[[oy, ox]] = acc;
            }
        }
    }
    out
}

pub fn avg_pool2(x: ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        0.25 * (x[[ch, 2 * y, 2 * xx]]
            + x[[ch, 2 * y + 1, 2 * xx]]
            + x[[ch, 2 * y, 2 * xx + 1]]
            + x[[ch, 2 * y + 1, 2 * xx + 1]])
    })
}

/// Transposed 2-D convolution with square kernel, matching the usual
/// `out = (in - 1)·stride - 2·padding + k + output_padding` size rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    /// `(C_in, C_out, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, output_padding: usize) -> Self {
        ConvTranspose2d {
            weight: Array4::zeros((cin, cout, k, k)),
            bias: Array1::zeros(cout),
            stride,
            padding,
            output_padding,
        }
    }

    /// Uniform `±1/sqrt(C_out·k²)` weights and zero bias. A random bias of
    /// that size can outweigh small inputs and leave a narrow stage's ReLU
    /// dead from the start.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (_, cout, k, _) = self.weight.dim();
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        self.weight.mapv_inplace(|_| u.sample(rng));
        self.bias.fill(0.0);
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel() + self.output_padding - 2 * self.padding
    }

    /// Valid kernel offsets for input position `i` along an output axis of
    /// length `n`: `(first k, first output index)` and the count.
    fn kernel_span(&self, i: usize, n: usize) -> (usize, usize, usize) {
        let k = self.kernel();
        let base = (i * self.stride) as isize - self.padding as isize;
        let k0 = (-base).max(0) as usize;
        let k1 = ((n as isize - base).min(k as isize)).max(0) as usize;
        (k0, (base + k0 as isize).max(0) as usize, k1.saturating_sub(k0))
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let (wcin, cout, k, _) = self.weight.dim();
        assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let ws = self.weight.as_slice().expect("standard layout");
        let mut out = Array3::zeros((cout, oh, ow));
        for co in 0..cout {
            out.index_axis_mut(Axis(0), co).fill(self.bias[co]);
        }
        let os = out.as_slice_mut().expect("standard layout");
        let spans: Vec<_> = (0..w).map(|ix| self.kernel_span(ix, ow)).collect();
        for ci in 0..cin {
            for co in 0..cout {
                let wk = &ws[(ci * cout + co) * k * k..][..k * k];
                let plane = &mut os[co * oh * ow..][..oh * ow];
                for iy in 0..h {
                    let xrow = &xs[(ci * h + iy) * w..][..w];
                    let (ky0, oy0, ny) = self.kernel_span(iy, oh);
                    for dy in 0..ny {
                        let wrow = &wk[(ky0 + dy) * k..][..k];
                        let orow = &mut plane[(oy0 + dy) * ow..][..ow];
                        for (ix, &v) in xrow.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let (kx0, ox0, nx) = spans[ix];
                            for (o, wv) in orow[ox0..ox0 + nx].iter_mut().zip(&wrow[kx0..kx0 + nx]) {
                                *o += v * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView3<'_, f64>,
        grad_out: ArrayView3<'_, f64>,
        grad: &mut ConvTranspose2d,
    ) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let (_, cout, k, _) = self.weight.dim();
        let (_, oh, ow) = grad_out.dim();
        for co in 0..cout {
            grad.bias[co] += grad_out.index_axis(Axis(0), co).sum();
        }
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let g = grad_out.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let ws = self.weight.as_slice().expect("standard layout");
        let gw = grad.weight.as_slice_mut().expect("standard layout");
        let mut gx = Array3::zeros((cin, h, w));
        let gxs = gx.as_slice_mut().expect("standard layout");
        let spans: Vec<_> = (0..w).map(|ix| self.kernel_span(ix, ow)).collect();
        for ci in 0..cin {
            for co in 0..cout {
                let off = (ci * cout + co) * k * k;
                let wk = &ws[off..][..k * k];
                let gwk = &mut gw[off..][..k * k];
                let plane = &gs[co * oh * ow..][..oh * ow];
                for iy in 0..h {
                    let xrow = &xs[(ci * h + iy) * w..][..w];
                    let gxrow = &mut gxs[(ci * h + iy) * w..][..w];
                    let (ky0, oy0, ny) = self.kernel_span(iy, oh);
                    for dy in 0..ny {
                        let wrow = &wk[(ky0 + dy) * k..][..k];
                        let gwrow = &mut gwk[(ky0 + dy) * k..][..k];
                        let grow = &plane[(oy0 + dy) * ow..][..ow];
                        for ix in 0..w {
                            let v = xrow[ix];
                            let (kx0, ox0, nx) = spans[ix];
                            let gseg = &grow[ox0..ox0 + nx];
                            let mut acc = 0.0;
                            for ((gv, wv), gwv) in gseg.iter().zip(&wrow[kx0..kx0 + nx]).zip(&mut gwrow[kx0..kx0 + nx]) {
                                acc += gv * wv;
                                *gwv += gv * v;
                            }
                            gxrow[ix] += acc;
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Source taps for bilinear resampling along one axis with half-pixel
/// centers (no corner alignment): `(i0, i1, weight of i1)`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize(x: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        let mut o = out.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - wx) + plane[[y0, x1]] * wx;
                let bot = plane[[y1, x0]] * (1.0 - wx) + plane[[y1, x1]] * wx;
                o[[oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward(grad_out: ArrayView3<'_, f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = grad_out.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gx = Array3::zeros((c, h, w));
    for ch in 0..c {
        let g = grad_out.index_axis(Axis(0), ch);
        let mut gi = gx.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = g[[oy, ox]];
                gi[[y0, x0]] += v * (1.0 - wy) * (1.0 - wx);
                gi[[y0, x1]] += v * (1.0 - wy) * wx;
                gi[[y1, x0]] += v * wy * (1.0 - wx);
                gi[[y1, x1]] += v * wy * wx;
            }
        }
    }
    gx
}

/// Spatial mean of each channel of a `(C, H, W)` map.
pub fn spatial_mean(x: ArrayView3<'_, f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    x.to_shape((c, h * w))
        .expect("contiguous reshape")
        .mean_axis(Axis(1))
        .expect("non-empty map")
}

/// Stacks equally sized vectors into rows.
pub fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(r);
    }
    out
}
