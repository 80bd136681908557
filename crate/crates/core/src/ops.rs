//! Convolution, pooling, activation and dense kernels with their
//! reverse-mode gradients.
//!
//! Convolutions are cross-correlations (no kernel flip) with zero padding.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::parallel::for_each_chunk;
use crate::scalar::{sigmoid, Scalar};

/// Weights and geometry of a 2D or 3D convolution.
///
/// `weights` is `out × in × k...` (rank 4 for 2D, rank 5 for 3D). Padding is
/// given per spatial axis as `(before, after)`; most kernels pad
/// symmetrically, even-sized kernels that preserve extent pad one less
/// before than after.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    pub weights: Grid<T>,
    pub bias: Option<Grid<T>>,
    pub stride: Vec<usize>,
    pub padding: Vec<(usize, usize)>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        weights: Grid<T>,
        bias: Option<Grid<T>>,
        stride: Vec<usize>,
        padding: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let spatial = weights.rank().checked_sub(2).filter(|&r| r == 2 || r == 3).ok_or_else(|| {
            Error::InvalidArgument(format!("conv weights must be rank 4 or 5, got {}", weights.rank()))
        })?;
        if stride.len() != spatial || padding.len() != spatial {
            return Err(Error::InvalidArgument(format!(
                "expected {spatial} stride/padding entries, got {}/{}",
                stride.len(),
                padding.len()
            )));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.rank() != 1 || b.len() != weights.dim(0) {
                return Err(Error::shape("conv", "bias", weights.dim(0), b.len()));
            }
        }
        Ok(ConvKernel {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Stride 1 with symmetric padding `pad` on every spatial axis.
    pub fn with_padding(weights: Grid<T>, bias: Option<Grid<T>>, pad: usize) -> Result<Self> {
        let spatial = weights.rank().saturating_sub(2);
        Self::new(weights, bias, vec![1; spatial], vec![(pad, pad); spatial])
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn spatial_rank(&self) -> usize {
        self.weights.rank() - 2
    }

    /// Output extents for the given input spatial extents.
    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        let k = &self.weights.shape()[2..];
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let (lo, hi) = self.padding[a];
                let padded = n + lo + hi;
                if padded < k[a] {
                    return Err(Error::shape("conv", format!("spatial {a}"), k[a], padded));
                }
                Ok((padded - k[a]) / self.stride[a] + 1)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    lo: [usize; 3],
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    fn k_len(&self) -> usize {
        self.k.iter().product()
    }

    /// Output index range along `axis` whose input index for tap `kk` is in bounds.
    #[inline]
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (s, lo, n, no) = (self.stride[axis], self.lo[axis], self.inp[axis], self.out[axis]);
        let start = if lo > kk { (lo - kk).div_ceil(s) } else { 0 };
        let end = if n + lo > kk { (n + lo - kk).div_ceil(s).min(no) } else { 0 };
        (start, end.max(start))
    }

    #[inline]
    fn in_index(&self, axis: usize, o: usize, kk: usize) -> usize {
        o * self.stride[axis] + kk - self.lo[axis]
    }
}

fn conv_geom<T: Scalar>(op: &'static str, input: &Grid<T>, kernel: &ConvKernel<T>) -> Result<ConvGeom> {
    let spatial = kernel.spatial_rank();
    if input.rank() != spatial + 1 {
        return Err(Error::shape(op, "rank", spatial + 1, input.rank()));
    }
    if input.dim(0) != kernel.in_channels() {
        return Err(Error::shape(op, "channels", kernel.in_channels(), input.dim(0)));
    }
    let out = kernel.output_extent(&input.shape()[1..])?;
    let off = 3 - spatial;
    let mut g = ConvGeom {
        cin: kernel.in_channels(),
        cout: kernel.out_channels(),
        inp: [1; 3],
        out: [1; 3],
        k: [1; 3],
        stride: [1; 3],
        lo: [0; 3],
    };
    for a in 0..spatial {
        g.inp[off + a] = input.dim(1 + a);
        g.out[off + a] = out[a];
        g.k[off + a] = kernel.weights.dim(2 + a);
        g.stride[off + a] = kernel.stride[a];
        g.lo[off + a] = kernel.padding[a].0;
    }
    Ok(g)
}

fn conv_forward_raw<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let out_len = g.out_len();
    let mut out = vec![T::zero(); g.cout * out_len];
    let (klen, inlen) = (g.k_len(), g.in_len());
    let [id_n, ih_n, iw_n] = g.inp;
    let _ = id_n;
    let [_, oh_n, ow_n] = g.out;
    for_each_chunk(&mut out, out_len, |co, slab| {
        if let Some(b) = bias {
            slab.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            let xin = &x[ci * inlen..(ci + 1) * inlen];
            let wk = &w[(co * g.cin + ci) * klen..(co * g.cin + ci + 1) * klen];
            for kd in 0..g.k[0] {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..g.k[1] {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..g.k[2] {
                        let (w0, w1) = g.valid(2, kw);
                        let wv = wk[(kd * g.k[1] + kh) * g.k[2] + kw];
                        for od in d0..d1 {
                            let id = g.in_index(0, od, kd);
                            for oh in h0..h1 {
                                let ih = g.in_index(1, oh, kh);
                                let xrow = &xin[(id * ih_n + ih) * iw_n..];
                                let orow = &mut slab[(od * oh_n + oh) * ow_n..(od * oh_n + oh + 1) * ow_n];
                                if g.stride[2] == 1 {
                                    let base = w0 + kw - g.lo[2];
                                    for (o, &xv) in orow[w0..w1].iter_mut().zip(&xrow[base..base + (w1 - w0)]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ow in w0..w1 {
                                        orow[ow] += wv * xrow[g.in_index(2, ow, kw)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of a convolution with respect to input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Grid<T>,
    pub weights: Grid<T>,
    pub bias: Option<Grid<T>>,
}

fn conv_backward_raw<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (klen, inlen, out_len) = (g.k_len(), g.in_len(), g.out_len());
    let [_, ih_n, iw_n] = g.inp;
    let [_, oh_n, ow_n] = g.out;

    let mut gw = vec![T::zero(); g.cout * g.cin * klen];
    for_each_chunk(&mut gw, g.cin * klen, |co, gslab| {
        let go = &gout[co * out_len..(co + 1) * out_len];
        for ci in 0..g.cin {
            let xin = &x[ci * inlen..(ci + 1) * inlen];
            for kd in 0..g.k[0] {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..g.k[1] {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..g.k[2] {
                        let (w0, w1) = g.valid(2, kw);
                        let mut acc = T::zero();
                        for od in d0..d1 {
                            let id = g.in_index(0, od, kd);
                            for oh in h0..h1 {
                                let ih = g.in_index(1, oh, kh);
                                let xrow = &xin[(id * ih_n + ih) * iw_n..];
                                let grow = &go[(od * oh_n + oh) * ow_n..];
                                for ow in w0..w1 {
                                    acc += grow[ow] * xrow[g.in_index(2, ow, kw)];
                                }
                            }
                        }
                        gslab[ci * klen + (kd * g.k[1] + kh) * g.k[2] + kw] = acc;
                    }
                }
            }
        }
    });

    let mut gx = vec![T::zero(); g.cin * inlen];
    for_each_chunk(&mut gx, inlen, |ci, gslab| {
        for co in 0..g.cout {
            let go = &gout[co * out_len..(co + 1) * out_len];
            let wk = &w[(co * g.cin + ci) * klen..(co * g.cin + ci + 1) * klen];
            for kd in 0..g.k[0] {
                let (d0, d1) = g.valid(0, kd);
                for kh in 0..g.k[1] {
                    let (h0, h1) = g.valid(1, kh);
                    for kw in 0..g.k[2] {
                        let (w0, w1) = g.valid(2, kw);
                        let wv = wk[(kd * g.k[1] + kh) * g.k[2] + kw];
                        for od in d0..d1 {
                            let id = g.in_index(0, od, kd);
                            for oh in h0..h1 {
                                let ih = g.in_index(1, oh, kh);
                                let grow = &go[(od * oh_n + oh) * ow_n..];
                                let xrow = &mut gslab[(id * ih_n + ih) * iw_n..(id * ih_n + ih + 1) * iw_n];
                                for ow in w0..w1 {
                                    xrow[g.in_index(2, ow, kw)] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let gb = (0..g.cout)
        .map(|co| gout[co * out_len..(co + 1) * out_len].iter().copied().sum())
        .collect();
    (gx, gw, gb)
}

fn conv_forward<T: Scalar>(op: &'static str, input: &Grid<T>, kernel: &ConvKernel<T>) -> Result<Grid<T>> {
    let g = conv_geom(op, input, kernel)?;
    let out = conv_forward_raw(&g, input.data(), kernel.weights.data(), kernel.bias.as_ref().map(|b| b.data()));
    let spatial = kernel.spatial_rank();
    let mut shape = vec![g.cout];
    shape.extend_from_slice(&g.out[3 - spatial..]);
    Grid::from_vec(&shape, out)
}

fn conv_backward<T: Scalar>(
    op: &'static str,
    input: &Grid<T>,
    kernel: &ConvKernel<T>,
    upstream: &Grid<T>,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(op, input, kernel)?;
    if upstream.len() != g.cout * g.out_len() {
        return Err(Error::shape(op, "upstream", g.cout * g.out_len(), upstream.len()));
    }
    let (gx, gw, gb) = conv_backward_raw(&g, input.data(), kernel.weights.data(), upstream.data());
    Ok(ConvGrads {
        input: Grid::from_vec(input.shape(), gx)?,
        weights: Grid::from_vec(kernel.weights.shape(), gw)?,
        bias: match kernel.bias {
            Some(_) => Some(Grid::vector(gb)),
            None => None,
        },
    })
}

/// 2D cross-correlation of a `c_in × h × w` grid.
pub fn conv2d<T: Scalar>(input: &Grid<T>, kernel: &ConvKernel<T>) -> Result<Grid<T>> {
    if kernel.spatial_rank() != 2 {
        return Err(Error::InvalidArgument("conv2d needs a rank-4 kernel".into()));
    }
    conv_forward("conv2d", input, kernel)
}

pub fn conv2d_vjp<T: Scalar>(input: &Grid<T>, kernel: &ConvKernel<T>, upstream: &Grid<T>) -> Result<ConvGrads<T>> {
    conv_backward("conv2d", input, kernel, upstream)
}

/// 3D cross-correlation of a `c_in × f × h × w` grid.
pub fn conv3d<T: Scalar>(input: &Grid<T>, kernel: &ConvKernel<T>) -> Result<Grid<T>> {
    if kernel.spatial_rank() != 3 {
        return Err(Error::InvalidArgument("conv3d needs a rank-5 kernel".into()));
    }
    conv_forward("conv3d", input, kernel)
}

pub fn conv3d_vjp<T: Scalar>(input: &Grid<T>, kernel: &ConvKernel<T>, upstream: &Grid<T>) -> Result<ConvGrads<T>> {
    conv_backward("conv3d", input, kernel, upstream)
}

fn check_conv1d<T: Scalar>(v: &Grid<T>, kernel: &Grid<T>) -> Result<usize> {
    if v.rank() != 1 {
        return Err(Error::shape("conv1d", "rank", 1, v.rank()));
    }
    if kernel.rank() != 1 {
        return Err(Error::shape("conv1d", "kernel rank", 1, kernel.rank()));
    }
    if kernel.len() % 2 == 0 {
        return Err(Error::InvalidArgument(format!("conv1d kernel size must be odd, got {}", kernel.len())));
    }
    Ok(kernel.len() / 2)
}

/// Convolution along the channel axis of a pooled vector, zero padded so the
/// output has the input's length.
pub fn conv1d_cross_channel<T: Scalar>(v: &Grid<T>, kernel: &Grid<T>) -> Result<Grid<T>> {
    let r = check_conv1d(v, kernel)? as isize;
    let (x, k) = (v.data(), kernel.data());
    let n = x.len() as isize;
    let out = (0..n)
        .map(|i| {
            let mut acc = T::zero();
            for (t, &kv) in k.iter().enumerate() {
                let j = i + t as isize - r;
                if (0..n).contains(&j) {
                    acc += kv * x[j as usize];
                }
            }
            acc
        })
        .collect();
    Ok(Grid::vector(out))
}

/// Returns `(d/dv, d/dkernel)`.
pub fn conv1d_cross_channel_vjp<T: Scalar>(
    v: &Grid<T>,
    kernel: &Grid<T>,
    upstream: &Grid<T>,
) -> Result<(Grid<T>, Grid<T>)> {
    let r = check_conv1d(v, kernel)? as isize;
    if upstream.len() != v.len() {
        return Err(Error::shape("conv1d", "upstream", v.len(), upstream.len()));
    }
    let (x, k, g) = (v.data(), kernel.data(), upstream.data());
    let n = x.len() as isize;
    let mut gv = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    for i in 0..n {
        for (t, &kv) in k.iter().enumerate() {
            let j = i + t as isize - r;
            if (0..n).contains(&j) {
                gv[j as usize] += kv * g[i as usize];
                gk[t] += g[i as usize] * x[j as usize];
            }
        }
    }
    Ok((Grid::vector(gv), Grid::vector(gk)))
}

/// Per-channel spatial mean of a `c × h × w` grid.
pub fn global_average_pool<T: Scalar>(x: &Grid<T>) -> Result<Grid<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("global_average_pool", "rank", 3, x.rank()));
    }
    let area = T::of_usize(x.dim(1) * x.dim(2));
    Ok(Grid::vector((0..x.dim(0)).map(|c| x.plane(c).iter().copied().sum::<T>() / area).collect()))
}

pub fn global_average_pool_vjp<T: Scalar>(x: &Grid<T>, upstream: &Grid<T>) -> Result<Grid<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("global_average_pool", "rank", 3, x.rank()));
    }
    if upstream.len() != x.dim(0) {
        return Err(Error::shape("global_average_pool", "upstream", x.dim(0), upstream.len()));
    }
    let plane = x.dim(1) * x.dim(2);
    let area = T::of_usize(plane);
    let mut g = Grid::zeros(x.shape());
    for c in 0..x.dim(0) {
        let v = upstream.data()[c] / area;
        g.plane_mut(c).iter_mut().for_each(|e| *e = v);
    }
    Ok(g)
}

pub fn sigmoid_grid<T: Scalar>(x: &Grid<T>) -> Grid<T> {
    x.map(sigmoid)
}

pub fn sigmoid_vjp<T: Scalar>(x: &Grid<T>, upstream: &Grid<T>) -> Grid<T> {
    x.zip_map(upstream, |v, g| {
        let s = sigmoid(v);
        g * s * (T::one() - s)
    })
}

/// Fully connected layer `y = W x + b` with `W` of shape `out × in`.
pub fn dense<T: Scalar>(x: &Grid<T>, weights: &Grid<T>, bias: &Grid<T>) -> Result<Grid<T>> {
    check_dense(x, weights, bias)?;
    let n = x.len();
    Ok(Grid::vector(
        (0..weights.dim(0))
            .map(|o| {
                let row = &weights.data()[o * n..(o + 1) * n];
                bias.data()[o] + row.iter().zip(x.data()).map(|(&w, &v)| w * v).sum::<T>()
            })
            .collect(),
    ))
}

/// Returns `(d/dx, d/dW, d/db)`.
pub fn dense_vjp<T: Scalar>(
    x: &Grid<T>,
    weights: &Grid<T>,
    bias: &Grid<T>,
    upstream: &Grid<T>,
) -> Result<(Grid<T>, Grid<T>, Grid<T>)> {
    check_dense(x, weights, bias)?;
    if upstream.len() != weights.dim(0) {
        return Err(Error::shape("dense", "upstream", weights.dim(0), upstream.len()));
    }
    let n = x.len();
    let mut gx = vec![T::zero(); n];
    let mut gw = Grid::zeros(weights.shape());
    for (o, &g) in upstream.data().iter().enumerate() {
        let row = &weights.data()[o * n..(o + 1) * n];
        for ((gxi, &w), (gwi, &v)) in gx
            .iter_mut()
            .zip(row)
            .zip(gw.data_mut()[o * n..(o + 1) * n].iter_mut().zip(x.data()))
        {
            *gxi += w * g;
            *gwi = g * v;
        }
    }
    Ok((Grid::vector(gx), gw, upstream.clone()))
}

fn check_dense<T: Scalar>(x: &Grid<T>, weights: &Grid<T>, bias: &Grid<T>) -> Result<()> {
    if weights.rank() != 2 {
        return Err(Error::shape("dense", "weight rank", 2, weights.rank()));
    }
    if weights.dim(1) != x.len() {
        return Err(Error::shape("dense", "in", weights.dim(1), x.len()));
    }
    if bias.len() != weights.dim(0) {
        return Err(Error::shape("dense", "bias", weights.dim(0), bias.len()));
    }
    Ok(())
}

/// Sample locations of the pooling grid: for each of `grid` cells along an
/// axis, the cell center of the box, in index coordinates (cell `j` has its
/// center at continuous coordinate `j + 0.5`).
#[inline]
fn pool_coord<T: Scalar>(start: T, extent: T, cell: usize, grid: usize) -> T {
    start + (T::of_usize(cell) + T::of(0.5)) * extent / T::of_usize(grid) - T::of(0.5)
}

#[inline]
fn sample_at<T: Scalar>(plane: &[T], h: usize, w: usize, i: isize, j: isize) -> T {
    if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
        plane[i as usize * w + j as usize]
    } else {
        T::zero()
    }
}

fn check_box_pool<T: Scalar>(x: &Grid<T>, bx: &Grid<T>) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::shape("bilinear_box_pool", "rank", 3, x.rank()));
    }
    if bx.len() != 4 {
        return Err(Error::shape("bilinear_box_pool", "box", 4, bx.len()));
    }
    Ok(())
}

/// Bilinear samples of each channel at the `grid × grid` cell centers of a
/// box `(x, y, w, h)` given in feature-cell units. Locations outside the map
/// read as zero. Output is `c × grid × grid`.
pub fn bilinear_box_pool<T: Scalar>(x: &Grid<T>, bx: &Grid<T>, grid: usize) -> Result<Grid<T>> {
    check_box_pool(x, bx)?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let b = bx.data();
    let mut out = Grid::zeros(&[c, grid, grid]);
    for gi in 0..grid {
        let v = pool_coord(b[1], b[3], gi, grid);
        let i0 = v.floor();
        let fb = v - i0;
        let i0 = i0.to_isize().unwrap_or(isize::MIN / 2);
        for gj in 0..grid {
            let u = pool_coord(b[0], b[2], gj, grid);
            let j0 = u.floor();
            let fa = u - j0;
            let j0 = j0.to_isize().unwrap_or(isize::MIN / 2);
            for ch in 0..c {
                let p = x.plane(ch);
                let val = (T::one() - fb) * ((T::one() - fa) * sample_at(p, h, w, i0, j0) + fa * sample_at(p, h, w, i0, j0 + 1))
                    + fb * ((T::one() - fa) * sample_at(p, h, w, i0 + 1, j0) + fa * sample_at(p, h, w, i0 + 1, j0 + 1));
                *out.at3_mut(ch, gi, gj) = val;
            }
        }
    }
    Ok(out)
}

/// Returns `(d/dx, d/dbox)`.
pub fn bilinear_box_pool_vjp<T: Scalar>(
    x: &Grid<T>,
    bx: &Grid<T>,
    grid: usize,
    upstream: &Grid<T>,
) -> Result<(Grid<T>, Grid<T>)> {
    check_box_pool(x, bx)?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if upstream.len() != c * grid * grid {
        return Err(Error::shape("bilinear_box_pool", "upstream", c * grid * grid, upstream.len()));
    }
    let b = bx.data();
    let mut gx = Grid::zeros(x.shape());
    let mut gb = [T::zero(); 4];
    let inside = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w;
    for gi in 0..grid {
        let v = pool_coord(b[1], b[3], gi, grid);
        let i0f = v.floor();
        let fb = v - i0f;
        let i0 = i0f.to_isize().unwrap_or(isize::MIN / 2);
        let dv_dh = (T::of_usize(gi) + T::of(0.5)) / T::of_usize(grid);
        for gj in 0..grid {
            let u = pool_coord(b[0], b[2], gj, grid);
            let j0f = u.floor();
            let fa = u - j0f;
            let j0 = j0f.to_isize().unwrap_or(isize::MIN / 2);
            let du_dw = (T::of_usize(gj) + T::of(0.5)) / T::of_usize(grid);
            let mut gu = T::zero();
            let mut gv = T::zero();
            for ch in 0..c {
                let g = upstream.data()[(ch * grid + gi) * grid + gj];
                let p = x.plane(ch);
                let x00 = sample_at(p, h, w, i0, j0);
                let x01 = sample_at(p, h, w, i0, j0 + 1);
                let x10 = sample_at(p, h, w, i0 + 1, j0);
                let x11 = sample_at(p, h, w, i0 + 1, j0 + 1);
                gu += g * ((T::one() - fb) * (x01 - x00) + fb * (x11 - x10));
                gv += g * ((T::one() - fa) * (x10 - x00) + fa * (x11 - x01));
                let weights = [
                    (i0, j0, (T::one() - fb) * (T::one() - fa)),
                    (i0, j0 + 1, (T::one() - fb) * fa),
                    (i0 + 1, j0, fb * (T::one() - fa)),
                    (i0 + 1, j0 + 1, fb * fa),
                ];
                for (i, j, wt) in weights {
                    if inside(i, j) {
                        *gx.at3_mut(ch, i as usize, j as usize) += g * wt;
                    }
                }
            }
            gb[0] += gu;
            gb[2] += gu * du_dw;
            gb[1] += gv;
            gb[3] += gv * dv_dh;
        }
    }
    Ok((gx, Grid::vector(gb.to_vec())))
}

/// Identifier of a differentiable operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Conv1d,
    Conv2d,
    Conv3d,
    Sigmoid,
    ElementwiseMul,
    ElementwiseAdd,
    ScalarScale,
    GlobalAveragePool,
    BilinearBoxPool,
    Dense,
}

impl OpTag {
    pub const ALL: [OpTag; 10] = [
        OpTag::Conv1d,
        OpTag::Conv2d,
        OpTag::Conv3d,
        OpTag::Sigmoid,
        OpTag::ElementwiseMul,
        OpTag::ElementwiseAdd,
        OpTag::ScalarScale,
        OpTag::GlobalAveragePool,
        OpTag::BilinearBoxPool,
        OpTag::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpTag::Conv1d => "conv1d",
            OpTag::Conv2d => "conv2d",
            OpTag::Conv3d => "conv3d",
            OpTag::Sigmoid => "sigmoid",
            OpTag::ElementwiseMul => "elementwise-mul",
            OpTag::ElementwiseAdd => "elementwise-add",
            OpTag::ScalarScale => "scalar-scale",
            OpTag::GlobalAveragePool => "global-average-pool",
            OpTag::BilinearBoxPool => "bilinear-box-pool",
            OpTag::Dense => "dense",
        }
    }
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// A differentiable operation together with its non-differentiable
/// attributes (strides, padding, constants).
///
/// Input conventions:
/// - `Conv1d`: `[v, kernel]`
/// - `Conv2d`, `Conv3d`: `[x, weights, bias]`
/// - `Sigmoid`, `ScalarScale`, `GlobalAveragePool`: `[x]`
/// - `ElementwiseMul`, `ElementwiseAdd`: `[a, b]`
/// - `BilinearBoxPool`: `[x, box]`
/// - `Dense`: `[x, weights, bias]`
#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Conv1d,
    Conv2d { stride: Vec<usize>, padding: Vec<(usize, usize)> },
    Conv3d { stride: Vec<usize>, padding: Vec<(usize, usize)> },
    Sigmoid,
    ElementwiseMul,
    ElementwiseAdd,
    ScalarScale(T),
    GlobalAveragePool,
    BilinearBoxPool { grid: usize },
    Dense,
}

impl<T: Scalar> Op<T> {
    pub fn tag(&self) -> OpTag {
        match self {
            Op::Conv1d => OpTag::Conv1d,
            Op::Conv2d { .. } => OpTag::Conv2d,
            Op::Conv3d { .. } => OpTag::Conv3d,
            Op::Sigmoid => OpTag::Sigmoid,
            Op::ElementwiseMul => OpTag::ElementwiseMul,
            Op::ElementwiseAdd => OpTag::ElementwiseAdd,
            Op::ScalarScale(_) => OpTag::ScalarScale,
            Op::GlobalAveragePool => OpTag::GlobalAveragePool,
            Op::BilinearBoxPool { .. } => OpTag::BilinearBoxPool,
            Op::Dense => OpTag::Dense,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Sigmoid | Op::ScalarScale(_) | Op::GlobalAveragePool => 1,
            Op::Conv1d | Op::ElementwiseMul | Op::ElementwiseAdd | Op::BilinearBoxPool { .. } => 2,
            Op::Conv2d { .. } | Op::Conv3d { .. } | Op::Dense => 3,
        }
    }

    fn kernel(&self, inputs: &[&Grid<T>]) -> Result<ConvKernel<T>> {
        let (stride, padding) = match self {
            Op::Conv2d { stride, padding } | Op::Conv3d { stride, padding } => (stride.clone(), padding.clone()),
            _ => unreachable!("kernel() only for convolutions"),
        };
        ConvKernel::new(inputs[1].clone(), Some(inputs[2].clone()), stride, padding)
    }

    fn check_arity(&self, inputs: &[&Grid<T>]) -> Result<()> {
        if inputs.len() != self.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} inputs, got {}",
                self.tag(),
                self.arity(),
                inputs.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[&Grid<T>]) -> Result<Grid<T>> {
        self.check_arity(inputs)?;
        match self {
            Op::Conv1d => conv1d_cross_channel(inputs[0], inputs[1]),
            Op::Conv2d { .. } => conv2d(inputs[0], &self.kernel(inputs)?),
            Op::Conv3d { .. } => conv3d(inputs[0], &self.kernel(inputs)?),
            Op::Sigmoid => Ok(sigmoid_grid(inputs[0])),
            Op::ElementwiseMul => {
                inputs[0].check_same_shape(inputs[1], "elementwise-mul")?;
                Ok(inputs[0].zip_map(inputs[1], |a, b| a * b))
            }
            Op::ElementwiseAdd => {
                inputs[0].check_same_shape(inputs[1], "elementwise-add")?;
                Ok(inputs[0] + inputs[1])
            }
            Op::ScalarScale(s) => Ok(inputs[0].scaled(*s)),
            Op::GlobalAveragePool => global_average_pool(inputs[0]),
            Op::BilinearBoxPool { grid } => bilinear_box_pool(inputs[0], inputs[1], *grid),
            Op::Dense => dense(inputs[0], inputs[1], inputs[2]),
        }
    }

    /// Cotangents for every input, in input order.
    pub fn vjp(&self, inputs: &[&Grid<T>], upstream: &Grid<T>) -> Result<Vec<Grid<T>>> {
        self.check_arity(inputs)?;
        Ok(match self {
            Op::Conv1d => {
                let (gv, gk) = conv1d_cross_channel_vjp(inputs[0], inputs[1], upstream)?;
                vec![gv, gk]
            }
            Op::Conv2d { .. } | Op::Conv3d { .. } => {
                let k = self.kernel(inputs)?;
                let g = conv_backward(self.tag().name(), inputs[0], &k, upstream)?;
                vec![g.input, g.weights, g.bias.expect("bias present")]
            }
            Op::Sigmoid => vec![sigmoid_vjp(inputs[0], upstream)],
            Op::ElementwiseMul => {
                inputs[0].check_same_shape(inputs[1], "elementwise-mul")?;
                vec![
                    upstream.zip_map(inputs[1], |g, b| g * b),
                    upstream.zip_map(inputs[0], |g, a| g * a),
                ]
            }
            Op::ElementwiseAdd => vec![upstream.clone(), upstream.clone()],
            Op::ScalarScale(s) => vec![upstream.scaled(*s)],
            Op::GlobalAveragePool => vec![global_average_pool_vjp(inputs[0], upstream)?],
            Op::BilinearBoxPool { grid } => {
                let (gx, gb) = bilinear_box_pool_vjp(inputs[0], inputs[1], *grid, upstream)?;
                vec![gx, gb]
            }
            Op::Dense => {
                let (gx, gw, gb) = dense_vjp(inputs[0], inputs[1], inputs[2], upstream)?;
                vec![gx, gw, gb]
            }
        })
    }
}

/// Looks up an op by its tag name; attribute-carrying ops get the given
/// attributes, the rest ignore them.
pub fn vjp<T: Scalar>(tag: &str, op: &Op<T>, inputs: &[&Grid<T>], upstream: &Grid<T>) -> Result<Vec<Grid<T>>> {
    let tag: OpTag = tag.parse()?;
    if tag != op.tag() {
        return Err(Error::InvalidArgument(format!("tag {tag} does not match op {}", op.tag())));
    }
    op.vjp(inputs, upstream)
}
