//! Hand-written CPU kernels with explicit backward passes.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

/// Zero-padded depthwise 3x3 correlation of `(B, C, H, W)` with `(C, 1, 3, 3)`.
pub(crate) struct Depthwise3x3 {
    pub dilation: usize,
}

struct Dims {
    planes: usize,
    c: usize,
    h: usize,
    w: usize,
    d: isize,
}

/// Rows/cols `[lo, hi)` of the output that read an in-bounds input at offset `off`.
fn span(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[p] += sum_k k[c,k] * src[p + off_k]`; with `flip` the offsets are negated,
/// which is the adjoint with respect to the input.
fn correlate<T: WithDType>(src: &[T], k: &[T], dims: &Dims, flip: bool) -> Vec<T> {
    let Dims { planes, c, h, w, d } = *dims;
    let mut out = vec![T::zero(); src.len()];
    for plane in 0..planes {
        let ch = plane % c;
        let base = plane * h * w;
        for ky in 0..3 {
            for kx in 0..3 {
                let kv = k[ch * 9 + ky * 3 + kx];
                let sign = if flip { -1 } else { 1 };
                let oy = sign * (ky as isize - 1) * d;
                let ox = sign * (kx as isize - 1) * d;
                let (y0, y1) = span(h, oy);
                let (x0, x1) = span(w, ox);
                for y in y0..y1 {
                    let orow = base + y * w;
                    let srow = base + (y as isize + oy) as usize * w;
                    let dst = &mut out[orow + x0..orow + x1];
                    let s = &src[(srow as isize + x0 as isize + ox) as usize..][..x1 - x0];
                    for (o, v) in dst.iter_mut().zip(s) {
                        *o += kv * *v;
                    }
                }
            }
        }
    }
    out
}

fn weight_grad<T: WithDType>(x: &[T], gy: &[T], dims: &Dims) -> Vec<T> {
    let Dims { planes, c, h, w, d } = *dims;
    let mut gk = vec![T::zero(); c * 9];
    for plane in 0..planes {
        let ch = plane % c;
        let base = plane * h * w;
        for ky in 0..3 {
            for kx in 0..3 {
                let oy = (ky as isize - 1) * d;
                let ox = (kx as isize - 1) * d;
                let (y0, y1) = span(h, oy);
                let (x0, x1) = span(w, ox);
                let mut acc = T::zero();
                for y in y0..y1 {
                    let g = &gy[base + y * w + x0..base + y * w + x1];
                    let srow = base + (y as isize + oy) as usize * w;
                    let s = &x[(srow as isize + x0 as isize + ox) as usize..][..x1 - x0];
                    for (a, b) in g.iter().zip(s) {
                        acc += *a * *b;
                    }
                }
                gk[ch * 9 + ky * 3 + kx] += acc;
            }
        }
    }
    gk
}

fn dims_of(layout: &Layout, dilation: usize) -> candle_core::Result<Dims> {
    let (b, c, h, w) = layout.shape().dims4()?;
    Ok(Dims { planes: b * c, c, h, w, d: dilation as isize })
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("depthwise3x3 expects contiguous inputs"),
    }
}

impl CustomOp2 for Depthwise3x3 {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims_of(l1, self.dilation)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                CpuStorage::F32(correlate(contiguous(x, l1)?, contiguous(k, l2)?, &dims, false))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                CpuStorage::F64(correlate(contiguous(x, l1)?, contiguous(k, l2)?, &dims, false))
            }
            _ => candle_core::bail!("depthwise3x3 supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let x = x.contiguous()?;
        let dims = dims_of(x.layout(), self.dilation)?;
        fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
            t.flatten_all()?.to_vec1::<T>()
        }
        let (gx, gk) = match x.dtype() {
            candle_core::DType::F32 => {
                let (xv, kv, gv) = (host::<f32>(&x)?, host::<f32>(k)?, host::<f32>(&grad)?);
                (
                    Tensor::from_vec(correlate(&gv, &kv, &dims, true), x.shape(), x.device())?,
                    Tensor::from_vec(weight_grad(&xv, &gv, &dims), k.shape(), k.device())?,
                )
            }
            candle_core::DType::F64 => {
                let (xv, kv, gv) = (host::<f64>(&x)?, host::<f64>(k)?, host::<f64>(&grad)?);
                (
                    Tensor::from_vec(correlate(&gv, &kv, &dims, true), x.shape(), x.device())?,
                    Tensor::from_vec(weight_grad(&xv, &gv, &dims), k.shape(), k.device())?,
                )
            }
            dt => candle_core::bail!("depthwise3x3 backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gk)))
    }
}
