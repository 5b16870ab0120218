//! Raw forward/backward kernels over row-major slices. The tape wires these together;
//! nothing here knows about graph nodes.

use crate::error::{Error, Result};

/// Spatial padding for [`crate::tensor::Tape::conv2d`]. Both modes are "same" padding:
/// output extents are `ceil(extent / stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    SameZero,
    /// Zero padding vertically, wrap-around horizontally (columns `0` and `W-1` adjacent).
    SameCircularHorizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub circular: bool,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        padding: Padding,
        stride: usize,
    ) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || bias.len() != 1 {
            return Err(Error::invalid(format!(
                "conv2d expects HxWxCin input, KhxKwxCinxCout kernel, Cout bias; got {input:?}, {kernel:?}, {bias:?}"
            )));
        }
        let (h, w, cin) = (input[0], input[1], input[2]);
        let (kh, kw, kcin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::invalid(format!(
                "conv2d input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if bias[0] != cout {
            return Err(Error::invalid(format!(
                "conv2d bias has {} entries, kernel has {cout} outputs",
                bias[0]
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let pad_total = |out: usize, k: usize, n: usize| ((out - 1) * stride + k).saturating_sub(n);
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh,
            ow,
            pad_top: pad_total(oh, kh, h) / 2,
            pad_left: pad_total(ow, kw, w) / 2,
            circular: padding == Padding::SameCircularHorizontal,
        })
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    #[inline]
    fn src_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if self.circular {
            Some(ix.rem_euclid(self.w as isize) as usize)
        } else {
            (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.oh * g.ow * cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * cout..][..cout];
            o.copy_from_slice(b);
            for ky in 0..g.kh {
                let Some(iy) = g.src_row(oy, ky) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = g.src_col(ox, kx) else {
                        continue;
                    };
                    let xs = &x[(iy * g.w + ix) * cin..][..cin];
                    let ks = &k[(ky * g.kw + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let row = &ks[ci * cout..][..cout];
                        for (ov, &kv) in o.iter_mut().zip(row) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dk: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let (cin, cout) = (g.cin, g.cout);
    let taps = g.kh * g.kw;
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dk = need[1].then(|| vec![0.0; k.len()]);
    let db = need[2].then(|| {
        let mut db = vec![0.0; cout];
        for pix in gout.chunks_exact(cout) {
            for (d, &v) in db.iter_mut().zip(pix) {
                *d += v;
            }
        }
        db
    });
    if dx.is_none() && dk.is_none() {
        return ConvGrads { dx, dk, db };
    }
    // Transposed kernel (tap, cout, cin) so the input-gradient update runs contiguously over cin.
    let kt = dx.is_some().then(|| {
        let mut kt = vec![0.0; k.len()];
        for tap in 0..taps {
            for ci in 0..cin {
                for co in 0..cout {
                    kt[(tap * cout + co) * cin + ci] = k[(tap * cin + ci) * cout + co];
                }
            }
        }
        kt
    });
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &gout[(oy * g.ow + ox) * cout..][..cout];
            for ky in 0..g.kh {
                let Some(iy) = g.src_row(oy, ky) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = g.src_col(ox, kx) else {
                        continue;
                    };
                    let tap = ky * g.kw + kx;
                    let base = (iy * g.w + ix) * cin;
                    if let Some(dk) = dk.as_mut() {
                        let xs = &x[base..][..cin];
                        let dks = &mut dk[tap * cin * cout..][..cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let row = &mut dks[ci * cout..][..cout];
                            for (d, &gv) in row.iter_mut().zip(go) {
                                *d += xv * gv;
                            }
                        }
                    }
                    if let (Some(dx), Some(kt)) = (dx.as_mut(), kt.as_ref()) {
                        let dxs = &mut dx[base..][..cin];
                        let kts = &kt[tap * cout * cin..][..cout * cin];
                        for (co, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &kts[co * cin..][..cin];
                            for (d, &kv) in dxs.iter_mut().zip(row) {
                                *d += gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dk, db }
}

pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut out = b.to_vec();
    for (i, &xv) in x.iter().enumerate() {
        let row = &w[i * m..][..m];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
    out
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Maps every input element to its output slot for a reduction over `axes`.
pub(crate) struct ReducePlan {
    pub out_shape: Vec<usize>,
    pub out_index: Vec<usize>,
    pub group: usize,
}

impl ReducePlan {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::invalid(format!(
                    "reduce axis {a} out of range for rank {}",
                    shape.len()
                )));
            }
            if reduced[a] {
                return Err(Error::invalid(format!("reduce axis {a} listed twice")));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        let group = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();
        // Output stride of each input axis; zero for reduced axes.
        let mut out_stride = vec![0; shape.len()];
        let mut s = 1;
        for ax in (0..shape.len()).rev() {
            if !reduced[ax] {
                out_stride[ax] = s;
                s *= shape[ax];
            }
        }
        let n: usize = shape.iter().product();
        let mut out_index = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let mut cur = 0usize;
        for _ in 0..n {
            out_index.push(cur);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                cur += out_stride[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                cur -= out_stride[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(ReducePlan {
            out_shape,
            out_index,
            group,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }
}

/// Max reduction. Returns values and, per output slot, the flat input index of the
/// first maximal element in row-major order.
pub(crate) fn reduce_max(x: &[f64], plan: &ReducePlan) -> (Vec<f64>, Vec<usize>) {
    let m = plan.out_len();
    let mut out = vec![f64::NEG_INFINITY; m];
    let mut arg = vec![usize::MAX; m];
    for (i, (&v, &o)) in x.iter().zip(&plan.out_index).enumerate() {
        if arg[o] == usize::MAX || v > out[o] {
            out[o] = v;
            arg[o] = i;
        }
    }
    (out, arg)
}

pub(crate) fn reduce_mean(x: &[f64], plan: &ReducePlan) -> Vec<f64> {
    let mut out = vec![0.0; plan.out_len()];
    for (&v, &o) in x.iter().zip(&plan.out_index) {
        out[o] += v;
    }
    let n = plan.group as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_offsets_follow_total_split() {
        let g = ConvGeom::new(&[8, 8, 1], &[3, 3, 1, 1], &[1], Padding::SameZero, 2).unwrap();
        assert_eq!((g.oh, g.ow), (4, 4));
        assert_eq!((g.pad_top, g.pad_left), (0, 0));
        let g = ConvGeom::new(&[7, 5, 1], &[5, 5, 1, 1], &[1], Padding::SameZero, 1).unwrap();
        assert_eq!((g.oh, g.ow, g.pad_top, g.pad_left), (7, 5, 2, 2));
        let g = ConvGeom::new(&[7, 7, 1], &[3, 3, 1, 1], &[1], Padding::SameZero, 2).unwrap();
        assert_eq!((g.oh, g.ow, g.pad_top), (4, 4, 1));
    }

    #[test]
    fn reduce_plan_maps_middle_axis() {
        let plan = ReducePlan::new(&[2, 3, 2], &[1]).unwrap();
        assert_eq!(plan.out_shape, vec![2, 2]);
        assert_eq!(plan.group, 3);
        assert_eq!(plan.out_index, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn reduce_plan_rejects_bad_axes() {
        assert!(ReducePlan::new(&[2, 3], &[2]).is_err());
        assert!(ReducePlan::new(&[2, 3], &[1, 1]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert!(sigmoid(800.0) <= 1.0);
    }
}
