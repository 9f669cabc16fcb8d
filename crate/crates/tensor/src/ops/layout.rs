//! Shape manipulation: reshape, axis permutation, concatenation and slicing,
//! 2× bilinear upsampling and 2×2 patch merging.

use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` (laid out as `in_shape`) into the axis order `perm`.
fn permute(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = in_shape.len();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if nd == 0 {
        return data.to_vec();
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Source taps for 2× bilinear upsampling with half-pixel centres
/// (align-corners false): output `o` reads `(i0, i1, w0, w1)`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// (batch, H, W, C) view of a `[..., H, W, C]` shape.
fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let nd = shape.len();
    if nd < 3 {
        return Err(shape_err(op, format!("expected [..., H, W, C], got {shape:?}")));
    }
    let batch = shape[..nd - 3].iter().product();
    Ok((batch, shape[nd - 3], shape[nd - 2], shape[nd - 1]))
}

/// Swin ordering of the four 2×2 neighbours: (dy, dx).
const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let nd = xv.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("transpose", format!("{perm:?} is not a permutation of {nd} axes")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let data = permute(xv.data(), xv.shape(), perm);
        self.push(Tensor::from_parts(shape, data), Op::Transpose { x, perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(shape_err("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.transpose(x, &perm)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} cannot join {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis })
    }

    /// `x[..., start..start + len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err(
                "split",
                format!("range {start}..{} on axis {axis} is outside {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start })
    }

    /// Cuts `x` along `axis` into consecutive pieces of the given sizes,
    /// which must add up to the axis length. Inverse of [`Tape::concat`].
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check(x)?;
        let s = self.shape(x);
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(shape_err("split", format!("sizes {sizes:?} do not partition axis {axis} of {s:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// 2× bilinear upsampling of `[..., H, W, C]` with half-pixel centres
    /// (align-corners false); channels are interpolated independently.
    pub fn bilinear_upsample_2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (batch, h, w, c) = spatial("bilinear_upsample_2x", xv.shape())?;
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let d = xv.data();
        let mut out = vec![0.0; batch * 4 * h * w * c];
        for b in 0..batch {
            let src = &d[b * h * w * c..(b + 1) * h * w * c];
            let dst = &mut out[b * 4 * h * w * c..(b + 1) * 4 * h * w * c];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let o = (oy * 2 * w + ox) * c;
                    for (corner, wt) in [
                        ((y0 * w + x0) * c, wy0 * wx0),
                        ((y0 * w + x1) * c, wy0 * wx1),
                        ((y1 * w + x0) * c, wy1 * wx0),
                        ((y1 * w + x1) * c, wy1 * wx1),
                    ] {
                        if wt != 0.0 {
                            dst[o..o + c]
                                .iter_mut()
                                .zip(&src[corner..corner + c])
                                .for_each(|(a, v)| *a += wt * v);
                        }
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        let nd = shape.len();
        shape[nd - 3] *= 2;
        shape[nd - 2] *= 2;
        self.push(Tensor::from_parts(shape, out), Op::Upsample2x { x })
    }

    /// Space-to-channel merge of each 2×2 neighbourhood:
    /// `[..., H, W, C]` → `[..., H/2, W/2, 4C]`.
    pub fn patch_merge(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (batch, h, w, c) = spatial("patch_merge", xv.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("patch_merge", format!("spatial size {h}x{w} is not even")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = Vec::with_capacity(d.len());
        for b in 0..batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    for (dy, dx) in MERGE_ORDER {
                        let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        out.extend_from_slice(&d[s..s + c]);
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        let nd = shape.len();
        shape[nd - 3] = h2;
        shape[nd - 2] = w2;
        shape[nd - 1] = 4 * c;
        self.push(Tensor::from_parts(shape, out), Op::PatchMerge { x })
    }
}

pub(crate) fn transpose_backward(out_shape: &[usize], perm: &[usize], g: &[f64]) -> Vec<f64> {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    permute(g, out_shape, &inverse)
}

pub(crate) fn concat_backward(shapes: &[&[usize]], axis: usize, g: &[f64]) -> Vec<Vec<f64>> {
    let base = shapes[0];
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (s, dst) in shapes.iter().zip(grads.iter_mut()) {
            let chunk = s[axis] * inner;
            dst.extend_from_slice(&g[offset..offset + chunk]);
            offset += chunk;
        }
    }
    grads
}

pub(crate) fn slice_backward(in_shape: &[usize], out_shape: &[usize], axis: usize, start: usize, g: &[f64]) -> Vec<f64> {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let len = out_shape[axis];
    let mut dx = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        let to = (o * in_shape[axis] + start) * inner;
        dx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}

pub(crate) fn upsample2x_backward(in_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let nd = in_shape.len();
    let batch: usize = in_shape[..nd - 3].iter().product();
    let (h, w, c) = (in_shape[nd - 3], in_shape[nd - 2], in_shape[nd - 1]);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = vec![0.0; batch * h * w * c];
    for b in 0..batch {
        let src = &g[b * 4 * h * w * c..(b + 1) * 4 * h * w * c];
        let dst = &mut dx[b * h * w * c..(b + 1) * h * w * c];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let o = (oy * 2 * w + ox) * c;
                for (corner, wt) in [
                    ((y0 * w + x0) * c, wy0 * wx0),
                    ((y0 * w + x1) * c, wy0 * wx1),
                    ((y1 * w + x0) * c, wy1 * wx0),
                    ((y1 * w + x1) * c, wy1 * wx1),
                ] {
                    if wt != 0.0 {
                        dst[corner..corner + c]
                            .iter_mut()
                            .zip(&src[o..o + c])
                            .for_each(|(a, v)| *a += wt * v);
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn patch_merge_backward(in_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let nd = in_shape.len();
    let batch: usize = in_shape[..nd - 3].iter().product();
    let (h, w, c) = (in_shape[nd - 3], in_shape[nd - 2], in_shape[nd - 1]);
    let mut dx = vec![0.0; g.len()];
    let mut src = 0;
    for b in 0..batch {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for (dy, dxo) in MERGE_ORDER {
                    let d = ((b * h + 2 * y + dy) * w + 2 * xx + dxo) * c;
                    dx[d..d + c].copy_from_slice(&g[src..src + c]);
                    src += c;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(tape: &mut Tape, h: usize, w: usize, vals: &[f64]) -> Var {
        tape.constant(Tensor::new(&[h, w, 1], vals.to_vec()).unwrap())
    }

    #[test]
    fn upsample_single_pixel_and_constants() {
        let mut tape = Tape::new();
        let one = grid(&mut tape, 1, 1, &[7.5]);
        let up = tape.bilinear_upsample_2x(one).unwrap();
        assert_eq!(tape.shape(up), &[2, 2, 1]);
        assert_eq!(tape.value(up).data(), &[7.5; 4]);

        let c = tape.constant(Tensor::full(&[3, 5, 2], -1.25).unwrap());
        let up = tape.bilinear_upsample_2x(c).unwrap();
        assert_eq!(tape.shape(up), &[6, 10, 2]);
        assert!(tape.value(up).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn upsample_2x2_matches_hand_computed_grid() {
        // Half-pixel centres: rows/cols map to weights (1), (3/4, 1/4),
        // (1/4, 3/4), (1) with edge clamping.
        #[rustfmt::skip]
        let expected = [
            0.0, 0.25, 0.75, 1.0,
            0.5, 0.75, 1.25, 1.5,
            1.5, 1.75, 2.25, 2.5,
            2.0, 2.25, 2.75, 3.0,
        ];
        let mut tape = Tape::new();
        let x = grid(&mut tape, 2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let up = tape.bilinear_upsample_2x(x).unwrap();
        assert_eq!(tape.value(up).data(), &expected);
    }

    #[test]
    fn patch_merge_uses_swin_neighbour_order() {
        let mut tape = Tape::new();
        let x = grid(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m = tape.patch_merge(x).unwrap();
        assert_eq!(tape.shape(m), &[1, 1, 4]);
        assert_eq!(tape.value(m).data(), &[1.0, 3.0, 2.0, 4.0]);
        let odd = grid(&mut tape, 1, 2, &[1.0, 2.0]);
        assert!(tape.patch_merge(odd).is_err());
    }

    #[test]
    fn transpose_general_permutation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let t = tape.transpose(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(tape.transpose(x, &[0, 0]).is_err());
    }

    #[test]
    fn concat_then_split_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 2, 2], (10..18).map(f64::from).collect()).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        let parts = tape.split(c, 1, &[1, 2]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
    }
}
