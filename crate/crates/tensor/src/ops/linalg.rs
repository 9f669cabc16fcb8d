//! Matrix products and 2D convolution.

use crate::error::{shape_err, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op` is an
/// optional transpose. `a` is `m×k` after `op`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch count, rows and inner dimension of a `[..., m, k]` operand.
fn split_matrix(shape: &[usize]) -> (usize, usize, usize) {
    let nd = shape.len();
    let batch = shape[..nd - 2].iter().product();
    (batch, shape[nd - 2], shape[nd - 1])
}

impl Tape {
    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`. `b` is either a plain `[k, n]` matrix shared by
    /// every batch entry, or `[..., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-D, got {sa:?} and {sb:?}")));
        }
        let (batch, m, k) = split_matrix(&sa);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let broadcast = sb.len() == 2;
        if !broadcast && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(shape_err("matmul", format!("batch dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if broadcast {
            gemm(batch * m, k, n, ad, false, bd, false, 0.0, &mut out);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b })
    }

    /// 2D convolution over `[B, H, W, Cin]` with a `[k, k, Cin, Cout]` kernel
    /// and `[Cout]` bias. `k` is 1 or 3; a 3×3 kernel uses stride 1 and zero
    /// padding 1, so the spatial size is preserved.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        let (sx, sw, sbias) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("expected [B,H,W,C] input and [k,k,Cin,Cout] kernel, got {sx:?} and {sw:?}")));
        }
        let kernel = sw[0];
        if sw[1] != kernel || !(kernel == 1 || kernel == 3) {
            return Err(shape_err("conv2d", format!("kernel must be 1x1 or 3x3, got {sw:?}")));
        }
        if sw[2] != sx[3] {
            return Err(shape_err("conv2d", format!("input has {} channels but kernel expects {}", sx[3], sw[2])));
        }
        if sbias != [sw[3]] {
            return Err(shape_err("conv2d", format!("bias {sbias:?} does not match {} output channels", sw[3])));
        }
        let geom = ConvGeom { b: sx[0], h: sx[1], w: sx[2], cin: sx[3], cout: sw[3], k: kernel };
        let rows = geom.b * geom.h * geom.w;
        let mut out = vec![0.0; rows * geom.cout];
        let bias_v = self.value(bias).data();
        for row in out.chunks_exact_mut(geom.cout) {
            row.copy_from_slice(bias_v);
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        if kernel == 1 {
            gemm(rows, geom.cin, geom.cout, xd, false, wd, false, 1.0, &mut out);
        } else {
            let cols = im2col(xd, &geom);
            gemm(rows, 9 * geom.cin, geom.cout, &cols, false, wd, false, 1.0, &mut out);
        }
        let shape = vec![geom.b, geom.h, geom.w, geom.cout];
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b: bias })
    }
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (batch, m, k) = split_matrix(a.shape());
    let n = b.shape()[b.ndim() - 1];
    let (ad, bd) = (a.data(), b.data());
    if b.ndim() == 2 {
        let da = need_a.then(|| {
            let mut da = vec![0.0; batch * m * k];
            gemm(batch * m, n, k, g, false, bd, true, 0.0, &mut da);
            da
        });
        let db = need_b.then(|| {
            let mut db = vec![0.0; k * n];
            gemm(k, batch * m, n, ad, true, g, false, 0.0, &mut db);
            db
        });
        return (da, db);
    }
    let da = need_a.then(|| {
        let mut da = vec![0.0; batch * m * k];
        for i in 0..batch {
            gemm(
                m,
                n,
                k,
                &g[i * m * n..(i + 1) * m * n],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                true,
                0.0,
                &mut da[i * m * k..(i + 1) * m * k],
            );
        }
        da
    });
    let db = need_b.then(|| {
        let mut db = vec![0.0; batch * k * n];
        for i in 0..batch {
            gemm(
                k,
                m,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                true,
                &g[i * m * n..(i + 1) * m * n],
                false,
                0.0,
                &mut db[i * k * n..(i + 1) * k * n],
            );
        }
        db
    });
    (da, db)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

/// Unfolds 3×3 zero-padded neighbourhoods into rows of `9·Cin` values,
/// ordered (dy, dx, channel) to match the kernel layout.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = 9 * g.cin;
    let mut cols = vec![0.0; g.b * g.h * g.w * width];
    for bi in 0..g.b {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((bi * g.h + y) * g.w + xx) * width;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let src = ((bi * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                        let dst = row + (dy * 3 + dx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = 9 * g.cin;
    let mut x = vec![0.0; g.b * g.h * g.w * g.cin];
    for bi in 0..g.b {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((bi * g.h + y) * g.w + xx) * width;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let dst = ((bi * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                        let src = row + (dy * 3 + dx) * g.cin;
                        x[dst..dst + g.cin]
                            .iter_mut()
                            .zip(&cols[src..src + g.cin])
                            .for_each(|(a, c)| *a += c);
                    }
                }
            }
        }
    }
    x
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (sx, sw) = (x.shape(), w.shape());
    let geom = ConvGeom { b: sx[0], h: sx[1], w: sx[2], cin: sx[3], cout: sw[3], k: sw[0] };
    let rows = geom.b * geom.h * geom.w;
    let width = geom.k * geom.k * geom.cin;

    let db = need_b.then(|| {
        let mut db = vec![0.0; geom.cout];
        for row in g.chunks_exact(geom.cout) {
            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        db
    });
    let dw = need_w.then(|| {
        let mut dw = vec![0.0; width * geom.cout];
        if geom.k == 1 {
            gemm(width, rows, geom.cout, x.data(), true, g, false, 0.0, &mut dw);
        } else {
            let cols = im2col(x.data(), &geom);
            gemm(width, rows, geom.cout, &cols, true, g, false, 0.0, &mut dw);
        }
        dw
    });
    let dx = need_x.then(|| {
        let mut dcols = vec![0.0; rows * width];
        gemm(rows, geom.cout, width, g, false, w.data(), true, 0.0, &mut dcols);
        if geom.k == 1 {
            dcols
        } else {
            col2im(&dcols, &geom)
        }
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_rule() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3, 4]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let bad = tape.constant(Tensor::zeros(&[4, 4]).unwrap());
        let err = tape.matmul(a, bad).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn conv_1x1_is_a_per_pixel_linear_map() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(&[1, 1, 2, 1], vec![10.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(&[0.5]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 1]);
        assert_eq!(tape.value(y).data(), &[12.5, 34.5]);
    }

    #[test]
    fn conv_3x3_box_filter_counts_neighbours() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3, 1], 1.0).unwrap());
        let w = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0).unwrap());
        let b = tape.constant(Tensor::vector(&[0.0]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
