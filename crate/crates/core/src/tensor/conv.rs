//! im2col + GEMM kernels for 3D cross-correlation.

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidStride(stride));
        }
        if xs.len() != 5 || ks.len() != 5 {
            return Err(shape_err(format!(
                "conv3d expects x [B,Cin,D,H,W] and k [Cout,Cin,kd,kh,kw], got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(shape_err(format!(
                "conv3d input channels {} vs kernel channels {}",
                xs[1], ks[1]
            )));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let (n, k) = (xs[2 + a], ks[2 + a]);
            if k % 2 == 0 {
                return Err(shape_err(format!("conv3d kernel extents must be odd: {ks:?}")));
            }
            let span = n + 2 * pad;
            if span < k {
                return Err(shape_err(format!(
                    "conv3d extent {n} with pad {pad} is smaller than kernel {k}"
                )));
            }
            output[a] = (span - k) / stride + 1;
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            input: [xs[2], xs[3], xs[4]],
            kernel: [ks[2], ks[3], ks[4]],
            output,
            stride,
            pad,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    /// For kernel offset `k` along axis `a`, the input index hit by each
    /// output index (None = padding).
    fn taps(&self, a: usize, k: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        (0..self.output[a]).map(move |o| {
            let i = (o * self.stride + k) as isize - self.pad as isize;
            (i >= 0 && (i as usize) < self.input[a]).then_some(i as usize)
        })
    }
}

/// Writes the `[Cin*kvol, P]` patch matrix of one batch element into `cols`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.out_vox();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            let td: Vec<_> = g.taps(0, a).collect();
            for b in 0..kh {
                let th: Vec<_> = g.taps(1, b).collect();
                for c in 0..kw {
                    let tw: Vec<_> = g.taps(2, c).collect();
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for zd in td.iter().take(od) {
                        for zh in th.iter().take(oh) {
                            match (zd, zh) {
                                (Some(zd), Some(zh)) => {
                                    let base = (zd * ih + zh) * iw;
                                    for zw in tw.iter().take(ow) {
                                        dst[q] = zw.map_or(0.0, |w| xc[base + w]);
                                        q += 1;
                                    }
                                }
                                _ => {
                                    dst[q..q + ow].fill(0.0);
                                    q += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one input element.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.out_vox();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            let td: Vec<_> = g.taps(0, a).collect();
            for b in 0..kh {
                let th: Vec<_> = g.taps(1, b).collect();
                for c in 0..kw {
                    let tw: Vec<_> = g.taps(2, c).collect();
                    let src = &cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for zd in td.iter().take(od) {
                        for zh in th.iter().take(oh) {
                            if let (Some(zd), Some(zh)) = (zd, zh) {
                                let base = (zd * ih + zh) * iw;
                                for (zw, v) in tw.iter().zip(&src[q..q + ow]) {
                                    if let Some(w) = zw {
                                        xc[base + w] += v;
                                    }
                                }
                            }
                            q += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Row-major `c[m,n] = beta*c + a[m,k] * b[k,n]`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe dense row-major
    // (or transposed) layouts that stay within those bounds.
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

pub(crate) fn forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (rows, p) = (g.col_rows(), g.out_vox());
    let mut out = vec![0.0; g.batch * g.cout * p];
    let mut cols = vec![0.0; rows * p];
    let xin = g.cin * g.in_vox();
    for b in 0..g.batch {
        im2col(g, &x[b * xin..(b + 1) * xin], &mut cols);
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        gemm(g.cout, rows, p, k, false, &cols, false, 0.0, ob);
    }
    out
}

/// Returns (dx, dk); either may be skipped.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, p) = (g.col_rows(), g.out_vox());
    let xin = g.cin * g.in_vox();
    let mut cols = vec![0.0; rows * p];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    for b in 0..g.batch {
        let db = &dout[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[b * xin..(b + 1) * xin], &mut cols);
            // dk[Cout, rows] += dout_b[Cout, P] * cols^T[P, rows]
            gemm(g.cout, p, rows, db, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, P] = k^T[rows, Cout] * dout_b[Cout, P]
            gemm(rows, g.cout, p, k, true, db, false, 0.0, &mut cols);
            col2im(g, &cols, &mut dx[b * xin..(b + 1) * xin]);
        }
    }
    (dx, dk)
}
