//! Same-size 2-D cross-correlation (stride 1, zero padding `k/2`) via im2col + GEMM.

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`, all row-major
/// unless the corresponding `*_t` flag says the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
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

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub ks: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c_in * self.ks * self.ks
    }
}

fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let (h, w, ks) = (d.h, d.w, d.ks);
    let p = (ks / 2) as isize;
    let hw = h * w;
    for ci in 0..d.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &mut col[((ci * ks + ky) * ks + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let yy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if yy < 0 || yy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[yy as usize * w..(yy as usize + 1) * w];
                    for (x_, v) in dst.iter_mut().enumerate() {
                        let xx = x_ as isize + dx;
                        *v = if xx < 0 || xx >= w as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: &ConvDims, dx_out: &mut [f64]) {
    let (h, w, ks) = (d.h, d.w, d.ks);
    let p = (ks / 2) as isize;
    let hw = h * w;
    for ci in 0..d.c_in {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &col[((ci * ks + ky) * ks + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dxs = kx as isize - p;
                for y in 0..h {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[yy as usize * w..(yy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for (x_, v) in src.iter().enumerate() {
                        let xx = x_ as isize + dxs;
                        if xx >= 0 && xx < w as isize {
                            dst[xx as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], k: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.n * d.c_out * hw];
    let mut col = if d.ks == 1 { Vec::new() } else { vec![0.0; d.patch() * hw] };
    for i in 0..d.n {
        let xi = &x[i * d.c_in * hw..(i + 1) * d.c_in * hw];
        let oi = &mut out[i * d.c_out * hw..(i + 1) * d.c_out * hw];
        for (co, row) in oi.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        let b = if d.ks == 1 {
            xi
        } else {
            im2col(xi, d, &mut col);
            &col
        };
        gemm(d.c_out, d.patch(), hw, k, false, b, false, oi, 1.0);
    }
    out
}

/// Returns `(dx, dk, dbias)`.
pub(crate) fn backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    d: &ConvDims,
    need_x: bool,
    need_k: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = d.h * d.w;
    let patch = d.patch();
    let mut dx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut dk = vec![0.0; d.c_out * patch];
    let mut db = vec![0.0; d.c_out];
    let mut col = vec![0.0; patch * hw];
    let mut dcol = vec![0.0; patch * hw];
    for i in 0..d.n {
        let xi = &x[i * d.c_in * hw..(i + 1) * d.c_in * hw];
        let gi = &g[i * d.c_out * hw..(i + 1) * d.c_out * hw];
        for (co, row) in gi.chunks_exact(hw).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        if need_k {
            let b = if d.ks == 1 {
                xi
            } else {
                im2col(xi, d, &mut col);
                &col
            };
            // dk[co, p] += sum_s g[co, s] * col[p, s]
            gemm(d.c_out, hw, patch, gi, false, b, true, &mut dk, 1.0);
        }
        if need_x {
            let dxi = &mut dx[i * d.c_in * hw..(i + 1) * d.c_in * hw];
            if d.ks == 1 {
                gemm(patch, d.c_out, hw, k, true, gi, false, dxi, 1.0);
            } else {
                gemm(patch, d.c_out, hw, k, true, gi, false, &mut dcol, 0.0);
                col2im(&dcol, d, dxi);
            }
        }
    }
    (dx, dk, db)
}
