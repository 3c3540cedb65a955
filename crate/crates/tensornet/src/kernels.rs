//! Raw numeric kernels behind the graph ops. Everything here works on plain
//! slices; shape checking happens in `graph`.

/// `c = a·b + beta·c` where `a` is m×k and `b` is k×n (after the optional
/// transposes). Row-major storage throughout.
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
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin the slice lengths to the strides handed to
    // dgemm, so every element it touches is in bounds.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let k = g.k;
    let plen = g.out_len();
    let mut cols = vec![0.0; g.cin * k * k * k * plen];
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let out = &mut cols[row * plen..(row + 1) * plen];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            let dst = &mut out[(oz * oh + oy) * ow..][..ow];
                            for (ox, v) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *v = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let k = g.k;
    let plen = g.out_len();
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src_row = &cols[row * plen..(row + 1) * plen];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            let src = &src_row[(oz * oh + oy) * ow..][..ow];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plen = g.out_len();
    let kk = g.cin * g.k * g.k * g.k;
    let mut out = vec![0.0; g.cout * plen];
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(plen).enumerate() {
            row.fill(b[co]);
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(g.cout, kk, plen, w, false, x, false, &mut out, beta);
    } else {
        let cols = im2col(x, g);
        gemm(g.cout, kk, plen, w, false, &cols, false, &mut out, beta);
    }
    out
}

/// Returns (dx, dw, db) for the requested pieces.
pub(crate) fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plen = g.out_len();
    let kk = g.cin * g.k * g.k * g.k;
    let cols_owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else if need_dw {
        cols_owned = im2col(x, g);
        &cols_owned
    } else {
        &[]
    };
    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; g.cout * kk];
        gemm(g.cout, plen, kk, dy, false, cols, true, &mut dw, 0.0);
        dw
    });
    let db = need_db.then(|| dy.chunks(plen).map(|r| r.iter().sum()).collect());
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; kk * plen];
        gemm(kk, g.cout, plen, w, true, dy, false, &mut dcols, 0.0);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; g.cin * g.in_len()];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dw, db)
}

/// Nearest-neighbour 2× upsampling of a [C, D, H, W] grid.
pub(crate) fn upsample2_forward(x: &[f64], c: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; c * d2 * h2 * w2];
    for ch in 0..c {
        let src = &x[ch * d * h * w..];
        let dst = &mut out[ch * d2 * h2 * w2..];
        for z in 0..d2 {
            for y in 0..h2 {
                let srow = &src[((z / 2) * h + y / 2) * w..][..w];
                let drow = &mut dst[(z * h2 + y) * w2..][..w2];
                for (xo, v) in drow.iter_mut().enumerate() {
                    *v = srow[xo / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &[f64], c: usize, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut dx = vec![0.0; c * d * h * w];
    for ch in 0..c {
        let src = &dy[ch * d2 * h2 * w2..];
        let dst = &mut dx[ch * d * h * w..];
        for z in 0..d2 {
            for y in 0..h2 {
                let srow = &src[(z * h2 + y) * w2..][..w2];
                let drow = &mut dst[((z / 2) * h + y / 2) * w..][..w];
                for (xo, v) in srow.iter().enumerate() {
                    drow[xo / 2] += v;
                }
            }
        }
    }
    dx
}

/// Pairwise summation; keeps reductions independent of how callers chunk data.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 64 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            cin: 2,
            cout: 3,
            k: 3,
            stride: 2,
            pad: 1,
            in_dims: [4, 5, 3],
            out_dims: [2, 3, 2],
        };
        let x: Vec<f64> = (0..2 * 60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 27).map(|i| ((i * 13) % 7) as f64 * 0.1).collect();
        let b = [0.5, -1.0, 2.0];
        let out = conv3d_forward(&x, &w, Some(&b), &g);
        let [d, h, wd] = g.in_dims;
        for co in 0..3 {
            for oz in 0..2 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = b[co];
                        for ci in 0..2 {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iz = (oz * 2 + kz) as isize - 1;
                                        let iy = (oy * 2 + ky) as isize - 1;
                                        let ix = (ox * 2 + kx) as isize - 1;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[((ci * d + iz as usize) * h + iy as usize) * wd
                                            + ix as usize];
                                        acc += xv * w[(((co * 2 + ci) * 3 + kz) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = out[((co * 2 + oz) * 3 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = [1.0, 2.0];
        let y = upsample2_forward(&x, 1, [1, 1, 2]);
        assert_eq!(y.len(), 16);
        let dx = upsample2_backward(&vec![1.0; 16], 1, [1, 1, 2]);
        assert_eq!(dx, vec![8.0, 8.0]);
    }
}
