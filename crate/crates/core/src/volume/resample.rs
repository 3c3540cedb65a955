//! Grid resampling that preserves physical extent.
//!
//! Output voxel `i` along an axis of length `n → m` samples the input at the
//! continuous index `u = (i + ½)·n/m − ½`, i.e. voxel centres are aligned and
//! the new voxel size is `s·n/m`. Both kernels are separable and applied one
//! axis at a time.

use super::{Volume3, Volume4};
use crate::error::{arg, Result};

fn source_coord(i: usize, n: usize, m: usize) -> f64 {
    (i as f64 + 0.5) * n as f64 / m as f64 - 0.5
}

/// Resample `data` (x-fastest, dims `dims`) along `axis` to length `m`.
fn along_axis(
    data: &[f64],
    dims: [usize; 3],
    axis: usize,
    m: usize,
    line: &dyn Fn(&[f64], usize) -> Vec<f64>,
) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = m;
    let stride_in = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let stride_out = match axis {
        0 => 1,
        1 => out_dims[0],
        _ => out_dims[0] * out_dims[1],
    };
    let n = dims[axis];
    let mut out = vec![0.0; out_dims.iter().product()];
    let mut buf = vec![0.0; n];
    let others: Vec<(usize, usize)> = match axis {
        0 => (0..dims[2])
            .flat_map(|z| (0..dims[1]).map(move |y| (y, z)))
            .collect(),
        1 => (0..dims[2])
            .flat_map(|z| (0..dims[0]).map(move |x| (x, z)))
            .collect(),
        _ => (0..dims[1])
            .flat_map(|y| (0..dims[0]).map(move |x| (x, y)))
            .collect(),
    };
    for (a, b) in others {
        let (base_in, base_out) = match axis {
            0 => (dims[0] * (a + dims[1] * b), out_dims[0] * (a + out_dims[1] * b)),
            1 => (a + dims[0] * dims[1] * b, a + out_dims[0] * out_dims[1] * b),
            _ => (a + dims[0] * b, a + out_dims[0] * b),
        };
        for (k, v) in buf.iter_mut().enumerate() {
            *v = data[base_in + k * stride_in];
        }
        for (k, v) in line(&buf, m).into_iter().enumerate() {
            out[base_out + k * stride_out] = v;
        }
    }
    (out, out_dims)
}

fn linear_line(src: &[f64], m: usize) -> Vec<f64> {
    let n = src.len();
    (0..m)
        .map(|i| {
            let u = source_coord(i, n, m).clamp(0.0, (n - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let t = u - i0 as f64;
            let (a, b) = (src[i0], src[i1]);
            (a + t * (b - a)).clamp(a.min(b), a.max(b))
        })
        .collect()
}

/// Mirror-boundary index for a line of length n (period 2n − 2).
fn mirror(j: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = j.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Cubic B-spline interpolation coefficients (causal/anti-causal recursive
/// filter with pole √3 − 2 and exact mirror initialisation).
fn bspline_coefficients(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    if n == 1 {
        return s.to_vec();
    }
    let z: f64 = 3f64.sqrt() - 2.0;
    let mut c = vec![0.0; n];
    let zn = z.powi(n as i32 - 1);
    let z2n = zn * zn;
    let mut sum = s[0] + zn * s[n - 1];
    let mut zk = z;
    let mut zr = zn * zn / z;
    for v in s.iter().take(n - 1).skip(1) {
        sum += (zk + zr) * v;
        zk *= z;
        zr /= z;
    }
    c[0] = sum / (1.0 - z2n);
    for k in 1..n {
        c[k] = s[k] + z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
    c.iter_mut().for_each(|v| *v *= 6.0);
    c
}

fn cubic_bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Samples padded on each side by point reflection, `s[−k] = 2·s[0] − s[k]`,
/// which keeps the first derivative continuous at the edges. Plain mirroring
/// would put a kink there and ruin the fit of any sloped profile.
const PAD: usize = 8;

fn bspline_line(src: &[f64], m: usize) -> Vec<f64> {
    let n = src.len();
    let p = PAD.min(n - 1);
    let mut padded = Vec::with_capacity(n + 2 * p);
    padded.extend((1..=p).rev().map(|k| 2.0 * src[0] - src[k]));
    padded.extend_from_slice(src);
    padded.extend((1..=p).map(|k| 2.0 * src[n - 1] - src[n - 1 - k]));
    let np = padded.len();
    let c = bspline_coefficients(&padded);
    (0..m)
        .map(|i| {
            let u = source_coord(i, n, m) + p as f64;
            let j0 = u.floor() as isize;
            (j0 - 1..=j0 + 2)
                .map(|j| c[mirror(j, np)] * cubic_bspline(u - j as f64))
                .sum()
        })
        .collect()
}

fn resample(v: &Volume3, new_dims: [usize; 3], line: &dyn Fn(&[f64], usize) -> Vec<f64>) -> Result<Volume3> {
    if new_dims.iter().any(|&d| d == 0) {
        return arg(format!("resample target dims must be ≥ 1, got {new_dims:?}"));
    }
    let mut data = v.data().to_vec();
    let mut dims = v.dims();
    for axis in 0..3 {
        if dims[axis] != new_dims[axis] {
            let (d, nd) = along_axis(&data, dims, axis, new_dims[axis], line);
            data = d;
            dims = nd;
        }
    }
    let vs = v.voxel_size();
    let new_vs = [0, 1, 2].map(|i| vs[i] * v.dims()[i] as f64 / new_dims[i] as f64);
    Volume3::new(new_dims, new_vs, data)
}

/// Trilinear resampling with edge clamping. Output values stay within the
/// input's [min, max].
pub fn resample_trilinear(v: &Volume3, new_dims: [usize; 3]) -> Result<Volume3> {
    resample(v, new_dims, &linear_line)
}

/// Interpolating cubic B-spline resampling. May overshoot the input range
/// near sharp edges.
pub fn upsample_bspline(v: &Volume3, new_dims: [usize; 3]) -> Result<Volume3> {
    resample(v, new_dims, &bspline_line)
}

fn per_channel(v: &Volume4, f: impl Fn(&Volume3) -> Result<Volume3>) -> Result<Volume4> {
    let vols = v
        .volumes()
        .iter()
        .map(f)
        .collect::<Result<Vec<_>>>()?;
    Volume4::stack(&vols)
}

pub fn resample4_trilinear(v: &Volume4, new_dims: [usize; 3]) -> Result<Volume4> {
    per_channel(v, |c| resample_trilinear(c, new_dims))
}

pub fn upsample4_bspline(v: &Volume4, new_dims: [usize; 3]) -> Result<Volume4> {
    per_channel(v, |c| upsample_bspline(c, new_dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3], f: impl Fn(f64) -> f64) -> Volume3 {
        Volume3::from_fn(dims, [1.5, 1.0, 2.0], |x, _, _| f(x as f64)).unwrap()
    }

    #[test]
    fn constant_stays_constant() {
        let v = Volume3::filled([5, 4, 3], [1.0; 3], 5.0).unwrap();
        for dims in [[7, 2, 9], [1, 1, 1], [10, 8, 6]] {
            let t = resample_trilinear(&v, dims).unwrap();
            assert!(t.data().iter().all(|&x| x == 5.0));
            let b = upsample_bspline(&v, dims).unwrap();
            assert!(b.data().iter().all(|&x| (x - 5.0).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_dims_return_input() {
        let v = Volume3::from_fn([5, 4, 3], [1.0; 3], |x, y, z| ((x * 7 + y * 3 + z * 11) % 5) as f64).unwrap();
        assert_eq!(resample_trilinear(&v, v.dims()).unwrap(), v);
        let b = upsample_bspline(&v, v.dims()).unwrap();
        for (a, c) in b.data().iter().zip(v.data()) {
            assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_target_is_error() {
        let v = Volume3::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        assert!(resample_trilinear(&v, [0, 2, 2]).is_err());
        assert!(upsample_bspline(&v, [2, 2, 0]).is_err());
    }

    #[test]
    fn linear_ramp_doubled_matches_closed_form() {
        let n = 8;
        let v = ramp([n, 3, 3], |x| 2.0 * x + 1.0);
        let out = resample_trilinear(&v, [2 * n, 3, 3]).unwrap();
        for i in 0..2 * n {
            let u = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let expected = 2.0 * u + 1.0;
            assert!((out.get(i, 1, 2) - expected).abs() < 1e-6);
        }
        assert_eq!(out.voxel_size()[0], 0.75);
    }

    #[test]
    fn bspline_beats_trilinear_on_quadratic() {
        let n = 10;
        let f = |x: f64| 0.3 * x * x - 2.0 * x + 1.0;
        let v = ramp([n, 2, 2], f);
        let m = 2 * n;
        let lin = resample_trilinear(&v, [m, 2, 2]).unwrap();
        let spl = upsample_bspline(&v, [m, 2, 2]).unwrap();
        let mut err_lin: f64 = 0.0;
        let mut err_spl: f64 = 0.0;
        for i in 0..m {
            let u = (i as f64 + 0.5) * n as f64 / m as f64 - 0.5;
            if !(0.0..=(n - 1) as f64).contains(&u) {
                continue;
            }
            err_lin = err_lin.max((lin.get(i, 0, 0) - f(u)).abs());
            err_spl = err_spl.max((spl.get(i, 0, 0) - f(u)).abs());
        }
        assert!(err_spl < err_lin, "spline {err_spl} vs linear {err_lin}");
    }

    proptest! {
        #[test]
        fn trilinear_respects_bounds_and_extent(
            vals in proptest::collection::vec(-5.0f64..5.0, 27),
            mx in 1usize..9, my in 1usize..9, mz in 1usize..9,
        ) {
            let v = Volume3::new([3, 3, 3], [1.25, 1.0, 0.7], vals).unwrap();
            let out = resample_trilinear(&v, [mx, my, mz]).unwrap();
            let (lo, hi) = (v.min(), v.max());
            prop_assert!(out.data().iter().all(|&x| x >= lo && x <= hi));
            for i in 0..3 {
                let rel = (out.extent()[i] - v.extent()[i]).abs() / v.extent()[i];
                prop_assert!(rel < 1e-9);
            }
        }
    }
}
