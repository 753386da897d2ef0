//! Measurements behind the projection-operator checks.

use mseg_core::projection::{backproject_one, mip, rotate_slicewise, sum_project};
use mseg_core::{Image, Volume};

/// Largest entry of `|B - M^T|`, where `M` is the matrix of `sum_project` and
/// `B` the matrix of `backproject_one`, both built column by column.
pub fn transpose_deviation(ext: [usize; 3], alpha: f64) -> f64 {
    let [a, b, c] = ext;
    let (nv, np) = (a * b * c, b * c);
    let mut m = vec![0.0f64; np * nv];
    for v in 0..nv {
        let mut e = Volume::<f64>::zeros(ext);
        e.data_mut()[v] = 1.0;
        for (p, val) in sum_project(&e, alpha).data.iter().enumerate() {
            m[p * nv + v] = *val;
        }
    }
    let mut worst = 0.0f64;
    for p in 0..np {
        let mut g = Image::<f64>::zeros(b, c);
        g.data[p] = 1.0;
        let col = backproject_one(&g, alpha, a);
        for (v, val) in col.data().iter().enumerate() {
            worst = worst.max((val - m[p * nv + v]).abs());
        }
    }
    worst
}

/// Whether `mip(v, 0)` is bitwise the maximum along axis `a`.
pub fn mip_zero_is_axis_max(v: &Volume<f32>) -> bool {
    let [a, b, c] = v.extents();
    let img = mip(v, 0.0);
    (0..b).all(|j| {
        (0..c).all(|k| {
            let want = (0..a).map(|i| v.get(i, j, k)).fold(f32::NEG_INFINITY, f32::max);
            img.get(j, k).to_bits() == want.to_bits()
        })
    })
}

/// Isotropic Gaussian of width `sigma` centered in the a-c plane.
pub fn gaussian_blob(ext: [usize; 3], sigma: f64) -> Volume<f64> {
    let [a, b, c] = ext;
    let (ci, cj, ck) = ((a as f64 - 1.0) / 2.0, (b as f64 - 1.0) / 2.0, (c as f64 - 1.0) / 2.0);
    let mut v = Volume::zeros(ext);
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2) + (k as f64 - ck).powi(2);
                v.set(i, j, k, (-r2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    v
}

/// Max abs error of rotate-then-unrotate, relative to the peak.
pub fn round_trip_error(v: &Volume<f64>, alpha: f64) -> f64 {
    let back = rotate_slicewise(&rotate_slicewise(v, alpha, false), alpha, true);
    let peak = v.data().iter().cloned().fold(0.0, f64::max);
    v.data().iter().zip(back.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / peak
}
