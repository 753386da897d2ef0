//! Maximum-intensity and sum projections about the vertical axis, and the
//! linear backprojection that reconstructs a volume from projection images.
//!
//! Every operator is built from one primitive: rotating each horizontal
//! `a x c` plane of a volume about its center with bilinear interpolation
//! (zero outside the grid). Backprojection is the exact adjoint of sum
//! projection, realized by scattering with the same bilinear weights.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::LinearOp;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};
use crate::volume::{Image, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    /// Directions `k * 180 / p`.
    Half,
    /// Directions `k * 360 / p`.
    Full,
}

impl std::str::FromStr for Span {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "half" | "180" => Ok(Span::Half),
            "full" | "360" => Ok(Span::Full),
            _ => Err(Error::Config(format!("unknown span {s:?}; use half or full"))),
        }
    }
}

/// Equidistant projection directions in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleSet {
    pub p: usize,
    pub span: Span,
    pub angles: Vec<f64>,
}

pub fn make_angles(p: usize, span: Span) -> Result<AngleSet> {
    if p == 0 {
        return Err(Error::Config("at least one projection direction is required".into()));
    }
    let total = match span {
        Span::Half => 180.0,
        Span::Full => 360.0,
    };
    let angles = (0..p).map(|k| k as f64 * total / p as f64).collect();
    Ok(AngleSet { p, span, angles })
}

/// Bilinear sampling weights that rotate an `a x c` plane by `alpha` degrees
/// about `((a-1)/2, (c-1)/2)`: target cell `t` reads source cells
/// `taps[offsets[t]..offsets[t+1]]`.
#[derive(Clone, Debug)]
pub struct RotationPlan {
    a: usize,
    c: usize,
    offsets: Vec<u32>,
    src: Vec<u32>,
    weight: Vec<f64>,
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

impl RotationPlan {
    pub fn new(a: usize, c: usize, alpha_deg: f64) -> Self {
        let (s, co) = alpha_deg.to_radians().sin_cos();
        let (s, co) = (snap(s), snap(co));
        let (ci, ck) = ((a as f64 - 1.0) / 2.0, (c as f64 - 1.0) / 2.0);
        let mut offsets = Vec::with_capacity(a * c + 1);
        let mut src = Vec::with_capacity(4 * a * c);
        let mut weight = Vec::with_capacity(4 * a * c);
        offsets.push(0);
        for i in 0..a {
            for k in 0..c {
                let (u, v) = (i as f64 - ci, k as f64 - ck);
                // content rotates by +alpha: sample the source at R(-alpha) * target
                let si = snap(ci + co * u + s * v);
                let sk = snap(ck - s * u + co * v);
                let (i0, k0) = (si.floor(), sk.floor());
                let (fi, fk) = (si - i0, sk - k0);
                for (di, wi) in [(0.0, 1.0 - fi), (1.0, fi)] {
                    for (dk, wk) in [(0.0, 1.0 - fk), (1.0, fk)] {
                        let w = wi * wk;
                        let (ti, tk) = (i0 + di, k0 + dk);
                        if w == 0.0 || ti < 0.0 || tk < 0.0 || ti >= a as f64 || tk >= c as f64 {
                            continue;
                        }
                        src.push((ti as usize * c + tk as usize) as u32);
                        weight.push(w);
                    }
                }
                offsets.push(src.len() as u32);
            }
        }
        Self { a, c, offsets, src, weight }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.a, self.c)
    }

    fn weights<T: Real>(&self) -> Vec<T> {
        self.weight.iter().map(|w| T::of(*w)).collect()
    }

    #[inline]
    fn taps(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t] as usize..self.offsets[t + 1] as usize
    }

    /// Rotated value of target `(i, k)` in the plane at vertical index `j`.
    #[inline]
    fn sample<T: Real>(&self, w: &[T], vol: &[T], b: usize, j: usize, t: usize) -> T {
        let mut acc = T::zero();
        for q in self.taps(t) {
            let s = self.src[q] as usize;
            let (si, sk) = (s / self.c, s % self.c);
            acc = acc + w[q] * vol[(si * b + j) * self.c + sk];
        }
        acc
    }
}

fn check_plan<T>(plan: &RotationPlan, v: &Volume<T>) {
    let [a, _, c] = v.extents();
    assert_eq!((a, c), plan.extents(), "rotation plan built for different extents");
}

pub fn rotate_with<T: Real>(v: &Volume<T>, plan: &RotationPlan) -> Volume<T> {
    check_plan(plan, v);
    let [a, b, c] = v.extents();
    let w = plan.weights::<T>();
    let mut out = vec![T::zero(); a * b * c];
    par::for_each_chunk_mut(&mut out, b * c, |i, slab| {
        for j in 0..b {
            for k in 0..c {
                slab[j * c + k] = plan.sample(&w, v.data(), b, j, i * c + k);
            }
        }
    });
    Volume::new([a, b, c], out).expect("same extents")
}

/// Rotates every horizontal plane by `alpha` degrees (or `-alpha`).
pub fn rotate_slicewise<T: Real>(v: &Volume<T>, alpha: f64, inverse: bool) -> Volume<T> {
    let [a, _, c] = v.extents();
    let angle = if inverse { -alpha } else { alpha };
    rotate_with(v, &RotationPlan::new(a, c, angle))
}

fn reduce_with<T: Real>(v: &Volume<T>, plan: &RotationPlan, max: bool) -> Image<T> {
    check_plan(plan, v);
    let [a, b, c] = v.extents();
    let w = plan.weights::<T>();
    let mut img = vec![T::zero(); b * c];
    par::for_each_chunk_mut(&mut img, c, |j, row| {
        for (k, out) in row.iter_mut().enumerate() {
            let mut acc = if max { T::neg_infinity() } else { T::zero() };
            for i in 0..a {
                let s = plan.sample(&w, v.data(), b, j, i * c + k);
                acc = if max { acc.max(s) } else { acc + s };
            }
            *out = acc;
        }
    });
    Image { rows: b, cols: c, data: img }
}

pub fn mip_with<T: Real>(v: &Volume<T>, plan: &RotationPlan) -> Image<T> {
    reduce_with(v, plan, true)
}

pub fn sum_project_with<T: Real>(v: &Volume<T>, plan: &RotationPlan) -> Image<T> {
    reduce_with(v, plan, false)
}

/// Maximum intensity projection along axis `a` after rotating by `alpha`.
pub fn mip<T: Real>(v: &Volume<T>, alpha: f64) -> Image<T> {
    let [a, _, c] = v.extents();
    mip_with(v, &RotationPlan::new(a, c, alpha))
}

/// Projected ground truth: MIP of a binary mask thresholded at 0.5.
pub fn mip_mask(mask: &Volume<u8>, alpha: f64) -> Image<u8> {
    let as_float = mask.map(|&m| if m > 0 { 1.0f32 } else { 0.0 });
    mip(&as_float, alpha).map(|&v| u8::from(v >= 0.5))
}

/// Sum along axis `a` after rotating by `alpha`.
pub fn sum_project<T: Real>(v: &Volume<T>, alpha: f64) -> Image<T> {
    let [a, _, c] = v.extents();
    sum_project_with(v, &RotationPlan::new(a, c, alpha))
}

pub fn backproject_with<T: Real>(g: &Image<T>, plan: &RotationPlan, b: usize) -> Volume<T> {
    let (a, c) = plan.extents();
    assert_eq!((g.rows, g.cols), (b, c), "image does not match plan extents");
    let w = plan.weights::<T>();
    // accumulate in a b-major buffer so each vertical index owns one plane
    let mut planes = vec![T::zero(); b * a * c];
    par::for_each_chunk_mut(&mut planes, a * c, |j, plane| {
        let row = &g.data[j * c..(j + 1) * c];
        for i in 0..a {
            for (k, gv) in row.iter().enumerate() {
                let t = i * c + k;
                for q in plan.taps(t) {
                    let s = plan.src[q] as usize;
                    plane[s] = plane[s] + w[q] * *gv;
                }
            }
        }
    });
    let mut out = vec![T::zero(); a * b * c];
    par::for_each_chunk_mut(&mut out, b * c, |i, slab| {
        for j in 0..b {
            slab[j * c..(j + 1) * c].copy_from_slice(&planes[(j * a + i) * c..(j * a + i + 1) * c]);
        }
    });
    Volume::new([a, b, c], out).expect("positive extents")
}

/// Smears `g` along its rays: the transpose of [`sum_project`] for the same
/// direction and extent `a`.
pub fn backproject_one<T: Real>(g: &Image<T>, alpha: f64, a: usize) -> Volume<T> {
    backproject_with(g, &RotationPlan::new(a, g.cols, alpha), g.rows)
}

/// Projection images with the direction each one was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack<T> {
    pub angles: Vec<f64>,
    pub images: Vec<Image<T>>,
}

impl<T: Real> ProjectionStack<T> {
    pub fn new(angles: Vec<f64>, images: Vec<Image<T>>) -> Result<Self> {
        if angles.is_empty() || angles.len() != images.len() {
            return Err(Error::Shape(format!("{} angles for {} images", angles.len(), images.len())));
        }
        let (r, c) = (images[0].rows, images[0].cols);
        if images.iter().any(|im| im.rows != r || im.cols != c) {
            return Err(Error::Shape("projection images differ in shape".into()));
        }
        Ok(Self { angles, images })
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }
}

/// Summation order for a set of directions: ascending angle, so the result
/// does not depend on how the stack happens to be ordered.
fn angle_order(angles: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..angles.len()).collect();
    idx.sort_by(|&x, &y| angles[x].total_cmp(&angles[y]));
    idx
}

/// Sum of the per-direction backprojections.
pub fn backproject<T: Real>(stack: &ProjectionStack<T>, a: usize) -> Volume<T> {
    let (b, c) = (stack.images[0].rows, stack.images[0].cols);
    let mut acc = Volume::<T>::zeros([a, b, c]);
    for q in angle_order(&stack.angles) {
        let part = backproject_one(&stack.images[q], stack.angles[q], a);
        for (x, y) in acc.data_mut().iter_mut().zip(part.data()) {
            *x = *x + *y;
        }
    }
    acc
}

/// The reconstruction operator as a tape node: maps `p` images `[1, 1, b, c]`
/// to a volume `[1, 1, a, b, c]`; its adjoint is per-direction sum projection.
pub struct Backprojector {
    a: usize,
    b: usize,
    c: usize,
    plans: Vec<RotationPlan>,
    order: Vec<usize>,
}

impl Backprojector {
    pub fn new(angles: &[f64], extents: [usize; 3]) -> Arc<Self> {
        let [a, b, c] = extents;
        let plans = angles.iter().map(|&al| RotationPlan::new(a, c, al)).collect();
        Arc::new(Self { a, b, c, plans, order: angle_order(angles) })
    }

    pub fn plans(&self) -> &[RotationPlan] {
        &self.plans
    }
}

impl<T: Real> LinearOp<T> for Backprojector {
    fn output_shape(&self) -> Vec<usize> {
        vec![1, 1, self.a, self.b, self.c]
    }

    fn apply(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        assert_eq!(inputs.len(), self.plans.len(), "one image per direction");
        let mut acc = vec![T::zero(); self.a * self.b * self.c];
        for &q in &self.order {
            let img = Image { rows: self.b, cols: self.c, data: inputs[q].data().to_vec() };
            let part = backproject_with(&img, &self.plans[q], self.b);
            for (x, y) in acc.iter_mut().zip(part.data()) {
                *x = *x + *y;
            }
        }
        Tensor::from_vec(&[1, 1, self.a, self.b, self.c], acc).expect("positive extents")
    }

    fn adjoint(&self, grad: &Tensor<T>) -> Vec<Tensor<T>> {
        let vol = Volume::new([self.a, self.b, self.c], grad.data().to_vec()).expect("gradient shape");
        self.plans
            .iter()
            .map(|plan| {
                let img = sum_project_with(&vol, plan);
                Tensor::from_vec(&[1, 1, self.b, self.c], img.data).expect("image shape")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(ext: [usize; 3]) -> Volume<f64> {
        let n = ext.iter().product::<usize>();
        Volume::new(ext, (0..n).map(|i| ((i * 37) % 101) as f64 / 10.0).collect()).unwrap()
    }

    #[test]
    fn angle_sets() {
        let h = make_angles(12, Span::Half).unwrap();
        assert_eq!(h.angles, (0..12).map(|k| 15.0 * k as f64).collect::<Vec<_>>());
        let f = make_angles(10, Span::Full).unwrap();
        assert_eq!(f.angles, (0..10).map(|k| 36.0 * k as f64).collect::<Vec<_>>());
        assert_eq!(make_angles(1, Span::Half).unwrap().angles, vec![0.0]);
        assert!(make_angles(0, Span::Half).is_err());
    }

    #[test]
    fn zero_rotation_is_bitwise_identity() {
        let v = ramp([5, 3, 4]);
        assert_eq!(rotate_slicewise(&v, 0.0, false), v);
    }

    #[test]
    fn quarter_turn_is_an_index_permutation() {
        let n = 5;
        let v = ramp([n, 2, n]);
        let r = rotate_slicewise(&v, 90.0, false);
        for j in 0..2 {
            for i in 0..n {
                for k in 0..n {
                    // source = R(-90) * target about the center
                    assert_eq!(r.get(i, j, k), v.get(k, j, n - 1 - i));
                }
            }
        }
    }

    #[test]
    fn center_column_is_preserved_for_odd_extents() {
        let v = ramp([7, 3, 9]);
        for alpha in [17.0, 45.0, 123.0] {
            let r = rotate_slicewise(&v, alpha, false);
            for j in 0..3 {
                assert_eq!(r.get(3, j, 4), v.get(3, j, 4));
            }
        }
    }

    #[test]
    fn zero_angle_mip_is_axis_max() {
        let v = ramp([4, 3, 5]);
        let m = mip(&v, 0.0);
        for j in 0..3 {
            for k in 0..5 {
                let want = (0..4).map(|i| v.get(i, j, k)).fold(f64::MIN, f64::max);
                assert_eq!(m.get(j, k), want);
            }
        }
    }

    #[test]
    fn sum_projection_of_constant() {
        let v = Volume::filled([4, 2, 3], 2.0f64);
        let s = sum_project(&v, 0.0);
        assert!(s.data.iter().all(|x| *x == 8.0));
    }

    #[test]
    fn two_direction_backprojection_forms_crossing_rods() {
        let n = 8;
        let mut g0 = Image::<f64>::zeros(n, n);
        let mut g90 = Image::<f64>::zeros(n, n);
        g0.data[2 * n + 5] = 1.0; // vertical index 2, column 5
        g90.data[2 * n + 1] = 1.0;
        let stack = ProjectionStack::new(vec![0.0, 90.0], vec![g0, g90]).unwrap();
        let v = backproject(&stack, n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let rod0 = f64::from(j == 2 && k == 5);
                    // column 1 seen from 90 degrees is the plane a = 1
                    let rod90 = f64::from(j == 2 && i == 1);
                    assert_eq!(v.get(i, j, k), rod0 + rod90, "({i},{j},{k})");
                }
            }
        }
        assert_eq!(v.get(1, 2, 5), 2.0);
    }
}
