//! Slice-level compute kernels behind the tape operations. Two-dimensional
//! inputs are handled as three-dimensional ones with a unit depth axis, so a
//! single implementation serves conv2d/conv3d, pooling and their adjoints.

use crate::par;
use crate::tensor::{gemm, MatRef, Real};

/// Geometry of a same-stride (stride 1) convolution over `[N, C, D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.input[a] + 2 * self.pad[a] + 1 - self.kernel[a])
    }

    pub fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_plane(&self) -> usize {
        self.output().iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the unfolded input matrix.
    pub fn col_rows(&self) -> usize {
        self.c_in * self.taps()
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1 && self.pad == [0; 3]
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.out_plane() * self.col_rows()) as u64
    }
}

/// Unfolds one image `[C, D, H, W]` into a `(C * taps) x out_plane` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output();
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let plane = od * oh * ow;
    par::for_each_chunk_mut(&mut cols[..g.col_rows() * plane], plane, |row, out| {
        let kx = row % kw;
        let ky = (row / kw) % kh;
        let kz = (row / (kw * kh)) % kd;
        let c = row / (kw * kh * kd);
        let src = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        // valid output x-range for this tap: 0 <= ox + kx - pw < iw
        let x_lo = pw.saturating_sub(kx).min(ow);
        let x_hi = (iw + pw).saturating_sub(kx).min(ow).max(x_lo);
        for z in 0..od {
            let iz = z as isize + kz as isize - pd as isize;
            for y in 0..oh {
                let iy = y as isize + ky as isize - ph as isize;
                let dst = &mut out[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let base = (iz as usize * ih + iy as usize) * iw;
                dst[..x_lo].fill(T::zero());
                dst[x_hi..].fill(T::zero());
                let s0 = base + x_lo + kx - pw;
                dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx` (`[C, D, H, W]`).
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output();
    let [_, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let plane = od * oh * ow;
    let taps = g.taps();
    par::for_each_chunk_mut(&mut dx[..g.c_in * id * ih * iw], id * ih * iw, |c, dst| {
        for t in 0..taps {
            let kx = t % kw;
            let ky = (t / kw) % kh;
            let kz = t / (kw * kh);
            let row = &cols[(c * taps + t) * plane..(c * taps + t + 1) * plane];
            let x_lo = pw.saturating_sub(kx).min(ow);
            let x_hi = (iw + pw).saturating_sub(kx).min(ow).max(x_lo);
            for z in 0..od {
                let iz = z as isize + kz as isize - pd as isize;
                if iz < 0 || iz >= id as isize {
                    continue;
                }
                for y in 0..oh {
                    let iy = y as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let base = (iz as usize * ih + iy as usize) * iw + x_lo + kx - pw;
                    let src = &row[(z * oh + y) * ow + x_lo..(z * oh + y) * ow + x_hi];
                    for (d, s) in dst[base..base + src.len()].iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
    });
}

/// Cross-correlation with optional bias; `w` is `[F, C, kd, kh, kw]`.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (cin_plane, plane) = (g.c_in * g.in_plane(), g.out_plane());
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    par::for_each_chunk_mut(&mut out, g.c_out * plane, |n, out_n| {
        let x_n = &x[n * cin_plane..(n + 1) * cin_plane];
        let wm = MatRef::new(w, g.c_out, rows);
        if g.is_pointwise() {
            gemm(wm, MatRef::new(x_n, rows, plane), T::zero(), out_n);
        } else {
            let mut cols = vec![T::zero(); rows * plane];
            im2col(x_n, g, &mut cols);
            gemm(wm, MatRef::new(&cols, rows, plane), T::zero(), out_n);
        }
        if let Some(b) = bias {
            for (f, chunk) in out_n.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + b[f]);
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv_backward<T: Real>(x: &[T], w: &[T], dout: &[T], g: &ConvGeom, need_dx: bool) -> ConvGrads<T> {
    let (cin_plane, plane) = (g.c_in * g.in_plane(), g.out_plane());
    let rows = g.col_rows();
    let per_image = par::map_range(g.batch, |n| {
        let x_n = &x[n * cin_plane..(n + 1) * cin_plane];
        let d_n = &dout[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        let dm = MatRef::new(d_n, g.c_out, plane);
        let mut dw = vec![T::zero(); g.c_out * rows];
        let cols_owned;
        let cols: &[T] = if g.is_pointwise() {
            x_n
        } else {
            let mut c = vec![T::zero(); rows * plane];
            im2col(x_n, g, &mut c);
            cols_owned = c;
            &cols_owned
        };
        gemm(dm, MatRef::new(cols, rows, plane).t(), T::zero(), &mut dw);
        let dx = need_dx.then(|| {
            let wm = MatRef::new(w, g.c_out, rows).t();
            if g.is_pointwise() {
                let mut dx = vec![T::zero(); cin_plane];
                gemm(wm, dm, T::zero(), &mut dx);
                dx
            } else {
                let mut dcols = vec![T::zero(); rows * plane];
                gemm(wm, dm, T::zero(), &mut dcols);
                let mut dx = vec![T::zero(); cin_plane];
                col2im(&dcols, g, &mut dx);
                dx
            }
        });
        let db: Vec<T> = d_n.chunks(plane).map(|c| c.iter().copied().sum()).collect();
        (dx, dw, db)
    });
    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.batch * cin_plane));
    let mut dw = vec![T::zero(); g.c_out * rows];
    let mut db = vec![T::zero(); g.c_out];
    for (dx, dw_n, db_n) in per_image {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        dw.iter_mut().zip(&dw_n).for_each(|(a, b)| *a = *a + *b);
        db.iter_mut().zip(&db_n).for_each(|(a, b)| *a = *a + *b);
    }
    ConvGrads { dx: dx_all, dw, db }
}

/// Geometry of a transposed convolution whose kernel equals its stride
/// (non-overlapping footprints), e.g. 2x2 stride 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub factor: [usize; 3],
}

impl UpGeom {
    pub fn output(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.input[a] * self.factor[a])
    }

    fn taps(&self) -> usize {
        self.factor.iter().product()
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.c_in * self.c_out * self.taps() * self.input.iter().product::<usize>()) as u64
    }

    /// Output flat index (within one channel) for input position `p` and tap `t`.
    fn out_index(&self, p: usize, t: usize) -> usize {
        let [_, ih, iw] = self.input;
        let [fd, fh, fw] = self.factor;
        let [_, oh, ow] = self.output();
        let (x, y, z) = (p % iw, (p / iw) % ih, p / (iw * ih));
        let (tx, ty, tz) = (t % fw, (t / fw) % fh, t / (fw * fh));
        ((z * fd + tz) * oh + y * fh + ty) * ow + x * fw + tx
    }
}

/// `w` is `[C_in, C_out, fd, fh, fw]`.
pub fn upconv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &UpGeom) -> Vec<T> {
    let pin: usize = g.input.iter().product();
    let pout = pin * g.taps();
    let fk = g.c_out * g.taps();
    let mut out = vec![T::zero(); g.batch * g.c_out * pout];
    par::for_each_chunk_mut(&mut out, g.c_out * pout, |n, out_n| {
        let x_n = &x[n * g.c_in * pin..(n + 1) * g.c_in * pin];
        let mut z = vec![T::zero(); fk * pin];
        gemm(MatRef::new(w, g.c_in, fk).t(), MatRef::new(x_n, g.c_in, pin), T::zero(), &mut z);
        for f in 0..g.c_out {
            let b = bias.map_or(T::zero(), |b| b[f]);
            let dst = &mut out_n[f * pout..(f + 1) * pout];
            for t in 0..g.taps() {
                let row = &z[(f * g.taps() + t) * pin..(f * g.taps() + t + 1) * pin];
                for (p, v) in row.iter().enumerate() {
                    dst[g.out_index(p, t)] = *v + b;
                }
            }
        }
    });
    out
}

pub fn upconv_backward<T: Real>(x: &[T], w: &[T], dout: &[T], g: &UpGeom, need_dx: bool) -> ConvGrads<T> {
    let pin: usize = g.input.iter().product();
    let pout = pin * g.taps();
    let fk = g.c_out * g.taps();
    let per_image = par::map_range(g.batch, |n| {
        let x_n = &x[n * g.c_in * pin..(n + 1) * g.c_in * pin];
        let d_n = &dout[n * g.c_out * pout..(n + 1) * g.c_out * pout];
        let mut dz = vec![T::zero(); fk * pin];
        for f in 0..g.c_out {
            for t in 0..g.taps() {
                let row = &mut dz[(f * g.taps() + t) * pin..(f * g.taps() + t + 1) * pin];
                for (p, v) in row.iter_mut().enumerate() {
                    *v = d_n[f * pout + g.out_index(p, t)];
                }
            }
        }
        let dzm = MatRef::new(&dz, fk, pin);
        let mut dw = vec![T::zero(); g.c_in * fk];
        gemm(MatRef::new(x_n, g.c_in, pin), dzm.t(), T::zero(), &mut dw);
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); g.c_in * pin];
            gemm(MatRef::new(w, g.c_in, fk), dzm, T::zero(), &mut dx);
            dx
        });
        let db: Vec<T> = d_n.chunks(pout).map(|c| c.iter().copied().sum()).collect();
        (dx, dw, db)
    });
    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.batch * g.c_in * pin));
    let mut dw = vec![T::zero(); g.c_in * fk];
    let mut db = vec![T::zero(); g.c_out];
    for (dx, dw_n, db_n) in per_image {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        dw.iter_mut().zip(&dw_n).for_each(|(a, b)| *a = *a + *b);
        db.iter_mut().zip(&db_n).for_each(|(a, b)| *a = *a + *b);
    }
    ConvGrads { dx: dx_all, dw, db }
}

/// Max pooling with window == stride over `planes` independent `[D, H, W]` planes.
/// Returns the pooled values and, per output cell, the flat in-plane index of
/// the first maximal element in scan order.
pub fn maxpool_forward<T: Real>(x: &[T], planes: usize, input: [usize; 3], win: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let [_, ih, iw] = input;
    let out_sp = [0, 1, 2].map(|a| input[a] / win[a]);
    let [od, oh, ow] = out_sp;
    let (ip, op) = (input.iter().product::<usize>(), od * oh * ow);
    let mut vals = vec![T::zero(); planes * op];
    let mut arg = vec![0u32; planes * op];
    let results = par::map_range(planes, |pl| {
        let src = &x[pl * ip..(pl + 1) * ip];
        let mut v = Vec::with_capacity(op);
        let mut a = Vec::with_capacity(op);
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for dz in 0..win[0] {
                        for dy in 0..win[1] {
                            for dx in 0..win[2] {
                                let i = ((z * win[0] + dz) * ih + y * win[1] + dy) * iw + xo * win[2] + dx;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    v.push(best);
                    a.push(best_i as u32);
                }
            }
        }
        (v, a)
    });
    for (pl, (v, a)) in results.into_iter().enumerate() {
        vals[pl * op..(pl + 1) * op].copy_from_slice(&v);
        arg[pl * op..(pl + 1) * op].copy_from_slice(&a);
    }
    (vals, arg)
}

pub fn maxpool_backward<T: Real>(dout: &[T], arg: &[u32], planes: usize, in_plane: usize) -> Vec<T> {
    let op = arg.len() / planes.max(1);
    let mut dx = vec![T::zero(); planes * in_plane];
    par::for_each_chunk_mut(&mut dx, in_plane, |pl, dst| {
        for (g, &a) in dout[pl * op..(pl + 1) * op].iter().zip(&arg[pl * op..(pl + 1) * op]) {
            dst[a as usize] = dst[a as usize] + *g;
        }
    });
    dx
}

/// Windowed mean along one axis of a `[D, H, W]` plane: output `o` averages
/// input positions `o..o+win` that fall inside the axis.
fn window_mean_axis<T: Real>(src: &[T], dst: &mut [T], extents: [usize; 3], axis: usize, win: usize, adjoint: bool) {
    let len = extents[axis];
    let stride: usize = extents[axis + 1..].iter().product();
    let outer: usize = extents[..axis].iter().product();
    let inv: Vec<T> = (0..len).map(|o| T::one() / T::of((len - o).min(win) as f64)).collect();
    dst.fill(T::zero());
    for o_blk in 0..outer {
        for inner in 0..stride {
            let base = o_blk * len * stride + inner;
            for o in 0..len {
                let hi = (o + win).min(len);
                if adjoint {
                    let g = src[base + o * stride] * inv[o];
                    for i in o..hi {
                        dst[base + i * stride] = dst[base + i * stride] + g;
                    }
                } else {
                    let mut s = T::zero();
                    for i in o..hi {
                        s = s + src[base + i * stride];
                    }
                    dst[base + o * stride] = s * inv[o];
                }
            }
        }
    }
}

/// Shape-preserving stride-1 mean over a `win` window anchored at each voxel,
/// normalized by the number of in-bounds voxels. Separable per axis since the
/// in-bounds count factorizes.
pub fn avgpool_same<T: Real>(x: &[T], planes: usize, extents: [usize; 3], win: [usize; 3], adjoint: bool) -> Vec<T> {
    let ip: usize = extents.iter().product();
    let mut out = vec![T::zero(); planes * ip];
    par::for_each_chunk_mut(&mut out, ip, |pl, dst| {
        let mut a = x[pl * ip..(pl + 1) * ip].to_vec();
        let mut b = vec![T::zero(); ip];
        let order: [usize; 3] = if adjoint { [2, 1, 0] } else { [0, 1, 2] };
        for axis in order {
            if win[axis] > 1 {
                window_mean_axis(&a, &mut b, extents, axis, win[axis], adjoint);
                std::mem::swap(&mut a, &mut b);
            }
        }
        dst.copy_from_slice(&a);
    });
    out
}

/// Per-channel batch statistics over `[N, C, S]` (biased variance).
pub fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            acc += x[(b * c + ch) * s..(b * c + ch + 1) * s].iter().map(|v| v.f64()).sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x[(b * c + ch) * s..(b * c + ch + 1) * s].iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}
