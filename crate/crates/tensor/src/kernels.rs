//! Raw slice kernels behind the tape primitives.
//!
//! Every kernel walks its loops in a fixed order, so repeated calls on
//! identical inputs produce bit-identical results.

/// Geometry of a 2-D convolution over NCHW data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a sliding window, `None` if the window never fits.
pub(crate) fn window_out(n: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    if n + 2 * pad < span {
        return None;
    }
    Some((n + 2 * pad - span) / stride + 1)
}

/// Range of output positions whose input tap `o*s + k*d - p` lands inside `[0, n_in)`.
#[inline]
fn valid_range(k: usize, s: usize, p: usize, d: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let off = k * d;
    let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
    let hi = if n_in + p > off {
        ((n_in - 1 + p - off) / s + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let (s, p, d) = (g.stride, g.pad, g.dil);
    let pointwise = g.is_pointwise();
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o = &mut out[(b * g.cout + oc) * out_plane..][..out_plane];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xin = &x[(b * g.cin + ic) * in_plane..][..in_plane];
                let wbase = (oc * cin_g + icg) * g.kh * g.kw;
                if pointwise {
                    let wv = w[wbase];
                    for (ov, xv) in o.iter_mut().zip(xin) {
                        *ov += wv * xv;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    let (y0, y1) = valid_range(ky, s, p, d, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = valid_range(kx, s, p, d, g.w, g.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[wbase + ky * g.kw + kx];
                        let len = x1 - x0;
                        let ix0 = x0 * s + kx * d - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - p;
                            let orow = &mut o[oy * g.ow + x0..][..len];
                            let irow = &xin[iy * g.w + ix0..];
                            if s == 1 {
                                for (ov, xv) in orow.iter_mut().zip(&irow[..len]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * irow[j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let (s, p, d) = (g.stride, g.pad, g.dil);
    let pointwise = g.is_pointwise();
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go = &dy[(b * g.cout + oc) * out_plane..][..out_plane];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let gx = &mut dx[(b * g.cin + ic) * in_plane..][..in_plane];
                let wbase = (oc * cin_g + icg) * g.kh * g.kw;
                if pointwise {
                    let wv = w[wbase];
                    for (xv, gv) in gx.iter_mut().zip(go) {
                        *xv += wv * gv;
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    let (y0, y1) = valid_range(ky, s, p, d, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = valid_range(kx, s, p, d, g.w, g.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[wbase + ky * g.kw + kx];
                        let len = x1 - x0;
                        let ix0 = x0 * s + kx * d - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - p;
                            let grow = &go[oy * g.ow + x0..][..len];
                            let xrow = &mut gx[iy * g.w + ix0..];
                            if s == 1 {
                                for (xv, gv) in xrow[..len].iter_mut().zip(grow) {
                                    *xv += wv * gv;
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    xrow[j * s] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_weight(g: &ConvGeom, x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let (s, p, d) = (g.stride, g.pad, g.dil);
    let pointwise = g.is_pointwise();
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go = &dy[(b * g.cout + oc) * out_plane..][..out_plane];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xin = &x[(b * g.cin + ic) * in_plane..][..in_plane];
                let wbase = (oc * cin_g + icg) * g.kh * g.kw;
                if pointwise {
                    dw[wbase] += dot(go, xin);
                    continue;
                }
                for ky in 0..g.kh {
                    let (y0, y1) = valid_range(ky, s, p, d, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = valid_range(kx, s, p, d, g.w, g.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let len = x1 - x0;
                        let ix0 = x0 * s + kx * d - p;
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - p;
                            let grow = &go[oy * g.ow + x0..][..len];
                            let irow = &xin[iy * g.w + ix0..];
                            if s == 1 {
                                acc += dot(grow, &irow[..len]);
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    acc += gv * irow[j * s];
                                }
                            }
                        }
                        dw[wbase + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators, combined in a fixed order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Pooling window over NCHW planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    #[inline]
    fn window(&self, o: usize, n: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as isize) as usize).min(n);
        (lo, hi)
    }
}

pub(crate) fn max_pool_forward(g: &PoolGeom, x: &[f64], out: &mut [f64], argmax: &mut [u32]) {
    let ip = g.h * g.w;
    let op = g.oh * g.ow;
    for c in 0..g.planes {
        let xin = &x[c * ip..][..ip];
        for oy in 0..g.oh {
            let (ylo, yhi) = g.window(oy, g.h);
            for ox in 0..g.ow {
                let (xlo, xhi) = g.window(ox, g.w);
                let mut best = f64::NEG_INFINITY;
                let mut arg = ylo * g.w + xlo;
                for iy in ylo..yhi {
                    for ix in xlo..xhi {
                        let v = xin[iy * g.w + ix];
                        if v > best {
                            best = v;
                            arg = iy * g.w + ix;
                        }
                    }
                }
                out[c * op + oy * g.ow + ox] = best;
                argmax[c * op + oy * g.ow + ox] = (c * ip + arg) as u32;
            }
        }
    }
}

/// Smallest gap between the largest and second-largest tap of any window.
pub(crate) fn max_pool_margin(g: &PoolGeom, x: &[f64]) -> f64 {
    let ip = g.h * g.w;
    let mut margin = f64::INFINITY;
    for c in 0..g.planes {
        let xin = &x[c * ip..][..ip];
        for oy in 0..g.oh {
            let (ylo, yhi) = g.window(oy, g.h);
            for ox in 0..g.ow {
                let (xlo, xhi) = g.window(ox, g.w);
                let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for iy in ylo..yhi {
                    for ix in xlo..xhi {
                        let v = xin[iy * g.w + ix];
                        if v > first {
                            second = first;
                            first = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                margin = margin.min(first - second);
            }
        }
    }
    margin
}

/// Average pooling that divides by the number of in-bounds taps.
pub(crate) fn avg_pool_forward(g: &PoolGeom, x: &[f64], out: &mut [f64]) {
    let ip = g.h * g.w;
    let op = g.oh * g.ow;
    for c in 0..g.planes {
        let xin = &x[c * ip..][..ip];
        for oy in 0..g.oh {
            let (ylo, yhi) = g.window(oy, g.h);
            for ox in 0..g.ow {
                let (xlo, xhi) = g.window(ox, g.w);
                let mut acc = 0.0;
                for iy in ylo..yhi {
                    for ix in xlo..xhi {
                        acc += xin[iy * g.w + ix];
                    }
                }
                let count = ((yhi - ylo) * (xhi - xlo)) as f64;
                out[c * op + oy * g.ow + ox] = acc / count;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, dy: &[f64], dx: &mut [f64]) {
    let ip = g.h * g.w;
    let op = g.oh * g.ow;
    for c in 0..g.planes {
        let gx = &mut dx[c * ip..][..ip];
        for oy in 0..g.oh {
            let (ylo, yhi) = g.window(oy, g.h);
            for ox in 0..g.ow {
                let (xlo, xhi) = g.window(ox, g.w);
                let count = ((yhi - ylo) * (xhi - xlo)) as f64;
                let gv = dy[c * op + oy * g.ow + ox] / count;
                for iy in ylo..yhi {
                    for ix in xlo..xhi {
                        gx[iy * g.w + ix] += gv;
                    }
                }
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (ov, bv) in orow.iter_mut().zip(&b[p * n..][..n]) {
                *ov += av * bv;
            }
        }
    }
}

/// `out[m, k] += dy[m, n] * b[k, n]^T`
pub(crate) fn matmul_acc_bt(dy: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &dy[i * n..][..n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..][..n]);
        }
    }
}

/// `out[k, n] += a[m, k]^T * dy[m, n]`
pub(crate) fn matmul_acc_at(a: &[f64], dy: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &dy[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (ov, gv) in out[p * n..][..n].iter_mut().zip(grow) {
                *ov += av * gv;
            }
        }
    }
}
