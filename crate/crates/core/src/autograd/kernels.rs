//! Raw convolution and dense kernels on flat buffers.

use crate::tensor::Shape;

/// Geometry of a 2-D convolution over an input of shape `input`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_shape(&self) -> Shape {
        let s = self.input;
        let oh = (s.h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (s.w + 2 * self.pad - self.k) / self.stride + 1;
        Shape::new(s.n, self.out_c, oh, ow)
    }

    /// Output index range `[lo, hi)` whose tap `kk` lands inside an input axis of `len`.
    #[inline]
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        // o*stride + kk - pad in [0, len)
        let lo = if kk >= self.pad {
            0
        } else {
            (self.pad - kk).div_ceil(self.stride)
        };
        let hi = if len + self.pad > kk {
            ((len + self.pad - kk - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let is = g.input;
    let os = g.out_shape();
    let (k, s, pad) = (g.k, g.stride, g.pad);
    let mut out = vec![0.0; os.numel()];
    for n in 0..is.n {
        for oc in 0..g.out_c {
            let obase = (n * g.out_c + oc) * os.plane();
            let oplane = &mut out[obase..obase + os.plane()];
            oplane.iter_mut().for_each(|v| *v = b[oc]);
            for ic in 0..is.c {
                let ibase = (n * is.c + ic) * is.plane();
                let iplane = &x[ibase..ibase + is.plane()];
                let wbase = (oc * is.c + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = g.valid(ky, is.h, os.h);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid(kx, is.w, os.w);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - pad;
                            let orow = &mut oplane[oy * os.w..(oy + 1) * os.w];
                            let irow = &iplane[iy * is.w..(iy + 1) * is.w];
                            if s == 1 {
                                let ix0 = ox0 + kx - pad;
                                for (o, i) in orow[ox0..ox1]
                                    .iter_mut()
                                    .zip(&irow[ix0..ix0 + (ox1 - ox0)])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * s + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients given the output gradient `gy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let is = g.input;
    let os = g.out_shape();
    let (k, s, pad) = (g.k, g.stride, g.pad);
    for n in 0..is.n {
        for oc in 0..g.out_c {
            let obase = (n * g.out_c + oc) * os.plane();
            let gplane = &gy[obase..obase + os.plane()];
            db[oc] += gplane.iter().sum::<f64>();
            for ic in 0..is.c {
                let ibase = (n * is.c + ic) * is.plane();
                let iplane = &x[ibase..ibase + is.plane()];
                let dplane = &mut dx[ibase..ibase + is.plane()];
                let wbase = (oc * is.c + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = g.valid(ky, is.h, os.h);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (ox0, ox1) = g.valid(kx, is.w, os.w);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - pad;
                            let grow = &gplane[oy * os.w..(oy + 1) * os.w];
                            let irow = &iplane[iy * is.w..(iy + 1) * is.w];
                            let drow = &mut dplane[iy * is.w..(iy + 1) * is.w];
                            if s == 1 {
                                let ix0 = ox0 + kx - pad;
                                let span = ox1 - ox0;
                                for ((gv, iv), dv) in grow[ox0..ox1]
                                    .iter()
                                    .zip(&irow[ix0..ix0 + span])
                                    .zip(drow[ix0..ix0 + span].iter_mut())
                                {
                                    acc += gv * iv;
                                    *dv += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * s + kx - pad;
                                    acc += grow[ox] * irow[ix];
                                    drow[ix] += wv * grow[ox];
                                }
                            }
                        }
                        dw[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// y[n, o] = b[o] + sum_i w[o, i] x[n, i]
pub(crate) fn dense_forward(x: &[f64], n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = w.len() / out;
    let mut y = vec![0.0; n * out];
    for r in 0..n {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            y[r * out + o] = b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    gy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let out = db.len();
    let inp = w.len() / out;
    for r in 0..n {
        let xr = &x[r * inp..(r + 1) * inp];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let gv = gy[r * out + o];
            if gv == 0.0 {
                continue;
            }
            db[o] += gv;
            let wr = &w[o * inp..(o + 1) * inp];
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                dwr[i] += gv * xr[i];
                dxr[i] += gv * wr[i];
            }
        }
    }
}
