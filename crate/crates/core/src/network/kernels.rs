//! Per-sample layer kernels on CHW buffers.

use super::{Real, Shape};

fn pad_input<T: Real>(x: &[T], s: Shape, pad: usize) -> (Vec<T>, usize, usize) {
    let (hp, wp) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut out = vec![T::zero(); s.c * hp * wp];
    for c in 0..s.c {
        for y in 0..s.h {
            let src = &x[(c * s.h + y) * s.w..][..s.w];
            out[(c * hp + y + pad) * wp + pad..][..s.w].copy_from_slice(src);
        }
    }
    (out, hp, wp)
}

pub(crate) struct ConvGeom {
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weights: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (k, s) = (g.kernel, g.stride);
    let padded;
    let (xin, hp, wp) = if g.pad > 0 {
        padded = pad_input(x, g.input, g.pad);
        (&padded.0[..], padded.1, padded.2)
    } else {
        (x, g.input.h, g.input.w)
    };
    let (ho, wo) = (g.output.h, g.output.w);
    for oc in 0..g.output.c {
        let plane = &mut out[oc * ho * wo..][..ho * wo];
        plane.fill(bias[oc]);
        for ic in 0..g.input.c {
            let xplane = &xin[ic * hp * wp..][..hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((oc * g.input.c + ic) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let orow = &mut plane[oy * wo..][..wo];
                        let base = (oy * s + ky) * wp + kx;
                        if s == 1 {
                            let irow = &xplane[base..][..wo];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o = *o + wv * i;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o = *o + wv * xplane[base + ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates into `dw`/`db`; writes the input gradient when `dx` is given.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weights: &[T],
    dout: &[T],
    grads: Option<(&mut [T], &mut [T])>,
    dx: Option<&mut [T]>,
) {
    let (k, s) = (g.kernel, g.stride);
    let padded;
    let (xin, hp, wp) = if g.pad > 0 {
        padded = pad_input(x, g.input, g.pad);
        (&padded.0[..], padded.1, padded.2)
    } else {
        (x, g.input.h, g.input.w)
    };
    let (ho, wo) = (g.output.h, g.output.w);
    if let Some((dw, db)) = grads {
        for oc in 0..g.output.c {
            let dplane = &dout[oc * ho * wo..][..ho * wo];
            db[oc] = db[oc] + dplane.iter().fold(T::zero(), |a, &b| a + b);
            for ic in 0..g.input.c {
                let xplane = &xin[ic * hp * wp..][..hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let drow = &dplane[oy * wo..][..wo];
                            let base = (oy * s + ky) * wp + kx;
                            if s == 1 {
                                for (&d, &i) in drow.iter().zip(&xplane[base..][..wo]) {
                                    acc = acc + d * i;
                                }
                            } else {
                                for (ox, &d) in drow.iter().enumerate() {
                                    acc = acc + d * xplane[base + ox * s];
                                }
                            }
                        }
                        let wi = ((oc * g.input.c + ic) * k + ky) * k + kx;
                        dw[wi] = dw[wi] + acc;
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        let mut dpad = vec![T::zero(); g.input.c * hp * wp];
        for oc in 0..g.output.c {
            let dplane = &dout[oc * ho * wo..][..ho * wo];
            for ic in 0..g.input.c {
                let xplane = &mut dpad[ic * hp * wp..][..hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weights[((oc * g.input.c + ic) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let drow = &dplane[oy * wo..][..wo];
                            let base = (oy * s + ky) * wp + kx;
                            if s == 1 {
                                for (t, &d) in xplane[base..][..wo].iter_mut().zip(drow) {
                                    *t = *t + wv * d;
                                }
                            } else {
                                for (ox, &d) in drow.iter().enumerate() {
                                    let t = &mut xplane[base + ox * s];
                                    *t = *t + wv * d;
                                }
                            }
                        }
                    }
                }
            }
        }
        let p = g.pad;
        for c in 0..g.input.c {
            for y in 0..g.input.h {
                let src = &dpad[(c * hp + y + p) * wp + p..][..g.input.w];
                dx[(c * g.input.h + y) * g.input.w..][..g.input.w].copy_from_slice(src);
            }
        }
    }
}

/// Max pooling; ties resolve to the first element in raster order.
pub(crate) fn pool_forward<T: Real>(
    input: Shape,
    output: Shape,
    size: usize,
    stride: usize,
    x: &[T],
    out: &mut [T],
    argmax: &mut [u32],
) {
    for c in 0..output.c {
        for oy in 0..output.h {
            for ox in 0..output.w {
                let mut best = T::neg_infinity();
                let mut bi = 0usize;
                for ky in 0..size {
                    let y = oy * stride + ky;
                    for kx in 0..size {
                        let xx = ox * stride + kx;
                        let i = (c * input.h + y) * input.w + xx;
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                let o = (c * output.h + oy) * output.w + ox;
                out[o] = best;
                argmax[o] = bi as u32;
            }
        }
    }
}

pub(crate) fn pool_backward<T: Real>(argmax: &[u32], dout: &[T], dx: &mut [T]) {
    dx.fill(T::zero());
    for (&i, &d) in argmax.iter().zip(dout) {
        dx[i as usize] = dx[i as usize] + d;
    }
}

/// Weights laid out `[in][out]`.
pub(crate) fn fc_forward<T: Real>(x: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    let n_out = bias.len();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        let row = &weights[i * n_out..][..n_out];
        for (o, &w) in out.iter_mut().zip(row) {
            *o = *o + xi * w;
        }
    }
}

pub(crate) fn fc_backward<T: Real>(
    x: &[T],
    weights: &[T],
    dout: &[T],
    grads: Option<(&mut [T], &mut [T])>,
    dx: Option<&mut [T]>,
) {
    let n_out = dout.len();
    if let Some((dw, db)) = grads {
        for (b, &d) in db.iter_mut().zip(dout) {
            *b = *b + d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (g, &d) in dw[i * n_out..][..n_out].iter_mut().zip(dout) {
                *g = *g + xi * d;
            }
        }
    }
    if let Some(dx) = dx {
        for (i, v) in dx.iter_mut().enumerate() {
            let row = &weights[i * n_out..][..n_out];
            *v = row
                .iter()
                .zip(dout)
                .fold(T::zero(), |a, (&w, &d)| a + w * d);
        }
    }
}
