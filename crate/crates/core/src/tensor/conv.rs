//! 2D cross-correlation on equirectangular feature maps.
//!
//! Columns are longitude and wrap around; rows are latitude and are
//! zero-padded.

use super::{Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`; `None` in the
    /// latitude zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        if y < 0 || y >= self.h as isize {
            return None;
        }
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        Some((y as usize, x.rem_euclid(self.w as isize) as usize))
    }

    fn x_at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c_in + c) * self.h + y) * self.w + x
    }

    fn w_at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx
    }

    fn out_at(&self, n: usize, co: usize, oy: usize, ox: usize) -> usize {
        ((n * self.c_out + co) * self.out_h + oy) * self.out_w + ox
    }
}

impl<'t> Var<'t> {
    /// `x: [C, H, W]` or `[N, C, H, W]`, `weight: [C_out, C_in, kh, kw]`,
    /// `bias: [C_out]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: Conv2dSpec) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let batched = x.rank() == 4;
        let (batch, c_in, h, width) = match *x.shape() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            ref s => return shape_err(format!("conv2d input must be rank 3 or 4, got {s:?}")),
        };
        let &[c_out, wc_in, kh, kw] = w.shape() else {
            return shape_err(format!("conv2d weight must be rank 4, got {:?}", w.shape()));
        };
        if wc_in != c_in {
            return shape_err(format!("conv2d weight expects {wc_in} channels, input has {c_in}"));
        }
        if spec.stride == 0 || h + 2 * spec.padding < kh || width + 2 * spec.padding < kw {
            return shape_err(format!(
                "kernel {kh}x{kw} does not fit padded {h}x{width} input (pad {}, stride {})",
                spec.padding, spec.stride
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return shape_err(format!("conv2d bias {:?} for {c_out} outputs", b.shape()));
            }
        }
        let geo = Geometry {
            batch,
            c_in,
            h,
            w: width,
            c_out,
            kh,
            kw,
            out_h: (h + 2 * spec.padding - kh) / spec.stride + 1,
            out_w: (width + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let bias_value = bias.map(|b| b.value());

        let mut out = vec![0.0; batch * c_out * geo.out_h * geo.out_w];
        for n in 0..batch {
            for co in 0..c_out {
                let b = bias_value.as_ref().map_or(0.0, |b| b.data()[co]);
                for oy in 0..geo.out_h {
                    for ox in 0..geo.out_w {
                        let mut acc = b;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                                        acc += w.data()[geo.w_at(co, ci, ky, kx)]
                                            * x.data()[geo.x_at(n, ci, y, xx)];
                                    }
                                }
                            }
                        }
                        out[geo.out_at(n, co, oy, ox)] = acc;
                    }
                }
            }
        }
        let out_shape = if batched {
            vec![batch, c_out, geo.out_h, geo.out_w]
        } else {
            vec![c_out, geo.out_h, geo.out_w]
        };
        let out = Tensor::new(out_shape, out)?;

        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let (x_shape, w_shape) = (x.shape().to_vec(), w.shape().to_vec());
        Ok(self.tape().record(&inputs, out, move |g| {
            let g = g.data();
            let mut dx = vec![0.0; x.numel()];
            let mut dw = vec![0.0; w.numel()];
            let mut db = vec![0.0; geo.c_out];
            for n in 0..geo.batch {
                for co in 0..geo.c_out {
                    for oy in 0..geo.out_h {
                        for ox in 0..geo.out_w {
                            let go = g[geo.out_at(n, co, oy, ox)];
                            if go == 0.0 {
                                continue;
                            }
                            db[co] += go;
                            for ci in 0..geo.c_in {
                                for ky in 0..geo.kh {
                                    for kx in 0..geo.kw {
                                        if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                                            let xi = geo.x_at(n, ci, y, xx);
                                            let wi = geo.w_at(co, ci, ky, kx);
                                            dx[xi] += w.data()[wi] * go;
                                            dw[wi] += x.data()[xi] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::new(x_shape.clone(), dx).unwrap()),
                Some(Tensor::new(w_shape.clone(), dw).unwrap()),
            ];
            if has_bias {
                grads.push(Some(Tensor::new(vec![geo.c_out], db).unwrap()));
            }
            grads
        }))
    }
}
