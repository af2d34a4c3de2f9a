use super::Float;

/// Kernel, stride and padding of a 2D convolution, per axis (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
        }
    }

    /// Output size of a forward convolution, `None` if the kernel does not fit.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.ph;
        let wp = w + 2 * self.pw;
        if hp < self.kh || wp < self.kw {
            return None;
        }
        Some(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }

    /// Output size of a transposed convolution with per-axis output padding.
    pub fn conv_t_out(&self, h: usize, w: usize, oph: usize, opw: usize) -> Option<(usize, usize)> {
        let ho = ((h - 1) * self.sh + self.kh + oph).checked_sub(2 * self.ph)?;
        let wo = ((w - 1) * self.sw + self.kw + opw).checked_sub(2 * self.pw)?;
        Some((ho, wo))
    }
}

/// Unfold one `c×h×w` image into a `(c·kh·kw) × (ho·wo)` column matrix.
pub(crate) fn im2col<F: Float>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [F],
) {
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let img = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `c×h×w` image.
pub(crate) fn col2im<F: Float>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [F],
) {
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let img = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
