//! Raw numeric kernels behind the differentiable ops: strided 3-d convolution
//! via per-frame im2col + GEMM, and separable axis resampling.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Convolution geometry. Temporal padding is leading-only, spatial padding
/// is symmetric; all padding values are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride_t: usize,
    pub stride_s: usize,
    pub pad_t: usize,
    pub pad_s: usize,
}

impl ConvGeom {
    pub fn out_dims(&self, t: usize, h: usize, w: usize, kt: usize, ks: usize) -> Result<(usize, usize, usize)> {
        let tp = t + self.pad_t;
        let hp = h + 2 * self.pad_s;
        let wp = w + 2 * self.pad_s;
        if tp < kt || hp < ks || wp < ks || self.stride_t == 0 || self.stride_s == 0 {
            return Err(shape_err!(
                "kernel ({kt},{ks},{ks}) does not fit padded input ({tp},{hp},{wp})"
            ));
        }
        Ok(((tp - kt) / self.stride_t + 1, (hp - ks) / self.stride_s + 1, (wp - ks) / self.stride_s + 1))
    }
}

struct ConvShape {
    b: usize,
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    ks: usize,
    to: usize,
    ho: usize,
    wo: usize,
}

impl ConvShape {
    fn k(&self) -> usize {
        self.ci * self.kt * self.ks * self.ks
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_shape<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Result<ConvShape> {
    let (b, ci, t, h, wd) = x.dims5()?;
    let (co, wci, kt, kh, kw) = w.dims5()?;
    if wci != ci {
        return Err(shape_err!("kernel expects {wci} input channels, input has {ci}"));
    }
    if kh != kw {
        return Err(shape_err!("spatial kernel must be square, got {kh}x{kw}"));
    }
    let (to, ho, wo) = g.out_dims(t, h, wd, kt, kh)?;
    Ok(ConvShape { b, ci, t, h, w: wd, co, kt, ks: kh, to, ho, wo })
}

/// Fills `cols` (K x HWo) for output frame `t_o` of batch item `bi`.
fn im2col<T: Scalar>(x: &[T], s: &ConvShape, g: &ConvGeom, bi: usize, t_o: usize, cols: &mut [T]) {
    let hw_o = s.hw_out();
    let hw_i = s.h * s.w;
    let mut r = 0;
    for c in 0..s.ci {
        for dt in 0..s.kt {
            let t_in = (t_o * g.stride_t + dt) as isize - g.pad_t as isize;
            for dh in 0..s.ks {
                for dw in 0..s.ks {
                    let row = &mut cols[r * hw_o..(r + 1) * hw_o];
                    r += 1;
                    if t_in < 0 || t_in as usize >= s.t {
                        row.fill(T::zero());
                        continue;
                    }
                    let frame = &x[((bi * s.ci + c) * s.t + t_in as usize) * hw_i..][..hw_i];
                    for ho in 0..s.ho {
                        let h_in = (ho * g.stride_s + dh) as isize - g.pad_s as isize;
                        let out = &mut row[ho * s.wo..(ho + 1) * s.wo];
                        if h_in < 0 || h_in as usize >= s.h {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &frame[h_in as usize * s.w..][..s.w];
                        for (wo, o) in out.iter_mut().enumerate() {
                            let w_in = (wo * g.stride_s + dw) as isize - g.pad_s as isize;
                            *o = if w_in < 0 || w_in as usize >= s.w { T::zero() } else { line[w_in as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `dx`, the adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, g: &ConvGeom, bi: usize, t_o: usize, dx: &mut [T]) {
    let hw_o = s.hw_out();
    let hw_i = s.h * s.w;
    let mut r = 0;
    for c in 0..s.ci {
        for dt in 0..s.kt {
            let t_in = (t_o * g.stride_t + dt) as isize - g.pad_t as isize;
            for dh in 0..s.ks {
                for dw in 0..s.ks {
                    let row = &cols[r * hw_o..(r + 1) * hw_o];
                    r += 1;
                    if t_in < 0 || t_in as usize >= s.t {
                        continue;
                    }
                    let frame = &mut dx[((bi * s.ci + c) * s.t + t_in as usize) * hw_i..][..hw_i];
                    for ho in 0..s.ho {
                        let h_in = (ho * g.stride_s + dh) as isize - g.pad_s as isize;
                        if h_in < 0 || h_in as usize >= s.h {
                            continue;
                        }
                        let line = &mut frame[h_in as usize * s.w..][..s.w];
                        for wo in 0..s.wo {
                            let w_in = (wo * g.stride_s + dw) as isize - g.pad_s as isize;
                            if w_in >= 0 && (w_in as usize) < s.w {
                                line[w_in as usize] = line[w_in as usize] + row[ho * s.wo + wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[b, o, t, h, w] = bias[o] + sum W[o, c, dt, dh, dw] * x_pad[b, c, t*st+dt, h*ss+dh, w*ss+dw]`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Result<Tensor<T>> {
    let s = conv_shape(x, w, g)?;
    if let Some(b) = bias {
        if b.shape() != [s.co] {
            return Err(shape_err!("bias shape {:?} does not match {} output channels", b.shape(), s.co));
        }
    }
    let (k, hw_o) = (s.k(), s.hw_out());
    let mut out = Tensor::zeros(&[s.b, s.co, s.to, s.ho, s.wo]);
    let mut cols = vec![T::zero(); k * hw_o];
    let mut buf = vec![T::zero(); s.co * hw_o];
    let wm = MatRef::row_major(w.as_slice(), s.co, k);
    let o = out.as_mut_slice();
    for bi in 0..s.b {
        for t_o in 0..s.to {
            im2col(x.as_slice(), &s, g, bi, t_o, &mut cols);
            gemm(wm, MatRef::row_major(&cols, k, hw_o), T::zero(), &mut buf);
            for c in 0..s.co {
                let dst = &mut o[((bi * s.co + c) * s.to + t_o) * hw_o..][..hw_o];
                let src = &buf[c * hw_o..(c + 1) * hw_o];
                match bias {
                    Some(b) => {
                        let bv = b.as_slice()[c];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v + bv;
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`] with respect to input, weight and bias.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let s = conv_shape(x, w, g)?;
    let (k, hw_o) = (s.k(), s.hw_out());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[s.co]));
    let mut cols = vec![T::zero(); k * hw_o];
    let wm = MatRef::row_major(w.as_slice(), s.co, k);
    let dys = dy.as_slice();
    for bi in 0..s.b {
        for t_o in 0..s.to {
            // dY slice for this frame: co rows with stride to*hw_o.
            let base = (bi * s.co * s.to + t_o) * hw_o;
            let dym = MatRef { data: &dys[base..], rows: s.co, cols: hw_o, rs: s.to * hw_o, cs: 1 };
            if let Some(db) = db.as_mut() {
                for (c, acc) in db.as_mut_slice().iter_mut().enumerate() {
                    let row = &dys[base + c * s.to * hw_o..][..hw_o];
                    *acc = *acc + row.iter().copied().sum::<T>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                im2col(x.as_slice(), &s, g, bi, t_o, &mut cols);
                gemm(dym, MatRef::row_major(&cols, k, hw_o).t(), T::one(), dw.as_mut_slice());
            }
            if let Some(dx) = dx.as_mut() {
                gemm(wm.t(), dym, T::zero(), &mut cols);
                col2im(&cols, &s, g, bi, t_o, dx.as_mut_slice());
            }
        }
    }
    Ok((dx, dw, db))
}

/// Applies `y[.., j, ..] = sum_i m[j, i] x[.., i, ..]` along `axis`.
pub fn resample_axis<T: Scalar>(x: &Tensor<T>, axis: usize, m: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        s => return Err(shape_err!("resampling matrix must be 2-d, got {s:?}")),
    };
    let (n_out, n_in) = if transpose { (cols, rows) } else { (rows, cols) };
    if axis >= x.ndim() || x.shape()[axis] != n_in {
        return Err(shape_err!("resample axis {axis} of {:?} expects length {n_in}", x.shape()));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[axis] = n_out;
    let mut y = Tensor::zeros(&shape);
    let (xs, ms) = (x.as_slice(), m.as_slice());
    let ys = y.as_mut_slice();
    for o in 0..outer {
        for j in 0..n_out {
            for i in 0..n_in {
                let coef = if transpose { ms[i * cols + j] } else { ms[j * cols + i] };
                if coef == T::zero() {
                    continue;
                }
                let src = &xs[(o * n_in + i) * inner..][..inner];
                let dst = &mut ys[(o * n_out + j) * inner..][..inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + coef * v;
                }
            }
        }
    }
    Ok(y)
}
