//! Dense kernels behind the tape: dilated grouped conv1d and affine maps.
//!
//! Both reduce to strided GEMM calls with a fixed loop order, so results
//! are bit-identical run to run on one machine.

use std::cell::Cell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` while counting every multiply-accumulate issued by the
/// counted primitives on this thread.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = MAC_COUNTER.with(|c| c.replace(previous)).unwrap_or(0);
    if let Some(p) = previous {
        MAC_COUNTER.with(|c| c.set(Some(p + counted)));
    }
    (out, counted)
}

pub(crate) fn record_macs(n: usize) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n as u64));
        }
    });
}

/// Strided matrix view into a flat buffer.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn new(offset: usize, rs: usize, cs: usize) -> Self {
        Self { offset, rs, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c[m×n] += a[m×k] · b[k×n]` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], av: View, b: &[f64], bv: View, c: &mut [f64], cv: View) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len() && bv.last(k, n) < b.len() && cv.last(m, n) < c.len());
    // SAFETY: the asserts above bound every element the views can address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            1.0,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Shape bookkeeping shared by the conv passes.
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub frames: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, dilation: usize, groups: usize) -> Result<Self> {
        let (batch, c_in, frames) = x.dims3()?;
        let (c_out, c_in_g, kernel) = w.dims3()?;
        let bad = |d: String| Err(Error::shape("conv1d", d));
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return bad(format!("{c_in} in / {c_out} out channels not divisible by {groups} groups"));
        }
        if c_in / groups != c_in_g {
            return bad(format!("input channels {c_in} / groups {groups} != kernel in-channels {c_in_g}"));
        }
        if kernel % 2 == 0 {
            return bad(format!("kernel size {kernel} must be odd"));
        }
        if dilation == 0 {
            return bad("dilation must be positive".into());
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return bad(format!("bias shape {:?} for {c_out} output channels", b.shape()));
            }
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            frames,
            kernel,
            dilation,
            groups,
        })
    }

    fn ci_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn co_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Frame shift of tap `k` and the output frame range it touches.
    fn tap(&self, k: usize) -> (isize, usize, usize) {
        let shift = (k as isize - (self.kernel / 2) as isize) * self.dilation as isize;
        let t = self.frames as isize;
        let t0 = (-shift).max(0).min(t) as usize;
        let t1 = (t - shift).min(t).max(0) as usize;
        (shift, t0, t1.max(t0))
    }
}

/// Same-padded dilated cross-correlation.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, dilation: usize, groups: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, bias, dilation, groups)?;
    let (t, k) = (g.frames, g.kernel);
    let mut out = vec![0.0; g.batch * g.c_out * t];
    if let Some(b) = bias {
        for row in out.chunks_mut(t).enumerate() {
            let o = row.0 % g.c_out;
            row.1.fill(b.data()[o]);
        }
    }
    record_macs(g.batch * g.c_out * g.ci_g() * k * t);
    let (xd, wd) = (x.data(), w.data());
    for b in 0..g.batch {
        for grp in 0..g.groups {
            for tap in 0..k {
                let (shift, t0, t1) = g.tap(tap);
                if t1 == t0 {
                    continue;
                }
                let a = View::new(grp * g.co_g() * g.ci_g() * k + tap, g.ci_g() * k, k);
                let xin = View::new(
                    b * g.c_in * t + grp * g.ci_g() * t + (t0 as isize + shift) as usize,
                    t,
                    1,
                );
                let c = View::new(b * g.c_out * t + grp * g.co_g() * t + t0, t, 1);
                gemm_acc(g.co_g(), g.ci_g(), t1 - t0, wd, a, xd, xin, &mut out, c);
            }
        }
    }
    Tensor::new(vec![g.batch, g.c_out, t], out)
}

/// Gradients of [`conv1d`] with respect to input, kernel and bias.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dilation: usize,
    groups: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(x, w, None, dilation, groups)?;
    let (t, k) = (g.frames, g.kernel);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    for (i, row) in dyd.chunks(t).enumerate() {
        db[i % g.c_out] += row.iter().sum::<f64>();
    }
    for b in 0..g.batch {
        for grp in 0..g.groups {
            for tap in 0..k {
                let (shift, t0, t1) = g.tap(tap);
                if t1 == t0 {
                    continue;
                }
                let n = t1 - t0;
                let x_off = b * g.c_in * t + grp * g.ci_g() * t + (t0 as isize + shift) as usize;
                let dy_off = b * g.c_out * t + grp * g.co_g() * t + t0;
                let w_off = grp * g.co_g() * g.ci_g() * k + tap;
                // dx[i, t+s] += Σ_o w[o,i,k] dy[o,t]
                gemm_acc(
                    g.ci_g(),
                    g.co_g(),
                    n,
                    wd,
                    View::new(w_off, k, g.ci_g() * k),
                    dyd,
                    View::new(dy_off, t, 1),
                    &mut dx,
                    View::new(x_off, t, 1),
                );
                // dw[o,i,k] += Σ_t dy[o,t] x[i,t+s]
                gemm_acc(
                    g.co_g(),
                    n,
                    g.ci_g(),
                    dyd,
                    View::new(dy_off, t, 1),
                    xd,
                    View::new(x_off, 1, t),
                    &mut dw,
                    View::new(w_off, g.ci_g() * k, k),
                );
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.c_out], db)?,
    ))
}

fn linear_dims(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let (rows, f_in) = x.dims2()?;
    let (f_out, w_in) = w.dims2()?;
    if f_in != w_in {
        return Err(Error::shape("linear", format!("input features {f_in} vs weight {w_in}")));
    }
    if let Some(b) = bias {
        if b.shape() != [f_out] {
            return Err(Error::shape("linear", format!("bias {:?} for {f_out} outputs", b.shape())));
        }
    }
    Ok((rows, f_in, f_out))
}

/// `x · wᵀ + b` for `x: [rows, in]`, `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, f_in, f_out) = linear_dims(x, w, bias)?;
    let mut out = vec![0.0; rows * f_out];
    if let Some(b) = bias {
        for row in out.chunks_mut(f_out) {
            row.copy_from_slice(b.data());
        }
    }
    record_macs(rows * f_in * f_out);
    gemm_acc(
        rows,
        f_in,
        f_out,
        x.data(),
        View::new(0, f_in, 1),
        w.data(),
        View::new(0, 1, f_in),
        &mut out,
        View::new(0, f_out, 1),
    );
    Tensor::new(vec![rows, f_out], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, f_in, f_out) = linear_dims(x, w, None)?;
    let mut dx = vec![0.0; rows * f_in];
    let mut dw = vec![0.0; f_out * f_in];
    let mut db = vec![0.0; f_out];
    for row in dy.data().chunks(f_out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    gemm_acc(
        rows,
        f_out,
        f_in,
        dy.data(),
        View::new(0, f_out, 1),
        w.data(),
        View::new(0, f_in, 1),
        &mut dx,
        View::new(0, f_in, 1),
    );
    gemm_acc(
        f_out,
        rows,
        f_in,
        dy.data(),
        View::new(0, 1, f_out),
        x.data(),
        View::new(0, f_in, 1),
        &mut dw,
        View::new(0, f_in, 1),
    );
    Ok((
        Tensor::new(vec![rows, f_in], dx)?,
        Tensor::new(vec![f_out, f_in], dw)?,
        Tensor::new(vec![f_out], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Nested-loop reference convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, dil: usize, groups: usize) -> Tensor {
        let (bs, ci, t) = x.dims3().unwrap();
        let (co, cig, k) = w.dims3().unwrap();
        let cog = co / groups;
        let mut out = Tensor::zeros(&[bs, co, t]);
        for n in 0..bs {
            for o in 0..co {
                let grp = o / cog;
                for tt in 0..t {
                    let mut acc = b.data()[o];
                    for i in 0..cig {
                        for kk in 0..k {
                            let src = tt as isize + (kk as isize - (k / 2) as isize) * dil as isize;
                            if src >= 0 && (src as usize) < t {
                                let xi = grp * cig + i;
                                acc += w.data()[(o * cig + i) * k + kk] * x.data()[(n * ci + xi) * t + src as usize];
                            }
                        }
                    }
                    out.data_mut()[(n * co + o) * t + tt] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ci, co, k, dil, groups, t) in [(3, 2, 3, 1, 1, 5), (4, 6, 5, 2, 2, 7), (3, 3, 1, 1, 3, 4), (2, 2, 5, 3, 1, 3)] {
            let x = random(&[2, ci, t], &mut rng);
            let w = random(&[co, ci / groups, k], &mut rng);
            let b = random(&[co], &mut rng);
            let fast = conv1d(&x, &w, Some(&b), dil, groups).unwrap();
            let slow = naive_conv(&x, &w, &b, dil, groups);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 6], &mut rng);
        let w = Tensor::eye(3).reshape(vec![3, 3, 1]).unwrap();
        assert_eq!(conv1d(&x, &w, None, 1, 1).unwrap(), x);

        let zeros = Tensor::zeros(&[1, 3, 4]);
        let w = random(&[2, 3, 3], &mut rng);
        let b = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let y = conv1d(&zeros, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn depthwise_equals_per_channel_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 4, 9], &mut rng);
        let w = random(&[4, 1, 3], &mut rng);
        let y = conv1d(&x, &w, None, 2, 4).unwrap();
        for c in 0..4 {
            let xc = x.slice(&[0..1, c..c + 1, 0..9]).unwrap();
            let wc = w.slice(&[c..c + 1, 0..1, 0..3]).unwrap();
            let yc = conv1d(&xc, &wc, None, 2, 1).unwrap();
            assert_eq!(y.slice(&[0..1, c..c + 1, 0..9]).unwrap(), yc);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 3, 4]);
        let w = Tensor::zeros(&[2, 2, 3]);
        let err = conv1d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("in-channels"), "{err}");
        assert!(conv1d(&x, &Tensor::zeros(&[2, 3, 2]), None, 1, 1).is_err());
    }

    #[test]
    fn linear_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3], &mut rng);
        let w = random(&[2, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for r in 0..2 {
            for o in 0..2 {
                let e: f64 = b.data()[o] + (0..3).map(|i| x.data()[r * 3 + i] * w.data()[o * 3 + i]).sum::<f64>();
                assert!((y.data()[r * 2 + o] - e).abs() < 1e-14);
            }
        }
        assert_eq!(linear(&x, &Tensor::eye(3), None).unwrap(), x);
        let z = linear(&x, &Tensor::zeros(&[2, 3]), Some(&b)).unwrap();
        assert_eq!(z.data(), &[b.data()[0], b.data()[1], b.data()[0], b.data()[1]]);
        assert!(linear(&x, &Tensor::zeros(&[2, 4]), None).is_err());
    }

    #[test]
    fn mac_counter_scopes() {
        let x = Tensor::zeros(&[1, 3, 10]);
        let w = Tensor::zeros(&[4, 3, 5]);
        let (_, n) = count_macs(|| conv1d(&x, &w, None, 1, 1).unwrap());
        assert_eq!(n, 4 * 3 * 5 * 10);
        let ((_, inner), outer) = count_macs(|| count_macs(|| linear(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[5, 3]), None)));
        assert_eq!(inner, 30);
        assert_eq!(outer, 30);
    }
}
