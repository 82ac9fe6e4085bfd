//! Differentiable frame warping.
//!
//! Backward warping gathers: every output pixel samples the source at a
//! flow-displaced position with bilinear interpolation, border-clamped.
//! Forward warping scatters: every source pixel splats its value onto the
//! four integer neighbors of its flow target, and colliding contributions
//! are averaged by dividing accumulated values by accumulated weights.
//! Targets whose weight stays below epsilon are holes: they output zero and
//! are flagged by a validity channel instead of being in-filled here — the
//! appearance branch and mask decoder downstream decide what covers them.

use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-pixel displacement map `[N,2,H,W]`: channel 0 is horizontal (right
/// positive), channel 1 vertical (down positive), both in pixel units.
#[derive(Clone, Debug)]
pub struct FlowField<S: Scalar>(Tensor<S>);

impl<S: Scalar> FlowField<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        if t.rank() != 4 || t.dim(1) != 2 {
            return Err(Error::ShapeMismatch(format!("flow field must be [N,2,H,W], got {:?}", t.shape())));
        }
        if !t.is_all_finite() {
            return Err(Error::NonFinite("flow field contains non-finite values".into()));
        }
        Ok(FlowField(t))
    }

    pub fn zero(n: usize, h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[n, 2, h, w]))
    }

    pub fn constant(n: usize, h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let plane = h * w;
        FlowField(Tensor::from_fn(&[n, 2, h, w], |i| {
            if (i / plane).is_multiple_of(2) {
                S::from_f64(dx)
            } else {
                S::from_f64(dy)
            }
        }))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }
}

/// Forward-splat output plus its coverage indicator.
#[derive(Clone, Debug)]
pub struct SplatResult<S: Scalar> {
    pub warped: Tensor<S>,
    /// In `[0,1]`; exactly 0 where the accumulated splat weight fell below
    /// epsilon (a hole), 1 elsewhere. Kept piecewise constant so detaching
    /// it from the gradient path is exact rather than an approximation.
    pub validity: Tensor<S>,
}

fn check_warp_shapes<S: Scalar>(src: &Tensor<S>, flow: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    if src.rank() != 4 {
        return Err(Error::ShapeMismatch(format!("warp source must be [N,C,H,W], got {:?}", src.shape())));
    }
    let (n, c, h, w) = (src.dim(0), src.dim(1), src.dim(2), src.dim(3));
    if flow.shape() != [n, 2, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "flow {:?} does not match source [N={n},2,{h},{w}]",
            flow.shape()
        )));
    }
    Ok((n, c, h, w))
}

#[inline(always)]
fn clamp_i(v: isize, hi: isize) -> usize {
    v.clamp(0, hi) as usize
}

/// Gather warp: `out(y,x) = bilinear(src, x + dx(y,x), y + dy(y,x))` with
/// border-clamped sample coordinates.
pub fn backward_warp<S: Scalar>(src: &Tensor<S>, flow: &FlowField<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = check_warp_shapes(src, flow.tensor())?;
    let sd = src.data();
    let fd = flow.tensor().data();
    let plane = h * w;
    let mut out = vec![S::ZERO; n * c * plane];
    for ni in 0..n {
        let fx_off = ni * 2 * plane;
        let fy_off = fx_off + plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = x as f64 + fd[fx_off + p].to_f64();
                let sy = y as f64 + fd[fy_off + p].to_f64();
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = S::from_f64(sx - x0);
                let fy = S::from_f64(sy - y0);
                let xi0 = clamp_i(x0 as isize, w as isize - 1);
                let xi1 = clamp_i(x0 as isize + 1, w as isize - 1);
                let yi0 = clamp_i(y0 as isize, h as isize - 1);
                let yi1 = clamp_i(y0 as isize + 1, h as isize - 1);
                let (w00, w10) = ((S::ONE - fx) * (S::ONE - fy), fx * (S::ONE - fy));
                let (w01, w11) = ((S::ONE - fx) * fy, fx * fy);
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    out[base + p] = sd[base + yi0 * w + xi0] * w00
                        + sd[base + yi0 * w + xi1] * w10
                        + sd[base + yi1 * w + xi0] * w01
                        + sd[base + yi1 * w + xi1] * w11;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Gradients of [`backward_warp`] w.r.t. source and flow.
pub fn backward_warp_grad<S: Scalar>(
    grad_out: &Tensor<S>,
    src: &Tensor<S>,
    flow: &FlowField<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = check_warp_shapes(src, flow.tensor())?;
    let sd = src.data();
    let fd = flow.tensor().data();
    let gd = grad_out.data();
    let plane = h * w;
    let mut dsrc = vec![S::ZERO; n * c * plane];
    let mut dflow = vec![S::ZERO; n * 2 * plane];
    for ni in 0..n {
        let fx_off = ni * 2 * plane;
        let fy_off = fx_off + plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = x as f64 + fd[fx_off + p].to_f64();
                let sy = y as f64 + fd[fy_off + p].to_f64();
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = S::from_f64(sx - x0);
                let fy = S::from_f64(sy - y0);
                let xi0 = clamp_i(x0 as isize, w as isize - 1);
                let xi1 = clamp_i(x0 as isize + 1, w as isize - 1);
                let yi0 = clamp_i(y0 as isize, h as isize - 1);
                let yi1 = clamp_i(y0 as isize + 1, h as isize - 1);
                let (w00, w10) = ((S::ONE - fx) * (S::ONE - fy), fx * (S::ONE - fy));
                let (w01, w11) = ((S::ONE - fx) * fy, fx * fy);
                let mut gx = S::ZERO;
                let mut gy = S::ZERO;
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let g = gd[base + p];
                    let v00 = sd[base + yi0 * w + xi0];
                    let v10 = sd[base + yi0 * w + xi1];
                    let v01 = sd[base + yi1 * w + xi0];
                    let v11 = sd[base + yi1 * w + xi1];
                    dsrc[base + yi0 * w + xi0] += g * w00;
                    dsrc[base + yi0 * w + xi1] += g * w10;
                    dsrc[base + yi1 * w + xi0] += g * w01;
                    dsrc[base + yi1 * w + xi1] += g * w11;
                    // Sample-position derivatives; clamped borders zero out
                    // automatically because both neighbors coincide.
                    gx += g * ((S::ONE - fy) * (v10 - v00) + fy * (v11 - v01));
                    gy += g * ((S::ONE - fx) * (v01 - v00) + fx * (v11 - v10));
                }
                dflow[fx_off + p] += gx;
                dflow[fy_off + p] += gy;
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, h, w], dsrc)?,
        Tensor::new(vec![n, 2, h, w], dflow)?,
    ))
}

/// Scatter warp with averaging. Each source pixel distributes its value and
/// a unit of weight to the four integer neighbors of `p + flow(p)` with
/// bilinear weights; neighbors outside the frame are dropped. Output is
/// `value / weight` where weight >= epsilon, zero (a hole) elsewhere.
pub fn forward_warp_average<S: Scalar>(
    src: &Tensor<S>,
    flow: &FlowField<S>,
    epsilon: f64,
) -> Result<SplatResult<S>> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("splat epsilon must be > 0, got {epsilon}")));
    }
    let (n, c, h, w) = check_warp_shapes(src, flow.tensor())?;
    let (num, den) = splat_accumulate(src, flow.tensor(), n, c, h, w);
    let eps = S::from_f64(epsilon);
    let plane = h * w;
    let mut warped = vec![S::ZERO; n * c * plane];
    let mut validity = vec![S::ZERO; n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let d = den[ni * plane + p];
            if d >= eps {
                validity[ni * plane + p] = S::ONE;
                for ci in 0..c {
                    let idx = (ni * c + ci) * plane + p;
                    warped[idx] = num[idx] / d;
                }
            }
        }
    }
    Ok(SplatResult {
        warped: Tensor::new(vec![n, c, h, w], warped)?,
        validity: Tensor::new(vec![n, 1, h, w], validity)?,
    })
}

/// Accumulated splat weight per target pixel, `[N,1,H,W]`. Mass bookkeeping
/// for tests and diagnostics.
pub fn accumulated_splat_weight<S: Scalar>(flow: &FlowField<S>) -> Tensor<S> {
    let t = flow.tensor();
    let (n, h, w) = (t.dim(0), t.dim(2), t.dim(3));
    let dummy = Tensor::zeros(&[n, 1, h, w]);
    let (_, den) = splat_accumulate(&dummy, t, n, 1, h, w);
    Tensor::new(vec![n, 1, h, w], den).expect("weight shape")
}

fn splat_accumulate<S: Scalar>(
    src: &Tensor<S>,
    flow: &Tensor<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<S>, Vec<S>) {
    let sd = src.data();
    let fd = flow.data();
    let plane = h * w;
    let mut num = vec![S::ZERO; n * c * plane];
    let mut den = vec![S::ZERO; n * plane];
    for ni in 0..n {
        let fx_off = ni * 2 * plane;
        let fy_off = fx_off + plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let tx = x as f64 + fd[fx_off + p].to_f64();
                let ty = y as f64 + fd[fy_off + p].to_f64();
                let x0 = tx.floor();
                let y0 = ty.floor();
                let fx = S::from_f64(tx - x0);
                let fy = S::from_f64(ty - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for (qx, qy, wq) in [
                    (x0, y0, (S::ONE - fx) * (S::ONE - fy)),
                    (x0 + 1, y0, fx * (S::ONE - fy)),
                    (x0, y0 + 1, (S::ONE - fx) * fy),
                    (x0 + 1, y0 + 1, fx * fy),
                ] {
                    if qx < 0 || qx >= w as isize || qy < 0 || qy >= h as isize {
                        continue;
                    }
                    let q = qy as usize * w + qx as usize;
                    den[ni * plane + q] += wq;
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        num[base + q] += wq * sd[base + p];
                    }
                }
            }
        }
    }
    (num, den)
}

/// Gradients of [`forward_warp_average`]'s warped output w.r.t. source and
/// flow, by the quotient rule through numerator and denominator. The hole
/// indicator itself carries no gradient.
pub fn forward_warp_average_grad<S: Scalar>(
    grad_out: &Tensor<S>,
    src: &Tensor<S>,
    flow: &FlowField<S>,
    epsilon: f64,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = check_warp_shapes(src, flow.tensor())?;
    let ft = flow.tensor();
    let (num, den) = splat_accumulate(src, ft, n, c, h, w);
    let eps = S::from_f64(epsilon);
    let sd = src.data();
    let fd = ft.data();
    let gd = grad_out.data();
    let plane = h * w;
    let mut dsrc = vec![S::ZERO; n * c * plane];
    let mut dflow = vec![S::ZERO; n * 2 * plane];
    for ni in 0..n {
        let fx_off = ni * 2 * plane;
        let fy_off = fx_off + plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let tx = x as f64 + fd[fx_off + p].to_f64();
                let ty = y as f64 + fd[fy_off + p].to_f64();
                let x0 = tx.floor();
                let y0 = ty.floor();
                let fx = S::from_f64(tx - x0);
                let fy = S::from_f64(ty - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let mut gx = S::ZERO;
                let mut gy = S::ZERO;
                // (weight, dw/dtx, dw/dty) per neighbor
                let neighbors = [
                    (x0, y0, (S::ONE - fx) * (S::ONE - fy), -(S::ONE - fy), -(S::ONE - fx)),
                    (x0 + 1, y0, fx * (S::ONE - fy), S::ONE - fy, -fx),
                    (x0, y0 + 1, (S::ONE - fx) * fy, -fy, S::ONE - fx),
                    (x0 + 1, y0 + 1, fx * fy, fy, fx),
                ];
                for (qx, qy, wq, dwx, dwy) in neighbors {
                    if qx < 0 || qx >= w as isize || qy < 0 || qy >= h as isize {
                        continue;
                    }
                    let q = qy as usize * w + qx as usize;
                    let d = den[ni * plane + q];
                    if d < eps {
                        continue;
                    }
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let g = gd[base + q];
                        if g == S::ZERO {
                            continue;
                        }
                        let out_q = num[base + q] / d;
                        dsrc[base + p] += g * wq / d;
                        let coeff = g * (sd[base + p] - out_q) / d;
                        gx += coeff * dwx;
                        gy += coeff * dwy;
                    }
                }
                dflow[fx_off + p] += gx;
                dflow[fy_off + p] += gy;
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, h, w], dsrc)?,
        Tensor::new(vec![n, 2, h, w], dflow)?,
    ))
}

// ── Tape ops ────────────────────────────────────────────────────────

impl<S: Scalar> Tape<S> {
    /// Differentiable backward warp of `src` by a target-to-source flow.
    pub fn backward_warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let vsrc = self.value(src).clone();
        let vflow = FlowField::new(self.value(flow).clone())?;
        let out = backward_warp(&vsrc, &vflow)?;
        self.push_warp_op("backward_warp", out, src, flow, move |g| {
            backward_warp_grad(g, &vsrc, &vflow).expect("backward_warp grad")
        })
    }

    /// Differentiable average splat. Returns the warped frame and a
    /// detached validity channel that never receives gradients.
    pub fn forward_warp_average(&mut self, src: Var, flow: Var, epsilon: f64) -> Result<(Var, Var)> {
        let vsrc = self.value(src).clone();
        let vflow = FlowField::new(self.value(flow).clone())?;
        let result = forward_warp_average(&vsrc, &vflow, epsilon)?;
        let validity = self.constant(result.validity.clone());
        let warped = self.push_warp_op("forward_warp_average", result.warped, src, flow, move |g| {
            forward_warp_average_grad(g, &vsrc, &vflow, epsilon).expect("forward_warp grad")
        })?;
        Ok((warped, validity))
    }
}

impl<S: Scalar> Tape<S> {
    fn push_warp_op(
        &mut self,
        name: &'static str,
        out: Tensor<S>,
        src: Var,
        flow: Var,
        grad: impl Fn(&Tensor<S>) -> (Tensor<S>, Tensor<S>) + 'static,
    ) -> Result<Var> {
        self.push_op(
            name,
            out,
            &[src, flow],
            Box::new(move |g, sink| {
                if !sink.needs(src) && !sink.needs(flow) {
                    return;
                }
                let (dsrc, dflow) = grad(g);
                sink.add(src, dsrc);
                sink.add(flow, dflow);
            }),
        )
    }
}

// ── Verification suite ──────────────────────────────────────────────

/// Maximum relative gradient errors of both warp kernels at smooth probe
/// points, one entry per (kernel, argument) pair.
#[derive(Clone, Copy, Debug)]
pub struct WarpGradReport {
    pub backward_warp_src: f64,
    pub backward_warp_flow: f64,
    pub forward_warp_src: f64,
    pub forward_warp_flow: f64,
}

impl WarpGradReport {
    pub fn max(&self) -> f64 {
        self.backward_warp_src
            .max(self.backward_warp_flow)
            .max(self.forward_warp_src)
            .max(self.forward_warp_flow)
    }
}

/// Random flow whose fractional parts stay in `[0.2, 0.8]` and whose sample
/// positions stay strictly inside the frame, so no probe sits on a bilinear
/// cell boundary, a border clamp, or the epsilon threshold — the places
/// where the kernels are only piecewise-differentiable.
fn smooth_flow(rng: &mut CounterRng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let plane = h * w;
    let mut data = vec![0.0f64; n * 2 * plane];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let fx = rng.range_f64(0.2, 0.8);
                let fy = rng.range_f64(0.2, 0.8);
                data[(ni * 2) * plane + y * w + x] = if x + 1 < w { fx } else { -fx };
                data[(ni * 2 + 1) * plane + y * w + x] = if y + 1 < h { fy } else { -fy };
            }
        }
    }
    Tensor::new(vec![n, 2, h, w], data).expect("flow shape")
}

/// Finite-difference check of both warps w.r.t. source and flow.
pub fn flow_gradcheck_suite(seed: u64) -> Result<WarpGradReport> {
    let mut rng = CounterRng::keyed(&[seed, crate::rng::key_str("warp-gradcheck")]);
    let (n, c, h, w) = (1, 2, 6, 6);
    let src = Tensor::from_fn(&[n, c, h, w], |_| rng.range_f64(0.1, 0.9));
    let flow = smooth_flow(&mut rng, n, h, w);
    let weights = Tensor::from_fn(&[n, c, h, w], |_| rng.range_f64(-1.0, 1.0));
    let step = 1e-5;

    let weighted = move |t: &mut Tape<f64>, y: Var, wts: &Tensor<f64>| -> Result<Var> {
        let wv = t.constant(wts.clone());
        let prod = t.mul(y, wv)?;
        t.sum_all(prod)
    };

    let (src_c, flow_c, wts) = (src.clone(), flow.clone(), weights.clone());
    let backward_warp_src = grad_check(
        move |t, x| {
            let f = t.constant(flow_c.clone());
            let y = t.backward_warp(x, f)?;
            weighted(t, y, &wts)
        },
        &src_c,
        step,
    )?;

    let (src_c, wts) = (src.clone(), weights.clone());
    let backward_warp_flow = grad_check(
        move |t, f| {
            let x = t.constant(src_c.clone());
            let y = t.backward_warp(x, f)?;
            weighted(t, y, &wts)
        },
        &flow,
        step,
    )?;

    let (flow_c, wts) = (smooth_flow(&mut rng, n, h, w), weights.clone());
    let flow2 = flow_c.clone();
    let forward_warp_src = grad_check(
        move |t, x| {
            let f = t.constant(flow_c.clone());
            let (y, _) = t.forward_warp_average(x, f, 1e-6)?;
            weighted(t, y, &wts)
        },
        &src,
        step,
    )?;

    let (src_c, wts) = (src.clone(), weights);
    let forward_warp_flow = grad_check(
        move |t, f| {
            let x = t.constant(src_c.clone());
            let (y, _) = t.forward_warp_average(x, f, 1e-6)?;
            weighted(t, y, &wts)
        },
        &flow2,
        step,
    )?;

    Ok(WarpGradReport { backward_warp_src, backward_warp_flow, forward_warp_src, forward_warp_flow })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn zero_flow_identity_is_bit_exact() {
        let src = Tensor::<f32>::from_fn(&[1, 2, 4, 5], |i| (i as f32 * 0.173).sin());
        let flow = FlowField::zero(1, 4, 5);
        let out = backward_warp(&src, &flow).unwrap();
        assert!(out.bit_eq(&src));
    }

    #[test]
    fn integer_shift_with_border_clamp() {
        let src = row(&[1.0, 2.0, 3.0, 4.0]);
        let flow = FlowField::constant(1, 1, 4, 1.0, 0.0);
        let out = backward_warp(&src, &flow).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn half_pixel_blend() {
        let src = row(&[0.0, 1.0]);
        let flow = FlowField::constant(1, 1, 2, 0.5, 0.0);
        let out = backward_warp(&src, &flow).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_warp_is_convex_combination() {
        let mut rng = CounterRng::keyed(&[99]);
        let src = Tensor::from_fn(&[1, 1, 5, 5], |_| rng.range_f64(0.0, 1.0));
        let flow = FlowField::new(Tensor::from_fn(&[1, 2, 5, 5], |_| rng.range_f64(-2.0, 2.0))).unwrap();
        let out = backward_warp(&src, &flow).unwrap();
        let (lo, hi) = src.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for &v in out.data() {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn splat_zero_flow_identity() {
        let src = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| (i as f64 * 0.31).cos());
        let flow = FlowField::zero(1, 3, 4);
        let out = forward_warp_average(&src, &flow, 1e-6).unwrap();
        assert!(out.warped.max_abs_diff(&src) < 1e-6);
        assert!(out.validity.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn splat_multi_mapping_averages() {
        // pixels 0 and 2 both land on column 2
        let src = row(&[0.2, 0.5, 0.6, 0.9]);
        let flow = Tensor::new(
            vec![1, 2, 1, 4],
            vec![
                2.0, 10.0, 0.0, 10.0, // dx: pixel 0 -> col 2, pixel 2 stays, others leave frame
                0.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let out = forward_warp_average(&src, &FlowField::new(flow).unwrap(), 1e-6).unwrap();
        assert!((out.warped.data()[2] - 0.4).abs() < 1e-6, "average of 0.2 and 0.6");
    }

    #[test]
    fn splat_hole_has_zero_value_and_validity() {
        let src = row(&[0.3, 0.7, 0.9]);
        let flow = FlowField::constant(1, 1, 3, 1.0, 0.0);
        let out = forward_warp_average(&src, &flow, 1e-6).unwrap();
        assert_eq!(out.warped.data()[0], 0.0);
        assert_eq!(out.validity.data()[0], 0.0);
        assert_eq!(out.warped.data()[1], 0.3);
        assert_eq!(out.warped.data()[2], 0.7);
    }

    #[test]
    fn splat_mass_conservation_interior_dyadic_flows() {
        // Dyadic fractional parts keep every weight and sum exact in fp.
        // Row 0 is thrown far outside (contributes nothing); everything else
        // lands with its whole 4-neighbor footprint inside the frame.
        let (h, w) = (6usize, 7usize);
        let mut rng = CounterRng::keyed(&[7]);
        let plane = h * w;
        let mut data = vec![0.0f64; 2 * plane];
        for y in 0..h {
            for x in 0..w {
                if y == 0 {
                    data[y * w + x] = 20.0;
                } else {
                    let cx = x.min(w - 2) as f64 + rng.range_i64(0, 7) as f64 / 8.0;
                    let cy = y.min(h - 2) as f64 + rng.range_i64(0, 7) as f64 / 8.0;
                    data[y * w + x] = cx - x as f64;
                    data[plane + y * w + x] = cy - y as f64;
                }
            }
        }
        let flow = FlowField::new(Tensor::new(vec![1, 2, h, w], data).unwrap()).unwrap();

        // Count footprints that sit entirely inside, independently.
        let fd = flow.tensor().data();
        let mut inside = 0usize;
        for y in 0..h {
            for x in 0..w {
                let tx = x as f64 + fd[y * w + x];
                let ty = y as f64 + fd[plane + y * w + x];
                let (x0, y0) = (tx.floor() as isize, ty.floor() as isize);
                if x0 >= 0 && y0 >= 0 && x0 + 1 < w as isize && y0 + 1 < h as isize {
                    inside += 1;
                }
            }
        }
        assert_eq!(inside, (h - 1) * w);

        let den = accumulated_splat_weight(&flow);
        let total: f64 = den.data().iter().sum();
        assert_eq!(total, inside as f64, "splat mass must be conserved exactly");
    }

    #[test]
    fn opposite_integer_flows_invert_on_interior() {
        let mut rng = CounterRng::keyed(&[21]);
        let src = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.range_f64(0.0, 1.0));
        let (dx, dy) = (2.0, 1.0);
        let fwd = FlowField::constant(1, 6, 6, dx, dy);
        let splat = forward_warp_average(&src, &fwd, 1e-6).unwrap();
        let back = backward_warp(&splat.warped, &fwd).unwrap();
        // untouched by borders/holes: pixels whose forward target stayed inside
        for y in 0..(6 - dy as usize) {
            for x in 0..(6 - dx as usize) {
                assert!(
                    (back.at4(0, 0, y, x) - src.at4(0, 0, y, x)).abs() < 1e-9,
                    "pixel ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn rejects_epsilon_and_shape_errors() {
        let src = row(&[1.0, 2.0]);
        let flow = FlowField::zero(1, 1, 2);
        assert!(forward_warp_average(&src, &flow, 0.0).is_err());
        let bad_flow = FlowField::zero(1, 1, 3);
        assert!(backward_warp(&src, &bad_flow).is_err());
    }

    #[test]
    fn gradcheck_suite_passes() {
        let report = flow_gradcheck_suite(4242).unwrap();
        assert!(report.backward_warp_src < 1e-4, "src grad {}", report.backward_warp_src);
        assert!(report.backward_warp_flow < 1e-4, "flow grad {}", report.backward_warp_flow);
        assert!(report.forward_warp_src < 1e-4, "splat src grad {}", report.forward_warp_src);
        assert!(report.forward_warp_flow < 1e-4, "splat flow grad {}", report.forward_warp_flow);
    }
}
