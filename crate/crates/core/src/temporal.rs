//! Forward-only selective state-space scan along the frame axis.
//!
//! Every `(i, j, c)` position of the volume is an independent length-`T`
//! trajectory. Each passes through `x + Block(RMSNorm(x))`, where the block
//! is a gated selective scan with a causal depthwise convolution in front.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{softplus, Tape, Var, GATHER_ZERO};
use crate::error::{Result, SimvaError};
use crate::nn::rms_norm as rms_norm_var;
use crate::params::{BoundParams, ParameterStore};
use crate::similarity::{EmbeddedVolume, StageTag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveScanParams {
    /// `d_f`
    pub rms_scale: Tensor,
    /// `d_f x 2E`, columns `[scan branch | gate branch]`.
    pub in_proj: Tensor,
    /// `E x k`; tap `k-1` multiplies the current step.
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    /// `E x (R + 2N)`, columns `[dt | B | C]`.
    pub x_proj: Tensor,
    /// `R x E`
    pub dt_proj_weight: Tensor,
    pub dt_proj_bias: Tensor,
    /// `E x N`; the state matrix is `-exp(a_log)`.
    pub a_log: Tensor,
    /// `E`
    pub d_skip: Tensor,
    /// `E x d_f`
    pub out_proj: Tensor,
}

/// Sizes of a temporal block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub d_f: usize,
    /// Inner width `E`.
    pub inner: usize,
    pub state: usize,
    pub dt_rank: usize,
    pub conv_kernel: usize,
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape.to_vec(), |_| u.sample(rng))
}

impl SelectiveScanParams {
    /// Fan-in uniform projections, `a_log = ln(1..=N)` per row, unit skip,
    /// and a `dt` bias such that the initial step size is log-uniform in
    /// `[dt_min, dt_max]`.
    pub fn init(rng: &mut impl Rng, dims: ScanDims, dt_min: f64, dt_max: f64) -> Self {
        let ScanDims {
            d_f,
            inner: e,
            state: n,
            dt_rank: r,
            conv_kernel: k,
        } = dims;
        let log_dt = Uniform::new_inclusive(dt_min.ln(), dt_max.ln()).expect("dt range");
        let dt_bias = Tensor::from_fn([e], |_| {
            let dt = log_dt.sample(rng).exp().max(1e-4);
            // Inverse of softplus.
            dt + (-(-dt).exp_m1()).ln()
        });
        SelectiveScanParams {
            rms_scale: Tensor::full([d_f], 1.0),
            in_proj: uniform_tensor(rng, &[d_f, 2 * e], (d_f as f64).powf(-0.5)),
            conv_weight: uniform_tensor(rng, &[e, k], (k as f64).powf(-0.5)),
            conv_bias: uniform_tensor(rng, &[e], (k as f64).powf(-0.5)),
            x_proj: uniform_tensor(rng, &[e, r + 2 * n], (e as f64).powf(-0.5)),
            dt_proj_weight: uniform_tensor(rng, &[r, e], (r as f64).powf(-0.5)),
            dt_proj_bias: dt_bias,
            a_log: Tensor::from_fn([e, n], |i| ((i[1] + 1) as f64).ln()),
            d_skip: Tensor::full([e], 1.0),
            out_proj: uniform_tensor(rng, &[e, d_f], (e as f64).powf(-0.5)),
        }
    }

    pub fn count(dims: ScanDims) -> usize {
        let ScanDims {
            d_f,
            inner: e,
            state: n,
            dt_rank: r,
            conv_kernel: k,
        } = dims;
        d_f + d_f * 2 * e + e * k + e + e * (r + 2 * n) + r * e + e + e * n + e + e * d_f
    }

    pub fn dims(&self) -> ScanDims {
        ScanDims {
            d_f: self.rms_scale.len(),
            inner: self.d_skip.len(),
            state: self.a_log.shape()[1],
            dt_rank: self.dt_proj_weight.shape()[0],
            conv_kernel: self.conv_weight.shape()[1],
        }
    }

    fn entries(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("norm.weight", &self.rms_scale),
            ("in_proj.weight", &self.in_proj),
            ("conv1d.weight", &self.conv_weight),
            ("conv1d.bias", &self.conv_bias),
            ("x_proj.weight", &self.x_proj),
            ("dt_proj.weight", &self.dt_proj_weight),
            ("dt_proj.bias", &self.dt_proj_bias),
            ("A_log", &self.a_log),
            ("D", &self.d_skip),
            ("out_proj.weight", &self.out_proj),
        ]
    }

    pub fn write_to(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        for (name, t) in self.entries() {
            store.insert(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn read_from(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let g = |n: &str| store.get(&format!("{prefix}{n}")).cloned();
        Ok(SelectiveScanParams {
            rms_scale: g("norm.weight")?,
            in_proj: g("in_proj.weight")?,
            conv_weight: g("conv1d.weight")?,
            conv_bias: g("conv1d.bias")?,
            x_proj: g("x_proj.weight")?,
            dt_proj_weight: g("dt_proj.weight")?,
            dt_proj_bias: g("dt_proj.bias")?,
            a_log: g("A_log")?,
            d_skip: g("D")?,
            out_proj: g("out_proj.weight")?,
        })
    }

    /// Put the weights on `tape` as gradient-tracking leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<TemporalVars> {
        let mut store = ParameterStore::new();
        self.write_to(&mut store, "")?;
        TemporalVars::from_bound(&store.bind(tape), "")
    }
}

/// Temporal block weights placed on a tape.
pub struct TemporalVars {
    norm: Var,
    in_proj: Var,
    conv: (Var, Var),
    x_proj: Var,
    dt_proj: (Var, Var),
    a_log: Var,
    d_skip: Var,
    out_proj: Var,
}

impl TemporalVars {
    pub(crate) fn from_bound(bp: &BoundParams, prefix: &str) -> Result<Self> {
        let g = |n: &str| bp.get(&format!("{prefix}{n}"));
        Ok(TemporalVars {
            norm: g("norm.weight")?,
            in_proj: g("in_proj.weight")?,
            conv: (g("conv1d.weight")?, g("conv1d.bias")?),
            x_proj: g("x_proj.weight")?,
            dt_proj: (g("dt_proj.weight")?, g("dt_proj.bias")?),
            a_log: g("A_log")?,
            d_skip: g("D")?,
            out_proj: g("out_proj.weight")?,
        })
    }
}

/// Result of [`selective_scan`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    /// `[B, T, E]`
    pub y: Tensor,
    /// Hidden states after each step, `[B, T, E, N]`.
    pub states: Tensor,
}

struct ScanShape {
    b: usize,
    t: usize,
    e: usize,
    n: usize,
}

fn scan_shape(u: &Tensor, delta: &Tensor, a: &Tensor, bm: &Tensor, c: &Tensor, d: &Tensor) -> Result<ScanShape> {
    let bad = || {
        SimvaError::shape(format!(
            "selective scan: u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?} are inconsistent",
            u.shape(),
            delta.shape(),
            a.shape(),
            bm.shape(),
            c.shape(),
            d.shape()
        ))
    };
    if u.ndim() != 3 || a.ndim() != 2 {
        return Err(bad());
    }
    let (b, t, e) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = a.shape()[1];
    if delta.shape() != u.shape() || a.shape()[0] != e || bm.shape() != [b, t, n] || c.shape() != [b, t, n] || d.shape() != [e] {
        return Err(bad());
    }
    Ok(ScanShape { b, t, e, n })
}

fn scan_forward(s: &ScanShape, u: &[f64], delta: &[f64], a: &[f64], bm: &[f64], c: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ScanShape { b, t, e, n } = *s;
    let mut y = vec![0.0; b * t * e];
    let mut states = vec![0.0; b * t * e * n];
    let mut h = vec![0.0; n];
    for bi in 0..b {
        for ei in 0..e {
            h.iter_mut().for_each(|x| *x = 0.0);
            for ti in 0..t {
                let k = (bi * t + ti) * e + ei;
                let (dt, x) = (delta[k], u[k]);
                let row = (bi * t + ti) * n;
                let mut acc = d[ei] * x;
                for ni in 0..n {
                    h[ni] = (dt * a[ei * n + ni]).exp() * h[ni] + dt * bm[row + ni] * x;
                    acc += c[row + ni] * h[ni];
                }
                y[k] = acc;
                states[k * n..(k + 1) * n].copy_from_slice(&h);
            }
        }
    }
    (y, states)
}

/// Run `h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t`,
/// `y_t = C_t . h_t + D u_t` from `h_0 = 0`, independently for every batch
/// row and channel.
///
/// `u, delta: [B, T, E]`, `a: [E, N]`, `b, c: [B, T, N]`, `d: [E]`.
pub fn selective_scan(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<ScanOutput> {
    let s = scan_shape(u, delta, a, b, c, d)?;
    let (y, states) = scan_forward(&s, u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    Ok(ScanOutput {
        y: Tensor::new([s.b, s.t, s.e], y)?,
        states: Tensor::new([s.b, s.t, s.e, s.n], states)?,
    })
}

/// Tape op for [`selective_scan`] with a reverse-time backward pass.
pub fn selective_scan_var(tape: &mut Tape, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    let s = scan_shape(tape.value(u), tape.value(delta), tape.value(a), tape.value(b), tape.value(c), tape.value(d))?;
    let (y, states) = scan_forward(
        &s,
        tape.value(u).data(),
        tape.value(delta).data(),
        tape.value(a).data(),
        tape.value(b).data(),
        tape.value(c).data(),
        tape.value(d).data(),
    );
    let value = Tensor::new([s.b, s.t, s.e], y)?;
    Ok(tape.push(
        value,
        vec![u, delta, a, b, c, d],
        Box::new(move |gy, p, _| {
            let ScanShape { b, t, e, n } = s;
            let (u, delta, a, bm, c, d) = (p[0].data(), p[1].data(), p[2].data(), p[3].data(), p[4].data(), p[5].data());
            let gy = gy.data();
            let mut gu = vec![0.0; b * t * e];
            let mut gdelta = vec![0.0; b * t * e];
            let mut ga = vec![0.0; e * n];
            let mut gb = vec![0.0; b * t * n];
            let mut gc = vec![0.0; b * t * n];
            let mut gd = vec![0.0; e];
            let mut gh = vec![0.0; n];
            for bi in 0..b {
                for ei in 0..e {
                    gh.iter_mut().for_each(|x| *x = 0.0);
                    for ti in (0..t).rev() {
                        let k = (bi * t + ti) * e + ei;
                        let row = (bi * t + ti) * n;
                        let (g, dt, x) = (gy[k], delta[k], u[k]);
                        gd[ei] += g * x;
                        gu[k] += g * d[ei];
                        let h = &states[k * n..(k + 1) * n];
                        for ni in 0..n {
                            gc[row + ni] += g * h[ni];
                            gh[ni] += g * c[row + ni];
                        }
                        for ni in 0..n {
                            let av = a[ei * n + ni];
                            let da = (dt * av).exp();
                            let prev = if ti > 0 { states[(k - e) * n + ni] } else { 0.0 };
                            let g_da = gh[ni] * prev * da;
                            gdelta[k] += g_da * av + gh[ni] * bm[row + ni] * x;
                            ga[ei * n + ni] += g_da * dt;
                            gb[row + ni] += gh[ni] * dt * x;
                            gu[k] += gh[ni] * dt * bm[row + ni];
                            gh[ni] *= da;
                        }
                    }
                }
            }
            let mk = |shape: &[usize], v: Vec<f64>| Some(Tensor::new(shape.to_vec(), v).expect("shape"));
            vec![
                mk(&[b, t, e], gu),
                mk(&[b, t, e], gdelta),
                mk(&[e, n], ga),
                mk(&[b, t, n], gb),
                mk(&[b, t, n], gc),
                mk(&[e], gd),
            ]
        }),
    ))
}

/// `[B, T, E]` → `[B, T, k, E]` with tap `j` reading step `t - (k-1) + j`.
fn causal_window_index(b: usize, t: usize, e: usize, k: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(b * t * k * e);
    for bi in 0..b {
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize - (k as isize - 1) + j as isize;
                for ei in 0..e {
                    idx.push(if src < 0 {
                        GATHER_ZERO
                    } else {
                        ((bi * t + src as usize) * e + ei) as u32
                    });
                }
            }
        }
    }
    idx
}

/// Depthwise causal convolution of `x: [B, T, E]` with `w: [E, k]`.
fn causal_conv(tape: &mut Tape, x: Var, w: Var, bias: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, e) = (s[0], s[1], s[2]);
    let k = tape.shape(w)[1];
    let cols = tape.gather(x, Arc::new(causal_window_index(b, t, e, k)), &[b, t, k, e])?;
    let wt = tape.permute(w, &[1, 0])?;
    let prod = tape.mul(cols, wt)?;
    let sum = tape.sum_axis(prod, 2, false)?;
    tape.add(sum, bias)
}

/// `x + Block(RMSNorm(x))` on trajectories `x: [B, T, d_f]`.
pub fn temporal_block(tape: &mut Tape, x: Var, v: &TemporalVars) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(SimvaError::shape(format!("trajectories must be B x T x d_f, got {s:?}")));
    }
    let e = tape.shape(v.d_skip)[0];
    let n = tape.shape(v.a_log)[1];
    let r = tape.shape(v.dt_proj.0)[0];
    let xn = rms_norm_var(tape, x, v.norm)?;
    let xz = tape.matmul(xn, v.in_proj)?;
    let xi = tape.narrow(xz, 2, 0, e)?;
    let gate = tape.narrow(xz, 2, e, e)?;
    let xc = causal_conv(tape, xi, v.conv.0, v.conv.1)?;
    let xc = tape.silu(xc);
    let dbc = tape.matmul(xc, v.x_proj)?;
    let dt = tape.narrow(dbc, 2, 0, r)?;
    let bm = tape.narrow(dbc, 2, r, n)?;
    let cm = tape.narrow(dbc, 2, r + n, n)?;
    let dt = tape.matmul(dt, v.dt_proj.0)?;
    let dt = tape.add(dt, v.dt_proj.1)?;
    let delta = tape.softplus(dt);
    let a = tape.exp(v.a_log);
    let a = tape.neg(a);
    let y = selective_scan_var(tape, xc, delta, a, bm, cm, v.d_skip)?;
    let g = tape.silu(gate);
    let y = tape.mul(y, g)?;
    let y = tape.matmul(y, v.out_proj)?;
    tape.add(x, y)
}

/// Temporal block on a slice-major volume `[T, M, H, W, d]`.
pub(crate) fn temporal_vars(tape: &mut Tape, z: Var, v: &TemporalVars) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let (t, d) = (s[0], s[4]);
    let b = s[1] * s[2] * s[3];
    let x = tape.permute(z, &[1, 2, 3, 0, 4])?;
    let x = tape.reshape(x, &[b, t, d])?;
    let y = temporal_block(tape, x, v)?;
    let y = tape.reshape(y, &[s[1], s[2], s[3], t, d])?;
    tape.permute(y, &[3, 0, 1, 2, 4])
}

pub fn temporal_aggregate(z: &EmbeddedVolume, params: &SelectiveScanParams) -> Result<EmbeddedVolume> {
    let mut tape = Tape::new();
    let v = params.bind(&mut tape)?;
    let x = tape.constant(z.to_slice_major());
    let y = temporal_vars(&mut tape, x, &v)?;
    EmbeddedVolume::from_slice_major(tape.value(y), StageTag::Zta)
}

/// `x * scale / sqrt(mean(x^2) + 1e-6)` for a single vector.
pub fn rms_norm(x: &[f64], scale: &[f64]) -> Result<Vec<f64>> {
    if x.len() != scale.len() {
        return Err(SimvaError::shape(format!("rms_norm: {} values, {} scales", x.len(), scale.len())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new([x.len()], x.to_vec())?);
    let sv = tape.constant(Tensor::new([x.len()], scale.to_vec())?);
    let y = rms_norm_var(&mut tape, xv, sv)?;
    Ok(tape.value(y).data().to_vec())
}

/// Step size after the softplus, as the block computes it.
pub fn step_size(raw: f64) -> f64 {
    softplus(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, rng_from};

    fn dims() -> ScanDims {
        ScanDims {
            d_f: 4,
            inner: 8,
            state: 4,
            dt_rank: 1,
            conv_kernel: 3,
        }
    }

    fn random_scan_inputs(seed: u64, b: usize, t: usize, e: usize, n: usize) -> [Tensor; 6] {
        let mut rng = rng_from(seed, &[]);
        let u = normal_tensor(&mut rng, &[b, t, e], 1.0);
        let delta = normal_tensor(&mut rng, &[b, t, e], 1.0).map(softplus);
        let a = normal_tensor(&mut rng, &[e, n], 1.0).map(|x| -x.exp());
        let bm = normal_tensor(&mut rng, &[b, t, n], 1.0);
        let c = normal_tensor(&mut rng, &[b, t, n], 1.0);
        let d = normal_tensor(&mut rng, &[e], 1.0);
        [u, delta, a, bm, c, d]
    }

    #[test]
    fn scan_backward_matches_finite_differences() {
        let inputs = random_scan_inputs(1, 2, 5, 3, 2);
        let weights = normal_tensor(&mut rng_from(2, &[]), &[2, 5, 3], 1.0);
        let loss = |xs: &[Tensor]| -> f64 {
            let o = selective_scan(&xs[0], &xs[1], &xs[2], &xs[3], &xs[4], &xs[5]).unwrap();
            o.y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = selective_scan_var(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(y, w).unwrap();
        let l = tape.sum_all(prod);
        let grads = tape.backward(l).unwrap();
        let eps = 1e-6;
        for (which, v) in vars.iter().enumerate() {
            let g = grads.get(*v).unwrap();
            for k in 0..inputs[which].len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[k] += eps;
                let mut minus = inputs.clone();
                minus[which].data_mut()[k] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = g.data()[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {which}[{k}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn block_is_causal() {
        let p = SelectiveScanParams::init(&mut rng_from(3, &[]), dims(), 1e-3, 1e-1);
        let x = normal_tensor(&mut rng_from(4, &[]), &[2, 6, 4], 1.0);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = p.bind(&mut tape).unwrap();
            let xv = tape.constant(x.clone());
            let y = temporal_block(&mut tape, xv, &v).unwrap();
            tape.value(y).clone()
        };
        let y0 = run(&x);
        for k in 0..6 {
            let mut x1 = x.clone();
            for c in 0..4 {
                x1.set(&[1, k, c], x.at(&[1, k, c]) + 0.5);
            }
            let y1 = run(&x1);
            assert_eq!(y0.narrow(1, 0, k), y1.narrow(1, 0, k));
            assert_ne!(y0.narrow(1, k, 1), y1.narrow(1, k, 1));
        }
    }

    #[test]
    fn conv_reads_only_past_steps() {
        let idx = causal_window_index(1, 4, 1, 3);
        assert_eq!(idx[..3], [GATHER_ZERO, GATHER_ZERO, 0]);
        assert_eq!(idx[9..], [1, 2, 3]);
    }

    #[test]
    fn initial_step_sizes_lie_in_range() {
        let p = SelectiveScanParams::init(&mut rng_from(5, &[]), dims(), 1e-3, 1e-1);
        for &b in p.dt_proj_bias.data() {
            let dt = step_size(b);
            assert!((1e-3 * (1.0 - 1e-9)..=1e-1 * (1.0 + 1e-9)).contains(&dt), "{dt}");
        }
        assert!(p.a_log.data().iter().all(|&x| -x.exp() < 0.0));
    }

    #[test]
    fn rms_norm_matches_loop() {
        let x = [0.3, -1.2, 2.0, 0.1];
        let s = [1.0, 0.5, -2.0, 3.0];
        let ms = x.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let got = rms_norm(&x, &s).unwrap();
        for i in 0..4 {
            assert!((got[i] - x[i] * s[i] / (ms + 1e-6).sqrt()).abs() < 1e-12);
        }
        assert_eq!(rms_norm(&[0.0; 3], &[1.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn count_matches_layout() {
        let p = SelectiveScanParams::init(&mut rng_from(6, &[]), dims(), 1e-3, 1e-1);
        let n: usize = p.entries().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(n, SelectiveScanParams::count(dims()));
    }
}
