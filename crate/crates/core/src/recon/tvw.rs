//! TV + Haar-L1 regularized least squares on the measured coefficients.
//!
//! Minimizes
//!
//! `F(x) = ½‖D(Hx − z)‖² / N + λ_tv·TV(x) + λ_w·‖Wx‖₁`
//!
//! where `D` keeps the sampled coefficients, `H/√N` is orthonormal (so the
//! data term has Lipschitz constant 1), TV is anisotropic and `W` is the
//! orthonormal Haar transform. The outer loop is monotone FISTA; the joint
//! proximal step is solved in the dual by projected gradient, warm-started
//! across outer iterations.

use crate::error::{check_len, Error, Result};
use crate::mask::BinaryMask;
use crate::metrics;
use crate::raster::Image;
use crate::sensing::CoefficientVector;
use crate::wht::{self, HadamardSpec};

use super::haar::{haar_dwt, haar_idwt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvwConfig {
    pub lambda_tv: f64,
    pub lambda_w: f64,
    pub iters: usize,
    /// Gradient step; at most 1 for guaranteed descent.
    pub step: f64,
    /// Dual iterations per proximal step.
    pub inner_iters: usize,
    /// Relative objective change below which the solve counts as converged.
    pub tol: f64,
}

impl Default for TvwConfig {
    fn default() -> Self {
        TvwConfig {
            lambda_tv: 0.01,
            lambda_w: 0.001,
            iters: 200,
            step: 1.0,
            inner_iters: 30,
            tol: 1e-7,
        }
    }
}

impl TvwConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda_tv >= 0.0 && self.lambda_w >= 0.0) || !self.lambda_tv.is_finite() || !self.lambda_w.is_finite() {
            return Err(Error::invalid("TV-W weights must be finite and nonnegative"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("TV-W step must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::invalid("TV-W needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TvwResult {
    /// Lowest-objective iterate.
    pub image: Image,
    /// `F` at the starting point and after every iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Anisotropic forward differences with zero flux at the far edges:
/// `[horizontal; vertical]`, each `side²`.
fn grad(x: &[f64], side: usize, out: &mut [f64]) {
    let n = side * side;
    for r in 0..side {
        for c in 0..side {
            let k = r * side + c;
            out[k] = if c + 1 < side { x[k + 1] - x[k] } else { 0.0 };
            out[n + k] = if r + 1 < side { x[k + side] - x[k] } else { 0.0 };
        }
    }
}

/// Adjoint of [`grad`].
fn grad_adjoint(p: &[f64], side: usize, out: &mut [f64]) {
    let n = side * side;
    out.fill(0.0);
    for r in 0..side {
        for c in 0..side {
            let k = r * side + c;
            if c + 1 < side {
                out[k + 1] += p[k];
                out[k] -= p[k];
            }
            if r + 1 < side {
                out[k + side] += p[n + k];
                out[k] -= p[n + k];
            }
        }
    }
}

pub fn total_variation(x: &[f64], side: usize) -> f64 {
    let mut g = vec![0.0; 2 * side * side];
    grad(x, side, &mut g);
    g.iter().map(|v| v.abs()).sum()
}

struct Problem<'a> {
    side: usize,
    n: usize,
    spec: HadamardSpec,
    mask: &'a [bool],
    z: &'a [f64],
    cfg: TvwConfig,
}

impl Problem<'_> {
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let hx = wht::wht_forward(x, &self.spec)?;
        Ok(hx
            .iter()
            .zip(self.z)
            .zip(self.mask)
            .map(|((h, z), &m)| if m { h - z } else { 0.0 })
            .collect())
    }

    fn objective(&self, x: &[f64]) -> Result<f64> {
        let r = self.residual(x)?;
        let data = 0.5 * r.iter().map(|v| v * v).sum::<f64>() / self.n as f64;
        let tv = if self.cfg.lambda_tv > 0.0 {
            self.cfg.lambda_tv * total_variation(x, self.side)
        } else {
            0.0
        };
        let wl1 = if self.cfg.lambda_w > 0.0 {
            self.cfg.lambda_w * haar_dwt(x, self.side)?.iter().map(|v| v.abs()).sum::<f64>()
        } else {
            0.0
        };
        Ok(data + tv + wl1)
    }

    /// `∇f(x) = Hᵀ D (Hx − z) / N`.
    fn data_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.residual(x)?;
        // H is symmetric, so Hᵀ r = H r
        let mut g = wht::wht_forward(&r, &self.spec)?;
        g.iter_mut().for_each(|v| *v /= self.n as f64);
        Ok(g)
    }

    /// `argmin_u ½‖u − v‖² + t·R(u)` by projected gradient on the dual
    /// variables `(p_tv, p_w) ∈ [−1, 1]`, updated in place.
    fn prox(&self, v: &[f64], t: f64, p_tv: &mut [f64], p_w: &mut [f64]) -> Result<Vec<f64>> {
        let (ltv, lw) = (self.cfg.lambda_tv, self.cfg.lambda_w);
        if ltv == 0.0 && lw == 0.0 {
            return Ok(v.to_vec());
        }
        let norm2 = 8.0 * ltv * ltv + lw * lw;
        let tau = 1.0 / (t * norm2);
        let side = self.side;
        let mut kt = vec![0.0; self.n];
        let mut gbuf = vec![0.0; 2 * self.n];
        let primal = |p_tv: &[f64], p_w: &[f64], kt: &mut [f64]| -> Result<Vec<f64>> {
            // u = v − t·Kᵀp with K = [λ_tv ∇; λ_w W]
            grad_adjoint(p_tv, side, kt);
            let wt = haar_idwt(p_w, side)?;
            Ok(v.iter()
                .zip(kt.iter())
                .zip(&wt)
                .map(|((vi, g), w)| vi - t * (ltv * g + lw * w))
                .collect())
        };
        for _ in 0..self.cfg.inner_iters {
            let u = primal(p_tv, p_w, &mut kt)?;
            if ltv > 0.0 {
                grad(&u, side, &mut gbuf);
                for (p, g) in p_tv.iter_mut().zip(&gbuf) {
                    *p = (*p + tau * ltv * g).clamp(-1.0, 1.0);
                }
            }
            if lw > 0.0 {
                let wu = haar_dwt(&u, side)?;
                for (p, w) in p_w.iter_mut().zip(&wu) {
                    *p = (*p + tau * lw * w).clamp(-1.0, 1.0);
                }
            }
        }
        primal(p_tv, p_w, &mut kt)
    }
}

/// Solve from the zero-filled inverse transform `Hz/N`.
pub fn tvw_reconstruct(z: &CoefficientVector, mask: &BinaryMask, cfg: &TvwConfig, spec: &HadamardSpec) -> Result<TvwResult> {
    cfg.validate()?;
    if spec.dims() != wht::Dims::Two {
        return Err(Error::invalid("TV-W needs a 2D transform"));
    }
    let n = spec.len();
    check_len(n, z.len())?;
    check_len(n, mask.len())?;
    let side = spec.side();
    let bits: Vec<bool> = (0..n).map(|i| mask.get(i)).collect();
    let zm: Vec<f64> = z.values.iter().zip(&bits).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let prob = Problem {
        side,
        n,
        spec: *spec,
        mask: &bits,
        z: &zm,
        cfg: *cfg,
    };

    let mut x = wht::wht_inverse(&zm, spec)?;
    let mut fx = prob.objective(&x)?;
    let mut objective = vec![fx];
    let mut y = x.clone();
    let mut t_k = 1.0f64;
    let mut p_tv = vec![0.0; 2 * n];
    let mut p_w = vec![0.0; n];
    let mut converged = false;
    for _ in 0..cfg.iters {
        let g = prob.data_gradient(&y)?;
        let v: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - cfg.step * b).collect();
        let u = prob.prox(&v, cfg.step, &mut p_tv, &mut p_w)?;
        let fu = prob.objective(&u)?;
        if !fu.is_finite() {
            return Err(Error::Numerical("TV-W objective is not finite".into()));
        }
        let x_prev = x.clone();
        let f_prev = fx;
        if fu <= fx {
            x = u.clone();
            fx = fu;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt()) / 2.0;
        y = (0..n)
            .map(|k| x[k] + (t_k / t_next) * (u[k] - x[k]) + ((t_k - 1.0) / t_next) * (x[k] - x_prev[k]))
            .collect();
        t_k = t_next;
        objective.push(fx);
        if (f_prev - fx).abs() <= cfg.tol * f_prev.abs().max(1e-300) && fu <= f_prev {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("TV-W did not converge within {} iterations", cfg.iters);
    }
    Ok(TvwResult {
        image: Image::new(side, x)?,
        objective,
        converged,
    })
}

/// One validation instance for the TV-W weight search.
pub struct TvwInstance<'a> {
    pub z: &'a CoefficientVector,
    pub mask: &'a BinaryMask,
    pub truth: &'a Image,
}

/// Weights from a `lambda_tv × lambda_w` grid maximizing mean validation
/// PSNR, with the mean PSNR reached. Ties keep the first grid point.
pub fn grid_search_tvw(
    instances: &[TvwInstance<'_>],
    lambda_tv: &[f64],
    lambda_w: &[f64],
    base: &TvwConfig,
    spec: &HadamardSpec,
) -> Result<(TvwConfig, f64)> {
    if instances.is_empty() || lambda_tv.is_empty() || lambda_w.is_empty() {
        return Err(Error::invalid("TV-W grid search needs instances and a nonempty grid"));
    }
    let mut best: Option<(TvwConfig, f64)> = None;
    for &ltv in lambda_tv {
        for &lw in lambda_w {
            let cfg = TvwConfig {
                lambda_tv: ltv,
                lambda_w: lw,
                ..*base
            };
            let mut total = 0.0;
            for inst in instances {
                let res = tvw_reconstruct(inst.z, inst.mask, &cfg, spec)?;
                total += metrics::psnr(&res.image, inst.truth, None)?;
            }
            let mean = total / instances.len() as f64;
            log::debug!("tvw grid lambda_tv={ltv} lambda_w={lw}: {mean:.3} dB");
            if best.is_none_or(|(_, b)| mean > b) {
                best = Some((cfg, mean));
            }
        }
    }
    Ok(best.unwrap())
}
