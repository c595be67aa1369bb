//! Flatness instruments: worst-case loss in a ρ-ball, the top Hessian
//! eigenvalue, and 2-D loss-surface slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossFn;
use crate::par::{self, Exec};
use crate::rng::Stream;
use crate::tensor::{GradVector, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub rho: f64,
    /// Largest `L(w + ε) − L(w)` found, never below zero.
    pub worst_case_increase: f64,
    pub base_loss: f64,
    pub ascent_steps: usize,
    pub restarts: usize,
    pub discarded_restarts: usize,
    pub top_eigenvalue_estimate: Option<f64>,
    pub probe_seed: u64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn shifted(w: &[f64], d: &[f64], alpha: f64) -> Vec<f64> {
    w.iter().zip(d).map(|(x, y)| x + alpha * y).collect()
}

/// Best loss found by one restart, or `None` when the restart hit a
/// non-finite value.
fn probe_restart<L: LossFn + ?Sized>(
    lossfn: &L,
    params: &ParamVector,
    w: &[f64],
    rho: f64,
    steps: usize,
    mut rng: Stream,
) -> Result<Option<f64>> {
    let start = rng.unit_vector(w.len());
    let mut eps: Vec<f64> = start.iter().map(|u| 0.5 * rho * u).collect();
    let step = rho / steps as f64;
    let mut best = f64::NEG_INFINITY;
    for k in 0..=steps {
        let point = ParamVector::unflatten(&shifted(w, &eps, 1.0), params)?;
        let (loss, grad) = match lossfn.loss_and_grad(&point) {
            Ok(out) => out,
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grad.first_non_finite().is_some() {
            return Ok(None);
        }
        best = best.max(loss);
        if k == steps {
            break;
        }
        let g = grad.flatten();
        let gn = norm(&g);
        if gn == 0.0 {
            break;
        }
        for (e, gi) in eps.iter_mut().zip(&g) {
            *e += step * gi / gn;
        }
        let en = norm(&eps);
        if en > rho {
            let s = rho / en;
            eps.iter_mut().for_each(|e| *e *= s);
        }
    }
    Ok(Some(best))
}

/// Estimates `max_{‖ε‖₂ ≤ ρ} L(w + ε) − L(w)` by projected, normalized
/// gradient ascent. Restart `r` starts at `(ρ/2)·u_r` with `u_r` a uniform
/// unit vector from stream `(seed, r, "probe")`, so starts for different
/// radii are proportional. Each of `steps` ascent steps has length `ρ/steps`.
/// The unperturbed point always counts as a candidate. A restart travels at
/// most `ρ` in total, so on strongly anisotropic losses it turns only part of
/// the way toward the top curvature direction and the estimate can sit a few
/// percent below the true maximum.
pub fn sharpness_probe<L: LossFn + ?Sized>(
    lossfn: &L,
    params: &ParamVector,
    rho: f64,
    steps: usize,
    restarts: usize,
    seed: u64,
    exec: Exec,
) -> Result<SharpnessReport> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::config(format!(
            "probe radius must be positive, got {rho}"
        )));
    }
    if steps == 0 || restarts == 0 {
        return Err(Error::config(
            "probe needs at least one step and one restart",
        ));
    }
    let base_loss = lossfn.loss(params)?;
    if !base_loss.is_finite() {
        return Err(Error::non_finite("loss at the probed parameters"));
    }
    let w = params.flatten();
    let outcomes = par::try_map_indexed(exec, restarts, |r| {
        probe_restart(
            lossfn,
            params,
            &w,
            rho,
            steps,
            Stream::new(seed, r as u64, "probe"),
        )
    })?;
    let discarded = outcomes.iter().filter(|o| o.is_none()).count();
    if discarded == restarts {
        return Err(Error::non_finite(format!(
            "all {restarts} probe restarts hit non-finite losses"
        )));
    }
    let best = outcomes.into_iter().flatten().fold(base_loss, f64::max);
    Ok(SharpnessReport {
        rho,
        worst_case_increase: best - base_loss,
        base_loss,
        ascent_steps: steps,
        restarts,
        discarded_restarts: discarded,
        top_eigenvalue_estimate: None,
        probe_seed: seed,
    })
}

fn hessian_vector<L: LossFn + ?Sized>(
    lossfn: &L,
    params: &ParamVector,
    w: &[f64],
    v: &[f64],
    fd_step: f64,
) -> Result<Vec<f64>> {
    let h = fd_step / norm(v);
    let grad_at = |alpha: f64| -> Result<Vec<f64>> {
        let (_, g) =
            lossfn.loss_and_grad(&ParamVector::unflatten(&shifted(w, v, alpha), params)?)?;
        g.check_finite("Hessian-vector probe")?;
        Ok(g.flatten())
    };
    let up = grad_at(h)?;
    let down = grad_at(-h)?;
    Ok(up
        .iter()
        .zip(&down)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

/// Power iteration on finite-difference Hessian-vector products
/// `Hv ≈ (∇L(w + h v) − ∇L(w − h v)) / 2h` with `h = fd_step / ‖v‖`.
/// Returns the Rayleigh quotient `vᵀHv / vᵀv` of the last iterate; this is
/// the eigenvalue of largest magnitude.
pub fn hessian_top_eigenvalue<L: LossFn + ?Sized>(
    lossfn: &L,
    params: &ParamVector,
    iters: usize,
    fd_step: f64,
    seed: u64,
) -> Result<f64> {
    if iters == 0 {
        return Err(Error::config(
            "power iteration needs at least one iteration",
        ));
    }
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(Error::config(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    let w = params.flatten();
    let mut v = Stream::new(seed, 0, "hessian").unit_vector(w.len());
    let mut estimate = 0.0;
    for _ in 0..iters {
        let hv = hessian_vector(lossfn, params, &w, &v, fd_step)?;
        estimate = dot(&v, &hv) / dot(&v, &v);
        let n = norm(&hv);
        if !n.is_finite() || !estimate.is_finite() {
            return Err(Error::non_finite("Hessian-vector product"));
        }
        if n == 0.0 {
            break;
        }
        v = hv.into_iter().map(|x| x / n).collect();
    }
    Ok(estimate)
}

/// Orthonormal slice directions: `û = u/‖u‖` and `v̂` the normalized
/// component of `v` orthogonal to `û`.
pub fn orthonormal_directions(u: &ParamVector, v: &ParamVector) -> Result<(Vec<f64>, Vec<f64>)> {
    u.check_congruent(v, "slice directions")?;
    let u = u.flatten();
    let un = norm(&u);
    if !(un > 0.0 && un.is_finite()) {
        return Err(Error::config("first slice direction has zero norm"));
    }
    let u: Vec<f64> = u.iter().map(|x| x / un).collect();
    let v = v.flatten();
    let proj = dot(&u, &v);
    let v: Vec<f64> = v.iter().zip(&u).map(|(a, b)| a - proj * b).collect();
    let vn = norm(&v);
    if !(vn > 1e-12 * norm(&u).max(1.0) && vn.is_finite()) {
        return Err(Error::config(
            "second slice direction has zero norm after orthogonalization",
        ));
    }
    Ok((u, v.into_iter().map(|x| x / vn).collect()))
}

/// Random slice direction with one standard-normal entry per parameter.
pub fn random_direction(params: &ParamVector, seed: u64, index: u64) -> ParamVector {
    let mut rng = Stream::new(seed, index, "slice");
    let flat: Vec<f64> = (0..params.total_len()).map(|_| rng.normal()).collect();
    ParamVector::unflatten(&flat, params).expect("length matches template")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSlice {
    /// Grid coordinates shared by both axes.
    pub coords: Vec<f64>,
    /// `values[i][j] = L(w + coords[i]·û + coords[j]·v̂)`.
    pub values: Vec<Vec<f64>>,
}

/// Grid coordinate `i` of `n` spanning `[-half_width, half_width]`; the
/// middle of an odd grid is exactly zero.
pub fn grid_coord(i: usize, n: usize, half_width: f64) -> f64 {
    half_width * (2.0 * i as f64 / (n - 1) as f64 - 1.0)
}

pub fn loss_surface_slice<L: LossFn + ?Sized>(
    lossfn: &L,
    params: &ParamVector,
    dir_u: &ParamVector,
    dir_v: &ParamVector,
    half_width: f64,
    grid_n: usize,
    exec: Exec,
) -> Result<LossSlice> {
    params.check_congruent(dir_u, "loss_surface_slice")?;
    if grid_n < 2 {
        return Err(Error::config(format!(
            "grid_n must be at least 2, got {grid_n}"
        )));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::config(format!(
            "half_width must be positive, got {half_width}"
        )));
    }
    let (u, v) = orthonormal_directions(dir_u, dir_v)?;
    let w = params.flatten();
    let coords: Vec<f64> = (0..grid_n)
        .map(|i| grid_coord(i, grid_n, half_width))
        .collect();
    let flat = par::try_map_indexed(exec, grid_n * grid_n, |k| {
        let (alpha, beta) = (coords[k / grid_n], coords[k % grid_n]);
        let point: Vec<f64> = w
            .iter()
            .zip(u.iter().zip(&v))
            .map(|(x, (a, b))| x + alpha * a + beta * b)
            .collect();
        lossfn.loss(&ParamVector::unflatten(&point, params)?)
    })?;
    let values = flat.chunks(grid_n).map(<[f64]>::to_vec).collect();
    Ok(LossSlice { coords, values })
}

/// A loss linear in the parameters, `L(w) = c·w`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub coefficients: Vec<f64>,
}

impl LossFn for Linear {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        Ok(dot(&params.flatten(), &self.coefficients))
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, GradVector)> {
        Ok((
            self.loss(params)?,
            GradVector::from_flat(&self.coefficients, params)?,
        ))
    }
}
