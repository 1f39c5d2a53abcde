//! Closed forms for the hyper-objective `H(x) = f(x, y*(x))` and its
//! certificates.
//!
//! Because the lower level is a block-separable quadratic, `y*(x)` is an
//! explicit linear map: block `i` equals `b_i * ((4n^2+1)/n^2) * S e_n`
//! with `b_0 = x0` and `b_i = x_i`. Substituting it into `f` collapses the
//! chain arguments to `C~ n x_i / lambda`, giving a scalar chain function
//! on `x` alone:
//!
//! ```text
//! H(x) = (lambda^2 L_f / L) * sum_{i=1}^{T} [ psi(-a x_{i-1}) phi(-a x_i)
//!                                           - psi(a x_{i-1}) phi(a x_i) ],
//! a = C~ n / lambda,   x_0 = x0 = lambda / (C~ n).
//! ```
//!
//! Everything the certification suite needs about `H` lives here: the
//! gradient and the two stationarity measures, the gradient floor that
//! holds while any coordinate is still below threshold, the objective gap
//! certificate, and a finite-difference power iteration bounding the
//! Hessian norm by `L_h`.

use crate::hardness::{phi, phi_d, psi, psi_d};
use crate::instance::{BilevelPoint, DerivedInstanceParams, Mode};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Value, gradient, and stationarity measures of `H` at one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Unconstrained measure `||grad H||_2`.
    pub grad_norm: f64,
    /// Projected measure `L_h ||P_X[x - grad H / L_h] - x||_2`; equals
    /// `grad_norm` in deterministic mode, where the domain is all of space.
    pub proj_residual_norm: f64,
}

/// Witness that the gradient floor applies at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradFloor {
    /// Smallest 1-based chain index still below the coordinate threshold.
    pub witness: usize,
    /// Certified floor `lambda L_f C~ n / L`.
    pub floor: f64,
    /// The witnessed partial derivative magnitude `|dH/dx_j|`.
    pub attained: f64,
}

/// Objective-gap certificate for the instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapReport {
    /// `H(0)`.
    pub h0: f64,
    /// Analytic floor `-12 lambda^2 L_f T / L <= inf H`.
    pub floor: f64,
    /// Best objective value found by multistart descent (an upper bound on
    /// `inf H`, hence `h0 - inf_estimate` underestimates the true gap).
    pub inf_estimate: f64,
    /// Budget the chain is allowed to consume: `12 lambda^2 L_f T / L`.
    pub budget: f64,
    /// The class gap bound `Delta`.
    pub delta: f64,
}

/// Exact lower-level solution for given upper-level variables: block `i`
/// is `b_i * ((4n^2+1)/n^2) * (A + n^{-2} I)^{-1} e_n`.
pub fn lower_level_solution(params: &DerivedInstanceParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.dim_x() {
        return Err(Error::DimensionMismatch {
            what: "lower_level_solution input",
            expected: params.dim_x(),
            got: x.len(),
        });
    }
    let mf = params.m_factor();
    let col = params.resolvent_col();
    let mut y = vec![0.0; params.dim_y()];
    for i in 0..=params.t_len {
        let b = params.b_coeff(i, x) * mf;
        let range = params.y_block(i);
        let dst = &mut y[range];
        for j in 0..params.n {
            dst[j] = b * col[j];
        }
    }
    Ok(y)
}

/// The chain argument scale `a = C~ n / lambda`.
fn a_scale(params: &DerivedInstanceParams) -> f64 {
    params.c_tilde * params.n as f64 / params.lambda
}

/// Chain coordinate `x_{i}` with the built-in `x_0`.
fn chain_coord(params: &DerivedInstanceParams, x: &[f64], i: usize) -> f64 {
    if i == 0 {
        params.x0
    } else {
        x[i - 1]
    }
}

/// Evaluate `H`, its gradient, and both stationarity measures.
pub fn hyper_eval(params: &DerivedInstanceParams, x: &[f64]) -> Result<HyperEval> {
    if x.len() != params.dim_x() {
        return Err(Error::DimensionMismatch {
            what: "hyper_eval input",
            expected: params.dim_x(),
            got: x.len(),
        });
    }
    let a = a_scale(params);
    let scale = params.f_scale();
    let t = params.t_len;
    let mut value = 0.0;
    for i in 1..=t {
        let prev = a * chain_coord(params, x, i - 1);
        let cur = a * x[i - 1];
        value += psi(-prev) * phi(-cur) - psi(prev) * phi(cur);
    }
    value *= scale;

    // dH/dx_j = -scale * a * [ psi(-a x_{j-1}) phi'(-a x_j)
    //                        + psi( a x_{j-1}) phi'( a x_j)
    //   (j < T)              + psi'(-a x_j) phi(-a x_{j+1})
    //                        + psi'( a x_j) phi( a x_{j+1}) ]
    let lead = scale * a; // = lambda L_f C~ n / L
    let mut grad = vec![0.0; t];
    for j in 1..=t {
        let prev = a * chain_coord(params, x, j - 1);
        let cur = a * x[j - 1];
        let mut bracket = psi(-prev) * phi_d(-cur, 1) + psi(prev) * phi_d(cur, 1);
        if j < t {
            let next = a * x[j];
            bracket += psi_d(-cur, 1) * phi(-next) + psi_d(cur, 1) * phi(next);
        }
        grad[j - 1] = -lead * bracket;
    }

    let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let proj_residual_norm = match params.mode {
        Mode::Deterministic => grad_norm,
        Mode::Stochastic => {
            let bx = params.x_bound().expect("stochastic instances carry r_x");
            let lh = params.l_h;
            let mut acc = 0.0;
            for j in 0..t {
                let stepped = (x[j] - grad[j] / lh).clamp(-bx, bx);
                let d = stepped - x[j];
                acc += d * d;
            }
            lh * acc.sqrt()
        }
    };

    Ok(HyperEval {
        value,
        grad,
        grad_norm,
        proj_residual_norm,
    })
}

/// The mode-appropriate stationarity measure at `x`.
pub fn stationarity(params: &DerivedInstanceParams, x: &[f64]) -> Result<f64> {
    let ev = hyper_eval(params, x)?;
    Ok(match params.mode {
        Mode::Deterministic => ev.grad_norm,
        Mode::Stochastic => ev.proj_residual_norm,
    })
}

/// Gradient floor: while some chain coordinate sits strictly below the
/// threshold `lambda / (C~ n)`, the partial derivative at the smallest such
/// index is at least `lambda L_f C~ n / L` in magnitude.
///
/// Returns `None` when every coordinate has crossed the threshold (the
/// premise is empty and no floor is claimed).
pub fn grad_floor_witness(params: &DerivedInstanceParams, x: &[f64]) -> Result<Option<GradFloor>> {
    if x.len() != params.dim_x() {
        return Err(Error::DimensionMismatch {
            what: "grad_floor_witness input",
            expected: params.dim_x(),
            got: x.len(),
        });
    }
    let threshold = params.x_threshold();
    let witness = match x.iter().position(|v| v.abs() < threshold) {
        Some(j) => j + 1,
        None => return Ok(None),
    };
    let ev = hyper_eval(params, x)?;
    let floor = params.lambda * params.fc.l_f * params.c_tilde * params.n as f64 / params.l_const;
    Ok(Some(GradFloor {
        witness,
        floor,
        attained: ev.grad[witness - 1].abs(),
    }))
}

/// Objective-gap certificate: `H(0)`, the analytic floor, and a multistart
/// descent estimate of `inf H`.
///
/// The descent is plain gradient descent with step `1/L_h` from `starts`
/// random points at chain scale (plus the origin and the saturated chain),
/// run until the gradient norm stalls. Every visited value is also checked
/// against the floor.
pub fn gap_bound(params: &DerivedInstanceParams, starts: usize, seed: u64) -> Result<GapReport> {
    let t = params.t_len;
    let scale = params.f_scale();
    let budget = 12.0 * scale * t as f64;
    let floor = -budget;
    let h0 = hyper_eval(params, &vec![0.0; t])?.value;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = h0;
    let sat = 10.0 * params.x_threshold();
    let mut inits: Vec<Vec<f64>> = vec![vec![0.0; t], vec![sat; t]];
    for _ in 0..starts {
        inits.push(
            (0..t)
                .map(|_| rng.gen_range(-3.0 * params.x_threshold()..3.0 * params.x_threshold()))
                .collect(),
        );
    }
    let bx = params.x_bound();
    for mut x in inits {
        let mut ev = hyper_eval(params, &x)?;
        if ev.value < best {
            best = ev.value;
        }
        for _ in 0..400 {
            for j in 0..t {
                x[j] -= ev.grad[j] / params.l_h;
                if let Some(b) = bx {
                    x[j] = x[j].clamp(-b, b);
                }
            }
            ev = hyper_eval(params, &x)?;
            if ev.value < best {
                best = ev.value;
            }
            if ev.grad_norm < 1e-14 {
                break;
            }
        }
        if best < floor * (1.0 + 1e-9) - 1e-300 {
            return Err(Error::InvalidParams(format!(
                "descent found H = {best:.6e} below the certified floor {floor:.6e}"
            )));
        }
    }

    Ok(GapReport {
        h0,
        floor,
        inf_estimate: best,
        budget,
        delta: params.fc.delta,
    })
}

/// Estimate `||grad^2 H(x)||_2` by power iteration on central-difference
/// Hessian-vector products. Used to confirm the certified `L_h` dominates
/// the observed curvature.
pub fn hessian_norm_estimate(
    params: &DerivedInstanceParams,
    x: &[f64],
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let t = params.dim_x();
    if x.len() != t {
        return Err(Error::DimensionMismatch {
            what: "hessian_norm_estimate input",
            expected: t,
            got: x.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = |z: &[f64]| z.iter().map(|w| w * w).sum::<f64>().sqrt();
    let nv = norm(&v);
    if nv == 0.0 {
        return Ok(0.0);
    }
    v.iter_mut().for_each(|w| *w /= nv);
    let h = 1e-5 * params.x_threshold();
    let mut rayleigh = 0.0;
    for _ in 0..iters {
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let gp = hyper_eval(params, &xp)?.grad;
        let gm = hyper_eval(params, &xm)?.grad;
        let mut hv: Vec<f64> = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        rayleigh = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>().abs();
        let nhv = norm(&hv);
        if nhv < 1e-300 {
            return Ok(0.0);
        }
        hv.iter_mut().for_each(|w| *w /= nhv);
        v = hv;
    }
    Ok(rayleigh)
}

/// Cross-check helper: `H` evaluated the long way around, through the
/// explicit lower-level solve and the upper objective.
pub fn hyper_value_via_solve(params: &DerivedInstanceParams, x: &[f64]) -> Result<f64> {
    let y = lower_level_solution(params, x)?;
    crate::instance::eval_f(params, &BilevelPoint { x: x.to_vec(), y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{derive_params, grad_g, FunctionClassParams};
    use rand_chacha::ChaCha8Rng;

    const RTOL_CONSISTENCY: f64 = 1e-12;
    const RTOL_FD: f64 = 1e-8;

    fn det_params() -> DerivedInstanceParams {
        derive_params(
            FunctionClassParams {
                l_f: 1.0,
                l_g: 100.0,
                mu: 1.0,
                delta: 1.0,
                eps: 0.2,
                sigma: 0.0,
            },
            Mode::Deterministic,
        )
        .unwrap()
    }

    fn stoc_params() -> DerivedInstanceParams {
        derive_params(
            FunctionClassParams {
                l_f: 1.0,
                l_g: 50.0,
                mu: 1.0,
                delta: 1.0,
                eps: 0.05,
                sigma: 1600.0,
            },
            Mode::Stochastic,
        )
        .unwrap()
    }

    fn random_x(params: &DerivedInstanceParams, rng: &mut ChaCha8Rng, mult: f64) -> Vec<f64> {
        let s = mult * params.x_threshold();
        (0..params.dim_x()).map(|_| rng.gen_range(-s..s)).collect()
    }

    #[test]
    fn solution_zeroes_lower_level_gradient() {
        for p in [det_params(), stoc_params()] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..20 {
                let x = random_x(&p, &mut rng, 3.0);
                let y = lower_level_solution(&p, &x).unwrap();
                let pt = BilevelPoint { x: x.clone(), y };
                let (_, gy) = grad_g(&p, &pt).unwrap();
                let gn = gy.iter().map(|v| v * v).sum::<f64>().sqrt();
                // Scale-relative: the linear term has size L_g lambda.
                assert!(
                    gn <= 1e-12 * p.fc.l_g * p.lambda.max(1.0),
                    "stationarity defect {gn:.3e}"
                );
            }
        }
    }

    #[test]
    fn closed_form_matches_solve_composition() {
        for p in [det_params(), stoc_params()] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..30 {
                let x = random_x(&p, &mut rng, 4.0);
                let direct = hyper_eval(&p, &x).unwrap().value;
                let composed = hyper_value_via_solve(&p, &x).unwrap();
                assert!(
                    (direct - composed).abs() <= RTOL_CONSISTENCY * composed.abs().max(1e-30),
                    "H closed form {direct:.15e} vs composed {composed:.15e}"
                );
            }
        }
    }

    #[test]
    fn origin_frozen_values() {
        let p = det_params();
        let ev = hyper_eval(&p, &vec![0.0; p.dim_x()]).unwrap();
        let scale = p.f_scale();
        let want_h0 = -scale * (std::f64::consts::PI * std::f64::consts::E / 2.0).sqrt();
        assert!((ev.value - want_h0).abs() <= 1e-14 * want_h0.abs());
        // Only the first coordinate feels the built-in threshold block.
        let lead = p.lambda * p.fc.l_f * p.c_tilde * p.n as f64 / p.l_const;
        let want_g1 = -lead * std::f64::consts::E.sqrt();
        assert!((ev.grad[0] - want_g1).abs() <= 1e-14 * want_g1.abs());
        for j in 1..p.dim_x() {
            assert_eq!(ev.grad[j], 0.0);
        }
        // The floor witness at the origin is the first coordinate.
        let fl = grad_floor_witness(&p, &vec![0.0; p.dim_x()])
            .unwrap()
            .unwrap();
        assert_eq!(fl.witness, 1);
        assert!(fl.attained >= fl.floor);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for p in [det_params(), stoc_params()] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let h = 1e-5 * p.x_threshold();
            for _ in 0..20 {
                let x = random_x(&p, &mut rng, 2.5);
                let ev = hyper_eval(&p, &x).unwrap();
                for j in 0..p.dim_x() {
                    let mut xp = x.clone();
                    xp[j] += h;
                    let mut xm = x.clone();
                    xm[j] -= h;
                    let fd = (hyper_eval(&p, &xp).unwrap().value
                        - hyper_eval(&p, &xm).unwrap().value)
                        / (2.0 * h);
                    let scale_ref = p.lambda * p.fc.l_f * p.n as f64 / p.l_const;
                    assert!(
                        (fd - ev.grad[j]).abs() <= RTOL_FD * ev.grad[j].abs().max(scale_ref),
                        "dH/dx[{j}]: fd {fd:.12e} vs {:.12e}",
                        ev.grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn floor_holds_while_any_coordinate_is_small() {
        for p in [det_params(), stoc_params()] {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            for _ in 0..200 {
                let mut x = random_x(&p, &mut rng, 3.0);
                // Force at least one small coordinate.
                let j = rng.gen_range(0..p.dim_x());
                x[j] = rng.gen_range(-0.99..0.99) * p.x_threshold();
                let fl = grad_floor_witness(&p, &x).unwrap().unwrap();
                assert!(
                    fl.attained > fl.floor * (1.0 - 1e-12),
                    "floor violated: {:.6e} < {:.6e} at witness {}",
                    fl.attained,
                    fl.floor,
                    fl.witness
                );
            }
            // All coordinates past threshold: the premise is empty.
            let x = vec![2.0 * p.x_threshold(); p.dim_x()];
            assert!(grad_floor_witness(&p, &x).unwrap().is_none());
        }
    }

    #[test]
    fn gap_certificate_fits_in_delta() {
        let p = det_params();
        let rep = gap_bound(&p, 16, 7).unwrap();
        assert!(rep.h0 <= 0.0);
        assert!(rep.inf_estimate >= rep.floor);
        assert!(rep.h0 - rep.inf_estimate <= rep.budget);
        assert!(rep.budget <= rep.delta * (1.0 + 1e-12));
    }

    #[test]
    fn curvature_stays_below_certified_bound() {
        for p in [det_params(), stoc_params()] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for k in 0..5 {
                let x = random_x(&p, &mut rng, 2.0);
                let est = hessian_norm_estimate(&p, &x, 40, 100 + k).unwrap();
                assert!(
                    est <= p.l_h * (1.0 + 1e-6),
                    "power iteration found curvature {est:.6e} above L_h {:.6e}",
                    p.l_h
                );
            }
        }
    }

    #[test]
    fn corner_of_stochastic_box_is_projected_stationary() {
        let p = stoc_params();
        let bx = p.x_bound().unwrap();
        let x = vec![bx; p.dim_x()];
        let ev = hyper_eval(&p, &x).unwrap();
        // Every partial derivative of H is nonpositive, so the projected
        // step cannot move off the upper corner.
        assert!(ev.grad.iter().all(|&g| g <= 0.0));
        assert_eq!(ev.proj_residual_norm, 0.0);
        assert!(ev.grad_norm > 0.0);
    }

    #[test]
    fn deterministic_measures_coincide() {
        let p = det_params();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(&p, &mut rng, 2.0);
        let ev = hyper_eval(&p, &x).unwrap();
        assert_eq!(ev.grad_norm, ev.proj_residual_norm);
        assert_eq!(stationarity(&p, &x).unwrap(), ev.grad_norm);
    }
}
