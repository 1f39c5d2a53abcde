//! Instance parameter derivation and exact evaluation of the two levels.
//!
//! An instance is a pair `(f, g)` on variables `x` (length `T`) and a
//! stacked lower-level vector `y = (y^(0), ..., y^(T))` of `T + 1` blocks of
//! length `n`:
//!
//! * the lower level is a strongly convex quadratic per block,
//!   `g = sum_i  c_g * y_i' ((1/n^2) I + A) y_i - L_g * b_i * y_i[n-1]`,
//!   with `c_g = L_g n^2 / (2 (4n^2 + 1))`, the free-boundary Laplacian `A`,
//!   and linear terms `b_0 = x0` (a built-in constant) and `b_i = x_i`;
//! * the upper level chains consecutive blocks through ramp/integral
//!   products,
//!   `f = (lambda^2 L_f / L) * sum_i [ psi(-C_l u_i / lambda) phi(-C_r w_i / lambda)
//!        - psi(C_l u_i / lambda) phi(C_r w_i / lambda) ]`,
//!   where `u_i` is the last coordinate of block `i - 1` and `w_i` the
//!   first coordinate of block `i`.
//!
//! All scale constants are derived here from the target function class
//! `(L_f, L_g, mu, Delta)` and accuracy `eps`: the block size `n` soaks up
//! the condition number, the resolvent corners fix `C_l`, `C_r` so that the
//! hyper-objective has unit-threshold chain arguments, and `lambda`, `T`
//! balance the stationarity target against the available objective gap.

use crate::hardness::{certify_sups, SupTable};
use crate::tridiag::resolvent_last_column;
use crate::{Error, Result};
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

/// Grid step used for the cached supremum certification.
const SUP_GRID_STEP: f64 = 1e-5;

/// Largest admissible `Delta / L_f`; the construction assumes the gap
/// budget is of constant order.
pub const MAX_DELTA_OVER_LF: f64 = 10.0;

/// Threshold multiplier `C~`: chain arguments cross their ramp threshold
/// exactly when the driving coordinate passes `lambda / (C~ n)`.
pub const C_TILDE: f64 = 1.0;

/// Hypercube radius multiplier for the upper-level variables (stochastic
/// domain: `|x_j| <= R_X * lambda / n`). Must exceed `1 / C_TILDE`.
pub const R_X: f64 = 2.0;

/// Hypercube radius multiplier for the lower-level variables (stochastic
/// domain: `|y_j| <= R_Y * lambda`).
pub const R_Y: f64 = 20.0;

static SUPS_RAW: Lazy<SupTable> =
    Lazy::new(|| certify_sups(SUP_GRID_STEP).expect("certification grid step is in range"));

/// Oracle flavor the instance is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Deterministic,
    Stochastic,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Deterministic => write!(f, "det"),
            Mode::Stochastic => write!(f, "stoc"),
        }
    }
}

/// Target function class and accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionClassParams {
    /// Upper-level smoothness bound.
    pub l_f: f64,
    /// Lower-level smoothness bound.
    pub l_g: f64,
    /// Lower-level strong convexity.
    pub mu: f64,
    /// Hyper-objective gap budget `H(0) - inf H <= Delta`.
    pub delta: f64,
    /// Stationarity target.
    pub eps: f64,
    /// Oracle noise ceiling (stochastic mode only).
    pub sigma: f64,
}

impl FunctionClassParams {
    pub fn kappa(&self) -> f64 {
        self.l_g / self.mu
    }

    fn validate(&self, mode: Mode) -> Result<()> {
        let all = [
            ("L_f", self.l_f),
            ("L_g", self.l_g),
            ("mu", self.mu),
            ("Delta", self.delta),
            ("eps", self.eps),
            ("sigma", self.sigma),
        ];
        for (name, v) in all {
            if !v.is_finite() {
                return Err(Error::InvalidParams(format!(
                    "{name} must be finite, got {v}"
                )));
            }
        }
        if self.l_f <= 0.0
            || self.l_g <= 0.0
            || self.mu <= 0.0
            || self.delta <= 0.0
            || self.eps <= 0.0
        {
            return Err(Error::InvalidParams(
                "L_f, L_g, mu, Delta, eps must all be positive".into(),
            ));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidParams("sigma must be nonnegative".into()));
        }
        if mode == Mode::Stochastic && self.sigma == 0.0 {
            return Err(Error::InvalidParams(
                "stochastic mode needs sigma > 0".into(),
            ));
        }
        if self.l_g < self.mu {
            return Err(Error::InvalidParams(format!(
                "L_g = {} must be at least mu = {}",
                self.l_g, self.mu
            )));
        }
        if self.delta / self.l_f > MAX_DELTA_OVER_LF {
            return Err(Error::InvalidParams(format!(
                "Delta/L_f = {:.3} exceeds the supported maximum {}",
                self.delta / self.l_f,
                MAX_DELTA_OVER_LF
            )));
        }
        Ok(())
    }
}

/// Every constant of a concrete instance, derived once and then treated as
/// immutable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedInstanceParams {
    pub fc: FunctionClassParams,
    pub mode: Mode,
    /// Lower-level block size; soaks up the condition number as
    /// `n = floor(sqrt((L_g - mu) / (4 mu)))`.
    pub n: usize,
    /// Chain length (number of upper-level coordinates).
    pub t_len: usize,
    /// Chain scale: coordinate magnitudes of interest are `O(lambda)`.
    pub lambda: f64,
    /// Instance smoothness scale `L = max(C_l, C_r)^2 * bracket`, where
    /// `bracket` collects the certified second-derivative suprema.
    pub l_const: f64,
    /// Threshold multiplier (see [`C_TILDE`]).
    pub c_tilde: f64,
    /// Left chain constant `C~ n / M_nn`.
    pub c_l: f64,
    /// Right chain constant `C~ n / M_1n`.
    pub c_r: f64,
    /// Scaled resolvent corner `((4n^2+1)/n^2) S_{1,n}`.
    pub m_1n: f64,
    /// Scaled resolvent corner `((4n^2+1)/n^2) S_{n,n}`.
    pub m_nn: f64,
    /// Built-in linear coefficient of block 0: `x0 = lambda / (C~ n)`.
    pub x0: f64,
    /// Upper-level hypercube radius multiplier (stochastic only).
    pub r_x: Option<f64>,
    /// Lower-level hypercube radius multiplier (stochastic only).
    pub r_y: Option<f64>,
    /// Bernoulli reveal probability of the randomized oracle (stochastic
    /// only): `p = min(1, c3 L_g^2 lambda^2 / sigma^2)`.
    pub p: Option<f64>,
    /// Smoothness bound for the hyper-objective: `L_h = c0 n^2 L_f / L`.
    pub l_h: f64,
    /// Hessian bracket with unit chain constants; `L = Cmax^2 c0 / C~^2`.
    pub c0: f64,
    /// Gradient bracket: bound on chain-term gradients in units of
    /// `lambda L_f / L`.
    pub c1: f64,
    /// Stationarity floor constant for the projected measure.
    pub c2: f64,
    /// Noise sizing constant `4 R_Y^2` relating `p`, `sigma`, `lambda`.
    pub c3: f64,
    /// Raw scanned suprema of the component functions.
    pub sups_raw: SupTable,
    /// Certified (inflated/capped) suprema used in all bounds.
    pub sups: SupTable,
    /// Last resolvent column of `(A + n^{-2} I)^{-1}` (length `n`).
    #[serde(skip)]
    s_col: Vec<f64>,
}

impl DerivedInstanceParams {
    /// Number of upper-level coordinates.
    pub fn dim_x(&self) -> usize {
        self.t_len
    }

    /// Total stacked lower-level dimension `n (T + 1)`.
    pub fn dim_y(&self) -> usize {
        self.n * (self.t_len + 1)
    }

    /// Flat index range of lower-level block `i` (0-based, `i <= T`).
    pub fn y_block(&self, i: usize) -> std::ops::Range<usize> {
        debug_assert!(i <= self.t_len);
        i * self.n..(i + 1) * self.n
    }

    /// Linear coefficient multiplying the last coordinate of block `i`:
    /// the constant `x0` for block 0, else `x_{i}`.
    pub fn b_coeff(&self, i: usize, x: &[f64]) -> f64 {
        if i == 0 {
            self.x0
        } else {
            x[i - 1]
        }
    }

    /// Quadratic-form coefficient `L_g n^2 / (2 (4n^2 + 1))`.
    pub fn g_quad_coeff(&self) -> f64 {
        let n2 = (self.n * self.n) as f64;
        self.fc.l_g * n2 / (2.0 * (4.0 * n2 + 1.0))
    }

    /// Resolvent-to-solution factor `(4n^2 + 1) / n^2`.
    pub fn m_factor(&self) -> f64 {
        let n2 = (self.n * self.n) as f64;
        (4.0 * n2 + 1.0) / n2
    }

    /// Upper-level coordinate threshold `lambda / (C~ n)`: chain arguments
    /// cross the ramp foot exactly when a coordinate passes this value.
    pub fn x_threshold(&self) -> f64 {
        self.lambda / (self.c_tilde * self.n as f64)
    }

    /// Scale factor of the upper objective, `lambda^2 L_f / L`.
    pub fn f_scale(&self) -> f64 {
        self.lambda * self.lambda * self.fc.l_f / self.l_const
    }

    /// Per-coordinate half-width of the upper-level box (stochastic mode).
    pub fn x_bound(&self) -> Option<f64> {
        self.r_x.map(|r| r * self.lambda / self.n as f64)
    }

    /// Per-coordinate half-width of the lower-level box (stochastic mode).
    pub fn y_bound(&self) -> Option<f64> {
        self.r_y.map(|r| r * self.lambda)
    }

    /// Last resolvent column of `(A + n^{-2} I)^{-1}`.
    pub fn resolvent_col(&self) -> &[f64] {
        &self.s_col
    }

    /// Short stable identifier for reports.
    pub fn digest(&self) -> String {
        format!(
            "{}_n{}_T{}_lam{:.6e}",
            self.mode, self.n, self.t_len, self.lambda
        )
    }

    /// Build an instance with explicitly chosen chain geometry `(n, T)` and
    /// scale `lambda`, bypassing the accuracy-driven derivation. Used for
    /// controlled protocol experiments where the chain shape itself is the
    /// object under test. The sizing constants are derived exactly as in
    /// [`derive_params`]; `sigma` is back-solved from the requested reveal
    /// probability `p` so that `p = min(1, c3 L_g^2 lambda^2 / sigma^2)`
    /// holds by construction, and `eps`/`delta` are set to the values the
    /// chain would certify.
    #[allow(clippy::too_many_arguments)]
    pub fn lab_instance(
        mode: Mode,
        n: usize,
        t_len: usize,
        l_f: f64,
        l_g: f64,
        mu: f64,
        lambda: f64,
        p_target: f64,
    ) -> Result<Self> {
        if n < 1 || t_len < 1 {
            return Err(Error::InvalidParams(
                "lab instance needs n >= 1, T >= 1".into(),
            ));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParams(
                "lambda must be positive and finite".into(),
            ));
        }
        if !(p_target > 0.0 && p_target <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "reveal probability must be in (0, 1], got {p_target}"
            )));
        }
        let core = SizingCore::build(n, l_f, l_g)?;
        let nf = n as f64;
        let c3 = 4.0 * R_Y * R_Y;
        let sigma = if p_target < 1.0 {
            (c3 * l_g * l_g * lambda * lambda / p_target).sqrt()
        } else {
            // Any sigma at or below lambda L_g sqrt(c3) yields p = 1.
            (c3 * l_g * l_g * lambda * lambda).sqrt()
        };
        let eps = match mode {
            Mode::Deterministic => lambda * l_f * C_TILDE * nf / core.l_const,
            Mode::Stochastic => core.c2(l_f) * lambda * l_f * nf / (2.0 * core.l_const),
        };
        // Smallest budget whose floor reproduces the requested chain length.
        let delta = 12.0 * lambda * lambda * l_f * t_len as f64 / core.l_const;
        let fc = FunctionClassParams {
            l_f,
            l_g,
            mu,
            delta,
            eps,
            sigma,
        };
        core.finish(fc, mode, lambda, t_len)
    }
}

/// Intermediate sizing constants that depend only on `(n, L_f, L_g)`.
struct SizingCore {
    n: usize,
    m_1n: f64,
    m_nn: f64,
    c_l: f64,
    c_r: f64,
    l_const: f64,
    c0: f64,
    c1: f64,
    sups_raw: SupTable,
    sups: SupTable,
    s_col: Vec<f64>,
}

impl SizingCore {
    fn build(n: usize, _l_f: f64, _l_g: f64) -> Result<Self> {
        let col = resolvent_last_column(n)?;
        let n2 = (n * n) as f64;
        let m_factor = (4.0 * n2 + 1.0) / n2;
        let m_1n = m_factor * col.first();
        let m_nn = m_factor * col.last();
        let c_l = C_TILDE * n as f64 / m_nn;
        let c_r = C_TILDE * n as f64 / m_1n;
        let sups_raw = *SUPS_RAW;
        let sups = sups_raw.certified();
        let bracket = sups.sup_psi2 * sups.sup_phi
            + 2.0 * sups.sup_psi1 * sups.sup_phi1
            + sups.sup_psi * sups.sup_phi2;
        let cmax = c_l.max(c_r);
        let l_const = cmax * cmax * bracket;
        let c0 = C_TILDE * C_TILDE * bracket;
        let c1 = cmax * (sups.sup_psi1 * sups.sup_phi + sups.sup_psi * sups.sup_phi1);
        Ok(Self {
            n,
            m_1n,
            m_nn,
            c_l,
            c_r,
            l_const,
            c0,
            c1,
            sups_raw,
            sups,
            s_col: col.values().to_vec(),
        })
    }

    fn c2(&self, _l_f: f64) -> f64 {
        C_TILDE * 1.0f64.min(self.c0 * (R_X - 1.0 / C_TILDE))
    }

    fn finish(
        self,
        fc: FunctionClassParams,
        mode: Mode,
        lambda: f64,
        t_len: usize,
    ) -> Result<DerivedInstanceParams> {
        let nf = self.n as f64;
        let c2 = self.c2(fc.l_f);
        let c3 = 4.0 * R_Y * R_Y;
        let (r_x, r_y, p) = match mode {
            Mode::Deterministic => (None, None, None),
            Mode::Stochastic => {
                let p = (c3 * fc.l_g * fc.l_g * lambda * lambda / (fc.sigma * fc.sigma)).min(1.0);
                (Some(R_X), Some(R_Y), Some(p))
            }
        };
        let x0 = lambda / (C_TILDE * nf);
        // Construction identity: C_l M_nn = C_r M_1n = C~ n, so x0 equals
        // lambda / (C_l M_nn).
        debug_assert!((self.c_l * self.m_nn / nf - C_TILDE).abs() <= 1e-12 * C_TILDE);
        debug_assert!((self.c_r * self.m_1n / nf - C_TILDE).abs() <= 1e-12 * C_TILDE);
        let l_h = self.c0 * nf * nf * fc.l_f / self.l_const;
        Ok(DerivedInstanceParams {
            fc,
            mode,
            n: self.n,
            t_len,
            lambda,
            l_const: self.l_const,
            c_tilde: C_TILDE,
            c_l: self.c_l,
            c_r: self.c_r,
            m_1n: self.m_1n,
            m_nn: self.m_nn,
            x0,
            r_x,
            r_y,
            p,
            l_h,
            c0: self.c0,
            c1: self.c1,
            c2,
            c3,
            sups_raw: self.sups_raw,
            sups: self.sups,
            s_col: self.s_col,
        })
    }
}

/// Derive every instance constant from the function class and accuracy.
///
/// Fails with [`Error::KappaTooSmall`] when `L_g / mu < 5` (no room for a
/// single block) and with [`Error::EmptyChain`] when the gap budget cannot
/// fund even one chain link at the requested accuracy.
pub fn derive_params(fc: FunctionClassParams, mode: Mode) -> Result<DerivedInstanceParams> {
    fc.validate(mode)?;
    let kappa = fc.kappa();
    if kappa < 5.0 {
        return Err(Error::KappaTooSmall { kappa });
    }
    let n = ((fc.l_g - fc.mu) / (4.0 * fc.mu)).sqrt().floor() as usize;
    debug_assert!(n >= 1);
    // The floor guarantees the per-block strong convexity level
    // L_g / (4n^2 + 1) still clears mu.
    let level = fc.l_g / (4.0 * (n * n) as f64 + 1.0);
    if level < fc.mu * (1.0 - 1e-12) {
        return Err(Error::InvalidParams(format!(
            "internal sizing defect: block strong convexity {level} < mu {}",
            fc.mu
        )));
    }
    let core = SizingCore::build(n, fc.l_f, fc.l_g)?;
    let nf = n as f64;
    let lambda = match mode {
        Mode::Deterministic => fc.eps * core.l_const / (fc.l_f * C_TILDE * nf),
        Mode::Stochastic => 2.0 * core.l_const * fc.eps / (core.c2(fc.l_f) * fc.l_f * nf),
    };
    let t_float = fc.delta * core.l_const / (12.0 * lambda * lambda * fc.l_f);
    if t_float < 1.0 {
        return Err(Error::EmptyChain { t_float });
    }
    let t_len = t_float.floor() as usize;
    core.finish(fc, mode, lambda, t_len)
}

/// Joint iterate of both levels: upper variables `x` (length `T`) and the
/// stacked lower-level vector `y` (length `n (T + 1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl BilevelPoint {
    /// The all-zeros iterate every protocol run starts from.
    pub fn origin(params: &DerivedInstanceParams) -> Self {
        Self {
            x: vec![0.0; params.dim_x()],
            y: vec![0.0; params.dim_y()],
        }
    }

    pub fn check_dims(&self, params: &DerivedInstanceParams) -> Result<()> {
        if self.x.len() != params.dim_x() {
            return Err(Error::DimensionMismatch {
                what: "upper-level iterate",
                expected: params.dim_x(),
                got: self.x.len(),
            });
        }
        if self.y.len() != params.dim_y() {
            return Err(Error::DimensionMismatch {
                what: "lower-level iterate",
                expected: params.dim_y(),
                got: self.y.len(),
            });
        }
        Ok(())
    }
}

/// Lower-level objective `g(x, y)`.
pub fn eval_g(params: &DerivedInstanceParams, pt: &BilevelPoint) -> Result<f64> {
    pt.check_dims(params)?;
    let a = crate::tridiag::build_laplacian(params.n);
    let shift = 1.0 / ((params.n * params.n) as f64);
    let coeff = params.g_quad_coeff();
    let mut acc = 0.0;
    for i in 0..=params.t_len {
        let block = &pt.y[params.y_block(i)];
        acc += coeff * a.shifted_quadratic_form(shift, block)?;
        acc -= params.fc.l_g * params.b_coeff(i, &pt.x) * block[params.n - 1];
    }
    Ok(acc)
}

/// Gradient of `g` in both variable groups.
pub fn grad_g(params: &DerivedInstanceParams, pt: &BilevelPoint) -> Result<(Vec<f64>, Vec<f64>)> {
    pt.check_dims(params)?;
    let a = crate::tridiag::build_laplacian(params.n);
    let shift = 1.0 / ((params.n * params.n) as f64);
    let two_coeff = 2.0 * params.g_quad_coeff();
    let mut gy = vec![0.0; params.dim_y()];
    let mut gx = vec![0.0; params.dim_x()];
    for i in 0..=params.t_len {
        let range = params.y_block(i);
        let block = &pt.y[range.clone()];
        let mv = a.shifted_matvec(shift, block)?;
        let gy_block = &mut gy[range];
        for j in 0..params.n {
            gy_block[j] = two_coeff * mv[j];
        }
        gy_block[params.n - 1] -= params.fc.l_g * params.b_coeff(i, &pt.x);
        if i >= 1 {
            gx[i - 1] = -params.fc.l_g * block[params.n - 1];
        }
    }
    Ok((gx, gy))
}

/// Upper-level objective `f(x, y)`. Note `f` never reads `x`.
pub fn eval_f(params: &DerivedInstanceParams, pt: &BilevelPoint) -> Result<f64> {
    pt.check_dims(params)?;
    let scale = params.f_scale();
    let a_l = params.c_l / params.lambda;
    let a_r = params.c_r / params.lambda;
    let n = params.n;
    let mut acc = 0.0;
    for i in 1..=params.t_len {
        let u = pt.y[i * n - 1]; // last coordinate of block i-1
        let w = pt.y[i * n]; // first coordinate of block i
        acc += crate::hardness::psi(-a_l * u) * crate::hardness::phi(-a_r * w)
            - crate::hardness::psi(a_l * u) * crate::hardness::phi(a_r * w);
    }
    Ok(scale * acc)
}

/// Gradient of `f` in both variable groups; the `x` part is identically
/// zero, and the `y` part touches only block-boundary coordinates.
pub fn grad_f(params: &DerivedInstanceParams, pt: &BilevelPoint) -> Result<(Vec<f64>, Vec<f64>)> {
    pt.check_dims(params)?;
    let a_l = params.c_l / params.lambda;
    let a_r = params.c_r / params.lambda;
    // d/du of the scaled pair, with the lambda^2 L_f / L prefactor folded in.
    let du_scale = -params.lambda * params.fc.l_f * params.c_l / params.l_const;
    let dw_scale = -params.lambda * params.fc.l_f * params.c_r / params.l_const;
    let n = params.n;
    let gx = vec![0.0; params.dim_x()];
    let mut gy = vec![0.0; params.dim_y()];
    for i in 1..=params.t_len {
        let u = pt.y[i * n - 1];
        let w = pt.y[i * n];
        gy[i * n - 1] += du_scale
            * (crate::hardness::psi_d(-a_l * u, 1) * crate::hardness::phi(-a_r * w)
                + crate::hardness::psi_d(a_l * u, 1) * crate::hardness::phi(a_r * w));
        gy[i * n] += dw_scale
            * (crate::hardness::psi(-a_l * u) * crate::hardness::phi_d(-a_r * w, 1)
                + crate::hardness::psi(a_l * u) * crate::hardness::phi_d(a_r * w, 1));
    }
    Ok((gx, gy))
}

/// Clamp an iterate into the instance domain.
///
/// Deterministic instances live on all of space, so the point passes
/// through unchanged (with a log warning, since a caller that expected
/// clamping is probably holding the wrong mode). Stochastic instances clamp
/// per coordinate into the boxes `|x_j| <= R_X lambda / n`,
/// `|y_j| <= R_Y lambda`. Clamping preserves supports: zeros map to zeros
/// and signs never flip.
pub fn project_domain(params: &DerivedInstanceParams, pt: &BilevelPoint) -> BilevelPoint {
    match (params.x_bound(), params.y_bound()) {
        (Some(bx), Some(by)) => BilevelPoint {
            x: pt.x.iter().map(|v| v.clamp(-bx, bx)).collect(),
            y: pt.y.iter().map(|v| v.clamp(-by, by)).collect(),
        },
        _ => {
            log::warn!("project_domain called on a deterministic instance; returning unchanged");
            pt.clone()
        }
    }
}
