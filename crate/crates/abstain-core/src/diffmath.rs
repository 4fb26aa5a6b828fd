//! Scalar and vector primitives of the scoring graph, with hand-derived
//! adjoints.
//!
//! All math runs in `f64`. Each primitive comes as a forward function plus
//! a backward companion mapping the output adjoint to input adjoints; there
//! is no tape — the training code composes these by hand in reverse order.
//! [`grad_check`] is the reference oracle every backward pass is validated
//! against in tests.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Norm floor below which a vector is considered degenerate rather than
/// normalisable.
pub const EPS_NORM: f64 = 1e-12;

// ---------------------------------------------------------------------------
// L2 normalisation
// ---------------------------------------------------------------------------

/// Scale `v` to unit Euclidean norm. Returns the unit vector and `1/‖v‖`
/// (the backward pass needs the inverse norm, so it is computed once here).
pub fn l2_normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= EPS_NORM {
        return Err(Error::DegenerateNorm {
            norm,
            eps: EPS_NORM,
        });
    }
    let inv = 1.0 / norm;
    Ok((v.iter().map(|x| x * inv).collect(), inv))
}

/// Adjoint of [`l2_normalize`]: with `u = v/‖v‖`,
/// `dv = (g − u·(uᵀg)) / ‖v‖` — the output gradient projected onto the
/// tangent plane of the unit sphere, rescaled by the inverse norm.
pub fn l2_normalize_backward(unit: &[f64], inv_norm: f64, grad: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(grad).map(|(u, g)| u * g).sum();
    unit.iter()
        .zip(grad)
        .map(|(u, g)| (g - u * dot) * inv_norm)
        .collect()
}

// ---------------------------------------------------------------------------
// Cosine similarity (inputs assumed unit-normalised)
// ---------------------------------------------------------------------------

/// Cosine similarity of two unit vectors — a plain dot product. Callers are
/// responsible for the unit-norm contract; this is the hot inner loop and
/// does not re-check it.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Adjoint of [`cosine`]: `du += g·v`, `dv += g·u`.
pub fn cosine_backward(u: &[f64], v: &[f64], g: f64, du: &mut [f64], dv: &mut [f64]) {
    for i in 0..u.len() {
        du[i] += g * v[i];
        dv[i] += g * u[i];
    }
}

// ---------------------------------------------------------------------------
// GELU (exact erf form)
// ---------------------------------------------------------------------------

/// Standard normal CDF via `erf`.
#[inline]
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
#[inline]
fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU: `x · Φ(x)` with Φ the standard normal CDF (erf form, not the
/// tanh approximation).
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    phi_cdf(x) + x * phi_pdf(x)
}

// ---------------------------------------------------------------------------
// Temperature-scaled softplus
// ---------------------------------------------------------------------------

/// `softplus_T(x) = T · ln(1 + exp(x/T))`, computed in the overflow-safe
/// form `T · (max(x/T, 0) + ln1p(exp(−|x/T|)))`. Smoothly approaches
/// `max(x, 0)` as `T → 0` and stays finite for any `x`.
pub fn softplus_t(x: f64, t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::NonPositiveTemperature(t));
    }
    let u = x / t;
    Ok(t * (u.max(0.0) + (-u.abs()).exp().ln_1p()))
}

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`softplus_t`] w.r.t. `x`: `σ(x/T)`.
pub fn softplus_t_prime(x: f64, t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::NonPositiveTemperature(t));
    }
    Ok(sigmoid(x / t))
}

// ---------------------------------------------------------------------------
// Masked temperature-scaled log-sum-exp
// ---------------------------------------------------------------------------

/// `lse_T(v) = (1/T) · ln Σ_{k: mask} exp(T·v_k)`, with the max subtracted
/// before exponentiation. Interpolates between the mean (T→0) and the max
/// (T→∞) of the active entries. Errors with [`Error::EmptyMask`] when no
/// entry is active — the caller decides what an empty pool means.
pub fn logsumexp_t(values: &[f64], mask: &[bool], t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::NonPositiveTemperature(t));
    }
    if values.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "logsumexp_t: {} values vs {} mask entries",
            values.len(),
            mask.len()
        )));
    }
    let (any, nan, max) = masked_max(values, mask);
    if !any {
        return Err(Error::EmptyMask);
    }
    if nan {
        return Ok(f64::NAN);
    }
    if max == f64::NEG_INFINITY {
        // Every active entry is −∞; the subtraction below would turn the
        // well-defined limit into NaN.
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| (t * (v - max)).exp())
        .sum();
    Ok(max + sum.ln() / t)
}

/// Scan the active entries: (any active?, any NaN among them?, their max).
fn masked_max(values: &[f64], mask: &[bool]) -> (bool, bool, f64) {
    let mut any = false;
    let mut nan = false;
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in values.iter().zip(mask) {
        if m {
            any = true;
            nan |= v.is_nan();
            if *v > max {
                max = *v;
            }
        }
    }
    (any, nan, max)
}

/// Adjoint of [`logsumexp_t`]: the masked softmax weights at temperature T.
/// `∂lse/∂v_k = exp(T·v_k)/Σ exp(T·v_j)` for active k, zero for masked-out
/// entries. The weights sum to one over the active set.
pub fn logsumexp_t_backward(values: &[f64], mask: &[bool], t: f64) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(Error::NonPositiveTemperature(t));
    }
    let (any, _, max) = masked_max(values, mask);
    if !any {
        return Err(Error::EmptyMask);
    }
    let mut weights = vec![0.0; values.len()];
    let mut sum = 0.0;
    for (i, (v, &m)) in values.iter().zip(mask).enumerate() {
        if m {
            let e = (t * (v - max)).exp();
            weights[i] = e;
            sum += e;
        }
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(weights)
}

// ---------------------------------------------------------------------------
// Affine map
// ---------------------------------------------------------------------------

/// `W·x + b` with explicit shape validation. `w` is `(out, in)`.
pub fn linear(w: ArrayView2<f64>, b: ArrayView1<f64>, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if w.ncols() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "linear: weight is {}x{} but input has length {}",
            w.nrows(),
            w.ncols(),
            x.len()
        )));
    }
    if w.nrows() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "linear: weight is {}x{} but bias has length {}",
            w.nrows(),
            w.ncols(),
            b.len()
        )));
    }
    Ok(w.dot(&x) + &b)
}

/// Adjoint of [`linear`] for a single vector: given the output gradient `g`,
/// `dW = g·xᵀ`, `db = g`, `dx = Wᵀ·g`.
pub fn linear_backward(
    w: ArrayView2<f64>,
    x: ArrayView1<f64>,
    g: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let gx = g.to_owned().insert_axis(ndarray::Axis(1));
    let xt = x.to_owned().insert_axis(ndarray::Axis(0));
    let dw = gx.dot(&xt);
    let db = g.to_owned();
    let dx = w.t().dot(&g);
    (dw, db, dx)
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Returns `max_i |analytic_i − fd_i| / max(1, |fd_i|)` — absolute error for
/// small gradients, relative error for large ones. `f` is evaluated at
/// `2·len(params)` perturbed points; it must be a pure function of its
/// argument.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        params.len(),
        analytic.len(),
        "grad_check: params and analytic gradient differ in length"
    );
    let mut worst = 0.0_f64;
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let up = f(&work);
        work[i] = orig - eps;
        let down = f(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    worst
}
