//! External force fields, the bicharacteristic flow, its linear-response
//! coefficients and the structural hypothesis checker.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::geom::Vec3;
use crate::scalar::Real;

/// A point (x, v) in position-velocity space with a time stamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseState<T> {
    pub t: T,
    pub x: Vec3<T>,
    pub v: Vec3<T>,
}

impl<T: Real> PhaseState<T> {
    pub fn new(t: T, x: Vec3<T>, v: Vec3<T>) -> Self {
        debug_assert!(t.is_finite() && x.is_finite() && v.is_finite());
        PhaseState { t, x, v }
    }

    pub fn restamped(mut self, t: T) -> Self {
        self.t = t;
        self
    }
}

/// Linear-response coefficients of the backward flow at (s; t, x, v),
/// together with the Wronskian a1'*a2 - a1*a2'.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AlphaTriple<T> {
    pub a1: T,
    pub a2: T,
    pub a3: T,
    pub wronskian: T,
}

impl<T: Real> AlphaTriple<T> {
    /// min{a2^2*w, a2*w, a2}: the quantity bounded below by alpha_0.
    pub fn floor_value(&self) -> T {
        let w = self.wronskian;
        (self.a2 * self.a2 * w).min(self.a2 * w).min(self.a2)
    }

    pub fn to_f64(&self) -> AlphaTriple<f64> {
        AlphaTriple {
            a1: self.a1.to_f64_lossy(),
            a2: self.a2.to_f64_lossy(),
            a3: self.a3.to_f64_lossy(),
            wronskian: self.wronskian.to_f64_lossy(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ForceFieldError {
    #[error(
        "backward flow response is not affine in (xi, eta): residual {residual:.3e} at s = {s:.3e}"
    )]
    AffineStructureViolation { residual: f64, s: f64 },
    #[error("flow escaped the representable range near time {at}")]
    IntegratorDivergence { at: f64 },
}

/// Affine time profile E0(t) = c0 + c1*t.
///
/// This is the family the experiment-config expression grammar can produce;
/// its flow integrals have closed forms.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TimeProfile<T> {
    pub c0: Vec3<T>,
    pub c1: Vec3<T>,
}

impl<T: Real> TimeProfile<T> {
    pub fn zero() -> Self {
        TimeProfile {
            c0: Vec3::zero(),
            c1: Vec3::zero(),
        }
    }

    pub fn constant(c0: Vec3<T>) -> Self {
        TimeProfile {
            c0,
            c1: Vec3::zero(),
        }
    }

    pub fn linear(c0: Vec3<T>, c1: Vec3<T>) -> Self {
        TimeProfile { c0, c1 }
    }

    pub fn eval(&self, t: T) -> Vec3<T> {
        self.c0 + self.c1.scale(t)
    }

    /// int_t^s E0(r) dr
    fn first_integral(&self, t: T, s: T) -> Vec3<T> {
        let half = T::val(0.5);
        self.c0.scale(s - t) + self.c1.scale(half * (s * s - t * t))
    }

    /// int_t^s int_t^sigma E0(r) dr dsigma
    fn double_integral(&self, t: T, s: T) -> Vec3<T> {
        let half = T::val(0.5);
        let sixth = T::val(1.0 / 6.0);
        let d = s - t;
        self.c0.scale(half * d * d)
            + self.c1.scale(sixth * (s * s * s - t * t * t) - half * t * t * d)
    }
}

/// One component of a config-declared custom force: a sum of terms
/// c*x_i, c*t and constants.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LinearExpr<T> {
    pub constant: T,
    pub t_coef: T,
    pub x_coefs: [T; 3],
}

#[derive(Debug, Error)]
#[error("cannot parse force expression term `{term}`")]
pub struct ExprParseError {
    pub term: String,
}

impl<T: Real> LinearExpr<T> {
    pub fn eval(&self, t: T, x: Vec3<T>) -> T {
        self.constant
            + self.t_coef * t
            + self.x_coefs[0] * x[0]
            + self.x_coefs[1] * x[1]
            + self.x_coefs[2] * x[2]
    }

    /// Parses expressions like `-x1`, `0.5*x2 + t`, `1 - 2*x3 + 0.1*t`.
    pub fn parse(src: &str) -> Result<Self, ExprParseError> {
        let compact: String = src.chars().filter(|c| !c.is_whitespace()).collect();
        let mut out = LinearExpr {
            constant: T::zero(),
            t_coef: T::zero(),
            x_coefs: [T::zero(); 3],
        };
        if compact.is_empty() {
            return Ok(out);
        }
        // Split into signed terms.
        let mut terms: Vec<String> = Vec::new();
        let mut cur = String::new();
        for (i, c) in compact.chars().enumerate() {
            if (c == '+' || c == '-') && i > 0 {
                terms.push(std::mem::take(&mut cur));
            }
            cur.push(c);
        }
        terms.push(cur);
        for term in terms {
            let bad = || ExprParseError { term: term.clone() };
            let (sign, body) = match term.strip_prefix('-') {
                Some(rest) => (-T::one(), rest),
                None => (T::one(), term.strip_prefix('+').unwrap_or(&term)),
            };
            if body.is_empty() {
                return Err(bad());
            }
            let mut coef = sign;
            let mut var: Option<&str> = None;
            for part in body.split('*') {
                match part {
                    "t" | "x1" | "x2" | "x3" => {
                        if var.replace(part).is_some() {
                            return Err(bad());
                        }
                    }
                    num => {
                        let v: f64 = num.parse().map_err(|_| bad())?;
                        coef = coef * T::val(v);
                    }
                }
            }
            match var {
                None => out.constant += coef,
                Some("t") => out.t_coef += coef,
                Some("x1") => out.x_coefs[0] += coef,
                Some("x2") => out.x_coefs[1] += coef,
                Some("x3") => out.x_coefs[2] += coef,
                _ => unreachable!(),
            }
        }
        Ok(out)
    }
}

/// An evaluable external force E(t, x).
pub trait ForceFn<T>: Send + Sync {
    fn eval(&self, t: T, x: Vec3<T>) -> Vec3<T>;
}

impl<T: Real, F> ForceFn<T> for F
where
    F: Fn(T, Vec3<T>) -> Vec3<T> + Send + Sync,
{
    fn eval(&self, t: T, x: Vec3<T>) -> Vec3<T> {
        self(t, x)
    }
}

/// Custom force integrated by fixed-step classical Runge-Kutta.
#[derive(Clone)]
pub struct CustomField<T> {
    pub force: Arc<dyn ForceFn<T>>,
    /// RK4 step size.
    pub step: T,
    /// Present when the field was built from the config expression grammar.
    pub exprs: Option<[LinearExpr<T>; 3]>,
}

impl<T: fmt::Debug> fmt::Debug for CustomField<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomField")
            .field("step", &self.step)
            .field("exprs", &self.exprs)
            .finish_non_exhaustive()
    }
}

/// External force field together with flow and response-coefficient access.
#[derive(Clone, Debug)]
pub enum ForceFieldModel<T> {
    /// E = 0.
    Zero,
    /// E(t, x) = E0(t).
    TimeOnly { profile: TimeProfile<T> },
    /// E(t, x) = e0^2 x + E0(t), e0 > 0.
    LinearPlusTime { e0: T, profile: TimeProfile<T> },
    /// Arbitrary evaluable force; flow by RK4, coefficients by probing.
    Custom(CustomField<T>),
}

pub const DEFAULT_RK4_STEP: f64 = 1e-3;

/// Probe magnitudes of the linear-response extraction.
const PROBE_DELTA_COARSE: f64 = 1e-3;
const PROBE_DELTA_FINE: f64 = 1e-4;
/// Deviation from affine structure above this is a model violation.
const AFFINE_TOL: f64 = 1e-4;
/// Step of the s-derivative used for probed Wronskians.
const S_DERIV_STEP: f64 = 1e-3;
/// Noise floor for sign checks on probed coefficients.
const SIGN_TOL: f64 = 1e-9;

impl<T: Real> ForceFieldModel<T> {
    pub fn zero() -> Self {
        ForceFieldModel::Zero
    }

    pub fn time_only(profile: TimeProfile<T>) -> Self {
        ForceFieldModel::TimeOnly { profile }
    }

    /// Panics if `e0 <= 0`.
    pub fn linear_plus_time(e0: T, profile: TimeProfile<T>) -> Self {
        assert!(e0 > T::zero(), "e0 must be positive");
        ForceFieldModel::LinearPlusTime { e0, profile }
    }

    pub fn custom<F: ForceFn<T> + 'static>(force: F, step: T) -> Self {
        ForceFieldModel::Custom(CustomField {
            force: Arc::new(force),
            step,
            exprs: None,
        })
    }

    /// Custom field from three parsed expression components.
    pub fn custom_linear(exprs: [LinearExpr<T>; 3], step: T) -> Self {
        let e = exprs;
        ForceFieldModel::Custom(CustomField {
            force: Arc::new(move |t: T, x: Vec3<T>| {
                Vec3::new(e[0].eval(t, x), e[1].eval(t, x), e[2].eval(t, x))
            }),
            step,
            exprs: Some(exprs),
        })
    }

    /// Closed-form flow and coefficients are available.
    pub fn is_analytic(&self) -> bool {
        !matches!(self, ForceFieldModel::Custom(_))
    }

    /// E(t, x). Total on finite inputs.
    pub fn evaluate(&self, t: T, x: Vec3<T>) -> Vec3<T> {
        match self {
            ForceFieldModel::Zero => Vec3::zero(),
            ForceFieldModel::TimeOnly { profile } => profile.eval(t),
            ForceFieldModel::LinearPlusTime { e0, profile } => {
                x.scale(*e0 * *e0) + profile.eval(t)
            }
            ForceFieldModel::Custom(c) => c.force.eval(t, x),
        }
    }

    /// The bicharacteristic point (X(s; t,x,v), V(s; t,x,v)), stamped at s.
    pub fn flow(&self, s: T, state: &PhaseState<T>) -> Result<PhaseState<T>, ForceFieldError> {
        let t = state.t;
        if s == t {
            return Ok(*state);
        }
        let out = match self {
            ForceFieldModel::Zero => PhaseState {
                t: s,
                x: state.x + state.v.scale(s - t),
                v: state.v,
            },
            ForceFieldModel::TimeOnly { profile } => PhaseState {
                t: s,
                x: state.x + state.v.scale(s - t) + profile.double_integral(t, s),
                v: state.v + profile.first_integral(t, s),
            },
            ForceFieldModel::LinearPlusTime { e0, profile } => {
                let e0 = *e0;
                let inv_e0sq = T::one() / (e0 * e0);
                // Particular solution x_p(r) = -(c0 + c1 r)/e0^2.
                let xp_t = -(profile.c0 + profile.c1.scale(t)).scale(inv_e0sq);
                let xp_s = -(profile.c0 + profile.c1.scale(s)).scale(inv_e0sq);
                let xp_dot = -profile.c1.scale(inv_e0sq);
                let y = state.x - xp_t;
                let u = state.v - xp_dot;
                let ch = (e0 * (s - t)).cosh();
                let sh = (e0 * (s - t)).sinh();
                PhaseState {
                    t: s,
                    x: y.scale(ch) + u.scale(sh / e0) + xp_s,
                    v: y.scale(e0 * sh) + u.scale(ch) + xp_dot,
                }
            }
            ForceFieldModel::Custom(c) => rk4_flow(c, s, state)?,
        };
        if out.x.is_finite() && out.v.is_finite() {
            Ok(out)
        } else {
            Err(ForceFieldError::IntegratorDivergence {
                at: s.to_f64_lossy(),
            })
        }
    }

    /// Closed-form coefficients a1, a2, a3 and their s-derivatives where
    /// available.
    fn analytic_alpha(&self, s: T) -> Option<(AlphaTriple<T>, T, T)> {
        match self {
            ForceFieldModel::Zero | ForceFieldModel::TimeOnly { .. } => {
                // Translation-invariant flow: same response as free streaming.
                let a1 = s;
                let a2 = T::one();
                let triple = AlphaTriple {
                    a1,
                    a2,
                    a3: T::zero(),
                    wronskian: T::one() * a2 - a1 * T::zero(),
                };
                Some((triple, T::one(), T::zero()))
            }
            ForceFieldModel::LinearPlusTime { e0, .. } => {
                let e0 = *e0;
                let ch = (e0 * s).cosh();
                let sh = (e0 * s).sinh();
                let a1 = sh / e0;
                let a2 = ch;
                let a1p = ch;
                let a2p = e0 * sh;
                Some((
                    AlphaTriple {
                        a1,
                        a2,
                        a3: e0 * sh,
                        wronskian: a1p * a2 - a1 * a2p,
                    },
                    a1p,
                    a2p,
                ))
            }
            ForceFieldModel::Custom(_) => None,
        }
    }

    /// The coefficients a1, a2, a3 and Wronskian at (s; base).
    ///
    /// Analytic kinds return closed forms; custom fields are probed by
    /// central-difference linear response at two magnitudes, with an
    /// affine-structure cross-check.
    pub fn alpha_coefficients(
        &self,
        s: T,
        base: &PhaseState<T>,
    ) -> Result<AlphaTriple<T>, ForceFieldError> {
        if let Some((triple, _, _)) = self.analytic_alpha(s) {
            return Ok(triple);
        }
        let probe = self.probe_alpha(s, base)?;
        // Wronskian by central differences of the probed a1, a2 in s.
        let h = T::val(S_DERIV_STEP);
        let (sa, sb) = if s >= h { (s - h, s + h) } else { (s, s + h + h) };
        let pa = self.probe_alpha(sa, base)?;
        let pb = self.probe_alpha(sb, base)?;
        let a1p = (pb.a1 - pa.a1) / (sb - sa);
        let a2p = (pb.a2 - pa.a2) / (sb - sa);
        Ok(AlphaTriple {
            a1: probe.a1,
            a2: probe.a2,
            a3: probe.a3,
            wronskian: a1p * probe.a2 - probe.a1 * a2p,
        })
    }

    /// Linear-response extraction of (a1, a2, a3) from the backward flow.
    fn probe_alpha(&self, s: T, base: &PhaseState<T>) -> Result<ProbedAlpha<T>, ForceFieldError> {
        let state_s = self.flow(s, base)?;
        let back0 = self.flow(T::zero(), &state_s)?;
        let coarse = self.probe_at_magnitude(&state_s, &back0, T::val(PROBE_DELTA_COARSE))?;
        let fine = self.probe_at_magnitude(&state_s, &back0, T::val(PROBE_DELTA_FINE))?;
        let magnitude_dev = (coarse.a1 - fine.a1)
            .abs()
            .max((coarse.a2 - fine.a2).abs())
            .max((coarse.a3 - fine.a3).abs());
        let residual = coarse
            .residual
            .max(fine.residual)
            .max(magnitude_dev);
        let scale = T::one().max(coarse.a1.abs()).max(coarse.a2.abs()).max(coarse.a3.abs());
        if residual > T::val(AFFINE_TOL) * scale {
            return Err(ForceFieldError::AffineStructureViolation {
                residual: residual.to_f64_lossy(),
                s: s.to_f64_lossy(),
            });
        }
        Ok(ProbedAlpha {
            a1: fine.a1,
            a2: fine.a2,
            a3: fine.a3,
        })
    }

    /// Probes along two axes at one magnitude. Returns coefficient estimates
    /// and the worst deviation from the hypothesised scalar affine form
    /// (off-axis response, axis anisotropy, cross-equation mismatch of a2,
    /// and curvature of the response).
    fn probe_at_magnitude(
        &self,
        state_s: &PhaseState<T>,
        back0: &PhaseState<T>,
        delta: T,
    ) -> Result<AxisProbe<T>, ForceFieldError> {
        let mut residual = T::zero();
        let mut est: Option<AxisProbe<T>> = None;
        for axis in 0..2usize {
            let mut e = Vec3::zero();
            e[axis] = T::one();
            // Position probe: xi = +/- delta * e.
            let bxp = self.backward(state_s, e.scale(delta), Vec3::zero())?;
            let bxm = self.backward(state_s, e.scale(-delta), Vec3::zero())?;
            let dx_x = (bxp.x - bxm.x).scale(T::val(0.5) / delta);
            let dv_x = (bxp.v - bxm.v).scale(T::val(0.5) / delta);
            let a2_from_x = dx_x[axis];
            let a3 = -dv_x[axis];
            // Velocity probe: eta = +/- delta * e.
            let bvp = self.backward(state_s, Vec3::zero(), e.scale(delta))?;
            let bvm = self.backward(state_s, Vec3::zero(), e.scale(-delta))?;
            let dx_v = (bvp.x - bvm.x).scale(T::val(0.5) / delta);
            let dv_v = (bvp.v - bvm.v).scale(T::val(0.5) / delta);
            let a1 = dx_v[axis];
            let a2_from_v = -dv_v[axis];
            // Off-axis components must vanish for a scalar response.
            let mut off = T::zero();
            for k in 0..3 {
                if k != axis {
                    off = off
                        .max(dx_x[k].abs())
                        .max(dv_x[k].abs())
                        .max(dx_v[k].abs())
                        .max(dv_v[k].abs());
                }
            }
            // Curvature: affine responses have vanishing second differences.
            let curv = ((bxp.x + bxm.x - back0.x - back0.x).norm()
                + (bvp.x + bvm.x - back0.x - back0.x).norm())
                * (T::val(0.5) / delta);
            residual = residual
                .max(off)
                .max((a2_from_x - a2_from_v).abs())
                .max(curv);
            match &est {
                None => {
                    est = Some(AxisProbe {
                        a1,
                        a2: a2_from_x,
                        a3,
                        residual: T::zero(),
                    })
                }
                Some(prev) => {
                    // Anisotropy across axes violates the scalar hypothesis.
                    residual = residual
                        .max((prev.a1 - a1).abs())
                        .max((prev.a2 - a2_from_x).abs())
                        .max((prev.a3 - a3).abs());
                }
            }
        }
        let mut out = est.expect("two axes probed");
        out.residual = residual;
        Ok(out)
    }

    /// X, V at time 0 of the trajectory through the perturbed state
    /// (x_s + xi, v_s - eta) at time s.
    fn backward(
        &self,
        state_s: &PhaseState<T>,
        xi: Vec3<T>,
        eta: Vec3<T>,
    ) -> Result<PhaseState<T>, ForceFieldError> {
        self.flow(
            T::zero(),
            &PhaseState {
                t: state_s.t,
                x: state_s.x + xi,
                v: state_s.v - eta,
            },
        )
    }

    /// Coarse bounds of a2 and a3 over s in [0, t], used to size truncation
    /// radii of the lemma integrals.
    pub fn alpha_envelope(&self, t: T, base: &PhaseState<T>) -> Result<AlphaEnvelope<T>, ForceFieldError> {
        match self {
            ForceFieldModel::Zero | ForceFieldModel::TimeOnly { .. } => Ok(AlphaEnvelope {
                a2_min: T::one(),
                a2_max: T::one(),
                a3_max: T::zero(),
            }),
            ForceFieldModel::LinearPlusTime { e0, .. } => Ok(AlphaEnvelope {
                a2_min: T::one(),
                a2_max: (*e0 * t).cosh(),
                a3_max: *e0 * (*e0 * t).sinh(),
            }),
            ForceFieldModel::Custom(_) => {
                let n = 32;
                let mut a2_min = T::infinity();
                let mut a2_max = T::zero();
                let mut a3_max = T::zero();
                for i in 0..=n {
                    let s = t * T::val(i as f64) / T::val(n as f64);
                    let a = self.alpha_coefficients(s, base)?;
                    a2_min = a2_min.min(a.a2);
                    a2_max = a2_max.max(a.a2);
                    a3_max = a3_max.max(a.a3);
                }
                Ok(AlphaEnvelope {
                    a2_min,
                    a2_max,
                    a3_max,
                })
            }
        }
    }

    /// Evaluates the five structural conditions on a Latin-hypercube sample
    /// of (s, t, x, v).
    pub fn check_hypotheses(&self, sampling: &SampleSpec<T>) -> HypothesisReport {
        assert!(sampling.count >= 1, "sample count must be >= 1");
        let samples = sampling.draw();
        let mut positivity = ConditionOutcome::new("alpha-positivity");
        let mut affine_x = ConditionOutcome::new("backward-position-affine");
        let mut affine_v = ConditionOutcome::new("backward-velocity-affine");
        let mut ratio = ConditionOutcome::new("ratio-bound");
        let mut floor = ConditionOutcome::new("coefficient-floor");

        let mut alpha0 = f64::INFINITY;
        let mut tau0 = 0.0f64;
        let mut alpha3_all_zero = true;
        // Prefer an a1-sign violation as the positivity counterexample: it is
        // the first inequality of the condition and the most interpretable.
        let mut positivity_a1: Option<Counterexample> = None;

        let sign_tol = SIGN_TOL;
        for sample in &samples {
            let base = PhaseState::new(sample.t, sample.x, sample.v);
            let alpha = match self.alpha_coefficients(sample.s, &base) {
                Ok(a) => a.to_f64(),
                Err(err) => {
                    let ce = Counterexample::structural(sample, &err);
                    affine_x.fail(ce.clone());
                    affine_v.fail(ce);
                    continue;
                }
            };
            // Condition: a1 > 0 for s > 0, a1(0) >= 0, a2 > 0, a3 >= 0.
            if alpha.a1 < -sign_tol {
                let ce = Counterexample::of(sample, &alpha, "a1 < 0");
                if positivity_a1.is_none() {
                    positivity_a1 = Some(ce.clone());
                }
                positivity.fail(ce);
            } else if alpha.a2 <= sign_tol {
                positivity.fail(Counterexample::of(sample, &alpha, "a2 <= 0"));
            } else if alpha.a3 < -sign_tol {
                positivity.fail(Counterexample::of(sample, &alpha, "a3 < 0"));
            }
            // Affine structure of the backward position/velocity maps: for
            // analytic kinds probe the actual flow against the closed forms.
            if self.is_analytic() {
                match self.probe_alpha(sample.s, &base) {
                    Ok(p) => {
                        let dev = (p.a1.to_f64_lossy() - alpha.a1)
                            .abs()
                            .max((p.a2.to_f64_lossy() - alpha.a2).abs())
                            .max((p.a3.to_f64_lossy() - alpha.a3).abs());
                        if dev > 1e-6 * alpha.a2.abs().max(1.0) {
                            let ce =
                                Counterexample::of(sample, &alpha, "closed form vs probe mismatch");
                            affine_x.fail(ce.clone());
                            affine_v.fail(ce);
                        }
                    }
                    Err(err) => {
                        let ce = Counterexample::structural(sample, &err);
                        affine_x.fail(ce.clone());
                        affine_v.fail(ce);
                    }
                }
            }
            if alpha.a3.abs() > sign_tol {
                alpha3_all_zero = false;
            }
            if alpha.a2 > sign_tol {
                tau0 = tau0.max(alpha.a1.max(alpha.a3) / alpha.a2);
            } else {
                ratio.fail(Counterexample::of(sample, &alpha, "ratio undefined: a2 <= 0"));
            }
            let fl = alpha.floor_value();
            if fl < alpha0 {
                alpha0 = fl;
            }
            if fl <= 0.0 {
                floor.fail(Counterexample::of(sample, &alpha, "min{a2^2 w, a2 w, a2} <= 0"));
            }
        }
        if let Some(ce) = positivity_a1 {
            positivity.counterexample = Some(ce);
        }
        if !tau0.is_finite() {
            ratio.fail_msg("ratio sup is not finite");
        }
        let conditions = vec![
            positivity.into_check(),
            affine_x.into_check(),
            affine_v.into_check(),
            ratio.into_check(),
            floor.into_check(),
        ];
        let passed = conditions.iter().all(|c| c.passed);
        HypothesisReport {
            passed,
            conditions,
            alpha0_estimate: alpha0,
            tau0_estimate: if alpha3_all_zero { None } else { Some(tau0) },
            alpha3_identically_zero: alpha3_all_zero,
            samples: samples.len(),
        }
    }
}

#[derive(Clone, Copy)]
struct ProbedAlpha<T> {
    a1: T,
    a2: T,
    a3: T,
}

#[derive(Clone, Copy)]
struct AxisProbe<T> {
    a1: T,
    a2: T,
    a3: T,
    residual: T,
}

/// Coarse per-base bounds of the coefficients over s in [0, t].
#[derive(Clone, Copy, Debug)]
pub struct AlphaEnvelope<T> {
    pub a2_min: T,
    pub a2_max: T,
    pub a3_max: T,
}

/// Classical fixed-step RK4 for the bicharacteristic system.
fn rk4_flow<T: Real>(
    field: &CustomField<T>,
    s: T,
    state: &PhaseState<T>,
) -> Result<PhaseState<T>, ForceFieldError> {
    let span = s - state.t;
    let n = (span.abs() / field.step).ceil().to_f64_lossy().max(1.0) as usize;
    let h = span / T::val(n as f64);
    let mut t = state.t;
    let mut x = state.x;
    let mut v = state.v;
    let half = T::val(0.5);
    let sixth = T::val(1.0 / 6.0);
    let two = T::val(2.0);
    for _ in 0..n {
        let k1x = v;
        let k1v = field.force.eval(t, x);
        let k2x = v + k1v.scale(half * h);
        let k2v = field.force.eval(t + half * h, x + k1x.scale(half * h));
        let k3x = v + k2v.scale(half * h);
        let k3v = field.force.eval(t + half * h, x + k2x.scale(half * h));
        let k4x = v + k3v.scale(h);
        let k4v = field.force.eval(t + h, x + k3x.scale(h));
        x = x + (k1x + k2x.scale(two) + k3x.scale(two) + k4x).scale(h * sixth);
        v = v + (k1v + k2v.scale(two) + k3v.scale(two) + k4v).scale(h * sixth);
        t = t + h;
        if !(x.is_finite() && v.is_finite()) {
            return Err(ForceFieldError::IntegratorDivergence {
                at: t.to_f64_lossy(),
            });
        }
    }
    Ok(PhaseState { t: s, x, v })
}

/// Latin-hypercube sample specification over (s, t, x, v).
#[derive(Clone, Copy, Debug)]
pub struct SampleSpec<T> {
    pub count: usize,
    pub seed: u64,
    pub s_range: (T, T),
    pub t_range: (T, T),
    /// Positions are sampled per component in [-x_half_width, x_half_width].
    pub x_half_width: T,
    pub v_half_width: T,
}

impl<T: Real> SampleSpec<T> {
    pub fn desk_default(seed: u64) -> Self {
        SampleSpec {
            count: 1000,
            seed,
            s_range: (T::zero(), T::val(5.0)),
            t_range: (T::zero(), T::one()),
            x_half_width: T::val(2.0),
            v_half_width: T::val(2.0),
        }
    }

    fn draw(&self) -> Vec<HypothesisSample<T>> {
        let n = self.count;
        let dims: [(T, T); 8] = [
            self.s_range,
            self.t_range,
            (-self.x_half_width, self.x_half_width),
            (-self.x_half_width, self.x_half_width),
            (-self.x_half_width, self.x_half_width),
            (-self.v_half_width, self.v_half_width),
            (-self.v_half_width, self.v_half_width),
            (-self.v_half_width, self.v_half_width),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut strata: Vec<Vec<usize>> = Vec::with_capacity(8);
        for _ in 0..8 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            strata.push(perm);
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut coord = [T::zero(); 8];
            for (d, (lo, hi)) in dims.iter().enumerate() {
                let jitter: f64 = rng.gen_range(0.0..1.0);
                let frac = (strata[d][i] as f64 + jitter) / n as f64;
                coord[d] = *lo + (*hi - *lo) * T::val(frac);
            }
            out.push(HypothesisSample {
                s: coord[0],
                t: coord[1],
                x: Vec3::new(coord[2], coord[3], coord[4]),
                v: Vec3::new(coord[5], coord[6], coord[7]),
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct HypothesisSample<T> {
    s: T,
    t: T,
    x: Vec3<T>,
    v: Vec3<T>,
}

/// A sample at which a condition failed, with the offending coefficients.
#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub s: f64,
    pub t: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub alpha: Option<AlphaTriple<f64>>,
    pub detail: String,
}

impl Counterexample {
    fn of<T: Real>(sample: &HypothesisSample<T>, alpha: &AlphaTriple<f64>, detail: &str) -> Self {
        Counterexample {
            s: sample.s.to_f64_lossy(),
            t: sample.t.to_f64_lossy(),
            x: sample.x.to_f64(),
            v: sample.v.to_f64(),
            alpha: Some(*alpha),
            detail: detail.to_string(),
        }
    }

    fn structural<T: Real>(sample: &HypothesisSample<T>, err: &ForceFieldError) -> Self {
        Counterexample {
            s: sample.s.to_f64_lossy(),
            t: sample.t.to_f64_lossy(),
            x: sample.x.to_f64(),
            v: sample.v.to_f64(),
            alpha: None,
            detail: err.to_string(),
        }
    }
}

/// Pass/fail of one structural condition.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionCheck {
    pub id: String,
    pub passed: bool,
    pub counterexample: Option<Counterexample>,
}

struct ConditionOutcome {
    id: &'static str,
    counterexample: Option<Counterexample>,
    message: Option<String>,
}

impl ConditionOutcome {
    fn new(id: &'static str) -> Self {
        ConditionOutcome {
            id,
            counterexample: None,
            message: None,
        }
    }

    fn fail(&mut self, ce: Counterexample) {
        if self.counterexample.is_none() {
            self.counterexample = Some(ce);
        }
    }

    fn fail_msg(&mut self, msg: &str) {
        if self.message.is_none() && self.counterexample.is_none() {
            self.message = Some(msg.to_string());
        }
    }

    fn into_check(self) -> ConditionCheck {
        let failed = self.counterexample.is_some() || self.message.is_some();
        let counterexample = self.counterexample.or_else(|| {
            self.message.map(|detail| Counterexample {
                s: f64::NAN,
                t: f64::NAN,
                x: [f64::NAN; 3],
                v: [f64::NAN; 3],
                alpha: None,
                detail,
            })
        });
        ConditionCheck {
            id: self.id.to_string(),
            passed: !failed,
            counterexample,
        }
    }
}

/// Hypothesis verdict with sampled estimates of the structural constants.
///
/// `alpha0_estimate` and `tau0_estimate` are empirical inf/sup over the
/// sample, not proven bounds.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub passed: bool,
    pub conditions: Vec<ConditionCheck>,
    pub alpha0_estimate: f64,
    pub tau0_estimate: Option<f64>,
    pub alpha3_identically_zero: bool,
    pub samples: usize,
}

impl HypothesisReport {
    pub fn condition(&self, id: &str) -> Option<&ConditionCheck> {
        self.conditions.iter().find(|c| c.id == id)
    }
}
