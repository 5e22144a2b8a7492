//! Velocity transforms, collision factor models, density and the displaced
//! hard-sphere gain/loss integrals, pointwise and along characteristics.

use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::force_fields::{ForceFieldError, ForceFieldModel, PhaseState};
use crate::geom::Vec3;
use crate::quadrature::{
    cube_measure, gauss_legendre_on, integrate_velocity, mc_integrate, sample_cube,
    sample_hemisphere, EstimateWithError, HemiRule, HemisphereRule, QuadratureError,
    QuadratureScheme, VelocityRule,
};
use crate::scalar::Real;
use crate::weighted_space::{DistributionField, PhaseFunction, WeightParams};

#[derive(Debug, Error)]
pub enum CollisionError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("density {rho:.6e} too close to the factor pole (1 - 2 b rho = {denom:.3e})")]
    PoleProximity { rho: f64, denom: f64 },
    #[error("stencil point {point:?} leaves the grid bounding box")]
    OutOfDomain { point: [f64; 3] },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Flow(#[from] ForceFieldError),
}

/// Hard-sphere diameter and particle mass. The kernel is fixed as
/// B(u, w) = u.w on the hemisphere u.w >= 0.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CollisionParams<T> {
    pub a: T,
    pub mass: T,
}

impl<T: Real> CollisionParams<T> {
    pub fn new(a: T, mass: T) -> Self {
        assert!(a > T::zero(), "hard-sphere diameter must be positive");
        assert!(mass > T::zero(), "mass must be positive");
        CollisionParams { a, mass }
    }

    /// a = 0 is permitted only here: it degenerates the displaced stencil to
    /// the Boltzmann hard-sphere operator.
    pub fn boltzmann_limit(a: T, mass: T) -> Self {
        assert!(a >= T::zero() && mass > T::zero());
        CollisionParams { a, mass }
    }
}

/// Density-dependent pair-correlation factor model.
#[derive(Clone, Debug, Serialize)]
pub enum CollisionFactorModel<T> {
    Constant(T),
    /// Y(rho) = (1 - 11 b rho / 8) / (1 - 2 b rho) with b = 2 pi a^3 / (3 m).
    StandardYApprox { b: T },
    /// 1 + sum_i b_i (2 pi a^3 rho / 3)^i, finitely many coefficients.
    VirialTruncated { unit: T, coefficients: Vec<T> },
    /// Revised-theory pair correlation truncated to a positive constant.
    RevisedConstantG(T),
}

impl<T: Real> CollisionFactorModel<T> {
    pub fn constant(c: T) -> Self {
        assert!(c >= T::zero());
        CollisionFactorModel::Constant(c)
    }

    pub fn standard_y(params: &CollisionParams<T>) -> Self {
        let b = T::val(2.0) * T::PI() * params.a.powi(3) / (T::val(3.0) * params.mass);
        CollisionFactorModel::StandardYApprox { b }
    }

    pub fn standard_y_with_b(b: T) -> Self {
        CollisionFactorModel::StandardYApprox { b }
    }

    pub fn virial_truncated(a: T, coefficients: Vec<T>) -> Self {
        CollisionFactorModel::VirialTruncated {
            unit: T::val(2.0) * T::PI() * a.powi(3) / T::val(3.0),
            coefficients,
        }
    }

    pub fn revised_constant(c: T) -> Self {
        assert!(c >= T::zero());
        CollisionFactorModel::RevisedConstantG(c)
    }

    /// Whether evaluation actually reads the density.
    pub fn needs_density(&self) -> bool {
        match self {
            CollisionFactorModel::Constant(_) | CollisionFactorModel::RevisedConstantG(_) => false,
            CollisionFactorModel::StandardYApprox { .. } => true,
            CollisionFactorModel::VirialTruncated { coefficients, .. } => {
                !coefficients.is_empty()
            }
        }
    }
}

/// Evaluates a factor model at a density value.
pub fn evaluate_factor<T: Real>(
    model: &CollisionFactorModel<T>,
    rho: T,
) -> Result<T, CollisionError> {
    match model {
        CollisionFactorModel::Constant(c) => Ok(*c),
        CollisionFactorModel::StandardYApprox { b } => {
            let denom = T::one() - T::val(2.0) * *b * rho;
            if denom <= T::val(1e-6) {
                return Err(CollisionError::PoleProximity {
                    rho: rho.to_f64_lossy(),
                    denom: denom.to_f64_lossy(),
                });
            }
            Ok((T::one() - T::val(11.0 / 8.0) * *b * rho) / denom)
        }
        CollisionFactorModel::VirialTruncated { unit, coefficients } => {
            let z = *unit * rho;
            let mut acc = T::zero();
            for c in coefficients.iter().rev() {
                acc = (acc + *c) * z;
            }
            Ok(T::one() + acc)
        }
        CollisionFactorModel::RevisedConstantG(c) => Ok(*c),
    }
}

/// Empirical locally-Lipschitz constant of the factor in the density
/// argument: the sup of |F(r1) - F(r2)| / |r1 - r2| over sampled pairs in
/// the density range reachable from M_R. A sampled estimate, not a bound.
///
/// The norm-based condition follows by multiplying with
/// (pi/q)^{3/2} / alpha_0 (see [`lipschitz_norm_factor`]).
pub fn lipschitz_estimate<T: Real>(
    model: &CollisionFactorModel<T>,
    radius: T,
    weights: &WeightParams<T>,
    alpha0: T,
    samples: usize,
    seed: u64,
) -> Result<T, CollisionError> {
    assert!(radius > T::zero() && alpha0 > T::zero());
    let rho_max = radius * (T::PI() / weights.q).powf(T::val(1.5)) / alpha0.powi(3);
    let mut sup = T::zero();
    for i in 0..samples {
        let mut rng = crate::quadrature::sample_rng(seed, i as u64);
        use rand::Rng;
        let r1: T = rng.gen_range(T::zero()..rho_max);
        let r2: T = rng.gen_range(T::zero()..rho_max);
        if (r1 - r2).abs() < T::val(1e-12) * rho_max {
            continue;
        }
        let f1 = evaluate_factor(model, r1)?;
        let f2 = evaluate_factor(model, r2)?;
        sup = sup.max(((f1 - f2) / (r1 - r2)).abs());
    }
    Ok(sup)
}

/// Factor mapping a density-based Lipschitz constant to the weighted-norm
/// condition: int m(v) dv / alpha_0 with the velocity Jacobian floor.
pub fn lipschitz_norm_factor<T: Real>(weights: &WeightParams<T>, alpha0: T) -> T {
    (T::PI() / weights.q).powf(T::val(1.5)) / alpha0
}

/// Post-collision velocities of the hard-sphere transform.
pub fn post_collision_velocities<T: Real>(
    v: Vec3<T>,
    w: Vec3<T>,
    omega: Vec3<T>,
) -> Result<(Vec3<T>, Vec3<T>), CollisionError> {
    let tol = T::val(1e-12);
    if (omega.norm() - T::one()).abs() > tol {
        return Err(CollisionError::DomainError(format!(
            "omega is not a unit vector (|omega| = {})",
            omega.norm().to_f64_lossy()
        )));
    }
    let c = (v - w).dot(omega);
    if c < -tol {
        return Err(CollisionError::DomainError(format!(
            "hemisphere condition violated ((v-w).omega = {})",
            c.to_f64_lossy()
        )));
    }
    Ok((v - omega.scale(c), w + omega.scale(c)))
}

/// Splits u into its component along omega and the orthogonal remainder.
pub fn decompose_u<T: Real>(u: Vec3<T>, omega: Vec3<T>) -> (Vec3<T>, Vec3<T>) {
    let u_par = omega.scale(u.dot(omega));
    (u_par, u - u_par)
}

/// rho(t, x) = int f(t, x, v) dv over the truncated velocity cube.
pub fn density<T: Real>(
    f: &(impl PhaseFunction<T> + ?Sized),
    t: T,
    x: Vec3<T>,
    scheme: &QuadratureScheme<T>,
) -> T {
    integrate_velocity(|v| f.eval(t, x, v), scheme).value
}

/// Lazily filled density table on the (time knot, position node) grid of a
/// distribution field, interpolated at query points. Fill is idempotent, so
/// concurrent readers agree.
pub struct DensityGrid<'a, T: Real> {
    field: &'a DistributionField<T>,
    scheme: &'a QuadratureScheme<T>,
    cache: DashMap<usize, T>,
}

impl<'a, T: Real> DensityGrid<'a, T> {
    pub fn new(field: &'a DistributionField<T>, scheme: &'a QuadratureScheme<T>) -> Self {
        DensityGrid {
            field,
            scheme,
            cache: DashMap::new(),
        }
    }

    fn node_density(&self, k: usize, xf: usize) -> T {
        let n_x = self.field.spec().n_x;
        let key = k * n_x.pow(3) + xf;
        if let Some(v) = self.cache.get(&key) {
            return *v;
        }
        let t = self.field.t_knots()[k];
        let x = Vec3::new(
            self.field.x_axis()[xf / (n_x * n_x)],
            self.field.x_axis()[(xf / n_x) % n_x],
            self.field.x_axis()[xf % n_x],
        );
        let value = density(self.field, t, x, self.scheme);
        *self.cache.entry(key).or_insert(value)
    }

    /// Interpolated density; zero outside the position box.
    pub fn rho(&self, t: T, x: Vec3<T>) -> T {
        let spec = *self.field.spec();
        let n_x = spec.n_x;
        let lo = -spec.x_max;
        let step = (spec.x_max + spec.x_max) / T::val((n_x - 1) as f64);
        let mut idx = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for axis in 0..3 {
            if x[axis] < lo || x[axis] > spec.x_max {
                return T::zero();
            }
            let u = (x[axis] - lo) / step;
            let mut i = u.floor().to_f64_lossy() as usize;
            if i >= n_x - 1 {
                i = n_x - 2;
            }
            idx[axis] = i;
            frac[axis] = (u - T::val(i as f64)).max(T::zero()).min(T::one());
        }
        let tc = t.max(T::zero()).min(spec.t_max);
        let tstep = spec.t_max / T::val((spec.n_t - 1) as f64);
        let ut = tc / tstep;
        let mut kt = ut.floor().to_f64_lossy() as usize;
        if kt >= spec.n_t - 1 {
            kt = spec.n_t - 2;
        }
        let ft = (ut - T::val(kt as f64)).max(T::zero()).min(T::one());
        let mut acc = T::zero();
        for (dk, wt) in [(0usize, T::one() - ft), (1, ft)] {
            if wt == T::zero() {
                continue;
            }
            for cx in 0..8usize {
                let mut w = wt;
                let mut xf = 0usize;
                for axis in 0..3 {
                    let bit = (cx >> axis) & 1;
                    w = w * if bit == 1 {
                        frac[axis]
                    } else {
                        T::one() - frac[axis]
                    };
                    xf = xf * n_x + idx[axis] + bit;
                }
                if w == T::zero() {
                    continue;
                }
                acc += w * self.node_density(kt + dk, xf);
            }
        }
        acc
    }
}

/// Where the gain/loss evaluation obtains densities for the factor models.
pub enum DensitySource<'a, T: Real> {
    /// Factors never read the density.
    None,
    /// Integrate the distribution at each query point.
    Direct,
    /// Memoized grid-node table (the solver path).
    Grid(&'a DensityGrid<'a, T>),
}

/// Out-of-box stencil handling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StencilPolicy {
    /// Vacuum far field: the distribution is zero beyond the box.
    #[default]
    ZeroOutside,
    /// Displaced stencil points outside the box are an error.
    Strict,
}

/// Gain/loss evaluation bound to one distribution, factor pair and scheme.
pub struct CollisionOp<'a, T: Real, F: PhaseFunction<T> + ?Sized> {
    pub f: &'a F,
    pub params: CollisionParams<T>,
    pub factor_plus: &'a CollisionFactorModel<T>,
    pub factor_minus: &'a CollisionFactorModel<T>,
    pub scheme: &'a QuadratureScheme<T>,
    pub density: DensitySource<'a, T>,
    pub stencil: StencilPolicy,
    /// Evaluate factors at the contact points x -/+ a w / 2 instead of x.
    pub factor_at_contact: bool,
    u_nodes: Vec<(Vec3<T>, T)>,
    hemi: HemiRule<T>,
}

/// Reusable workspace for the grid fast path.
pub struct CollisionScratch<T> {
    slice_a: Vec<T>,
    slices_b: Vec<T>,
}

impl<T: Real> CollisionScratch<T> {
    pub fn new() -> Self {
        CollisionScratch {
            slice_a: Vec::new(),
            slices_b: Vec::new(),
        }
    }
}

impl<T: Real> Default for CollisionScratch<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real, F: PhaseFunction<T> + ?Sized> CollisionOp<'a, T, F> {
    pub fn new(
        f: &'a F,
        params: CollisionParams<T>,
        factor_plus: &'a CollisionFactorModel<T>,
        factor_minus: &'a CollisionFactorModel<T>,
        scheme: &'a QuadratureScheme<T>,
        density: DensitySource<'a, T>,
        stencil: StencilPolicy,
        factor_at_contact: bool,
    ) -> Self {
        let u_nodes = match scheme.velocity {
            VelocityRule::Gauss {
                nodes_per_axis,
                u_max,
            } => {
                let (xs, ws) = gauss_legendre_on(nodes_per_axis, -u_max, u_max);
                let mut nodes = Vec::with_capacity(xs.len().pow(3));
                for (i, &xi) in xs.iter().enumerate() {
                    for (j, &xj) in xs.iter().enumerate() {
                        for (k, &xk) in xs.iter().enumerate() {
                            nodes.push((Vec3::new(xi, xj, xk), ws[i] * ws[j] * ws[k]));
                        }
                    }
                }
                nodes
            }
            VelocityRule::MonteCarlo { .. } => Vec::new(),
        };
        let hemi = match scheme.hemisphere {
            HemisphereRule::AlignedProduct { polar, azimuth } => HemiRule::aligned(polar, azimuth),
            HemisphereRule::FixedSphere { polar, azimuth } => {
                HemiRule::full_sphere(polar, azimuth)
            }
            HemisphereRule::MonteCarlo { .. } => HemiRule::aligned(1, 1),
        };
        CollisionOp {
            f,
            params,
            factor_plus,
            factor_minus,
            scheme,
            density,
            stencil,
            factor_at_contact,
            u_nodes,
            hemi,
        }
    }

    /// Convenience constructor: density source inferred from the factors.
    pub fn with_default_density(
        f: &'a F,
        params: CollisionParams<T>,
        factor_plus: &'a CollisionFactorModel<T>,
        factor_minus: &'a CollisionFactorModel<T>,
        scheme: &'a QuadratureScheme<T>,
    ) -> Self {
        let density = if factor_plus.needs_density() || factor_minus.needs_density() {
            DensitySource::Direct
        } else {
            DensitySource::None
        };
        Self::new(
            f,
            params,
            factor_plus,
            factor_minus,
            scheme,
            density,
            StencilPolicy::ZeroOutside,
            false,
        )
    }

    fn rho(&self, t: T, x: Vec3<T>) -> T {
        match &self.density {
            DensitySource::None => T::zero(),
            DensitySource::Direct => density(self.f, t, x, self.scheme),
            DensitySource::Grid(grid) => grid.rho(t, x),
        }
    }

    fn factor_at(
        &self,
        model: &CollisionFactorModel<T>,
        t: T,
        x: Vec3<T>,
        shift: Vec3<T>,
    ) -> Result<T, CollisionError> {
        if !model.needs_density() {
            return evaluate_factor(model, T::zero());
        }
        let point = if self.factor_at_contact { x + shift } else { x };
        evaluate_factor(model, self.rho(t, point))
    }

    fn check_strict(&self, pos: Vec3<T>) -> Result<(), CollisionError> {
        if self.stencil == StencilPolicy::Strict {
            if let Some(grid) = self.f.as_grid() {
                let m = grid.spec().x_max;
                if pos[0].abs() > m || pos[1].abs() > m || pos[2].abs() > m {
                    return Err(CollisionError::OutOfDomain {
                        point: pos.to_f64(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Q+ (gain) estimate at (t, x, v).
    pub fn gain(&self, t: T, x: Vec3<T>, v: Vec3<T>) -> Result<EstimateWithError<T>, CollisionError> {
        let mut scratch = CollisionScratch::new();
        Ok(self.gain_loss(t, x, v, &mut scratch)?.0)
    }

    /// Q- (loss) estimate at (t, x, v).
    pub fn loss(&self, t: T, x: Vec3<T>, v: Vec3<T>) -> Result<EstimateWithError<T>, CollisionError> {
        let mut scratch = CollisionScratch::new();
        Ok(self.gain_loss(t, x, v, &mut scratch)?.1)
    }

    /// Q(f) = gain - loss at (t, x, v).
    pub fn q(&self, t: T, x: Vec3<T>, v: Vec3<T>, scratch: &mut CollisionScratch<T>) -> Result<T, CollisionError> {
        let (g, l) = self.gain_loss(t, x, v, scratch)?;
        Ok(g.value - l.value)
    }

    /// Q(f)#(s; t, x, v): gain - loss at the flowed point.
    pub fn along_characteristic(
        &self,
        field: &ForceFieldModel<T>,
        s: T,
        base: &PhaseState<T>,
        scratch: &mut CollisionScratch<T>,
    ) -> Result<T, CollisionError> {
        let moved = field.flow(s, base)?;
        self.q(moved.t, moved.x, moved.v, scratch)
    }

    /// Both terms in one pass (they share stencil slices on grid fields).
    pub fn gain_loss(
        &self,
        t: T,
        x: Vec3<T>,
        v: Vec3<T>,
        scratch: &mut CollisionScratch<T>,
    ) -> Result<(EstimateWithError<T>, EstimateWithError<T>), CollisionError> {
        match self.scheme.velocity {
            VelocityRule::MonteCarlo { samples, u_max } => self.mc_path(t, x, v, samples, u_max),
            VelocityRule::Gauss { .. } => match self.scheme.hemisphere {
                HemisphereRule::FixedSphere { .. } => match self.f.as_grid() {
                    Some(grid) => self.fixed_grid_path(grid, t, x, v, scratch),
                    None => self.fixed_direct_path(t, x, v),
                },
                HemisphereRule::AlignedProduct { .. } => self.aligned_path(t, x, v),
                HemisphereRule::MonteCarlo { samples } => self.aligned_mc_hemi_path(t, x, v, samples),
            },
        }
    }

    /// Gain/loss integrands at one (u, w) pair, by direct field evaluation.
    #[inline]
    fn integrands(
        &self,
        t: T,
        x: Vec3<T>,
        v: Vec3<T>,
        u: Vec3<T>,
        w: Vec3<T>,
        f_at_v: T,
        fp: T,
        fm: T,
    ) -> (T, T) {
        let c = u.dot(w);
        if c <= T::zero() {
            return (T::zero(), T::zero());
        }
        let a = self.params.a;
        let u_par = w.scale(c);
        let u_perp = u - u_par;
        let gain = fp
            * self.f.eval(t, x, v - u_par)
            * self.f.eval(t, x - w.scale(a), v - u_perp)
            * c;
        let loss = fm * f_at_v * self.f.eval(t, x + w.scale(a), v - u) * c;
        (gain, loss)
    }

    fn factors_for_direction(
        &self,
        t: T,
        x: Vec3<T>,
        w: Vec3<T>,
    ) -> Result<(T, T), CollisionError> {
        let half_a = self.params.a * T::val(0.5);
        let fp = self.factor_at(self.factor_plus, t, x, -w.scale(half_a))?;
        let fm = self.factor_at(self.factor_minus, t, x, w.scale(half_a))?;
        Ok((fp, fm))
    }

    fn aligned_path(
        &self,
        t: T,
        x: Vec3<T>,
        v: Vec3<T>,
    ) -> Result<(EstimateWithError<T>, EstimateWithError<T>), CollisionError> {
        let f_at_v = self.f.eval(t, x, v);
        let mut gain = T::zero();
        let mut loss = T::zero();
        let (fp0, fm0) = if self.factor_at_contact {
            (T::zero(), T::zero())
        } else {
            self.factors_for_direction(t, x, Vec3::new(T::zero(), T::zero(), T::one()))?
        };
        for &(u, wu) in &self.u_nodes {
            if u.norm() < T::val(1e-12) {
                continue;
            }
            let (e1, e2, n) = u.orthonormal_frame();
            for (w, ww) in self.hemi.nodes_in_frame(e1, e2, n) {
                self.check_strict(x - w.scale(self.params.a))?;
                self.check_strict(x + w.scale(self.params.a))?;
                let (fp, fm) = if self.factor_at_contact {
                    self.factors_for_direction(t, x, w)?
                } else {
                    (fp0, fm0)
                };
                let (g, l) = self.integrands(t, x, v, u, w, f_at_v, fp, fm);
                gain += wu * ww * g;
                loss += wu * ww * l;
            }
        }
        Ok((
            EstimateWithError::exact(gain),
            EstimateWithError::exact(loss),
        ))
    }

    fn aligned_mc_hemi_path(
        &self,
        t: T,
        x: Vec3<T>,
        v: Vec3<T>,
        samples: usize,
    ) -> Result<(EstimateWithError<T>, EstimateWithError<T>), CollisionError> {
        let f_at_v = self.f.eval(t, x, v);
        let mut gain = T::zero();
        let mut loss = T::zero();
        let two_pi = T::val(2.0) * T::PI();
        for (iu, &(u, wu)) in self.u_nodes.iter().enumerate() {
            if u.norm() < T::val(1e-12) {
                continue;
            }
            let (e1, e2, n) = u.orthonormal_frame();
            let mut g_acc = T::zero();
            let mut l_acc = T::zero();
            for i in 0..samples {
                let mut rng =
                    crate::quadrature::sample_rng(self.scheme.seed, (iu * samples + i) as u64);
                let w = sample_hemisphere(&mut rng, e1, e2, n);
                let (fp, fm) = self.factors_for_direction(t, x, w)?;
                let (g, l) = self.integrands(t, x, v, u, w, f_at_v, fp, fm);
                g_acc += g;
                l_acc += l;
            }
            let nf = T::val(samples as f64);
            gain += wu * two_pi * g_acc / nf;
            loss += wu * two_pi * l_acc / nf;
        }
        Ok((
            EstimateWithError::exact(gain),
            EstimateWithError::exact(loss),
        ))
    }

    fn mc_path(
        &self,
        t: T,
        x: Vec3<T>,
        v: Vec3<T>,
        samples: usize,
        u_max: T,
    ) -> Result<(EstimateWithError<T>, EstimateWithError<T>), CollisionError> {
        let f_at_v = self.f.eval(t, x, v);
        let measure = cube_measure(u_max) * T::val(2.0) * T::PI();
        // Factor lookups may fail; stash the first error.
        let eval_pair = |rng: &mut rand_chacha::ChaCha8Rng,
                         err: &mut Option<CollisionError>|
         -> (T, T) {
            let u = sample_cube(rng, u_max);
            if u.norm() < T::val(1e-12) {
                return (T::zero(), T::zero());
            }
            let (e1, e2, n) = u.orthonormal_frame();
            let w = sample_hemisphere(rng, e1, e2, n);
            match self.factors_for_direction(t, x, w) {
                Ok((fp, fm)) => self.integrands(t, x, v, u, w, f_at_v, fp, fm),
                Err(e) => {
                    if err.is_none() {
                        *err = Some(e);
                    }
                    (T::zero(), T::zero())
                }
            }
        };
        let mut err_gain: Option<CollisionError> = None;
        let gain = mc_integrate(
            |rng| eval_pair(rng, &mut err_gain).0,
            measure,
            samples,
            self.scheme.seed,
        );
        if let Some(e) = err_gain {
            return Err(e);
        }
        let mut err_loss: Option<CollisionError> = None;
        let loss = mc_integrate(
            |rng| eval_pair(rng, &mut err_loss).1,
            measure,
            samples,
            self.scheme.seed,
        );
        if let Some(e) = err_loss {
            return Err(e);
        }
        Ok((gain, loss))
    }

    /// Direct evaluation with the fixed full-sphere rule (closure fields).
    fn fixed_direct_path(
        &self,
        t: T,
        x: Vec3<T>,
        v: Vec3<T>,
    ) -> Result<(EstimateWithError<T>, EstimateWithError<T>), CollisionError> {
        let f_at_v = self.f.eval(t, x, v);
        let dirs: Vec<(Vec3<T>, T)> = self.hemi.nodes_lab().collect();
        let mut gain = T::zero();
        let mut loss = T::zero();
        let mut factors = Vec::with_capacity(dirs.len());
        for &(w, _) in &dirs {
            self.check_strict(x - w.scale(self.params.a))?;
            factors.push(self.factors_for_direction(t, x, w)?);
        }
        for &(u, wu) in &self.u_nodes {
            for (i, &(w, ww)) in dirs.iter().enumerate() {
                let (fp, fm) = factors[i];
                let (g, l) = self.integrands(t, x, v, u, w, f_at_v, fp, fm);
                gain += wu * ww * g;
                loss += wu * ww * l;
            }
        }
        Ok((
            EstimateWithError::exact(gain),
            EstimateWithError::exact(loss),
        ))
    }

    /// Stencil-sharing fast path for grid fields with the fixed-sphere rule.
    /// Produces exactly the sums of [`fixed_direct_path`]: the position/time
    /// interpolation is factored into per-direction velocity slices.
    fn fixed_grid_path(
        &self,
        grid: &DistributionField<T>,
        t: T,
        x: Vec3<T>,
        v: Vec3<T>,
        scratch: &mut CollisionScratch<T>,
    ) -> Result<(EstimateWithError<T>, EstimateWithError<T>), CollisionError> {
        let nv3 = grid.spec().n_v.pow(3);
        let n_dirs = self.hemi.nodes.len();
        scratch.slice_a.resize(nv3, T::zero());
        scratch.slices_b.resize(n_dirs * nv3, T::zero());
        let zero = EstimateWithError::exact(T::zero());

        if self.stencil == StencilPolicy::Strict {
            let m = grid.spec().x_max;
            for &(c, sc, ss, _) in &self.hemi.nodes {
                let w = Vec3::new(sc, ss, c);
                let pos = x - w.scale(self.params.a);
                if pos[0].abs() > m || pos[1].abs() > m || pos[2].abs() > m {
                    return Err(CollisionError::OutOfDomain { point: pos.to_f64() });
                }
            }
        }
        // x outside the box: f(t, x, .) vanishes, and both terms carry a
        // factor supported there.
        if !grid.velocity_slice(t, x, &mut scratch.slice_a) {
            return Ok((zero, zero));
        }
        let f_at_v = grid.eval_slice(&scratch.slice_a, v);
        let dirs: Vec<Vec3<T>> = self
            .hemi
            .nodes
            .iter()
            .map(|&(c, sc, ss, _)| Vec3::new(sc, ss, c))
            .collect();
        let mut factors = Vec::with_capacity(n_dirs);
        for (i, w) in dirs.iter().enumerate() {
            let slot = &mut scratch.slices_b[i * nv3..(i + 1) * nv3];
            grid.velocity_slice(t, x - w.scale(self.params.a), slot);
            factors.push(self.factors_for_direction(t, x, *w)?);
        }
        let mut gain = T::zero();
        let mut loss = T::zero();
        for &(u, wu) in &self.u_nodes {
            let mut g_u = T::zero();
            let mut l_u = T::zero();
            for (i, w) in dirs.iter().enumerate() {
                let c = u.dot(*w);
                if c <= T::zero() {
                    continue;
                }
                let ww = self.hemi.nodes[i].3;
                let (fp, fm) = factors[i];
                let u_par = w.scale(c);
                let slice_b = &scratch.slices_b[i * nv3..(i + 1) * nv3];
                let g = grid.eval_slice(&scratch.slice_a, v - u_par)
                    * grid.eval_slice(slice_b, v - (u - u_par));
                // x + a w is x - a * (-w): the antipodal direction's slice.
                let j = self.hemi.antipode[i];
                let slice_c = &scratch.slices_b[j * nv3..(j + 1) * nv3];
                let l = grid.eval_slice(slice_c, v - u);
                g_u += ww * c * fp * g;
                l_u += ww * c * fm * l;
            }
            gain += wu * g_u;
            loss += wu * f_at_v * l_u;
        }
        Ok((
            EstimateWithError::exact(gain),
            EstimateWithError::exact(loss),
        ))
    }
}

/// One-shot gain evaluation (spec operation signature).
pub fn gain<T: Real>(
    f: &(impl PhaseFunction<T> + ?Sized),
    model_plus: &CollisionFactorModel<T>,
    t: T,
    x: Vec3<T>,
    v: Vec3<T>,
    params: &CollisionParams<T>,
    scheme: &QuadratureScheme<T>,
) -> Result<T, CollisionError> {
    let unused = CollisionFactorModel::Constant(T::zero());
    let op = CollisionOp::with_default_density(f, *params, model_plus, &unused, scheme);
    Ok(op.gain(t, x, v)?.value)
}

/// One-shot loss evaluation (spec operation signature).
pub fn loss<T: Real>(
    f: &(impl PhaseFunction<T> + ?Sized),
    model_minus: &CollisionFactorModel<T>,
    t: T,
    x: Vec3<T>,
    v: Vec3<T>,
    params: &CollisionParams<T>,
    scheme: &QuadratureScheme<T>,
) -> Result<T, CollisionError> {
    let unused = CollisionFactorModel::Constant(T::zero());
    let op = CollisionOp::with_default_density(f, *params, &unused, model_minus, scheme);
    Ok(op.loss(t, x, v)?.value)
}

/// Q(f)#(s; t, x, v) with both factor models (spec operation signature).
#[allow(clippy::too_many_arguments)]
pub fn collision_along_characteristic<T: Real>(
    f: &(impl PhaseFunction<T> + ?Sized),
    model_plus: &CollisionFactorModel<T>,
    model_minus: &CollisionFactorModel<T>,
    s: T,
    base: &PhaseState<T>,
    field: &ForceFieldModel<T>,
    params: &CollisionParams<T>,
    scheme: &QuadratureScheme<T>,
) -> Result<T, CollisionError> {
    let op = CollisionOp::with_default_density(f, *params, model_plus, model_minus, scheme);
    let mut scratch = CollisionScratch::new();
    op.along_characteristic(field, s, base, &mut scratch)
}

/// One row of the Boltzmann-limit tabulation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoltzmannLimitRow {
    pub a: f64,
    pub difference: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoltzmannLimitReport {
    pub rows: Vec<BoltzmannLimitRow>,
    /// Least-squares slope of ln(difference) against ln(a).
    pub fitted_order: f64,
}

/// Tabulates sup |Q_a(f) - Q_0(f)| over the evaluation points for each
/// diameter in `a_values` (zero entries compare the operator with itself)
/// and fits the empirical order in a.
pub fn boltzmann_limit_table<T: Real>(
    f: &(impl PhaseFunction<T> + ?Sized),
    model_plus: &CollisionFactorModel<T>,
    model_minus: &CollisionFactorModel<T>,
    eval_points: &[PhaseState<T>],
    mass: T,
    a_values: &[T],
    scheme: &QuadratureScheme<T>,
) -> Result<BoltzmannLimitReport, CollisionError> {
    let q_at = |a: T, p: &PhaseState<T>| -> Result<T, CollisionError> {
        let params = CollisionParams::boltzmann_limit(a, mass);
        let op = CollisionOp::with_default_density(f, params, model_plus, model_minus, scheme);
        let mut scratch = CollisionScratch::new();
        op.q(p.t, p.x, p.v, &mut scratch)
    };
    let mut rows = Vec::with_capacity(a_values.len());
    for &a in a_values {
        let mut diff = 0.0f64;
        for p in eval_points {
            let qa = q_at(a, p)?;
            let q0 = q_at(T::zero(), p)?;
            diff = diff.max((qa - q0).abs().to_f64_lossy());
        }
        rows.push(BoltzmannLimitRow {
            a: a.to_f64_lossy(),
            difference: diff,
        });
    }
    Ok(BoltzmannLimitReport {
        fitted_order: fitted_order(&rows),
        rows,
    })
}

/// Least-squares slope of ln(difference) on ln(a) over positive rows.
pub fn fitted_order(rows: &[BoltzmannLimitRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.a > 0.0 && r.difference > 0.0)
        .map(|r| (r.a.ln(), r.difference.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::sample_rng;
    use crate::weighted_space::{weight_h, weight_m, GridSpec, PhaseFn};
    use rand::Rng;

    fn unit(v: Vec3<f64>) -> Vec3<f64> {
        v.normalized()
    }

    #[test]
    fn post_collision_examples() {
        let (v1, w1) = post_collision_velocities(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::zero(),
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert_eq!(v1, Vec3::zero());
        assert_eq!(w1, Vec3::new(1.0, 0.0, 0.0));

        let v = Vec3::new(0.4, -0.2, 0.9);
        let (v2, w2) = post_collision_velocities(v, v, unit(Vec3::new(1.0, 2.0, 0.0))).unwrap();
        assert_eq!(v2, v);
        assert_eq!(w2, v);

        let s = 1.0 / 2.0f64.sqrt();
        let (v3, w3) = post_collision_velocities(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::zero(),
            Vec3::new(s, s, 0.0),
        )
        .unwrap();
        assert!((v3 - Vec3::new(0.5, -0.5, 0.0)).norm() < 1e-15);
        assert!((w3 - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
        // Momentum and energy conserved.
        assert!((v3 + w3 - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((v3.norm_sq() + w3.norm_sq() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn post_collision_rejects_bad_inputs() {
        let r = post_collision_velocities(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::zero(),
            Vec3::new(2.0, 0.0, 0.0),
        );
        assert!(matches!(r, Err(CollisionError::DomainError(_))));
        let r = post_collision_velocities(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::zero(),
            Vec3::new(-1.0, 0.0, 0.0),
        );
        assert!(matches!(r, Err(CollisionError::DomainError(_))));
    }

    #[test]
    fn conservation_and_involution_over_random_triples() {
        let mut rng = sample_rng(77, 0);
        for _ in 0..20_000 {
            let v: Vec3<f64> = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let w = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let mut omega = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if omega.norm() < 1e-6 {
                continue;
            }
            omega = omega.normalized();
            if (v - w).dot(omega) < 0.0 {
                omega = -omega;
            }
            let (vp, wp) = post_collision_velocities(v, w, omega).unwrap();
            assert!((vp + wp - v - w).norm() <= 1e-12);
            assert!(
                (vp.norm_sq() + wp.norm_sq() - v.norm_sq() - w.norm_sq()).abs() <= 1e-12
            );
            // Involution with the reflected direction.
            let (vb, wb) = post_collision_velocities(vp, wp, -omega).unwrap();
            assert!((vb - v).norm() <= 1e-12);
            assert!((wb - w).norm() <= 1e-12);
        }
    }

    #[test]
    fn decompose_examples() {
        let (par, perp) = decompose_u(Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(par, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(perp, Vec3::zero());
        let (par, perp) = decompose_u(Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(par, Vec3::zero());
        assert_eq!(perp, Vec3::new(0.0, 1.0, 0.0));
        let (par, perp) = decompose_u(Vec3::new(1.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(par, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(perp, Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(par.dot(perp), 0.0);
    }

    fn scheme(nodes: usize, u_max: f64) -> QuadratureScheme<f64> {
        QuadratureScheme {
            velocity: VelocityRule::Gauss {
                nodes_per_axis: nodes,
                u_max,
            },
            hemisphere: HemisphereRule::AlignedProduct {
                polar: 12,
                azimuth: 24,
            },
            time_nodes: 8,
            seed: 5,
        }
    }

    #[test]
    fn density_examples() {
        let s = scheme(32, 6.0);
        let zero = PhaseFn(|_: f64, _: Vec3<f64>, _: Vec3<f64>| 0.0);
        assert_eq!(density(&zero, 0.0, Vec3::zero(), &s), 0.0);
        let gauss = PhaseFn(|_: f64, _: Vec3<f64>, v: Vec3<f64>| (-v.norm_sq()).exp());
        let got = density(&gauss, 0.0, Vec3::zero(), &s);
        assert!((got - std::f64::consts::PI.powf(1.5)).abs() < 1e-6);
        // Separable c h(x) m(v) integrates to c h(x) (pi/q)^{3/2}.
        let c = 0.4;
        let q = 2.0;
        let sep = PhaseFn(move |_: f64, x: Vec3<f64>, v: Vec3<f64>| {
            c * weight_h(x, 1.0) * weight_m(v, q)
        });
        let x = Vec3::new(0.5, 0.0, -0.5);
        let got = density(&sep, 0.2, x, &s);
        let want = c * weight_h(x, 1.0) * (std::f64::consts::PI / q).powf(1.5);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn factor_examples() {
        let y = CollisionFactorModel::standard_y_with_b(1.0f64);
        assert_eq!(evaluate_factor(&y, 0.0).unwrap(), 1.0);
        assert!((evaluate_factor(&y, 0.1).unwrap() - 1.078125).abs() < 1e-15);
        let pole = evaluate_factor(&y, 0.5);
        assert!(matches!(pole, Err(CollisionError::PoleProximity { .. })));
        let empty = CollisionFactorModel::virial_truncated(0.3, vec![]);
        assert_eq!(evaluate_factor(&empty, 7.0).unwrap(), 1.0);
        assert!(!empty.needs_density());
        let b = CollisionParams::new(0.2, 2.0);
        let via_params = CollisionFactorModel::standard_y(&b);
        if let CollisionFactorModel::StandardYApprox { b } = via_params {
            let want = 2.0 * std::f64::consts::PI * 0.2f64.powi(3) / 6.0;
            assert!((b - want).abs() < 1e-15);
        } else {
            panic!("wrong kind");
        }
    }

    #[test]
    fn lipschitz_examples() {
        let w = WeightParams::new(1.0, 1.0);
        let c = CollisionFactorModel::constant(3.0);
        assert_eq!(lipschitz_estimate(&c, 0.5, &w, 1.0, 500, 1).unwrap(), 0.0);
        // Linear virial model: exact slope 2 pi a^3 / 3.
        let a = 0.5f64;
        let lin = CollisionFactorModel::virial_truncated(a, vec![1.0]);
        let slope = 2.0 * std::f64::consts::PI * a.powi(3) / 3.0;
        let est = lipschitz_estimate(&lin, 0.2, &w, 1.0, 500, 2).unwrap();
        assert!((est - slope).abs() < 1e-12, "{est} vs {slope}");
        // Standard Y far from the pole: bounded by the analytic derivative
        // sup (5b/8)/(1-2b rho_max)^2 and at least the slope at zero (5b/8).
        let b = 0.05;
        let y = CollisionFactorModel::standard_y_with_b(b);
        let radius = 0.2;
        let rho_max = radius * std::f64::consts::PI.powf(1.5);
        assert!(2.0 * b * rho_max <= 0.5);
        let est = lipschitz_estimate(&y, radius, &w, 1.0, 4000, 3).unwrap();
        let sup = (5.0 * b / 8.0) / (1.0 - 2.0 * b * rho_max).powi(2);
        assert!(est <= sup + 1e-12, "{est} vs {sup}");
        assert!(est >= 5.0 * b / 8.0 - 1e-3);
    }

    fn gaussian_field() -> PhaseFn<impl Fn(f64, Vec3<f64>, Vec3<f64>) -> f64 + Sync> {
        PhaseFn(|_: f64, x: Vec3<f64>, v: Vec3<f64>| weight_h(x, 1.0) * weight_m(v, 1.0))
    }

    #[test]
    fn gain_and_loss_trivial_zeroes() {
        let s = scheme(8, 4.0);
        let params = CollisionParams::new(0.1, 1.0);
        let zero_f = PhaseFn(|_: f64, _: Vec3<f64>, _: Vec3<f64>| 0.0);
        let one = CollisionFactorModel::constant(1.0);
        let zero_factor = CollisionFactorModel::constant(0.0);
        assert_eq!(
            gain(&zero_f, &one, 0.0, Vec3::zero(), Vec3::zero(), &params, &s).unwrap(),
            0.0
        );
        let f = gaussian_field();
        assert_eq!(
            gain(&f, &zero_factor, 0.0, Vec3::zero(), Vec3::zero(), &params, &s).unwrap(),
            0.0
        );
        assert_eq!(
            loss(&zero_f, &one, 0.0, Vec3::zero(), Vec3::zero(), &params, &s).unwrap(),
            0.0
        );
        // Loss vanishes where f vanishes, whatever the integral is.
        let bump = PhaseFn(|_: f64, x: Vec3<f64>, v: Vec3<f64>| {
            if x[0] > 1.0 {
                weight_m(v, 1.0)
            } else {
                0.0
            }
        });
        let l = loss(&bump, &one, 0.0, Vec3::zero(), Vec3::zero(), &params, &s).unwrap();
        assert_eq!(l, 0.0);
    }

    /// Monte Carlo oracle for the 5-D gain integral, written directly from
    /// the displaced-stencil formula, independent of the operator code.
    fn mc_gain_oracle(
        f: &dyn Fn(Vec3<f64>, Vec3<f64>) -> f64,
        a: f64,
        x: Vec3<f64>,
        v: Vec3<f64>,
        u_max: f64,
        n: usize,
        seed: u64,
    ) -> EstimateWithError<f64> {
        let measure = (2.0 * u_max).powi(3) * 2.0 * std::f64::consts::PI;
        mc_integrate(
            |rng| {
                let u = sample_cube(rng, u_max);
                if u.norm() < 1e-12 {
                    return 0.0;
                }
                let (e1, e2, nn) = u.orthonormal_frame();
                let w = sample_hemisphere(rng, e1, e2, nn);
                let c = u.dot(w);
                if c <= 0.0 {
                    return 0.0;
                }
                let u_par = w.scale(c);
                f(x, v - u_par) * f(x - w.scale(a), v - (u - u_par)) * c
            },
            measure,
            n,
            seed,
        )
    }

    fn mc_loss_oracle(
        f: &dyn Fn(Vec3<f64>, Vec3<f64>) -> f64,
        a: f64,
        x: Vec3<f64>,
        v: Vec3<f64>,
        u_max: f64,
        n: usize,
        seed: u64,
    ) -> EstimateWithError<f64> {
        let measure = (2.0 * u_max).powi(3) * 2.0 * std::f64::consts::PI;
        let f_at = f(x, v);
        mc_integrate(
            |rng| {
                let u = sample_cube(rng, u_max);
                if u.norm() < 1e-12 {
                    return 0.0;
                }
                let (e1, e2, nn) = u.orthonormal_frame();
                let w = sample_hemisphere(rng, e1, e2, nn);
                let c = u.dot(w);
                if c <= 0.0 {
                    return 0.0;
                }
                f_at * f(x + w.scale(a), v - u) * c
            },
            measure,
            n,
            seed,
        )
    }

    #[test]
    fn gain_matches_independent_mc_oracle() {
        let s = scheme(16, 6.0);
        let params = CollisionParams::new(0.1, 1.0);
        let one = CollisionFactorModel::constant(1.0);
        let f = gaussian_field();
        let got = gain(&f, &one, 0.0, Vec3::zero(), Vec3::zero(), &params, &s).unwrap();
        let oracle = mc_gain_oracle(
            &|x, v| weight_h(x, 1.0) * weight_m(v, 1.0),
            0.1,
            Vec3::zero(),
            Vec3::zero(),
            6.0,
            400_000,
            99,
        );
        assert!(got > 0.0);
        assert!(
            (got - oracle.value).abs() < 3.0 * oracle.stderr,
            "{got} vs {} +- {}",
            oracle.value,
            oracle.stderr
        );
    }

    #[test]
    fn loss_matches_independent_mc_oracle() {
        let s = scheme(16, 6.0);
        let params = CollisionParams::new(0.1, 1.0);
        let one = CollisionFactorModel::constant(1.0);
        let f = gaussian_field();
        let x = Vec3::new(0.3, 0.0, 0.0);
        let v = Vec3::new(0.2, -0.1, 0.0);
        let got = loss(&f, &one, 0.0, x, v, &params, &s).unwrap();
        let oracle = mc_loss_oracle(
            &|x, v| weight_h(x, 1.0) * weight_m(v, 1.0),
            0.1,
            x,
            v,
            6.0,
            400_000,
            100,
        );
        assert!(got > 0.0);
        assert!(
            (got - oracle.value).abs() < 3.0 * oracle.stderr,
            "{got} vs {} +- {}",
            oracle.value,
            oracle.stderr
        );
    }

    #[test]
    fn mc_rule_agrees_with_grid_rule() {
        let det = scheme(16, 6.0);
        let mc = QuadratureScheme {
            velocity: VelocityRule::MonteCarlo {
                samples: 200_000,
                u_max: 6.0,
            },
            hemisphere: HemisphereRule::MonteCarlo { samples: 1 },
            time_nodes: 8,
            seed: 11,
        };
        let params = CollisionParams::new(0.1, 1.0);
        let one = CollisionFactorModel::constant(1.0);
        let zero_factor = CollisionFactorModel::constant(0.0);
        let f = gaussian_field();
        let op_det =
            CollisionOp::with_default_density(&f, params, &one, &zero_factor, &det);
        let op_mc = CollisionOp::with_default_density(&f, params, &one, &zero_factor, &mc);
        let g_det = op_det.gain(0.0, Vec3::zero(), Vec3::zero()).unwrap();
        let g_mc = op_mc.gain(0.0, Vec3::zero(), Vec3::zero()).unwrap();
        assert!(
            (g_det.value - g_mc.value).abs() < 4.0 * g_mc.stderr,
            "{} vs {} +- {}",
            g_det.value,
            g_mc.value,
            g_mc.stderr
        );
    }

    #[test]
    fn fixed_sphere_paths_agree_with_aligned_on_grid_fields() {
        // The fast slice path, the direct fixed-sphere path and the aligned
        // rule must agree: the first two exactly, the third within the
        // hemisphere-rule discretization difference.
        let weights = WeightParams::new(1.0, 1.0);
        let grid_spec = GridSpec {
            t_max: 1.0,
            n_t: 3,
            x_max: 3.0,
            n_x: 7,
            v_max: 3.0,
            n_v: 7,
        };
        let field = DistributionField::from_fn(grid_spec, |_t, x, v| {
            0.5 * weight_h(x, 1.0) * weight_m(v, 1.0)
        });
        let params = CollisionParams::new(0.1, 1.0);
        let one = CollisionFactorModel::constant(1.0);
        let fixed = QuadratureScheme {
            velocity: VelocityRule::Gauss {
                nodes_per_axis: 8,
                u_max: 3.0,
            },
            hemisphere: HemisphereRule::FixedSphere {
                polar: 16,
                azimuth: 16,
            },
            time_nodes: 4,
            seed: 0,
        };
        let mut aligned = fixed;
        aligned.hemisphere = HemisphereRule::AlignedProduct {
            polar: 16,
            azimuth: 16,
        };
        let t = 0.4;
        let x = Vec3::new(0.2, -0.3, 0.1);
        let v = Vec3::new(0.5, 0.0, -0.2);
        let op_fast = CollisionOp::with_default_density(&field, params, &one, &one, &fixed);
        let mut scratch = CollisionScratch::new();
        let (gf, lf) = op_fast.gain_loss(t, x, v, &mut scratch).unwrap();
        // Direct path: hide the grid behind a closure.
        let fref = &field;
        let closure = PhaseFn(move |t: f64, x: Vec3<f64>, v: Vec3<f64>| fref.eval(t, x, v));
        let op_direct =
            CollisionOp::with_default_density(&closure, params, &one, &one, &fixed);
        let (gd, ld) = op_direct.gain_loss(t, x, v, &mut scratch).unwrap();
        assert!((gf.value - gd.value).abs() <= 1e-12 * gd.value.abs().max(1e-30));
        assert!((lf.value - ld.value).abs() <= 1e-12 * ld.value.abs().max(1e-30));
        let op_aligned =
            CollisionOp::with_default_density(&field, params, &one, &one, &aligned);
        let (ga, la) = op_aligned.gain_loss(t, x, v, &mut scratch).unwrap();
        assert!(
            (gf.value - ga.value).abs() < 0.05 * ga.value.abs().max(1e-12),
            "{} vs {}",
            gf.value,
            ga.value
        );
        assert!(
            (lf.value - la.value).abs() < 0.05 * la.value.abs().max(1e-12),
            "{} vs {}",
            lf.value,
            la.value
        );
    }

    #[test]
    fn along_characteristic_examples() {
        let s = scheme(10, 5.0);
        let params = CollisionParams::new(0.1, 1.0);
        let one = CollisionFactorModel::constant(1.0);
        let f = gaussian_field();
        let field = ForceFieldModel::zero();
        let base = PhaseState::new(0.8, Vec3::new(0.4, 0.0, 0.0), Vec3::new(0.0, 0.3, 0.0));
        // s = t: equals gain - loss at the base point directly.
        let q_here = collision_along_characteristic(
            &f, &one, &one, base.t, &base, &field, &params, &s,
        )
        .unwrap();
        let g = gain(&f, &one, base.t, base.x, base.v, &params, &s).unwrap();
        let l = loss(&f, &one, base.t, base.x, base.v, &params, &s).unwrap();
        assert!((q_here - (g - l)).abs() < 1e-14);
        // Zero force: equals gain - loss at (x + (s - t) v, v).
        let sv = 0.3;
        let q_moved =
            collision_along_characteristic(&f, &one, &one, sv, &base, &field, &params, &s)
                .unwrap();
        let xm = base.x + base.v.scale(sv - base.t);
        let gm = gain(&f, &one, sv, xm, base.v, &params, &s).unwrap();
        let lm = loss(&f, &one, sv, xm, base.v, &params, &s).unwrap();
        assert!((q_moved - (gm - lm)).abs() < 1e-14);
    }

    #[test]
    fn strict_stencil_errors_near_the_box_edge() {
        let grid_spec = GridSpec {
            t_max: 1.0,
            n_t: 2,
            x_max: 1.0,
            n_x: 5,
            v_max: 1.0,
            n_v: 5,
        };
        let field = DistributionField::from_fn(grid_spec, |_t, _x, _v| 1.0);
        let params = CollisionParams::new(0.5, 1.0);
        let one = CollisionFactorModel::constant(1.0);
        let s = QuadratureScheme {
            velocity: VelocityRule::Gauss {
                nodes_per_axis: 2,
                u_max: 1.0,
            },
            hemisphere: HemisphereRule::FixedSphere {
                polar: 2,
                azimuth: 4,
            },
            time_nodes: 2,
            seed: 0,
        };
        let op = CollisionOp::new(
            &field,
            params,
            &one,
            &one,
            &s,
            DensitySource::None,
            StencilPolicy::Strict,
            false,
        );
        // x at the box face: x - a w leaves the box for some direction.
        let r = op.gain(0.0, Vec3::new(1.0, 0.0, 0.0), Vec3::zero());
        assert!(matches!(r, Err(CollisionError::OutOfDomain { .. })), "{r:?}");
        // Default policy treats it as vacuum instead.
        let op2 = CollisionOp::new(
            &field,
            params,
            &one,
            &one,
            &s,
            DensitySource::None,
            StencilPolicy::ZeroOutside,
            false,
        );
        assert!(op2.gain(0.0, Vec3::new(1.0, 0.0, 0.0), Vec3::zero()).is_ok());
    }

    #[test]
    fn density_grid_matches_direct_density() {
        let grid_spec = GridSpec {
            t_max: 1.0,
            n_t: 3,
            x_max: 2.0,
            n_x: 5,
            v_max: 4.0,
            n_v: 9,
        };
        let field = DistributionField::from_fn(grid_spec, |_t, x, v| {
            0.3 * weight_h(x, 1.0) * weight_m(v, 1.0)
        });
        let s = scheme(16, 4.0);
        let cache = DensityGrid::new(&field, &s);
        // At a grid node the interpolation is exact.
        let x_node = Vec3::new(field.x_axis()[1], field.x_axis()[2], field.x_axis()[3]);
        let t_node = field.t_knots()[1];
        let direct = density(&field, t_node, x_node, &s);
        assert!((cache.rho(t_node, x_node) - direct).abs() < 1e-12);
        // Between nodes it is within interpolation error of the direct value.
        let x_mid = Vec3::new(0.4, -0.9, 0.2);
        let direct_mid = density(&field, 0.35, x_mid, &s);
        let interp = cache.rho(0.35, x_mid);
        assert!(
            (interp - direct_mid).abs() < 0.15 * direct_mid.abs().max(1e-12),
            "{interp} vs {direct_mid}"
        );
        // Outside the box the density is zero.
        assert_eq!(cache.rho(0.5, Vec3::new(9.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn factor_at_contact_changes_the_density_argument() {
        // A linear-in-x density makes the +/- a w / 2 shift visible.
        let grid_spec = GridSpec {
            t_max: 1.0,
            n_t: 2,
            x_max: 2.0,
            n_x: 5,
            v_max: 2.0,
            n_v: 5,
        };
        let field = DistributionField::from_fn(grid_spec, |_t, x, v| {
            (1.0 + 0.3 * x[0]) * weight_m(v, 1.0) * 0.05
        });
        let params = CollisionParams::new(0.4, 1.0);
        let y = CollisionFactorModel::standard_y_with_b(0.5);
        let s = QuadratureScheme {
            velocity: VelocityRule::Gauss {
                nodes_per_axis: 6,
                u_max: 2.0,
            },
            hemisphere: HemisphereRule::FixedSphere {
                polar: 4,
                azimuth: 8,
            },
            time_nodes: 2,
            seed: 0,
        };
        let cache = DensityGrid::new(&field, &s);
        let mk = |contact: bool| {
            CollisionOp::new(
                &field,
                params,
                &y,
                &y,
                &s,
                DensitySource::Grid(&cache),
                StencilPolicy::ZeroOutside,
                contact,
            )
        };
        let t = 0.0;
        let x = Vec3::new(0.5, 0.0, 0.0);
        let v = Vec3::new(0.1, 0.0, 0.0);
        let g_center: f64 = mk(false).gain(t, x, v).unwrap().value;
        let g_contact = mk(true).gain(t, x, v).unwrap().value;
        assert!(g_center > 0.0 && g_contact > 0.0);
        assert!(
            (g_center - g_contact).abs() > 1e-9 * g_center,
            "{g_center} vs {g_contact}"
        );
    }

    #[test]
    fn boltzmann_reduction_difference_shrinks_with_a() {
        let s = QuadratureScheme {
            velocity: VelocityRule::Gauss {
                nodes_per_axis: 10,
                u_max: 5.0,
            },
            hemisphere: HemisphereRule::AlignedProduct {
                polar: 8,
                azimuth: 16,
            },
            time_nodes: 2,
            seed: 0,
        };
        let one = CollisionFactorModel::constant(1.0);
        let f = gaussian_field();
        let points = [
            PhaseState::new(0.0, Vec3::new(1.0, 0.3, 0.0), Vec3::new(0.4, -0.2, 0.1)),
            PhaseState::new(0.0, Vec3::new(-0.5, 0.8, 0.2), Vec3::zero()),
        ];
        let report =
            boltzmann_limit_table(&f, &one, &one, &points, 1.0, &[0.0, 0.2, 0.1, 0.05], &s)
                .unwrap();
        assert_eq!(report.rows[0].difference, 0.0);
        let d: Vec<f64> = report.rows[1..].iter().map(|r| r.difference).collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
        assert!(report.fitted_order >= 0.85, "{}", report.fitted_order);
    }
}
