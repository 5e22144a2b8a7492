//! Integration engines for truncated velocity space, hemispheres and time
//! intervals, with deterministic Gauss rules and seeded Monte Carlo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("hemisphere axis is degenerate (|u| = {norm})")]
    DegenerateAxis { norm: f64 },
}

/// An integral estimate; `stderr` is zero for deterministic rules.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EstimateWithError<T> {
    pub value: T,
    pub stderr: T,
    pub samples_used: usize,
}

impl<T: Real> EstimateWithError<T> {
    pub fn exact(value: T) -> Self {
        EstimateWithError {
            value,
            stderr: T::zero(),
            samples_used: 0,
        }
    }
}

/// Rule for integrals over the truncated velocity ball `|u|_inf <= u_max`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum VelocityRule<T> {
    /// Tensor Gauss-Legendre on the cube, `nodes_per_axis` per dimension.
    Gauss { nodes_per_axis: usize, u_max: T },
    MonteCarlo { samples: usize, u_max: T },
}

impl<T: Real> VelocityRule<T> {
    pub fn u_max(&self) -> T {
        match *self {
            VelocityRule::Gauss { u_max, .. } => u_max,
            VelocityRule::MonteCarlo { u_max, .. } => u_max,
        }
    }
}

/// Rule for integrals over the hemisphere `S^2_+(u) = {w : w.u >= 0}`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum HemisphereRule {
    /// Gauss in the polar cosine on [0,1], uniform azimuth, pole at u/|u|.
    AlignedProduct { polar: usize, azimuth: usize },
    /// Fixed full-sphere product rule; the hemisphere restriction is applied
    /// through the positive part of the kernel. The node set does not depend
    /// on u, which lets collision evaluation share position stencils.
    FixedSphere { polar: usize, azimuth: usize },
    MonteCarlo { samples: usize },
}

/// Node/weight sets and truncation radii for every integral the toolkit
/// evaluates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QuadratureScheme<T> {
    pub velocity: VelocityRule<T>,
    pub hemisphere: HemisphereRule,
    /// Gauss-Legendre node count for time integrals.
    pub time_nodes: usize,
    pub seed: u64,
}

impl<T: Real> QuadratureScheme<T> {
    /// Accuracy-first defaults: truncation at 6/sqrt(q) keeps the Gaussian
    /// tail mass below 1e-15.
    pub fn default_for_weights(q: T) -> Self {
        QuadratureScheme {
            velocity: VelocityRule::Gauss {
                nodes_per_axis: 16,
                u_max: T::val(6.0) / q.sqrt(),
            },
            hemisphere: HemisphereRule::AlignedProduct {
                polar: 16,
                azimuth: 32,
            },
            time_nodes: 8,
            seed: 0,
        }
    }
}

/// Counter-based stream: the RNG for sample `idx` is independent of how many
/// samples other workers have drawn, so parallel partitioning cannot change
/// results.
pub fn sample_rng(seed: u64, idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; standard initial guesses.
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    assert!(n >= 1, "node count must be >= 1");
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let nf = T::val(n as f64);
    let half = (n + 1) / 2;
    for i in 0..half {
        let mut x = (T::PI() * (T::val(i as f64) + T::val(0.75))
            / (nf + T::val(0.5)))
        .cos();
        let mut dp = T::one();
        for _ in 0..100 {
            // Legendre P_n(x) and derivative by recurrence.
            let mut p0 = T::one();
            let mut p1 = x;
            for k in 2..=n {
                let kf = T::val(k as f64);
                let p2 = ((T::val(2.0) * kf - T::one()) * x * p1
                    - (kf - T::one()) * p0)
                    / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { T::one() } else { p0 };
            dp = nf * (x * pn - pn1) / (x * x - T::one());
            let dx = pn / dp;
            x = x - dx;
            if dx.abs() <= T::epsilon() * T::val(4.0) {
                break;
            }
        }
        let w = T::val(2.0) / ((T::one() - x * x) * dp * dp);
        nodes[i] = -x;
        weights[i] = w;
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = T::zero();
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on<T: Real>(n: usize, a: T, b: T) -> (Vec<T>, Vec<T>) {
    let (xs, ws) = gauss_legendre::<T>(n);
    let mid = (a + b) * T::val(0.5);
    let hal = (b - a) * T::val(0.5);
    (
        xs.iter().map(|&x| mid + hal * x).collect(),
        ws.iter().map(|&w| w * hal).collect(),
    )
}

/// Approximates the velocity-space integral of `g` over the truncated cube.
pub fn integrate_velocity<T: Real>(
    g: impl Fn(Vec3<T>) -> T,
    scheme: &QuadratureScheme<T>,
) -> EstimateWithError<T> {
    match scheme.velocity {
        VelocityRule::Gauss {
            nodes_per_axis,
            u_max,
        } => {
            let (xs, ws) = gauss_legendre_on(nodes_per_axis, -u_max, u_max);
            let mut acc = T::zero();
            for (i, &xi) in xs.iter().enumerate() {
                for (j, &xj) in xs.iter().enumerate() {
                    let wij = ws[i] * ws[j];
                    for (k, &xk) in xs.iter().enumerate() {
                        acc += wij * ws[k] * g(Vec3::new(xi, xj, xk));
                    }
                }
            }
            EstimateWithError::exact(acc)
        }
        VelocityRule::MonteCarlo { samples, u_max } => mc_integrate(
            |rng| {
                let u = sample_cube(rng, u_max);
                g(u)
            },
            cube_measure(u_max),
            samples,
            scheme.seed,
        ),
    }
}

/// Approximates the hemisphere integral of `g` over `S^2_+(u)`.
///
/// The canonical polar rule is rotated so its pole aligns with `u/|u|`.
pub fn integrate_hemisphere<T: Real>(
    g: impl Fn(Vec3<T>) -> T,
    u: Vec3<T>,
    scheme: &QuadratureScheme<T>,
) -> Result<EstimateWithError<T>, QuadratureError> {
    let norm = u.norm();
    if norm < T::val(1e-12) {
        return Err(QuadratureError::DegenerateAxis {
            norm: norm.to_f64_lossy(),
        });
    }
    let (e1, e2, n) = u.orthonormal_frame();
    match scheme.hemisphere {
        HemisphereRule::AlignedProduct { polar, azimuth } => {
            let rule = HemiRule::aligned(polar, azimuth);
            let mut acc = T::zero();
            for (dir, w) in rule.nodes_in_frame(e1, e2, n) {
                acc += w * g(dir);
            }
            Ok(EstimateWithError::exact(acc))
        }
        HemisphereRule::FixedSphere { polar, azimuth } => {
            // Full-sphere nodes; the hemisphere restriction enters as an
            // indicator on the kept half.
            let rule = HemiRule::full_sphere(polar, azimuth);
            let mut acc = T::zero();
            for (dir, w) in rule.nodes_in_frame(e1, e2, n) {
                if dir.dot(n) >= T::zero() {
                    acc += w * g(dir);
                }
            }
            Ok(EstimateWithError::exact(acc))
        }
        HemisphereRule::MonteCarlo { samples } => Ok(mc_integrate(
            |rng| g(sample_hemisphere(rng, e1, e2, n)),
            T::val(2.0) * T::PI(),
            samples,
            scheme.seed,
        )),
    }
}

/// Gauss-Legendre approximation of the time integral of `g` over [t0, t1].
pub fn integrate_time<T: Real>(
    g: impl Fn(T) -> T,
    t0: T,
    t1: T,
    scheme: &QuadratureScheme<T>,
) -> EstimateWithError<T> {
    let (xs, ws) = gauss_legendre_on(scheme.time_nodes, t0, t1);
    let mut acc = T::zero();
    for (x, w) in xs.iter().zip(ws.iter()) {
        acc += *w * g(*x);
    }
    EstimateWithError::exact(acc)
}

/// Monte Carlo integration domains.
#[derive(Clone, Copy, Debug)]
pub enum McDomain<T> {
    /// Centered cube of the given half-width.
    Cube { half_width: T },
    /// Hemisphere `S^2_+(axis)`.
    Hemisphere { axis: Vec3<T> },
    /// Product of the cube in u and the u-dependent hemisphere: the natural
    /// domain of the collision integrals. The integrand receives (u, w).
    CubeHemisphereOfU { half_width: T },
}

/// Unbiased Monte Carlo mean with standard error, reproducible under a fixed
/// seed (counter-based streams).
pub fn mc_integrate_domain<T: Real>(
    g: impl Fn(Vec3<T>, Vec3<T>) -> T,
    domain: McDomain<T>,
    n: usize,
    seed: u64,
) -> Result<EstimateWithError<T>, QuadratureError> {
    assert!(n >= 2, "Monte Carlo needs at least two samples");
    match domain {
        McDomain::Cube { half_width } => Ok(mc_integrate(
            |rng| g(sample_cube(rng, half_width), Vec3::zero()),
            cube_measure(half_width),
            n,
            seed,
        )),
        McDomain::Hemisphere { axis } => {
            let norm = axis.norm();
            if norm < T::val(1e-12) {
                return Err(QuadratureError::DegenerateAxis {
                    norm: norm.to_f64_lossy(),
                });
            }
            let (e1, e2, nn) = axis.orthonormal_frame();
            Ok(mc_integrate(
                |rng| g(axis, sample_hemisphere(rng, e1, e2, nn)),
                T::val(2.0) * T::PI(),
                n,
                seed,
            ))
        }
        McDomain::CubeHemisphereOfU { half_width } => Ok(mc_integrate(
            |rng| {
                let u = sample_cube(rng, half_width);
                let un = u.norm();
                if un < T::val(1e-12) {
                    return T::zero();
                }
                let (e1, e2, nn) = u.orthonormal_frame();
                g(u, sample_hemisphere(rng, e1, e2, nn))
            },
            cube_measure(half_width) * T::val(2.0) * T::PI(),
            n,
            seed,
        )),
    }
}

/// Core Monte Carlo loop: mean of `measure * f(rng_i)` plus the standard
/// error of the mean.
pub fn mc_integrate<T: Real>(
    mut f: impl FnMut(&mut ChaCha8Rng) -> T,
    measure: T,
    n: usize,
    seed: u64,
) -> EstimateWithError<T> {
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for i in 0..n {
        let mut rng = sample_rng(seed, i as u64);
        let v = f(&mut rng) * measure;
        sum += v;
        sum_sq += v * v;
    }
    let nf = T::val(n as f64);
    let mean = sum / nf;
    let var = ((sum_sq / nf) - mean * mean).max(T::zero());
    EstimateWithError {
        value: mean,
        stderr: (var / (nf - T::one())).sqrt(),
        samples_used: n,
    }
}

pub fn cube_measure<T: Real>(half_width: T) -> T {
    let w = T::val(2.0) * half_width;
    w * w * w
}

pub fn sample_cube<T: Real>(rng: &mut ChaCha8Rng, half_width: T) -> Vec3<T> {
    Vec3::new(
        rng.gen_range(-half_width..half_width),
        rng.gen_range(-half_width..half_width),
        rng.gen_range(-half_width..half_width),
    )
}

/// Uniform sample on the hemisphere with pole `n` (frame `e1, e2, n`).
pub fn sample_hemisphere<T: Real>(
    rng: &mut ChaCha8Rng,
    e1: Vec3<T>,
    e2: Vec3<T>,
    n: Vec3<T>,
) -> Vec3<T> {
    let c: T = rng.gen_range(T::zero()..T::one());
    let phi: T = rng.gen_range(T::zero()..T::val(2.0) * T::PI());
    let s = (T::one() - c * c).max(T::zero()).sqrt();
    e1.scale(s * phi.cos()) + e2.scale(s * phi.sin()) + n.scale(c)
}

/// Precomputed product rule on the canonical hemisphere/sphere. Directions
/// are stored as (cos_polar, sin_polar * cos_phi, sin_polar * sin_phi) triples
/// relative to a frame supplied at expansion time.
#[derive(Clone, Debug)]
pub struct HemiRule<T> {
    /// (c, s*cos(phi), s*sin(phi), weight) per node.
    pub nodes: Vec<(T, T, T, T)>,
    /// For full-sphere rules: index of the antipodal node of each node.
    pub antipode: Vec<usize>,
}

impl<T: Real> HemiRule<T> {
    /// Upper-hemisphere rule: Gauss in cos(theta) on [0,1], uniform azimuth.
    pub fn aligned(polar: usize, azimuth: usize) -> Self {
        assert!(polar >= 1 && azimuth >= 1);
        let (cs, cw) = gauss_legendre_on(polar, T::zero(), T::one());
        Self::from_cosine_rule(&cs, &cw, azimuth)
    }

    /// Full-sphere rule: Gauss in cos(theta) on [-1,1], uniform azimuth.
    /// Azimuth count must be even so each node has an exact antipode in the
    /// node set.
    pub fn full_sphere(polar: usize, azimuth: usize) -> Self {
        assert!(polar >= 1 && azimuth >= 2 && azimuth % 2 == 0);
        let (cs, cw) = gauss_legendre_on(polar, -T::one(), T::one());
        let mut rule = Self::from_cosine_rule(&cs, &cw, azimuth);
        let n_nodes = polar * azimuth;
        let mut antipode = vec![0usize; n_nodes];
        for ip in 0..polar {
            for ia in 0..azimuth {
                let ip2 = polar - 1 - ip; // GL nodes are symmetric about 0
                let ia2 = (ia + azimuth / 2) % azimuth;
                antipode[ip * azimuth + ia] = ip2 * azimuth + ia2;
            }
        }
        rule.antipode = antipode;
        rule
    }

    fn from_cosine_rule(cs: &[T], cw: &[T], azimuth: usize) -> Self {
        let two_pi = T::val(2.0) * T::PI();
        let wphi = two_pi / T::val(azimuth as f64);
        let mut nodes = Vec::with_capacity(cs.len() * azimuth);
        for (c, wc) in cs.iter().zip(cw.iter()) {
            let s = (T::one() - *c * *c).max(T::zero()).sqrt();
            for ia in 0..azimuth {
                let phi = two_pi * T::val(ia as f64) / T::val(azimuth as f64);
                nodes.push((*c, s * phi.cos(), s * phi.sin(), *wc * wphi));
            }
        }
        HemiRule {
            nodes,
            antipode: Vec::new(),
        }
    }

    /// Expand the stored nodes in the frame (e1, e2, n).
    pub fn nodes_in_frame(
        &self,
        e1: Vec3<T>,
        e2: Vec3<T>,
        n: Vec3<T>,
    ) -> impl Iterator<Item = (Vec3<T>, T)> + '_ {
        self.nodes.iter().map(move |&(c, sc, ss, w)| {
            (e1.scale(sc) + e2.scale(ss) + n.scale(c), w)
        })
    }

    /// Expand in the canonical laboratory frame.
    pub fn nodes_lab(&self) -> impl Iterator<Item = (Vec3<T>, T)> + '_ {
        self.nodes
            .iter()
            .map(|&(c, sc, ss, w)| (Vec3::new(sc, ss, c), w))
    }
}
