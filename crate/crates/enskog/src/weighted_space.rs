//! Gaussian weights, the weighted supremum norm, the discretized
//! distribution field and membership in the admissible ball M_R.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::force_fields::{ForceFieldError, ForceFieldModel, PhaseState};
use crate::geom::Vec3;
use crate::quadrature::sample_rng;
use crate::scalar::Real;
use rand::Rng;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed field file: {0}")]
    Format(String),
    #[error(transparent)]
    Flow(#[from] ForceFieldError),
}

/// Exponents of the Gaussian weights h(x) = exp(-p|x|^2), m(v) = exp(-q|v|^2).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WeightParams<T> {
    pub p: T,
    pub q: T,
}

impl<T: Real> WeightParams<T> {
    pub fn new(p: T, q: T) -> Self {
        assert!(p > T::zero() && q > T::zero(), "weights need p, q > 0");
        WeightParams { p, q }
    }
}

pub fn weight_h<T: Real>(x: Vec3<T>, p: T) -> T {
    (-p * x.norm_sq()).exp()
}

pub fn weight_m<T: Real>(v: Vec3<T>, q: T) -> T {
    (-q * v.norm_sq()).exp()
}

/// Uniform tensor grid: time knots on [0, t_max], centered position and
/// velocity cubes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<T> {
    pub t_max: T,
    pub n_t: usize,
    pub x_max: T,
    pub n_x: usize,
    pub v_max: T,
    pub n_v: usize,
}

impl<T: Real> GridSpec<T> {
    /// Desk-scale defaults: 9 nodes per axis, 8 time knots on [0, 1]. The
    /// position box contains every backward-flowed support point and the
    /// weight tails outside the box are below 1e-7.
    pub fn desk_default(weights: &WeightParams<T>) -> Self {
        let t_max = T::one();
        let v_max = T::val(4.0) / weights.q.sqrt();
        GridSpec {
            t_max,
            n_t: 8,
            x_max: T::val(4.0) / weights.p.sqrt() + t_max * v_max,
            n_x: 9,
            v_max,
            n_v: 9,
        }
    }

    pub fn validate(&self) {
        assert!(self.n_t >= 2 && self.n_x >= 2 && self.n_v >= 2);
        assert!(self.t_max > T::zero() && self.x_max > T::zero() && self.v_max > T::zero());
    }

    pub fn t_knots(&self) -> Vec<T> {
        axis_nodes(T::zero(), self.t_max, self.n_t)
    }

    pub fn x_axis(&self) -> Vec<T> {
        axis_nodes(-self.x_max, self.x_max, self.n_x)
    }

    pub fn v_axis(&self) -> Vec<T> {
        axis_nodes(-self.v_max, self.v_max, self.n_v)
    }

    pub fn nodes_per_knot(&self) -> usize {
        self.n_x.pow(3) * self.n_v.pow(3)
    }

    pub fn total_nodes(&self) -> usize {
        self.n_t * self.nodes_per_knot()
    }
}

fn axis_nodes<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    let step = (hi - lo) / T::val((n - 1) as f64);
    (0..n).map(|i| lo + step * T::val(i as f64)).collect()
}

/// Fractional position of `pos` on a uniform axis, snapped to nodes.
fn locate<T: Real>(lo: T, hi: T, n: usize, pos: T) -> Option<(usize, T)> {
    if pos < lo || pos > hi {
        return None;
    }
    let step = (hi - lo) / T::val((n - 1) as f64);
    let u = (pos - lo) / step;
    let mut i = u.floor().to_f64_lossy() as usize;
    if i >= n - 1 {
        i = n - 2;
    }
    let mut frac = u - T::val(i as f64);
    let snap = T::val(1e-9);
    if frac < snap {
        frac = T::zero();
    } else if frac > T::one() - snap {
        frac = T::one();
    }
    Some((i, frac))
}

/// Anything evaluable on phase space. Closures implement it directly; grid
/// fields additionally expose themselves for stencil-sharing fast paths.
pub trait PhaseFunction<T: Real>: Sync {
    fn eval(&self, t: T, x: Vec3<T>, v: Vec3<T>) -> T;

    fn as_grid(&self) -> Option<&DistributionField<T>> {
        None
    }
}

/// Adapter turning a closure into a [`PhaseFunction`].
pub struct PhaseFn<F>(pub F);

impl<T: Real, F> PhaseFunction<T> for PhaseFn<F>
where
    F: Fn(T, Vec3<T>, Vec3<T>) -> T + Sync,
{
    fn eval(&self, t: T, x: Vec3<T>, v: Vec3<T>) -> T {
        (self.0)(t, x, v)
    }
}

impl<T: Real> PhaseFunction<T> for DistributionField<T> {
    fn eval(&self, t: T, x: Vec3<T>, v: Vec3<T>) -> T {
        DistributionField::eval(self, t, x, v)
    }

    fn as_grid(&self) -> Option<&DistributionField<T>> {
        Some(self)
    }
}

/// Discretized nonnegative distribution on the truncated phase-space-time
/// grid. Values interpolate multilinearly in x and v and linearly in t;
/// the field is zero outside the position/velocity box.
#[derive(Clone, Debug)]
pub struct DistributionField<T> {
    spec: GridSpec<T>,
    t_knots: Vec<T>,
    x_axis: Vec<T>,
    v_axis: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> DistributionField<T> {
    pub fn zeros(spec: GridSpec<T>) -> Self {
        spec.validate();
        DistributionField {
            t_knots: spec.t_knots(),
            x_axis: spec.x_axis(),
            v_axis: spec.v_axis(),
            values: vec![T::zero(); spec.total_nodes()],
            spec,
        }
    }

    /// Samples `f` at every grid node (in parallel).
    pub fn from_fn(spec: GridSpec<T>, f: impl Fn(T, Vec3<T>, Vec3<T>) -> T + Sync) -> Self {
        let mut field = Self::zeros(spec);
        let n_x = spec.n_x;
        let n_v = spec.n_v;
        let nv3 = n_v * n_v * n_v;
        let t_knots = field.t_knots.clone();
        let x_axis = field.x_axis.clone();
        let v_axis = field.v_axis.clone();
        field
            .values
            .par_chunks_mut(nv3)
            .enumerate()
            .for_each(|(row, chunk)| {
                let xf = row % (n_x * n_x * n_x);
                let k = row / (n_x * n_x * n_x);
                let t = t_knots[k];
                let x = Vec3::new(
                    x_axis[xf / (n_x * n_x)],
                    x_axis[(xf / n_x) % n_x],
                    x_axis[xf % n_x],
                );
                for (vf, slot) in chunk.iter_mut().enumerate() {
                    let v = Vec3::new(
                        v_axis[vf / (n_v * n_v)],
                        v_axis[(vf / n_v) % n_v],
                        v_axis[vf % n_v],
                    );
                    *slot = f(t, x, v);
                }
            });
        field
    }

    pub fn spec(&self) -> &GridSpec<T> {
        &self.spec
    }

    pub fn t_knots(&self) -> &[T] {
        &self.t_knots
    }

    pub fn x_axis(&self) -> &[T] {
        &self.x_axis
    }

    pub fn v_axis(&self) -> &[T] {
        &self.v_axis
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn min_value(&self) -> T {
        self.values.iter().fold(T::infinity(), |m, &v| m.min(v))
    }

    #[inline]
    pub fn flat_index(&self, k: usize, xf: usize, vf: usize) -> usize {
        let nv3 = self.spec.n_v.pow(3);
        let nx3 = self.spec.n_x.pow(3);
        (k * nx3 + xf) * nv3 + vf
    }

    /// Node coordinates of a flat index.
    pub fn node_state(&self, idx: usize) -> PhaseState<T> {
        let n_x = self.spec.n_x;
        let n_v = self.spec.n_v;
        let nv3 = n_v.pow(3);
        let nx3 = n_x.pow(3);
        let vf = idx % nv3;
        let xf = (idx / nv3) % nx3;
        let k = idx / (nv3 * nx3);
        PhaseState::new(
            self.t_knots[k],
            Vec3::new(
                self.x_axis[xf / (n_x * n_x)],
                self.x_axis[(xf / n_x) % n_x],
                self.x_axis[xf % n_x],
            ),
            Vec3::new(
                self.v_axis[vf / (n_v * n_v)],
                self.v_axis[(vf / n_v) % n_v],
                self.v_axis[vf % n_v],
            ),
        )
    }

    fn locate_x(&self, x: Vec3<T>) -> Option<[(usize, T); 3]> {
        let s = &self.spec;
        Some([
            locate(-s.x_max, s.x_max, s.n_x, x[0])?,
            locate(-s.x_max, s.x_max, s.n_x, x[1])?,
            locate(-s.x_max, s.x_max, s.n_x, x[2])?,
        ])
    }

    fn locate_v(&self, v: Vec3<T>) -> Option<[(usize, T); 3]> {
        let s = &self.spec;
        Some([
            locate(-s.v_max, s.v_max, s.n_v, v[0])?,
            locate(-s.v_max, s.v_max, s.n_v, v[1])?,
            locate(-s.v_max, s.v_max, s.n_v, v[2])?,
        ])
    }

    /// Time is clamped to [0, t_max]; the field carries no data beyond its
    /// final knot.
    fn locate_t(&self, t: T) -> (usize, T) {
        let s = &self.spec;
        let clamped = t.max(T::zero()).min(s.t_max);
        locate(T::zero(), s.t_max, s.n_t, clamped).expect("clamped time is inside")
    }

    /// Interpolated evaluation; zero outside the position/velocity box.
    pub fn eval(&self, t: T, x: Vec3<T>, v: Vec3<T>) -> T {
        let Some(lx) = self.locate_x(x) else {
            return T::zero();
        };
        let Some(lv) = self.locate_v(v) else {
            return T::zero();
        };
        let (kt, ft) = self.locate_t(t);
        let n_x = self.spec.n_x;
        let n_v = self.spec.n_v;
        let nv3 = n_v.pow(3);
        let mut acc = T::zero();
        for (dt, wt) in [(0usize, T::one() - ft), (1, ft)] {
            if wt == T::zero() {
                continue;
            }
            let k = kt + dt;
            for cx in 0..8usize {
                let mut wx = wt;
                let mut xf = 0usize;
                for (axis, l) in lx.iter().enumerate() {
                    let bit = (cx >> axis) & 1;
                    wx = wx * if bit == 1 { l.1 } else { T::one() - l.1 };
                    xf = xf * n_x + l.0 + bit;
                }
                if wx == T::zero() {
                    continue;
                }
                let base = self.flat_index(k, xf, 0);
                let slab = &self.values[base..base + nv3];
                acc += wx * trilinear(slab, n_v, &lv);
            }
        }
        acc
    }

    /// Writes the x/t-interpolated velocity slice at (t, x) into `out`
    /// (length n_v^3). Returns false (and zero-fills) when x is outside the
    /// box. Point evaluations against the slice equal `eval` exactly.
    pub fn velocity_slice(&self, t: T, x: Vec3<T>, out: &mut [T]) -> bool {
        let nv3 = self.spec.n_v.pow(3);
        assert_eq!(out.len(), nv3);
        out.fill(T::zero());
        let Some(lx) = self.locate_x(x) else {
            return false;
        };
        let (kt, ft) = self.locate_t(t);
        let n_x = self.spec.n_x;
        for (dt, wt) in [(0usize, T::one() - ft), (1, ft)] {
            if wt == T::zero() {
                continue;
            }
            let k = kt + dt;
            for cx in 0..8usize {
                let mut wx = wt;
                let mut xf = 0usize;
                for (axis, l) in lx.iter().enumerate() {
                    let bit = (cx >> axis) & 1;
                    wx = wx * if bit == 1 { l.1 } else { T::one() - l.1 };
                    xf = xf * n_x + l.0 + bit;
                }
                if wx == T::zero() {
                    continue;
                }
                let base = self.flat_index(k, xf, 0);
                let slab = &self.values[base..base + nv3];
                for (o, s) in out.iter_mut().zip(slab.iter()) {
                    *o += wx * *s;
                }
            }
        }
        true
    }

    /// Trilinear evaluation of a velocity slice produced by
    /// [`velocity_slice`].
    pub fn eval_slice(&self, slice: &[T], v: Vec3<T>) -> T {
        match self.locate_v(v) {
            Some(lv) => trilinear(slice, self.spec.n_v, &lv),
            None => T::zero(),
        }
    }

    /// Self-describing binary layout: header with an endianness tag, grid
    /// descriptors and weight params, then the row-major value array.
    pub fn write_binary(&self, weights: &WeightParams<T>, path: &Path) -> Result<(), SpaceError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&ENDIAN_TAG.to_le_bytes())?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for n in [self.spec.n_t, self.spec.n_x, self.spec.n_v] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for v in [
            self.spec.t_max.to_f64_lossy(),
            self.spec.x_max.to_f64_lossy(),
            self.spec.v_max.to_f64_lossy(),
            weights.p.to_f64_lossy(),
            weights.q.to_f64_lossy(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<(DistributionField<f64>, WeightParams<f64>), SpaceError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SpaceError::Format("bad magic".into()));
        }
        let endian = read_u32(&mut r)?;
        if endian != ENDIAN_TAG {
            return Err(SpaceError::Format(format!(
                "endianness tag mismatch: {endian:#x}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(SpaceError::Format(format!("unknown version {version}")));
        }
        let n_t = read_u64(&mut r)? as usize;
        let n_x = read_u64(&mut r)? as usize;
        let n_v = read_u64(&mut r)? as usize;
        let t_max = read_f64(&mut r)?;
        let x_max = read_f64(&mut r)?;
        let v_max = read_f64(&mut r)?;
        let p = read_f64(&mut r)?;
        let q = read_f64(&mut r)?;
        let spec = GridSpec {
            t_max,
            n_t,
            x_max,
            n_x,
            v_max,
            n_v,
        };
        if n_t < 2 || n_x < 2 || n_v < 2 || n_x > 1 << 12 || n_v > 1 << 12 || n_t > 1 << 20 {
            return Err(SpaceError::Format("implausible grid descriptor".into()));
        }
        let mut field = DistributionField::zeros(spec);
        for slot in field.values.iter_mut() {
            *slot = read_f64(&mut r)?;
        }
        Ok((field, WeightParams { p, q }))
    }

    /// CSV slice for plotting: the (x1, v1) plane through the centers of the
    /// remaining axes at time knot `k`. Columns: x1, v1, f.
    pub fn write_csv_slice(&self, k: usize, path: &Path) -> Result<(), SpaceError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "x1,v1,f")?;
        let n_x = self.spec.n_x;
        let n_v = self.spec.n_v;
        let (cx, cv) = (n_x / 2, n_v / 2);
        for ix in 0..n_x {
            let xf = (ix * n_x + cx) * n_x + cx;
            for jv in 0..n_v {
                let vf = (jv * n_v + cv) * n_v + cv;
                let val = self.values[self.flat_index(k, xf, vf)];
                writeln!(
                    w,
                    "{},{},{}",
                    self.x_axis[ix].to_f64_lossy(),
                    self.v_axis[jv].to_f64_lossy(),
                    val.to_f64_lossy()
                )?;
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"ENSKFLD\0";
const ENDIAN_TAG: u32 = 0x0102_0304;
const FORMAT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32, SpaceError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, SpaceError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, SpaceError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[inline]
fn trilinear<T: Real>(slab: &[T], n: usize, lv: &[(usize, T); 3]) -> T {
    let (i0, f0) = lv[0];
    let (i1, f1) = lv[1];
    let (i2, f2) = lv[2];
    let mut acc = T::zero();
    for c in 0..8usize {
        let b0 = c & 1;
        let b1 = (c >> 1) & 1;
        let b2 = (c >> 2) & 1;
        let w = (if b0 == 1 { f0 } else { T::one() - f0 })
            * (if b1 == 1 { f1 } else { T::one() - f1 })
            * (if b2 == 1 { f2 } else { T::one() - f2 });
        if w == T::zero() {
            continue;
        }
        let idx = ((i0 + b0) * n + i1 + b1) * n + i2 + b2;
        acc += w * slab[idx];
    }
    acc
}

/// Sample set for norm estimation: every grid node plus `extra` uniform
/// refinement points. Growing `extra` under a fixed seed only appends
/// samples, so estimates are monotone in the sample count.
#[derive(Clone, Copy, Debug)]
pub struct NormSampling<T> {
    pub grid: GridSpec<T>,
    pub extra: usize,
    pub seed: u64,
}

impl<T: Real> NormSampling<T> {
    pub fn nodes_only(grid: GridSpec<T>) -> Self {
        NormSampling {
            grid,
            extra: 0,
            seed: 0,
        }
    }

    fn refinement_state(&self, i: usize) -> PhaseState<T> {
        let mut rng = sample_rng(self.seed, i as u64);
        let g = &self.grid;
        let t = rng.gen_range(T::zero()..g.t_max);
        let x = Vec3::new(
            rng.gen_range(-g.x_max..g.x_max),
            rng.gen_range(-g.x_max..g.x_max),
            rng.gen_range(-g.x_max..g.x_max),
        );
        let v = Vec3::new(
            rng.gen_range(-g.v_max..g.v_max),
            rng.gen_range(-g.v_max..g.v_max),
            rng.gen_range(-g.v_max..g.v_max),
        );
        PhaseState::new(t, x, v)
    }
}

/// Estimated weighted supremum norm. A grid + sample maximum is a lower
/// estimate of the true supremum.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormEstimate<T> {
    pub value: T,
    pub argmax_t: T,
    pub argmax_x: [T; 3],
    pub argmax_v: [T; 3],
    pub samples: usize,
}

/// ln of the inverse weight h^{-1}(X(0)) m^{-1}(V(0)) at a state.
fn ln_inverse_weight<T: Real>(
    field: &ForceFieldModel<T>,
    params: &WeightParams<T>,
    state: &PhaseState<T>,
) -> Result<T, ForceFieldError> {
    let back = field.flow(T::zero(), state)?;
    Ok(params.p * back.x.norm_sq() + params.q * back.v.norm_sq())
}

/// |f| h^{-1}(X0) m^{-1}(V0), computed in log space to dodge overflow of the
/// inverse weights in the far field.
#[inline]
pub fn weighted_magnitude<T: Real>(fv: T, ln_inv_weight: T) -> T {
    if fv == T::zero() {
        T::zero()
    } else {
        (fv.abs().ln() + ln_inv_weight).exp()
    }
}

/// Weighted sup-norm estimate of `f` over the sampling set.
pub fn weighted_norm<T: Real>(
    f: &(impl PhaseFunction<T> + ?Sized),
    field: &ForceFieldModel<T>,
    params: &WeightParams<T>,
    sampling: &NormSampling<T>,
) -> Result<NormEstimate<T>, ForceFieldError> {
    let grid = sampling.grid;
    grid.validate();
    let t_knots = grid.t_knots();
    let x_axis = grid.x_axis();
    let v_axis = grid.v_axis();
    let n_nodes = grid.total_nodes();
    let total = n_nodes + sampling.extra;
    let state_of = |i: usize| -> PhaseState<T> {
        if i < n_nodes {
            let n_x = grid.n_x;
            let n_v = grid.n_v;
            let nv3 = n_v.pow(3);
            let nx3 = n_x.pow(3);
            let vf = i % nv3;
            let xf = (i / nv3) % nx3;
            let k = i / (nv3 * nx3);
            PhaseState::new(
                t_knots[k],
                Vec3::new(
                    x_axis[xf / (n_x * n_x)],
                    x_axis[(xf / n_x) % n_x],
                    x_axis[xf % n_x],
                ),
                Vec3::new(
                    v_axis[vf / (n_v * n_v)],
                    v_axis[(vf / n_v) % n_v],
                    v_axis[vf % n_v],
                ),
            )
        } else {
            sampling.refinement_state(i - n_nodes)
        }
    };
    let best = (0..total)
        .into_par_iter()
        .map(|i| -> Result<(T, usize), ForceFieldError> {
            let st = state_of(i);
            let lw = ln_inverse_weight(field, params, &st)?;
            Ok((weighted_magnitude(f.eval(st.t, st.x, st.v), lw), i))
        })
        .try_reduce(
            || (T::neg_infinity(), usize::MAX),
            |a, b| {
                Ok(if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                })
            },
        )?;
    let st = state_of(best.1);
    Ok(NormEstimate {
        value: best.0.max(T::zero()),
        argmax_t: st.t,
        argmax_x: st.x.0,
        argmax_v: st.v.0,
        samples: total,
    })
}

/// Sup of |f0(x, v)| h^{-1}(x) m^{-1}(v) over the (x, v) sample set: the
/// t = 0 norm needs no flow.
pub fn comparison_initial_norm<T: Real>(
    f0: &(impl Fn(Vec3<T>, Vec3<T>) -> T + Sync),
    params: &WeightParams<T>,
    sampling: &NormSampling<T>,
) -> T {
    let grid = sampling.grid;
    let x_axis = grid.x_axis();
    let v_axis = grid.v_axis();
    let n_x = grid.n_x;
    let n_v = grid.n_v;
    let n_nodes = n_x.pow(3) * n_v.pow(3);
    let total = n_nodes + sampling.extra;
    (0..total)
        .into_par_iter()
        .map(|i| {
            let (x, v) = if i < n_nodes {
                let nv3 = n_v.pow(3);
                let vf = i % nv3;
                let xf = i / nv3;
                (
                    Vec3::new(
                        x_axis[xf / (n_x * n_x)],
                        x_axis[(xf / n_x) % n_x],
                        x_axis[xf % n_x],
                    ),
                    Vec3::new(
                        v_axis[vf / (n_v * n_v)],
                        v_axis[(vf / n_v) % n_v],
                        v_axis[vf % n_v],
                    ),
                )
            } else {
                let st = sampling.refinement_state(i - n_nodes);
                (st.x, st.v)
            };
            let lw = params.p * x.norm_sq() + params.q * v.norm_sq();
            weighted_magnitude(f0(x, v), lw)
        })
        .reduce(T::zero, |a, b| a.max(b))
}

/// Membership in M_R = { f : ||f|| <= R }, up to floating-point slack so
/// boundary elements with ||f|| = R are admitted.
pub fn in_mr<T: Real>(
    f: &(impl PhaseFunction<T> + ?Sized),
    radius: T,
    field: &ForceFieldModel<T>,
    params: &WeightParams<T>,
    sampling: &NormSampling<T>,
) -> Result<bool, ForceFieldError> {
    assert!(radius > T::zero(), "R must be positive");
    let slack = T::one() + T::epsilon() * T::val(1024.0);
    Ok(weighted_norm(f, field, params, sampling)?.value <= radius * slack)
}

/// ln h^{-1}(X0) m^{-1}(V0) at every grid node; the solver reuses this table
/// so per-iteration norms cost one exp per node.
pub fn ln_weight_table<T: Real>(
    grid: &GridSpec<T>,
    field: &ForceFieldModel<T>,
    params: &WeightParams<T>,
) -> Result<Vec<T>, ForceFieldError> {
    let probe = DistributionField::zeros(*grid);
    (0..grid.total_nodes())
        .into_par_iter()
        .map(|i| ln_inverse_weight(field, params, &probe.node_state(i)))
        .collect()
}

/// Weighted sup over grid nodes of |a - b| (or |a| when `b` is None) given a
/// precomputed ln-weight table. Identical sample set and arithmetic as
/// [`weighted_norm`] with `extra = 0`.
pub fn weighted_sup_from_table<T: Real>(a: &[T], b: Option<&[T]>, table: &[T]) -> T {
    assert_eq!(a.len(), table.len());
    let diff = |i: usize| match b {
        Some(bv) => a[i] - bv[i],
        None => a[i],
    };
    (0..a.len())
        .into_par_iter()
        .map(|i| weighted_magnitude(diff(i), table[i]))
        .reduce(T::zero, |x, y| x.max(y))
}
