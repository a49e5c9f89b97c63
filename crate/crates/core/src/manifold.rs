//! Compact strategy spaces: unit spheres, flat tori and axis-aligned boxes.
//!
//! Points are plain coordinate vectors. Spheres are embedded in their ambient
//! space, tori use coordinates in `[0, P)`, boxes use their own coordinates.
//! Steps are taken in ambient coordinates and mapped back with a retraction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scale};
use crate::scalar::Scalar;

/// Tolerance on the membership invariant.
pub const MEMBERSHIP_TOL: f64 = 1e-9;
/// Box points may sit this far outside their bounds.
pub const BOX_TOL: f64 = 1e-12;

/// Number of Simpson nodes used for the spherical cap integral.
const CAP_QUADRATURE_NODES: usize = 129;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ManifoldRepr", into = "ManifoldRepr")]
#[serde(bound = "F: Scalar")]
pub enum Manifold<F> {
    /// Unit sphere `S^{D-1}` in `R^D`.
    Sphere { ambient_dim: usize },
    /// Flat torus `[0, P)^d`.
    Torus { dim: usize, period: F },
    /// Axis-aligned box; each entry is `(lower, upper)`.
    Box { bounds: Vec<(F, F)> },
}

/// Wire form: `{"kind": "sphere"|"torus"|"box", "dim": int, "period"?, "bounds"?}`.
/// For spheres `dim` is the ambient dimension `D`.
#[derive(Serialize, Deserialize)]
struct ManifoldRepr {
    kind: String,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<Vec<[f64; 2]>>,
}

impl<F: Scalar> TryFrom<ManifoldRepr> for Manifold<F> {
    type Error = Error;

    fn try_from(r: ManifoldRepr) -> Result<Self> {
        match r.kind.as_str() {
            "sphere" => Manifold::sphere(r.dim),
            "torus" => Manifold::torus(r.dim, F::lit(r.period.unwrap_or(1.0))),
            "box" => {
                let bounds = r
                    .bounds
                    .ok_or_else(|| Error::Config("box manifold requires `bounds`".into()))?;
                if bounds.len() != r.dim {
                    return Err(Error::DimensionMismatch {
                        expected: r.dim,
                        actual: bounds.len(),
                    });
                }
                Manifold::boxed(bounds.iter().map(|b| (F::lit(b[0]), F::lit(b[1]))).collect())
            }
            other => Err(Error::Config(format!("unknown manifold kind `{other}`"))),
        }
    }
}

impl<F: Scalar> From<Manifold<F>> for ManifoldRepr {
    fn from(m: Manifold<F>) -> Self {
        match m {
            Manifold::Sphere { ambient_dim } => ManifoldRepr {
                kind: "sphere".into(),
                dim: ambient_dim,
                period: None,
                bounds: None,
            },
            Manifold::Torus { dim, period } => ManifoldRepr {
                kind: "torus".into(),
                dim,
                period: Some(period.as_f64()),
                bounds: None,
            },
            Manifold::Box { bounds } => ManifoldRepr {
                kind: "box".into(),
                dim: bounds.len(),
                period: None,
                bounds: Some(bounds.iter().map(|&(l, u)| [l.as_f64(), u.as_f64()]).collect()),
            },
        }
    }
}

/// A point known to lie on some manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct Point<F> {
    coords: Vec<F>,
}

impl<F: Scalar> Point<F> {
    pub fn coords(&self) -> &[F] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<F> {
        self.coords
    }

    /// Wraps coordinates without checking membership.
    #[cfg(test)]
    pub(crate) fn unchecked(coords: Vec<F>) -> Self {
        Self { coords }
    }
}

/// A vector in the tangent space at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<F> {
    pub coords: Vec<F>,
    pub base: Point<F>,
}

impl<F: Scalar> Manifold<F> {
    pub fn sphere(ambient_dim: usize) -> Result<Self> {
        if ambient_dim < 2 {
            return Err(Error::invalid("dim", "sphere needs ambient dimension >= 2"));
        }
        Ok(Manifold::Sphere { ambient_dim })
    }

    pub fn torus(dim: usize, period: F) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "torus needs dimension >= 1"));
        }
        if !(period > F::zero()) || !period.is_finite() {
            return Err(Error::invalid("period", "torus period must be positive"));
        }
        Ok(Manifold::Torus { dim, period })
    }

    pub fn boxed(bounds: Vec<(F, F)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::invalid("bounds", "box needs at least one coordinate"));
        }
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(
                    "bounds",
                    format!("coordinate {k}: lower bound must be below upper bound"),
                ));
            }
        }
        Ok(Manifold::Box { bounds })
    }

    /// Number of coordinates of a point.
    pub fn coord_dim(&self) -> usize {
        match self {
            Manifold::Sphere { ambient_dim } => *ambient_dim,
            Manifold::Torus { dim, .. } => *dim,
            Manifold::Box { bounds } => bounds.len(),
        }
    }

    /// Intrinsic dimension.
    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Manifold::Sphere { ambient_dim } => ambient_dim - 1,
            _ => self.coord_dim(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Manifold::Sphere { ambient_dim } => format!("sphere S^{}", ambient_dim - 1),
            Manifold::Torus { dim, period } => format!("torus T^{dim} (period {period})"),
            Manifold::Box { bounds } => format!("box of dimension {}", bounds.len()),
        }
    }

    /// Checks the membership invariant, with the reason on failure.
    pub fn check(&self, coords: &[F]) -> Result<()> {
        let fail = |reason: String| Error::NotOnManifold {
            manifold: self.name(),
            reason,
        };
        if coords.len() != self.coord_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.coord_dim(),
                actual: coords.len(),
            });
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(fail("non-finite coordinate".into()));
        }
        match self {
            Manifold::Sphere { .. } => {
                let n = norm(coords);
                if (n - F::one()).abs() > F::lit(MEMBERSHIP_TOL) {
                    return Err(fail(format!("norm {n} differs from 1")));
                }
            }
            Manifold::Torus { period, .. } => {
                if let Some(c) = coords.iter().find(|&&c| c < F::zero() || c >= *period) {
                    return Err(fail(format!("coordinate {c} outside [0, {period})")));
                }
            }
            Manifold::Box { bounds } => {
                let tol = F::lit(BOX_TOL);
                for (k, (&c, &(lo, hi))) in coords.iter().zip(bounds).enumerate() {
                    if c < lo - tol || c > hi + tol {
                        return Err(fail(format!("coordinate {k} = {c} outside [{lo}, {hi}]")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, coords: &[F]) -> bool {
        self.check(coords).is_ok()
    }

    /// Wraps validated coordinates as a [`Point`].
    pub fn point(&self, coords: Vec<F>) -> Result<Point<F>> {
        self.check(&coords)?;
        Ok(Point { coords })
    }

    /// Draws a uniform point into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [F]) {
        debug_assert_eq!(out.len(), self.coord_dim());
        match self {
            Manifold::Sphere { .. } => loop {
                for o in out.iter_mut() {
                    *o = F::lit(rng.sample::<f64, _>(StandardNormal));
                }
                let n = norm(out);
                if n > F::lit(1e-12) {
                    scale(F::one() / n, out);
                    break;
                }
            },
            Manifold::Torus { period, .. } => {
                for o in out.iter_mut() {
                    *o = wrap(F::lit(rng.random::<f64>()) * *period, *period);
                }
            }
            Manifold::Box { bounds } => {
                for (o, &(lo, hi)) in out.iter_mut().zip(bounds) {
                    let u = F::lit(rng.random::<f64>());
                    *o = (lo + u * (hi - lo)).min(hi);
                }
            }
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Point<F> {
        let mut coords = vec![F::zero(); self.coord_dim()];
        self.sample_into(rng, &mut coords);
        Point { coords }
    }

    /// Removes the normal component of `v` at `x` in place.
    pub fn project_tangent_in_place(&self, x: &[F], v: &mut [F]) {
        if let Manifold::Sphere { .. } = self {
            let radial = dot(v, x);
            axpy(-radial, x, v);
        }
    }

    pub fn project_tangent(&self, x: &Point<F>, v: &[F]) -> Result<TangentVector<F>> {
        if v.len() != self.coord_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.coord_dim(),
                actual: v.len(),
            });
        }
        let mut coords = v.to_vec();
        self.project_tangent_in_place(x.coords(), &mut coords);
        Ok(TangentVector {
            coords,
            base: x.clone(),
        })
    }

    /// Moves `x` by `step` and maps the result back onto the manifold:
    /// normalization on spheres, wrapping on tori, clamping on boxes.
    pub fn retract_in_place(&self, x: &mut [F], step: &[F]) -> Result<()> {
        debug_assert_eq!(x.len(), step.len());
        match self {
            Manifold::Sphere { .. } => {
                axpy(F::one(), step, x);
                let n = norm(x);
                if !(n > F::min_positive_value()) {
                    return Err(Error::DegenerateRetraction);
                }
                scale(F::one() / n, x);
            }
            Manifold::Torus { period, .. } => {
                for (xi, &si) in x.iter_mut().zip(step) {
                    *xi = wrap(*xi + si, *period);
                }
            }
            Manifold::Box { bounds } => {
                for ((xi, &si), &(lo, hi)) in x.iter_mut().zip(step).zip(bounds) {
                    *xi = (*xi + si).max(lo).min(hi);
                }
            }
        }
        Ok(())
    }

    pub fn retract(&self, x: &Point<F>, step: &[F]) -> Result<Point<F>> {
        if step.len() != self.coord_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.coord_dim(),
                actual: step.len(),
            });
        }
        let mut coords = x.coords.clone();
        self.retract_in_place(&mut coords, step)?;
        Ok(Point { coords })
    }

    /// Exact geodesic step on spheres; other manifolds are flat so this is the
    /// retraction. `step` must be tangent at `x`.
    pub fn exp_map_in_place(&self, x: &mut [F], step: &[F]) -> Result<()> {
        match self {
            Manifold::Sphere { .. } => {
                let len = norm(step);
                if len == F::zero() {
                    return Ok(());
                }
                let (s, c) = len.sin_cos();
                for (xi, &vi) in x.iter_mut().zip(step) {
                    *xi = c * *xi + s * vi / len;
                }
                let n = norm(x);
                scale(F::one() / n, x);
                Ok(())
            }
            _ => self.retract_in_place(x, step),
        }
    }

    pub fn geodesic_distance(&self, a: &[F], b: &[F]) -> F {
        match self {
            Manifold::Sphere { .. } => dot(a, b).max(-F::one()).min(F::one()).acos(),
            Manifold::Torus { period, .. } => a
                .iter()
                .zip(b)
                .map(|(&u, &v)| {
                    let d = (u - v).abs() % *period;
                    let d = d.min(*period - d);
                    d * d
                })
                .sum::<F>()
                .sqrt(),
            Manifold::Box { .. } => a
                .iter()
                .zip(b)
                .map(|(&u, &v)| (u - v) * (u - v))
                .sum::<F>()
                .sqrt(),
        }
    }

    /// Lower bound on the normalized volume of any geodesic ball of radius
    /// `delta`, capped at 1.
    ///
    /// * sphere: exact cap fraction `∫_0^δ sin^{D-2} / ∫_0^π sin^{D-2}` by
    ///   129-node Simpson quadrature;
    /// * torus: the ball contains the cube of half-side `δ/√d`, giving
    ///   `∏ min(2δ/√d, P)/P` (exact for `d = 1`);
    /// * box: a corner ball still contains a cube of side `δ/√d`, giving
    ///   `∏ min(δ/√d, w_k)/w_k`.
    pub fn ball_volume_fraction_lower_bound(&self, delta: F) -> Result<F> {
        if !(delta > F::zero()) {
            return Err(Error::invalid("delta", "ball radius must be positive"));
        }
        let v = match self {
            Manifold::Sphere { ambient_dim } => {
                let pi = F::PI();
                if delta >= pi {
                    F::one()
                } else {
                    let k = (*ambient_dim - 2) as i32;
                    let f = |t: F| t.sin().powi(k);
                    simpson(f, F::zero(), delta, CAP_QUADRATURE_NODES)
                        / simpson(f, F::zero(), pi, CAP_QUADRATURE_NODES)
                }
            }
            Manifold::Torus { dim, period } => {
                let side = F::lit(2.0) * delta / F::from_count(*dim).sqrt();
                (side.min(*period) / *period).powi(*dim as i32)
            }
            Manifold::Box { bounds } => {
                let side = delta / F::from_count(bounds.len()).sqrt();
                bounds
                    .iter()
                    .map(|&(lo, hi)| side.min(hi - lo) / (hi - lo))
                    .fold(F::one(), |acc, v| acc * v)
            }
        };
        Ok(v.min(F::one()))
    }
}

fn wrap<F: Scalar>(v: F, period: F) -> F {
    let mut r = v % period;
    if r < F::zero() {
        r = r + period;
    }
    if r >= period {
        r = F::zero();
    }
    r
}

/// Composite Simpson rule on `nodes` (odd) equally spaced points.
fn simpson<F: Scalar>(f: impl Fn(F) -> F, a: F, b: F, nodes: usize) -> F {
    debug_assert!(nodes >= 3 && nodes % 2 == 1);
    let intervals = nodes - 1;
    let h = (b - a) / F::from_count(intervals);
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { F::lit(4.0) } else { F::lit(2.0) };
        acc = acc + w * f(a + h * F::from_count(i));
    }
    acc * h / F::lit(3.0)
}
