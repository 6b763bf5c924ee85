//! Embedded targets `N ⊂ R^K` and the warp function `beta` on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which the nearest-point projection is considered undefined.
pub const PROJECTION_FLOOR: f64 = 1e-9;
/// How far a base point may sit from the target for tangent projection.
pub const ON_MANIFOLD_TOL: f64 = 1e-9;
/// Number of quasi-random samples used to certify the warp bounds.
pub const WARP_CERT_SAMPLES: usize = 1_000_000;

const TORUS_FACTOR_RADIUS: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetManifold {
    /// Round sphere of the given dimension and radius in `R^(dim+1)`.
    Sphere { dim: usize, radius: f64 },
    /// Flat torus `S^1(1/√2) × S^1(1/√2) ⊂ S^3 ⊂ R^4`.
    CliffordTorus,
}

impl TargetManifold {
    pub fn sphere2() -> Self {
        TargetManifold::Sphere { dim: 2, radius: 1.0 }
    }

    /// Parse the config spelling (`"sphere2"` or `"clifford"`).
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sphere2" => Ok(Self::sphere2()),
            "clifford" => Ok(TargetManifold::CliffordTorus),
            other => Err(Error::InvalidConfig(format!("unknown target `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TargetManifold::Sphere { dim: 2, radius } if *radius == 1.0 => "sphere2".into(),
            TargetManifold::Sphere { dim, radius } => format!("sphere{dim}(r={radius})"),
            TargetManifold::CliffordTorus => "clifford".into(),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            TargetManifold::Sphere { dim, .. } => dim + 1,
            TargetManifold::CliffordTorus => 4,
        }
    }

    /// Nearest-point projection of `y` into `out`.
    pub fn project_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            TargetManifold::Sphere { radius, .. } => {
                let norm = norm(y);
                if norm < PROJECTION_FLOOR {
                    return Err(Error::ProjectionUndefined(norm));
                }
                let s = radius / norm;
                for (o, v) in out.iter_mut().zip(y) {
                    *o = v * s;
                }
            }
            TargetManifold::CliffordTorus => {
                for f in 0..2 {
                    let (a, b) = (y[2 * f], y[2 * f + 1]);
                    let norm = a.hypot(b);
                    if norm < PROJECTION_FLOOR {
                        return Err(Error::ProjectionUndefined(norm));
                    }
                    let s = TORUS_FACTOR_RADIUS / norm;
                    out[2 * f] = a * s;
                    out[2 * f + 1] = b * s;
                }
            }
        }
        Ok(())
    }

    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; y.len()];
        self.project_into(y, &mut out)?;
        Ok(out)
    }

    /// Project `w` onto the tangent space at `p` without checking `p`.
    pub(crate) fn tangent_project_into(&self, p: &[f64], w: &[f64], out: &mut [f64]) {
        match self {
            TargetManifold::Sphere { radius, .. } => {
                let c = dot(w, p) / (radius * radius);
                for ((o, wi), pi) in out.iter_mut().zip(w).zip(p) {
                    *o = wi - c * pi;
                }
            }
            TargetManifold::CliffordTorus => {
                let r2 = TORUS_FACTOR_RADIUS * TORUS_FACTOR_RADIUS;
                for f in 0..2 {
                    let (pa, pb) = (p[2 * f], p[2 * f + 1]);
                    let c = (w[2 * f] * pa + w[2 * f + 1] * pb) / r2;
                    out[2 * f] = w[2 * f] - c * pa;
                    out[2 * f + 1] = w[2 * f + 1] - c * pb;
                }
            }
        }
    }

    /// Tangential part of `w` at the base point `p ∈ N`.
    pub fn tangent_project(&self, p: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let d = self.dist_to_manifold(p)?;
        if d > ON_MANIFOLD_TOL {
            return Err(Error::OffManifold(d));
        }
        let mut out = vec![0.0; w.len()];
        self.tangent_project_into(p, w, &mut out);
        Ok(out)
    }

    /// `|y - P(y)|` in closed form, without the projection floor check.
    pub(crate) fn defect(&self, y: &[f64]) -> f64 {
        match self {
            TargetManifold::Sphere { radius, .. } => (norm(y) - radius).abs(),
            TargetManifold::CliffordTorus => {
                let a = y[0].hypot(y[1]) - TORUS_FACTOR_RADIUS;
                let b = y[2].hypot(y[3]) - TORUS_FACTOR_RADIUS;
                a.hypot(b)
            }
        }
    }

    pub fn dist_to_manifold(&self, y: &[f64]) -> Result<f64> {
        let p = self.project(y)?;
        Ok(y.iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Exact range of the ambient coordinate `axis` (1-based) over `N`.
    pub fn coordinate_range(&self, axis: usize) -> Result<(f64, f64)> {
        if axis == 0 || axis > self.ambient_dim() {
            return Err(Error::InvalidWarp(format!(
                "axis {axis} outside 1..={}",
                self.ambient_dim()
            )));
        }
        Ok(match self {
            TargetManifold::Sphere { radius, .. } => (-radius, *radius),
            TargetManifold::CliffordTorus => (-TORUS_FACTOR_RADIUS, TORUS_FACTOR_RADIUS),
        })
    }

    /// Point of the Clifford torus with angles `(alpha, gamma)`.
    pub fn torus_point(alpha: f64, gamma: f64) -> [f64; 4] {
        let r = TORUS_FACTOR_RADIUS;
        [r * alpha.cos(), r * alpha.sin(), r * gamma.cos(), r * gamma.sin()]
    }

    /// Deterministic sample of `count` points of `N`. Sphere(2) and the torus
    /// use a Halton sequence; other spheres use seeded rejection sampling.
    pub fn sample_points(&self, count: usize) -> Vec<Vec<f64>> {
        let tau = std::f64::consts::TAU;
        match self {
            TargetManifold::Sphere { dim: 2, radius } => (1..=count)
                .map(|k| {
                    let z = 2.0 * halton(k, 2) - 1.0;
                    let phi = tau * halton(k, 3);
                    let s = (1.0 - z * z).max(0.0).sqrt();
                    vec![radius * s * phi.cos(), radius * s * phi.sin(), radius * z]
                })
                .collect(),
            TargetManifold::Sphere { dim, radius } => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                let k = dim + 1;
                let mut out = Vec::with_capacity(count);
                while out.len() < count {
                    let y: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let nrm = norm(&y);
                    if nrm > 1e-3 && nrm <= 1.0 {
                        out.push(y.iter().map(|v| radius * v / nrm).collect());
                    }
                }
                out
            }
            TargetManifold::CliffordTorus => (1..=count)
                .map(|k| Self::torus_point(tau * halton(k, 2), tau * halton(k, 3)).to_vec())
                .collect(),
        }
    }
}

/// Radical inverse of `k` in base `b`.
pub fn halton(mut k: usize, b: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while k > 0 {
        f /= b as f64;
        r += f * (k % b) as f64;
        k /= b;
    }
    r
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarpKind {
    Constant { c: f64 },
    /// `a + b * y_axis`, with a 1-based `axis`.
    AffineHeight { a: f64, b: f64, axis: usize },
}

/// Config spelling `{kind, a, b, axis}`; for `constant` the value is `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub kind: WarpSpecKind,
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub axis: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpSpecKind {
    Constant,
    AffineHeight,
}

impl From<WarpSpec> for WarpKind {
    fn from(s: WarpSpec) -> Self {
        match s.kind {
            WarpSpecKind::Constant => WarpKind::Constant { c: s.a },
            WarpSpecKind::AffineHeight => WarpKind::AffineHeight {
                a: s.a,
                b: s.b,
                axis: s.axis,
            },
        }
    }
}

/// Warp `beta` with certified bounds `0 < lambda <= beta <= big_lambda` on `N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarpFunction {
    kind: WarpKind,
    lambda: f64,
    big_lambda: f64,
}

impl WarpFunction {
    pub fn new(kind: WarpKind, target: &TargetManifold) -> Result<Self> {
        let (lambda, big_lambda) = match kind {
            WarpKind::Constant { c } => (c, c),
            WarpKind::AffineHeight { a, b, axis } => {
                let (lo, hi) = target.coordinate_range(axis)?;
                let (v0, v1) = (a + b * lo, a + b * hi);
                (v0.min(v1), v0.max(v1))
            }
        };
        if !(lambda > 0.0 && big_lambda.is_finite()) {
            return Err(Error::InvalidWarp(format!(
                "beta must be positive on the target, got range [{lambda}, {big_lambda}]"
            )));
        }
        let warp = Self {
            kind,
            lambda,
            big_lambda,
        };
        warp.certify(target, WARP_CERT_SAMPLES)?;
        Ok(warp)
    }

    /// Cross-check the analytic bounds against a dense sample of `N`.
    pub fn certify(&self, target: &TargetManifold, samples: usize) -> Result<(f64, f64)> {
        if let WarpKind::Constant { .. } = self.kind {
            return Ok((self.lambda, self.big_lambda));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in target.sample_points(samples) {
            let b = self.value(&p);
            lo = lo.min(b);
            hi = hi.max(b);
        }
        if lo < self.lambda - 1e-9 || hi > self.big_lambda + 1e-9 {
            return Err(Error::InvalidWarp(format!(
                "sampled range [{lo}, {hi}] escapes bounds [{}, {}]",
                self.lambda, self.big_lambda
            )));
        }
        Ok((lo, hi))
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(WarpKind::Constant { c }, &TargetManifold::sphere2())
    }

    pub fn kind(&self) -> WarpKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn big_lambda(&self) -> f64 {
        self.big_lambda
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, WarpKind::Constant { .. })
    }

    #[inline]
    pub fn value(&self, p: &[f64]) -> f64 {
        match self.kind {
            WarpKind::Constant { c } => c,
            WarpKind::AffineHeight { a, b, axis } => a + b * p[axis - 1],
        }
    }

    #[inline]
    pub fn gradient_into(&self, out: &mut [f64]) {
        out.fill(0.0);
        if let WarpKind::AffineHeight { b, axis, .. } = self.kind {
            out[axis - 1] = b;
        }
    }

    /// Ambient gradient; constant in `p` for the built-in warps.
    pub fn gradient(&self, k: usize) -> Vec<f64> {
        let mut g = vec![0.0; k];
        self.gradient_into(&mut g);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_examples() {
        let s2 = TargetManifold::sphere2();
        assert!(close(&s2.project(&[0.0, 0.0, 2.0]).unwrap(), &[0.0, 0.0, 1.0], 1e-15));
        assert!(close(&s2.project(&[3.0, 4.0, 0.0]).unwrap(), &[0.6, 0.8, 0.0], 1e-15));
        let t = TargetManifold::CliffordTorus;
        let p = t.project(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(close(&p, &[FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2, 0.0], 1e-15));
        assert!(matches!(
            s2.project(&[0.0, 0.0, 1e-12]),
            Err(Error::ProjectionUndefined(_))
        ));
        assert!(matches!(
            t.project(&[1.0, 0.0, 0.0, 0.0]),
            Err(Error::ProjectionUndefined(_))
        ));
    }

    #[test]
    fn tangent_examples() {
        let s2 = TargetManifold::sphere2();
        let v = s2.tangent_project(&[0.0, 0.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(close(&v, &[1.0, 2.0, 0.0], 1e-15));
        let p = [0.6, 0.0, 0.8];
        assert!(s2.tangent_project(&p, &p).unwrap().iter().all(|c| c.abs() < 1e-15));
        let t = TargetManifold::CliffordTorus;
        let q = [FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2, 0.0];
        let v = t.tangent_project(&q, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15));
        assert!(matches!(
            s2.tangent_project(&[0.0, 0.0, 1.1], &[1.0, 0.0, 0.0]),
            Err(Error::OffManifold(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let s2 = TargetManifold::sphere2();
        assert_eq!(s2.dist_to_manifold(&[0.0, 0.0, 2.0]).unwrap(), 1.0);
        assert!(s2.dist_to_manifold(&[0.6, 0.8, 0.0]).unwrap() < 1e-15);
        let d = TargetManifold::CliffordTorus
            .dist_to_manifold(&[1.0, 0.0, 1.0, 0.0])
            .unwrap();
        // each factor is 1 - 1/√2 away radially
        let oracle = ((1.0 - FRAC_1_SQRT_2).powi(2) * 2.0).sqrt();
        assert!((d - oracle).abs() < 1e-15);
        assert!((d - (SQRT_2 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn warp_examples() {
        let s2 = TargetManifold::sphere2();
        let w = WarpFunction::new(WarpKind::AffineHeight { a: 2.0, b: 1.0, axis: 3 }, &s2).unwrap();
        assert_eq!(w.value(&[0.0, 0.0, 1.0]), 3.0);
        assert_eq!(w.value(&[0.0, 0.0, -1.0]), 1.0);
        assert_eq!((w.lambda(), w.big_lambda()), (1.0, 3.0));
        assert_eq!(w.gradient(3), vec![0.0, 0.0, 1.0]);

        let c = WarpFunction::constant(1.0).unwrap();
        assert_eq!(c.value(&[0.3, 0.1, 0.2]), 1.0);
        assert_eq!(c.gradient(3), vec![0.0; 3]);

        let t = TargetManifold::CliffordTorus;
        let w = WarpFunction::new(WarpKind::AffineHeight { a: 2.0, b: SQRT_2, axis: 1 }, &t).unwrap();
        assert!((w.lambda() - 1.0).abs() < 1e-15 && (w.big_lambda() - 3.0).abs() < 1e-15);
        let (lo, hi) = w.certify(&t, 100_000).unwrap();
        assert!(lo >= 1.0 - 1e-9 && hi <= 3.0 + 1e-9 && lo < 1.001 && hi > 2.999);

        assert!(WarpFunction::new(WarpKind::AffineHeight { a: 1.0, b: 1.0, axis: 3 }, &s2).is_err());
        assert!(WarpFunction::new(WarpKind::AffineHeight { a: 2.0, b: 1.0, axis: 4 }, &s2).is_err());
    }

    fn random_point(t: &TargetManifold, seed: &[f64]) -> Vec<f64> {
        t.project(seed).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn projection_idempotent_and_tangent_projector(
            y in prop::collection::vec(-3.0f64..3.0, 4),
            w in prop::collection::vec(-2.0f64..2.0, 4),
            v in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            for t in [TargetManifold::sphere2(), TargetManifold::CliffordTorus] {
                let k = t.ambient_dim();
                let Ok(p) = t.project(&y[..k]) else { continue };
                let pp = t.project(&p).unwrap();
                prop_assert!(close(&p, &pp, 1e-14));
                let tw = t.tangent_project(&p, &w[..k]).unwrap();
                let ttw = t.tangent_project(&p, &tw).unwrap();
                prop_assert!(close(&tw, &ttw, 1e-12));
                // symmetric: <P w, v> = <w, P v>
                let tv = t.tangent_project(&p, &v[..k]).unwrap();
                prop_assert!((dot(&tw, &v[..k]) - dot(&w[..k], &tv)).abs() < 1e-12);
                // annihilates the normal space: w - P w is normal
                let nrm: Vec<f64> = w[..k].iter().zip(&tw).map(|(a, b)| a - b).collect();
                prop_assert!(norm(&t.tangent_project(&p, &nrm).unwrap()) < 1e-12);
            }
        }
    }

    #[test]
    fn projection_differential_is_tangent_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in [TargetManifold::sphere2(), TargetManifold::CliffordTorus] {
            let k = t.ambient_dim();
            for _ in 0..20 {
                let seed: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let p = random_point(&t, &seed);
                let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let tw = t.tangent_project(&p, &w).unwrap();
                let err = |s: f64| {
                    let moved: Vec<f64> = p.iter().zip(&w).map(|(a, b)| a + s * b).collect();
                    let lin: Vec<f64> = p.iter().zip(&tw).map(|(a, b)| a + s * b).collect();
                    let q = t.project(&moved).unwrap();
                    norm(&q.iter().zip(&lin).map(|(a, b)| a - b).collect::<Vec<_>>())
                };
                let ratio = err(1e-2) / err(1e-3);
                assert!((70.0..=130.0).contains(&ratio), "ratio {ratio}");
            }
        }
    }

    /// Transport `w` around the boundary of an `s × s` square in the angle
    /// chart by repeated tangent projection with length renormalisation.
    fn loop_transport(t: &TargetManifold, chart: impl Fn(f64, f64) -> Vec<f64>, s: f64) -> f64 {
        let steps = 400;
        let (a0, g0) = (0.3, 0.7);
        let mut path = Vec::new();
        for side in 0..4 {
            for k in 0..steps {
                let q = s * k as f64 / steps as f64;
                path.push(match side {
                    0 => (a0 + q, g0),
                    1 => (a0 + s, g0 + q),
                    2 => (a0 + s - q, g0 + s),
                    _ => (a0, g0 + s - q),
                });
            }
        }
        path.push((a0, g0));
        let p0 = chart(a0, g0);
        let w0 = t.tangent_project(&p0, &[0.3, -0.2, 0.5, 0.4][..p0.len()]).unwrap();
        let len0 = norm(&w0);
        let mut w = w0.clone();
        for &(a, g) in &path[1..] {
            let p = chart(a, g);
            w = t.tangent_project(&p, &w).unwrap();
            let l = norm(&w);
            w.iter_mut().for_each(|c| *c *= len0 / l);
        }
        norm(&w.iter().zip(&w0).map(|(a, b)| a - b).collect::<Vec<_>>())
    }

    #[test]
    fn clifford_torus_is_flat_under_transport() {
        let t = TargetManifold::CliffordTorus;
        let chart = |a: f64, g: f64| TargetManifold::torus_point(a, g).to_vec();
        for s in [0.1, 0.05] {
            assert!(loop_transport(&t, chart, s) <= s.powi(3), "s={s}");
        }
        // the round sphere has holonomy of order area * curvature
        let s2 = TargetManifold::sphere2();
        let sph = |a: f64, g: f64| vec![g.sin() * a.cos(), g.sin() * a.sin(), g.cos()];
        let hol = loop_transport(&s2, sph, 0.1);
        assert!(hol > 0.1 * 0.1 * 0.1, "sphere holonomy {hol}");
        assert!(hol > 1e3 * loop_transport(&t, chart, 0.1));
    }

    #[test]
    fn halton_values() {
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(3, 2), 0.75);
        assert!((halton(5, 3) - 7.0 / 9.0).abs() < 1e-15);
    }
}
