//! Latent geometries: Euclidean space, the Poincaré ball and the unit sphere.
//!
//! Each geometry supplies a distance, the map from raw projector output onto
//! the manifold, and a centroid. The ball uses curvature −1:
//!
//! ```text
//! d(x, y) = arccosh(1 + 2‖x − y‖² / ((1 − ‖x‖²)(1 − ‖y‖²)))
//! exp₀(v) = tanh(‖v‖) · v / ‖v‖
//! ```
//!
//! The Riemannian metric behind that distance is the conformal factor
//! `2 / (1 − ‖x‖²)` times the identity; nothing here evaluates it directly.
//!
//! Row-wise differentiable versions (`*_rows`) operate on `[N, n]` tape
//! values and feed the training objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Backward, Tape, Tensor, Var};

/// Ball points are pulled back to this radius before the distance formula.
pub const BALL_MAX_NORM: f64 = 1.0 - 1e-7;
/// Unit-norm tolerance for sphere points.
pub const SPHERE_TOL: f64 = 1e-9;
/// Below this norm a direction is considered undefined.
pub const MIN_DIRECTION_NORM: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Manifold {
    Euclidean,
    Hyperbolic,
    Spherical,
}

impl Manifold {
    pub const ALL: [Manifold; 3] = [
        Manifold::Euclidean,
        Manifold::Hyperbolic,
        Manifold::Spherical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Manifold::Euclidean => "euclidean",
            Manifold::Hyperbolic => "hyperbolic",
            Manifold::Spherical => "spherical",
        }
    }

    /// Maps a raw projector output onto this manifold.
    pub fn embed(self, raw: &[f64]) -> Result<LatentPoint> {
        match self {
            Manifold::Euclidean => LatentPoint::new(self, raw.to_vec()),
            Manifold::Hyperbolic => Ok(exp_origin(raw)),
            Manifold::Spherical => project_sphere(raw),
        }
    }

    /// Differentiable [`Manifold::embed`] over the rows of `[N, n]`.
    pub fn embed_rows(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Manifold::Euclidean => Ok(x),
            Manifold::Hyperbolic => exp_origin_rows(tape, x),
            Manifold::Spherical => normalize_rows(tape, x),
        }
    }

    /// Differentiable distance of each row of `[N, n]` to `center: [n]`.
    pub fn distance_rows(self, tape: &mut Tape, x: Var, center: Var) -> Result<Var> {
        let (sx, sc) = (tape.value(x).shape(), tape.value(center).shape());
        if sx.len() != 2 || sc != [sx[1]] {
            return Err(Error::dim("distance_rows", sx, sc));
        }
        let rule: Box<dyn RowDistance> = match self {
            Manifold::Euclidean => Box::new(EuclideanRows),
            Manifold::Hyperbolic => Box::new(PoincareRows),
            Manifold::Spherical => Box::new(CosineRows),
        };
        let (n, dim) = (sx[0], sx[1]);
        let (xd, cd) = (tape.value(x).data(), tape.value(center).data());
        let out: Vec<f64> = (0..n)
            .map(|i| rule.value(&xd[i * dim..(i + 1) * dim], cd))
            .collect();
        let value = Tensor::new(&[n], out)?;
        Ok(tape.custom(&[x, center], value, Box::new(RowsRule(rule))))
    }
}

impl fmt::Display for Manifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Manifold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Manifold::Euclidean),
            "hyperbolic" => Ok(Manifold::Hyperbolic),
            "spherical" => Ok(Manifold::Spherical),
            other => Err(Error::Config(format!(
                "unknown manifold `{other}` (expected euclidean | hyperbolic | spherical)"
            ))),
        }
    }
}

/// A point on one of the latent manifolds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    manifold: Manifold,
    coords: Vec<f64>,
}

impl LatentPoint {
    pub fn new(manifold: Manifold, coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("non-finite latent coordinate".into()));
        }
        let norm = norm(&coords);
        match manifold {
            Manifold::Euclidean => {}
            Manifold::Hyperbolic if norm >= 1.0 => {
                return Err(Error::Domain(format!(
                    "point with norm {norm} lies outside the open unit ball"
                )))
            }
            Manifold::Spherical if (norm - 1.0).abs() > SPHERE_TOL => {
                return Err(Error::Domain(format!(
                    "point with norm {norm} is not on the unit sphere"
                )))
            }
            _ => {}
        }
        Ok(Self { manifold, coords })
    }

    pub fn manifold(&self) -> Manifold {
        self.manifold
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterStrategy {
    /// Fixed after initialization.
    Static,
    /// Recomputed as the training centroid at every epoch start.
    Dynamic,
}

impl CenterStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            CenterStrategy::Static => "static",
            CenterStrategy::Dynamic => "dynamic",
        }
    }
}

impl FromStr for CenterStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(CenterStrategy::Static),
            "dynamic" => Ok(CenterStrategy::Dynamic),
            other => Err(Error::Config(format!(
                "unknown center strategy `{other}` (expected static | dynamic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterState {
    pub point: LatentPoint,
    pub strategy: CenterStrategy,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("distance", &[a.len()], &[b.len()]));
    }
    Ok(())
}

pub fn dist_euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(euclidean_raw(x, y))
}

fn euclidean_raw(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Exponential map at the origin of the ball, with the image radius capped at
/// [`BALL_MAX_NORM`].
pub fn exp_origin(v: &[f64]) -> LatentPoint {
    let r = norm(v);
    let coords = if r == 0.0 {
        vec![0.0; v.len()]
    } else {
        let radius = r.tanh().min(BALL_MAX_NORM);
        v.iter().map(|x| x * (radius / r)).collect()
    };
    LatentPoint {
        manifold: Manifold::Hyperbolic,
        coords,
    }
}

pub fn dist_hyperbolic(x: &LatentPoint, y: &LatentPoint) -> Result<f64> {
    for p in [x, y] {
        if p.norm() >= 1.0 {
            return Err(Error::Domain(format!(
                "point with norm {} lies outside the open unit ball",
                p.norm()
            )));
        }
    }
    check_dims(&x.coords, &y.coords)?;
    Ok(poincare_raw(&x.coords, &y.coords))
}

/// Scale factor that pulls `v` back inside [`BALL_MAX_NORM`].
fn ball_clip(v: &[f64]) -> f64 {
    let r = norm(v);
    if r > BALL_MAX_NORM {
        BALL_MAX_NORM / r
    } else {
        1.0
    }
}

/// `arccosh(1 + u)` written as `ln1p(u + √(u(u+2)))`, exact near `u = 0`.
fn acosh1p(u: f64) -> f64 {
    let u = u.max(0.0);
    (u + (u * (u + 2.0)).sqrt()).ln_1p()
}

fn poincare_parts(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let sx = ball_clip(x);
    let sy = ball_clip(y);
    let mut delta = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (a, b) = (a * sx, b * sy);
        delta += (a - b) * (a - b);
        nx += a * a;
        ny += b * b;
    }
    (delta, 1.0 - nx, 1.0 - ny, sx, sy)
}

fn poincare_raw(x: &[f64], y: &[f64]) -> f64 {
    let (delta, alpha, beta, _, _) = poincare_parts(x, y);
    acosh1p(2.0 * delta / (alpha * beta))
}

pub fn project_sphere(v: &[f64]) -> Result<LatentPoint> {
    let r = norm(v);
    if r < MIN_DIRECTION_NORM {
        return Err(Error::DegenerateDirection(r));
    }
    Ok(LatentPoint {
        manifold: Manifold::Spherical,
        coords: v.iter().map(|x| x / r).collect(),
    })
}

/// Cosine distance `1 − x·c` between unit vectors, in `[0, 2]`.
pub fn dist_spherical(x: &LatentPoint, c: &LatentPoint) -> Result<f64> {
    for p in [x, c] {
        if (p.norm() - 1.0).abs() > SPHERE_TOL {
            return Err(Error::Domain(format!(
                "point with norm {} is not on the unit sphere",
                p.norm()
            )));
        }
    }
    check_dims(&x.coords, &c.coords)?;
    Ok(cosine_raw(&x.coords, &c.coords))
}

fn cosine_raw(x: &[f64], c: &[f64]) -> f64 {
    (1.0 - dot(x, c)).clamp(0.0, 2.0)
}

/// Distance under the points' shared manifold.
pub fn distance(x: &LatentPoint, y: &LatentPoint) -> Result<f64> {
    if x.manifold != y.manifold {
        return Err(Error::State(format!(
            "points on different manifolds: {} vs {}",
            x.manifold, y.manifold
        )));
    }
    match x.manifold {
        Manifold::Euclidean => dist_euclidean(&x.coords, &y.coords),
        Manifold::Hyperbolic => dist_hyperbolic(x, y),
        Manifold::Spherical => dist_spherical(x, y),
    }
}

/// Arithmetic mean of the coordinates; renormalized to unit length on the
/// sphere (mean direction). On the ball the mean stays inside by convexity.
pub fn centroid(points: &[LatentPoint], manifold: Manifold) -> Result<LatentPoint> {
    let Some(first) = points.first() else {
        return Err(Error::EmptySet("centroid of no points"));
    };
    let dim = first.dim();
    let mut mean = vec![0.0; dim];
    for p in points {
        if p.manifold != manifold {
            return Err(Error::State(format!(
                "centroid on {manifold} given a {} point",
                p.manifold
            )));
        }
        if p.dim() != dim {
            return Err(Error::dim("centroid", &[dim], &[p.dim()]));
        }
        mean.iter_mut().zip(&p.coords).for_each(|(m, c)| *m += c);
    }
    let inv = 1.0 / points.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    match manifold {
        Manifold::Spherical => project_sphere(&mean),
        _ => LatentPoint::new(manifold, mean),
    }
}

// ---------------------------------------------------------------------------
// Differentiable row-wise maps

struct ExpOriginRows;

impl Backward for ExpOriginRows {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let dim = x.shape()[1];
        let mut gx = vec![0.0; x.numel()];
        for (i, (row, grow)) in x.data().chunks(dim).zip(g.chunks(dim)).enumerate() {
            let out = &mut gx[i * dim..(i + 1) * dim];
            let r = norm(row);
            if r == 0.0 {
                out.copy_from_slice(grow);
                continue;
            }
            let gv = dot(grow, row);
            if r.tanh() > BALL_MAX_NORM {
                // y = R·v/r
                let k = BALL_MAX_NORM / r;
                for j in 0..dim {
                    out[j] = k * (grow[j] - row[j] * gv / (r * r));
                }
                continue;
            }
            // y = f(r)·v with f = tanh(r)/r; ∇ = f·g + (f'(r)/r)(g·v)·v
            let f = r.tanh() / r;
            let fp_over_r = if r < 1e-3 {
                -2.0 / 3.0 + 8.0 * r * r / 15.0
            } else {
                let sech2 = 1.0 - r.tanh().powi(2);
                (r * sech2 - r.tanh()) / (r * r * r)
            };
            for j in 0..dim {
                out[j] = f * grow[j] + fp_over_r * gv * row[j];
            }
        }
        vec![Some(gx)]
    }
}

pub fn exp_origin_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let src = tape.value(x);
    let s = src.shape();
    if s.len() != 2 {
        return Err(Error::dim("exp_origin_rows", s, &[]));
    }
    let dim = s[1];
    let mut out = Vec::with_capacity(src.numel());
    for row in src.data().chunks(dim) {
        out.extend_from_slice(exp_origin(row).coords());
    }
    let value = Tensor::new(s, out)?;
    Ok(tape.custom(&[x], value, Box::new(ExpOriginRows)))
}

struct NormalizeRows;

impl Backward for NormalizeRows {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let dim = x.shape()[1];
        let mut gx = vec![0.0; x.numel()];
        for i in 0..x.shape()[0] {
            let range = i * dim..(i + 1) * dim;
            let r = norm(&x.data()[range.clone()]);
            let y = &output.data()[range.clone()];
            let grow = &g[range.clone()];
            let yg = dot(y, grow);
            for (j, o) in gx[range].iter_mut().enumerate() {
                *o = (grow[j] - y[j] * yg) / r;
            }
        }
        vec![Some(gx)]
    }
}

pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let src = tape.value(x);
    let s = src.shape();
    if s.len() != 2 {
        return Err(Error::dim("normalize_rows", s, &[]));
    }
    let dim = s[1];
    let mut out = Vec::with_capacity(src.numel());
    for row in src.data().chunks(dim) {
        out.extend_from_slice(project_sphere(row)?.coords());
    }
    let value = Tensor::new(s, out)?;
    Ok(tape.custom(&[x], value, Box::new(NormalizeRows)))
}

/// Distance of one row to the center with its gradients.
trait RowDistance {
    fn value(&self, x: &[f64], c: &[f64]) -> f64;
    /// Writes `∂d/∂x` and `∂d/∂c`.
    fn grad(&self, x: &[f64], c: &[f64], gx: &mut [f64], gc: &mut [f64]);
}

struct EuclideanRows;

impl RowDistance for EuclideanRows {
    fn value(&self, x: &[f64], c: &[f64]) -> f64 {
        euclidean_raw(x, c)
    }

    fn grad(&self, x: &[f64], c: &[f64], gx: &mut [f64], gc: &mut [f64]) {
        let d = euclidean_raw(x, c);
        if d == 0.0 {
            gx.fill(0.0);
            gc.fill(0.0);
            return;
        }
        for j in 0..x.len() {
            gx[j] = (x[j] - c[j]) / d;
            gc[j] = -gx[j];
        }
    }
}

struct PoincareRows;

impl RowDistance for PoincareRows {
    fn value(&self, x: &[f64], c: &[f64]) -> f64 {
        poincare_raw(x, c)
    }

    fn grad(&self, x: &[f64], c: &[f64], gx: &mut [f64], gc: &mut [f64]) {
        let (delta, alpha, beta, sx, sy) = poincare_parts(x, c);
        if delta == 0.0 {
            gx.fill(0.0);
            gc.fill(0.0);
            return;
        }
        // d = arccosh(z), z = 1 + u, u = 2δ/(αβ); dd/dz = 1/√(u(u+2))
        let u = 2.0 * delta / (alpha * beta);
        let dd_dz = 1.0 / (u * (u + 2.0)).sqrt();
        let ab = alpha * beta;
        for j in 0..x.len() {
            let (xj, cj) = (x[j] * sx, c[j] * sy);
            let dzx = 4.0 * (xj - cj) / ab + 4.0 * delta * xj / (alpha * ab);
            let dzc = -4.0 * (xj - cj) / ab + 4.0 * delta * cj / (beta * ab);
            gx[j] = dd_dz * dzx * sx;
            gc[j] = dd_dz * dzc * sy;
        }
    }
}

struct CosineRows;

impl RowDistance for CosineRows {
    fn value(&self, x: &[f64], c: &[f64]) -> f64 {
        cosine_raw(x, c)
    }

    fn grad(&self, x: &[f64], c: &[f64], gx: &mut [f64], gc: &mut [f64]) {
        for j in 0..x.len() {
            gx[j] = -c[j];
            gc[j] = -x[j];
        }
    }
}

struct RowsRule(Box<dyn RowDistance>);

impl Backward for RowsRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, c) = (inputs[0], inputs[1]);
        let dim = c.numel();
        let mut gx = vec![0.0; x.numel()];
        let mut gc = vec![0.0; dim];
        let mut row_gc = vec![0.0; dim];
        for (i, gi) in g.iter().enumerate() {
            let range = i * dim..(i + 1) * dim;
            self.0
                .grad(&x.data()[range.clone()], c.data(), &mut gx[range.clone()], &mut row_gc);
            gx[range].iter_mut().for_each(|v| *v *= gi);
            gc.iter_mut().zip(&row_gc).for_each(|(a, b)| *a += gi * b);
        }
        vec![Some(gx), Some(gc)]
    }
}
