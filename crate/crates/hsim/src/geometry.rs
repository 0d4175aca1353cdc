//! Similarity and hyperbolic-geometry kernels.
//!
//! Two similarity modes drive every loss in this crate: plain cosine
//! similarity, and a Poincare-ball mode that maps embeddings onto the unit
//! ball with an exponential map and scores pairs by `exp(-geodesic distance)`
//! so values stay in `(0, 1]` and remain comparable with cosine margins.
//!
//! All functions here are pure; gradients are analytic and exercised by the
//! finite-difference suite in `losses`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors (cosine undefined).
pub const MIN_NORM: f64 = 1e-12;

/// Ball membership guard: a point is accepted only if its norm is strictly
/// below `1 - BALL_EPS`. Keeps acosh arguments away from catastrophic
/// cancellation at the boundary.
pub const BALL_EPS: f64 = 1e-9;

/// Radius the exponential map projects onto when the mapped point would
/// otherwise leave the unit ball (possible for small curvature).
const PROJECT_NORM: f64 = 1.0 - 1e-7;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm_sq(u: &[f64]) -> f64 {
    dot(u, u)
}

pub fn norm(u: &[f64]) -> f64 {
    norm_sq(u).sqrt()
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(())
}

/// Cosine similarity `u.v / (|u||v|)`, clamped to `[-1, 1]` so downstream
/// margin arithmetic never sees an ulp overshoot.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    if nu < MIN_NORM || nv < MIN_NORM {
        return Err(Error::ZeroVector { min: MIN_NORM });
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity plus gradients with respect to both arguments.
pub fn cosine_sim_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dims(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    if nu < MIN_NORM || nv < MIN_NORM {
        return Err(Error::ZeroVector { min: MIN_NORM });
    }
    let s_raw = dot(u, v) / (nu * nv);
    let s = s_raw.clamp(-1.0, 1.0);
    // d s / d u = v/(|u||v|) - s u/|u|^2 ; symmetric in v.
    let gu: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - s_raw * ui / (nu * nu))
        .collect();
    let gv: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| ui / (nu * nv) - s_raw * vi / (nv * nv))
        .collect();
    Ok((s, gu, gv))
}

/// A point strictly inside the unit Poincare ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: f64,
}

impl BallPoint {
    pub fn new(coords: Vec<f64>, curvature: f64) -> Result<Self> {
        if curvature < 0.0 || !curvature.is_finite() {
            return Err(Error::NonFinite {
                context: "ball curvature",
            });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "ball point coordinates",
            });
        }
        let n = norm(&coords);
        if n >= 1.0 - BALL_EPS {
            return Err(Error::OutsideBall { norm: n });
        }
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: f64) -> Self {
        Self {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }
}

/// Stable `acosh(1 + e)` for `e >= 0`.
fn acosh1p(e: f64) -> f64 {
    // acosh(1+e) = ln(1 + e + sqrt(e (e + 2))); ln_1p keeps precision for small e.
    (e + (e * (e + 2.0)).sqrt()).ln_1p()
}

/// Geodesic distance on the unit Poincare ball.
pub fn poincare_distance(u: &BallPoint, v: &BallPoint) -> Result<f64> {
    check_dims(&u.coords, &v.coords)?;
    Ok(poincare_distance_raw(&u.coords, &v.coords))
}

/// Distance on raw coordinates assumed to already satisfy the ball guard.
fn poincare_distance_raw(u: &[f64], v: &[f64]) -> f64 {
    let diff_sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    let bu = 1.0 - norm_sq(u);
    let bv = 1.0 - norm_sq(v);
    acosh1p(2.0 * diff_sq / (bu * bv))
}

/// Distance plus gradients with respect to both ball points.
fn poincare_distance_with_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let dim = u.len();
    let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    let a = norm_sq(&diff);
    if a == 0.0 {
        return (0.0, vec![0.0; dim], vec![0.0; dim]);
    }
    let bu = 1.0 - norm_sq(u);
    let bv = 1.0 - norm_sq(v);
    let e = 2.0 * a / (bu * bv);
    let d = acosh1p(e);
    // d(acosh(1+e))/de = 1/sqrt(e(e+2))
    let dd_de = 1.0 / (e * (e + 2.0)).sqrt();
    let gu: Vec<f64> = (0..dim)
        .map(|i| dd_de * (4.0 * diff[i] / (bu * bv) + 4.0 * a * u[i] / (bu * bu * bv)))
        .collect();
    let gv: Vec<f64> = (0..dim)
        .map(|i| dd_de * (-4.0 * diff[i] / (bu * bv) + 4.0 * a * v[i] / (bu * bv * bv)))
        .collect();
    (d, gu, gv)
}

/// Radial factor `tanh(y)/y` with a series fallback near zero.
fn tanh_ratio(y: f64) -> f64 {
    if y < 1e-4 {
        1.0 - y * y / 3.0 + 2.0 * y.powi(4) / 15.0
    } else {
        y.tanh() / y
    }
}

/// Derivative of `n -> tanh(s n)/(s n)` with respect to `n`, at `y = s n`.
fn tanh_ratio_deriv(y: f64, s: f64) -> f64 {
    if y < 1e-4 {
        s * (-2.0 * y / 3.0 + 8.0 * y.powi(3) / 15.0)
    } else {
        let t = y.tanh();
        let sech2 = 1.0 - t * t;
        s * (y * sech2 - t) / (y * y)
    }
}

/// Saved state for backpropagating through [`exp_map`].
struct ExpMapTape {
    x: Vec<f64>,
    n: f64,
    f: f64,
    fp: f64,
    v: Vec<f64>,
    denom: f64,
    tau: f64,
    /// `Some(raw norm)` when the mapped point was projected back onto the ball.
    clamp: Option<f64>,
}

impl ExpMapTape {
    /// Pulls a gradient with respect to the ball point back to the input vector.
    fn backprop(&self, h: &[f64]) -> Vec<f64> {
        let dim = h.len();
        // Through the projection, if it fired: z -> R z/|z|.
        let h = match self.clamp {
            None => h.to_vec(),
            Some(raw_norm) => {
                let z_unclamped: Vec<f64> = self.v.iter().map(|vi| vi / self.denom).collect();
                let zh = dot(&z_unclamped, h) / (raw_norm * raw_norm);
                (0..dim)
                    .map(|i| PROJECT_NORM / raw_norm * (h[i] - z_unclamped[i] * zh))
                    .collect()
            }
        };
        // Through z = v / (1 + 2 tau |v|^2).
        let vh = dot(&self.v, &h);
        let gv: Vec<f64> = (0..dim)
            .map(|i| h[i] / self.denom - 4.0 * self.tau * vh * self.v[i] / (self.denom * self.denom))
            .collect();
        // Through v = f(n) x.
        if self.n == 0.0 {
            return gv;
        }
        let xg = dot(&self.x, &gv);
        (0..dim)
            .map(|i| self.f * gv[i] + self.fp / self.n * xg * self.x[i])
            .collect()
    }
}

fn exp_map_inner(x: &[f64], tau: f64) -> Result<(BallPoint, ExpMapTape)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::NonFinite {
            context: "exp map curvature",
        });
    }
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: "exp map input",
        });
    }
    let s = tau.sqrt();
    let n = norm(x);
    let y = s * n;
    let f = tanh_ratio(y);
    let fp = if n == 0.0 { 0.0 } else { tanh_ratio_deriv(y, s) };
    let v: Vec<f64> = x.iter().map(|xi| f * xi).collect();
    let w = norm_sq(&v);
    let denom = 1.0 + 2.0 * tau * w;
    let raw: Vec<f64> = v.iter().map(|vi| vi / denom).collect();
    let raw_norm = norm(&raw);
    let (coords, clamp) = if raw_norm >= PROJECT_NORM {
        let scale = PROJECT_NORM / raw_norm;
        (raw.iter().map(|c| c * scale).collect(), Some(raw_norm))
    } else {
        (raw, None)
    };
    let point = BallPoint {
        coords,
        curvature: tau,
    };
    let tape = ExpMapTape {
        x: x.to_vec(),
        n,
        f,
        fp,
        v,
        denom,
        tau,
        clamp,
    };
    Ok((point, tape))
}

/// Exponential map onto the Poincare ball:
/// `v = tanh(sqrt(tau) |x|) x / (sqrt(tau) |x|)`, result `v / (1 + 2 tau |v|^2)`.
///
/// The zero vector maps to the origin. For small curvature the raw image can
/// leave the unit ball, in which case the point is radially projected just
/// inside the boundary.
pub fn exp_map(x: &[f64], tau: f64) -> Result<BallPoint> {
    exp_map_inner(x, tau).map(|(p, _)| p)
}

/// Textbook exponential map at the origin, `tanh(sqrt(tau)|x|) x/(sqrt(tau)|x|)`,
/// without the extra denominator of [`exp_map`]. Exposed for comparison runs.
pub fn exp_map_standard(x: &[f64], tau: f64) -> Result<BallPoint> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::NonFinite {
            context: "exp map curvature",
        });
    }
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: "exp map input",
        });
    }
    let s = tau.sqrt();
    let n = norm(x);
    let f = tanh_ratio(s * n);
    let raw: Vec<f64> = x.iter().map(|xi| f * xi).collect();
    let raw_norm = norm(&raw);
    let coords = if raw_norm >= PROJECT_NORM {
        let scale = PROJECT_NORM / raw_norm;
        raw.iter().map(|c| c * scale).collect()
    } else {
        raw
    };
    Ok(BallPoint {
        coords,
        curvature: tau,
    })
}

/// Which pairwise similarity the losses and statistics operate on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Cosine similarity, values in `[-1, 1]`.
    Cosine,
    /// `exp(-d)` for the geodesic distance between exp-mapped points,
    /// values in `(0, 1]`.
    NegExpPoincare { curvature: f64 },
}

impl SimilarityKind {
    pub fn similarity(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        match *self {
            SimilarityKind::Cosine => cosine_sim(u, v),
            SimilarityKind::NegExpPoincare { curvature } => {
                let p = exp_map(u, curvature)?;
                let q = exp_map(v, curvature)?;
                check_dims(&p.coords, &q.coords)?;
                Ok((-poincare_distance_raw(&p.coords, &q.coords)).exp())
            }
        }
    }

    /// Similarity plus gradients with respect to the raw embeddings
    /// (including the chain through the exponential map in hyperbolic mode).
    pub fn similarity_with_grad(&self, u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        match *self {
            SimilarityKind::Cosine => cosine_sim_with_grad(u, v),
            SimilarityKind::NegExpPoincare { curvature } => {
                check_dims(u, v)?;
                let (p, tape_u) = exp_map_inner(u, curvature)?;
                let (q, tape_v) = exp_map_inner(v, curvature)?;
                let (d, gd_p, gd_q) = poincare_distance_with_grad(&p.coords, &q.coords);
                let s = (-d).exp();
                let hu: Vec<f64> = gd_p.iter().map(|g| -s * g).collect();
                let hv: Vec<f64> = gd_q.iter().map(|g| -s * g).collect();
                Ok((s, tape_u.backprop(&hu), tape_v.backprop(&hv)))
            }
        }
    }
}

/// Unified similarity entry point (see [`SimilarityKind`]).
pub fn embedding_similarity(u: &[f64], v: &[f64], kind: SimilarityKind) -> Result<f64> {
    kind.similarity(u, v)
}

/// Raw `-distance` score, the unbounded alternative to `exp(-d)`.
/// Not wired into [`SimilarityKind`]; exposed for experimentation.
pub fn neg_distance_similarity(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    let p = exp_map(u, tau)?;
    let q = exp_map(v, tau)?;
    check_dims(&p.coords, &q.coords)?;
    Ok(-poincare_distance_raw(&p.coords, &q.coords))
}
