//! Ordinary kriging over a k-nearest neighborhood, with empirical
//! semivariogram estimation and weighted least-squares model fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RemError, Result};
use crate::geometry::CartesianPoint;
use crate::io::{MeasurementSet, Predictor};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariogramModel {
    #[default]
    Exponential,
    Spherical,
    Gaussian,
}

impl VariogramModel {
    /// Normalized structure function, 0 at the origin and 1 at infinity.
    pub fn shape(self, h: f64, range: f64) -> f64 {
        let r = h / range;
        match self {
            VariogramModel::Exponential => 1.0 - (-r).exp(),
            VariogramModel::Spherical => {
                if r >= 1.0 {
                    1.0
                } else {
                    1.5 * r - 0.5 * r * r * r
                }
            }
            VariogramModel::Gaussian => 1.0 - (-r * r).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLag {
    /// Mean separation of the pairs in the bin.
    pub lag: f64,
    pub gamma: f64,
    pub pairs: usize,
}

/// `gamma(h) = nugget + (sill - nugget) * shape(h / range_m)` for `h > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Semivariogram {
    pub model: VariogramModel,
    pub nugget: f64,
    pub sill: f64,
    pub range_m: f64,
    pub empirical: Vec<EmpiricalLag>,
}

impl Semivariogram {
    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            0.0
        } else {
            self.nugget + (self.sill - self.nugget) * self.model.shape(h, self.range_m)
        }
    }

    pub fn covariance(&self, h: f64) -> f64 {
        self.sill - self.gamma(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KrigingConfig {
    pub neighborhood_k: usize,
    pub lag_width_m: f64,
    pub max_lag_m: f64,
    pub model: VariogramModel,
    /// Multiplier on vertical separations.
    pub anisotropy: f64,
}

impl Default for KrigingConfig {
    fn default() -> Self {
        Self { neighborhood_k: 64, lag_width_m: 10.0, max_lag_m: 200.0, model: VariogramModel::Exponential, anisotropy: 1.0 }
    }
}

impl KrigingConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut e = Vec::new();
        if self.neighborhood_k < 3 {
            e.push(format!("{prefix}.neighborhood_k must be >= 3"));
        }
        if !(self.lag_width_m > 0.0) {
            e.push(format!("{prefix}.lag_width_m must be > 0"));
        }
        if !(self.max_lag_m > self.lag_width_m) {
            e.push(format!("{prefix}.max_lag_m must exceed lag_width_m"));
        }
        if !(self.anisotropy > 0.0) {
            e.push(format!("{prefix}.anisotropy must be > 0"));
        }
        e
    }
}

fn scaled_distance(a: &CartesianPoint, b: &CartesianPoint, anisotropy: f64) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, (a.z - b.z) * anisotropy);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Classical estimator over bins `[j w, (j + 1) w)` up to `max_lag_m`.
/// Empty bins are omitted.
pub fn empirical_semivariogram(
    data: &MeasurementSet,
    lag_width_m: f64,
    max_lag_m: f64,
    anisotropy: f64,
) -> Result<Vec<EmpiricalLag>> {
    if data.len() < 2 {
        return Err(RemError::Empty("semivariogram needs at least 2 points".to_string()));
    }
    if !(lag_width_m > 0.0 && max_lag_m > 0.0) {
        return Err(RemError::Domain("lag width and max lag must be > 0".to_string()));
    }
    let nbins = (max_lag_m / lag_width_m).ceil() as usize;
    let pts = data.positions();
    let z = data.values();
    let n = pts.len();
    // fixed chunks keep the summation order independent of thread count
    let chunk = 64;
    let partial = parallel::map_range(n.div_ceil(chunk), |c| {
        let mut acc = vec![(0.0f64, 0.0f64, 0usize); nbins];
        for i in c * chunk..((c + 1) * chunk).min(n) {
            for j in i + 1..n {
                let d = scaled_distance(&pts[i], &pts[j], anisotropy);
                if d >= max_lag_m {
                    continue;
                }
                let b = (d / lag_width_m) as usize;
                if b < nbins {
                    let dz = z[i] - z[j];
                    acc[b].0 += d;
                    acc[b].1 += dz * dz;
                    acc[b].2 += 1;
                }
            }
        }
        Ok(acc)
    })?;
    let mut total = vec![(0.0, 0.0, 0usize); nbins];
    for acc in partial {
        for (t, a) in total.iter_mut().zip(acc) {
            t.0 += a.0;
            t.1 += a.1;
            t.2 += a.2;
        }
    }
    Ok(total
        .into_iter()
        .filter(|t| t.2 > 0)
        .map(|(d, sq, k)| EmpiricalLag { lag: d / k as f64, gamma: sq / (2.0 * k as f64), pairs: k })
        .collect())
}

/// Nugget and partial sill for a fixed range, clamped to be non-negative.
fn fit_linear(emp: &[EmpiricalLag], model: VariogramModel, range: f64) -> (f64, f64, f64) {
    let (mut sw, mut sf, mut sff, mut sg, mut sfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for e in emp {
        let w = e.pairs as f64;
        let f = model.shape(e.lag, range);
        sw += w;
        sf += w * f;
        sff += w * f * f;
        sg += w * e.gamma;
        sfg += w * f * e.gamma;
    }
    let det = sw * sff - sf * sf;
    let (mut c0, mut c1) = if det.abs() > 1e-12 * sw * sff.max(1e-300) {
        ((sff * sg - sf * sfg) / det, (sw * sfg - sf * sg) / det)
    } else {
        (0.0, if sff > 0.0 { sfg / sff } else { 0.0 })
    };
    if c0 < 0.0 {
        c0 = 0.0;
        c1 = if sff > 0.0 { (sfg / sff).max(0.0) } else { 0.0 };
    }
    if c1 < 0.0 {
        c1 = 0.0;
        c0 = (sg / sw).max(0.0);
    }
    let sse: f64 = emp
        .iter()
        .map(|e| e.pairs as f64 * (c0 + c1 * model.shape(e.lag, range) - e.gamma).powi(2))
        .sum();
    (c0, c1, sse)
}

/// Weighted least-squares fit (weights are pair counts). The range is found
/// by a log-spaced scan refined with golden-section search; nugget and
/// partial sill are solved in closed form at each candidate range.
pub fn fit_variogram(empirical: &[EmpiricalLag], model: VariogramModel) -> Result<Semivariogram> {
    if empirical.len() < 3 {
        return Err(RemError::Numerical(format!(
            "variogram fit needs at least 3 non-empty lags, got {}",
            empirical.len()
        )));
    }
    if empirical.iter().any(|e| !(e.gamma.is_finite() && e.lag > 0.0)) {
        return Err(RemError::Numerical("empirical variogram has non-finite or zero lags".to_string()));
    }
    let max_lag = empirical.iter().map(|e| e.lag).fold(0.0, f64::max);
    let min_lag = empirical.iter().map(|e| e.lag).fold(f64::INFINITY, f64::min);
    if empirical.iter().all(|e| e.gamma == 0.0) {
        return Ok(Semivariogram { model, nugget: 0.0, sill: 0.0, range_m: max_lag, empirical: empirical.to_vec() });
    }

    let (lo, hi) = ((0.05 * min_lag).ln(), (20.0 * max_lag).ln());
    let sse = |t: f64| fit_linear(empirical, model, t.exp()).2;
    let steps = 400;
    let grid: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
    let best = (0..=steps).min_by(|&a, &b| sse(grid[a]).total_cmp(&sse(grid[b]))).unwrap();
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (sse(x1), sse(x2));
    for _ in 0..200 {
        if (b - a).abs() < 1e-14 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = sse(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = sse(x2);
        }
    }
    let t = if f1 <= f2 { x1 } else { x2 };
    let t = if sse(grid[best]) < sse(t) { grid[best] } else { t };
    let range = t.exp();
    let (c0, c1, err) = fit_linear(empirical, model, range);
    if !(err.is_finite() && range.is_finite()) {
        return Err(RemError::Numerical(format!("variogram fit failed: sse={err}, range={range}")));
    }
    Ok(Semivariogram { model, nugget: c0, sill: c0 + c1, range_m: range, empirical: empirical.to_vec() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingEstimate {
    pub estimate: f64,
    pub variance: f64,
    /// Indices into the data set, nearest first.
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    /// Lagrange multiplier of the unbiasedness constraint.
    pub lagrange: f64,
    pub has_negative_weights: bool,
}

/// Indices of the `k` nearest points, nearest first, ties by index.
fn nearest(points: &[CartesianPoint], q: &CartesianPoint, k: usize, anisotropy: f64) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (scaled_distance(p, q, anisotropy), i)).collect();
    let k = k.min(d.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|x| x.1).collect()
}

/// Ordinary kriging in covariance form:
/// `[C 1; 1' 0] [w; mu] = [c0; 1]`, variance `C(0) - w'c0 - mu`.
pub fn krige_point(
    q: &CartesianPoint,
    points: &[CartesianPoint],
    values: &[f64],
    vg: &Semivariogram,
    cfg: &KrigingConfig,
) -> Result<KrigingEstimate> {
    if points.is_empty() || points.len() != values.len() {
        return Err(RemError::Empty("kriging needs a non-empty data set".to_string()));
    }
    let nb = nearest(points, q, cfg.neighborhood_k, cfg.anisotropy);
    let n = nb.len();
    if vg.sill <= 0.0 {
        // no spatial variance: every unbiased estimator is exact
        let w = vec![1.0 / n as f64; n];
        let est = nb.iter().map(|&i| values[i]).sum::<f64>() / n as f64;
        return Ok(KrigingEstimate { estimate: est, variance: 0.0, neighbors: nb, weights: w, lagrange: 0.0, has_negative_weights: false });
    }
    let dist = |a: usize, b: usize| scaled_distance(&points[a], &points[b], cfg.anisotropy);
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = vg.covariance(dist(nb[i], nb[j]));
        }
        a[(i, n)] = 1.0;
        a[(n, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n + 1);
    for i in 0..n {
        rhs[i] = vg.covariance(scaled_distance(&points[nb[i]], q, cfg.anisotropy));
    }
    rhs[n] = 1.0;

    let mut jitter = 0.0;
    let sol = loop {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(s) = m.lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite())) {
            break s;
        }
        jitter = if jitter == 0.0 { 1e-10 * vg.sill } else { jitter * 100.0 };
        if jitter > 1e-2 * vg.sill {
            return Err(RemError::Numerical("kriging system is singular after jitter".to_string()));
        }
    };
    let weights: Vec<f64> = sol.iter().take(n).copied().collect();
    let mu = sol[n];
    let estimate = weights.iter().zip(&nb).map(|(w, &i)| w * values[i]).sum();
    let variance = (vg.sill - weights.iter().zip(rhs.iter()).map(|(w, c)| w * c).sum::<f64>() - mu).max(0.0);
    let has_negative_weights = weights.iter().any(|&w| w < 0.0);
    Ok(KrigingEstimate { estimate, variance, neighbors: nb, weights, lagrange: mu, has_negative_weights })
}

/// A fitted kriging interpolator over a measurement set.
#[derive(Debug, Clone)]
pub struct Kriging {
    pub points: Vec<CartesianPoint>,
    pub values: Vec<f64>,
    pub variogram: Semivariogram,
    pub config: KrigingConfig,
}

impl Kriging {
    pub fn fit(data: &MeasurementSet, cfg: &KrigingConfig) -> Result<Kriging> {
        let p = cfg.problems("kriging");
        if !p.is_empty() {
            return Err(RemError::Config(p));
        }
        let emp = empirical_semivariogram(data, cfg.lag_width_m, cfg.max_lag_m, cfg.anisotropy)?;
        let variogram = fit_variogram(&emp, cfg.model)?;
        log::info!(
            "variogram {:?}: nugget {:.3} sill {:.3} range {:.1} m",
            variogram.model,
            variogram.nugget,
            variogram.sill,
            variogram.range_m
        );
        Ok(Kriging { points: data.positions(), values: data.values(), variogram, config: cfg.clone() })
    }

    pub fn estimate(&self, q: &CartesianPoint) -> Result<KrigingEstimate> {
        krige_point(q, &self.points, &self.values, &self.variogram, &self.config)
    }
}

impl Predictor for Kriging {
    fn predict(&self, p: &CartesianPoint) -> Result<f64> {
        Ok(self.estimate(p)?.estimate)
    }
}
