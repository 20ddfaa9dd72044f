//! Radial correlogram and error metrics.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{RemError, Result};
use crate::geometry::{angular_bin, to_spherical, AngularBinIndex, DEFAULT_ANGULAR_RES};
use crate::io::{MeasurementSet, Predictor};
use crate::kriging::{Kriging, KrigingConfig};
use crate::model::EncoderModel;
use crate::parallel;
use crate::training::{finetune, StageConfig};

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(RemError::Shape(format!("{} predictions for {} truth values", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(RemError::Empty("no values to score".to_string()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Median of absolute errors; the mean of the middle two for even counts.
pub fn median_ae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let mut e: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    e.sort_by(f64::total_cmp);
    let n = e.len();
    Ok(if n % 2 == 1 { e[n / 2] } else { 0.5 * (e[n / 2 - 1] + e[n / 2]) })
}

pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    if truth.len() < 2 {
        return Err(RemError::Domain("undefined R²: fewer than 2 points".to_string()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(RemError::Domain("undefined R²: truth is constant".to_string()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_db: f64,
    pub mae_db: f64,
    pub median_ae_db: f64,
    /// `None` when the truth is constant or has a single value.
    pub r_squared: Option<f64>,
    pub n_points: usize,
}

impl MetricsReport {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
        let report = MetricsReport {
            rmse_db: rmse(pred, truth)?,
            mae_db: mae(pred, truth)?,
            median_ae_db: median_ae(pred, truth)?,
            r_squared: r_squared(pred, truth).ok(),
            n_points: pred.len(),
        };
        debug_assert!(report.rmse_db >= report.mae_db * (1.0 - 1e-12));
        Ok(report)
    }

    pub const CSV_HEADER: &'static str = "label,n_points,rmse_db,mae_db,median_ae_db,r_squared";

    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{},{},{},{},{}",
            self.n_points,
            self.rmse_db,
            self.mae_db,
            self.median_ae_db,
            self.r_squared.map(|r| r.to_string()).unwrap_or_default()
        )
    }
}

pub fn write_metrics_csv(rows: &[(String, MetricsReport)], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", MetricsReport::CSV_HEADER)?;
    for (label, r) in rows {
        writeln!(w, "{}", r.csv_row(label))?;
    }
    Ok(())
}

/// Scores a predictor on a measurement set.
pub fn evaluate(predictor: &dyn Predictor, test: &MeasurementSet) -> Result<MetricsReport> {
    let pred = predictor.predict_many(&test.positions())?;
    MetricsReport::compute(&pred, &test.values())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Center and scale by each angular group's own mean and variance.
    #[default]
    Group,
    /// Center and scale by the mean and variance of the whole data set.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelogramConfig {
    pub angular_res: f64,
    pub radial_bin_m: f64,
    pub max_lag_m: Option<f64>,
    pub normalization: Normalization,
}

impl Default for CorrelogramConfig {
    fn default() -> Self {
        Self { angular_res: DEFAULT_ANGULAR_RES, radial_bin_m: 5.0, max_lag_m: None, normalization: Normalization::Group }
    }
}

impl CorrelogramConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.angular_res > 0.0) {
            e.push(format!("{prefix}.angular_res must be > 0"));
        }
        if !(self.radial_bin_m > 0.0) {
            e.push(format!("{prefix}.radial_bin_m must be > 0"));
        }
        if self.max_lag_m.is_some_and(|m| !(m > 0.0)) {
            e.push(format!("{prefix}.max_lag_m must be > 0"));
        }
        e
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelogramDiagnostics {
    pub groups: usize,
    pub groups_used: usize,
    pub skipped_single_point: usize,
    pub skipped_zero_variance: usize,
    /// Points at the base station, which have no direction.
    pub skipped_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelogramResult {
    /// Centers of the radial-separation bins that received pairs, ascending.
    pub lag_m: Vec<f64>,
    pub correlation: Vec<f64>,
    pub pairs: Vec<usize>,
    pub angular_res: f64,
    pub radial_bin_m: f64,
    pub diagnostics: CorrelogramDiagnostics,
}

impl CorrelogramResult {
    /// `lag_m,correlation,pairs`
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "lag_m,correlation,pairs")?;
        for i in 0..self.lag_m.len() {
            writeln!(w, "{},{},{}", self.lag_m[i], self.correlation[i], self.pairs[i])?;
        }
        Ok(())
    }

    /// Correlation of the bin containing separation `d`, if it has pairs.
    pub fn at(&self, d: f64) -> Option<f64> {
        let b = (d / self.radial_bin_m).floor();
        let center = (b + 0.5) * self.radial_bin_m;
        self.lag_m.iter().position(|&l| (l - center).abs() < 1e-9 * self.radial_bin_m.max(1.0)).map(|i| self.correlation[i])
    }
}

/// Groups points by angular bin, pools normalized centered products of every
/// within-group pair by radial separation `|rho_i - rho_j|`, and averages each
/// separation bin over all pairs that land in it.
pub fn radial_correlogram(data: &MeasurementSet, cfg: &CorrelogramConfig) -> Result<CorrelogramResult> {
    let p = cfg.problems("correlogram");
    if !p.is_empty() {
        return Err(RemError::Config(p));
    }
    let mut diag = CorrelogramDiagnostics::default();
    let mut groups: BTreeMap<AngularBinIndex, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &data.records {
        match to_spherical(&r.position) {
            Ok(s) => groups.entry(angular_bin(&s, cfg.angular_res)?).or_default().push((s.rho, r.rsrp_dbm)),
            Err(_) => diag.skipped_points += 1,
        }
    }
    diag.groups = groups.len();
    let (g_mean, g_var) = {
        let v = data.values();
        let n = v.len().max(1) as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    };

    let mut usable = Vec::new();
    for pts in groups.into_values() {
        if pts.len() < 2 {
            diag.skipped_single_point += 1;
            continue;
        }
        let n = pts.len() as f64;
        let (mean, var) = match cfg.normalization {
            Normalization::Group => {
                let m = pts.iter().map(|p| p.1).sum::<f64>() / n;
                (m, pts.iter().map(|p| (p.1 - m).powi(2)).sum::<f64>() / n)
            }
            Normalization::Global => (g_mean, g_var),
        };
        if !(var > 0.0) {
            diag.skipped_zero_variance += 1;
            continue;
        }
        usable.push((pts, mean, var));
    }
    diag.groups_used = usable.len();

    let width = cfg.radial_bin_m;
    let partial = parallel::map_collect(&usable, |(pts, mean, var)| {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let d = (pts[i].0 - pts[j].0).abs();
                if cfg.max_lag_m.is_some_and(|m| d >= m) {
                    continue;
                }
                let c = (pts[i].1 - mean) * (pts[j].1 - mean) / var;
                let e = acc.entry((d / width) as usize).or_insert((0.0, 0));
                e.0 += c;
                e.1 += 1;
            }
        }
        Ok(acc)
    })?;
    let mut total: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for acc in partial {
        for (b, (s, n)) in acc {
            let e = total.entry(b).or_insert((0.0, 0));
            e.0 += s;
            e.1 += n;
        }
    }
    Ok(CorrelogramResult {
        lag_m: total.keys().map(|&b| (b as f64 + 0.5) * width).collect(),
        correlation: total.values().map(|(s, n)| s / *n as f64).collect(),
        pairs: total.values().map(|v| v.1).collect(),
        angular_res: cfg.angular_res,
        radial_bin_m: width,
        diagnostics: diag,
    })
}

pub enum SplitMethod<'a> {
    /// Fine-tune a pretrained encoder on the training slices.
    Transformer { pretrained: &'a EncoderModel, stage: &'a StageConfig },
    Kriging(&'a KrigingConfig),
}

/// Trains or fits on the records of `train` labelled with one of
/// `train_altitudes`, then scores each label of `test_altitudes` on the
/// matching records of `test`. Returns reports in `test_altitudes` order.
pub fn altitude_split_eval(
    train: &MeasurementSet,
    test: &MeasurementSet,
    train_altitudes: &[&str],
    test_altitudes: &[&str],
    method: &SplitMethod,
) -> Result<Vec<MetricsReport>> {
    let train_set = train.with_labels(train_altitudes)?;
    if train_set.is_empty() {
        return Err(RemError::Empty(format!("no training records with labels {train_altitudes:?}")));
    }
    let tests = test_altitudes
        .iter()
        .map(|l| {
            let s = test.with_labels(&[l])?;
            if s.is_empty() {
                Err(RemError::Data(format!("no test records with altitude label '{l}'")))
            } else {
                Ok(s)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let predictor: Box<dyn Predictor> = match method {
        SplitMethod::Transformer { pretrained, stage } => Box::new(finetune(pretrained, &train_set, stage)?.0),
        SplitMethod::Kriging(cfg) => Box::new(Kriging::fit(&train_set, cfg)?),
    };
    tests.iter().map(|t| evaluate(predictor.as_ref(), t)).collect()
}
