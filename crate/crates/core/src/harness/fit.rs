//! Normalized running times across population sizes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Row;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("scaling fit needs at least {needed} population sizes with uncensored rows, got {got}")]
    FitImpossible { needed: usize, got: usize },
}

/// Normalizer for the interaction counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "model")]
pub enum FitModel {
    /// `n ln n`
    NLnN,
    /// `n ln n log_s(n / alpha)`
    NLnNLogS { s: u32, alpha: usize },
    /// `n ln n log_s(5n)`
    NLnNLog5N { s: u32 },
    /// `n (ln n)^2 / ln s`
    NLn2NOverLnS { s: u32 },
}

impl FitModel {
    pub fn scale(&self, n: usize) -> f64 {
        let nf = n as f64;
        let nlnn = nf * nf.ln();
        match *self {
            FitModel::NLnN => nlnn,
            FitModel::NLnNLogS { s, alpha } => nlnn * ((nf / alpha.max(1) as f64).ln() / f64::from(s).ln()).max(1.0),
            FitModel::NLnNLog5N { s } => nlnn * (5.0 * nf).ln() / f64::from(s).ln(),
            FitModel::NLn2NOverLnS { s } => nlnn * nf.ln() / f64::from(s).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Convergence,
    Stabilization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub n: usize,
    pub samples: usize,
    pub censored: usize,
    pub mean: f64,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTable {
    pub model: FitModel,
    pub rows: Vec<FitRow>,
    /// `max / min` of the coefficients.
    pub flatness: f64,
}

pub const MIN_SIZES: usize = 4;

/// Mean of the uncensored samples per `n`, divided by the model's scale.
pub fn fit_samples(samples: &[(usize, Option<u64>)], model: FitModel, min_sizes: usize) -> Result<FitTable, FitError> {
    let mut by_n: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for &(n, t) in samples {
        let e = by_n.entry(n).or_default();
        match t {
            Some(t) => e.0.push(t as f64),
            None => e.1 += 1,
        }
    }
    let rows: Vec<FitRow> = by_n
        .into_iter()
        .filter(|(_, (v, _))| !v.is_empty())
        .map(|(n, (v, censored))| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            FitRow {
                n,
                samples: v.len(),
                censored,
                mean,
                coefficient: mean / model.scale(n),
            }
        })
        .collect();
    if rows.len() < min_sizes {
        return Err(FitError::FitImpossible {
            needed: min_sizes,
            got: rows.len(),
        });
    }
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, 0f64), |(lo, hi), r| (lo.min(r.coefficient), hi.max(r.coefficient)));
    Ok(FitTable { model, rows, flatness: hi / lo })
}

pub fn scaling_fit(rows: &[Row], model: FitModel, metric: Metric) -> Result<FitTable, FitError> {
    let samples: Vec<(usize, Option<u64>)> = rows
        .iter()
        .map(|r| {
            let t = match metric {
                Metric::Convergence => r.t_convergence,
                Metric::Stabilization => r.t_stabilization,
            };
            (r.n, t)
        })
        .collect();
    fit_samples(&samples, model, MIN_SIZES)
}
