//! Model-version selection diagnostics.
//!
//! A confidence value `Δ` is computed per decision instant so that `Δ > 0`
//! favours the correct model version. The ROC curve sweeps a threshold `Ξ`
//! from `+∞` down to 0: the true-positive rate is the share of positive
//! decisions with `Δ > Ξ`, the false-positive rate the share of negative
//! decisions with `-Δ > Ξ`. Each rate is normalised by the size of its own
//! class, so the curve ends at `(1, 1)` whenever both classes occur. The Gini
//! coefficient is twice the area between the curve and the diagonal.

use serde::{Deserialize, Serialize};

use crate::enkf::ForecastStats;
use crate::error::{Error, Result};
use crate::twin::{ObservationBatch, ObservationOperator};

fn rms(diffs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = diffs.fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    (sum / n as f64).sqrt()
}

/// Analysis error with respect to the truth.
pub fn rmse_truth(xa: &[f64], xt: &[f64]) -> Result<f64> {
    if xa.len() != xt.len() || xa.is_empty() {
        return Err(Error::Dimension(format!(
            "rmse of lengths {} and {}",
            xa.len(),
            xt.len()
        )));
    }
    Ok(rms(xa.iter().zip(xt).map(|(a, t)| a - t)))
}

/// Forecast-mean misfit to the observations.
pub fn rmse_forecast(
    stats: &ForecastStats,
    y: &ObservationBatch,
    h: &ObservationOperator,
) -> Result<f64> {
    if y.values.len() != h.obs_count() || h.state_size() != stats.state_dim() || y.values.is_empty()
    {
        return Err(Error::Dimension(
            "forecast, operator and observations disagree".into(),
        ));
    }
    let hx = h.apply(stats.mean.as_slice());
    Ok(rms(hx.iter().zip(&y.values).map(|(a, b)| a - b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    Rmse,
    Gcme,
    Dlcme,
}

impl IndicatorKind {
    pub const ALL: [IndicatorKind; 3] = [
        IndicatorKind::Rmse,
        IndicatorKind::Gcme,
        IndicatorKind::Dlcme,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorKind::Rmse => "rmse",
            IndicatorKind::Gcme => "gcme",
            IndicatorKind::Dlcme => "dlcme",
        }
    }

    /// Whether larger indicator values favour a model version.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, IndicatorKind::Rmse)
    }
}

impl std::fmt::Display for IndicatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for IndicatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(Self::Rmse),
            "gcme" => Ok(Self::Gcme),
            "dlcme" => Ok(Self::Dlcme),
            other => Err(Error::Config(format!("unknown indicator '{other}'"))),
        }
    }
}

/// Confidence in the correct version: `ln p1 - ln p0` for evidences and
/// `RMSE0 - RMSE1` for the RMSE, positive when the correct version wins.
pub fn confidence_delta(kind: IndicatorKind, correct: f64, incorrect: f64) -> f64 {
    if kind.higher_is_better() {
        correct - incorrect
    } else {
        incorrect - correct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSeries {
    pub indicator: IndicatorKind,
    pub deltas: Vec<f64>,
}

/// Wins (`Δ > 0`), losses (`Δ < 0`) and ties of a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecisionCounts {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl DecisionCounts {
    pub fn total(&self) -> usize {
        self.wins + self.losses + self.ties
    }
}

impl ConfidenceSeries {
    pub fn new(indicator: IndicatorKind, deltas: Vec<f64>) -> Result<Self> {
        if deltas.iter().any(|d| !d.is_finite()) {
            return Err(Error::Config(format!(
                "non-finite {indicator} confidence value"
            )));
        }
        Ok(Self { indicator, deltas })
    }

    /// Pairs the indicator values of the two versions cycle by cycle.
    pub fn from_indicators(
        indicator: IndicatorKind,
        correct: &[f64],
        incorrect: &[f64],
    ) -> Result<Self> {
        if correct.len() != incorrect.len() {
            return Err(Error::Dimension(format!(
                "{} correct vs {} incorrect indicator values",
                correct.len(),
                incorrect.len()
            )));
        }
        let deltas = correct
            .iter()
            .zip(incorrect)
            .map(|(&c, &i)| confidence_delta(indicator, c, i))
            .collect();
        Self::new(indicator, deltas)
    }

    pub fn counts(&self) -> DecisionCounts {
        let mut c = DecisionCounts::default();
        for &d in &self.deltas {
            if d > 0.0 {
                c.wins += 1;
            } else if d < 0.0 {
                c.losses += 1;
            } else {
                c.ties += 1;
            }
        }
        c
    }
}

/// `2R - 1` where `R` is the share of decisions favouring the correct version,
/// ties counting one half.
pub fn selection_probability(series: &ConfidenceSeries) -> Result<f64> {
    if series.deltas.is_empty() {
        return Err(Error::EmptySeries("confidence series"));
    }
    let c = series.counts();
    let r = (c.wins as f64 + 0.5 * c.ties as f64) / c.total() as f64;
    Ok(2.0 * r - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ordered by decreasing threshold; the first point is `(0, 0)`.
    pub points: Vec<RocPoint>,
}

/// Sweeps `Ξ` over the distinct nonzero `|Δ|` values (descending) and 0.
pub fn roc_curve(series: &ConfidenceSeries) -> Result<RocCurve> {
    if series.deltas.is_empty() {
        return Err(Error::EmptySeries("confidence series"));
    }
    let counts = series.counts();
    // (magnitude, is_positive), largest magnitude first
    let mut decided: Vec<(f64, bool)> = series
        .deltas
        .iter()
        .filter(|&&d| d != 0.0)
        .map(|&d| (d.abs(), d > 0.0))
        .collect();
    decided.sort_by(|a, b| b.0.total_cmp(&a.0));

    let rate = |count: usize, class: usize| {
        if class == 0 {
            0.0
        } else {
            count as f64 / class as f64
        }
    };
    let mut points = Vec::with_capacity(decided.len() + 2);
    let first_threshold = decided.first().map_or(0.0, |&(m, _)| m);
    points.push(RocPoint {
        threshold: first_threshold,
        fpr: 0.0,
        tpr: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < decided.len() {
        let level = decided[i].0;
        while i < decided.len() && decided[i].0 == level {
            if decided[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // every |Δ| >= level now counted, i.e. the rates at the next lower threshold
        let threshold = decided.get(i).map_or(0.0, |&(m, _)| m);
        points.push(RocPoint {
            threshold,
            fpr: rate(fp, counts.losses),
            tpr: rate(tp, counts.wins),
        });
    }
    Ok(RocCurve { points })
}

/// Twice the trapezoidal area between the curve and the diagonal; the curve
/// is closed with a segment to `(1, 1)` when it stops short of it.
pub fn gini(roc: &RocCurve) -> f64 {
    let mut area = 0.0;
    let mut prev = (0.0, 0.0);
    let tail = RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    };
    for p in roc.points.iter().chain(std::iter::once(&tail)) {
        area += (p.fpr - prev.0) * (p.tpr + prev.1) * 0.5;
        prev = (p.fpr, p.tpr);
    }
    2.0 * area - 1.0
}

/// Selection statistics of one confidence series.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSummary {
    pub counts: DecisionCounts,
    pub selection_probability: f64,
    pub gini: f64,
    pub roc: RocCurve,
}

pub fn summarize(series: &ConfidenceSeries) -> Result<SelectionSummary> {
    let roc = roc_curve(series)?;
    Ok(SelectionSummary {
        counts: series.counts(),
        selection_probability: selection_probability(series)?,
        gini: gini(&roc),
        roc,
    })
}
