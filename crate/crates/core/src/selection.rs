//! Rules for choosing the amount of adjustment along a path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adjust::{AdjustmentPath, PathEntry};
use crate::error::{Error, Result};
use crate::inference::Estimate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Aic,
    Bic,
    AicNe,
    BicNe,
    Mse,
    Knee,
}

impl Rule {
    pub const ALL: [Rule; 6] = [Rule::Aic, Rule::Bic, Rule::AicNe, Rule::BicNe, Rule::Mse, Rule::Knee];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Aic => "aic",
            Rule::Bic => "bic",
            Rule::AicNe => "aic-ne",
            Rule::BicNe => "bic-ne",
            Rule::Mse => "mse",
            Rule::Knee => "knee",
        }
    }

    pub fn needs_no_exposure(self) -> bool {
        matches!(self, Rule::AicNe | Rule::BicNe)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown rule `{s}` (expected aic, bic, aic-ne, bic-ne, mse, knee)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    Aic,
    Bic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub rule: Rule,
    pub index: usize,
    pub tuning: f64,
    pub estimate: Estimate,
    /// `(tuning, criterion value)` for every entry the rule evaluated. For the
    /// knee rule the value is the forward difference of the estimates.
    pub diagnostics: Vec<(f64, f64)>,
    /// Set when the knee rule found no qualifying point.
    pub no_knee: bool,
}

fn outcome(rule: Rule, path: &AdjustmentPath, index: usize, diagnostics: Vec<(f64, f64)>, no_knee: bool) -> SelectionOutcome {
    let e: &PathEntry = &path.entries()[index];
    SelectionOutcome { rule, index, tuning: e.tuning, estimate: e.estimate, diagnostics, no_knee }
}

/// First index of the minimum (ties go to the smaller tuning value).
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

pub fn select_ic(path: &AdjustmentPath, criterion: Criterion, use_no_exposure: bool) -> Result<SelectionOutcome> {
    let values: Vec<f64> = path
        .entries()
        .iter()
        .map(|e| {
            let fit = if use_no_exposure {
                e.no_exposure.ok_or_else(|| {
                    Error::Path(format!("{} path has no no-exposure fits", path.kind().name()))
                })?
            } else {
                e.full
            };
            Ok(match criterion {
                Criterion::Aic => fit.aic(),
                Criterion::Bic => fit.bic(),
            })
        })
        .collect::<Result<_>>()?;
    let rule = match (criterion, use_no_exposure) {
        (Criterion::Aic, false) => Rule::Aic,
        (Criterion::Bic, false) => Rule::Bic,
        (Criterion::Aic, true) => Rule::AicNe,
        (Criterion::Bic, true) => Rule::BicNe,
    };
    let best = argmin(&values);
    Ok(outcome(rule, path, best, path.tunings().into_iter().zip(values).collect(), false))
}

/// Minimises `(beta(m) - beta(m'))^2 + var(beta(m))`; `m'` defaults to the
/// largest tuning value.
pub fn select_mse(path: &AdjustmentPath, m_prime: Option<f64>) -> Result<SelectionOutcome> {
    let reference = match m_prime {
        Some(m) => path
            .position(m)
            .ok_or_else(|| Error::Path(format!("m' = {m} is not a tuning value of the path")))?,
        None => path.len() - 1,
    };
    let anchor = path.entries()[reference].estimate.beta_hat;
    let values: Vec<f64> = path
        .entries()
        .iter()
        .map(|e| (e.estimate.beta_hat - anchor).powi(2) + e.estimate.se_sandwich.powi(2))
        .collect();
    let best = argmin(&values);
    Ok(outcome(Rule::Mse, path, best, path.tunings().into_iter().zip(values).collect(), false))
}

/// First local minimum of `|D1|` after the point of largest second
/// difference, with differences taken over consecutive path entries.
pub fn select_knee(path: &AdjustmentPath) -> Result<SelectionOutcome> {
    let len = path.len();
    if len < 4 {
        return Err(Error::Path(format!("knee rule needs at least 4 path entries, got {len}")));
    }
    let b: Vec<f64> = path.entries().iter().map(|e| e.estimate.beta_hat).collect();
    let d1: Vec<f64> = b.windows(2).map(|w| w[1] - w[0]).collect();
    let d2: Vec<f64> = d1.windows(2).map(|w| w[1] - w[0]).collect();
    let mut peak = 0;
    for (i, v) in d2.iter().enumerate().skip(1) {
        if *v > d2[peak] {
            peak = i;
        }
    }
    let diagnostics = path.tunings().into_iter().zip(d1.iter().copied()).collect();
    match (peak + 1..d1.len() - 1).find(|&i| d1[i].abs() < d1[i + 1].abs()) {
        Some(i) => Ok(outcome(Rule::Knee, path, i, diagnostics, false)),
        None => Ok(outcome(Rule::Knee, path, len - 1, diagnostics, true)),
    }
}

/// Applies `rule`; `m_prime` is only used by the MSE rule.
pub fn select(path: &AdjustmentPath, rule: Rule, m_prime: Option<f64>) -> Result<SelectionOutcome> {
    match rule {
        Rule::Aic => select_ic(path, Criterion::Aic, false),
        Rule::Bic => select_ic(path, Criterion::Bic, false),
        Rule::AicNe => select_ic(path, Criterion::Aic, true),
        Rule::BicNe => select_ic(path, Criterion::Bic, true),
        Rule::Mse => select_mse(path, m_prime),
        Rule::Knee => select_knee(path),
    }
}
