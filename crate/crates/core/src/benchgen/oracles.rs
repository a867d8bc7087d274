//! Gold answers computed exhaustively from master-table rows.
//!
//! Numeric folds run left to right over rows sorted by ticker, and every
//! number prints with two decimals, so a program that does the same reaches
//! the same string.

use std::collections::BTreeMap;

use chrono::NaiveDate;

use super::templates::{OracleKind, QuestionTemplate, TIE_RULE_TICKER_ASC};
use super::{BenchError, MasterRow};

pub const NONE_ANSWER: &str = "None";

fn value<'a>(row: &'a MasterRow, metric: &str) -> Result<&'a str, BenchError> {
    row.metrics.get(metric).map(String::as_str).ok_or_else(|| BenchError::MissingMetric {
        row: row.label(),
        metric: metric.to_string(),
    })
}

fn number(row: &MasterRow, metric: &str) -> Result<f64, BenchError> {
    let raw = value(row, metric)?;
    raw.parse().map_err(|_| BenchError::BadValue {
        row: row.label(),
        metric: metric.to_string(),
        value: raw.to_string(),
    })
}

fn date(row: &MasterRow, metric: &str) -> Result<NaiveDate, BenchError> {
    let raw = value(row, metric)?;
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| BenchError::BadValue {
        row: row.label(),
        metric: metric.to_string(),
        value: raw.to_string(),
    })
}

/// Rows of one year keyed and ordered by ticker.
fn by_ticker<'a>(rows: &[&'a MasterRow], year: &str) -> BTreeMap<String, &'a MasterRow> {
    rows.iter()
        .filter(|r| r.year() == year)
        .map(|r| (r.ticker().to_string(), *r))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    let mut t = 0.0;
    for x in xs {
        t += x;
    }
    t / xs.len() as f64
}

/// Population variance, two passes.
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let mut t = 0.0;
    for x in xs {
        t += (x - m) * (x - m);
    }
    t / xs.len() as f64
}

pub fn growth_rate(from: f64, to: f64) -> f64 {
    (to - from) / from.abs() * 100.0
}

/// Top k by key, ties resolved by ticker when the template allows it.
fn rank<T: Copy>(
    template: &QuestionTemplate,
    mut items: Vec<(String, f64, T)>,
    descending: bool,
) -> Result<Vec<(String, f64, T)>, BenchError> {
    let k = template.param_usize("k")?;
    items.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then_with(|| a.0.cmp(&b.0))
    });
    let window = &items[..items.len().min(k + 1)];
    let tied = window.windows(2).any(|w| w[0].1 == w[1].1);
    if tied {
        match template.tie_rule().as_deref() {
            Some(TIE_RULE_TICKER_ASC) => {}
            _ => return Err(BenchError::Tie(template.id.clone())),
        }
    }
    items.truncate(k);
    Ok(items)
}

fn descending(template: &QuestionTemplate) -> Result<bool, BenchError> {
    match template.param_str("order")?.as_str() {
        "desc" => Ok(true),
        "asc" => Ok(false),
        _ => Err(BenchError::BadParam {
            template: template.id.clone(),
            key: "order".into(),
        }),
    }
}

/// Per-company change between the two years, ordered by ticker. Companies
/// missing either year are skipped.
fn paired<'a>(template: &QuestionTemplate, rows: &[&'a MasterRow]) -> Result<Vec<(String, &'a MasterRow, &'a MasterRow)>, BenchError> {
    let from = by_ticker(rows, &template.param_str("from_year")?);
    let to = by_ticker(rows, &template.param_str("to_year")?);
    Ok(from
        .into_iter()
        .filter_map(|(t, a)| to.get(&t).map(|b| (t, a, *b)))
        .collect())
}

pub fn compute(template: &QuestionTemplate, rows: &[&MasterRow]) -> Result<String, BenchError> {
    let metric = template.param_str("metric")?;
    match template.answer_oracle {
        OracleKind::TopKByMetric => {
            let rows = by_ticker(rows, &template.param_str("year")?);
            let items = rows
                .iter()
                .map(|(t, r)| Ok((t.clone(), number(r, &metric)?, ())))
                .collect::<Result<Vec<_>, BenchError>>()?;
            let top = rank(template, items, descending(template)?)?;
            Ok(top
                .iter()
                .map(|(t, v, _)| format!("{t} ({v:.2})"))
                .collect::<Vec<_>>()
                .join("; "))
        }
        OracleKind::Range => {
            let xs = values(rows, template, &metric)?;
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(format!("max {max:.2}; min {min:.2}; range {:.2}", max - min))
        }
        OracleKind::Variance => {
            let xs = values(rows, template, &metric)?;
            Ok(format!("variance {:.2}", population_variance(&xs)))
        }
        OracleKind::GrowthRateTopK => {
            let items = paired(template, rows)?
                .into_iter()
                .map(|(t, a, b)| Ok((t, growth_rate(number(a, &metric)?, number(b, &metric)?), ())))
                .collect::<Result<Vec<_>, BenchError>>()?;
            let top = rank(template, items, descending(template)?)?;
            Ok(top
                .iter()
                .map(|(t, g, _)| format!("{t} ({g:.2}%)"))
                .collect::<Vec<_>>()
                .join("; "))
        }
        OracleKind::ChangeDetection => {
            let mut changed = Vec::new();
            for (t, a, b) in paired(template, rows)? {
                let (x, y) = (value(a, &metric)?, value(b, &metric)?);
                if x != y {
                    changed.push(format!("{t} ({x} -> {y})"));
                }
            }
            Ok(or_none(changed))
        }
        OracleKind::IntervalDays => {
            let to_metric = template.param_str("to_metric")?;
            let rows = by_ticker(rows, &template.param_str("year")?);
            let items = rows
                .iter()
                .map(|(t, r)| {
                    let days = (date(r, &to_metric)? - date(r, &metric)?).num_days();
                    Ok((t.clone(), days as f64, days))
                })
                .collect::<Result<Vec<_>, BenchError>>()?;
            let top = rank(template, items, descending(template)?)?;
            Ok(top
                .iter()
                .map(|(t, _, d)| format!("{t} ({d} days)"))
                .collect::<Vec<_>>()
                .join("; "))
        }
        OracleKind::Outlier2Sigma => {
            let rates = paired(template, rows)?
                .into_iter()
                .map(|(t, a, b)| Ok((t, growth_rate(number(a, &metric)?, number(b, &metric)?))))
                .collect::<Result<Vec<_>, BenchError>>()?;
            let xs: Vec<f64> = rates.iter().map(|(_, g)| *g).collect();
            if xs.is_empty() {
                return Ok(NONE_ANSWER.to_string());
            }
            let m = mean(&xs);
            let sd = population_variance(&xs).sqrt();
            let out: Vec<String> = rates
                .iter()
                .filter(|(_, g)| (g - m).abs() > 2.0 * sd)
                .map(|(t, g)| format!("{t} ({g:.2}%)"))
                .collect();
            Ok(or_none(out))
        }
    }
}

fn values(rows: &[&MasterRow], template: &QuestionTemplate, metric: &str) -> Result<Vec<f64>, BenchError> {
    by_ticker(rows, &template.param_str("year")?)
        .values()
        .map(|r| number(r, metric))
        .collect()
}

fn or_none(items: Vec<String>) -> String {
    if items.is_empty() {
        NONE_ANSWER.to_string()
    } else {
        items.join("; ")
    }
}
