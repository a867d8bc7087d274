use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::catalog;
use super::BenchError;
use crate::evaluator::Tier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    TopKByMetric,
    Range,
    Variance,
    GrowthRateTopK,
    ChangeDetection,
    IntervalDays,
    Outlier2Sigma,
}

impl OracleKind {
    pub const ALL: [OracleKind; 7] = [
        OracleKind::TopKByMetric,
        OracleKind::Range,
        OracleKind::Variance,
        OracleKind::GrowthRateTopK,
        OracleKind::ChangeDetection,
        OracleKind::IntervalDays,
        OracleKind::Outlier2Sigma,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: String,
    /// Placeholders: {k}, {year}, {from_year}, {to_year}.
    pub text_template: String,
    pub tier: Tier,
    pub required_metrics: Vec<String>,
    pub answer_oracle: OracleKind,
    /// metric, k, order (asc|desc), tie_rule, and after resolution the
    /// year or from_year/to_year.
    pub oracle_params: BTreeMap<String, Value>,
    /// `{fact}` expands to the catalog sentence of one metric; cross-year
    /// templates merge two sentences and a change clause.
    pub fact_statement_template: String,
    pub cross_year: bool,
}

pub const TIE_RULE_TICKER_ASC: &str = "ticker_asc";
pub const PER_ROW_FACT: &str = "{fact}";
pub const MERGED_FACT: &str = "{fact_from} {fact_to} {change}";

impl QuestionTemplate {
    pub fn param_str(&self, key: &str) -> Result<String, BenchError> {
        match self.oracle_params.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            _ => Err(BenchError::BadParam {
                template: self.id.clone(),
                key: key.to_string(),
            }),
        }
    }

    pub fn param_usize(&self, key: &str) -> Result<usize, BenchError> {
        self.oracle_params
            .get(key)
            .and_then(Value::as_u64)
            .filter(|k| *k >= 1)
            .map(|k| k as usize)
            .ok_or_else(|| BenchError::BadParam {
                template: self.id.clone(),
                key: key.to_string(),
            })
    }

    pub fn tie_rule(&self) -> Option<String> {
        self.oracle_params.get("tie_rule").and_then(Value::as_str).map(str::to_string)
    }

    pub fn metric(&self) -> Result<&'static catalog::MetricDef, BenchError> {
        let name = self.param_str("metric")?;
        catalog::metric(&name).ok_or(BenchError::UnknownMetric(name))
    }

    pub fn doc_type(&self) -> Result<&'static str, BenchError> {
        let first = self
            .required_metrics
            .first()
            .ok_or_else(|| BenchError::BadParam {
                template: self.id.clone(),
                key: "required_metrics".into(),
            })?;
        Ok(catalog::metric(first).ok_or_else(|| BenchError::UnknownMetric(first.clone()))?.doc_type)
    }

    /// Years the template reads, after resolution.
    pub fn years(&self) -> Result<Vec<String>, BenchError> {
        if self.cross_year {
            Ok(vec![self.param_str("from_year")?, self.param_str("to_year")?])
        } else {
            Ok(vec![self.param_str("year")?])
        }
    }

    /// Copy with the year parameters bound.
    pub fn resolve(&self, years: &[String]) -> Result<QuestionTemplate, BenchError> {
        let mut t = self.clone();
        match (self.cross_year, years) {
            (false, [y]) => {
                t.oracle_params.insert("year".into(), json!(y));
            }
            (true, [a, b]) => {
                t.oracle_params.insert("from_year".into(), json!(a));
                t.oracle_params.insert("to_year".into(), json!(b));
            }
            _ => {
                return Err(BenchError::BadParam {
                    template: self.id.clone(),
                    key: "years".into(),
                })
            }
        }
        Ok(t)
    }

    pub fn question(&self) -> Result<String, BenchError> {
        let mut q = self.text_template.clone();
        for key in ["k", "year", "from_year", "to_year"] {
            let ph = format!("{{{key}}}");
            if q.contains(&ph) {
                q = q.replace(&ph, &self.param_str(key)?);
            }
        }
        Ok(q)
    }
}

fn template(
    id: &str,
    text: &str,
    tier: Tier,
    oracle: OracleKind,
    metrics: &[&str],
    params: Value,
    cross_year: bool,
) -> QuestionTemplate {
    let mut oracle_params: BTreeMap<String, Value> = serde_json::from_value(params).expect("object params");
    oracle_params
        .entry("tie_rule".into())
        .or_insert_with(|| json!(TIE_RULE_TICKER_ASC));
    QuestionTemplate {
        id: id.into(),
        text_template: text.into(),
        tier,
        required_metrics: metrics.iter().map(|m| m.to_string()).collect(),
        answer_oracle: oracle,
        oracle_params,
        fact_statement_template: if cross_year { MERGED_FACT } else { PER_ROW_FACT }.into(),
        cross_year,
    }
}

/// The built-in question families, simple and complex.
pub fn default_templates() -> Vec<QuestionTemplate> {
    use OracleKind::*;
    use Tier::*;
    vec![
        template(
            "top3_revenue",
            "Which {k} companies had the highest revenue in fiscal year {year}? List each with its revenue.",
            Simple,
            TopKByMetric,
            &["revenue"],
            json!({"metric": "revenue", "k": 3, "order": "desc"}),
            false,
        ),
        template(
            "top1_capital_adequacy",
            "Which company had the highest capital adequacy ratio in fiscal year {year}?",
            Simple,
            TopKByMetric,
            &["capital_adequacy_ratio"],
            json!({"metric": "capital_adequacy_ratio", "k": 1, "order": "desc"}),
            false,
        ),
        template(
            "bottom2_net_income",
            "Which {k} companies had the lowest net income in fiscal year {year}?",
            Simple,
            TopKByMetric,
            &["net_income"],
            json!({"metric": "net_income", "k": 2, "order": "asc"}),
            false,
        ),
        template(
            "range_operating_cost",
            "What were the maximum, the minimum and the range of total operating cost among the companies in fiscal year {year}?",
            Simple,
            Range,
            &["total_operating_cost"],
            json!({"metric": "total_operating_cost"}),
            false,
        ),
        template(
            "range_dividend",
            "What were the maximum, the minimum and the range of dividend per share among the companies for fiscal year {year}?",
            Simple,
            Range,
            &["dividend_per_share"],
            json!({"metric": "dividend_per_share"}),
            false,
        ),
        template(
            "variance_assets",
            "What was the population variance of total assets among the companies in fiscal year {year}?",
            Simple,
            Variance,
            &["total_assets"],
            json!({"metric": "total_assets"}),
            false,
        ),
        template(
            "variance_emissions",
            "What was the population variance of carbon emissions among the companies in fiscal year {year}?",
            Simple,
            Variance,
            &["carbon_emissions"],
            json!({"metric": "carbon_emissions"}),
            false,
        ),
        template(
            "growth_revenue",
            "Which {k} companies had the highest revenue growth rate from fiscal year {from_year} to fiscal year {to_year}?",
            Complex,
            GrowthRateTopK,
            &["revenue"],
            json!({"metric": "revenue", "k": 2, "order": "desc"}),
            true,
        ),
        template(
            "growth_employees",
            "Which {k} companies had the highest growth rate of employee count from fiscal year {from_year} to fiscal year {to_year}?",
            Complex,
            GrowthRateTopK,
            &["employee_count"],
            json!({"metric": "employee_count", "k": 3, "order": "desc"}),
            true,
        ),
        template(
            "auditor_change",
            "Which companies changed their accounting firm between fiscal year {from_year} and fiscal year {to_year}?",
            Complex,
            ChangeDetection,
            &["accounting_firm"],
            json!({"metric": "accounting_firm"}),
            true,
        ),
        template(
            "shortest_dividend_interval",
            "Which {k} companies had the shortest interval in days between the equity registration date and the ex-dividend date for fiscal year {year}?",
            Complex,
            IntervalDays,
            &["registration_date", "ex_dividend_date"],
            json!({"metric": "registration_date", "to_metric": "ex_dividend_date", "k": 3, "order": "asc"}),
            false,
        ),
        template(
            "outlier_emissions",
            "Which companies were outliers, lying more than two standard deviations from the mean, in the rate of change of carbon emissions from fiscal year {from_year} to fiscal year {to_year}?",
            Complex,
            Outlier2Sigma,
            &["carbon_emissions"],
            json!({"metric": "carbon_emissions"}),
            true,
        ),
        template(
            "outlier_revenue",
            "Which companies were outliers, lying more than two standard deviations from the mean, in the rate of change of revenue from fiscal year {from_year} to fiscal year {to_year}?",
            Complex,
            Outlier2Sigma,
            &["revenue"],
            json!({"metric": "revenue"}),
            true,
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let ts = default_templates();
        let families: std::collections::BTreeSet<_> = ts.iter().map(|t| t.answer_oracle).collect();
        assert_eq!(families.len(), OracleKind::ALL.len());
        for t in &ts {
            let doc_type = t.doc_type().unwrap();
            for m in &t.required_metrics {
                assert_eq!(catalog::metric(m).unwrap().doc_type, doc_type);
            }
            assert_eq!(t.tie_rule().as_deref(), Some(TIE_RULE_TICKER_ASC));
            let years: Vec<String> = if t.cross_year { vec!["2021".into(), "2022".into()] } else { vec!["2021".into()] };
            let q = t.resolve(&years).unwrap().question().unwrap();
            assert!(!q.contains('{'), "{q}");
            let found: Vec<_> = catalog::metrics_in_question(&q).iter().map(|m| m.name.to_string()).collect();
            assert_eq!(found, t.required_metrics, "{q}");
        }
    }
}
