//! QC reports: one CSV row per (subject, group, metric) and a JSON summary
//! with Pearson r, MAE, per-group breakdowns, rankings and t-tests.

use std::path::Path;

use nnqc_core::metrics::{mae, pearson_r, welch_t, MetricKind, Ranking};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checkpoint::write_json;
use crate::error::{Error, Result};

pub const ROWS_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const T_TEST_VARIANT: &str = "welch_unpaired_two_sided";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject_id: String,
    /// Quality band or model name; empty for a single QC run.
    pub group: String,
    pub metric: String,
    pub pseudo_score: f64,
    pub real_score: Option<f64>,
    /// HD95 involved the one-empty-mask sentinel.
    pub sentinel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub metric: String,
    pub group: Option<String>,
    pub n: usize,
    pub mean_pseudo: f64,
    pub mean_real: Option<f64>,
    pub pearson_r: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub variant: String,
    pub metric: String,
    pub a: String,
    pub b: String,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub config_sha256: String,
    pub sampling_steps: usize,
    pub overall: Vec<Agreement>,
    pub groups: Vec<Agreement>,
    pub ranking: Option<Ranking>,
    pub t_tests: Vec<TTest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
}

fn agreement(metric: &str, group: Option<String>, rows: &[&ReportRow]) -> Agreement {
    let pseudo: Vec<f64> = rows.iter().map(|r| r.pseudo_score).collect();
    let (p, r): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|x| x.real_score.map(|r| (x.pseudo_score, r))).unzip();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Agreement {
        metric: metric.to_string(),
        group,
        n: rows.len(),
        mean_pseudo: mean(&pseudo),
        mean_real: (!r.is_empty()).then(|| mean(&r)),
        pearson_r: pearson_r(&p, &r).ok(),
        mae: mae(&p, &r).ok(),
    }
}

/// Two-sided p-value of Welch's unequal-variance t-test.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    let (t, df) = welch_t(a, b)?;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Model(format!("t distribution: {e}")))?;
    Ok((t, df, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

impl Report {
    /// Groups keep their first-appearance order.
    pub fn new(rows: Vec<ReportRow>, seed: u64, config_sha256: &str, sampling_steps: usize) -> Self {
        let mut overall = Vec::new();
        let mut groups = Vec::new();
        for kind in [MetricKind::Dsc, MetricKind::Hd95] {
            let name = kind.name();
            let of_metric: Vec<&ReportRow> = rows.iter().filter(|r| r.metric == name).collect();
            if of_metric.is_empty() {
                continue;
            }
            overall.push(agreement(name, None, &of_metric));
            let mut names: Vec<&str> = Vec::new();
            for r in &of_metric {
                if !r.group.is_empty() && !names.contains(&r.group.as_str()) {
                    names.push(&r.group);
                }
            }
            for g in names {
                let sel: Vec<&ReportRow> = of_metric.iter().copied().filter(|r| r.group == g).collect();
                groups.push(agreement(name, Some(g.to_string()), &sel));
            }
        }
        Self {
            rows,
            summary: Summary {
                seed,
                config_sha256: config_sha256.to_string(),
                sampling_steps,
                overall,
                groups,
                ranking: None,
                t_tests: Vec::new(),
            },
        }
    }

    /// Welch tests on the real scores of every pair of groups, for one metric;
    /// falls back to pseudo scores when no real scores exist.
    pub fn add_t_tests(&mut self, metric: MetricKind) {
        let name = metric.name();
        let groups: Vec<String> = self
            .summary
            .groups
            .iter()
            .filter(|g| g.metric == name)
            .filter_map(|g| g.group.clone())
            .collect();
        let scores = |g: &str| -> Vec<f64> {
            self.rows
                .iter()
                .filter(|r| r.metric == name && r.group == g)
                .map(|r| r.real_score.unwrap_or(r.pseudo_score))
                .collect()
        };
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                match welch_test(&scores(&groups[i]), &scores(&groups[j])) {
                    Ok((t, df, p_value)) => self.summary.t_tests.push(TTest {
                        variant: T_TEST_VARIANT.to_string(),
                        metric: name.to_string(),
                        a: groups[i].clone(),
                        b: groups[j].clone(),
                        t,
                        df,
                        p_value,
                    }),
                    Err(e) => log::warn!("t-test {} vs {}: {e}", groups[i], groups[j]),
                }
            }
        }
    }

    pub fn overall(&self, metric: MetricKind) -> Option<&Agreement> {
        self.summary.overall.iter().find(|a| a.metric == metric.name())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ROWS_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join(SUMMARY_FILE), &self.summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(s: &str, g: &str, p: f64, r: Option<f64>) -> ReportRow {
        ReportRow {
            subject_id: s.into(),
            group: g.into(),
            metric: "dsc".into(),
            pseudo_score: p,
            real_score: r,
            sentinel: false,
        }
    }

    #[test]
    fn summary_per_group() {
        let rows = vec![
            row("a", "x", 0.1, Some(0.2)),
            row("b", "x", 0.3, Some(0.3)),
            row("a", "y", 0.8, Some(0.9)),
            row("b", "y", 0.7, Some(0.6)),
        ];
        let mut rep = Report::new(rows, 1, "c", 20);
        let all = rep.overall(MetricKind::Dsc).unwrap();
        assert_eq!(all.n, 4);
        assert!((all.mae.unwrap() - 0.075).abs() < 1e-12);
        assert_eq!(rep.summary.groups.len(), 2);
        assert_eq!(rep.summary.groups[0].group.as_deref(), Some("x"));
        rep.add_t_tests(MetricKind::Dsc);
        assert_eq!(rep.summary.t_tests.len(), 1);
        assert_eq!(rep.summary.t_tests[0].variant, T_TEST_VARIANT);
        assert!(rep.summary.t_tests[0].p_value > 0.0 && rep.summary.t_tests[0].p_value < 0.2);
    }

    #[test]
    fn pseudo_only_rows_have_no_agreement() {
        let rep = Report::new(vec![row("a", "", 0.5, None), row("b", "", 0.6, None)], 0, "", 20);
        let all = rep.overall(MetricKind::Dsc).unwrap();
        assert!(all.mean_real.is_none() && all.pearson_r.is_none() && all.mae.is_none());
        assert!(rep.summary.groups.is_empty());
    }

    #[test]
    fn welch_p_value_matches_reference() {
        // scipy.stats.ttest_ind(a, b, equal_var=False)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        let (t, df, p) = welch_test(&a, &b).unwrap();
        assert!((t - -2.3763541031440183).abs() < 1e-9, "{t}");
        assert!((df - 6.972255729794934).abs() < 1e-9, "{df}");
        assert!((p - 0.04928433820673049).abs() < 1e-9, "{p}");
    }
}
