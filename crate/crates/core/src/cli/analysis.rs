//! `analyze` (association, survival, disparity) and `report` commands.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::evaluate::EvalResults;
use super::run::{fmt_num, read_json, with_run, Run, RESULTS};
use super::{runtime, AnalyzeArgs, AnalyzeCommand, CliError, ReportArgs};
use crate::stats::{
    association_design, bootstrap_compare, bootstrap_summary, cox_fit, disparity_curve, ols_fit, read_records,
    CoxOptions, Group, Significance, SubjectRecord, ASSOCIATION_COVARIATES,
};

fn coefficients_csv(rows: &[crate::stats::Coefficient], hazard: bool) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["name", "beta", "se", "ci_low", "ci_high", "p_value"];
    if hazard {
        header.extend(["hazard_ratio", "hr_ci_low", "hr_ci_high"]);
    }
    w.write_record(&header).map_err(runtime)?;
    for c in rows {
        let mut r = vec![c.name.clone()];
        r.extend([c.beta, c.se, c.ci_low, c.ci_high, c.p_value].map(fmt_num));
        if hazard {
            r.extend([c.beta.exp(), c.ci_low.exp(), c.ci_high.exp()].map(fmt_num));
        }
        w.write_record(&r).map_err(runtime)?;
    }
    String::from_utf8(w.into_inner().map_err(runtime)?).map_err(runtime)
}

fn metric_values(records: &[SubjectRecord], metric: &str) -> Result<Vec<f64>, CliError> {
    records.iter().map(|r| r.metric(metric).map_err(runtime)).collect()
}

pub fn analyze(c: AnalyzeCommand, argv: &[String]) -> Result<(), CliError> {
    let (kind, a): (&str, AnalyzeArgs) = match c {
        AnalyzeCommand::Assoc(a) => ("assoc", a),
        AnalyzeCommand::Survival(a) => ("survival", a),
        AnalyzeCommand::Disparity(a) => ("disparity", a),
    };
    let config = json!({"analysis": kind, "metric": a.metric});
    let run = Run::start(&a.out, &format!("analyze {kind}"), argv, config, vec![], &[&a.records])?;
    with_run(run, |run| {
        let records = read_records(&a.records).map_err(|e| runtime(format!("{}: {e}", a.records.display())))?;
        let y = metric_values(&records, &a.metric)?;
        let n = records.len();
        match kind {
            "assoc" => {
                let fit = ols_fit(&y, &association_design(&records), &ASSOCIATION_COVARIATES).map_err(runtime)?;
                run.write_text("coefficients.csv", &coefficients_csv(&fit.coefficients, false)?)?;
                Ok(json!({"analysis": kind, "metric": a.metric, "response": a.metric, "fit": fit}))
            }
            "survival" => {
                let names = [a.metric.as_str(), "age", "sex", "bmi"];
                let x = Array2::from_shape_fn((n, 4), |(i, j)| {
                    let r = &records[i];
                    [y[i], r.age, r.sex as f64, r.bmi][j]
                });
                let time: Vec<f64> = records.iter().map(|r| r.time).collect();
                let event: Vec<bool> = records.iter().map(|r| r.event != 0).collect();
                let fit = cox_fit(&time, &event, &x, &names, CoxOptions::default()).map_err(runtime)?;
                run.write_text("coefficients.csv", &coefficients_csv(&fit.coefficients, true)?)?;
                Ok(json!({"analysis": kind, "metric": a.metric, "fit": fit}))
            }
            _ => {
                let groups: Vec<Group> = records.iter().map(|r| r.group).collect();
                let curve = disparity_curve(&y, &groups).map_err(runtime)?;
                Ok(json!({"analysis": kind, "metric": a.metric, "curve": curve}))
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub source: String,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub arm: String,
    pub comparator: String,
    pub mean: f64,
    pub comparator_mean: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub significance: Significance,
}

/// Contents of a report's `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportResults {
    pub n_boot: usize,
    pub seed: u64,
    pub subjects: Vec<String>,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<Comparison>,
}

/// Per-arm bootstrap summaries and pairwise tiers over evaluated runs.
pub fn build_report(
    runs: &[(String, EvalResults)],
    metrics: &[String],
    n_boot: usize,
    seed: u64,
) -> Result<ReportResults, CliError> {
    let (_, first) = runs.first().ok_or_else(|| CliError::Config("no runs given".into()))?;
    let ids: Vec<String> = first.subjects.iter().map(|s| s.id.clone()).collect();
    for (source, r) in runs {
        let other: Vec<&String> = r.subjects.iter().map(|s| &s.id).collect();
        if !other.iter().copied().eq(ids.iter()) {
            return Err(runtime(format!("{source}: subject set differs from {}", runs[0].0)));
        }
    }
    let metrics: Vec<String> = if metrics.is_empty() {
        let shared = |r: &EvalResults| -> BTreeSet<String> {
            let mut it = r.subjects.iter().map(|s| s.metrics.keys().cloned().collect::<BTreeSet<_>>());
            let init = it.next().unwrap_or_default();
            it.fold(init, |acc, k| &acc & &k)
        };
        let mut all = shared(&runs[0].1);
        for (_, r) in &runs[1..] {
            all = &all & &shared(r);
        }
        all.into_iter().collect()
    } else {
        metrics.to_vec()
    };
    let mut names: Vec<String> = Vec::new();
    for (source, r) in runs {
        let base = r.arm.clone().unwrap_or_else(|| source.clone());
        let mut name = base.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{base}#{k}");
            k += 1;
        }
        names.push(name);
    }
    let values = |r: &EvalResults, m: &str| -> Result<Vec<f64>, CliError> {
        r.subjects
            .iter()
            .map(|s| s.metrics.get(m).copied().ok_or_else(|| runtime(format!("subject {} lacks metric {m}", s.id))))
            .collect()
    };
    let mut arms = Vec::new();
    for ((source, r), name) in runs.iter().zip(&names) {
        let mut summaries = BTreeMap::new();
        for m in &metrics {
            let s = bootstrap_summary(m, &values(r, m)?, n_boot, seed).map_err(runtime)?;
            summaries.insert(m.clone(), MetricSummary { mean: s.mean, std: s.std });
        }
        arms.push(ArmSummary { arm: name.clone(), source: source.clone(), metrics: summaries });
    }
    let mut comparisons = Vec::new();
    for m in &metrics {
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                let c = bootstrap_compare(m, &values(&runs[i].1, m)?, &values(&runs[j].1, m)?, n_boot, seed)
                    .map_err(runtime)?;
                comparisons.push(Comparison {
                    metric: m.clone(),
                    arm: names[i].clone(),
                    comparator: names[j].clone(),
                    mean: c.mean,
                    comparator_mean: c.comparator_mean,
                    t_statistic: c.t_statistic,
                    p_value: c.p_value,
                    significance: c.significance,
                });
            }
        }
    }
    Ok(ReportResults { n_boot, seed, subjects: ids, arms, comparisons })
}

fn report_tables(r: &ReportResults) -> Result<(String, String), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "metric", "mean", "std"]).map_err(runtime)?;
    for a in &r.arms {
        for (m, s) in &a.metrics {
            w.write_record([a.arm.clone(), m.clone(), fmt_num(s.mean), fmt_num(s.std)]).map_err(runtime)?;
        }
    }
    let summary = String::from_utf8(w.into_inner().map_err(runtime)?).map_err(runtime)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "arm", "comparator", "mean", "comparator_mean", "t_statistic", "p_value", "significance"])
        .map_err(runtime)?;
    for c in &r.comparisons {
        w.write_record([
            c.metric.clone(),
            c.arm.clone(),
            c.comparator.clone(),
            fmt_num(c.mean),
            fmt_num(c.comparator_mean),
            fmt_num(c.t_statistic),
            fmt_num(c.p_value),
            c.significance.symbol().to_string(),
        ])
        .map_err(runtime)?;
    }
    let comparisons = String::from_utf8(w.into_inner().map_err(runtime)?).map_err(runtime)?;
    Ok((summary, comparisons))
}

pub fn report(a: &ReportArgs, argv: &[String]) -> Result<(), CliError> {
    if a.n_boot < 2 {
        return Err(CliError::Config("n_boot must be at least 2".into()));
    }
    let config = json!({"runs": a.runs, "n_boot": a.n_boot, "seed": a.seed, "metrics": a.metrics});
    let inputs: Vec<&Path> = a.runs.iter().map(|p| p.as_path()).collect();
    let run = Run::start(&a.out, "report", argv, config, vec![a.seed], &inputs)?;
    with_run(run, |run| {
        let mut runs = Vec::new();
        for dir in &a.runs {
            let source = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
            runs.push((source, read_json::<EvalResults>(&dir.join(RESULTS))?));
        }
        let r = build_report(&runs, &a.metrics, a.n_boot, a.seed)?;
        let (summary, comparisons) = report_tables(&r)?;
        run.write_text("summary.csv", &summary)?;
        run.write_text("comparisons.csv", &comparisons)?;
        serde_json::to_value(&r).map_err(runtime).map(|v: Value| v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::evaluate::SubjectMetrics;
    use crate::study::View;
    use crate::training::Task;

    fn arm(name: &str, offset: f64) -> (String, EvalResults) {
        let subjects = (0..20)
            .map(|i| SubjectMetrics {
                id: format!("s{i:02}"),
                metrics: BTreeMap::from([("dice".to_string(), 0.8 + 0.01 * (i % 7) as f64 + offset)]),
            })
            .collect();
        let r = EvalResults {
            arm: Some(name.into()),
            task: Task::Segmentation,
            view: View::Sax,
            prediction_sets: vec!["seed0".into()],
            n_subjects: 20,
            metrics: BTreeMap::new(),
            cohort: BTreeMap::new(),
            subjects,
        };
        (format!("{name}_dir"), r)
    }

    #[test]
    fn single_arm_has_no_comparisons() {
        let r = build_report(&[arm("a", 0.0)], &[], 100, 0).unwrap();
        assert!(r.comparisons.is_empty());
        assert_eq!(r.arms[0].metrics.keys().collect::<Vec<_>>(), vec!["dice"]);
    }

    #[test]
    fn identical_arms_are_ns_and_offsets_are_highly_significant() {
        let r = build_report(&[arm("a", 0.0), arm("a", 0.0)], &[], 100, 0).unwrap();
        assert_eq!(r.arms[1].arm, "a#2");
        assert_eq!(r.comparisons[0].significance, Significance::Ns);
        let r = build_report(&[arm("a", 0.0), arm("b", 0.05)], &[], 100, 0).unwrap();
        assert_eq!(r.comparisons[0].significance, Significance::P001);
    }

    #[test]
    fn mismatched_subjects_are_rejected() {
        let mut b = arm("b", 0.0);
        b.1.subjects.pop();
        assert!(build_report(&[arm("a", 0.0), b], &[], 100, 0).is_err());
    }
}
