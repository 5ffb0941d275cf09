//! Plot data for a run: a long-format CSV and two grouped bar charts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricsReport, ALL_KEY};

pub const REPORT_CSV_FILE: &str = "report.csv";
pub const GENERATIVE_SVG_FILE: &str = "report_generative.svg";
pub const DISCRIMINATIVE_SVG_FILE: &str = "report_discriminative.svg";

pub const GENERATIVE_METRICS: [&str; 4] = ["chair", "cover", "hal", "cog"];
pub const DISCRIMINATIVE_METRICS: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

const PALETTE: [&str; 4] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub criterion: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Criteria in report order: named criteria sorted, `all` last.
fn criteria(report: &MetricsReport) -> Vec<&str> {
    let mut keys: Vec<&str> = report.criteria.keys().map(String::as_str).filter(|k| *k != ALL_KEY).collect();
    if report.criteria.contains_key(ALL_KEY) {
        keys.push(ALL_KEY);
    }
    keys
}

pub fn report_rows(report: &MetricsReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    let mut push = |criterion: &str, task: &str, metric: &str, value: f64| {
        rows.push(ReportRow {
            criterion: criterion.to_owned(),
            task: task.to_owned(),
            metric: metric.to_owned(),
            value,
        })
    };
    for key in criteria(report) {
        let m = &report.criteria[key];
        if let Some(g) = &m.generative {
            let s = &g.summary;
            for (name, v) in GENERATIVE_METRICS.iter().zip([s.chair, s.cover, s.hal, s.cog]) {
                push(key, "generative", name, v);
            }
        }
        if let Some(d) = &m.discriminative {
            for (name, v) in DISCRIMINATIVE_METRICS.iter().zip([d.accuracy, d.precision, d.recall, d.f1]) {
                push(key, "discriminative", name, v);
            }
        }
    }
    rows
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("criterion,task,metric,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.1}", r.criterion, r.task, r.metric, r.value);
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart on a 0–100 axis: one group per criterion, one bar
/// per metric.
pub fn bar_chart_svg(title: &str, rows: &[ReportRow], task: &str, metrics: &[&str]) -> String {
    let mut groups: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.task == task) {
        if !groups.contains(&r.criterion.as_str()) {
            groups.push(&r.criterion);
        }
    }
    let value = |g: &str, m: &str| {
        rows.iter()
            .find(|r| r.task == task && r.criterion == g && r.metric == m)
            .map(|r| r.value)
    };
    let (left, top, plot_h, bar_w, gap) = (50.0, 40.0, 200.0, 16.0, 24.0);
    let group_w = bar_w * metrics.len() as f64 + gap;
    let width = left + group_w * groups.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 70.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    for tick in [0, 25, 50, 75, 100] {
        let y = top + plot_h - plot_h * tick as f64 / 100.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            width - 20.0,
            left - 4.0,
            y + 4.0
        );
    }
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gap / 2.0 + group_w * gi as f64;
        for (mi, m) in metrics.iter().enumerate() {
            let Some(v) = value(g, m) else { continue };
            let h = plot_h * v.clamp(0.0, 100.0) / 100.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{}"><title>{} {}: {v:.1}</title></rect>"#,
                x0 + bar_w * mi as f64,
                top + plot_h - h,
                PALETTE[mi % PALETTE.len()],
                escape(g),
                m
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar_w * metrics.len() as f64 / 2.0,
            top + plot_h + 16.0,
            escape(g)
        );
    }
    for (mi, m) in metrics.iter().enumerate() {
        let x = left + 90.0 * mi as f64;
        let y = top + plot_h + 40.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{m}</text>"#,
            y - 9.0,
            PALETTE[mi % PALETTE.len()],
            x + 14.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{CriterionMetrics, GenerativeBlock, GenerativeSummary, PositiveClass};
    use std::collections::BTreeMap;

    fn report() -> MetricsReport {
        let g = GenerativeBlock {
            summary: GenerativeSummary {
                chair: 12.5,
                cover: 80.0,
                hal: 25.0,
                cog: 5.0,
                responses: 8,
                empty_mention_responses: 0,
            },
            errored: 0,
        };
        let mut criteria = BTreeMap::new();
        for key in ["all", "common", "fictional"] {
            criteria.insert(
                key.to_string(),
                CriterionMetrics {
                    generative: Some(g.clone()),
                    discriminative: None,
                },
            );
        }
        MetricsReport {
            positive_class: PositiveClass::Yes,
            conventions: BTreeMap::new(),
            synonym_table_version: "synonyms-v1".into(),
            criteria,
        }
    }

    #[test]
    fn csv_rows_put_all_last() {
        let rows = report_rows(&report());
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[0].criterion, "common");
        assert_eq!(rows[11].criterion, "all");
        let csv = to_csv(&rows);
        assert!(csv.starts_with("criterion,task,metric,value\ncommon,generative,chair,12.5\n"));
    }

    #[test]
    fn svg_has_one_bar_per_value() {
        let rows = report_rows(&report());
        let svg = bar_chart_svg("Generative", &rows, "generative", &GENERATIVE_METRICS);
        assert_eq!(svg.matches("<rect x").count(), 12 + 4);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        let empty = bar_chart_svg("Discriminative", &rows, "discriminative", &DISCRIMINATIVE_METRICS);
        assert_eq!(empty.matches("<title>").count(), 0);
    }
}
