//! Table rendering shared by the CLI reports: every table exists both as
//! HTML and as aligned plain text, so downstream checks can compare the
//! text twin without an HTML parser.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::audit::{AuditSummary, FindingKind};
use crate::eval::MetricsReport;
use crate::train::{
    Scheduler, BATCH_CHOICES, DATA_FRACTION_CHOICES, EPOCH_CHOICES, GRAD_ACCUM_CHOICES,
    LORA_RANK_CHOICES, PEAK_LR_CHOICES,
};

/// Minimal XML/HTML escaping for text content and attribute values.
pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Monospace-aligned plain-text table with a header rule.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let n = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        debug_assert_eq!(row.len(), n);
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut push_row = |cells: Vec<&str>, out: &mut String| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            for _ in cell.chars().count()..widths[i] {
                out.push(' ');
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    push_row(headers.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    push_row(rule.iter().map(|s| s.as_str()).collect(), &mut out);
    for row in rows {
        push_row(row.iter().map(|s| s.as_str()).collect(), &mut out);
    }
    out
}

/// The same table as HTML.
pub fn html_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::from("<table>\n<thead><tr>");
    for h in headers {
        out.push_str(&format!("<th>{}</th>", escape(h)));
    }
    out.push_str("</tr></thead>\n<tbody>\n");
    for row in rows {
        out.push_str("<tr>");
        for cell in row {
            out.push_str(&format!("<td>{}</td>", escape(cell)));
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</tbody>\n</table>\n");
    out
}

fn fmt_rate(rate: f64) -> String {
    format!("{:.1}%", rate * 100.0)
}

/// Audit summary in the shape of the paper's audit tables: one row per
/// dataset plus a total row. Returns (plain text, HTML).
pub fn audit_table(summary: &AuditSummary) -> (String, String) {
    let found_col = match summary.kind {
        FindingKind::MislabelCandidate => "Potential Mislabels Found",
        FindingKind::DeceptionCandidate => "Potential Deception Prompts Found",
    };
    let headers = ["Dataset", "Total Samples", found_col];
    let mut rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.total.to_string(),
                format!("{} ({})", r.flagged, fmt_rate(r.rate)),
            ]
        })
        .collect();
    rows.push(vec![
        summary.total.dataset.clone(),
        summary.total.total.to_string(),
        format!("{} ({})", summary.total.flagged, fmt_rate(summary.total.rate)),
    ]);
    (text_table(&headers, &rows), html_table(&headers, &rows))
}

/// Experiment results shaped like the fine-tuning comparison tables:
/// one row per (training regime, evaluation set).
pub fn experiment_table(rows: &[(String, String, MetricsReport)]) -> (String, String) {
    let headers = ["Training Regime", "Evaluation Set", "F1 Score", "Accuracy", "Precision", "Recall"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(regime, eval_set, m)| {
            vec![
                regime.clone(),
                eval_set.clone(),
                format!("{:.4}", m.weighted_f1),
                format!("{:.4}", m.accuracy),
                format!("{:.4}", m.weighted_precision),
                format!("{:.4}", m.weighted_recall),
            ]
        })
        .collect();
    (text_table(&headers, &body), html_table(&headers, &body))
}

/// The hyperparameter search space as a table.
pub fn search_space_table() -> (String, String) {
    fn list<T: core::fmt::Display>(xs: &[T]) -> String {
        let items: Vec<String> = xs.iter().map(|x| format!("{x}")).collect();
        format!("{{{}}}", items.join(", "))
    }
    let sched: Vec<String> = [Scheduler::Cosine, Scheduler::Linear, Scheduler::Constant]
        .iter()
        .map(|s| format!("{s:?}").to_lowercase())
        .collect();
    let headers = ["Hyperparameter", "Discrete Values Sampled"];
    let rows = vec![
        vec!["Learning Rate Scheduler".to_string(), format!("{{{}}}", sched.join(", "))],
        vec!["Peak Learning Rate".to_string(), list(&PEAK_LR_CHOICES)],
        vec!["Epochs".to_string(), list(&EPOCH_CHOICES)],
        vec!["Batch Size".to_string(), list(&BATCH_CHOICES)],
        vec!["Gradient Accumulation".to_string(), list(&GRAD_ACCUM_CHOICES)],
        vec!["LoRA Rank (r)".to_string(), list(&LORA_RANK_CHOICES)],
        vec!["Data Fraction".to_string(), list(&DATA_FRACTION_CHOICES)],
    ];
    (text_table(&headers, &rows), html_table(&headers, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::AuditSummaryRow;

    #[test]
    fn text_table_aligns_columns() {
        let t = text_table(
            &["a", "long header"],
            &[vec!["xx".into(), "y".into()], vec!["x".into(), "value".into()]],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("a "));
        assert!(lines[1].starts_with("--"));
        // the second column starts at the same offset in every line
        let col = lines[0].find("long").unwrap();
        assert_eq!(&lines[2][col..col + 1], "y");
        assert_eq!(&lines[3][col..col + 5], "value");
    }

    #[test]
    fn audit_table_has_paper_shaped_columns() {
        let summary = AuditSummary {
            kind: FindingKind::MislabelCandidate,
            rows: vec![AuditSummaryRow {
                dataset: "formal".into(),
                total: 300,
                flagged: 30,
                rate: 0.1,
            }],
            total: AuditSummaryRow {
                dataset: "Total".into(),
                total: 300,
                flagged: 30,
                rate: 0.1,
            },
        };
        let (text, html) = audit_table(&summary);
        assert!(text.contains("Dataset"));
        assert!(text.contains("Total Samples"));
        assert!(text.contains("Potential Mislabels Found"));
        assert!(text.contains("30 (10.0%)"));
        assert!(html.contains("<th>Potential Mislabels Found</th>"));
    }

    #[test]
    fn deception_table_uses_its_own_found_column() {
        let summary = AuditSummary {
            kind: FindingKind::DeceptionCandidate,
            rows: vec![],
            total: AuditSummaryRow {
                dataset: "Total".into(),
                total: 10,
                flagged: 1,
                rate: 0.1,
            },
        };
        let (text, _) = audit_table(&summary);
        assert!(text.contains("Potential Deception Prompts Found"));
    }

    #[test]
    fn html_escapes_cell_content() {
        let html = html_table(&["h"], &[vec!["<b>&".into()]]);
        assert!(html.contains("&lt;b&gt;&amp;"));
    }

    #[test]
    fn search_space_lists_every_hyperparameter() {
        let (text, _) = search_space_table();
        for needle in ["cosine, linear, constant", "0.00005", "{2, 3, 5}", "{1, 2}", "{8, 16}", "{8, 16, 32, 64}", "{0.25, 0.5, 1}"] {
            assert!(text.contains(needle), "missing {needle} in:\n{text}");
        }
    }
}
