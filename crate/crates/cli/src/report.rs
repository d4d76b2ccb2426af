//! Metrics report emission with a stable column order.

use nearquery_core::metrics::MetricsReport;
use std::fmt::Write as _;

pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class,tier,dice,iou,acc,images\n");
    for c in &report.per_class {
        writeln!(out, "{},{},{},{},{},{}", c.name, c.tier.name(), c.dice, c.iou, c.acc, c.images)
            .expect("string write");
    }
    out
}

pub fn report_to_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Summary rows (means and tier aggregates) for human consumption.
pub fn summary_lines(report: &MetricsReport) -> String {
    let mut out = String::new();
    writeln!(out, "mDice={} mIoU={} mAcc={}", report.m_dice, report.m_iou, report.m_acc)
        .expect("string write");
    for t in &report.tiers {
        writeln!(
            out,
            "tier {}: mDice={} mIoU={} mAcc={} ({} classes)",
            t.tier.name(),
            t.m_dice,
            t.m_iou,
            t.m_acc,
            t.n_classes
        )
        .expect("string write");
    }
    if !report.absent_classes.is_empty() {
        writeln!(out, "absent from targets: {}", report.absent_classes.join(", ")).expect("string write");
    }
    out
}
