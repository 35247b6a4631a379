//! CSV tables of bounds, sweeps and TTA results. AP values are printed as
//! percentages with one decimal; the plot series use two.

use crate::bounds::SweepRow;
use crate::evaluator::{ApResult, NO_GROUND_TRUTH};

fn pct(v: f64, decimals: usize) -> String {
    if v == NO_GROUND_TRUTH {
        "n/a".to_string()
    } else {
        format!("{:.*}", decimals, v * 100.0)
    }
}

/// Quotes a CSV field when needed.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const BOUNDS_HEADER: &str = "method,AP,worst/best AP,delta AP,AP50,worst/best AP50,delta AP50";

/// One row per method: baseline, worst/best pair and their difference.
pub fn bounds_row(method: &str, baseline: &ApResult, best: &ApResult, worst: &ApResult) -> String {
    format!(
        "{},{},{}/{},{},{},{}/{},{}",
        field(method),
        pct(baseline.ap, 1),
        pct(worst.ap, 1),
        pct(best.ap, 1),
        pct(best.ap - worst.ap, 1),
        pct(baseline.ap50, 1),
        pct(worst.ap50, 1),
        pct(best.ap50, 1),
        pct(best.ap50 - worst.ap50, 1),
    )
}

pub fn bounds_table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a ApResult, &'a ApResult, &'a ApResult)>) -> String {
    let mut out = format!("{BOUNDS_HEADER}\n");
    for (method, baseline, best, worst) in rows {
        out.push_str(&bounds_row(method, baseline, best, worst));
        out.push('\n');
    }
    out
}

pub const SWEEP_HEADER: &str = "max shift,worst/best AP,delta AP,worst/best AP50,delta AP50";

/// Bounds per maximum shift; the `M = 0` row carries the baseline and
/// dashes for the deltas.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let line = if r.max_shift == 0 {
            format!("0 - baseline,{},-,{},-", pct(r.baseline_ap, 1), pct(r.baseline_ap50, 1))
        } else {
            format!(
                "{},{}/{},{},{}/{},{}",
                r.max_shift,
                pct(r.worst_ap, 1),
                pct(r.best_ap, 1),
                pct(r.delta_ap, 1),
                pct(r.worst_ap50, 1),
                pct(r.best_ap50, 1),
                pct(r.delta_ap50, 1),
            )
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub const SERIES_HEADER: &str = "max_shift,worst_ap,best_ap,worst_ap50,best_ap50";

/// Differences to the baseline per maximum shift, ready for plotting.
pub fn baseline_difference_series(rows: &[SweepRow]) -> String {
    let mut out = format!("{SERIES_HEADER}\n");
    for r in rows {
        let d = r.baseline_differences();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.max_shift,
            pct(d[0], 2),
            pct(d[1], 2),
            pct(d[2], 2),
            pct(d[3], 2)
        ));
    }
    out
}

pub const TTA_HEADER: &str = "method,baseline AP,baseline AP50,w/ tta AP,w/ tta AP50,best AP,best AP50";

pub fn tta_row(method: &str, baseline: &ApResult, tta: &ApResult, best: &ApResult) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        field(method),
        pct(baseline.ap, 1),
        pct(baseline.ap50, 1),
        pct(tta.ap, 1),
        pct(tta.ap50, 1),
        pct(best.ap, 1),
        pct(best.ap50, 1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ap(ap: f64, ap50: f64) -> ApResult {
        ApResult {
            ap,
            ap50,
            per_category: vec![],
            per_threshold: vec![],
        }
    }

    #[test]
    fn bounds_row_layout() {
        let row = bounds_row("retinanet", &ap(0.364, 0.558), &ap(0.375, 0.590), &ap(0.353, 0.539));
        assert_eq!(row, "retinanet,36.4,35.3/37.5,2.2,55.8,53.9/59.0,5.1");
    }

    #[test]
    fn sweep_layout() {
        let base = SweepRow {
            max_shift: 0,
            baseline_ap: 0.5,
            baseline_ap50: 0.7,
            worst_ap: 0.5,
            best_ap: 0.5,
            delta_ap: 0.0,
            worst_ap50: 0.7,
            best_ap50: 0.7,
            delta_ap50: 0.0,
            eval_count: 1,
        };
        let one = SweepRow {
            max_shift: 1,
            worst_ap: 0.45,
            best_ap: 0.55,
            delta_ap: 0.1,
            worst_ap50: 0.6,
            best_ap50: 0.75,
            delta_ap50: 0.15,
            ..base.clone()
        };
        let table = sweep_table(&[base.clone(), one.clone()]);
        assert_eq!(table.lines().nth(1), Some("0 - baseline,50.0,-,70.0,-"));
        assert_eq!(table.lines().nth(2), Some("1,45.0/55.0,10.0,60.0/75.0,15.0"));
        let series = baseline_difference_series(&[base, one]);
        assert_eq!(series.lines().nth(2), Some("1,-5.00,5.00,-10.00,5.00"));
    }

    #[test]
    fn quoting_and_sentinel() {
        assert_eq!(field("a,b"), "\"a,b\"");
        assert_eq!(pct(NO_GROUND_TRUTH, 1), "n/a");
        let row = tta_row("m", &ap(0.1, 0.2), &ap(0.3, 0.4), &ap(0.5, 0.6));
        assert_eq!(row, "m,10.0,20.0,30.0,40.0,50.0,60.0");
    }
}
