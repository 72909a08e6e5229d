use crate::eval::{BinResult, EvalReport};

fn ap_cell(ap: Option<f64>) -> String {
    ap.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn format_bin_table(bins: &[BinResult]) -> String {
    let mut s = format!("{:<12} {:>9} {:>8}\n", "AR bin", "positives", "AP");
    for b in bins {
        s.push_str(&format!("{:<12} {:>9} {:>8}\n", b.label, b.positives, ap_cell(b.ap)));
    }
    s
}

pub fn format_report_table(r: &EvalReport) -> String {
    let width = r.classes.iter().map(|c| c.class.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "metric {:?}, IoU threshold {}\n{:<width$} {:>9} {:>6} {:>6} {:>8}\n",
        r.metric, r.iou_thr, "class", "positives", "tp", "fp", "AP"
    );
    for c in &r.classes {
        s.push_str(&format!(
            "{:<width$} {:>9} {:>6} {:>6} {:>8}\n",
            c.class,
            c.positives,
            c.tp,
            c.fp,
            ap_cell(c.ap)
        ));
    }
    s.push_str(&format!("{:<width$} {:>31.4}\n\n", "mAP", r.map));
    s.push_str(&format_bin_table(&r.bins));
    s
}
