//! Detection matching, VOC average precision and aspect-ratio-binned AP.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};

pub use report::{format_bin_table, format_report_table};

pub const DEFAULT_IOU_THR: f64 = 0.5;
pub const DEFAULT_AR_EDGES: [f64; 6] = [1.0, 2.0, 3.0, 5.0, 8.0, f64::INFINITY];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub class: String,
    pub rbox: RotatedBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class: String,
    pub rbox: RotatedBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Overlaps an ignored ground truth; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMetric {
    /// 11-point interpolation.
    Voc07,
    /// Area under the monotone precision envelope.
    #[default]
    Voc12,
}

impl ApMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "voc07" | "07" => Ok(Self::Voc07),
            "voc12" | "12" => Ok(Self::Voc12),
            _ => Err(Error::Config(format!("unknown metric {s:?}; use voc07 or voc12"))),
        }
    }
}

/// Greedy matching for one image and class. `dets` must be sorted by
/// descending score; `ignore[j]` marks ground truths that are neither
/// positives nor penalties.
pub fn match_with_ignore(dets: &[&RotatedBox], gts: &[&RotatedBox], ignore: &[bool], iou_thr: f64) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let ious: Vec<f64> = gts.iter().map(|g| rotated_iou(d, g)).collect();
            let best = |want_ignored: bool, taken: &[bool]| {
                ious.iter()
                    .enumerate()
                    .filter(|&(j, &iou)| ignore[j] == want_ignored && !taken[j] && iou >= iou_thr)
                    .fold(None, |acc: Option<(usize, f64)>, (j, &iou)| match acc {
                        Some((_, b)) if b >= iou => acc,
                        _ => Some((j, iou)),
                    })
            };
            if let Some((j, _)) = best(false, &taken) {
                taken[j] = true;
                MatchFlag::Tp
            } else if best(true, &vec![false; gts.len()]).is_some() {
                MatchFlag::Ignored
            } else {
                MatchFlag::Fp
            }
        })
        .collect()
}

/// Pascal-VOC matching for a single image and class; difficult ground truths are ignored.
pub fn match_detections(dets: &[DetectionRecord], gts: &[GroundTruthRecord], iou_thr: f64) -> Vec<MatchFlag> {
    let d: Vec<&RotatedBox> = dets.iter().map(|d| &d.rbox).collect();
    let g: Vec<&RotatedBox> = gts.iter().map(|g| &g.rbox).collect();
    let ignore: Vec<bool> = gts.iter().map(|g| g.difficult).collect();
    match_with_ignore(&d, &g, &ignore, iou_thr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub tp: usize,
    pub fp: usize,
    pub positives: usize,
}

impl PrCurve {
    /// Cumulative curve over flags already in rank order; ignored entries are skipped.
    pub fn from_ranked(flags: &[MatchFlag], positives: usize) -> Self {
        let (mut tp, mut fp) = (0, 0);
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        for f in flags {
            match f {
                MatchFlag::Tp => tp += 1,
                MatchFlag::Fp => fp += 1,
                MatchFlag::Ignored => continue,
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(if positives == 0 { 0.0 } else { tp as f64 / positives as f64 });
        }
        Self {
            precision,
            recall,
            tp,
            fp,
            positives,
        }
    }
}

/// AP of a curve; `None` when there are no positives.
pub fn average_precision(curve: &PrCurve, metric: ApMetric) -> Option<f64> {
    if curve.positives == 0 {
        return None;
    }
    let (p, r) = (&curve.precision, &curve.recall);
    Some(match metric {
        ApMetric::Voc07 => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    p.iter()
                        .zip(r)
                        .filter(|(_, &rv)| rv >= t)
                        .map(|(&pv, _)| pv)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMetric::Voc12 => {
            let mut mrec = Vec::with_capacity(r.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(r);
            mrec.push(1.0);
            let mut mpre = Vec::with_capacity(p.len() + 2);
            mpre.push(0.0);
            mpre.extend_from_slice(p);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (0..mrec.len() - 1)
                .filter(|&i| mrec[i + 1] != mrec[i])
                .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
                .sum()
        }
    })
}

/// Half-open aspect-ratio bins given by increasing edges from 1 to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArBins {
    pub edges: Vec<f64>,
}

impl Default for ArBins {
    fn default() -> Self {
        Self {
            edges: DEFAULT_AR_EDGES.to_vec(),
        }
    }
}

impl ArBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Config("need at least two bin edges".into()));
        }
        if edges[0] != 1.0 {
            return Err(Error::Config(format!("bins must start at 1, got {}", edges[0])));
        }
        if *edges.last().unwrap() != f64::INFINITY {
            return Err(Error::Config("last bin edge must be infinity".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| e.is_nan()) {
            return Err(Error::Config(format!("bin edges must strictly increase: {edges:?}")));
        }
        Ok(Self { edges })
    }

    /// Parses `1,2,3,5,8,inf`.
    pub fn parse(s: &str) -> Result<Self> {
        let edges = s
            .split(',')
            .map(|t| match t.trim() {
                "inf" | "Inf" | "infinity" => Ok(f64::INFINITY),
                v => v
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad bin edge {v:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(edges)
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bin_of(&self, ar: f64) -> Option<usize> {
        self.edges.windows(2).position(|w| ar >= w[0] && ar < w[1])
    }

    pub fn label(&self, i: usize) -> String {
        let (lo, hi) = (self.edges[i], self.edges[i + 1]);
        if hi.is_infinite() {
            format!("[{lo}, inf)")
        } else {
            format!("[{lo}, {hi})")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    /// `None` when the class has no positives.
    pub ap: Option<f64>,
    pub positives: usize,
    pub detections: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinResult {
    pub label: String,
    pub lo: f64,
    pub hi: Option<f64>,
    pub positives: usize,
    /// Mean AP over classes with positives in the bin; `None` when the bin is empty.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: ApMetric,
    pub iou_thr: f64,
    pub classes: Vec<ClassResult>,
    /// Mean over classes with positives; 0 when there are none.
    pub map: f64,
    pub bins: Vec<BinResult>,
}

fn classes_of(dets: &[DetectionRecord], gts: &[GroundTruthRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = gts
        .iter()
        .map(|g| g.class.as_str())
        .chain(dets.iter().map(|d| d.class.as_str()))
        .collect();
    set.into_iter().map(String::from).collect()
}

/// Curve for one class, ignoring ground truths where `ignored` returns true.
fn class_curve(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    class: &str,
    iou_thr: f64,
    ignored: &dyn Fn(&GroundTruthRecord) -> bool,
) -> PrCurve {
    let mut by_image: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate().filter(|(_, d)| d.class == class) {
        by_image.entry(&d.image_id).or_default().0.push(i);
    }
    let mut positives = 0;
    for (j, g) in gts.iter().enumerate().filter(|(_, g)| g.class == class) {
        by_image.entry(&g.image_id).or_default().1.push(j);
        positives += !ignored(g) as usize;
    }
    // (score, input index, flag) over all images.
    let mut ranked: Vec<(f64, usize, MatchFlag)> = Vec::new();
    for (di, gi) in by_image.values() {
        let mut di = di.clone();
        di.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let d: Vec<&RotatedBox> = di.iter().map(|&i| &dets[i].rbox).collect();
        let g: Vec<&RotatedBox> = gi.iter().map(|&j| &gts[j].rbox).collect();
        let ign: Vec<bool> = gi.iter().map(|&j| ignored(&gts[j])).collect();
        let flags = match_with_ignore(&d, &g, &ign, iou_thr);
        ranked.extend(di.iter().zip(flags).map(|(&i, f)| (dets[i].score, i, f)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<MatchFlag> = ranked.into_iter().map(|r| r.2).collect();
    PrCurve::from_ranked(&flags, positives)
}

fn check_records(dets: &[DetectionRecord], gts: &[GroundTruthRecord]) -> Result<()> {
    for d in dets {
        d.rbox.validate()?;
        if !d.score.is_finite() {
            return Err(Error::NonFinite(format!("score of a {} detection", d.class)));
        }
    }
    for g in gts {
        g.rbox.validate()?;
    }
    Ok(())
}

/// Per-bin AP: ground truths outside the bin (and difficult ones) are ignore regions.
pub fn map_by_aspect_ratio(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    bins: &ArBins,
    iou_thr: f64,
    metric: ApMetric,
) -> Result<Vec<BinResult>> {
    check_records(dets, gts)?;
    let classes = classes_of(dets, gts);
    Ok((0..bins.len())
        .map(|b| {
            let outside = |g: &GroundTruthRecord| g.difficult || bins.bin_of(g.rbox.aspect_ratio()) != Some(b);
            let mut aps = Vec::new();
            let mut positives = 0;
            for c in &classes {
                let curve = class_curve(dets, gts, c, iou_thr, &outside);
                positives += curve.positives;
                if let Some(ap) = average_precision(&curve, metric) {
                    aps.push(ap);
                }
            }
            let hi = bins.edges[b + 1];
            BinResult {
                label: bins.label(b),
                lo: bins.edges[b],
                hi: hi.is_finite().then_some(hi),
                positives,
                ap: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
            }
        })
        .collect())
}

/// Per-class AP, mAP and per-bin AP.
pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    bins: &ArBins,
    iou_thr: f64,
    metric: ApMetric,
) -> Result<EvalReport> {
    check_records(dets, gts)?;
    let classes: Vec<ClassResult> = classes_of(dets, gts)
        .into_iter()
        .map(|c| {
            let curve = class_curve(dets, gts, &c, iou_thr, &|g| g.difficult);
            ClassResult {
                ap: average_precision(&curve, metric),
                positives: curve.positives,
                detections: dets.iter().filter(|d| d.class == c).count(),
                tp: curve.tp,
                fp: curve.fp,
                class: c,
            }
        })
        .collect();
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalReport {
        metric,
        iou_thr,
        classes,
        map,
        bins: map_by_aspect_ratio(dets, gts, bins, iou_thr, metric)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rb(cx: f64, w: f64, h: f64) -> RotatedBox {
        RotatedBox::new(cx, 0.0, w, h, 0.0).unwrap()
    }

    fn gt(img: &str, b: RotatedBox) -> GroundTruthRecord {
        GroundTruthRecord { image_id: img.into(), class: "a".into(), rbox: b, difficult: false }
    }

    fn det(img: &str, b: RotatedBox, s: f64) -> DetectionRecord {
        DetectionRecord { image_id: img.into(), class: "a".into(), rbox: b, score: s }
    }

    #[test]
    fn matching_fixtures() {
        let g = gt("i", rb(0.0, 4.0, 2.0));
        assert_eq!(match_detections(&[det("i", g.rbox, 0.9)], &[g.clone()], 0.5), vec![MatchFlag::Tp]);
        assert_eq!(match_detections(&[det("i", g.rbox, 0.9)], &[], 0.5), vec![MatchFlag::Fp]);
        let two = [det("i", g.rbox, 0.9), det("i", rb(0.1, 4.0, 2.0), 0.8)];
        assert_eq!(match_detections(&two, &[g.clone()], 0.5), vec![MatchFlag::Tp, MatchFlag::Fp]);
        let hard = GroundTruthRecord { difficult: true, ..g };
        assert_eq!(match_detections(&two, &[hard], 0.5), vec![MatchFlag::Ignored; 2]);
    }

    #[test]
    fn ap_fixtures() {
        let tp = PrCurve::from_ranked(&[MatchFlag::Tp], 1);
        let fps = PrCurve::from_ranked(&[MatchFlag::Fp, MatchFlag::Fp], 1);
        let empty = PrCurve::from_ranked(&[], 1);
        let fp_tp = PrCurve::from_ranked(&[MatchFlag::Fp, MatchFlag::Tp], 1);
        for m in [ApMetric::Voc07, ApMetric::Voc12] {
            assert_eq!(average_precision(&tp, m), Some(1.0));
            assert_eq!(average_precision(&fps, m), Some(0.0));
            assert_eq!(average_precision(&empty, m), Some(0.0));
            assert_eq!(average_precision(&fp_tp, m), Some(0.5));
        }
        assert_eq!(average_precision(&PrCurve::from_ranked(&[MatchFlag::Fp], 0), ApMetric::Voc12), None);
    }

    #[test]
    fn metrics_differ_on_partial_recall() {
        // Half recall at full precision: VOC12 gives 0.5, VOC07 gives 6/11.
        let c = PrCurve::from_ranked(&[MatchFlag::Tp], 2);
        assert_eq!(average_precision(&c, ApMetric::Voc12), Some(0.5));
        assert!((average_precision(&c, ApMetric::Voc07).unwrap() - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn bins_validate() {
        assert_eq!(ArBins::default().len(), 5);
        assert!(ArBins::new(vec![1.0, 3.0, 2.0, f64::INFINITY]).is_err());
        assert!(ArBins::new(vec![0.5, 2.0, f64::INFINITY]).is_err());
        assert!(ArBins::new(vec![1.0, 2.0, 8.0]).is_err());
        assert_eq!(ArBins::parse("1,2,3,5,8,inf").unwrap(), ArBins::default());
        let b = ArBins::default();
        assert_eq!(b.bin_of(1.0), Some(0));
        assert_eq!(b.bin_of(4.999), Some(2));
        assert_eq!(b.bin_of(5.0), Some(3));
        assert_eq!(b.bin_of(100.0), Some(4));
        assert_eq!(b.label(4), "[8, inf)");
    }

    #[test]
    fn missed_slender_object_only_hurts_its_bin() {
        let gts = vec![gt("i", rb(0.0, 2.0, 2.0)), gt("i", rb(20.0, 5.0, 2.0)), gt("i", rb(40.0, 12.0, 2.0))];
        let dets = vec![det("i", gts[0].rbox, 0.9), det("i", gts[1].rbox, 0.8)];
        let bins = map_by_aspect_ratio(&dets, &gts, &ArBins::default(), 0.5, ApMetric::Voc12).unwrap();
        let aps: Vec<_> = bins.iter().map(|b| b.ap).collect();
        assert_eq!(aps, vec![Some(1.0), Some(1.0), None, Some(0.0), None]);
    }

    #[test]
    fn single_bin_equals_global_ap() {
        let gts = vec![gt("i", rb(0.0, 4.0, 2.0)), gt("j", rb(0.0, 5.0, 2.0))];
        let dets = vec![det("i", rb(30.0, 4.0, 2.0), 0.9), det("i", gts[0].rbox, 0.8), det("j", gts[1].rbox, 0.3)];
        let r = evaluate(&dets, &gts, &ArBins::default(), 0.5, ApMetric::Voc12).unwrap();
        assert_eq!(r.bins[1].ap, Some(r.map));
        assert!(r.bins.iter().filter(|b| b.ap.is_some()).count() == 1);
    }

    #[test]
    fn empty_detections_give_zero_map() {
        let gts = vec![gt("i", rb(0.0, 4.0, 2.0))];
        let r = evaluate(&[], &gts, &ArBins::default(), 0.5, ApMetric::Voc07).unwrap();
        assert_eq!(r.map, 0.0);
    }
}
