//! Region merging, overlap and surface metrics, and cohort reports.
//!
//! Reports are laid out region-major in the order ET, WT, TC.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{is_valid_label, LabelVolume, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "ET")]
    Enhancing,
    #[serde(rename = "WT")]
    Whole,
    #[serde(rename = "TC")]
    Core,
}

impl Region {
    /// Report order.
    pub const ALL: [Region; 3] = [Region::Enhancing, Region::Whole, Region::Core];

    pub fn tag(self) -> &'static str {
        match self {
            Region::Enhancing => "ET",
            Region::Whole => "WT",
            Region::Core => "TC",
        }
    }

    /// Label values whose union forms the region.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Enhancing => &[4],
            Region::Whole => &[1, 2, 4],
            Region::Core => &[1, 4],
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub et: Mask,
    pub wt: Mask,
    pub tc: Mask,
}

impl RegionMasks {
    pub fn get(&self, r: Region) -> &Mask {
        match r {
            Region::Enhancing => &self.et,
            Region::Whole => &self.wt,
            Region::Core => &self.tc,
        }
    }

    /// `(region, mask)` in report order.
    pub fn iter(&self) -> impl Iterator<Item = (Region, &Mask)> {
        Region::ALL.into_iter().map(move |r| (r, self.get(r)))
    }
}

pub fn merge_labels(seg: &LabelVolume) -> Result<RegionMasks> {
    if let Some(bad) = seg.data().iter().find(|&&v| !is_valid_label(v)) {
        return Err(Error::invalid(format!("label value {bad} is not one of 0, 1, 2, 4")));
    }
    Ok(RegionMasks {
        et: seg.indicator(Region::Enhancing.labels()),
        wt: seg.indicator(Region::Whole.labels()),
        tc: seg.indicator(Region::Core.labels()),
    })
}

fn check_dims(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("mask dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Overlap 2|A∩B|/(|A|+|B|); two empty masks agree perfectly.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims("dice", a, b)?;
    let inter = a.bits().iter().zip(b.bits()).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Voxels with at least one face neighbour outside the mask or the grid.
pub fn boundary_points(m: &Mask) -> Vec<[usize; 3]> {
    let dims = m.dims();
    m.points()
        .filter(|&[z, y, x]| {
            let p = [z, y, x];
            (0..3).any(|a| {
                let low = p[a] == 0 || {
                    let mut q = p;
                    q[a] -= 1;
                    !m.get(q[0], q[1], q[2])
                };
                let high = p[a] + 1 == dims[a] || {
                    let mut q = p;
                    q[a] += 1;
                    !m.get(q[0], q[1], q[2])
                };
                low || high
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffVariant {
    /// maximum of the two directed maxima
    #[default]
    Max,
    /// 95th percentile (nearest rank) of each directed distance set, then the max
    Percentile95,
}

/// Squared nearest distance from each point of `from` to the set `to`.
fn directed_sq(from: &[[usize; 3]], to: &[[usize; 3]], scale: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    (0..3)
                        .map(|a| {
                            let d = (p[a] as f64 - q[a] as f64) * scale[a];
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn percentile_nearest_rank(mut v: Vec<f64>, pct: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank - 1]
}

/// Boundary-to-boundary Hausdorff distance, in voxels or in the units of
/// `spacing`. `None` when either mask is empty.
pub fn hausdorff(a: &Mask, b: &Mask, spacing: Option<[f64; 3]>) -> Result<Option<f64>> {
    hausdorff_variant(a, b, spacing, HausdorffVariant::Max)
}

pub fn hausdorff_variant(
    a: &Mask,
    b: &Mask,
    spacing: Option<[f64; 3]>,
    variant: HausdorffVariant,
) -> Result<Option<f64>> {
    check_dims("hausdorff", a, b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let scale = spacing.unwrap_or([1.0; 3]);
    let (pa, pb) = (boundary_points(a), boundary_points(b));
    let ab = directed_sq(&pa, &pb, scale);
    let ba = directed_sq(&pb, &pa, scale);
    let pick = |v: Vec<f64>| match variant {
        HausdorffVariant::Max => v.into_iter().fold(0.0, f64::max),
        HausdorffVariant::Percentile95 => percentile_nearest_rank(v, 95.0),
    };
    Ok(Some(pick(ab).max(pick(ba)).sqrt()))
}

/// True-positive and true-negative rates counted over `domain`
/// (the full volume when `None`). Each is `None` when its denominator is 0.
pub fn sensitivity_specificity(
    pred: &Mask,
    gt: &Mask,
    domain: Option<&Mask>,
) -> Result<(Option<f64>, Option<f64>)> {
    check_dims("sensitivity_specificity", pred, gt)?;
    if let Some(d) = domain {
        check_dims("sensitivity_specificity", pred, d)?;
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..pred.bits().len() {
        if domain.is_some_and(|d| !d.bits()[i]) {
            continue;
        }
        match (pred.bits()[i], gt.bits()[i]) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok((rate(tp, tp + fn_), rate(tn, tn + fp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub subject_id: String,
    pub region: Region,
    pub dice: f64,
    /// `None` when either mask is empty
    pub hausdorff: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub dice: f64,
    pub hausdorff: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub hausdorff_excluded: usize,
    pub sensitivity_excluded: usize,
    pub specificity_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// sorted by subject id, then region in report order
    pub records: Vec<RegionRecord>,
    /// ET, WT, TC
    pub means: Vec<RegionSummary>,
    /// whether hausdorff is in physical units
    pub physical_units: bool,
}

pub struct CasePair<'a> {
    pub subject_id: &'a str,
    pub pred: &'a LabelVolume,
    pub gt: &'a LabelVolume,
}

pub fn evaluate_case(case: &CasePair<'_>, spacing: Option<[f64; 3]>) -> Result<Vec<RegionRecord>> {
    if case.pred.dims() != case.gt.dims() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "{}: prediction dims {:?} vs ground truth {:?}",
                case.subject_id,
                case.pred.dims(),
                case.gt.dims()
            ),
        ));
    }
    let (p, g) = (merge_labels(case.pred)?, merge_labels(case.gt)?);
    Region::ALL
        .into_iter()
        .map(|r| {
            let (pm, gm) = (p.get(r), g.get(r));
            let (sensitivity, specificity) = sensitivity_specificity(pm, gm, None)?;
            Ok(RegionRecord {
                subject_id: case.subject_id.to_string(),
                region: r,
                dice: dice(pm, gm)?,
                hausdorff: hausdorff(pm, gm, spacing)?,
                sensitivity,
                specificity,
            })
        })
        .collect()
}

/// Per-case metrics and per-region means. Undefined values are left out of the
/// means and counted. Results do not depend on the order of `cases`.
pub fn evaluate_cohort(cases: &[CasePair<'_>], spacing: Option<[f64; 3]>) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty cohort"));
    }
    let mut records = Vec::with_capacity(cases.len() * 3);
    for case in cases {
        records.extend(evaluate_case(case, spacing)?);
    }
    Ok(summarize(records, spacing.is_some()))
}

pub fn summarize(mut records: Vec<RegionRecord>, physical_units: bool) -> MetricsReport {
    records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id).then(a.region.cmp(&b.region)));
    let means = Region::ALL
        .into_iter()
        .map(|r| {
            let rows: Vec<&RegionRecord> = records.iter().filter(|x| x.region == r).collect();
            let mean = |vals: Vec<Option<f64>>| {
                let defined: Vec<f64> = vals.iter().flatten().copied().collect();
                let excluded = vals.len() - defined.len();
                let m = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
                (m, excluded)
            };
            let (dice, _) = mean(rows.iter().map(|x| Some(x.dice)).collect());
            let (hausdorff, hausdorff_excluded) = mean(rows.iter().map(|x| x.hausdorff).collect());
            let (sensitivity, sensitivity_excluded) = mean(rows.iter().map(|x| x.sensitivity).collect());
            let (specificity, specificity_excluded) = mean(rows.iter().map(|x| x.specificity).collect());
            RegionSummary {
                region: r,
                dice: dice.unwrap_or(f64::NAN),
                hausdorff,
                sensitivity,
                specificity,
                hausdorff_excluded,
                sensitivity_excluded,
                specificity_excluded,
            }
        })
        .collect();
    MetricsReport {
        records,
        means,
        physical_units,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

/// Header of the tab-separated record format.
pub const RECORD_FIELDS: [&str; 6] = ["subject_id", "region", "dice", "hausdorff", "sensitivity", "specificity"];

impl MetricsReport {
    pub fn mean(&self, r: Region) -> &RegionSummary {
        self.means.iter().find(|m| m.region == r).expect("all regions summarised")
    }

    pub fn subjects(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.subject_id.as_str()).collect();
        ids.dedup();
        ids
    }

    fn record(&self, subject: &str, r: Region) -> Option<&RegionRecord> {
        self.records.iter().find(|x| x.subject_id == subject && x.region == r)
    }

    /// Two tables: Dice | Hausdorff and Sensitivity | Specificity, each with
    /// ET, WT, TC columns, one row per subject plus the mean.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let unit = if self.physical_units { "mm" } else { "vox" };
        let halves: [(&str, &str, fn(&RegionRecord) -> Option<f64>, fn(&RegionSummary) -> Option<f64>, fn(&RegionRecord) -> Option<f64>, fn(&RegionSummary) -> Option<f64>); 2] = [
            (
                "Dice",
                "Hausdorff",
                |x| Some(x.dice),
                |m| Some(m.dice),
                |x| x.hausdorff,
                |m| m.hausdorff,
            ),
            (
                "Sensitivity",
                "Specificity",
                |x| x.sensitivity,
                |m| m.sensitivity,
                |x| x.specificity,
                |m| m.specificity,
            ),
        ];
        let width = self.subjects().iter().map(|s| s.len()).max().unwrap_or(0).max(7);
        for (i, (left, right, lrec, lsum, rrec, rsum)) in halves.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let right_title = if *right == "Hausdorff" {
                format!("{right} ({unit})")
            } else {
                right.to_string()
            };
            let _ = writeln!(out, "{:width$} | {:^26} | {:^26}", "", left, right_title);
            let _ = writeln!(out, "{:width$} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}", "", "ET", "WT", "TC", "ET", "WT", "TC");
            for s in self.subjects() {
                let l: Vec<String> = Region::ALL.iter().map(|&r| cell(self.record(s, r).and_then(lrec))).collect();
                let rr: Vec<String> = Region::ALL.iter().map(|&r| cell(self.record(s, r).and_then(rrec))).collect();
                let _ = writeln!(out, "{s:width$} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}", l[0], l[1], l[2], rr[0], rr[1], rr[2]);
            }
            let l: Vec<String> = Region::ALL.iter().map(|&r| cell(lsum(self.mean(r)))).collect();
            let rr: Vec<String> = Region::ALL.iter().map(|&r| cell(rsum(self.mean(r)))).collect();
            let _ = writeln!(out, "{:width$} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}", "mean", l[0], l[1], l[2], rr[0], rr[1], rr[2]);
        }
        let excluded: Vec<String> = self
            .means
            .iter()
            .filter(|m| m.hausdorff_excluded + m.sensitivity_excluded + m.specificity_excluded > 0)
            .map(|m| {
                format!(
                    "{}: hausdorff {}, sensitivity {}, specificity {}",
                    m.region, m.hausdorff_excluded, m.sensitivity_excluded, m.specificity_excluded
                )
            })
            .collect();
        if !excluded.is_empty() {
            let _ = writeln!(out, "\nundefined values excluded from means ({})", excluded.join("; "));
        }
        out
    }

    /// Tab-separated records with a [`RECORD_FIELDS`] header; undefined values
    /// are written as `NA`, full precision otherwise.
    pub fn to_records(&self) -> String {
        let mut out = RECORD_FIELDS.join("\t");
        out.push('\n');
        let full = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.subject_id,
                r.region,
                full(Some(r.dice)),
                full(r.hausdorff),
                full(r.sensitivity),
                full(r.specificity)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], pts: &[[usize; 3]]) -> Mask {
        let mut m = Mask::empty(dims);
        for p in pts {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn merge_examples() {
        let seg = LabelVolume::from_vec([1, 1, 4], vec![0, 1, 2, 4]).unwrap();
        let r = merge_labels(&seg).unwrap();
        assert_eq!(r.wt.bits(), &[false, true, true, true]);
        assert_eq!(r.tc.bits(), &[false, true, false, true]);
        assert_eq!(r.et.bits(), &[false, false, false, true]);
        let bg = merge_labels(&LabelVolume::from_vec([2, 2, 2], vec![0; 8]).unwrap()).unwrap();
        assert!(bg.iter().all(|(_, m)| m.is_empty()));
        assert_eq!(r.iter().map(|(r, _)| r.tag()).collect::<Vec<_>>(), ["ET", "WT", "TC"]);
    }

    #[test]
    fn dice_examples() {
        let a = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1]]);
        let b = mask([1, 1, 4], &[[0, 0, 1], [0, 0, 2]]);
        let c = mask([1, 1, 4], &[[0, 0, 3]]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let e = Mask::empty([1, 1, 4]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &Mask::empty([1, 1, 3])).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask([1, 1, 8], &[[0, 0, 1]]);
        let b = mask([1, 1, 8], &[[0, 0, 4]]);
        assert_eq!(hausdorff(&a, &b, None).unwrap(), Some(3.0));
        assert_eq!(hausdorff(&a, &b, Some([1.0, 1.0, 0.5])).unwrap(), Some(1.5));
        assert_eq!(hausdorff(&a, &a, None).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&a, &Mask::empty([1, 1, 8]), None).unwrap(), None);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let m = Mask::full([3, 3, 3]);
        let b = boundary_points(&m);
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[1, 1, 1]));
    }

    #[test]
    fn percentile_variant_ignores_a_far_outlier() {
        let mut pts: Vec<[usize; 3]> = (0..20).map(|x| [0, 0, x]).collect();
        let a = mask([1, 1, 40], &pts);
        pts.push([0, 0, 39]);
        let b = mask([1, 1, 40], &pts);
        assert_eq!(hausdorff(&a, &b, None).unwrap(), Some(20.0));
        let p95 = hausdorff_variant(&a, &b, None, HausdorffVariant::Percentile95).unwrap();
        assert_eq!(p95, Some(0.0));
    }

    #[test]
    fn sensitivity_specificity_examples() {
        let gt = mask([1, 2, 2], &[[0, 0, 0], [0, 0, 1]]);
        assert_eq!(sensitivity_specificity(&gt, &gt, None).unwrap(), (Some(1.0), Some(1.0)));
        assert_eq!(sensitivity_specificity(&gt.not(), &gt, None).unwrap(), (Some(0.0), Some(0.0)));

        // TP 3, FN 1, TN 10, FP 2
        let dims = [1, 1, 16];
        let gt = mask(dims, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let pred = mask(dims, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 4], [0, 0, 5]]);
        let (s, p) = sensitivity_specificity(&pred, &gt, None).unwrap();
        assert_eq!(s, Some(0.75));
        assert_eq!(p, Some(10.0 / 12.0));

        let e = Mask::empty(dims);
        assert_eq!(sensitivity_specificity(&e, &e, None).unwrap().0, None);
        let f = Mask::full(dims);
        assert_eq!(sensitivity_specificity(&f, &f, None).unwrap().1, None);

        let domain = mask(dims, &[[0, 0, 0], [0, 0, 3], [0, 0, 4]]);
        let (s, p) = sensitivity_specificity(&pred, &gt, Some(&domain)).unwrap();
        assert_eq!((s, p), (Some(0.5), Some(0.0)));
    }

    fn seg(values: Vec<u8>) -> LabelVolume {
        LabelVolume::from_vec([1, 2, 4], values).unwrap()
    }

    #[test]
    fn cohort_means_and_exclusions() {
        let g1 = seg(vec![0, 1, 2, 4, 0, 0, 2, 2]);
        let p1 = seg(vec![0, 1, 2, 0, 0, 0, 2, 0]);
        let g2 = seg(vec![0, 0, 2, 2, 0, 0, 0, 0]);
        let p2 = seg(vec![0, 0, 2, 2, 0, 0, 0, 0]);
        let cases = [
            CasePair { subject_id: "b", pred: &p2, gt: &g2 },
            CasePair { subject_id: "a", pred: &p1, gt: &g1 },
        ];
        let rep = evaluate_cohort(&cases, None).unwrap();
        assert_eq!(rep.subjects(), ["a", "b"]);

        let one = evaluate_cohort(&cases[1..], None).unwrap();
        let two_only = evaluate_cohort(&cases[..1], None).unwrap();
        for r in Region::ALL {
            let a = one.mean(r);
            let b = two_only.mean(r);
            let both = rep.mean(r);
            assert_eq!(both.dice, (a.dice + b.dice) / 2.0);
            assert_eq!(a.dice, one.records.iter().find(|x| x.region == r).unwrap().dice);
        }
        // subject b has no ET or TC anywhere: hausdorff undefined, dice 1
        let et = rep.mean(Region::Enhancing);
        assert_eq!(et.hausdorff_excluded, 2);
        assert_eq!(et.hausdorff, None);
        assert_eq!(rep.mean(Region::Core).hausdorff_excluded, 1);

        let reversed = evaluate_cohort(&[cases[1].clone_ref(), cases[0].clone_ref()], None).unwrap();
        assert_eq!(reversed, rep);
    }

    impl<'a> CasePair<'a> {
        fn clone_ref(&self) -> CasePair<'a> {
            CasePair { subject_id: self.subject_id, pred: self.pred, gt: self.gt }
        }
    }

    #[test]
    fn serialisations_follow_report_order() {
        let g = seg(vec![0, 1, 2, 4, 0, 0, 2, 2]);
        let rep = evaluate_cohort(&[CasePair { subject_id: "s1", pred: &g, gt: &g }], None).unwrap();
        let records = rep.to_records();
        let lines: Vec<&str> = records.lines().collect();
        assert_eq!(lines[0], RECORD_FIELDS.join("\t"));
        assert_eq!(lines[1], "s1\tET\t1\t0\t1\t1");
        assert!(lines[2].starts_with("s1\tWT") && lines[3].starts_with("s1\tTC"));

        let table = rep.to_table();
        assert!(table.contains("Dice") && table.contains("Hausdorff (vox)"));
        let header = table.lines().nth(1).unwrap();
        let order: Vec<&str> = header.split_whitespace().filter(|t| t.len() == 2).collect();
        assert_eq!(order, ["ET", "WT", "TC", "ET", "WT", "TC"]);

        let back: MetricsReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
