//! Class IoU, MIoU, per-image foreground IoU (FIoU) and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};

/// (ground truth, prediction) pixel counts; ignore pixels are never counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(format!("{} gt pixels vs {} predicted", gt.len(), pred.len())));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(Error::invalid(format!("label pair ({g}, {p}) out of range")));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP/(TP+FP+FN)` per class; `None` where the denominator is zero.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean of the non-null class IoUs.
    pub fn miou(&self) -> Option<f64> {
        mean_present(&self.class_iou())
    }

    /// Integer CSV, one row per ground-truth class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for g in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.get(g, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<u64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| v.trim().parse::<u64>().map_err(|_| Error::invalid(format!("bad count `{v}`"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion CSV is not square"));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }
}

pub fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// How the per-image IoU is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FiouMode {
    /// Foreground (any class ≥ 1) against background.
    #[default]
    Binary,
    /// Mean IoU over the classes present in the image's ground truth or prediction.
    ClassMean,
}

/// Binary foreground IoU of one image, ignore pixels excluded. `None` when
/// both foregrounds are empty.
pub fn foreground_iou(gt: &[u8], pred: &[u8]) -> Result<Option<f64>> {
    if gt.len() != pred.len() {
        return Err(Error::shape(format!("{} gt pixels vs {} predicted", gt.len(), pred.len())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&g, &p) in gt.iter().zip(pred) {
        if g == IGNORE_INDEX {
            continue;
        }
        let (fg, fp) = (g >= 1, p >= 1);
        inter += (fg && fp) as u64;
        union += (fg || fp) as u64;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

fn image_iou(gt: &[u8], pred: &[u8], classes: usize, mode: FiouMode) -> Result<Option<f64>> {
    match mode {
        FiouMode::Binary => foreground_iou(gt, pred),
        FiouMode::ClassMean => {
            let mut conf = Confusion::new(classes);
            conf.add(gt, pred)?;
            Ok(conf.miou())
        }
    }
}

/// Per-image IoUs and their mean over the images that were not skipped.
pub fn fiou(preds: &[&[u8]], gts: &[&[u8]], classes: usize, mode: FiouMode) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| image_iou(g, p, classes, mode))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_present(&per_image);
    Ok((per_image, mean))
}

/// Streaming evaluation of one user's images.
#[derive(Clone, Debug)]
pub struct UserEvaluation {
    pub user: String,
    pub mode: FiouMode,
    pub confusion: Confusion,
    pub per_image: Vec<(String, Option<f64>)>,
}

impl UserEvaluation {
    pub fn new(user: &str, classes: usize, mode: FiouMode) -> Self {
        Self {
            user: user.to_string(),
            mode,
            confusion: Confusion::new(classes),
            per_image: Vec::new(),
        }
    }

    pub fn add_image(&mut self, id: &str, gt: &[u8], pred: &[u8]) -> Result<()> {
        self.confusion.add(gt, pred)?;
        let iou = image_iou(gt, pred, self.confusion.classes(), self.mode)?;
        self.per_image.push((id.to_string(), iou));
        Ok(())
    }

    pub fn fiou(&self) -> Option<f64> {
        mean_present(&self.per_image.iter().map(|(_, v)| *v).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub user: String,
    pub images: usize,
    pub miou: Option<f64>,
    pub fiou: Option<f64>,
    pub class_iou: Vec<Option<f64>>,
    pub per_image: Vec<(String, Option<f64>)>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_count: usize,
    pub fiou_mode: FiouMode,
    pub users: Vec<UserReport>,
    /// Mean over users of the per-user values.
    pub mean_miou: Option<f64>,
    pub mean_fiou: Option<f64>,
}

impl EvalReport {
    pub fn user(&self, name: &str) -> Option<&UserReport> {
        self.users.iter().find(|u| u.user == name)
    }
}

/// Per-user columns plus their mean; users without images are dropped.
pub fn make_report(evals: Vec<UserEvaluation>) -> Result<EvalReport> {
    let first = evals.first().ok_or_else(|| Error::invalid("nothing was evaluated"))?;
    let class_count = first.confusion.classes();
    let fiou_mode = first.mode;
    let mut users = Vec::new();
    for e in evals {
        if e.per_image.is_empty() {
            log::warn!("user {} has no evaluated images; omitted from the report", e.user);
            continue;
        }
        if e.confusion.classes() != class_count {
            return Err(Error::invalid("users evaluated with different class counts"));
        }
        users.push(UserReport {
            images: e.per_image.len(),
            miou: e.confusion.miou(),
            fiou: e.fiou(),
            class_iou: e.confusion.class_iou(),
            user: e.user,
            per_image: e.per_image,
            confusion: e.confusion,
        });
    }
    let mean_miou = mean_present(&users.iter().map(|u| u.miou).collect::<Vec<_>>());
    let mean_fiou = mean_present(&users.iter().map(|u| u.fiou).collect::<Vec<_>>());
    Ok(EvalReport {
        class_count,
        fiou_mode,
        users,
        mean_miou,
        mean_fiou,
    })
}

/// Concatenates the users of several reports (e.g. one model per user).
pub fn merge_reports(reports: Vec<EvalReport>) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to merge"))?;
    let (class_count, fiou_mode) = (first.class_count, first.fiou_mode);
    let mut users = Vec::new();
    for r in reports {
        if r.class_count != class_count || r.fiou_mode != fiou_mode {
            return Err(Error::invalid("reports use different class counts or FIoU modes"));
        }
        users.extend(r.users);
    }
    Ok(EvalReport {
        class_count,
        fiou_mode,
        mean_miou: mean_present(&users.iter().map(|u| u.miou).collect::<Vec<_>>()),
        mean_fiou: mean_present(&users.iter().map(|u| u.fiou).collect::<Vec<_>>()),
        users,
    })
}

/// Percent with two decimals, `-` for missing.
pub fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", 100.0 * v),
        None => "-".into(),
    }
}

/// Plain-text table with right-aligned columns.
pub fn render_table(headers: &[String], rows: &[(String, Vec<String>)]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for (label, cells) in rows {
        widths[0] = widths[0].max(label.len());
        for (i, c) in cells.iter().enumerate() {
            if i + 1 < widths.len() {
                widths[i + 1] = widths[i + 1].max(c.len());
            }
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, first: &str, rest: &[String]| {
        let _ = write!(out, "{first:<w$}", w = widths[0]);
        for (i, c) in rest.iter().enumerate() {
            let _ = write!(out, "  {c:>w$}", w = widths.get(i + 1).copied().unwrap_or(0));
        }
        out.push('\n');
    };
    line(&mut out, &headers[0], &headers[1..]);
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for (label, cells) in rows {
        line(&mut out, label, cells);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Fiou,
    Miou,
}

/// One row per method, one column per user and a final `Mean` column.
pub fn render_user_table(rows: &[(&str, &EvalReport)], metric: Metric) -> String {
    let mut users: Vec<String> = Vec::new();
    for (_, r) in rows {
        for u in &r.users {
            if !users.contains(&u.user) {
                users.push(u.user.clone());
            }
        }
    }
    let mut headers = vec![match metric {
        Metric::Fiou => "FIoU".to_string(),
        Metric::Miou => "MIoU".to_string(),
    }];
    headers.extend(users.iter().cloned());
    headers.push("Mean".into());
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|(label, r)| {
            let pick = |u: &UserReport| match metric {
                Metric::Fiou => u.fiou,
                Metric::Miou => u.miou,
            };
            let mut cells: Vec<String> = users.iter().map(|name| fmt_cell(r.user(name).and_then(pick))).collect();
            cells.push(fmt_cell(match metric {
                Metric::Fiou => r.mean_fiou,
                Metric::Miou => r.mean_miou,
            }));
            (label.to_string(), cells)
        })
        .collect();
    render_table(&headers, &body)
}

/// Class-wise IoU per user, absent classes shown as `-`.
pub fn render_class_table(report: &EvalReport, class_names: Option<&[String]>) -> String {
    let mut headers = vec!["User".to_string()];
    for c in 0..report.class_count {
        headers.push(class_names.and_then(|n| n.get(c).cloned()).unwrap_or_else(|| format!("c{c}")));
    }
    headers.push("Mean".into());
    let rows: Vec<(String, Vec<String>)> = report
        .users
        .iter()
        .map(|u| {
            let mut cells: Vec<String> = u.class_iou.iter().map(|v| fmt_cell(*v)).collect();
            cells.push(fmt_cell(u.miou));
            (u.user.clone(), cells)
        })
        .collect();
    render_table(&headers, &rows)
}

/// Ablation-style table: one row per setting with FIoU and MIoU columns,
/// optionally followed by per-seed FIoU values.
pub fn render_ablation_table(title: &str, rows: &[(String, Vec<&EvalReport>)]) -> String {
    let seeds = rows.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut headers = vec![title.to_string(), "FIoU".into(), "MIoU".into()];
    if seeds > 1 {
        headers.extend((0..seeds).map(|s| format!("FIoU[{s}]")));
    }
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|(label, reports)| {
            let f = mean_present(&reports.iter().map(|r| r.mean_fiou).collect::<Vec<_>>());
            let m = mean_present(&reports.iter().map(|r| r.mean_miou).collect::<Vec<_>>());
            let mut cells = vec![fmt_cell(f), fmt_cell(m)];
            if seeds > 1 {
                cells.extend(reports.iter().map(|r| fmt_cell(r.mean_fiou)));
            }
            (label.clone(), cells)
        })
        .collect();
    render_table(&headers, &body)
}

/// Users' confusion matrices as CSV text keyed by user.
pub fn dump_confusions(report: &EvalReport) -> BTreeMap<String, String> {
    report
        .users
        .iter()
        .map(|u| (u.user.clone(), u.confusion.to_csv()))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn perfect_prediction_gives_one() {
        let gt = [0u8, 1, 2, 2, 255, 1];
        let mut c = Confusion::new(4);
        c.add(&gt, &[0, 1, 2, 2, 3, 1]).unwrap();
        assert_eq!(c.class_iou(), vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(c.miou(), Some(1.0));
        assert_eq!(c.total(), 5);
    }

    #[test]
    fn two_by_two_hand_count() {
        let mut c = Confusion::new(2);
        c.add(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        let iou = c.class_iou();
        assert!((iou[1].unwrap() - 0.5).abs() < 1e-12);
        assert!((iou[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_gives_null_classes() {
        let mut c = Confusion::new(3);
        c.add(&[255; 4], &[0, 1, 2, 0]).unwrap();
        assert!(c.class_iou().iter().all(Option::is_none));
        assert_eq!(c.miou(), None);
    }

    #[test]
    fn fiou_mean_and_skip() {
        let a_gt = [1u8, 1, 0, 0];
        let a_pr = [1u8, 0, 0, 0];
        let b = [0u8, 2, 2, 0];
        let empty = [0u8; 4];
        let (per, mean) = fiou(&[&a_pr, &b, &empty], &[&a_gt, &b, &empty], 3, FiouMode::Binary).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(1.0), None]);
        assert_eq!(mean, Some(0.75));
        assert!(fiou(&[&a_pr], &[], 3, FiouMode::Binary).is_err());
    }

    #[test]
    fn three_by_three_with_ignore() {
        let gt = [0u8, 1, 1, 2, 255, 0, 0, 2, 1];
        let pr = [1u8, 1, 0, 2, 2, 0, 0, 0, 1];
        // fg pixels (gt, pred) excluding index 4: 0:(n,y) 1:(y,y) 2:(y,n) 3:(y,y) 5..6:(n,n) 7:(y,n) 8:(y,y)
        assert_eq!(foreground_iou(&gt, &pr).unwrap(), Some(3.0 / 6.0));
    }

    #[test]
    fn report_means_and_omission() {
        let mut a = UserEvaluation::new("u1", 2, FiouMode::Binary);
        a.add_image("x", &[1, 1, 0, 0, 0], &[1, 1, 1, 1, 1]).unwrap();
        let mut b = UserEvaluation::new("u2", 2, FiouMode::Binary);
        b.add_image("y", &[1, 1, 1, 0, 0], &[1, 1, 1, 1, 1]).unwrap();
        let empty = UserEvaluation::new("u3", 2, FiouMode::Binary);
        let r = make_report(vec![a, b, empty]).unwrap();
        assert_eq!(r.users.len(), 2);
        assert!((r.mean_fiou.unwrap() - 0.5).abs() < 1e-12);
        let mut only = UserEvaluation::new("u1", 2, FiouMode::Binary);
        only.add_image("x", &[1, 1, 0, 0], &[1, 1, 1, 1]).unwrap();
        let single = make_report(vec![only]).unwrap();
        assert_eq!(single.mean_fiou, single.users[0].fiou);
        let table = render_user_table(&[("group", &r)], Metric::Fiou);
        assert!(table.contains("Mean") && table.contains("50.00"));
        let classes = render_class_table(&r, None);
        assert!(classes.lines().count() == 4);
    }

    #[test]
    fn csv_round_trip() {
        let mut c = Confusion::new(3);
        c.add(&[0, 1, 2, 2, 1], &[0, 2, 2, 1, 1]).unwrap();
        assert_eq!(Confusion::from_csv(&c.to_csv()).unwrap(), c);
        assert!(Confusion::from_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn class_mean_mode_differs_from_binary() {
        let gt = [1u8, 2, 0, 0];
        let pr = [2u8, 1, 0, 0];
        assert_eq!(image_iou(&gt, &pr, 3, FiouMode::Binary).unwrap(), Some(1.0));
        assert!(image_iou(&gt, &pr, 3, FiouMode::ClassMean).unwrap().unwrap() < 1.0);
    }

    fn masks(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (
            prop::collection::vec(prop_oneof![4 => 0u8..4, 1 => Just(255u8)], len),
            prop::collection::vec(0u8..4, len),
        )
    }

    proptest! {
        #[test]
        fn accumulation_order_does_not_matter(pairs in prop::collection::vec(masks(16), 1..8)) {
            let mut fwd = Confusion::new(4);
            for (g, p) in &pairs {
                fwd.add(g, p).unwrap();
            }
            let mut rev = Confusion::new(4);
            for (g, p) in pairs.iter().rev() {
                let mut one = Confusion::new(4);
                one.add(g, p).unwrap();
                rev.merge(&one).unwrap();
            }
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn fiou_ignores_foreground_relabeling((g, p) in masks(25), perm in Just([0u8, 3, 1, 2])) {
            let relabel = |m: &[u8]| m.iter().map(|&v| if v == 255 { v } else { perm[v as usize] }).collect::<Vec<_>>();
            prop_assert_eq!(foreground_iou(&g, &p).unwrap(), foreground_iou(&relabel(&g), &relabel(&p)).unwrap());
        }

        #[test]
        fn all_correct_iff_scores_are_one((g, p) in masks(20)) {
            let mut c = Confusion::new(4);
            c.add(&g, &p).unwrap();
            let correct = g.iter().zip(&p).all(|(a, b)| *a == 255 || a == b);
            if let Some(m) = c.miou() {
                prop_assert_eq!(m == 1.0, correct);
            }
            if let Some(f) = foreground_iou(&g, &p).unwrap() {
                if correct {
                    prop_assert_eq!(f, 1.0);
                }
            }
        }
    }
}
