//! Dice score coefficient and fold aggregation.
//!
//! Counts are pooled over every pixel of every image in a fold before the
//! ratio is taken, so a class missing from one image does not make that
//! image's score undefined. A class absent from both prediction and ground
//! truth across the whole fold scores 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{ClassMap, IGNORE};

/// `2 TP / (2 TP + FP + FN)` for `class`, pooled over all pairs.
pub fn dsc(preds: &[ClassMap], gts: &[ClassMap], class: u8) -> Result<f64> {
    let (tp, fp, fneg) = counts(preds, gts, class)?;
    Ok(ratio(tp, fp, fneg))
}

fn ratio(tp: u64, fp: u64, fneg: u64) -> f64 {
    if tp + fp + fneg == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
    }
}

fn counts(preds: &[ClassMap], gts: &[ClassMap], class: u8) -> Result<(u64, u64, u64)> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "dsc",
            format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
        ));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        if !p.same_shape(g) {
            return Err(Error::shape(
                "dsc",
                format!(
                    "pair {k}: prediction {}x{} vs ground truth {}x{}",
                    p.height(),
                    p.width(),
                    g.height(),
                    g.width()
                ),
            ));
        }
        if g.has_ignore() {
            return Err(Error::Data(format!("dsc: ground truth {k} has unannotated pixels")));
        }
        for (&a, &b) in p.labels().iter().zip(g.labels()) {
            match (a == class, b == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    Ok((tp, fp, fneg))
}

/// Per-class and mean Dice for one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct DscReport {
    pub per_class: Vec<f64>,
    pub average: f64,
}

impl DscReport {
    pub fn from_per_class(per_class: Vec<f64>) -> Self {
        let average = per_class.iter().sum::<f64>() / per_class.len() as f64;
        DscReport { per_class, average }
    }
}

pub fn fold_report(preds: &[ClassMap], gts: &[ClassMap], num_classes: usize) -> Result<DscReport> {
    if gts.is_empty() {
        return Err(Error::Data("cannot score an empty test set".into()));
    }
    if num_classes == 0 || num_classes >= IGNORE as usize {
        return Err(Error::Config(format!("unsupported class count {num_classes}")));
    }
    let per_class = (0..num_classes)
        .map(|c| dsc(preds, gts, c as u8))
        .collect::<Result<Vec<_>>>()?;
    Ok(DscReport::from_per_class(per_class))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Cross-fold summary.
#[derive(Clone, Debug, PartialEq)]
pub struct DscSummary {
    pub folds: Vec<DscReport>,
    pub per_class: Vec<MeanStd>,
    pub average: MeanStd,
}

pub fn aggregate(folds: &[DscReport]) -> Result<DscSummary> {
    let first = folds
        .first()
        .ok_or_else(|| Error::Data("aggregate needs at least one fold".into()))?;
    let c = first.per_class.len();
    if folds.iter().any(|f| f.per_class.len() != c) {
        return Err(Error::Data("folds report different class sets".into()));
    }
    let per_class = (0..c)
        .map(|k| MeanStd::of(&folds.iter().map(|f| f.per_class[k]).collect::<Vec<_>>()))
        .collect();
    let average = MeanStd::of(&folds.iter().map(|f| f.average).collect::<Vec<_>>());
    Ok(DscSummary {
        folds: folds.to_vec(),
        per_class,
        average,
    })
}

pub fn class_name(class: usize, num_classes: usize) -> String {
    match (num_classes, class) {
        (2, 0) => "background".into(),
        (2, 1) => "membrane".into(),
        _ => format!("class{class}"),
    }
}

/// `85.47±0.08` style cell, in percent.
pub fn format_cell(ms: MeanStd) -> String {
    format!("{:.2}±{:.2}", ms.mean * 100.0, ms.std * 100.0)
}

/// Per-fold rows under `metric,class,fold,value`, then summary rows under
/// `metric,class,mean,std`; all values in percent with two decimals.
pub fn report_csv(summary: &DscSummary, fold_ids: &[usize]) -> String {
    let c = summary.per_class.len();
    let mut s = String::from("metric,class,fold,value\n");
    for (f, rep) in fold_ids.iter().zip(&summary.folds) {
        let _ = writeln!(s, "dsc,average,{f},{:.2}", rep.average * 100.0);
        for (k, v) in rep.per_class.iter().enumerate() {
            let _ = writeln!(s, "dsc,{},{f},{:.2}", class_name(k, c), v * 100.0);
        }
    }
    s.push_str("metric,class,mean,std\n");
    let _ = writeln!(
        s,
        "dsc,average,{:.2},{:.2}",
        summary.average.mean * 100.0,
        summary.average.std * 100.0
    );
    for (k, ms) in summary.per_class.iter().enumerate() {
        let _ = writeln!(s, "dsc,{},{:.2},{:.2}", class_name(k, c), ms.mean * 100.0, ms.std * 100.0);
    }
    s
}
