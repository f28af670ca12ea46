use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, RunConfig};
use crate::features::{Dataset, Planted};
use crate::model::Variant;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_class_accuracy: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub selection_recall: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Failure message; the remaining variants still run.
    pub error: Option<String>,
}

/// Trains every variant with the same seed and data. Variants are
/// independent and may run in parallel; rows keep the input order.
pub fn ablate(base: &RunConfig, variants: &[Variant], data: &Dataset, planted: Option<&Planted>) -> Vec<AblationRow> {
    par::map_slice(variants, |&variant| {
        let cfg = RunConfig { variant, ..base.clone() };
        match train(&cfg, data, planted) {
            Ok(out) => AblationRow {
                variant,
                mean_class_accuracy: Some(out.evaluation.report.mean_class_accuracy),
                overall_accuracy: Some(out.evaluation.report.overall_accuracy),
                selection_recall: out.evaluation.selection_recall,
                best_epoch: Some(out.best_epoch),
                error: None,
            },
            Err(e) => {
                log::error!("variant {variant} failed: {e}");
                AblationRow {
                    variant,
                    mean_class_accuracy: None,
                    overall_accuracy: None,
                    selection_recall: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                }
            }
        }
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,mean_class_accuracy,overall_accuracy,selection_recall,best_epoch,error\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.variant,
            f(r.mean_class_accuracy),
            f(r.overall_accuracy),
            f(r.selection_recall),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub lower: Variant,
    pub higher: Variant,
    pub min_gap: f64,
    pub lower_acc: f64,
    pub higher_acc: f64,
    pub passed: bool,
}

/// The expected directions between variants, where both were run:
/// simple-fusion < no-gnn < full by at least one point each, and
/// no-attention < full, only-rgb < rgb-graph strictly.
pub fn directional_checks(rows: &[AblationRow]) -> Vec<OrderingCheck> {
    let acc = |v: Variant| rows.iter().find(|r| r.variant == v).and_then(|r| r.mean_class_accuracy);
    [
        (Variant::SimpleFusion, Variant::NoGnn, 0.01),
        (Variant::NoGnn, Variant::Full, 0.01),
        (Variant::NoAttention, Variant::Full, 0.0),
        (Variant::OnlyRgb, Variant::RgbGraph, 0.0),
    ]
    .into_iter()
    .filter_map(|(lower, higher, min_gap)| {
        let (lo, hi) = (acc(lower)?, acc(higher)?);
        let passed = if min_gap > 0.0 { hi - lo >= min_gap - 1e-12 } else { hi > lo };
        Some(OrderingCheck { lower, higher, min_gap, lower_acc: lo, higher_acc: hi, passed })
    })
    .collect()
}
