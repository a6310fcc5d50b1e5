use std::fmt::Write as _;

use super::accumulator::{EvalAccumulator, Metrics};
use super::roc::{roc_auc, RocPoint};
use crate::error::{Error, Result};

/// Fixed-threshold metrics plus truncated ROC areas at Fa = 0.5e-6 and 1e-6.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub metrics: Metrics,
    pub auc_half: Option<f64>,
    pub auc_one: Option<f64>,
}

impl EvalReport {
    pub fn from_accumulator(acc: &EvalAccumulator) -> Result<Self> {
        let roc = acc.roc();
        let (auc_half, auc_one) = if roc.is_empty() {
            (None, None)
        } else {
            (Some(roc_auc(&roc, 0.5)?), Some(roc_auc(&roc, 1.0)?))
        };
        Ok(Self {
            samples: acc.samples(),
            metrics: acc.metrics(),
            auc_half,
            auc_one,
        })
    }

    fn records(&self) -> Vec<(&'static str, f64)> {
        let m = &self.metrics;
        let mut r = vec![
            ("samples", self.samples as f64),
            ("iou", m.iou),
            ("niou", m.niou),
            ("f_measure", m.f_measure),
            ("precision", m.precision),
            ("recall", m.recall),
            ("pd", m.pd),
            ("fa", m.fa),
        ];
        if let (Some(a), Some(b)) = (self.auc_half, self.auc_one) {
            r.push(("auc_fa_0.5e-6", a));
            r.push(("auc_fa_1e-6", b));
        }
        r
    }

    /// Human-readable table, percentages for pixel and target rates and Fa in 1e-6.
    pub fn to_table(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "samples        {}", self.samples);
        let _ = writeln!(s, "IoU (%)        {:.2}", 100.0 * m.iou);
        let _ = writeln!(s, "nIoU (%)       {:.2}", 100.0 * m.niou);
        let _ = writeln!(s, "F-measure (%)  {:.2}", 100.0 * m.f_measure);
        let _ = writeln!(s, "Pd (%)         {:.2}", 100.0 * m.pd);
        let _ = writeln!(s, "Fa (1e-6)      {:.2}", 1e6 * m.fa);
        if let (Some(a), Some(b)) = (self.auc_half, self.auc_one) {
            let _ = writeln!(s, "AUC Fa<=0.5e-6 {a:.4}");
            let _ = writeln!(s, "AUC Fa<=1e-6   {b:.4}");
        }
        s
    }

    /// One `name<TAB>value` line per metric; values roundtrip exactly.
    pub fn to_records(&self) -> String {
        self.records()
            .into_iter()
            .map(|(k, v)| format!("{k}\t{v:?}\n"))
            .collect()
    }

    pub fn parse_records(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let (k, v) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("report line {}: expected name<TAB>value", n + 1))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("report line {}: {e}", n + 1)))?;
            map.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("report is missing `{k}`")))
        };
        Ok(Self {
            samples: get("samples")? as usize,
            metrics: Metrics {
                iou: get("iou")?,
                niou: get("niou")?,
                f_measure: get("f_measure")?,
                precision: get("precision")?,
                recall: get("recall")?,
                pd: get("pd")?,
                fa: get("fa")?,
            },
            auc_half: map.get("auc_fa_0.5e-6").copied(),
            auc_one: map.get("auc_fa_1e-6").copied(),
        })
    }
}

/// ROC points as comma-separated `fa_1e-6,pd` rows with a header.
pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("fa_1e-6,pd\n");
    for p in points {
        let _ = writeln!(s, "{:?},{:?}", p.fa * 1e6, p.pd);
    }
    s
}
