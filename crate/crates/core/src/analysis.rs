//! Diagnostics over attention bundles: entropy of argmax correspondences,
//! per-bundle congruence reports and an entropy/score correlation probe.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{row_softmax, AttentionBundle};
use crate::congruence::{
    argmax_correspondence, cacr_total, change_of_basis_v, hard_equivalence_v, CorrespondenceMap,
};
use crate::divergence::mkl;
use crate::error::{Error, Result};

/// Shannon entropy (nats) of the argmax targets in each direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub id: String,
    pub lang_to_vis_entropy: f64,
    pub vis_to_lang_entropy: f64,
}

impl EntropyReport {
    /// Largest entropy any map between these token counts can reach.
    pub fn upper_bound(n_lang: usize, n_vis: usize) -> f64 {
        (n_lang.min(n_vis) as f64).ln()
    }
}

/// Entropy of the empirical distribution of `targets`.
pub fn index_entropy(targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Data("entropy of an empty index list".into()));
    }
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for &t in targets {
        *counts.entry(t).or_default() += 1;
    }
    let n = targets.len() as f64;
    let h = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>();
    // a single target gives -1·ln 1 = -0.0
    Ok(h.max(0.0))
}

pub fn argmax_entropy(map: &CorrespondenceMap) -> Result<EntropyReport> {
    if map.lang_to_vis.is_empty() || map.vis_to_lang.is_empty() {
        return Err(Error::Data("correspondence map has an empty direction".into()));
    }
    map.validate(map.n_lang(), map.n_vis())?;
    Ok(EntropyReport {
        id: String::new(),
        lang_to_vis_entropy: index_entropy(&map.lang_to_vis)?,
        vis_to_lang_entropy: index_entropy(&map.vis_to_lang)?,
    })
}

/// One row of the congruence report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub loss_l: f64,
    pub loss_v: f64,
    pub total: f64,
    pub h_l2v: f64,
    pub h_v2l: f64,
    /// m-KL between the softmaxed hard and soft vision-side targets.
    pub hard_soft_div: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub loss_l: f64,
    pub loss_v: f64,
    pub total: f64,
    pub h_l2v: f64,
    pub h_v2l: f64,
    pub hard_soft_div: f64,
}

impl ColumnSummary {
    fn from_columns(rows: &[ReportRow], stat: impl Fn(&mut [f64]) -> f64) -> Self {
        let col = |f: fn(&ReportRow) -> f64| stat(&mut rows.iter().map(f).collect::<Vec<_>>());
        Self {
            loss_l: col(|r| r.loss_l),
            loss_v: col(|r| r.loss_v),
            total: col(|r| r.total),
            h_l2v: col(|r| r.h_l2v),
            h_v2l: col(|r| r.h_v2l),
            hard_soft_div: col(|r| r.hard_soft_div),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongruenceReport {
    pub rows: Vec<ReportRow>,
    pub mean: ColumnSummary,
    pub median: ColumnSummary,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "id",
    "loss_l",
    "loss_v",
    "total",
    "h_l2v",
    "h_v2l",
    "hard_soft_div",
];

impl CongruenceReport {
    /// Writes the per-bundle rows with the fixed column set.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for row in &self.rows {
            writer
                .serialize(row)
                .map_err(|e| Error::Data(format!("writing report: {e}")))?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn report_row(id: &str, bundle: &AttentionBundle) -> Result<ReportRow> {
    let p = bundle.partition();
    let loss = cacr_total(&p)?;
    let entropy = argmax_entropy(&argmax_correspondence(&p))?;
    let hard = row_softmax(&hard_equivalence_v(&p))?;
    let soft = row_softmax(&change_of_basis_v(&p)?)?;
    Ok(ReportRow {
        id: id.to_string(),
        loss_l: loss.loss_l,
        loss_v: loss.loss_v,
        total: loss.total,
        h_l2v: entropy.lang_to_vis_entropy,
        h_v2l: entropy.vis_to_lang_entropy,
        hard_soft_div: mkl(&hard, &soft)?.value,
    })
}

fn mean(v: &mut [f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Report over `(id, bundle)` pairs, rows in input order.
pub fn congruence_report(bundles: &[(String, AttentionBundle)]) -> Result<CongruenceReport> {
    if bundles.is_empty() {
        return Err(Error::Data("no bundles to report on".into()));
    }
    let rows = bundles
        .iter()
        .map(|(id, b)| report_row(id, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(CongruenceReport {
        mean: ColumnSummary::from_columns(&rows, mean),
        median: ColumnSummary::from_columns(&rows, median),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Coefficient(f64),
    /// One of the two series has zero variance.
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Coefficient(r) => Some(r),
            Correlation::Undefined => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationProbe {
    pub n: usize,
    pub lang_to_vis: Correlation,
    pub vis_to_lang: Correlation,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Correlation {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Correlation::Undefined;
    }
    Correlation::Coefficient((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of each entropy direction with a per-example score.
pub fn correlation_probe(reports: &[EntropyReport], scores: &[f64]) -> Result<CorrelationProbe> {
    if reports.len() != scores.len() {
        return Err(Error::Data(format!(
            "{} entropy reports but {} scores",
            reports.len(),
            scores.len()
        )));
    }
    if reports.len() < 3 {
        return Err(Error::Data(format!(
            "correlation needs at least 3 examples, got {}",
            reports.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    let l2v: Vec<f64> = reports.iter().map(|r| r.lang_to_vis_entropy).collect();
    let v2l: Vec<f64> = reports.iter().map(|r| r.vis_to_lang_entropy).collect();
    Ok(CorrelationProbe {
        n: reports.len(),
        lang_to_vis: pearson(&l2v, scores),
        vis_to_lang: pearson(&v2l, scores),
    })
}
