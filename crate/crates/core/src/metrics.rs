//! Support-weighted precision, recall, F1 and one-vs-rest AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassStats>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when no class has both positive and negative gold instances.
    pub auc: Option<f64>,
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Precision or recall denominators that were zero (the metric is set
    /// to 0 in that case).
    pub zero_divisions: usize,
}

fn ratio(num: usize, den: usize, zero_div: &mut usize) -> f64 {
    if den == 0 {
        *zero_div += 1;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and support-weighted P/R/F1 over `num_classes` classes (more
/// if a label exceeds it).
pub fn weighted_prf(gold: &[usize], pred: &[usize], num_classes: usize) -> Result<EvalResult> {
    if gold.len() != pred.len() {
        return Err(Error::Protocol(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Err(Error::Protocol("cannot evaluate zero instances".into()));
    }
    let k = gold.iter().chain(pred).map(|&c| c + 1).max().unwrap_or(0).max(num_classes);
    let mut confusion = vec![vec![0usize; k]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    let mut zero_divisions = 0;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted, &mut zero_divisions);
        let recall = ratio(tp, support, &mut zero_divisions);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassStats {
            precision,
            recall,
            f1,
            support,
        });
    }
    let total = gold.len() as f64;
    let weighted = |f: fn(&ClassStats) -> f64| per_class.iter().map(|s| s.support as f64 * f(s)).sum::<f64>() / total;
    Ok(EvalResult {
        precision: weighted(|s| s.precision),
        recall: weighted(|s| s.recall),
        f1: weighted(|s| s.f1),
        auc: None,
        per_class: per_class.clone(),
        confusion,
        zero_divisions,
    })
}

/// Mann-Whitney estimate of `P(s+ > s-) + P(s+ = s-)/2`, with midranks for
/// ties. `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank2_sum += mid2;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u64;
    // 2 * (rank sum - n_pos (n_pos + 1) / 2) = twice the pair count.
    let pairs2 = rank2_sum - np * (np + 1);
    Some(pairs2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Support-weighted one-vs-rest AUC. Classes absent from `gold` (or
/// covering all of it) are skipped with a warning.
pub fn weighted_auc(gold: &[usize], scores: &[Vec<f64>]) -> Result<Option<f64>> {
    if gold.len() != scores.len() {
        return Err(Error::Protocol(format!("{} gold labels but {} score rows", gold.len(), scores.len())));
    }
    let k = scores.first().map_or(0, Vec::len);
    if let Some(row) = scores.iter().position(|r| r.len() != k) {
        return Err(Error::Protocol(format!("score row {row} has {} entries, expected {k}", scores[row].len())));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= k) {
        return Err(Error::Protocol(format!("gold class {g} has no score column")));
    }
    let mut num = 0.0;
    let mut weight = 0usize;
    for c in 0..k {
        let positive: Vec<bool> = gold.iter().map(|&g| g == c).collect();
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        match binary_auc(&col, &positive) {
            Some(a) => {
                let support = positive.iter().filter(|&&p| p).count();
                num += support as f64 * a;
                weight += support;
            }
            None => log::warn!("class {c} is absent from (or covers all of) the gold labels; skipped in AUC"),
        }
    }
    Ok((weight > 0).then(|| num / weight as f64))
}

/// P/R/F1 from argmax predictions plus AUC from the probabilities.
pub fn evaluate(gold: &[usize], probs: &[Vec<f64>], num_classes: usize) -> Result<EvalResult> {
    let pred: Vec<usize> = probs.iter().map(|p| crate::model::argmax(p)).collect();
    let mut r = weighted_prf(gold, &pred, num_classes)?;
    r.auc = weighted_auc(gold, probs)?;
    Ok(r)
}

/// Fixed four-decimal rendering used in every report.
pub fn fmt4(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "nan".into(), fmt4)
}

impl EvalResult {
    /// Per-class rows, then a `weighted` row carrying AUC, then the
    /// confusion matrix.
    pub fn to_tsv(&self, class_names: &[String]) -> String {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut s = String::from("class\tprecision\trecall\tf1\tsupport\tauc\n");
        for (c, st) in self.per_class.iter().enumerate() {
            writeln!(s, "{}\t{}\t{}\t{}\t{}\t", name(c), fmt4(st.precision), fmt4(st.recall), fmt4(st.f1), st.support).unwrap();
        }
        let total: usize = self.per_class.iter().map(|c| c.support).sum();
        writeln!(
            s,
            "weighted\t{}\t{}\t{}\t{total}\t{}",
            fmt4(self.precision),
            fmt4(self.recall),
            fmt4(self.f1),
            fmt_auc(self.auc)
        )
        .unwrap();
        s.push_str("\ngold\\pred");
        for c in 0..self.confusion.len() {
            write!(s, "\t{}", name(c)).unwrap();
        }
        s.push('\n');
        for (g, row) in self.confusion.iter().enumerate() {
            s.push_str(&name(g));
            for v in row {
                write!(s, "\t{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}
