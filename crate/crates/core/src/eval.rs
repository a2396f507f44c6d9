//! Embedding-level evaluation: two-way identification, top-k retrieval,
//! cosine statistics and retrieval-based reconstruction.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::StimulusSet;

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// `pred x gallery` cosine similarities.
pub fn cosine_matrix(pred: ArrayView2<f64>, gallery: ArrayView2<f64>) -> Array2<f64> {
    let unit = |m: ArrayView2<f64>| {
        let mut u = m.to_owned();
        for mut row in u.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        u
    };
    unit(pred).dot(&unit(gallery).t())
}

fn check_pair(pred: ArrayView2<f64>, targets: ArrayView2<f64>, min_rows: usize) -> Result<()> {
    if pred.dim() != targets.dim() {
        return Err(Error::shape(
            "evaluation",
            format!("{:?}", targets.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    if pred.nrows() < min_rows {
        return Err(Error::InvalidInput(format!(
            "evaluation needs at least {min_rows} items"
        )));
    }
    if !pred.iter().chain(targets.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("evaluation inputs".into()));
    }
    Ok(())
}

/// Per-item two-way accuracy: the fraction of distractors `j` for which
/// `cos(pred_i, target_i) > cos(pred_i, target_j)`; exact ties count half.
pub fn two_way_per_item(pred: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_pair(pred, targets, 2)?;
    let sim = cosine_matrix(pred, targets);
    let n = sim.nrows();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let own = sim[[i, i]];
            let won: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| match own.partial_cmp(&sim[[i, j]]) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Equal) => 0.5,
                    _ => 0.0,
                })
                .sum();
            won / (n - 1) as f64
        })
        .collect())
}

/// Exhaustive two-way identification accuracy.
pub fn two_way_identification(pred: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    let per = two_way_per_item(pred, targets)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Gallery indices ranked by decreasing cosine; ties keep gallery order.
fn ranking(sim_row: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sim_row.len()).collect();
    idx.sort_by(|&a, &b| sim_row[b].total_cmp(&sim_row[a]).then(a.cmp(&b)));
    idx
}

/// Fraction of items whose own gallery row (row `i` for item `i`) ranks in the top `k`.
pub fn topk_retrieval(pred: ArrayView2<f64>, gallery: ArrayView2<f64>, k: usize) -> Result<f64> {
    check_pair(pred, gallery, 1)?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let sim = cosine_matrix(pred, gallery);
    let hits = (0..sim.nrows())
        .into_par_iter()
        .filter(|&i| ranking(sim.row(i)).iter().take(k).any(|&g| g == i))
        .count();
    Ok(hits as f64 / sim.nrows() as f64)
}

/// Index of the stimulus nearest to `pred` by cosine; ties go to the lowest index.
pub fn nearest_stimulus(pred: ArrayView1<f64>, embeddings: ArrayView2<f64>) -> Result<usize> {
    if embeddings.nrows() == 0 {
        return Err(Error::InvalidInput("empty stimulus set".into()));
    }
    if embeddings.ncols() != pred.len() {
        return Err(Error::shape(
            "reconstruct_by_retrieval",
            embeddings.ncols(),
            pred.len(),
        ));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, row) in embeddings.rows().into_iter().enumerate() {
        let s = cosine(pred, row);
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    Ok(best)
}

/// The stimulus whose embedding best matches the prediction.
pub fn reconstruct_by_retrieval(pred: ArrayView1<f64>, stimuli: &StimulusSet) -> Result<String> {
    let i = nearest_stimulus(pred, stimuli.embeddings().view())?;
    Ok(stimuli.stimuli[i].stimulus_id.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub n: usize,
    pub two_way_accuracy: f64,
    pub mean_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: String,
    pub subject_id: String,
    pub n_test: usize,
    pub two_way_accuracy: f64,
    /// `"top{k}"` -> fraction.
    pub topk: BTreeMap<String, f64>,
    pub mean_cosine: f64,
    /// Fraction of retrieved reconstructions that fall in the true class.
    pub reconstruction_class_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Labelled test predictions for one run.
pub struct EvalInput<'a> {
    pub run: &'a str,
    pub subject_id: &'a str,
    pub pred: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
    pub class_ids: &'a [usize],
}

pub fn build_report(
    input: &EvalInput,
    stimuli: &StimulusSet,
    topk: &[usize],
) -> Result<EvalReport> {
    let n = input.pred.nrows();
    if input.class_ids.len() != n {
        return Err(Error::shape(
            "build_report (class ids)",
            n,
            input.class_ids.len(),
        ));
    }
    let per_item = two_way_per_item(input.pred, input.targets)?;
    let cos: Vec<f64> = (0..n)
        .map(|i| cosine(input.pred.row(i), input.targets.row(i)))
        .collect();
    let mut topk_map = BTreeMap::new();
    for &k in topk {
        topk_map.insert(
            format!("top{k}"),
            topk_retrieval(input.pred, input.targets, k)?,
        );
    }
    let emb = stimuli.embeddings();
    let recon_hits = input
        .pred
        .axis_iter(Axis(0))
        .zip(input.class_ids)
        .map(|(p, &c)| {
            Ok(usize::from(
                stimuli.stimuli[nearest_stimulus(p, emb.view())?].class_id == c,
            ))
        })
        .sum::<Result<usize>>()?;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in input.class_ids.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let per_class = groups
        .into_iter()
        .map(|(class_id, idx)| ClassMetrics {
            class_id,
            n: idx.len(),
            two_way_accuracy: idx.iter().map(|&i| per_item[i]).sum::<f64>() / idx.len() as f64,
            mean_cosine: idx.iter().map(|&i| cos[i]).sum::<f64>() / idx.len() as f64,
        })
        .collect();

    Ok(EvalReport {
        run: input.run.to_string(),
        subject_id: input.subject_id.to_string(),
        n_test: n,
        two_way_accuracy: per_item.iter().sum::<f64>() / n as f64,
        topk: topk_map,
        mean_cosine: cos.iter().sum::<f64>() / n as f64,
        reconstruction_class_accuracy: recon_hits as f64 / n as f64,
        per_class,
    })
}

/// One comparison table row: the swept value plus the headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: BTreeMap<String, String>,
    pub report: EvalReport,
}

/// Writes rows as CSV. Label columns come first (sorted by name), then metrics.
pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<String> {
    let label_cols: Vec<String> = rows
        .first()
        .map(|r| r.label.keys().cloned().collect())
        .unwrap_or_default();
    let topk_cols: Vec<String> = rows
        .first()
        .map(|r| r.report.topk.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = label_cols.clone();
    header.extend(["subject_id", "n_test", "two_way"].map(String::from));
    header.extend(topk_cols.iter().cloned());
    header.extend(["mean_cosine", "recon_class_acc"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = label_cols
            .iter()
            .map(|c| r.label.get(c).cloned().unwrap_or_default())
            .collect();
        rec.push(r.report.subject_id.clone());
        rec.push(r.report.n_test.to_string());
        rec.push(format!("{:.6}", r.report.two_way_accuracy));
        for c in &topk_cols {
            rec.push(format!(
                "{:.6}",
                r.report.topk.get(c).copied().unwrap_or(f64::NAN)
            ));
        }
        rec.push(format!("{:.6}", r.report.mean_cosine));
        rec.push(format!("{:.6}", r.report.reconstruction_class_accuracy));
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    crate::array::write_bytes(path, &bytes)?;
    Ok(crate::array::sha256_hex(&bytes))
}
