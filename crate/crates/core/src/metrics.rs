//! Retrieval evaluation: cosine ranking, average precision, Recall@1, the
//! self-test/cross-test protocol, the empirical compatibility predicate, and
//! the surrogate improvement/compatibility scores derived from mAP.

use crate::encoder::{embed_matrix, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix, ZERO_NORM_EPS};
use crate::synth::DatasetSplit;

/// Gallery indices sorted by descending cosine to the query; ties break
/// toward the lower index. Degenerate gallery rows sort last.
pub fn rank_gallery(query: &[f64], gallery: &Matrix) -> Result<Vec<usize>> {
    let qn = norm(query);
    if qn < ZERO_NORM_EPS {
        return Err(Error::ZeroVector(None));
    }
    let mut scored: Vec<(usize, f64)> = gallery
        .rows_iter()
        .enumerate()
        .map(|(i, row)| {
            let rn = norm(row);
            let sim = if rn < ZERO_NORM_EPS {
                f64::NEG_INFINITY
            } else {
                dot(query, row) / (qn * rn)
            };
            (i, sim)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Average precision of one ranked label list: mean of precision@k over the
/// ranks k holding relevant items, divided by the total relevant count `r`.
pub fn average_precision(ranked_labels: &[usize], query_label: usize, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::NoRelevant(query_label));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &label) in ranked_labels.iter().enumerate() {
        if label == query_label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / r as f64)
}

/// mAP and Recall@1 of embedded query rows against embedded gallery rows.
pub fn evaluate_embeddings(
    query_emb: &Matrix,
    query_labels: &[usize],
    gallery_emb: &Matrix,
    gallery_labels: &[usize],
) -> Result<(f64, f64)> {
    let mut ap_sum = 0.0;
    let mut top1 = 0usize;
    for (qi, label) in query_labels.iter().enumerate() {
        let ranked = rank_gallery(query_emb.row(qi), gallery_emb)?;
        let ranked_labels: Vec<usize> = ranked.iter().map(|&gi| gallery_labels[gi]).collect();
        let relevant = gallery_labels.iter().filter(|&&l| l == *label).count();
        ap_sum += average_precision(&ranked_labels, *label, relevant)?;
        if ranked_labels[0] == *label {
            top1 += 1;
        }
    }
    let n = query_labels.len() as f64;
    Ok((ap_sum / n, top1 as f64 / n))
}

/// mAP and Recall@1 with queries embedded by `query_model` and the gallery by
/// `gallery_model`. Equal models make this the self-test protocol.
pub fn evaluate_pair(
    query_model: &EncoderParams,
    gallery_model: &EncoderParams,
    split: &DatasetSplit,
) -> Result<(f64, f64)> {
    if query_model.embed_dim != gallery_model.embed_dim {
        return Err(Error::config(format!(
            "embed_dim mismatch: query {} vs gallery {}",
            query_model.embed_dim, gallery_model.embed_dim
        )));
    }
    let q = embed_matrix(query_model, &split.query.inputs);
    let g = embed_matrix(gallery_model, &split.gallery.inputs);
    evaluate_embeddings(&q, &split.query.labels, &g, &split.gallery.labels)
}

/// Surrogate improvement scores over mAP: relative self-test gain, relative
/// cross-test gain over the old self-test, and their harmonic mean (zero if
/// either gain clamps at zero).
pub fn p_metrics(map_self_old: f64, map_self_new: f64, map_cross: f64) -> (f64, f64, f64) {
    let p_up = (map_self_new - map_self_old) / map_self_old;
    let p_comp = (map_cross - map_self_old) / map_self_old;
    let u = p_up.max(0.0);
    let c = p_comp.max(0.0);
    let p_1 = if u == 0.0 || c == 0.0 {
        0.0
    } else {
        2.0 * u * c / (u + c)
    };
    (p_up, p_comp, p_1)
}

/// Full evaluation report for one old/new model pair.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub map_self_old: f64,
    pub map_self_new: f64,
    pub map_cross: f64,
    pub recall1_self_new: f64,
    pub recall1_cross: f64,
    /// Empirical criterion: cross-test beats the old self-test.
    pub compatible: bool,
    pub p_up: f64,
    pub p_comp: f64,
    pub p_1: f64,
}

impl MetricsReport {
    pub fn build(
        map_self_old: f64,
        map_self_new: f64,
        map_cross: f64,
        recall1_self_new: f64,
        recall1_cross: f64,
    ) -> MetricsReport {
        let (p_up, p_comp, p_1) = p_metrics(map_self_old, map_self_new, map_cross);
        MetricsReport {
            map_self_old,
            map_self_new,
            map_cross,
            recall1_self_new,
            recall1_cross,
            compatible: map_cross > map_self_old,
            p_up,
            p_comp,
            p_1,
        }
    }

    /// Evaluate the standard protocol: old and new self-tests plus the
    /// new-query/old-gallery cross-test.
    pub fn evaluate(
        old_model: &EncoderParams,
        new_model: &EncoderParams,
        split: &DatasetSplit,
    ) -> Result<MetricsReport> {
        let (map_self_old, _) = evaluate_pair(old_model, old_model, split)?;
        let (map_self_new, recall1_self_new) = evaluate_pair(new_model, new_model, split)?;
        let (map_cross, recall1_cross) = evaluate_pair(new_model, old_model, split)?;
        Ok(MetricsReport::build(
            map_self_old,
            map_self_new,
            map_cross,
            recall1_self_new,
            recall1_cross,
        ))
    }

    /// Flat key=value lines (stable order, used for the plaintext report).
    pub fn to_kv_text(&self) -> String {
        format!(
            "map_self_old={:.6}\nmap_self_new={:.6}\nmap_cross={:.6}\n\
             recall1_self_new={:.6}\nrecall1_cross={:.6}\ncompatible={}\n\
             p_up={:.6}\np_comp={:.6}\np_1={:.6}\n",
            self.map_self_old,
            self.map_self_new,
            self.map_cross,
            self.recall1_self_new,
            self.recall1_cross,
            self.compatible,
            self.p_up,
            self.p_comp,
            self.p_1
        )
    }

    /// Fixed-width table: self-test and cross-test mAP columns, then the
    /// surrogate scores.
    pub fn to_table(&self, label: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>12} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
            "model", "self-test", "cross-test", "compatible", "P_up", "P_comp", "P_1"
        ));
        out.push_str(&format!(
            "{:<12} {:>12.4} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
            "old",
            self.map_self_old,
            "--",
            "--",
            "--",
            "--",
            "--"
        ));
        out.push_str(&format!(
            "{:<12} {:>12.4} {:>12.4} {:>12} {:>8.4} {:>8.4} {:>8.4}\n",
            label,
            self.map_self_new,
            self.map_cross,
            if self.compatible { "yes" } else { "no" },
            self.p_up,
            self.p_comp,
            self.p_1
        ));
        out
    }
}
