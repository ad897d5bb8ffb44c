//! Top-k accuracy, compositional action accuracy, expected calibration error
//! and per-class breakdowns. All accumulation is in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

pub const ECE_BINS: usize = 15;
pub const PER_CLASS_TOP_N: usize = 20;

fn check_rows(probs: &Tensor, labels: &[usize]) -> Result<usize> {
    if probs.ndim() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} do not match {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let c = probs.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {bad} outside [0, {c})")));
    }
    Ok(c)
}

/// Whether `label` is among the `k` highest entries of `row`; ties rank the
/// lower class index first.
pub fn in_top_k(row: &[f32], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    ahead < k
}

pub fn topk_accuracy(probs: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let c = check_rows(probs, labels)?;
    if k == 0 || k > c {
        return Err(Error::Contract(format!("top-{k} with {c} classes")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| in_top_k(probs.row(i), l, k))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of samples whose top-1 noun and top-1 verb are both correct.
pub fn action_accuracy(
    noun_probs: &Tensor,
    verb_probs: &Tensor,
    noun_labels: &[usize],
    verb_labels: &[usize],
) -> Result<f64> {
    check_rows(noun_probs, noun_labels)?;
    check_rows(verb_probs, verb_labels)?;
    if noun_labels.len() != verb_labels.len() {
        return Err(Error::Dimension("noun and verb sets differ in size".into()));
    }
    if noun_labels.is_empty() {
        return Ok(0.0);
    }
    let hits = (0..noun_labels.len())
        .filter(|&i| {
            argmax(noun_probs.row(i)) == noun_labels[i] && argmax(verb_probs.row(i)) == verb_labels[i]
        })
        .count();
    Ok(hits as f64 / noun_labels.len() as f64)
}

/// Bin of a confidence under right-closed intervals `((k-1)/K, k/K]`.
pub fn ece_bin(conf: f64, bins: usize) -> usize {
    let k = (conf * bins as f64).ceil() as usize;
    // Guard the ceil against rounding: the bin must satisfy lo < conf <= hi.
    let mut k = k.clamp(1, bins);
    while k > 1 && conf <= (k - 1) as f64 / bins as f64 {
        k -= 1;
    }
    while k < bins && conf > k as f64 / bins as f64 {
        k += 1;
    }
    k - 1
}

pub fn expected_calibration_error(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    check_rows(probs, labels)?;
    if bins == 0 {
        return Err(Error::Contract("ECE needs at least one bin".into()));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i);
        let total: f64 = row.iter().map(|&p| p as f64).sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "row {i} sums to {total}, expected probabilities"
            )));
        }
        let pred = argmax(row);
        let conf = row[pred] as f64;
        let b = ece_bin(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == label {
            correct[b] += 1;
        }
    }
    let mut ece = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let m = count[b] as f64;
            ece += (m / n as f64) * (correct[b] as f64 / m - conf_sum[b] / m).abs();
        }
    }
    Ok(ece)
}

/// Support and top-1 accuracy of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: usize,
    pub support: usize,
    pub accuracy: f64,
}

pub fn per_class(probs: &Tensor, labels: &[usize]) -> Result<Vec<ClassStat>> {
    let c = check_rows(probs, labels)?;
    let mut support = vec![0usize; c];
    let mut hits = vec![0usize; c];
    for (i, &l) in labels.iter().enumerate() {
        support[l] += 1;
        if argmax(probs.row(i)) == l {
            hits[l] += 1;
        }
    }
    Ok((0..c)
        .filter(|&k| support[k] > 0)
        .map(|k| ClassStat {
            class: k,
            support: support[k],
            accuracy: hits[k] as f64 / support[k] as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top5: f64,
    pub noun_top1: Option<f64>,
    pub verb_top1: Option<f64>,
    pub action_top1: Option<f64>,
    pub ece: f64,
    pub num_samples: usize,
    pub num_bins: usize,
    /// `[class, support, accuracy]` rows.
    #[serde(with = "per_class_rows")]
    pub per_class: Vec<ClassStat>,
}

mod per_class_rows {
    use super::ClassStat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(rows: &[ClassStat], s: S) -> Result<S::Ok, S::Error> {
        rows.iter()
            .map(|r| (r.class, r.support, r.accuracy))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ClassStat>, D::Error> {
        let rows = Vec::<(usize, usize, f64)>::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|(class, support, accuracy)| ClassStat {
                class,
                support,
                accuracy,
            })
            .collect())
    }
}

impl MetricsReport {
    /// Report for a single-head classifier.
    pub fn single(probs: &Tensor, labels: &[usize]) -> Result<Self> {
        let c = check_rows(probs, labels)?;
        Ok(Self {
            top1: topk_accuracy(probs, labels, 1)?,
            top5: topk_accuracy(probs, labels, 5.min(c))?,
            noun_top1: None,
            verb_top1: None,
            action_top1: None,
            ece: expected_calibration_error(probs, labels, ECE_BINS)?,
            num_samples: labels.len(),
            num_bins: ECE_BINS,
            per_class: per_class(probs, labels)?,
        })
    }

    /// Report for noun/verb heads. Top-k, ECE and per-class statistics are
    /// taken on the joint action distribution `p(noun)·p(verb)`, whose
    /// top-1 is exactly the pair of per-head top-1 predictions.
    pub fn compositional(
        noun_probs: &Tensor,
        verb_probs: &Tensor,
        noun_labels: &[usize],
        verb_labels: &[usize],
    ) -> Result<Self> {
        let action = joint_action_probs(noun_probs, verb_probs)?;
        let v = verb_probs.shape()[1];
        let labels: Vec<usize> = noun_labels
            .iter()
            .zip(verb_labels)
            .map(|(&n, &vb)| n * v + vb)
            .collect();
        let mut report = Self::single(&action, &labels)?;
        report.noun_top1 = Some(topk_accuracy(noun_probs, noun_labels, 1)?);
        report.verb_top1 = Some(topk_accuracy(verb_probs, verb_labels, 1)?);
        report.action_top1 = Some(action_accuracy(noun_probs, verb_probs, noun_labels, verb_labels)?);
        Ok(report)
    }

    /// Headline accuracy: action top-1 when available, else top-1.
    pub fn accuracy(&self) -> f64 {
        self.action_top1.unwrap_or(self.top1)
    }
}

/// Outer product of per-head distributions, `[N×(nouns·verbs)]`.
pub fn joint_action_probs(noun: &Tensor, verb: &Tensor) -> Result<Tensor> {
    if noun.ndim() != 2 || verb.ndim() != 2 || noun.shape()[0] != verb.shape()[0] {
        return Err(Error::Dimension(format!(
            "noun {:?} and verb {:?} probabilities must share rows",
            noun.shape(),
            verb.shape()
        )));
    }
    let (rows, nn, nv) = (noun.shape()[0], noun.shape()[1], verb.shape()[1]);
    let mut out = Vec::with_capacity(rows * nn * nv);
    for i in 0..rows {
        for &pn in noun.row(i) {
            out.extend(verb.row(i).iter().map(|&pv| pn * pv));
        }
    }
    Tensor::new(&[rows, nn * nv], out)
}

/// Accuracy differences `a − b` over the `top_n` most frequent classes of `a`
/// (support descending, class id ascending on ties).
pub fn per_class_delta(
    a: &MetricsReport,
    b: &MetricsReport,
    top_n: usize,
) -> Result<Vec<(usize, f64)>> {
    if a.num_samples != b.num_samples {
        return Err(Error::Contract(format!(
            "reports cover {} and {} samples",
            a.num_samples, b.num_samples
        )));
    }
    let mut classes = a.per_class.clone();
    classes.sort_by(|x, y| y.support.cmp(&x.support).then(x.class.cmp(&y.class)));
    classes
        .into_iter()
        .take(top_n)
        .map(|sa| {
            let acc_b = b
                .per_class
                .iter()
                .find(|s| s.class == sa.class)
                .map(|s| s.accuracy)
                .ok_or_else(|| Error::Contract(format!("class {} missing from report b", sa.class)))?;
            Ok((sa.class, sa.accuracy - acc_b))
        })
        .collect()
}
