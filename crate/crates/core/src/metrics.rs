//! Multi-label evaluation: average precision, mAP, and per-class / overall
//! precision, recall and F1.
//!
//! AP is the non-interpolated rank form: the mean of precision@rank over the
//! ranks of the positives. Every ranking sorts by descending score and breaks
//! ties by ascending index, so results never depend on sort stability.
//! Classes without positives (or without predictions) have undefined terms;
//! they are left out of the per-class means and listed in the report.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Scores and binary truths for `n` images over `t` labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    scores: Vec<f64>,
    truths: Vec<bool>,
    n: usize,
    t: usize,
}

impl PredictionSet {
    pub fn new(scores: Vec<f64>, truths: Vec<bool>, n: usize, t: usize) -> Result<Self> {
        if scores.len() != n * t || truths.len() != n * t || t == 0 {
            return Err(Error::ShapeMismatch {
                op: "prediction_set",
                lhs: vec![scores.len()],
                rhs: vec![n, t],
            });
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite score {s}")));
        }
        Ok(Self { scores, truths, n, t })
    }

    /// Truths given as 0/1 values; anything else is rejected.
    pub fn from_binary(scores: Vec<f64>, truths: &[f64], n: usize, t: usize) -> Result<Self> {
        let truths = truths
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::InvalidArgument(format!("truth value {v} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Self::new(scores, truths, n, t)
    }

    pub fn num_images(&self) -> usize {
        self.n
    }

    pub fn num_labels(&self) -> usize {
        self.t
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truths(&self) -> &[bool] {
        &self.truths
    }

    fn column<T: Copy>(&self, data: &[T], class: usize) -> Vec<T> {
        (0..self.n).map(|i| data[i * self.t + class]).collect()
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// `None` when `truths` has no positive.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), truths.len(), "scores and truths differ in length");
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in rank_order(scores).iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    /// AP of every class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

pub fn mean_ap(p: &PredictionSet) -> Result<MapReport> {
    let per_class: Vec<Option<f64>> = (0..p.t)
        .map(|c| average_precision(&p.column(&p.scores, c), &p.column(&p.truths, c)))
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("mAP undefined: no class has a positive".into()));
    }
    let excluded = (0..p.t).filter(|&c| per_class[c].is_none()).collect();
    Ok(MapReport {
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Decision {
    /// Positive when score > 0.5 (strict).
    Threshold,
    /// The k highest-scored labels of every image are positive.
    TopK(usize),
}

/// Binary decisions per (image, label).
pub fn decide(p: &PredictionSet, decision: Decision) -> Result<Vec<bool>> {
    match decision {
        Decision::Threshold => Ok(p.scores.iter().map(|&s| s > 0.5).collect()),
        Decision::TopK(k) => {
            if k == 0 || k > p.t {
                return Err(Error::InvalidArgument(format!("top-{k} needs 1 <= k <= {}", p.t)));
            }
            let mut out = vec![false; p.n * p.t];
            for i in 0..p.n {
                let row = &p.scores[i * p.t..(i + 1) * p.t];
                for &j in &rank_order(row)[..k] {
                    out[i * p.t + j] = true;
                }
            }
            Ok(out)
        }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrfReport {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    /// Classes with no predicted positive (precision undefined).
    pub undefined_precision: Vec<usize>,
    /// Classes with no true positive label (recall undefined).
    pub undefined_recall: Vec<usize>,
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn prf_suite(p: &PredictionSet, decision: Decision) -> Result<PrfReport> {
    let pred = decide(p, decision)?;
    let (mut tp, mut npred, mut npos) = (vec![0usize; p.t], vec![0usize; p.t], vec![0usize; p.t]);
    for (k, (&y, &t)) in pred.iter().zip(&p.truths).enumerate() {
        let c = k % p.t;
        npred[c] += y as usize;
        npos[c] += t as usize;
        tp[c] += (y && t) as usize;
    }
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let mut undefined_precision = Vec::new();
    let mut undefined_recall = Vec::new();
    for c in 0..p.t {
        match npred[c] {
            0 => undefined_precision.push(c),
            n => precisions.push(tp[c] as f64 / n as f64),
        }
        match npos[c] {
            0 => undefined_recall.push(c),
            n => recalls.push(tp[c] as f64 / n as f64),
        }
    }
    let (cp, cr) = (mean_or_zero(&precisions), mean_or_zero(&recalls));
    let total = |v: &[usize]| v.iter().sum::<usize>();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let op = ratio(total(&tp), total(&npred));
    let or = ratio(total(&tp), total(&npos));
    Ok(PrfReport {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
        undefined_precision,
        undefined_recall,
    })
}

/// mAP plus the P/R/F1 suite under all-label thresholding and top-k.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub num_images: usize,
    pub num_labels: usize,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub all: PrfReport,
    pub top_k: usize,
    pub top: PrfReport,
}

impl MetricReport {
    /// `top_k` is clamped to the label count.
    pub fn compute(p: &PredictionSet, top_k: usize) -> Result<Self> {
        let m = mean_ap(p)?;
        let k = top_k.min(p.t);
        Ok(Self {
            num_images: p.n,
            num_labels: p.t,
            map: m.map,
            per_class_ap: m.per_class,
            excluded_classes: m.excluded,
            all: prf_suite(p, Decision::Threshold)?,
            top_k: k,
            top: prf_suite(p, Decision::TopK(k))?,
        })
    }

    pub const CSV_HEADER: &'static str =
        "map,all_cp,all_cr,all_cf1,all_op,all_or,all_of1,top_cp,top_cr,top_cf1,top_op,top_or,top_of1";

    pub fn csv_row(&self) -> String {
        let (a, t) = (&self.all, &self.top);
        [self.map, a.cp, a.cr, a.cf1, a.op, a.or, a.of1, t.cp, t.cr, t.cf1, t.op, t.or, t.of1]
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# AP: non-interpolated, ranks tie-broken by image index")?;
        writeln!(f, "images: {}", self.num_images)?;
        writeln!(f, "labels: {}", self.num_labels)?;
        writeln!(f, "mAP: {}", self.map)?;
        writeln!(f, "excluded_classes: {:?}", self.excluded_classes)?;
        for (tag, r) in [("all", &self.all), (&format!("top{}", self.top_k) as &str, &self.top)] {
            writeln!(f, "{tag}.CP: {}", r.cp)?;
            writeln!(f, "{tag}.CR: {}", r.cr)?;
            writeln!(f, "{tag}.CF1: {}", r.cf1)?;
            writeln!(f, "{tag}.OP: {}", r.op)?;
            writeln!(f, "{tag}.OR: {}", r.or)?;
            writeln!(f, "{tag}.OF1: {}", r.of1)?;
        }
        Ok(())
    }
}

/// A label matrix read from CSV with header `image_id,label_0,…,label_{T-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub image_ids: Vec<String>,
    pub values: Vec<f64>,
    pub num_labels: usize,
}

pub fn read_label_csv(path: &Path) -> Result<LabelMatrix> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = reader.headers()?.clone();
    let t = header.len().saturating_sub(1);
    let header_ok =
        t > 0 && &header[0] == "image_id" && (0..t).all(|j| header[j + 1] == *format!("label_{j}"));
    if !header_ok {
        return Err(Error::format(path, "header must be image_id,label_0,...,label_{T-1}"));
    }
    let mut out = LabelMatrix { image_ids: Vec::new(), values: Vec::new(), num_labels: t };
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        out.image_ids.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: `{field}` is not a number", row + 1)))?;
            out.values.push(v);
        }
    }
    Ok(out)
}

pub fn write_label_csv(path: &Path, image_ids: &[String], values: &[f64], num_labels: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header = vec!["image_id".to_string()];
    header.extend((0..num_labels).map(|j| format!("label_{j}")));
    w.write_record(&header)?;
    for (i, id) in image_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(values[i * num_labels..(i + 1) * num_labels].iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pairs a scores CSV with a truths CSV; image ids must agree row by row.
pub fn load_prediction_set(scores: &Path, truths: &Path) -> Result<PredictionSet> {
    let s = read_label_csv(scores)?;
    let t = read_label_csv(truths)?;
    if s.image_ids != t.image_ids || s.num_labels != t.num_labels {
        return Err(Error::format(truths, "image ids or label count differ from the scores file"));
    }
    PredictionSet::from_binary(s.values, &t.values, s.image_ids.len(), s.num_labels)
}
