//! One-class decisions and presentation-attack-detection error rates.
//!
//! An image's score is the mean reconstruction error of its patches. The
//! threshold is the mean plus the population standard deviation of bona fide
//! training scores; lower scores are bona fide and everything else,
//! including a score equal to the threshold, is an attack.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aetrain::patch_errors;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::preproc::EvalSet;
use crate::synthdata::{Label, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub path: String,
    pub label: Label,
    pub split: Split,
    pub patch_errors: Vec<f64>,
    pub image_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<Label>,
}

impl ScoreRecord {
    pub fn new(path: String, label: Label, split: Split, patch_errors: Vec<f64>) -> Result<Self> {
        if patch_errors.is_empty() {
            return Err(Error::EmptyImage);
        }
        let image_score = patch_errors.iter().sum::<f64>() / patch_errors.len() as f64;
        Ok(ScoreRecord {
            path,
            label,
            split,
            patch_errors,
            image_score,
            decision: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
}

fn mean_and_population_std(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("calibration score {bad} is not finite")));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `mean + std` of bona fide training scores (population std).
pub fn calibrate_threshold(train_scores: &[f64]) -> Result<ThresholdModel> {
    let (mean, std) = mean_and_population_std(train_scores)?;
    Ok(ThresholdModel {
        mean,
        std,
        threshold: mean + std,
    })
}

/// [`calibrate_threshold`] over records, refusing anything that is not a
/// bona fide training image.
pub fn calibrate_from_records(records: &[ScoreRecord]) -> Result<ThresholdModel> {
    if let Some(r) = records
        .iter()
        .find(|r| r.label != Label::BonaFide || r.split != Split::Train)
    {
        return Err(Error::InvalidParams(format!(
            "calibration accepts bona fide training images only, got {} ({}, {})",
            r.path,
            r.split.dir_name(),
            r.label
        )));
    }
    let scores: Vec<f64> = records.iter().map(|r| r.image_score).collect();
    calibrate_threshold(&scores)
}

pub fn decide(score: f64, model: &ThresholdModel) -> Label {
    if score < model.threshold {
        Label::BonaFide
    } else {
        Label::Pa
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// Rates from `(truth, decision)` pairs.
pub fn compute_rates<I>(pairs: I) -> Result<Rates>
where
    I: IntoIterator<Item = (Label, Label)>,
{
    let (mut pa, mut pa_accepted, mut bona, mut bona_rejected) = (0usize, 0usize, 0usize, 0usize);
    for (truth, decision) in pairs {
        match truth {
            Label::Pa => {
                pa += 1;
                pa_accepted += usize::from(decision == Label::BonaFide);
            }
            Label::BonaFide => {
                bona += 1;
                bona_rejected += usize::from(decision == Label::Pa);
            }
        }
    }
    if pa == 0 {
        return Err(Error::MissingClass("pa"));
    }
    if bona == 0 {
        return Err(Error::MissingClass("bona_fide"));
    }
    let apcer = pa_accepted as f64 / pa as f64;
    let bpcer = bona_rejected as f64 / bona as f64;
    Ok(Rates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

/// Rates of decided records.
pub fn record_rates(records: &[ScoreRecord]) -> Result<Rates> {
    compute_rates(records.iter().map(|r| {
        (
            r.label,
            r.decision.expect("record must be decided before computing rates"),
        )
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Rates when images scoring below `threshold` are accepted as bona fide.
pub fn rates_at(scores: &[(f64, Label)], threshold: f64) -> Result<Rates> {
    let model = ThresholdModel {
        mean: threshold,
        std: 0.0,
        threshold,
    };
    compute_rates(scores.iter().map(|&(s, l)| (l, decide(s, &model))))
}

/// Exact DET curve: one point per distinct score plus the `-inf` (reject
/// all) and `+inf` (accept all) sentinels, in increasing threshold order.
pub fn det_curve(scores: &[(f64, Label)]) -> Result<Vec<DetPoint>> {
    let pa = scores.iter().filter(|s| s.1 == Label::Pa).count();
    let bona = scores.len() - pa;
    if pa == 0 {
        return Err(Error::MissingClass("pa"));
    }
    if bona == 0 {
        return Err(Error::MissingClass("bona_fide"));
    }
    if let Some(bad) = scores.iter().find(|s| s.0.is_nan()) {
        return Err(Error::Domain(format!("score {} is NaN", bad.0)));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = vec![DetPoint {
        threshold: f64::NEG_INFINITY,
        apcer: 0.0,
        bpcer: 1.0,
    }];
    // accepted = scores strictly below the threshold; sweep thresholds upward
    let (mut pa_acc, mut bona_acc) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].0;
        points.push(DetPoint {
            threshold: tau,
            apcer: pa_acc as f64 / pa as f64,
            bpcer: (bona - bona_acc) as f64 / bona as f64,
        });
        while i < sorted.len() && sorted[i].0 == tau {
            match sorted[i].1 {
                Label::Pa => pa_acc += 1,
                Label::BonaFide => bona_acc += 1,
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        apcer: 1.0,
        bpcer: 0.0,
    });
    Ok(points)
}

/// Score every image of `set` with the autoencoder in inference mode.
pub fn score_set(ae: &Network<f32>, set: &EvalSet) -> Result<Vec<ScoreRecord>> {
    set.items
        .par_iter()
        .map(|item| {
            ScoreRecord::new(
                item.path.clone(),
                item.label,
                item.split,
                patch_errors(ae, &item.patches),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub bona_fide: usize,
    pub pa: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ScoreRecord>,
    pub threshold: ThresholdModel,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub counts: LabelCounts,
    pub det_points: Vec<DetPoint>,
}

impl EvalReport {
    pub fn mean_score(&self, label: Label) -> f64 {
        let s: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.image_score)
            .collect();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Decide already-scored records and assemble the report.
pub fn evaluate_records(mut records: Vec<ScoreRecord>, model: &ThresholdModel) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyValSet);
    }
    for r in &mut records {
        r.decision = Some(decide(r.image_score, model));
    }
    let rates = record_rates(&records)?;
    let scores: Vec<(f64, Label)> = records.iter().map(|r| (r.image_score, r.label)).collect();
    let det_points = det_curve(&scores)?;
    let counts = LabelCounts {
        bona_fide: records.iter().filter(|r| r.label == Label::BonaFide).count(),
        pa: records.iter().filter(|r| r.label == Label::Pa).count(),
    };
    Ok(EvalReport {
        records,
        threshold: *model,
        apcer: rates.apcer,
        bpcer: rates.bpcer,
        acer: rates.acer,
        counts,
        det_points,
    })
}

/// Score, decide and, when `out_dir` is given, write `metrics.json`,
/// `scores.csv` and `det.csv`.
pub fn evaluate_model(
    ae: &Network<f32>,
    model: &ThresholdModel,
    val: &EvalSet,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let report = evaluate_records(score_set(ae, val)?, model)?;
    if let Some(dir) = out_dir {
        write_eval_report(&report, dir)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct Metrics<'a> {
    apcer: f64,
    bpcer: f64,
    acer: f64,
    threshold: &'a ThresholdModel,
    counts: &'a LabelCounts,
    mean_score_bona_fide: f64,
    mean_score_pa: f64,
}

fn write(path: &Path, contents: String) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_det_csv(points: &[DetPoint], path: &Path) -> Result<()> {
    let mut det = String::from("threshold,apcer,bpcer\n");
    for p in points {
        det.push_str(&format!("{},{},{}\n", p.threshold, p.apcer, p.bpcer));
    }
    write(path, det)
}

pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = Metrics {
        apcer: report.apcer,
        bpcer: report.bpcer,
        acer: report.acer,
        threshold: &report.threshold,
        counts: &report.counts,
        mean_score_bona_fide: report.mean_score(Label::BonaFide),
        mean_score_pa: report.mean_score(Label::Pa),
    };
    write(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("metrics serialise"),
    )?;
    write_scores_csv(&report.records, &dir.join("scores.csv"))?;
    write_det_csv(&report.det_points, &dir.join("det.csv"))
}

pub fn write_scores_csv(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut csv = String::from("path,label,score,decision\n");
    for r in records {
        let decision = r.decision.map(|d| d.dir_name()).unwrap_or("");
        csv.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&r.path),
            r.label,
            r.image_score,
            decision
        ));
    }
    write(path, csv)
}

/// One row of `scores.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub path: String,
    pub label: Label,
    pub score: f64,
    pub decision: Option<Label>,
}

fn parse_label(s: &str) -> Result<Label> {
    match s {
        "bona_fide" => Ok(Label::BonaFide),
        "pa" => Ok(Label::Pa),
        _ => Err(Error::InvalidParams(format!("unknown label {s:?}"))),
    }
}

fn split_csv_line(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match (quoted, c) {
            (true, '"') if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            (true, '"') => quoted = false,
            (false, '"') if cur.is_empty() => quoted = true,
            (false, ',') => fields.push(std::mem::take(&mut cur)),
            (_, c) => cur.push(c),
        }
    }
    if quoted {
        return Err(Error::InvalidParams("unterminated quote in scores.csv".into()));
    }
    fields.push(cur);
    Ok(fields)
}

/// Parse a `scores.csv` file body.
pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == "path,label,score,decision" => {}
        _ => return Err(Error::InvalidParams("scores.csv header missing".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = split_csv_line(line)?;
        if f.len() != 4 {
            return Err(Error::InvalidParams(format!(
                "scores.csv line {}: expected 4 fields, got {}",
                n + 2,
                f.len()
            )));
        }
        let score: f64 = f[2].parse().map_err(|_| {
            Error::InvalidParams(format!("scores.csv line {}: bad score {:?}", n + 2, f[2]))
        })?;
        let decision = if f[3].is_empty() { None } else { Some(parse_label(&f[3])?) };
        rows.push(ScoreRow {
            path: f[0].clone(),
            label: parse_label(&f[1])?,
            score,
            decision,
        });
    }
    Ok(rows)
}
