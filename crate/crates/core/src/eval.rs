//! Angular-error evaluation, noise-detection metrics and baseline comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{pitchyaw_error_deg, Dataset};
use crate::error::{Error, Result};
use crate::config::{Mode, TrainConfig};
use crate::manifold::partition;
use crate::model::ModelState;
use crate::trainer::{fit, EvalSets, FitResult};

/// Precision/recall of the top-t% selection plus rank AUROC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub auroc: f64,
    pub t_percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub domain_id: String,
    /// Mean angular error against the clean labels.
    pub mean_angular_error_deg: f64,
    /// Mean angular error against the observed labels.
    pub mean_observed_error_deg: f64,
    pub n_samples: usize,
    pub per_sample: Vec<f64>,
    pub detection: Option<DetectionMetrics>,
}

/// Predicts every sample and measures the angle to its label.
pub fn evaluate(model: &ModelState, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let idx = data.all_indices();
    let pred = model.predict(&data.inputs(&idx)?)?;
    let mut per_sample = Vec::with_capacity(data.len());
    let mut observed = 0.0;
    for (i, s) in data.samples.iter().enumerate() {
        let p = (pred.get(i, 0), pred.get(i, 1));
        per_sample.push(pitchyaw_error_deg(p, s.y_clean));
        observed += pitchyaw_error_deg(p, s.y_obs);
    }
    let n = data.len();
    Ok(EvalReport {
        domain_id: data.samples[0].domain_id.clone(),
        mean_angular_error_deg: per_sample.iter().sum::<f64>() / n as f64,
        mean_observed_error_deg: observed / n as f64,
        n_samples: n,
        per_sample,
        detection: None,
    })
}

/// Mann-Whitney AUROC of `scores` against `mask`, ties credited 0.5.
pub fn auroc(scores: &[f64], mask: &[bool]) -> Result<f64> {
    check_mask(scores, mask)?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let pos = mask.iter().filter(|&&m| m).count() as f64;
    let neg = n as f64 - pos;
    let rank_sum: f64 = ranks.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r).sum();
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

fn check_mask(scores: &[f64], mask: &[bool]) -> Result<()> {
    if scores.len() != mask.len() {
        return Err(Error::InvalidShape(format!(
            "{} scores for {} mask entries",
            scores.len(),
            mask.len()
        )));
    }
    let pos = mask.iter().filter(|&&m| m).count();
    if pos == 0 || pos == mask.len() {
        return Err(Error::InvalidArgument("mask needs both positives and negatives".into()));
    }
    Ok(())
}

pub fn detection_metrics(eta: &[f64], mask: &[bool], t_percent: f64) -> Result<DetectionMetrics> {
    check_mask(eta, mask)?;
    let part = partition(eta, t_percent, 0)?;
    let tp = part.noisy_indices.iter().filter(|&&i| mask[i]).count() as f64;
    let selected = part.noisy_indices.len() as f64;
    let positives = mask.iter().filter(|&&m| m).count() as f64;
    Ok(DetectionMetrics {
        precision: if selected > 0.0 { tp / selected } else { 0.0 },
        recall: tp / positives,
        auroc: auroc(eta, mask)?,
        t_percent,
    })
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: n={} mean angular error {:.3} deg (clean labels), {:.3} deg (observed labels)",
            self.domain_id, self.n_samples, self.mean_angular_error_deg, self.mean_observed_error_deg
        );
        if let Some(d) = &self.detection {
            write!(
                s,
                "; detection at t={}%: precision {:.4} recall {:.4} auroc {:.4}",
                d.t_percent, d.precision, d.recall, d.auroc
            )
            .unwrap();
        }
        s
    }
}

/// CSV with one row per report.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "domain_id,n_samples,mean_angular_error_deg,mean_observed_error_deg,precision,recall,auroc,t_percent\n",
    );
    for r in reports {
        let (p, rc, a, t) = match &r.detection {
            Some(d) => (
                d.precision.to_string(),
                d.recall.to_string(),
                d.auroc.to_string(),
                d.t_percent.to_string(),
            ),
            None => Default::default(),
        };
        writeln!(
            out,
            "{},{},{},{},{p},{rc},{a},{t}",
            r.domain_id, r.n_samples, r.mean_angular_error_deg, r.mean_observed_error_deg
        )
        .unwrap();
    }
    out
}

/// Per-sample errors of one report.
pub fn per_sample_csv(report: &EvalReport) -> String {
    let mut out = String::from("index,angular_error_deg\n");
    for (i, e) in report.per_sample.iter().enumerate() {
        writeln!(out, "{i},{e}").unwrap();
    }
    out
}

/// Target-domain errors of the plain L1 baseline and the full method trained
/// on the same source data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// Fraction of source samples carrying a corrupted label.
    pub noise_ratio: f64,
    pub baseline_target_error: f64,
    pub seetn_target_error: f64,
    /// `(baseline - seetn) / baseline`; positive when the method helps.
    pub relative_improvement: f64,
    pub detection: Option<DetectionMetrics>,
}

pub struct ComparisonRun {
    pub comparison: Comparison,
    pub baseline: FitResult,
    pub seetn: FitResult,
}

/// Trains a baseline (same network, gaze loss only, same number of epochs)
/// and the full method with `cfg`, then scores both on `target`.
pub fn compare_baseline(source: &Dataset, target: &Dataset, cfg: &TrainConfig) -> Result<ComparisonRun> {
    let sets = EvalSets::default();
    let base_cfg = TrainConfig {
        mode: Mode::Baseline,
        ..cfg.clone()
    };
    let baseline = fit(source, &base_cfg, sets)?;
    let seetn = fit(source, &TrainConfig { mode: Mode::Seetn, ..cfg.clone() }, sets)?;
    let b = evaluate(&baseline.model, target)?.mean_angular_error_deg;
    let s = evaluate(&seetn.model, target)?.mean_angular_error_deg;
    let mask = source.noise_mask();
    let flagged = mask.iter().filter(|&&m| m).count();
    let detection = match &seetn.partition {
        Some(p) if flagged > 0 && flagged < mask.len() => {
            Some(detection_metrics(&p.eta, &mask, p.t_percent)?)
        }
        _ => None,
    };
    Ok(ComparisonRun {
        comparison: Comparison {
            noise_ratio: flagged as f64 / source.len() as f64,
            baseline_target_error: b,
            seetn_target_error: s,
            relative_improvement: (b - s) / b,
            detection,
        },
        baseline,
        seetn,
    })
}

pub fn comparisons_to_csv(rows: &[Comparison]) -> String {
    let mut out = String::from(
        "noise_ratio,baseline_target_error_deg,seetn_target_error_deg,relative_improvement,precision,recall,auroc\n",
    );
    for r in rows {
        let d = r.detection.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.noise_ratio,
            r.baseline_target_error,
            r.seetn_target_error,
            r.relative_improvement,
            d.map(|d| d.precision.to_string()).unwrap_or_default(),
            d.map(|d| d.recall.to_string()).unwrap_or_default(),
            d.map(|d| d.auroc.to_string()).unwrap_or_default(),
        )
        .unwrap();
    }
    out
}

/// Line plot of target error against noise ratio for both methods.
pub fn comparison_svg(rows: &[Comparison]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 50.0;
    let xs: Vec<f64> = rows.iter().map(|r| r.noise_ratio).collect();
    let ys = rows
        .iter()
        .flat_map(|r| [r.baseline_target_error, r.seetn_target_error]);
    let (x0, x1) = bounds(xs.iter().copied());
    let (y_lo, y_hi) = bounds(ys);
    let (y0, y1) = (0.0f64.min(y_lo), y_hi * 1.1);
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>").unwrap();
    writeln!(
        svg,
        "<path d=\"M{M} {t} V{b} H{r}\" stroke=\"black\" fill=\"none\"/>",
        t = M,
        b = H - M,
        r = W - M
    )
    .unwrap();
    for &x in &xs {
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.0}%</text>",
            px(x),
            H - M + 16.0,
            x * 100.0
        )
        .unwrap();
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{y:.1}</text>",
            M - 6.0,
            py(y) + 4.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">label noise ratio</text>",
        W / 2.0,
        H - 12.0
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">target error (deg)</text>",
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    let series: [(&str, &str, fn(&Comparison) -> f64); 2] = [
        ("baseline", "#d62728", |r| r.baseline_target_error),
        ("SeeTN", "#1f77b4", |r| r.seetn_target_error),
    ];
    for (i, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", px(r.noise_ratio), py(get(r))))
            .collect();
        writeln!(
            svg,
            "<polyline points=\"{}\" stroke=\"{color}\" stroke-width=\"2\" fill=\"none\"/>",
            pts.join(" ")
        )
        .unwrap();
        for r in rows {
            writeln!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                px(r.noise_ratio),
                py(get(r))
            )
            .unwrap();
        }
        let ly = M + 16.0 * i as f64;
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" fill=\"{color}\">{name}</text>",
            W - M - 70.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
