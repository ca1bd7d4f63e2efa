//! Precision-recall and false-alarm-rate evaluation.
//!
//! PR curves score the positive (starved) class without counting true
//! negatives; the reported AUC is the mean precision at each positive's rank.
//! FAR curves plot probability of detection against expected false alarms per
//! km² of surveyed area, integrated as a right-continuous step function up to
//! a false-alarm-density cutoff and normalized by that cutoff.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLabel {
    /// Starved / target-present.
    Positive,
    /// Large / clutter.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub id: u64,
    pub score: f64,
    pub label: SampleLabel,
}

impl ScoredSample {
    pub fn new(id: u64, score: f64, label: SampleLabel) -> ScoredSample {
        ScoredSample { id, score, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    /// One point per rank, ordered by non-decreasing recall.
    pub points: Vec<(f64, f64)>,
    /// Score threshold at each rank, parallel to `points`.
    pub thresholds: Vec<f64>,
    /// Mean precision over positives.
    pub average_precision: f64,
}

/// Unit of the FAR curve x axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FarUnit {
    PerKm2,
    /// Fallback when no survey area is known: false alarms per 1,000 samples.
    Per1000Samples,
}

impl FarUnit {
    pub fn as_str(&self) -> &'static str {
        match self {
            FarUnit::PerKm2 => "fa_per_km2",
            FarUnit::Per1000Samples => "fa_per_1000_samples",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FARCurve {
    /// Operating points (fa_density, p_d), ordered by ascending fa_density.
    pub points: Vec<(f64, f64)>,
    /// Score threshold at each operating point, parallel to `points`.
    pub thresholds: Vec<f64>,
    /// Step-function area over [0, cutoff], normalized by the cutoff.
    pub auc: f64,
    pub cutoff_fa_per_km2: f64,
    pub total_area_km2: f64,
    pub unit: FarUnit,
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    for s in samples {
        if !s.score.is_finite() {
            return Err(Error::MetricInput(format!(
                "sample {} has non-finite score {}",
                s.id, s.score
            )));
        }
    }
    Ok(())
}

fn count_positives(samples: &[ScoredSample]) -> usize {
    samples
        .iter()
        .filter(|s| s.label == SampleLabel::Positive)
        .count()
}

/// Rank-based precision-recall curve with pessimistic tie handling: at equal
/// scores, negatives are ranked ahead of positives.
pub fn pr_curve(samples: &[ScoredSample]) -> Result<PRCurve> {
    check_finite(samples)?;
    let positives = count_positives(samples);
    if positives == 0 {
        return Err(Error::MetricInput(
            "PR curve needs at least one positive sample".to_string(),
        ));
    }

    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| {
                let rank = |l: SampleLabel| match l {
                    SampleLabel::Negative => 0,
                    SampleLabel::Positive => 1,
                };
                rank(a.label).cmp(&rank(b.label))
            })
            .then(a.id.cmp(&b.id))
    });

    let mut points = Vec::with_capacity(order.len());
    let mut thresholds = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    let mut ap_sum = 0.0;
    for (rank0, s) in order.iter().enumerate() {
        let rank = rank0 + 1;
        if s.label == SampleLabel::Positive {
            tp += 1;
            ap_sum += tp as f64 / rank as f64;
        }
        let precision = tp as f64 / rank as f64;
        let recall = tp as f64 / positives as f64;
        points.push((recall, precision));
        thresholds.push(s.score);
    }

    Ok(PRCurve {
        points,
        thresholds,
        average_precision: ap_sum / positives as f64,
    })
}

/// FAR curve: sweep a descending threshold over every distinct score; each
/// operating point is (FP / area, TP / P).
pub fn far_curve(samples: &[ScoredSample], total_area_km2: f64, cutoff: f64) -> Result<FARCurve> {
    far_curve_with_unit(samples, total_area_km2, cutoff, FarUnit::PerKm2)
}

/// As [`far_curve`], with an explicit x-axis unit tag for the fallback case.
pub fn far_curve_with_unit(
    samples: &[ScoredSample],
    total_area_km2: f64,
    cutoff: f64,
    unit: FarUnit,
) -> Result<FARCurve> {
    check_finite(samples)?;
    if !(total_area_km2 > 0.0) {
        return Err(Error::MetricInput(format!(
            "total area must be > 0, got {total_area_km2}"
        )));
    }
    if !(cutoff > 0.0) {
        return Err(Error::MetricInput(format!(
            "FAR cutoff must be > 0, got {cutoff}"
        )));
    }
    let positives = count_positives(samples);
    if positives == 0 {
        return Err(Error::MetricInput(
            "FAR curve needs at least one positive sample".to_string(),
        ));
    }

    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));

    let mut points = Vec::new();
    let mut thresholds = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = order[i].score;
        // consume every sample tied at this score
        while i < order.len() && order[i].score == threshold {
            match order[i].label {
                SampleLabel::Positive => tp += 1,
                SampleLabel::Negative => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / total_area_km2, tp as f64 / positives as f64));
        thresholds.push(threshold);
    }

    // Right-continuous step integral from the implicit origin (0, 0),
    // extended constantly past the last point, clipped to [0, cutoff].
    let mut area = 0.0;
    let mut prev_x = 0.0;
    let mut prev_y = 0.0;
    for &(x, y) in &points {
        let x_clip = x.min(cutoff);
        if x_clip > prev_x {
            area += prev_y * (x_clip - prev_x);
            prev_x = x_clip;
        }
        if x <= cutoff {
            prev_y = y;
        }
        if x >= cutoff {
            break;
        }
    }
    if prev_x < cutoff {
        area += prev_y * (cutoff - prev_x);
    }

    Ok(FARCurve {
        points,
        thresholds,
        auc: area / cutoff,
        cutoff_fa_per_km2: cutoff,
        total_area_km2,
        unit,
    })
}

/// Negatives per positive.
pub fn imbalance_ratio(positive_count: usize, negative_count: usize) -> Result<f64> {
    if positive_count == 0 {
        return Err(Error::MetricInput(
            "imbalance ratio needs at least one positive".to_string(),
        ));
    }
    Ok(negative_count as f64 / positive_count as f64)
}

// ---------------------------------------------------------------------------
// Emission: CSV + SVG, byte-deterministic for identical inputs
// ---------------------------------------------------------------------------

struct SvgSeries<'a> {
    x_label: &'a str,
    y_label: &'a str,
    title: String,
    // (x, y) in data coordinates
    points: Vec<(f64, f64)>,
    x_max: f64,
}

fn render_svg(series: &SvgSeries) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let x_max = if series.x_max > 0.0 { series.x_max } else { 1.0 };

    let sx = |x: f64| ML + (x / x_max).clamp(0.0, 1.0) * plot_w;
    let sy = |y: f64| MT + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    let mut poly = String::new();
    for (i, &(x, y)) in series.points.iter().enumerate() {
        if i > 0 {
            poly.push(' ');
        }
        poly.push_str(&format!("{:.3},{:.3}", sx(x), sy(y)));
    }

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        series.title
    ));
    // axes
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MT + plot_h
    ));
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MT + plot_h,
        ML + plot_w,
        MT + plot_h
    ));
    // axis labels and extremes
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        ML + plot_w / 2.0,
        H - 12.0,
        series.x_label
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        MT + plot_h / 2.0,
        MT + plot_h / 2.0,
        series.y_label
    ));
    s.push_str(&format!(
        "<text x=\"{ML}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">0</text>\n",
        MT + plot_h + 14.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.6}</text>\n",
        ML + plot_w,
        MT + plot_h + 14.0,
        x_max
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">1</text>\n",
        ML - 6.0,
        MT + 4.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">0</text>\n",
        ML - 6.0,
        MT + plot_h + 4.0
    ));
    if !poly.is_empty() {
        s.push_str(&format!(
            "<polyline points=\"{poly}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n"
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Write `pr.csv` (`threshold,recall,precision`) and `pr.svg` for one curve.
/// Returns the paths written.
pub fn emit_pr_curve(curve: &PRCurve, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    if curve.points.is_empty() {
        return Err(Error::MetricInput("PR curve has no points".to_string()));
    }
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let mut body = String::from("threshold,recall,precision\n");
    for (t, (r, p)) in curve.thresholds.iter().zip(&curve.points) {
        body.push_str(&format!("{t},{r},{p}\n"));
    }
    write_file(&csv_path, body.as_bytes())?;

    let svg_path = out_dir.join(format!("{stem}.svg"));
    let svg = render_svg(&SvgSeries {
        x_label: "recall",
        y_label: "precision",
        title: format!("precision-recall (AP {:.4})", curve.average_precision),
        points: curve.points.clone(),
        x_max: 1.0,
    });
    write_file(&svg_path, svg.as_bytes())?;
    Ok(vec![csv_path, svg_path])
}

/// Write `far.csv` (`threshold,fa_per_km2,p_d`) and `far.svg` for one curve.
pub fn emit_far_curve(curve: &FARCurve, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    if curve.points.is_empty() {
        return Err(Error::MetricInput("FAR curve has no points".to_string()));
    }
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let mut body = format!("threshold,{},p_d\n", curve.unit.as_str());
    for (t, (x, y)) in curve.thresholds.iter().zip(&curve.points) {
        body.push_str(&format!("{t},{x},{y}\n"));
    }
    write_file(&csv_path, body.as_bytes())?;

    let svg_path = out_dir.join(format!("{stem}.svg"));
    let svg = render_svg(&SvgSeries {
        x_label: curve.unit.as_str(),
        y_label: "p_d",
        title: format!(
            "false alarm rate (AUC {:.4} over [0, {}])",
            curve.auc, curve.cutoff_fa_per_km2
        ),
        points: curve.points.clone(),
        x_max: curve.cutoff_fa_per_km2,
    });
    write_file(&svg_path, svg.as_bytes())?;
    Ok(vec![csv_path, svg_path])
}
