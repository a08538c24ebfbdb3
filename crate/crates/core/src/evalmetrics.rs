//! Surface extraction and localization/detection metrics.
//!
//! A scanline is an image column. The detected surface holds at most one
//! point per column: the centre of the most confident above-threshold run.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imagecore::{Image2D, Spacing};

/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.96;

// distances within this of the tolerance count as inside; absorbs the
// representation error of products like 3 * 0.3
const TOLERANCE_SLACK_MM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub prob_threshold: f64,
    pub tp_tolerance_mm: f64,
    pub gt_dilation_mm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prob_threshold: 0.5,
            tp_tolerance_mm: 0.9,
            gt_dilation_mm: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config("eval.prob_threshold must lie in (0, 1)".into()));
        }
        if !(self.tp_tolerance_mm > 0.0) {
            return Err(Error::Config("eval.tp_tolerance_mm must be positive".into()));
        }
        if !(self.gt_dilation_mm > 0.0) {
            return Err(Error::Config("eval.gt_dilation_mm must be positive".into()));
        }
        Ok(())
    }
}

/// Bone surface with at most one point per column; rows may be half-integer.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePolyline {
    pub points: Vec<(f64, usize)>,
    pub spacing: Spacing,
}

impl SurfacePolyline {
    pub fn new(points: Vec<(f64, usize)>, spacing: Spacing) -> Self {
        debug_assert!(points.windows(2).all(|w| w[0].1 < w[1].1));
        SurfacePolyline { points, spacing }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// One point per column from integer contour pixels; columns holding
    /// several pixels use their mean row.
    pub fn from_contour(contour: &[(usize, usize)], spacing: Spacing) -> Self {
        let mut by_col: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for &(r, c) in contour {
            let e = by_col.entry(c).or_insert((0.0, 0));
            e.0 += r as f64;
            e.1 += 1;
        }
        SurfacePolyline {
            points: by_col
                .into_iter()
                .map(|(c, (sum, n))| (sum / n as f64, c))
                .collect(),
            spacing,
        }
    }

    fn distance_mm(&self, a: (f64, usize), b: (f64, usize)) -> f64 {
        let dr = (a.0 - b.0) * self.spacing.row_mm;
        let dc = (a.1 as f64 - b.1 as f64) * self.spacing.col_mm;
        dr.hypot(dc)
    }

    /// Distance from `p` to the nearest point of `self`.
    fn nearest_mm(&self, p: (f64, usize)) -> f64 {
        self.points
            .iter()
            .map(|&q| self.distance_mm(p, q))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per column, the centre of the above-threshold run with the largest
/// probability sum; ties go to the deeper run.
pub fn extract_surface(probmap: &Image2D, cfg: &EvalConfig) -> SurfacePolyline {
    let (rows, cols) = probmap.dims();
    let mut points = Vec::new();
    for c in 0..cols {
        let mut best: Option<(f64, usize, usize)> = None;
        let mut r = 0;
        while r < rows {
            if probmap.get(r, c) < cfg.prob_threshold {
                r += 1;
                continue;
            }
            let start = r;
            let mut sum = 0.0;
            while r < rows && probmap.get(r, c) >= cfg.prob_threshold {
                sum += probmap.get(r, c);
                r += 1;
            }
            // runs arrive shallow to deep, so >= hands ties to the deeper one
            if best.is_none_or(|(s, _, _)| sum >= s) {
                best = Some((sum, start, r - 1));
            }
        }
        if let Some((_, first, last)) = best {
            points.push(((first + last) as f64 / 2.0, c));
        }
    }
    SurfacePolyline::new(points, probmap.spacing())
}

/// Binary mask of pixels whose centre lies within `dilation_mm / 2` of a
/// contour point.
pub fn dilate_contour(
    contour: &[(usize, usize)],
    dilation_mm: f64,
    spacing: Spacing,
    rows: usize,
    cols: usize,
) -> Image2D {
    let radius = dilation_mm / 2.0;
    let mut mask = Image2D::zeros(rows, cols, spacing);
    let reach_r = (radius / spacing.row_mm).floor() as isize + 1;
    let reach_c = (radius / spacing.col_mm).floor() as isize + 1;
    for &(pr, pc) in contour {
        for dr in -reach_r..=reach_r {
            for dc in -reach_c..=reach_c {
                let (r, c) = (pr as isize + dr, pc as isize + dc);
                if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                    continue;
                }
                let d = (dr as f64 * spacing.row_mm).hypot(dc as f64 * spacing.col_mm);
                if d <= radius + TOLERANCE_SLACK_MM {
                    mask.set(r as usize, c as usize, 1.0);
                }
            }
        }
    }
    mask
}

/// Symmetric average Euclidean distance in millimetres.
pub fn aed(a: &SurfacePolyline, b: &SurfacePolyline) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("AED needs two non-empty surfaces".into()));
    }
    if a.spacing != b.spacing {
        return Err(Error::Dimension("surfaces use different pixel spacing".into()));
    }
    let one_way = |from: &SurfacePolyline, to: &SurfacePolyline| {
        from.points.iter().map(|&p| to.nearest_mm(p)).sum::<f64>() / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

pub fn f_score(recall: f64, precision: f64) -> f64 {
    if recall + precision > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub recall: f64,
    pub precision: f64,
    pub f: f64,
    /// False when nothing was detected; precision is then reported as 0.
    pub precision_defined: bool,
}

/// Recall, precision and F-score with a true-positive distance tolerance.
pub fn detection_prf(
    detected: &SurfacePolyline,
    gt: &SurfacePolyline,
    cfg: &EvalConfig,
) -> Result<Detection> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("ground truth surface is empty".into()));
    }
    let tol = cfg.tp_tolerance_mm + TOLERANCE_SLACK_MM;
    let hits = |from: &SurfacePolyline, to: &SurfacePolyline| {
        from.points.iter().filter(|&&p| to.nearest_mm(p) <= tol).count()
    };
    let recall = hits(gt, detected) as f64 / gt.len() as f64;
    let (precision, precision_defined) = if detected.is_empty() {
        (0.0, false)
    } else {
        (hits(detected, gt) as f64 / detected.len() as f64, true)
    };
    Ok(Detection {
        recall,
        precision,
        f: f_score(recall, precision),
        precision_defined,
    })
}

/// Upper end of the normal-approximation 95% interval of a mean.
pub fn ci95_upper(mean: f64, std: f64, n: usize) -> Result<f64> {
    if n == 0 || !(std >= 0.0) {
        return Err(Error::UndefinedMetric("ci95 needs n >= 1 and std >= 0".into()));
    }
    Ok(mean + Z95 * std / (n as f64).sqrt())
}

pub fn classification_error(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / predictions.len() as f64)
}

/// Metrics of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub filename: String,
    /// `None` when the detection was empty.
    pub aed_mm: Option<f64>,
    pub detection: Detection,
}

pub fn evaluate_image(
    filename: &str,
    probmap: &Image2D,
    gt: &SurfacePolyline,
    cfg: &EvalConfig,
) -> Result<ImageMetrics> {
    let detected = extract_surface(probmap, cfg);
    let detection = detection_prf(&detected, gt, cfg)?;
    let aed_mm = match aed(&detected, gt) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics {
        filename: filename.to_string(),
        aed_mm,
        detection,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub aed_mean_mm: f64,
    pub aed_std_mm: f64,
    pub cl95_mm: f64,
    pub recall: f64,
    pub precision: f64,
    pub f_score: f64,
    pub n_images: usize,
    /// Images whose detection was empty and therefore have no AED.
    pub n_undetected: usize,
    pub classification_error: Option<f64>,
}

/// Aggregates per-image metrics: AED mean, sample standard deviation and
/// CL over images with a detection; recall and precision are averaged over
/// all images and F is their harmonic mean.
pub fn summarize(per_image: &[ImageMetrics], classification_error: Option<f64>) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Empty("no images to summarize".into()));
    }
    let n = per_image.len() as f64;
    let aeds: Vec<f64> = per_image.iter().filter_map(|m| m.aed_mm).collect();
    let (aed_mean_mm, aed_std_mm, cl95_mm) = if aeds.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let k = aeds.len() as f64;
        let mean = aeds.iter().sum::<f64>() / k;
        let std = if aeds.len() > 1 {
            (aeds.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std, ci95_upper(mean, std, aeds.len())?)
    };
    let recall = per_image.iter().map(|m| m.detection.recall).sum::<f64>() / n;
    let precision = per_image.iter().map(|m| m.detection.precision).sum::<f64>() / n;
    Ok(MetricsReport {
        aed_mean_mm,
        aed_std_mm,
        cl95_mm,
        recall,
        precision,
        f_score: f_score(recall, precision),
        n_images: per_image.len(),
        n_undetected: per_image.len() - aeds.len(),
        classification_error,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Per-image table followed by a one-row summary table.
pub fn metrics_csv(per_image: &[ImageMetrics], report: &MetricsReport) -> String {
    let mut s = String::from("filename,aed_mm,recall,precision,f\n");
    for m in per_image {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            m.filename,
            fmt_opt(m.aed_mm),
            m.detection.recall,
            m.detection.precision,
            m.detection.f
        );
    }
    s.push_str(
        "summary,aed_mean_mm,aed_std_mm,cl95_mm,recall,precision,f_score,n_images,n_undetected,classification_error\n",
    );
    let num = |v: f64| if v.is_finite() { format!("{v:.6}") } else { "NA".into() };
    let _ = writeln!(
        s,
        "summary,{},{},{},{:.6},{:.6},{:.6},{},{},{}",
        num(report.aed_mean_mm),
        num(report.aed_std_mm),
        num(report.cl95_mm),
        report.recall,
        report.precision,
        report.f_score,
        report.n_images,
        report.n_undetected,
        fmt_opt(report.classification_error)
    );
    s
}

pub fn write_metrics_csv(path: &Path, per_image: &[ImageMetrics], report: &MetricsReport) -> Result<()> {
    std::fs::write(path, metrics_csv(per_image, report)).map_err(|e| Error::io(path, e))
}

pub const OVERLAY_GT_LEVEL: f64 = 1.0;
pub const OVERLAY_DETECTION_LEVEL: f64 = 0.0;

/// Background dimmed into `[0.25, 0.75]`, ground truth drawn white and the
/// detection black; detection wins where both land on the same pixel.
pub fn render_overlay(image: &Image2D, gt: &SurfacePolyline, detected: &SurfacePolyline) -> Image2D {
    let mut out = image.map(|v| 0.25 + 0.5 * v.clamp(0.0, 1.0));
    let rows = image.rows();
    let mut draw = |s: &SurfacePolyline, level: f64| {
        for &(r, c) in &s.points {
            let r = r.round() as usize;
            if r < rows && c < image.cols() {
                out.set(r, c, level);
            }
        }
    };
    draw(gt, OVERLAY_GT_LEVEL);
    draw(detected, OVERLAY_DETECTION_LEVEL);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(mm: f64) -> Spacing {
        Spacing::isotropic(mm).unwrap()
    }

    fn column_map(values: &[f64]) -> Image2D {
        Image2D::new(values.len(), 1, sp(0.3), values.to_vec()).unwrap()
    }

    #[test]
    fn run_centres() {
        let mut v = vec![0.0; 20];
        for x in &mut v[10..=14] {
            *x = 0.9;
        }
        let s = extract_surface(&column_map(&v), &EvalConfig::default());
        assert_eq!(s.points, vec![(12.0, 0)]);

        let mut v = vec![0.0; 20];
        for x in &mut v[10..=13] {
            *x = 0.9;
        }
        let s = extract_surface(&column_map(&v), &EvalConfig::default());
        assert_eq!(s.points, vec![(11.5, 0)]);
    }

    #[test]
    fn equal_runs_pick_the_deeper_one() {
        let mut v = vec![0.0; 30];
        v[3] = 0.7;
        v[4] = 0.7;
        v[5] = 0.7;
        v[20] = 0.7;
        v[21] = 0.7;
        v[22] = 0.7;
        let s = extract_surface(&column_map(&v), &EvalConfig::default());
        assert_eq!(s.points, vec![(21.0, 0)]);
    }

    #[test]
    fn empty_columns_emit_nothing() {
        let im = Image2D::zeros(5, 4, sp(0.3));
        assert!(extract_surface(&im, &EvalConfig::default()).is_empty());
    }

    #[test]
    fn dilation_disc() {
        let m = dilate_contour(&[(5, 5)], 1.0, sp(0.5), 11, 11);
        let ones: Vec<(usize, usize)> = (0..11)
            .flat_map(|r| (0..11).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c) == 1.0)
            .collect();
        assert_eq!(ones, vec![(4, 5), (5, 4), (5, 5), (5, 6), (6, 5)]);
        let empty = dilate_contour(&[], 1.0, sp(0.5), 4, 4);
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aed_examples() {
        let flat = |row: f64| SurfacePolyline::new((0..16).map(|c| (row, c)).collect(), sp(0.3));
        assert_eq!(aed(&flat(4.0), &flat(4.0)).unwrap(), 0.0);
        assert!((aed(&flat(4.0), &flat(6.0)).unwrap() - 0.6).abs() < 1e-12);

        let a = SurfacePolyline::new(vec![(10.0, 5)], sp(0.3));
        let b = SurfacePolyline::new(vec![(7.0, 5)], sp(0.3));
        let b2 = SurfacePolyline::new(vec![(13.0, 5)], sp(0.3));
        assert!((aed(&a, &b).unwrap() - 0.9).abs() < 1e-12);
        assert!((aed(&a, &b2).unwrap() - 0.9).abs() < 1e-12);

        let empty = SurfacePolyline::new(vec![], sp(0.3));
        assert!(matches!(aed(&a, &empty), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn detection_counts_tolerance() {
        let gt = SurfacePolyline::new((0..10).map(|c| (20.0, c)).collect(), sp(0.3));
        // 3 px = 0.9 mm is still a hit, 4 px is not
        let det = SurfacePolyline::new(
            (0..10).map(|c| (if c < 5 { 23.0 } else { 24.0 }, c)).collect(),
            sp(0.3),
        );
        let d = detection_prf(&det, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(d.precision, 0.5);
        assert!(d.recall >= 0.5);
        let same = detection_prf(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!((same.recall, same.precision, same.f), (1.0, 1.0, 1.0));

        let none = SurfacePolyline::new(vec![], sp(0.3));
        let d = detection_prf(&none, &gt, &EvalConfig::default()).unwrap();
        assert!(!d.precision_defined);
        assert_eq!((d.recall, d.precision, d.f), (0.0, 0.0, 0.0));
        assert!(detection_prf(&gt, &none, &EvalConfig::default()).is_err());
    }

    #[test]
    fn ci_and_classification() {
        assert_eq!(ci95_upper(0.4, 0.0, 10).unwrap(), 0.4);
        assert!(ci95_upper(0.4, 0.1, 0).is_err());
        assert_eq!(classification_error(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 0.0);
        assert_eq!(classification_error(&[0, 1, 2, 0], &[0, 1, 2, 3]).unwrap(), 0.25);
        assert!(classification_error(&[], &[]).is_err());
        assert!(classification_error(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn summary_and_csv() {
        let gt = SurfacePolyline::new((0..8).map(|c| (10.0, c)).collect(), sp(0.3));
        let mut prob = Image2D::zeros(20, 8, sp(0.3));
        for c in 0..8 {
            prob.set(9, c, 0.9);
            prob.set(10, c, 0.9);
            prob.set(11, c, 0.9);
        }
        let m = evaluate_image("0000.pgm", &prob, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(m.aed_mm, Some(0.0));
        let blank = evaluate_image("0001.pgm", &Image2D::zeros(20, 8, sp(0.3)), &gt, &EvalConfig::default()).unwrap();
        assert_eq!(blank.aed_mm, None);
        let r = summarize(&[m.clone(), blank.clone()], Some(0.0)).unwrap();
        assert_eq!(r.n_images, 2);
        assert_eq!(r.n_undetected, 1);
        assert_eq!(r.aed_mean_mm, 0.0);
        assert_eq!(r.recall, 0.5);
        let csv = metrics_csv(&[m, blank], &r);
        assert!(csv.starts_with("filename,aed_mm,recall,precision,f\n0000.pgm,0.000000,1.000000"));
        assert!(csv.contains("0001.pgm,NA,0.000000,0.000000,0.000000"));
        assert!(csv.lines().last().unwrap().starts_with("summary,0.000000,0.000000,0.000000,0.500000"));
    }
}
