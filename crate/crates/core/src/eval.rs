//! Pairwise relative-pose accuracy (RRA@θ / RTA@θ), per-modality reports,
//! PSNR and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{relative_pose, rotation_error_deg, translation_direction_error_deg, Pose};
use crate::raster::Image3;
use crate::scene::Modality;

pub const DEFAULT_THRESHOLD_DEG: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid pairing: {0}")]
    InvalidPairing(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("empty input: {0}")]
    Empty(String),
}

/// How relative translations are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TranslationMode {
    /// Angle between relative translation directions, in degrees.
    #[default]
    Angular,
    /// Euclidean distance between relative translations, in meters.
    Metric,
}

/// How a pair is attributed to modality buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BucketRule {
    /// A pair counts once toward each distinct endpoint modality.
    #[default]
    Pair,
    /// Each image scores the fraction of its own pairs under threshold; a
    /// bucket averages its images.
    ImageAnchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub rot_threshold_deg: f64,
    /// Degrees in angular mode, meters in metric mode.
    pub trans_threshold: f64,
    pub bucket_rule: BucketRule,
    pub translation: TranslationMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rot_threshold_deg: DEFAULT_THRESHOLD_DEG,
            trans_threshold: DEFAULT_THRESHOLD_DEG,
            bucket_rule: BucketRule::Pair,
            translation: TranslationMode::Angular,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.rot_threshold_deg > 0.0 && self.trans_threshold > 0.0) {
            return Err(EvalError::InvalidConfig(format!(
                "thresholds must be > 0, got {} / {}",
                self.rot_threshold_deg, self.trans_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub rot_err_deg: f64,
    /// Degrees, or meters in metric mode.
    pub trans_err: f64,
    pub modalities: (Modality, Modality),
}

pub fn pair_errors(pred: &[Pose], gt: &[Pose], tags: &[Modality]) -> Result<Vec<PairError>, EvalError> {
    pair_errors_with(pred, gt, tags, TranslationMode::Angular)
}

/// Errors for every unordered pair `i < j`, in lexicographic order.
pub fn pair_errors_with(
    pred: &[Pose],
    gt: &[Pose],
    tags: &[Modality],
    mode: TranslationMode,
) -> Result<Vec<PairError>, EvalError> {
    if pred.len() != gt.len() || gt.len() != tags.len() {
        return Err(EvalError::InvalidPairing(format!(
            "{} predicted poses, {} ground-truth poses, {} modality tags",
            pred.len(),
            gt.len(),
            tags.len()
        )));
    }
    if gt.len() < 2 {
        return Err(EvalError::InvalidPairing("need at least two poses".into()));
    }
    let n = gt.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let p = relative_pose(&pred[i], &pred[j]);
            let g = relative_pose(&gt[i], &gt[j]);
            let trans_err = match mode {
                TranslationMode::Angular => translation_direction_error_deg(&p.translation, &g.translation),
                TranslationMode::Metric => (p.translation - g.translation).norm(),
            };
            out.push(PairError {
                i,
                j,
                rot_err_deg: rotation_error_deg(&p.rotation, &g.rotation),
                trans_err,
                modalities: (tags[i], tags[j]),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub rra: f64,
    pub rta: f64,
    /// Pairs (pair rule) or images (image-anchored rule) behind the score.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ground: Option<BucketScore>,
    pub aerial: Option<BucketScore>,
    pub satellite: Option<BucketScore>,
    pub rra_avg: f64,
    pub rta_avg: f64,
    pub avg: f64,
    /// Buckets with no contributions; excluded from the averages.
    pub absent: Vec<Modality>,
    pub rot_threshold_deg: f64,
    pub trans_threshold: f64,
    pub bucket_rule: BucketRule,
    pub translation: TranslationMode,
    pub pairs: usize,
}

impl MetricReport {
    pub fn bucket(&self, m: Modality) -> Option<BucketScore> {
        match m {
            Modality::Ground => self.ground,
            Modality::Aerial => self.aerial,
            Modality::Satellite => self.satellite,
        }
    }

    fn bucket_mut(&mut self, m: Modality) -> &mut Option<BucketScore> {
        match m {
            Modality::Ground => &mut self.ground,
            Modality::Aerial => &mut self.aerial,
            Modality::Satellite => &mut self.satellite,
        }
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

pub fn rra_rta(errors: &[PairError], config: &EvalConfig) -> Result<MetricReport, EvalError> {
    config.validate()?;
    if errors.is_empty() {
        return Err(EvalError::Empty("no pair errors to score".into()));
    }
    let rot_ok = |e: &PairError| e.rot_err_deg < config.rot_threshold_deg;
    let trans_ok = |e: &PairError| e.trans_err < config.trans_threshold;

    let mut report = MetricReport {
        ground: None,
        aerial: None,
        satellite: None,
        rra_avg: 0.0,
        rta_avg: 0.0,
        avg: 0.0,
        absent: Vec::new(),
        rot_threshold_deg: config.rot_threshold_deg,
        trans_threshold: config.trans_threshold,
        bucket_rule: config.bucket_rule,
        translation: config.translation,
        pairs: errors.len(),
    };

    match config.bucket_rule {
        BucketRule::Pair => {
            for m in Modality::ALL {
                let members: Vec<&PairError> =
                    errors.iter().filter(|e| e.modalities.0 == m || e.modalities.1 == m).collect();
                if members.is_empty() {
                    continue;
                }
                let n = members.len();
                *report.bucket_mut(m) = Some(BucketScore {
                    rra: percent(members.iter().filter(|e| rot_ok(e)).count(), n),
                    rta: percent(members.iter().filter(|e| trans_ok(e)).count(), n),
                    count: n,
                });
            }
        }
        BucketRule::ImageAnchored => {
            // image -> (modality, pairs, rot hits, trans hits)
            let mut images: BTreeMap<usize, (Modality, usize, usize, usize)> = BTreeMap::new();
            for e in errors {
                for (idx, m) in [(e.i, e.modalities.0), (e.j, e.modalities.1)] {
                    let s = images.entry(idx).or_insert((m, 0, 0, 0));
                    s.1 += 1;
                    s.2 += rot_ok(e) as usize;
                    s.3 += trans_ok(e) as usize;
                }
            }
            for m in Modality::ALL {
                let members: Vec<_> = images.values().filter(|s| s.0 == m).collect();
                if members.is_empty() {
                    continue;
                }
                let n = members.len() as f64;
                *report.bucket_mut(m) = Some(BucketScore {
                    rra: members.iter().map(|s| percent(s.2, s.1)).sum::<f64>() / n,
                    rta: members.iter().map(|s| percent(s.3, s.1)).sum::<f64>() / n,
                    count: members.len(),
                });
            }
        }
    }

    let present: Vec<BucketScore> = Modality::ALL.iter().filter_map(|m| report.bucket(*m)).collect();
    report.absent = Modality::ALL.iter().copied().filter(|m| report.bucket(*m).is_none()).collect();
    let k = present.len() as f64;
    report.rra_avg = present.iter().map(|b| b.rra).sum::<f64>() / k;
    report.rta_avg = present.iter().map(|b| b.rta).sum::<f64>() / k;
    report.avg = (report.rra_avg + report.rta_avg) / 2.0;
    Ok(report)
}

/// Mean ± sample standard deviation of each report field across sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub sites: usize,
    /// Keyed `"{bucket}.rra"`, `"{bucket}.rta"`, `"rra_avg"`, `"rta_avg"`, `"avg"`.
    pub fields: BTreeMap<String, MeanStd>,
}

pub fn aggregate_reports(reports: &[MetricReport]) -> Result<AggregateReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty("no site reports to aggregate".into()));
    }
    let mut fields = BTreeMap::new();
    for m in Modality::ALL {
        let scores: Vec<BucketScore> = reports.iter().filter_map(|r| r.bucket(m)).collect();
        let rra: Vec<f64> = scores.iter().map(|b| b.rra).collect();
        let rta: Vec<f64> = scores.iter().map(|b| b.rta).collect();
        if let (Some(a), Some(b)) = (MeanStd::of(&rra), MeanStd::of(&rta)) {
            fields.insert(format!("{m}.rra"), a);
            fields.insert(format!("{m}.rta"), b);
        }
    }
    for (name, get) in [
        ("rra_avg", (|r: &MetricReport| r.rra_avg) as fn(&MetricReport) -> f64),
        ("rta_avg", |r| r.rta_avg),
        ("avg", |r| r.avg),
    ] {
        let v: Vec<f64> = reports.iter().map(get).collect();
        fields.insert(name.to_string(), MeanStd::of(&v).expect("nonempty"));
    }
    Ok(AggregateReport { sites: reports.len(), fields })
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> Result<f64, EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::InvalidShape(format!("{} vs {} samples", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(EvalError::InvalidConfig(format!("peak must be > 0, got {peak}")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &Image3, b: &Image3, peak: f64) -> Result<f64, EvalError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(EvalError::InvalidShape(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    psnr_slices(&a.data, &b.data, peak)
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TableStyle {
    /// Ground | Satellite | Aerial | Avg, each with RRA/RTA sub-columns.
    #[default]
    Full,
    /// Ground | Satellite | Overall Avg.
    Compact,
}

/// One decimal, ties rounded up.
pub fn format_percent(v: f64) -> String {
    let tenths = (v * 10.0 + 0.5 + 1e-9).floor();
    format!("{:.1}", tenths / 10.0)
}

fn threshold_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

pub fn format_report(report: &MetricReport, style: TableStyle) -> String {
    let rra = format!("RRA@{}", threshold_label(report.rot_threshold_deg));
    let rta = format!("RTA@{}", threshold_label(report.trans_threshold));
    let cell = |v: Option<f64>| v.map(format_percent).unwrap_or_else(|| "-".to_string());
    let bucket_cells = |m: Modality| {
        let b = report.bucket(m);
        [cell(b.map(|b| b.rra)), cell(b.map(|b| b.rta))]
    };

    let (groups, values): (Vec<(&str, Vec<String>)>, Vec<String>) = match style {
        TableStyle::Full => {
            let mut values = Vec::new();
            for m in [Modality::Ground, Modality::Satellite, Modality::Aerial] {
                values.extend(bucket_cells(m));
            }
            values.push(format_percent(report.rra_avg));
            values.push(format_percent(report.rta_avg));
            (
                vec![
                    ("Ground", vec![rra.clone(), rta.clone()]),
                    ("Satellite", vec![rra.clone(), rta.clone()]),
                    ("Aerial", vec![rra.clone(), rta.clone()]),
                    ("Avg", vec![rra, rta]),
                ],
                values,
            )
        }
        TableStyle::Compact => {
            let mut values = Vec::new();
            for m in [Modality::Ground, Modality::Satellite] {
                values.extend(bucket_cells(m));
            }
            values.push(format_percent(report.avg));
            (
                vec![
                    ("Ground", vec![rra.clone(), rta.clone()]),
                    ("Satellite", vec![rra, rta]),
                    ("Overall Avg", vec!["avg".to_string()]),
                ],
                values,
            )
        }
    };

    let sub_width = groups.iter().flat_map(|(_, s)| s.iter().map(String::len)).max().unwrap_or(5).max(5);
    let mut header = String::from("|");
    let mut sub = String::from("|");
    for (name, cols) in &groups {
        let span = cols.len() * (sub_width + 3) - 1;
        let _ = write!(header, " {name:^w$} |", w = span - 2);
        for c in cols {
            let _ = write!(sub, " {c:>sub_width$} |");
        }
    }
    let mut row = String::from("|");
    for v in &values {
        let _ = write!(row, " {v:>sub_width$} |");
    }
    let rule = format!("|{}|", "-".repeat(sub.len() - 2));
    let mut out = format!("{header}\n{sub}\n{rule}\n{row}\n");

    let shown: &[Modality] = match style {
        TableStyle::Full => &[Modality::Ground, Modality::Satellite, Modality::Aerial],
        TableStyle::Compact => &[Modality::Ground, Modality::Satellite],
    };
    for m in report.absent.iter().filter(|m| shown.contains(m)) {
        let _ = writeln!(out, "- : no {m} pairs; excluded from the averages");
    }
    out
}

pub fn format_aggregate(agg: &AggregateReport) -> String {
    let mut out = format!("sites: {}\n", agg.sites);
    for (name, v) in &agg.fields {
        let _ = writeln!(out, "{name:<16} {} ± {}", format_percent(v.mean), format_percent(v.std));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(format_percent(100.0), "100.0");
        assert_eq!(format_percent(100.0 / 3.0), "33.3");
        assert_eq!(format_percent(200.0 / 3.0), "66.7");
        assert_eq!(format_percent(33.25), "33.3");
        assert_eq!(format_percent(0.15), "0.2");
        assert_eq!(format_percent(0.0), "0.0");
    }

    #[test]
    fn psnr_examples() {
        let a = Image3::filled(4, 4, 100.0);
        let b = Image3::filled(4, 4, 110.0);
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 28.13).abs() < 0.01, "{v}");
        assert_eq!(v, psnr(&b, &a, 255.0).unwrap());
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        assert!(matches!(psnr(&a, &Image3::zeros(4, 5), 255.0), Err(EvalError::InvalidShape(_))));
    }

    #[test]
    fn config_rejects_nonpositive_thresholds() {
        assert!(EvalConfig { rot_threshold_deg: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(EvalConfig::default().rot_threshold_deg, 5.0);
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[4.0]).unwrap().std, 0.0);
    }
}
