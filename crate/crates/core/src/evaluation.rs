//! Full-reference metrics, feature-distribution analysis and exports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{restore_with_dam, tta_adapt_from, AnchorSet, TtaConfig, TtaReport};
use crate::autograd::ParamGroup;
use crate::daam::DegradationFeature;
use crate::data::{Domain, ImageTensor, SamplePair, Task};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};

pub const PSNR_CAP: f64 = 99.0;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` for data range 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SsimWindow {
    Uniform { size: usize },
    Gaussian { size: usize, sigma: f64 },
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow::Uniform { size: 8 }
    }
}

impl SsimWindow {
    pub fn size(&self) -> usize {
        match *self {
            SsimWindow::Uniform { size } | SsimWindow::Gaussian { size, .. } => size,
        }
    }

    /// Normalised `size × size` weights.
    pub fn weights(&self) -> Vec<f64> {
        let k = self.size();
        let w: Vec<f64> = match *self {
            SsimWindow::Uniform { .. } => vec![1.0; k * k],
            SsimWindow::Gaussian { sigma, .. } => {
                let c = (k as f64 - 1.0) / 2.0;
                let g: Vec<f64> = (0..k)
                    .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect();
                (0..k * k).map(|i| g[i / k] * g[i % k]).collect()
            }
        };
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over every window position (stride 1) and channel.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, window: SsimWindow) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, c) = a.shape();
    let k = window.size();
    if k == 0 || h < k || w < k {
        return Err(Error::Size(format!(
            "{h}x{w} image is smaller than the {k}x{k} SSIM window"
        )));
    }
    let wts = window.weights();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = wts[dy * k + dx];
                        let va = a.get(y0 + dy, x0 + dx, ch);
                        let vb = b.get(y0 + dy, x0 + dx, ch);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub const KL_EPS: f64 = 1e-8;

/// `Σ p·ln(p/q)`; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Normalised, ε-smoothed histogram of `values` over `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let i = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[i] += 1.0;
    }
    let n = values.len() as f64;
    let z = 1.0 + bins as f64 * KL_EPS;
    counts.into_iter().map(|c| (c / n + KL_EPS) / z).collect()
}

/// Shared-support histograms of two value collections and `KL(source‖other)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityComparison {
    pub lo: f64,
    pub hi: f64,
    pub source: Vec<f64>,
    pub other: Vec<f64>,
    pub kl: f64,
}

pub fn feature_density_kl(source: &[f64], other: &[f64], bins: usize) -> Result<DensityComparison> {
    if source.is_empty() || other.is_empty() {
        return Err(Error::SampleCount(
            "density comparison needs non-empty feature collections".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    if source.iter().chain(other).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    let lo = source
        .iter()
        .chain(other)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = source
        .iter()
        .chain(other)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let p = histogram(source, lo, hi, bins);
    let q = histogram(other, lo, hi, bins);
    let kl = kl_divergence(&p, &q).max(0.0);
    Ok(DensityComparison {
        lo,
        hi,
        source: p,
        other: q,
        kl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMargin {
    pub intra: f64,
    pub inter: f64,
    pub margin: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

/// Mean cosine similarity over same-label pairs minus the mean over
/// different-label pairs.
pub fn cluster_margin(features: &[Vec<f64>], labels: &[usize]) -> Result<ClusterMargin> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::SampleCount(
            "cluster margin needs >= 2 labels with >= 2 samples each".into(),
        ));
    }
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let s = cosine(&features[i], &features[j]);
            if labels[i] == labels[j] {
                intra += s;
                ni += 1;
            } else {
                inter += s;
                nx += 1;
            }
        }
    }
    let (intra, inter) = (intra / ni as f64, inter / nx as f64);
    Ok(ClusterMargin {
        intra,
        inter,
        margin: intra - inter,
    })
}

/// Pooled degradation features of every sample as tab-separated rows
/// `id, task, domain, f0..f{D-1}` under a header. Returns the row count.
pub fn export_features(
    model: &Model,
    dataset: &[SamplePair],
    variant: Variant,
    path: &Path,
) -> Result<usize> {
    let feats = dataset_features(model, dataset, variant)?;
    let d = model.config().daam.code_dim;
    let mut out = String::from("id\ttask\tdomain");
    for i in 0..d {
        out.push_str(&format!("\tf{i}"));
    }
    out.push('\n');
    for (p, f) in dataset.iter().zip(&feats) {
        out.push_str(&format!("{}\t{}\t{}", p.id, p.task, p.domain.as_str()));
        for v in &f.pooled {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(dataset.len())
}

/// Degradation features of every degraded image, in dataset order.
pub fn dataset_features(
    model: &Model,
    dataset: &[SamplePair],
    variant: Variant,
) -> Result<Vec<DegradationFeature>> {
    let mut feats = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(8) {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|p| &p.degraded).collect();
        feats.extend(model.degradation_features_batch(&imgs, variant)?);
    }
    Ok(feats)
}

pub fn count_params(model: &Model, group: Option<ParamGroup>) -> usize {
    model.param_count(group)
}

/// Per-index code counts as `code\tcount` rows.
pub fn write_code_usage(path: &Path, counts: &[u64]) -> Result<()> {
    let mut out = String::from("code\tcount\n");
    for (k, c) in counts.iter().enumerate() {
        out.push_str(&format!("{k}\t{c}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Code histogram of the quantized features of `dataset`.
pub fn code_usage(model: &Model, dataset: &[SamplePair]) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; model.config().daam.num_codes];
    for f in dataset_features(model, dataset, Variant::Full)? {
        for k in f.indices.unwrap_or_default() {
            counts[k] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub task: Task,
    pub domain: Domain,
    pub psnr: f64,
    pub ssim: f64,
    pub tta_enabled: bool,
}

/// Restores every sample and scores it against its clean image. Target
/// samples go through test-time adaptation when `tta` is given; source
/// samples never do.
pub fn evaluate_samples(
    model: &Model,
    samples: &[SamplePair],
    variant: Variant,
    window: SsimWindow,
    tta: Option<(&AnchorSet, &TtaConfig)>,
) -> Result<(Vec<MetricRecord>, Vec<TtaReport>)> {
    let mut records = Vec::with_capacity(samples.len());
    let mut reports = Vec::new();
    let mut continual = None;
    for p in samples {
        let adapt = tta.filter(|_| p.domain == Domain::Target && variant.injects());
        let restored = match adapt {
            Some((anchors, cfg)) => {
                let start = if cfg.reset_per_sample {
                    None
                } else {
                    continual.as_ref()
                };
                let out = tta_adapt_from(model, &p.degraded, anchors, cfg, variant, start)?;
                let img = restore_with_dam(model, &p.degraded, variant, &out.state)?;
                let mut report = out.report;
                report.sample_id = Some(p.id.clone());
                reports.push(report);
                if !cfg.reset_per_sample {
                    continual = Some(out.state);
                }
                img
            }
            None => model.restore(&p.degraded, variant)?,
        };
        records.push(MetricRecord {
            id: p.id.clone(),
            task: p.task,
            domain: p.domain,
            psnr: psnr(&restored, &p.clean)?,
            ssim: ssim(&restored, &p.clean, window)?,
            tta_enabled: adapt.is_some(),
        });
    }
    Ok((records, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: Task,
    pub domain: Domain,
    pub tta_enabled: bool,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

/// Means per (task, domain, tta flag), in canonical task order.
pub fn aggregate_metrics(records: &[MetricRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Task, u8, bool), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = groups
            .entry((r.task, r.domain as u8, r.tta_enabled))
            .or_default();
        e.0 += r.psnr;
        e.1 += r.ssim;
        e.2 += 1;
    }
    groups
        .into_iter()
        .map(|((task, d, tta), (p, s, n))| AggregateRow {
            task,
            domain: if d == Domain::Source as u8 {
                Domain::Source
            } else {
                Domain::Target
            },
            tta_enabled: tta,
            mean_psnr: p / n as f64,
            mean_ssim: s / n as f64,
            count: n,
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["task", "domain", "tta", "mean_psnr", "mean_ssim", "count"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.task.as_str().to_string(),
            r.domain.as_str().to_string(),
            r.tta_enabled.to_string(),
            format!("{:.6}", r.mean_psnr),
            format!("{:.6}", r.mean_ssim),
            r.count.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Appends one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for it in items {
        let line = serde_json::to_string(it)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Per-task comparison of source features against raw and adapted target
/// features. Each comparison uses its own shared support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub task: Task,
    pub bins: usize,
    pub kl_source_vs_raw: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_source_vs_adapted: Option<f64>,
    pub raw: DensityComparison,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapted: Option<DensityComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAnalysis {
    pub density: Vec<DensityReport>,
    pub margin_source: Option<ClusterMargin>,
    pub margin_target: Option<ClusterMargin>,
    /// CORAL trajectories of the adapted target samples.
    pub tta_reports: Vec<TtaReport>,
}

/// Density and cluster analysis of DAAM features. Adapted-target densities
/// are produced only when `tta` is given.
pub fn analyze_features(
    model: &Model,
    source: &[SamplePair],
    target: &[SamplePair],
    variant: Variant,
    bins: usize,
    tta: Option<(&AnchorSet, &TtaConfig)>,
) -> Result<FeatureAnalysis> {
    let src_feats = dataset_features(model, source, variant)?;
    let tgt_feats = dataset_features(model, target, variant)?;
    let mut adapted: Vec<Option<Vec<f64>>> = vec![None; target.len()];
    let mut tta_reports = Vec::new();
    if let Some((anchors, cfg)) = tta {
        for (i, p) in target.iter().enumerate() {
            let out = tta_adapt_from(model, &p.degraded, anchors, cfg, variant, None)?;
            adapted[i] = Some(out.adapted.into_data());
            let mut report = out.report;
            report.sample_id = Some(p.id.clone());
            tta_reports.push(report);
        }
    }
    let mut density = Vec::new();
    for task in Task::ALL {
        let s: Vec<f64> = source
            .iter()
            .zip(&src_feats)
            .filter(|(p, _)| p.task == task)
            .flat_map(|(_, f)| f.flat.clone())
            .collect();
        let sel: Vec<usize> = (0..target.len())
            .filter(|&i| target[i].task == task)
            .collect();
        if s.is_empty() || sel.is_empty() {
            continue;
        }
        let raw: Vec<f64> = sel
            .iter()
            .flat_map(|&i| tgt_feats[i].flat.clone())
            .collect();
        let ad: Option<Vec<f64>> = tta.map(|_| {
            sel.iter()
                .flat_map(|&i| adapted[i].clone().unwrap_or_default())
                .collect()
        });
        let raw = feature_density_kl(&s, &raw, bins)?;
        let adapted = ad.map(|a| feature_density_kl(&s, &a, bins)).transpose()?;
        density.push(DensityReport {
            task,
            bins,
            kl_source_vs_raw: raw.kl,
            kl_source_vs_adapted: adapted.as_ref().map(|a| a.kl),
            raw,
            adapted,
        });
    }
    let margin = |samples: &[SamplePair], feats: &[DegradationFeature]| {
        let pooled: Vec<Vec<f64>> = feats.iter().map(|f| f.pooled.clone()).collect();
        let labels: Vec<usize> = samples.iter().map(|p| p.task.index()).collect();
        cluster_margin(&pooled, &labels).ok()
    };
    Ok(FeatureAnalysis {
        density,
        margin_source: margin(source, &src_feats),
        margin_target: margin(target, &tgt_feats),
        tta_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(
            h,
            w,
            3,
            (0..h * w * 3).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = ImageTensor::filled(4, 4, 3, 0.0);
        let b = ImageTensor::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!(psnr(&a, &ImageTensor::filled(4, 5, 3, 0.0)).is_err());
    }

    #[test]
    fn psnr_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let (a, b) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
            let mut se = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        se += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
                    }
                }
            }
            let want = 10.0 * (192.0 / se).log10();
            assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (
            random_image(&mut rng, 12, 10),
            random_image(&mut rng, 12, 10),
        );
        let w = SsimWindow::default();
        assert!((ssim(&a, &a, w).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b, w).unwrap() - ssim(&b, &a, w).unwrap()).abs() < 1e-12);
        let s = ssim(
            &a,
            &b,
            SsimWindow::Gaussian {
                size: 7,
                sigma: 1.5,
            },
        )
        .unwrap();
        assert!((-1.0..=1.0).contains(&s));
        let small = ImageTensor::filled(6, 6, 3, 0.2);
        assert!(matches!(ssim(&small, &small, w), Err(Error::Size(_))));
    }

    #[test]
    fn kl_cases() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]);
        assert!((kl - (0.5 * (0.5f64 / 0.9).ln() + 0.5 * 5f64.ln())).abs() < 1e-15);
        assert!((kl - 0.5108).abs() < 1e-4);
        let v: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let r = feature_density_kl(&v, &v, 64).unwrap();
        assert!(r.kl.abs() < 1e-9);
        assert!((r.source.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(feature_density_kl(&[], &v, 8).is_err());
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..70).map(|_| rng.random::<f64>().powi(2)).collect();
            assert!(feature_density_kl(&a, &b, 16).unwrap().kl >= 0.0);
        }
    }

    #[test]
    fn margin_cases() {
        let f = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let m = cluster_margin(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!((m.intra, m.inter, m.margin), (1.0, 0.0, 1.0));
        let same = vec![vec![0.3, 0.4]; 4];
        assert!(cluster_margin(&same, &[0, 0, 1, 1]).unwrap().margin.abs() < 1e-12);
        assert!(cluster_margin(&f, &[0, 0, 0, 1]).is_err());
        assert!(cluster_margin(&f[..2], &[0, 0]).is_err());
    }

    #[test]
    fn aggregate_groups() {
        let rec = |task, tta, p| MetricRecord {
            id: "x".into(),
            task,
            domain: Domain::Target,
            psnr: p,
            ssim: 0.5,
            tta_enabled: tta,
        };
        let rows = aggregate_metrics(&[
            rec(Task::Haze, false, 20.0),
            rec(Task::Haze, false, 30.0),
            rec(Task::Haze, true, 10.0),
        ]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_psnr, 25.0);
        assert_eq!(rows[0].count, 2);
        assert!(rows[1].tta_enabled);
    }
}
