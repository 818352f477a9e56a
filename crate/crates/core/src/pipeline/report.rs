use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use chromalink_autograd::Scalar;
use serde::{Deserialize, Serialize};

use super::infer::colorize_video_n;
use super::model::ColorizationModel;
use crate::colorspace::{lab_to_rgb, LabFrame};
use crate::config::PipelineConfig;
use crate::data::Clip;
use crate::error::{ensure_shape, Error, Result};
use crate::flowlab::{FlowField, OcclusionMask};
use crate::metrics::{colorfulness, psnr, warp_error_pairs, MetricSeries};

/// Metrics of one colorized sequence. FID and LPIPS are filled only by
/// external tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub frames: usize,
    #[serde(default)]
    pub block_size: Option<usize>,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub seconds_per_frame: Option<f64>,
    pub psnr: Option<MetricSeries>,
    pub color: MetricSeries,
    pub we: Option<MetricSeries>,
    #[serde(default)]
    pub fid: Option<f64>,
    #[serde(default)]
    pub lpips: Option<f64>,
}

/// PSNR against `gt` when given, colorfulness always, warp error when
/// flow pairs are given.
pub fn evaluate_frames<T: Scalar>(
    kind: &str,
    pred: &[LabFrame<T>],
    gt: Option<&[LabFrame<T>]>,
    pairs: Option<&[(FlowField, OcclusionMask)]>,
) -> Result<Report> {
    let rgb: Vec<_> = pred.iter().map(lab_to_rgb).collect();
    let psnr = match gt {
        Some(gt) => {
            ensure_shape(gt.len() == pred.len(), || format!("{} predictions vs {} references", pred.len(), gt.len()))?;
            let vals = rgb
                .iter()
                .zip(gt)
                .map(|(p, g)| psnr(p, &lab_to_rgb(g)))
                .collect::<Result<Vec<_>>>()?;
            Some(MetricSeries::new(vals))
        }
        None => None,
    };
    let color = MetricSeries::new(rgb.iter().map(colorfulness).collect::<Result<Vec<_>>>()?);
    let we = match pairs {
        Some(p) => {
            let (flows, masks): (Vec<FlowField>, Vec<OcclusionMask>) = p.iter().cloned().unzip();
            Some(MetricSeries::new(warp_error_pairs(&rgb, &flows, &masks)?))
        }
        None => None,
    };
    Ok(Report {
        kind: kind.into(),
        frames: pred.len(),
        block_size: None,
        variant: None,
        seconds_per_frame: None,
        psnr,
        color,
        we,
        fid: None,
        lpips: None,
    })
}

/// Colorizes a ground-truth clip from its grayscale rendering with the
/// first color frame as reference, then scores it.
pub fn evaluate_clip<T: Scalar>(model: &ColorizationModel<T>, clip: &Clip, n: usize) -> Result<(Vec<LabFrame<T>>, Report)> {
    let gt: Vec<LabFrame<T>> = clip.frames.iter().map(|f| f.cast()).collect();
    let gray: Vec<LabFrame<T>> = clip.grayscale().iter().map(|f| f.cast()).collect();
    let started = Instant::now();
    let pred = colorize_video_n(model, &gray, &gt[0], n)?;
    let spf = started.elapsed().as_secs_f64() / pred.len() as f64;
    let pairs = clip.temporal_pairs(model.config.occlusion_thresholds())?;
    let mut report = evaluate_frames("eval", &pred, Some(&gt), pairs.as_deref())?;
    report.block_size = Some(n);
    report.seconds_per_frame = Some(spf);
    Ok((pred, report))
}

/// Component-ablation variants, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    NoTransformerNoLinkage,
    SingleHead,
    NoLinkage,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoTransformerNoLinkage, Variant::SingleHead, Variant::NoLinkage, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoTransformerNoLinkage => "no_transformer_branch+no_linkage",
            Variant::SingleHead => "single_head",
            Variant::NoLinkage => "no_linkage",
            Variant::Full => "full",
        }
    }

    /// `(no_transformer_branch, single_head, no_linkage)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Variant::NoTransformerNoLinkage => (true, false, true),
            Variant::SingleHead => (false, true, false),
            Variant::NoLinkage => (false, false, true),
            Variant::Full => (false, false, false),
        }
    }

    pub fn apply(self, cfg: &mut PipelineConfig) {
        let (t, s, l) = self.switches();
        cfg.no_transformer_branch = t;
        cfg.single_head = s;
        cfg.no_linkage = l;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "full" => Variant::Full,
            "single_head" => Variant::SingleHead,
            "no_linkage" => Variant::NoLinkage,
            "no_transformer_branch+no_linkage" | "no_transformer_no_linkage" | "no_transformer" => {
                Variant::NoTransformerNoLinkage
            }
            _ => {
                let valid = Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ");
                return Err(Error::UnknownVariant { name: s.into(), valid });
            }
        })
    }
}

/// One row of an ablation or block-size table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub block_size: Option<usize>,
    pub psnr: Option<f64>,
    pub color: f64,
    pub we: Option<f64>,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    pub seconds_per_frame: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub kind: String,
    pub rows: Vec<TableRow>,
    /// `max − min` of each column over rows.
    pub psnr_spread: Option<f64>,
    pub color_spread: f64,
    pub we_spread: Option<f64>,
}

fn spread(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        return None;
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

impl TableReport {
    pub fn new(kind: &str, rows: Vec<TableRow>) -> Self {
        TableReport {
            kind: kind.into(),
            psnr_spread: spread(rows.iter().filter_map(|r| r.psnr)),
            color_spread: spread(rows.iter().map(|r| r.color)).unwrap_or(0.0),
            we_spread: spread(rows.iter().filter_map(|r| r.we)),
            rows,
        }
    }
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    if v.is_empty() || v.len() != xs.len() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Averages per-clip reports into one table row.
pub fn summarize(label: &str, block_size: Option<usize>, reports: &[Report]) -> TableRow {
    let k = reports.len().max(1) as f64;
    TableRow {
        label: label.into(),
        block_size,
        psnr: mean_opt(&reports.iter().map(|r| r.psnr.as_ref().map(|m| m.mean)).collect::<Vec<_>>()),
        color: reports.iter().map(|r| r.color.mean).sum::<f64>() / k,
        we: mean_opt(&reports.iter().map(|r| r.we.as_ref().map(|m| m.mean)).collect::<Vec<_>>()),
        fid: None,
        lpips: None,
        seconds_per_frame: mean_opt(&reports.iter().map(|r| r.seconds_per_frame).collect::<Vec<_>>()),
    }
}

/// Evaluates `model` with the variant's components disabled over `clips`.
pub fn ablate<T: Scalar>(model: &ColorizationModel<T>, variant: Variant, clips: &[Clip]) -> Result<TableRow> {
    if clips.is_empty() {
        return Err(Error::Input("no evaluation clips".into()));
    }
    let mut m = model.clone();
    let (t, s, l) = variant.switches();
    m.set_ablation(t, s, l);
    let reports = clips
        .iter()
        .map(|c| evaluate_clip(&m, c, m.config.block_size).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(variant.name(), Some(m.config.block_size), &reports))
}

/// Metrics and mean per-frame wall time for each block size.
pub fn block_size_sweep<T: Scalar>(model: &ColorizationModel<T>, clip: &Clip, sizes: &[usize]) -> Result<TableReport> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let (_, rep) = evaluate_clip(model, clip, n)?;
        rows.push(summarize(&format!("N={n}"), Some(n), &[rep]));
    }
    Ok(TableReport::new("block-size-sweep", rows))
}
