//! Evaluation reports: one JSON document per run plus a flat CSV per table.

use std::path::Path;

use lest::metrics::{
    Histogram, ProbeScores, SegmentationReport, SiteHistogramShift, SiteRank, SynthesisReport, TravelingPair,
};
use serde::Serialize;

use crate::CliError;

pub const REPORT_FILE: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub raw: ProbeScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonized: Option<ProbeScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingReport {
    pub raw_scatter_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonized_scatter_ratio: Option<f64>,
}

/// Pooled histogram of one site in one version of the data.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramCurve {
    pub site_id: String,
    pub version: &'static str,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_site: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Vec<SiteHistogramShift>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traveling: Option<Vec<TravelingPair>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<SiteRank>>,
    #[serde(skip)]
    pub curves: Vec<HistogramCurve>,
    #[serde(skip)]
    pub points: Vec<EmbeddingPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPoint {
    pub version: &'static str,
    pub site_id: String,
    pub subject_id: String,
    pub x: f64,
    pub y: f64,
}

fn csv_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Core(lest::Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))?;
    Ok(())
}

fn f(v: f64) -> String {
    format!("{v}")
}

impl MetricsReport {
    /// Writes `metrics.json` and the CSV tables present in the report.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| lest::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&path, json + "\n").map_err(|e| lest::Error::Io { path, source: e })?;

        if let Some(h) = &self.histogram {
            let rows = h
                .iter()
                .map(|s| {
                    let (bl1, bw) = match &s.baseline {
                        Some(b) => (f(b.l1), f(b.wasserstein)),
                        None => (String::new(), String::new()),
                    };
                    vec![
                        s.site_id.clone(),
                        f(s.raw.l1),
                        f(s.raw.wasserstein),
                        f(s.harmonized.l1),
                        f(s.harmonized.wasserstein),
                        bl1,
                        bw,
                    ]
                })
                .collect();
            write_table(
                &dir.join("histogram.csv"),
                &[
                    "site_id",
                    "raw_l1",
                    "raw_w1",
                    "harmonized_l1",
                    "harmonized_w1",
                    "hm_l1",
                    "hm_w1",
                ],
                rows,
            )?;
        }
        if !self.curves.is_empty() {
            let mut rows = Vec::new();
            for c in &self.curves {
                let bins = c.histogram.bins();
                for (i, p) in c.histogram.probs.iter().enumerate() {
                    let center = (i as f64 + 0.5) / bins as f64;
                    rows.push(vec![
                        c.site_id.clone(),
                        c.version.to_string(),
                        i.to_string(),
                        f(center),
                        f(*p),
                    ]);
                }
            }
            write_table(
                &dir.join("histogram_curves.csv"),
                &["site_id", "version", "bin", "center", "prob"],
                rows,
            )?;
        }
        if let Some(p) = &self.probe {
            let mut rows = vec![scores_row("raw", &p.raw)];
            if let Some(h) = &p.harmonized {
                rows.push(scores_row("harmonized", h));
            }
            write_table(
                &dir.join("probe.csv"),
                &["version", "bacc", "acc", "auc", "f1", "sen"],
                rows,
            )?;
        }
        if let Some(s) = &self.segmentation {
            let rows = [
                ("raw", "dice", &s.raw_dice),
                ("harmonized", "dice", &s.harmonized_dice),
                ("raw", "jaccard", &s.raw_jaccard),
                ("harmonized", "jaccard", &s.harmonized_jaccard),
            ]
            .iter()
            .map(|(v, m, c)| vec![v.to_string(), m.to_string(), f(c.csf), f(c.gm), f(c.wm)])
            .collect();
            write_table(
                &dir.join("segmentation.csv"),
                &["version", "metric", "csf", "gm", "wm"],
                rows,
            )?;
        }
        if let Some(t) = &self.traveling {
            let rows = t
                .iter()
                .map(|p| {
                    vec![
                        p.site_id.clone(),
                        p.subject_id.clone(),
                        f(p.raw_ssim),
                        f(p.harmonized_ssim),
                    ]
                })
                .collect();
            write_table(
                &dir.join("traveling.csv"),
                &["site_id", "subject_id", "raw_ssim", "harmonized_ssim"],
                rows,
            )?;
        }
        if let Some(s) = &self.synthesis {
            let rows = [("original", &s.original), ("synthesized", &s.synthesized)]
                .iter()
                .map(|(v, p)| {
                    vec![
                        v.to_string(),
                        p.pairs.to_string(),
                        f(p.ssim_mean),
                        f(p.ssim_std),
                        f(p.pcc_mean),
                        f(p.pcc_std),
                    ]
                })
                .collect();
            write_table(
                &dir.join("synthesis.csv"),
                &["pairs_of", "pairs", "ssim_mean", "ssim_std", "pcc_mean", "pcc_std"],
                rows,
            )?;
        }
        if !self.points.is_empty() {
            let rows = self
                .points
                .iter()
                .map(|p| {
                    vec![
                        p.version.to_string(),
                        p.site_id.clone(),
                        p.subject_id.clone(),
                        f(p.x),
                        f(p.y),
                    ]
                })
                .collect();
            write_table(
                &dir.join("embedding.csv"),
                &["version", "site_id", "subject_id", "pc1", "pc2"],
                rows,
            )?;
        }
        if let Some(r) = &self.ranking {
            let rows = r
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    vec![
                        (i + 1).to_string(),
                        s.site_id.clone(),
                        f(s.mean_psnr),
                        s.pairs.to_string(),
                    ]
                })
                .collect();
            write_table(
                &dir.join("ranking.csv"),
                &["rank", "site_id", "mean_psnr", "pairs"],
                rows,
            )?;
        }
        Ok(())
    }
}

fn scores_row(version: &str, s: &ProbeScores) -> Vec<String> {
    vec![version.to_string(), f(s.bacc), f(s.acc), f(s.auc), f(s.f1), f(s.sen)]
}
