//! Dataset-level evaluations: histogram alignment, site classification,
//! cross-site segmentation, traveling-subject similarity and synthesis
//! quality.

use serde::Serialize;

use super::embed::{pca_2d, scatter_ratio};
use super::histogram::{hist_distance, hist_match, HistDistance, Histogram, DEFAULT_BINS};
use super::probe::{pooled_features, probe_train_eval, ProbeConfig, ProbeScores};
use super::quality::{pcc, ssim};
use super::segmentation::{dice_scores, fit_site_segmenter, jaccard_scores, ClassScores};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::phantoms::{Dataset, Split};

fn foreground(data: &Dataset) -> Vec<Vec<bool>> {
    data.samples.iter().map(|s| s.mask.foreground()).collect()
}

/// Pooled foreground histogram of one site's images.
pub fn site_histogram(data: &Dataset, site: &str) -> Result<Histogram> {
    let d = data.site(site);
    if d.is_empty() {
        return Err(Error::data("metrics", format!("no images for site {site}")));
    }
    let masks = foreground(&d);
    let pairs: Vec<(&Image, &[bool])> = d
        .samples
        .iter()
        .zip(&masks)
        .map(|(s, m)| (&s.image, m.as_slice()))
        .collect();
    Histogram::pooled(&pairs, DEFAULT_BINS)
}

fn same_layout(a: &Dataset, b: &Dataset) -> Result<()> {
    let same = a.len() == b.len()
        && a.samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| x.site_id == y.site_id && x.subject_id == y.subject_id);
    if same {
        Ok(())
    } else {
        Err(Error::data(
            "metrics",
            "datasets do not list the same samples in the same order",
        ))
    }
}

/// Classical histogram matching of every non-target image to a single
/// template: the first target-site image. Target images are unchanged.
pub fn hm_baseline(data: &Dataset, target: &str) -> Result<Dataset> {
    let template = data
        .samples
        .iter()
        .find(|s| s.site_id == target)
        .ok_or_else(|| Error::data("metrics", format!("no images for target site {target}")))?;
    let t_mask = template.mask.foreground();
    let images = data
        .samples
        .iter()
        .map(|s| {
            if s.site_id == target {
                Ok(s.image.clone())
            } else {
                hist_match(&s.image, &s.mask.foreground(), &template.image, &t_mask)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    data.with_images(images)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteHistogramShift {
    pub site_id: String,
    /// Distance of the site's pooled histogram to the target's, before.
    pub raw: HistDistance,
    pub harmonized: HistDistance,
    pub baseline: Option<HistDistance>,
}

/// Pooled foreground histogram of each non-target site compared with the
/// raw target site's.
pub fn histogram_task(
    raw: &Dataset,
    harmonized: &Dataset,
    baseline: Option<&Dataset>,
    target: &str,
) -> Result<Vec<SiteHistogramShift>> {
    same_layout(raw, harmonized)?;
    if let Some(b) = baseline {
        same_layout(raw, b)?;
    }
    let t = site_histogram(raw, target)?;
    raw.site_ids()
        .into_iter()
        .filter(|s| s != target)
        .map(|site| {
            Ok(SiteHistogramShift {
                raw: hist_distance(&site_histogram(raw, &site)?, &t),
                harmonized: hist_distance(&site_histogram(harmonized, &site)?, &t),
                baseline: match baseline {
                    Some(b) => Some(hist_distance(&site_histogram(b, &site)?, &t)),
                    None => None,
                },
                site_id: site,
            })
        })
        .collect()
}

/// Site index of every sample, in [`Dataset::site_ids`] order.
pub fn site_labels(data: &Dataset) -> (Vec<String>, Vec<usize>) {
    let ids = data.site_ids();
    let labels = data
        .samples
        .iter()
        .map(|s| ids.iter().position(|i| *i == s.site_id).expect("listed site"))
        .collect();
    (ids, labels)
}

fn features(data: &Dataset, grid: usize) -> Result<Vec<Vec<f64>>> {
    data.samples.iter().map(|s| pooled_features(&s.image, grid)).collect()
}

/// Site-classification probe fitted on the train split and scored on the
/// val split. Lower scores mean weaker site effects.
pub fn probe_task(data: &Dataset, config: &ProbeConfig) -> Result<ProbeScores> {
    let (ids, labels) = site_labels(data);
    let pick = |split: Split| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (s, &l) in data.samples.iter().zip(&labels) {
            if s.split == split {
                x.push(pooled_features(&s.image, config.grid)?);
                y.push(l);
            }
        }
        if x.is_empty() {
            return Err(Error::data("metrics", format!("no {split:?} images for the probe")));
        }
        Ok((x, y))
    };
    let (xt, yt) = pick(Split::Train)?;
    let (xv, yv) = pick(Split::Val)?;
    probe_train_eval((&xt, &yt), (&xv, &yv), ids.len(), config)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteEmbedding {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub site_ids: Vec<String>,
    /// Between-site over within-site scatter of the points.
    pub scatter_ratio: f64,
}

/// Two-dimensional PCA of pooled image features, labelled by site.
pub fn site_embedding(data: &Dataset, grid: usize) -> Result<SiteEmbedding> {
    let (site_ids, labels) = site_labels(data);
    let points = pca_2d(&features(data, grid)?)?;
    let ratio = scatter_ratio(&points, &labels)?;
    Ok(SiteEmbedding {
        points,
        labels,
        site_ids,
        scatter_ratio: ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub images: usize,
    pub raw_dice: ClassScores,
    pub harmonized_dice: ClassScores,
    pub raw_jaccard: ClassScores,
    pub harmonized_jaccard: ClassScores,
}

fn add(acc: &mut ClassScores, s: &ClassScores, w: f64) {
    acc.csf += w * s.csf;
    acc.gm += w * s.gm;
    acc.wm += w * s.wm;
}

/// Tissue centers fitted on the raw target site, applied unchanged to every
/// non-target image before and after harmonization.
pub fn segmentation_task(raw: &Dataset, harmonized: &Dataset, target: &str) -> Result<SegmentationReport> {
    same_layout(raw, harmonized)?;
    let t = raw.site(target);
    let t_masks = foreground(&t);
    let refs: Vec<(&Image, &[bool])> = t
        .samples
        .iter()
        .zip(&t_masks)
        .map(|(s, m)| (&s.image, m.as_slice()))
        .collect();
    if refs.is_empty() {
        return Err(Error::data("metrics", format!("no images for target site {target}")));
    }
    let centers = fit_site_segmenter(&refs)?;
    let pairs: Vec<_> = raw
        .samples
        .iter()
        .zip(&harmonized.samples)
        .filter(|(s, _)| s.site_id != target)
        .collect();
    if pairs.is_empty() {
        return Err(Error::data("metrics", "no source images to segment"));
    }
    let w = 1.0 / pairs.len() as f64;
    let mut report = SegmentationReport {
        images: pairs.len(),
        raw_dice: ClassScores::default(),
        harmonized_dice: ClassScores::default(),
        raw_jaccard: ClassScores::default(),
        harmonized_jaccard: ClassScores::default(),
    };
    for (r, h) in pairs {
        let fg = r.mask.foreground();
        let seg_r = centers.segment(&r.image, &fg)?;
        let seg_h = centers.segment(&h.image, &fg)?;
        add(&mut report.raw_dice, &dice_scores(&seg_r, &r.mask)?, w);
        add(&mut report.harmonized_dice, &dice_scores(&seg_h, &r.mask)?, w);
        add(&mut report.raw_jaccard, &jaccard_scores(&seg_r, &r.mask)?, w);
        add(&mut report.harmonized_jaccard, &jaccard_scores(&seg_h, &r.mask)?, w);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TravelingPair {
    pub site_id: String,
    pub subject_id: String,
    pub raw_ssim: f64,
    pub harmonized_ssim: f64,
}

/// For every subject imaged at the target and at another site, SSIM of the
/// other site's rendering against the target's, before and after
/// harmonization.
pub fn traveling_task(raw: &Dataset, harmonized: &Dataset, target: &str) -> Result<Vec<TravelingPair>> {
    same_layout(raw, harmonized)?;
    let mut out = Vec::new();
    for (r, h) in raw.samples.iter().zip(&harmonized.samples) {
        if r.site_id == target {
            continue;
        }
        let Some(t) = raw
            .samples
            .iter()
            .find(|t| t.site_id == target && t.subject_id == r.subject_id)
        else {
            continue;
        };
        let fg = t.mask.foreground();
        out.push(TravelingPair {
            site_id: r.site_id.clone(),
            subject_id: r.subject_id.clone(),
            raw_ssim: ssim(&r.image, &t.image, &fg)?,
            harmonized_ssim: ssim(&h.image, &t.image, &fg)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairStats {
    pub pairs: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub pcc_mean: f64,
    pub pcc_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthesisReport {
    /// All pairs of distinct original images.
    pub original: PairStats,
    /// Every synthesized image against every original.
    pub synthesized: PairStats,
}

fn stats(ssims: &[f64], pccs: &[f64]) -> PairStats {
    let ms = |v: &[f64]| {
        let n = v.len().max(1) as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, var.sqrt())
    };
    let (sm, ss) = ms(ssims);
    let (pm, ps) = ms(pccs);
    PairStats {
        pairs: ssims.len(),
        ssim_mean: sm,
        ssim_std: ss,
        pcc_mean: pm,
        pcc_std: ps,
    }
}

/// Whole-image SSIM and PCC, since synthesized images have no masks.
pub fn synthesis_task(originals: &[&Image], synthesized: &[Image]) -> Result<SynthesisReport> {
    if originals.len() < 2 || synthesized.is_empty() {
        return Err(Error::data("metrics", "need two originals and one synthesized image"));
    }
    let full = vec![true; originals[0].len()];
    let pair = |a: &Image, b: &Image| -> Result<(f64, f64)> { Ok((ssim(a, b, &full)?, pcc(a, b, &full)?)) };
    let (mut os, mut op) = (Vec::new(), Vec::new());
    for i in 0..originals.len() {
        for j in 0..i {
            let (s, p) = pair(originals[i], originals[j])?;
            os.push(s);
            op.push(p);
        }
    }
    let (mut ss, mut sp) = (Vec::new(), Vec::new());
    for y in synthesized {
        for x in originals {
            let (s, p) = pair(y, x)?;
            ss.push(s);
            sp.push(p);
        }
    }
    Ok(SynthesisReport {
        original: stats(&os, &op),
        synthesized: stats(&ss, &sp),
    })
}
