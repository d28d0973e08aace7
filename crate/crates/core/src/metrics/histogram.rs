//! Foreground intensity histograms, histogram distances and the classical
//! histogram-matching baseline.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

/// Normalized histogram of masked intensities over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub probs: Vec<f64>,
    pub count: usize,
}

pub const DEFAULT_BINS: usize = 64;

fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

impl Histogram {
    pub fn new(img: &Image, mask: &[bool], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("metrics", "bins", "must be positive"));
        }
        if mask.len() != img.len() {
            return Err(Error::data("metrics", "mask size differs from image size"));
        }
        let mut counts = vec![0usize; bins];
        for (&v, _) in img.data.iter().zip(mask).filter(|(_, &m)| m) {
            counts[bin_of(v, bins)] += 1;
        }
        let count: usize = counts.iter().sum();
        if count == 0 {
            return Err(Error::data("metrics", "empty mask"));
        }
        Ok(Self {
            probs: counts.iter().map(|&c| c as f64 / count as f64).collect(),
            count,
        })
    }

    /// Histogram of the masked pixels of all images taken together.
    pub fn pooled(images: &[(&Image, &[bool])], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("metrics", "bins", "must be positive"));
        }
        let mut counts = vec![0usize; bins];
        for (img, mask) in images {
            if mask.len() != img.len() {
                return Err(Error::data("metrics", "mask size differs from image size"));
            }
            for (&v, _) in img.data.iter().zip(mask.iter()).filter(|(_, &m)| m) {
                counts[bin_of(v, bins)] += 1;
            }
        }
        let count: usize = counts.iter().sum();
        if count == 0 {
            return Err(Error::data("metrics", "empty mask"));
        }
        Ok(Self {
            probs: counts.iter().map(|&c| c as f64 / count as f64).collect(),
            count,
        })
    }

    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn cdf(&self) -> Vec<f64> {
        self.probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }

    /// Number of local maxima (strictly above the left neighbour, at least
    /// the right one).
    pub fn modes(&self) -> usize {
        let p = &self.probs;
        (0..p.len())
            .filter(|&i| {
                let left = if i == 0 { 0.0 } else { p[i - 1] };
                let right = p.get(i + 1).copied().unwrap_or(0.0);
                p[i] > left && p[i] >= right
            })
            .count()
    }

    /// Empty bins strictly between the first and last occupied bin; a
    /// measure of how comb-like the histogram is.
    pub fn interior_gaps(&self) -> usize {
        let first = self.probs.iter().position(|&p| p > 0.0);
        let last = self.probs.iter().rposition(|&p| p > 0.0);
        match (first, last) {
            (Some(a), Some(b)) => self.probs[a..=b].iter().filter(|&&p| p == 0.0).count(),
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistDistance {
    /// Sum of absolute bin differences, in `[0, 2]`.
    pub l1: f64,
    /// 1-D earth mover's distance in intensity units.
    pub wasserstein: f64,
}

/// Panics if the bin counts differ; histograms are always built with a
/// shared bin count by the callers.
pub fn hist_distance(a: &Histogram, b: &Histogram) -> HistDistance {
    assert_eq!(a.bins(), b.bins(), "histograms need equal bin counts");
    let l1 = a.probs.iter().zip(&b.probs).map(|(p, q)| (p - q).abs()).sum();
    let width = 1.0 / a.bins() as f64;
    let wasserstein = a.cdf().iter().zip(b.cdf()).map(|(p, q)| (p - q).abs() * width).sum();
    HistDistance { l1, wasserstein }
}

fn masked_values(img: &Image, mask: &[bool]) -> Vec<f64> {
    img.data.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
}

/// Linear-interpolated quantile of sorted data at `q ∈ [0, 1]`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Classical histogram matching of the masked region of `src` to that of
/// `reference`: every source intensity is sent to the reference quantile at
/// its mid-rank. Pixels outside `src_mask` are unchanged.
pub fn hist_match(src: &Image, src_mask: &[bool], reference: &Image, ref_mask: &[bool]) -> Result<Image> {
    if src_mask.len() != src.len() || ref_mask.len() != reference.len() {
        return Err(Error::data("metrics", "mask size differs from image size"));
    }
    let mut s = masked_values(src, src_mask);
    let mut r = masked_values(reference, ref_mask);
    if s.is_empty() || r.is_empty() {
        return Err(Error::data("metrics", "empty mask"));
    }
    s.sort_by(f64::total_cmp);
    r.sort_by(f64::total_cmp);
    // Distinct source levels with the quantile of their tie group's middle.
    let mut table: Vec<(f64, f64)> = Vec::new();
    let n = s.len();
    let mut lo = 0;
    while lo < n {
        let mut hi = lo;
        while hi < n && s[hi] == s[lo] {
            hi += 1;
        }
        let q = if n == 1 {
            0.5
        } else {
            (lo + hi - 1) as f64 / 2.0 / (n - 1) as f64
        };
        table.push((s[lo], quantile_sorted(&r, q)));
        lo = hi;
    }
    let mut out = src.clone();
    for (v, _) in out.data.iter_mut().zip(src_mask).filter(|(_, &m)| m) {
        let i = table
            .binary_search_by(|(k, _)| k.total_cmp(v))
            .expect("every masked value has a table entry");
        *v = table[i].1;
    }
    Ok(out)
}
