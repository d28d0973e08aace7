//! Unsupervised three-class tissue segmentation and overlap scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, Tissue};

const KMEANS_MAX_ITERS: usize = 200;

/// Three ordered intensity centers: CSF < GM < WM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueCenters(pub [f64; 3]);

impl TissueCenters {
    /// Lloyd's algorithm on 1-D values, started at the 0.25/0.5/0.75
    /// quantiles. Fails when the result does not have three strictly
    /// increasing, non-empty clusters.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::data("metrics", "k-means needs at least three values"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        let mut c = [q(0.25), q(0.5), q(0.75)];
        for _ in 0..KMEANS_MAX_ITERS {
            let mut sum = [0.0; 3];
            let mut n = [0usize; 3];
            for &v in &sorted {
                let k = nearest(&c, v);
                sum[k] += v;
                n[k] += 1;
            }
            let mut next = c;
            for k in 0..3 {
                if n[k] > 0 {
                    next[k] = sum[k] / n[k] as f64;
                } else {
                    // Reseed an empty cluster at the worst-fitting value.
                    next[k] = sorted
                        .iter()
                        .copied()
                        .max_by(|a, b| {
                            let da = (a - next[nearest(&next, *a)]).abs();
                            let db = (b - next[nearest(&next, *b)]).abs();
                            da.total_cmp(&db)
                        })
                        .expect("non-empty");
                }
            }
            if next == c {
                break;
            }
            c = next;
        }
        c.sort_by(f64::total_cmp);
        let mut n = [0usize; 3];
        for &v in &sorted {
            n[nearest(&c, v)] += 1;
        }
        if n.contains(&0) {
            return Err(Error::data(
                "metrics",
                format!("degenerate k-means centers {c:?}; image has fewer than three intensity levels"),
            ));
        }
        Ok(Self(c))
    }

    pub fn assign(&self, v: f64) -> Tissue {
        Tissue::CLASSES[nearest(&self.0, v)]
    }

    /// Labels masked pixels by nearest center; background elsewhere.
    pub fn segment(&self, img: &Image, mask: &[bool]) -> Result<LabelMap> {
        if mask.len() != img.len() {
            return Err(Error::data("metrics", "mask size differs from image size"));
        }
        let labels = img
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { self.assign(v).label() } else { 0 })
            .collect();
        LabelMap::new(img.width, img.height, labels)
    }
}

fn nearest(c: &[f64; 3], v: f64) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if (v - c[k]).abs() < (v - c[best]).abs() {
            best = k;
        }
    }
    best
}

fn masked(img: &Image, mask: &[bool]) -> Vec<f64> {
    img.data.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
}

/// Per-image k-means segmentation with ordered labels.
pub fn cluster_segment(img: &Image, mask: &[bool]) -> Result<LabelMap> {
    if mask.len() != img.len() {
        return Err(Error::data("metrics", "mask size differs from image size"));
    }
    TissueCenters::fit(&masked(img, mask))?.segment(img, mask)
}

/// Centers fitted on pooled foreground intensities of one site's images,
/// then applied unchanged to images from any site. The score of a source
/// image under these centers measures how well it matches the target
/// site's intensity scale.
pub fn fit_site_segmenter(images: &[(&Image, &[bool])]) -> Result<TissueCenters> {
    let pooled: Vec<f64> = images.iter().flat_map(|(img, m)| masked(img, m)).collect();
    TissueCenters::fit(&pooled)
}

fn overlap(seg: &LabelMap, truth: &LabelMap, class: Tissue) -> Result<(usize, usize, usize)> {
    if seg.width != truth.width || seg.height != truth.height {
        return Err(Error::data("metrics", "label maps differ in size"));
    }
    let l = class.label();
    let (mut both, mut a, mut b) = (0, 0, 0);
    for (&s, &t) in seg.labels.iter().zip(&truth.labels) {
        both += (s == l && t == l) as usize;
        a += (s == l) as usize;
        b += (t == l) as usize;
    }
    Ok((both, a, b))
}

/// `2|A∩B| / (|A| + |B|)`, defined as 1 when both are empty.
pub fn dice(seg: &LabelMap, truth: &LabelMap, class: Tissue) -> Result<f64> {
    let (both, a, b) = overlap(seg, truth, class)?;
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// `|A∩B| / |A∪B|`, defined as 1 when both are empty.
pub fn jaccard(seg: &LabelMap, truth: &LabelMap, class: Tissue) -> Result<f64> {
    let (both, a, b) = overlap(seg, truth, class)?;
    let union = a + b - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassScores {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

impl ClassScores {
    pub fn mean(&self) -> f64 {
        (self.csf + self.gm + self.wm) / 3.0
    }

    pub fn get(&self, t: Tissue) -> f64 {
        match t {
            Tissue::Csf => self.csf,
            Tissue::Gm => self.gm,
            Tissue::Wm => self.wm,
            Tissue::Background => f64::NAN,
        }
    }

    fn set(&mut self, t: Tissue, v: f64) {
        match t {
            Tissue::Csf => self.csf = v,
            Tissue::Gm => self.gm = v,
            Tissue::Wm => self.wm = v,
            Tissue::Background => {}
        }
    }
}

pub fn dice_scores(seg: &LabelMap, truth: &LabelMap) -> Result<ClassScores> {
    let mut s = ClassScores::default();
    for t in Tissue::CLASSES {
        s.set(t, dice(seg, truth, t)?);
    }
    Ok(s)
}

pub fn jaccard_scores(seg: &LabelMap, truth: &LabelMap) -> Result<ClassScores> {
    let mut s = ClassScores::default();
    for t in Tissue::CLASSES {
        s.set(t, jaccard(seg, truth, t)?);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::phantoms::{render, sample_anatomy, SiteStyle, TissueIntensities};
    use proptest::prelude::*;

    #[test]
    fn clean_phantom_segments_perfectly() {
        let a = sample_anatomy(64, TissueIntensities::default(), &mut RngStream::new(2)).unwrap();
        let truth = a.mask();
        let img = render(&a, &SiteStyle::identity("x"), &mut RngStream::new(0)).unwrap();
        let seg = cluster_segment(&img, &truth.foreground()).unwrap();
        assert_eq!(seg, truth);
        let d = dice_scores(&seg, &truth).unwrap();
        assert_eq!(d.mean(), 1.0);
    }

    #[test]
    fn centers_are_ordered_even_under_strong_gamma() {
        let a = sample_anatomy(64, TissueIntensities::default(), &mut RngStream::new(3)).unwrap();
        let style = SiteStyle {
            gamma: 1.6,
            gain: 0.7,
            noise_sigma: 0.01,
            ..SiteStyle::identity("g")
        };
        let img = render(&a, &style, &mut RngStream::new(1)).unwrap();
        let fg = a.mask().foreground();
        let c = TissueCenters::fit(&masked(&img, &fg)).unwrap();
        assert!(c.0[0] < c.0[1] && c.0[1] < c.0[2]);
        let d = dice_scores(&cluster_segment(&img, &fg).unwrap(), &a.mask()).unwrap();
        assert!(d.mean() > 0.95, "{d:?}");
    }

    #[test]
    fn two_level_image_is_degenerate() {
        let mut img = Image::filled(4, 0.2);
        img.data[..8].iter_mut().for_each(|v| *v = 0.8);
        assert!(cluster_segment(&img, &[true; 16]).is_err());
    }

    #[test]
    fn site_segmenter_penalizes_shifted_scale() {
        let ints = TissueIntensities::default();
        let a = sample_anatomy(64, ints, &mut RngStream::new(8)).unwrap();
        let b = sample_anatomy(64, ints, &mut RngStream::new(9)).unwrap();
        let target = SiteStyle {
            noise_sigma: 0.02,
            ..SiteStyle::identity("t")
        };
        let t_img = render(&a, &target, &mut RngStream::new(1)).unwrap();
        let fa = a.mask().foreground();
        let c = fit_site_segmenter(&[(&t_img, &fa)]).unwrap();
        let fb = b.mask().foreground();
        let same = render(&b, &target, &mut RngStream::new(2)).unwrap();
        let shifted = same.map(|v| (v + 0.3).min(1.0));
        let d_same = dice_scores(&c.segment(&same, &fb).unwrap(), &b.mask()).unwrap().mean();
        let d_shift = dice_scores(&c.segment(&shifted, &fb).unwrap(), &b.mask())
            .unwrap()
            .mean();
        assert!(d_same > 0.95 && d_shift < d_same - 0.2, "{d_same} {d_shift}");
    }

    #[test]
    fn empty_classes_score_one() {
        let z = LabelMap::new(2, 2, vec![0; 4]).unwrap();
        assert_eq!(dice(&z, &z, Tissue::Wm).unwrap(), 1.0);
        assert_eq!(jaccard(&z, &z, Tissue::Wm).unwrap(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn dice_jaccard_relation(
            a in proptest::collection::vec(0u8..4, 49),
            b in proptest::collection::vec(0u8..4, 49),
        ) {
            let (a, b) = (LabelMap::new(7, 7, a).unwrap(), LabelMap::new(7, 7, b).unwrap());
            for t in Tissue::CLASSES {
                let d = dice(&a, &b, t).unwrap();
                let j = jaccard(&a, &b, t).unwrap();
                prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
                prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
                prop_assert_eq!(d, dice(&b, &a, t).unwrap());
                prop_assert_eq!(dice(&a, &a, t).unwrap(), 1.0);
            }
        }
    }
}
