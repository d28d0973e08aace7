//! Choosing a target site by how homogeneous its images already are.

use serde::Serialize;

use super::quality::psnr;
use crate::error::{Error, Result};
use crate::phantoms::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteRank {
    pub site_id: String,
    /// Mean PSNR over all image pairs within the site, on the union of the
    /// pair's foreground masks.
    pub mean_psnr: f64,
    pub pairs: usize,
}

/// Sites ordered by decreasing intra-site PSNR (ties by site id).
pub fn rank_target_sites(data: &Dataset) -> Result<Vec<SiteRank>> {
    let mut out = Vec::new();
    for site in data.site_ids() {
        let s = data.site(&site);
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..s.samples.len() {
            for j in 0..i {
                let (a, b) = (&s.samples[i], &s.samples[j]);
                let mask: Vec<bool> = a
                    .mask
                    .labels
                    .iter()
                    .zip(&b.mask.labels)
                    .map(|(&p, &q)| p != 0 || q != 0)
                    .collect();
                total += psnr(&a.image, &b.image, &mask)?;
                pairs += 1;
            }
        }
        if pairs == 0 {
            return Err(Error::data("metrics", format!("site {site} has fewer than two images")));
        }
        out.push(SiteRank {
            site_id: site,
            mean_psnr: total / pairs as f64,
            pairs,
        });
    }
    out.sort_by(|a, b| {
        b.mean_psnr
            .total_cmp(&a.mean_psnr)
            .then_with(|| a.site_id.cmp(&b.site_id))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PSNR_CAP_DB;
    use crate::numerics::RngStream;
    use crate::phantoms::{render, sample_anatomy, Sample, SiteStyle, Split, TissueIntensities};

    #[test]
    fn noiseless_single_anatomy_site_ranks_first() {
        let ints = TissueIntensities::default();
        let a = sample_anatomy(32, ints, &mut RngStream::new(1)).unwrap();
        let mut samples = Vec::new();
        let clean = SiteStyle::identity("clean");
        let noisy = SiteStyle {
            noise_sigma: 0.05,
            ..SiteStyle::identity("noisy")
        };
        let mut rng = RngStream::new(2);
        for (style, n) in [(&noisy, 3), (&clean, 3)] {
            for k in 0..n {
                samples.push(Sample {
                    site_id: style.site_id.clone(),
                    subject_id: format!("s{k}"),
                    image: render(&a, style, &mut rng).unwrap(),
                    mask: a.mask(),
                    split: Split::Train,
                });
            }
        }
        let ranks = rank_target_sites(&Dataset {
            samples,
            styles: vec![],
        })
        .unwrap();
        assert_eq!(ranks[0].site_id, "clean");
        assert_eq!(ranks[0].mean_psnr, PSNR_CAP_DB);
        assert_eq!(ranks[0].pairs, 3);
        assert!(ranks[1].mean_psnr < 40.0);
    }
}
