use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pgm;
use super::SiteStyle;
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub site_id: String,
    pub subject_id: String,
    pub image: Image,
    pub mask: LabelMap,
    pub split: Split,
}

/// One row of `manifest.csv`; paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub site_id: String,
    pub subject_id: String,
    pub mask_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const STYLES_FILE: &str = "styles.json";

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let expected = ["path", "site_id", "subject_id", "mask_path", "split"];
        let headers = rdr.headers().map_err(|e| Error::format(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::format(
                path,
                format!("manifest header must be `{}`", expected.join(",")),
            ));
        }
        let entries = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::format(path, e))?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Traveling subjects must share one mask file across sites.
    pub fn check_shared_masks(&self) -> Result<()> {
        let mut by_subject: BTreeMap<&str, &str> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = by_subject.insert(&e.subject_id, &e.mask_path) {
                if prev != e.mask_path {
                    return Err(Error::data(
                        "phantoms",
                        format!("subject {} has masks {prev} and {}", e.subject_id, e.mask_path),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// An in-memory image set with labels and masks.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Generating styles, when known.
    pub styles: Vec<SiteStyle>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Site ids in first-appearance order.
    pub fn site_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.site_id) {
                out.push(s.site_id.clone());
            }
        }
        out
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            styles: self.styles.clone(),
        }
    }

    pub fn site(&self, site_id: &str) -> Dataset {
        self.filter(|s| s.site_id == site_id)
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.filter(|s| s.split == split)
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    /// Images as rows of a `[n, pixels]` tensor.
    pub fn image_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::stack_rows(
            &self.samples.iter().map(|s| s.image.data.as_slice()).collect::<Vec<_>>(),
        )?)
    }

    /// Replaces every image, keeping labels, masks and order.
    pub fn with_images(&self, images: Vec<Image>) -> Result<Dataset> {
        if images.len() != self.samples.len() {
            return Err(Error::data(
                "phantoms",
                format!("{} images for {} samples", images.len(), self.samples.len()),
            ));
        }
        Ok(Dataset {
            samples: self
                .samples
                .iter()
                .zip(images)
                .map(|(s, image)| Sample { image, ..s.clone() })
                .collect(),
            styles: self.styles.clone(),
        })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    path: format!("images/{}/{}.pgm", s.site_id, s.subject_id),
                    site_id: s.site_id.clone(),
                    subject_id: s.subject_id.clone(),
                    mask_path: format!("masks/{}.pgm", s.subject_id),
                    split: s.split,
                })
                .collect(),
        }
    }

    /// Writes images, masks, `manifest.csv` and (if known) `styles.json`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let mut written_masks = std::collections::BTreeSet::new();
        for (s, e) in self.samples.iter().zip(&manifest.entries) {
            pgm::save_image(&dir.join(&e.path), &s.image)?;
            if written_masks.insert(e.mask_path.clone()) {
                pgm::save_mask(&dir.join(&e.mask_path), &s.mask)?;
            }
        }
        manifest.write(&dir.join(MANIFEST_FILE))?;
        if !self.styles.is_empty() {
            let path = dir.join(STYLES_FILE);
            let json = serde_json::to_string_pretty(&self.styles).map_err(|e| Error::format(&path, e))?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        Ok(manifest)
    }

    /// Loads a directory holding `manifest.csv`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
        manifest.check_shared_masks()?;
        let mut masks: BTreeMap<String, LabelMap> = BTreeMap::new();
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let image = pgm::load_image(&dir.join(&e.path))?;
            let mask = match masks.get(&e.mask_path) {
                Some(m) => m.clone(),
                None => {
                    let m = pgm::load_mask(&dir.join(&e.mask_path))?;
                    masks.insert(e.mask_path.clone(), m.clone());
                    m
                }
            };
            if mask.width != image.width || mask.height != image.height {
                return Err(Error::format(dir.join(&e.path), "image and mask sizes differ"));
            }
            samples.push(Sample {
                site_id: e.site_id,
                subject_id: e.subject_id,
                image,
                mask,
                split: e.split,
            });
        }
        let styles_path = dir.join(STYLES_FILE);
        let styles = if styles_path.exists() {
            let text = std::fs::read_to_string(&styles_path).map_err(|e| Error::io(&styles_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(&styles_path, e))?
        } else {
            Vec::new()
        };
        Ok(Dataset { samples, styles })
    }
}

/// Writes each image as `<dir>/<stem>.pgm`, returning the paths.
pub fn save_images(dir: &Path, items: &[(String, Image)]) -> Result<Vec<PathBuf>> {
    items
        .iter()
        .map(|(stem, img)| {
            let p = dir.join(format!("{stem}.pgm"));
            pgm::save_image(&p, img)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{make_multisite, PhantomConfig};
    use super::*;

    #[test]
    fn save_load_roundtrip_is_exact_for_quantized_data() {
        let cfg = PhantomConfig {
            image_side: 16,
            sites: 3,
            per_site: 4,
            traveling: 2,
            ..PhantomConfig::default()
        };
        let ds = make_multisite(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.save(dir.path()).unwrap();
        manifest.check_shared_masks().unwrap();
        let header = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(header.starts_with("path,site_id,subject_id,mask_path,split\n"));
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let masks = std::fs::read_dir(dir.path().join("masks")).unwrap().count();
        assert_eq!(masks, 2 + 3 * 2);
    }

    #[test]
    fn conflicting_traveling_masks_are_rejected() {
        let e = |site: &str, mask: &str| ManifestEntry {
            path: format!("{site}.pgm"),
            site_id: site.into(),
            subject_id: "trav00".into(),
            mask_path: mask.into(),
            split: Split::Val,
        };
        let m = DatasetManifest {
            entries: vec![e("a", "m0.pgm"), e("b", "m1.pgm")],
        };
        assert!(m.check_shared_masks().is_err());
    }
}
