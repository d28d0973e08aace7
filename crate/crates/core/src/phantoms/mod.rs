//! Synthetic multi-site "brain-like" phantoms with ground-truth tissue masks.
//!
//! An anatomy is a set of nested ellipses (CSF rim, gray matter, white matter,
//! two ventricles). A [`SiteStyle`] turns the piecewise-constant base image
//! into a site's rendering through blur, gamma, gain, bias and pixel noise.
//! The same anatomy rendered under several styles is a traveling subject.

mod dataset;
pub mod pgm;

use serde::{Deserialize, Serialize};

pub use dataset::{save_images, Dataset, DatasetManifest, ManifestEntry, Sample, Split};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, Tissue};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Half-widths of the axis-aligned bounding box.
    pub fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt(),
            ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt(),
        )
    }
}

/// Base intensities per tissue class, strictly ordered CSF < GM < WM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueIntensities {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

impl Default for TissueIntensities {
    fn default() -> Self {
        Self {
            csf: 0.25,
            gm: 0.55,
            wm: 0.80,
        }
    }
}

impl TissueIntensities {
    pub fn of(&self, t: Tissue) -> f64 {
        match t {
            Tissue::Background => 0.0,
            Tissue::Csf => self.csf,
            Tissue::Gm => self.gm,
            Tissue::Wm => self.wm,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0 < self.csf && self.csf < self.gm && self.gm < self.wm && self.wm <= 1.0) {
            return Err(Error::config("phantoms", "intensities", "need 0 < csf < gm < wm <= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomAnatomy {
    pub side: usize,
    pub outer: Ellipse,
    pub gm: Ellipse,
    pub wm: Ellipse,
    pub ventricles: Vec<Ellipse>,
    pub intensities: TissueIntensities,
}

impl PhantomAnatomy {
    pub fn tissue_at(&self, x: usize, y: usize) -> Tissue {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if !self.outer.contains(px, py) {
            Tissue::Background
        } else if self.ventricles.iter().any(|v| v.contains(px, py)) {
            Tissue::Csf
        } else if self.wm.contains(px, py) {
            Tissue::Wm
        } else if self.gm.contains(px, py) {
            Tissue::Gm
        } else {
            Tissue::Csf
        }
    }

    pub fn mask(&self) -> LabelMap {
        let s = self.side;
        let labels = (0..s * s).map(|i| self.tissue_at(i % s, i / s).label()).collect();
        LabelMap {
            width: s,
            height: s,
            labels,
        }
    }

    /// Piecewise-constant image of the class base intensities.
    pub fn base_image(&self) -> Image {
        let m = self.mask();
        let data = m
            .labels
            .iter()
            .map(|&l| {
                let t = match l {
                    1 => Tissue::Csf,
                    2 => Tissue::Gm,
                    3 => Tissue::Wm,
                    _ => Tissue::Background,
                };
                self.intensities.of(t)
            })
            .collect();
        Image {
            width: self.side,
            height: self.side,
            data,
        }
    }

    fn fits(&self, margin: f64) -> bool {
        let (hx, hy) = self.outer.half_extent();
        let s = self.side as f64;
        self.outer.cx - hx >= margin
            && self.outer.cx + hx <= s - margin
            && self.outer.cy - hy >= margin
            && self.outer.cy + hy <= s - margin
    }
}

const ANATOMY_RETRIES: usize = 100;

/// Draws a random anatomy whose outer ellipse keeps a 2-pixel margin and
/// whose three tissue classes are all present.
pub fn sample_anatomy(side: usize, intensities: TissueIntensities, rng: &mut RngStream) -> Result<PhantomAnatomy> {
    intensities.validate()?;
    if side < 8 {
        return Err(Error::config("phantoms", "image_side", "must be at least 8"));
    }
    let s = side as f64;
    let c = s / 2.0;
    for _ in 0..ANATOMY_RETRIES {
        let outer = Ellipse {
            cx: c + rng.uniform_in(-0.03, 0.03) * s,
            cy: c + rng.uniform_in(-0.03, 0.03) * s,
            a: rng.uniform_in(0.34, 0.42) * s,
            b: rng.uniform_in(0.28, 0.36) * s,
            theta: rng.uniform_in(-0.3, 0.3),
        };
        let gm = Ellipse {
            cx: outer.cx + rng.uniform_in(-0.01, 0.01) * s,
            cy: outer.cy + rng.uniform_in(-0.01, 0.01) * s,
            a: outer.a * rng.uniform_in(0.78, 0.86),
            b: outer.b * rng.uniform_in(0.78, 0.86),
            theta: outer.theta + rng.uniform_in(-0.1, 0.1),
        };
        let wm = Ellipse {
            cx: gm.cx + rng.uniform_in(-0.01, 0.01) * s,
            cy: gm.cy + rng.uniform_in(-0.01, 0.01) * s,
            a: gm.a * rng.uniform_in(0.55, 0.70),
            b: gm.b * rng.uniform_in(0.55, 0.70),
            theta: gm.theta + rng.uniform_in(-0.15, 0.15),
        };
        let spread = rng.uniform_in(0.07, 0.10) * s;
        let va = rng.uniform_in(0.03, 0.05) * s;
        let vb = rng.uniform_in(0.07, 0.10) * s;
        let tilt = rng.uniform_in(0.1, 0.35);
        let (sn, cs) = wm.theta.sin_cos();
        let ventricles = [-1.0, 1.0]
            .iter()
            .map(|&sgn| Ellipse {
                cx: wm.cx + sgn * spread * cs,
                cy: wm.cy + sgn * spread * sn,
                a: va,
                b: vb,
                theta: wm.theta - sgn * tilt,
            })
            .collect();
        let anatomy = PhantomAnatomy {
            side,
            outer,
            gm,
            wm,
            ventricles,
            intensities,
        };
        let m = anatomy.mask();
        if anatomy.fits(2.0) && Tissue::CLASSES.iter().all(|&t| m.count(t) > 0) {
            return Ok(anatomy);
        }
    }
    Err(Error::data(
        "phantoms",
        format!("no valid anatomy after {ANATOMY_RETRIES} draws"),
    ))
}

/// A site's intensity transform and noise characteristics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteStyle {
    pub site_id: String,
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    /// Gaussian blur radius in pixels; 0 disables blurring.
    pub smoothing: usize,
}

impl SiteStyle {
    pub fn identity(site_id: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            smoothing: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config("phantoms", format!("style.{field}"), reason));
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return bad("gain", "must be positive");
        }
        if !self.bias.is_finite() || self.bias.abs() >= 1.0 {
            return bad("bias", "must lie in (-1, 1)");
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma", "must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be non-negative");
        }
        if self.smoothing > 8 {
            return bad("smoothing", "radius above 8 pixels");
        }
        Ok(())
    }

    /// Noise-free transform of a base intensity.
    pub fn transfer(&self, v: f64) -> f64 {
        (self.gain * v.max(0.0).powf(self.gamma) + self.bias).clamp(0.0, 1.0)
    }

    /// Largest difference between two styles' transfer curves over the
    /// background and tissue intensities.
    pub fn distance(&self, other: &SiteStyle, intensities: &TissueIntensities) -> f64 {
        [0.0, intensities.csf, intensities.gm, intensities.wm]
            .iter()
            .map(|&v| (self.transfer(v) - other.transfer(v)).abs())
            .fold(0.0, f64::max)
    }
}

fn gaussian_blur(img: &Image, radius: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let sigma = radius as f64;
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let off = k as isize - half;
                    let (sx, sy) = if horizontal {
                        ((x + off).clamp(0, w - 1), y)
                    } else {
                        (x, (y + off).clamp(0, h - 1))
                    };
                    acc += kv * src[(sy * w + sx) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    Image {
        width: img.width,
        height: img.height,
        data: pass(&tmp, false),
    }
}

/// `clamp(gain · blur(base)^gamma + bias + N(0, σ²))`.
pub fn render(anatomy: &PhantomAnatomy, style: &SiteStyle, rng: &mut RngStream) -> Result<Image> {
    style.validate()?;
    let mut img = gaussian_blur(&anatomy.base_image(), style.smoothing);
    for v in img.data.iter_mut() {
        let noise = if style.noise_sigma > 0.0 {
            style.noise_sigma * rng.normal()
        } else {
            0.0
        };
        *v = (style.gain * v.max(0.0).powf(style.gamma) + style.bias + noise).clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Sampling bounds for site styles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylePrior {
    pub gain: [f64; 2],
    pub bias: [f64; 2],
    pub gamma: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub blur: [usize; 2],
    /// Minimum pairwise [`SiteStyle::distance`].
    pub min_separation: f64,
}

impl Default for StylePrior {
    fn default() -> Self {
        Self {
            gain: [0.7, 1.3],
            bias: [-0.1, 0.1],
            gamma: [0.6, 1.6],
            noise_sigma: [0.01, 0.05],
            blur: [0, 2],
            min_separation: 0.1,
        }
    }
}

const STYLE_RETRIES: usize = 20_000;

impl StylePrior {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::config(
                    "phantoms",
                    format!("prior.{name}"),
                    "need finite lo <= hi",
                ))
            }
        };
        ordered("gain", self.gain)?;
        ordered("bias", self.bias)?;
        ordered("gamma", self.gamma)?;
        ordered("noise_sigma", self.noise_sigma)?;
        if self.gain[0] <= 0.0 || self.gamma[0] <= 0.0 || self.noise_sigma[0] < 0.0 {
            return Err(Error::config(
                "phantoms",
                "prior",
                "gain and gamma must be positive, noise non-negative",
            ));
        }
        if self.blur[0] > self.blur[1] {
            return Err(Error::config("phantoms", "prior.blur", "need lo <= hi"));
        }
        Ok(())
    }

    fn draw(&self, site_id: String, rng: &mut RngStream) -> SiteStyle {
        SiteStyle {
            site_id,
            gain: rng.uniform_in(self.gain[0], self.gain[1]),
            bias: rng.uniform_in(self.bias[0], self.bias[1]),
            gamma: rng.uniform_in(self.gamma[0], self.gamma[1]),
            noise_sigma: rng.uniform_in(self.noise_sigma[0], self.noise_sigma[1]),
            smoothing: self.blur[0] + rng.below(self.blur[1] - self.blur[0] + 1),
        }
    }

    /// `k` styles with pairwise distance at least `min_separation`.
    pub fn draw_sites(&self, k: usize, intensities: &TissueIntensities, rng: &mut RngStream) -> Result<Vec<SiteStyle>> {
        self.validate()?;
        let mut styles: Vec<SiteStyle> = Vec::with_capacity(k);
        let mut tries = 0;
        while styles.len() < k {
            tries += 1;
            if tries > STYLE_RETRIES {
                return Err(Error::data(
                    "phantoms",
                    format!(
                        "could not place {k} styles with separation {} (placed {})",
                        self.min_separation,
                        styles.len()
                    ),
                ));
            }
            let cand = self.draw(site_name(styles.len()), rng);
            if styles
                .iter()
                .all(|s| s.distance(&cand, intensities) >= self.min_separation)
            {
                styles.push(cand);
            }
        }
        Ok(styles)
    }
}

pub fn site_name(i: usize) -> String {
    format!("site{i:02}")
}

/// Dataset generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_side: usize,
    pub sites: usize,
    pub per_site: usize,
    pub traveling: usize,
    /// Every `val_every`-th unique subject of a site goes to the val split;
    /// traveling subjects are always val.
    pub val_every: usize,
    pub intensities: TissueIntensities,
    pub prior: StylePrior,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            sites: 4,
            per_site: 50,
            traveling: 9,
            val_every: 5,
            intensities: TissueIntensities::default(),
            prior: StylePrior::default(),
        }
    }
}

/// Renders `sites × per_site` images: `traveling` shared anatomies under every
/// style plus `per_site - traveling` unique anatomies per site.
pub fn make_multisite(config: &PhantomConfig, seed: u64) -> Result<Dataset> {
    if config.sites < 2 {
        return Err(Error::config("phantoms", "sites", "need at least 2 sites"));
    }
    if config.per_site < config.traveling {
        return Err(Error::config(
            "phantoms",
            "per_site",
            format!(
                "{} images per site cannot hold {} traveling subjects",
                config.per_site, config.traveling
            ),
        ));
    }
    if config.val_every == 0 {
        return Err(Error::config("phantoms", "val_every", "must be at least 1"));
    }
    config.intensities.validate()?;
    let mut style_rng = RngStream::derive(seed, 0x5354_594c);
    let styles = config
        .prior
        .draw_sites(config.sites, &config.intensities, &mut style_rng)?;

    let anatomy = |stream: u64| -> Result<PhantomAnatomy> {
        let mut rng = RngStream::derive(seed, 0x414e_4154_0000_0000 | stream);
        sample_anatomy(config.image_side, config.intensities, &mut rng)
    };
    let traveling: Vec<PhantomAnatomy> = (0..config.traveling as u64).map(anatomy).collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(config.sites * config.per_site);
    let mut image_index: u64 = 0;
    for (k, style) in styles.iter().enumerate() {
        let mut draw = |anat: &PhantomAnatomy, subject_id: String, split: Split| -> Result<()> {
            let mut rng = RngStream::derive(seed, 0x524e_4452_0000_0000 | image_index);
            image_index += 1;
            let image = render(anat, style, &mut rng)?.quantized();
            samples.push(Sample {
                site_id: style.site_id.clone(),
                subject_id,
                image,
                mask: anat.mask(),
                split,
            });
            Ok(())
        };
        for (j, anat) in traveling.iter().enumerate() {
            draw(anat, format!("trav{j:02}"), Split::Val)?;
        }
        for j in 0..config.per_site - config.traveling {
            let stream = 0x1_0000 + (k as u64) * 0x1_0000 + j as u64;
            let anat = anatomy(stream)?;
            let split = if j % config.val_every == config.val_every - 1 {
                Split::Val
            } else {
                Split::Train
            };
            draw(&anat, format!("{}_s{j:03}", style.site_id), split)?;
        }
    }
    Ok(Dataset { samples, styles })
}
