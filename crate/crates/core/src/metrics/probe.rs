//! Site-classification probe: multinomial logistic regression on block-pooled
//! image features, with macro-averaged classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{AdamConfig, AdamState, Tensor};

/// Mean intensity over a `grid × grid` tiling of the image.
pub fn pooled_features(img: &Image, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 || img.width < grid || img.height < grid {
        return Err(Error::config("metrics", "probe.grid", "grid larger than the image"));
    }
    let mut out = vec![0.0; grid * grid];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..img.height {
        let gy = y * grid / img.height;
        for x in 0..img.width {
            let gx = x * grid / img.width;
            out[gy * grid + gx] += img.get(x, y);
            counts[gy * grid + gx] += 1;
        }
    }
    for (v, c) in out.iter_mut().zip(counts) {
        *v /= c as f64;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub grid: usize,
    pub iters: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            iters: 400,
            lr: 0.05,
            l2: 1e-3,
        }
    }
}

/// Fitted probe; features are standardized with training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[dims, classes]`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

fn softmax_rows(logits: &mut [f64], k: usize) {
    for row in logits.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

impl Probe {
    /// Full-batch Adam on L2-regularized cross-entropy from zero weights, so
    /// the fit has no random component.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, config: &ProbeConfig) -> Result<Probe> {
        let n = features.len();
        if n == 0 || labels.len() != n {
            return Err(Error::data("metrics", "probe needs one label per feature row"));
        }
        if classes < 2 || labels.iter().any(|&l| l >= classes) {
            return Err(Error::data(
                "metrics",
                "probe labels must lie in 0..classes with classes >= 2",
            ));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::data("metrics", "ragged probe features"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for f in features {
            for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let scale: Vec<f64> = scale
            .iter()
            .map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut probe = Probe {
            classes,
            mean,
            scale,
            weights: vec![0.0; d * classes],
            bias: vec![0.0; classes],
        };
        let x: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        let mut w = Tensor::zeros([d, classes]);
        let mut b = Tensor::zeros([classes]);
        let mut opt = AdamState::new(AdamConfig::with_lr(config.lr), [&w, &b]);
        for _ in 0..config.iters {
            probe.weights.copy_from_slice(w.data());
            probe.bias.copy_from_slice(b.data());
            let mut p = probe.logits(&x);
            softmax_rows(&mut p, classes);
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for (i, xi) in x.iter().enumerate() {
                for c in 0..classes {
                    let r = (p[i * classes + c] - (labels[i] == c) as u8 as f64) / n as f64;
                    gb[c] += r;
                    for (j, xv) in xi.iter().enumerate() {
                        gw[j * classes + c] += r * xv;
                    }
                }
            }
            for (g, wv) in gw.iter_mut().zip(w.data()) {
                *g += config.l2 * wv;
            }
            opt.step(
                &mut [&mut w, &mut b],
                &[Tensor::new([d, classes], gw)?, Tensor::vector(gb)],
            )?;
        }
        probe.weights.copy_from_slice(w.data());
        probe.bias.copy_from_slice(b.data());
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits(&self, x: &[Vec<f64>]) -> Vec<f64> {
        let k = self.classes;
        let mut out = Vec::with_capacity(x.len() * k);
        for xi in x {
            for c in 0..k {
                let mut z = self.bias[c];
                for (j, xv) in xi.iter().enumerate() {
                    z += xv * self.weights[j * k + c];
                }
                out.push(z);
            }
        }
        out
    }

    /// Class probabilities, one row per feature vector.
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let x: Vec<Vec<f64>> = features.iter().map(|f| self.standardize(f)).collect();
        let mut p = self.logits(&x);
        softmax_rows(&mut p, self.classes);
        p.chunks(self.classes).map(|r| r.to_vec()).collect()
    }
}

/// Macro-averaged scores; classes absent from the evaluation labels are
/// left out of the averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub bacc: f64,
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub sen: f64,
}

/// Mann–Whitney estimate with ties counted as one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += idx[i..j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j;
    }
    let np = positive.iter().filter(|&&p| p).count() as f64;
    let nn = positive.len() as f64 - np;
    if np == 0.0 || nn == 0.0 {
        return None;
    }
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn probe_scores(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<ProbeScores> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::data("metrics", "need one probability row per label"));
    }
    let pred: Vec<usize> = probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, &v)| if v > best.1 { (c, v) } else { best },
                )
                .0
        })
        .collect();
    let acc = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    let (mut recall, mut f1, mut auc) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..classes {
        let tp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let support = labels.iter().filter(|&&l| l == c).count() as f64;
        if support == 0.0 {
            continue;
        }
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        recall.push(tp / support);
        f1.push(if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (support + predicted)
        });
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = binary_auc(&scores, &pos) {
            auc.push(a);
        }
    }
    let avg = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let bacc = avg(&recall);
    Ok(ProbeScores {
        bacc,
        acc,
        auc: avg(&auc),
        f1: avg(&f1),
        sen: bacc,
    })
}

/// Fits on the training rows and scores the evaluation rows.
pub fn probe_train_eval(
    train: (&[Vec<f64>], &[usize]),
    eval: (&[Vec<f64>], &[usize]),
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeScores> {
    let probe = Probe::fit(train.0, train.1, classes, config)?;
    probe_scores(&probe.predict_proba(eval.0), eval.1, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn blobs(n_per: usize, k: usize, sep: f64, rng: &mut RngStream) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..k {
            for _ in 0..n_per {
                let mut f: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
                f[c % 6] += sep;
                x.push(f);
                y.push(c);
            }
        }
        (x, y)
    }

    #[test]
    fn auc_matches_pair_counting() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4];
        let p = [false, false, true, true, true];
        // Pairs (pos, neg): 0.35>0.1, 0.35<0.4, 0.8>both, 0.4>0.1, 0.4=0.4.
        let expected = (1.0 + 0.0 + 2.0 + 1.0 + 0.5) / 6.0;
        assert!((binary_auc(&s, &p).unwrap() - expected).abs() < 1e-12);
        assert!(binary_auc(&s, &[true; 5]).is_none());
    }

    #[test]
    fn separable_classes_are_learned() {
        let mut rng = RngStream::new(1);
        let (x, y) = blobs(40, 4, 4.0, &mut rng);
        let (xt, yt) = blobs(20, 4, 4.0, &mut rng);
        let s = probe_train_eval((&x, &y), (&xt, &yt), 4, &ProbeConfig::default()).unwrap();
        assert!(s.bacc > 0.9 && s.auc > 0.95, "{s:?}");
        assert_eq!(s.bacc, s.sen);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = RngStream::new(2);
        let (x, y) = blobs(60, 4, 3.0, &mut rng);
        let (xt, yt) = blobs(60, 4, 3.0, &mut rng);
        let perm = rng.permutation(y.len());
        let shuffled: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let s = probe_train_eval((&x, &shuffled), (&xt, &yt), 4, &ProbeConfig::default()).unwrap();
        assert!((s.bacc - 0.25).abs() <= 0.1, "{s:?}");
    }

    #[test]
    fn fit_is_order_invariant() {
        let mut rng = RngStream::new(3);
        let (x, y) = blobs(30, 3, 2.0, &mut rng);
        let perm = rng.permutation(y.len());
        let xs: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let cfg = ProbeConfig::default();
        let a = Probe::fit(&x, &y, 3, &cfg).unwrap().predict_proba(&x);
        let b = Probe::fit(&xs, &ys, 3, &cfg).unwrap().predict_proba(&x);
        for (ra, rb) in a.iter().zip(&b) {
            for (p, q) in ra.iter().zip(rb) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pooling_averages_blocks() {
        let img = Image::new(4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        assert_eq!(pooled_features(&img, 2).unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        assert!(pooled_features(&img, 5).is_err());
    }
}
