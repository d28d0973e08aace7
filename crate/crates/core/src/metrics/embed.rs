//! Two-dimensional PCA embedding and a cluster-separation statistic.

use crate::error::{Error, Result};

const POWER_ITERS: usize = 1000;

/// Projects rows onto their top two principal axes. Each axis is signed so
/// that its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::data("metrics", "embedding needs at least two rows"));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::data(
            "metrics",
            "embedding rows must share a dimension of at least 2",
        ));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / n as f64;
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    for a in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i + a) % 7) as f64).collect();
        for _ in 0..POWER_ITERS {
            let mut w = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    w[i] += cov[i * d + j] * v[j];
                }
            }
            for prev in &axes {
                let dot: f64 = w.iter().zip(prev).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(prev).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = w.iter().zip(&v).map(|(x, y)| (x - y).abs()).sum();
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        let big = v
            .iter()
            .copied()
            .fold(0.0, |b: f64, x| if x.abs() > b.abs() { x } else { b });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    Ok(centered
        .iter()
        .map(|r| {
            let p = |ax: &Vec<f64>| r.iter().zip(ax).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

/// Trace of the between-group scatter over the trace of the within-group
/// scatter; larger means better separated groups.
pub fn scatter_ratio(points: &[[f64; 2]], groups: &[usize]) -> Result<f64> {
    if points.len() != groups.len() || points.is_empty() {
        return Err(Error::data("metrics", "need one group per point"));
    }
    let k = groups.iter().max().unwrap() + 1;
    let mut sums = vec![[0.0; 2]; k];
    let mut counts = vec![0usize; k];
    let mut total = [0.0; 2];
    for (p, &g) in points.iter().zip(groups) {
        sums[g][0] += p[0];
        sums[g][1] += p[1];
        counts[g] += 1;
        total[0] += p[0];
        total[1] += p[1];
    }
    let n = points.len() as f64;
    let grand = [total[0] / n, total[1] / n];
    let centers: Vec<[f64; 2]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            if c > 0 {
                [s[0] / c as f64, s[1] / c as f64]
            } else {
                grand
            }
        })
        .collect();
    let between: f64 = centers
        .iter()
        .zip(&counts)
        .map(|(c, &m)| m as f64 * ((c[0] - grand[0]).powi(2) + (c[1] - grand[1]).powi(2)))
        .sum();
    let within: f64 = points
        .iter()
        .zip(groups)
        .map(|(p, &g)| (p[0] - centers[g][0]).powi(2) + (p[1] - centers[g][1]).powi(2))
        .sum();
    Ok(if within == 0.0 { f64::INFINITY } else { between / within })
}
