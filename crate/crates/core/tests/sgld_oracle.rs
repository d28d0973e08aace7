//! Langevin sampling against analytic mixture moments.

use lest::numerics::{RngStream, Tensor};
use lest::sst::{sgld_forward, sgld_inverse, Chain, GaussianMixture, Quadratic};

fn mixture() -> GaussianMixture {
    GaussianMixture {
        weights: vec![0.3, 0.7],
        means: vec![[1.0, 1.0], [3.0, 2.5]],
        sigmas: vec![0.8, 0.8],
    }
}

/// Sample mean and row-major covariance of the rows of `z`.
fn moments(z: &Tensor) -> ([f64; 2], [f64; 4]) {
    let n = z.rows() as f64;
    let mut m = [0.0; 2];
    for i in 0..z.rows() {
        m[0] += z.row(i)[0] / n;
        m[1] += z.row(i)[1] / n;
    }
    let mut c = [0.0; 4];
    for i in 0..z.rows() {
        let d = [z.row(i)[0] - m[0], z.row(i)[1] - m[1]];
        c[0] += d[0] * d[0] / (n - 1.0);
        c[1] += d[0] * d[1] / (n - 1.0);
        c[2] += d[1] * d[0] / (n - 1.0);
        c[3] += d[1] * d[1] / (n - 1.0);
    }
    (m, c)
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

#[test]
fn mixture_moments_after_five_thousand_steps() {
    let target = mixture();
    let chains = 16000;
    let z0 = Tensor::zeros([chains, 2]);
    let mut rng = RngStream::new(2024);
    let z = sgld_forward(&target, &z0, &Chain::new(5000, 0.02), Some(&mut rng)).unwrap();
    let (m, c) = moments(&z);
    let (want_m, want_c) = (target.mean(), target.covariance());
    eprintln!("mean {m:?} vs {want_m:?}\ncov {c:?} vs {want_c:?}");
    for d in 0..2 {
        assert!(rel(m[d], want_m[d]) <= 0.05, "mean[{d}] {} vs {}", m[d], want_m[d]);
    }
    for k in 0..4 {
        assert!(rel(c[k], want_c[k]) <= 0.05, "cov[{k}] {} vs {}", c[k], want_c[k]);
    }
}

#[test]
fn analytic_mixture_moments_by_hand() {
    let t = mixture();
    // 0.3·(1, 1) + 0.7·(3, 2.5)
    assert!((t.mean()[0] - 2.4).abs() < 1e-15);
    assert!((t.mean()[1] - 2.05).abs() < 1e-15);
    // σ²I + w(1−w)·ddᵀ with d = (2, 1.5)
    let c = t.covariance();
    assert!((c[0] - (0.64 + 0.21 * 4.0)).abs() < 1e-12);
    assert!((c[1] - 0.21 * 3.0).abs() < 1e-12);
    assert!((c[3] - (0.64 + 0.21 * 2.25)).abs() < 1e-12);
}

#[test]
fn noiseless_quadratic_chain_is_geometric() {
    let mut rng = RngStream::new(3);
    let z0 = Tensor::randn([6, 4], &mut rng);
    for (steps, eta) in [(1, 0.1), (10, 0.25), (50, 1.0)] {
        let chain = Chain::new(steps, eta);
        let f = sgld_forward(&Quadratic, &z0, &chain, None).unwrap();
        let i = sgld_inverse(&Quadratic, &z0, &chain, None).unwrap();
        let shrink = (1.0 - eta / 2.0f64).powi(steps as i32);
        let grow = (1.0 + eta / 2.0f64).powi(steps as i32);
        for k in 0..z0.len() {
            let v = z0.data()[k];
            assert!((f.data()[k] - shrink * v).abs() <= 1e-14 * v.abs().max(1.0));
            assert!((i.data()[k] - grow * v).abs() <= 1e-12 * (grow * v).abs().max(1.0));
        }
    }
}
