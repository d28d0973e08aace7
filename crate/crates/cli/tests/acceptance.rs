//! Acceptance criteria 1 to 10, one test each. Every test writes one
//! `criterion N PASS|FAIL: ...` line to stderr (past the harness capture)
//! and then asserts.
//!
//! Criteria 4 to 9 train full-size models and take about forty minutes
//! together on one core, so they are ignored by default:
//!
//! ```text
//! cargo test -p lest-cli --test acceptance -- --include-ignored --test-threads=1
//! ```

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use common::{lest, ok, p, read_json, smoke, smoke_artifacts};
use lest::image::Image;
use lest::metrics::{cluster_segment, dice_scores};
use lest::nets::{init_networks, NetworkSpec};
use lest::numerics::{backward, Graph, RngStream, Tensor};
use lest::phantoms::{make_multisite, PhantomConfig, Split};
use lest::sig::{self, loss_adv_ed, SigConfig};
use lest::sst::{
    chain_noise, ebm_grad, loss_con, loss_cyc, sgld_chain, sgld_forward, sgld_inverse, sst_objective, Chain, Direction,
    EbmConfig, GaussianMixture, Quadratic,
};

/// Prints the verdict line and fails the test when `passed` is false.
fn verdict(n: u32, passed: bool, detail: impl AsRef<str>) {
    let line = format!(
        "criterion {n} {}: {}\n",
        if passed { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {n}: {}", detail.as_ref());
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn criterion_01_gradient_checks() {
    let start = Instant::now();
    let outcomes = lest::selfcheck::gradient_suite(100, 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.as_str())
        .collect();
    let nets = outcomes.iter().filter(|o| o.name.starts_with("net.")).count();
    let worst = outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    verdict(
        1,
        failed.is_empty() && nets == 5 && secs < 60.0,
        format!(
            "{} cases ({nets} networks) x 100 trials, worst rel err {worst:.2e}, {secs:.1}s; failing {failed:?}",
            outcomes.len()
        ),
    );
}

/// Sample mean and row-major covariance of a `[n, 2]` tensor.
fn moments(z: &Tensor) -> ([f64; 2], [f64; 4]) {
    let n = z.rows() as f64;
    let m = [
        mean((0..z.rows()).map(|i| z.row(i)[0])),
        mean((0..z.rows()).map(|i| z.row(i)[1])),
    ];
    let mut c = [0.0; 4];
    for i in 0..z.rows() {
        let d = [z.row(i)[0] - m[0], z.row(i)[1] - m[1]];
        for (k, v) in c.iter_mut().enumerate() {
            *v += d[k / 2] * d[k % 2] / (n - 1.0);
        }
    }
    (m, c)
}

#[test]
fn criterion_02_sgld_oracle() {
    let target = GaussianMixture {
        weights: vec![0.3, 0.7],
        means: vec![[1.0, 1.0], [3.0, 2.5]],
        sigmas: vec![0.8, 0.8],
    };
    let mut rng = RngStream::new(2024);
    let z = sgld_forward(
        &target,
        &Tensor::zeros([16000, 2]),
        &Chain::new(5000, 0.02),
        Some(&mut rng),
    )
    .unwrap();
    let (m, c) = moments(&z);
    let (want_m, want_c) = (target.mean(), target.covariance());
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let worst_mean = (0..2).map(|d| rel(m[d], want_m[d])).fold(0.0, f64::max);
    let worst_cov = (0..4).map(|k| rel(c[k], want_c[k])).fold(0.0, f64::max);

    let z0 = Tensor::randn([5, 3], &mut rng);
    let eta = 0.3;
    let one = Chain::new(1, eta);
    let fwd = sgld_forward(&Quadratic, &z0, &one, None).unwrap();
    let inv = sgld_inverse(&Quadratic, &z0, &one, None).unwrap();
    // The update computes z − (η/2)·z, which may round differently from
    // (1 − η/2)·z in the last place.
    let closed = |got: &Tensor, k: f64| {
        got.data()
            .iter()
            .zip(z0.data())
            .map(|(g, v)| (g - k * v).abs() / v.abs().max(1.0))
            .fold(0.0, f64::max)
    };
    let step_err = closed(&fwd, 1.0 - eta / 2.0).max(closed(&inv, 1.0 + eta / 2.0));
    verdict(
        2,
        worst_mean <= 0.05 && worst_cov <= 0.05 && step_err <= 1e-15,
        format!(
            "mixture after 5000 steps: mean rel err {worst_mean:.4}, cov rel err {worst_cov:.4}; \
             quadratic step err {step_err:.1e}"
        ),
    );
}

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        image_side: 8,
        latent_dim: 4,
        f_layers: 2,
        d_layers: 2,
        coder_blocks: 3,
        coder_width: 16,
        energy_layers: 2,
        energy_width: 8,
    }
}

#[test]
fn criterion_03_loss_reductions() {
    let b = init_networks(&tiny_spec(), 4).unwrap();
    let mut rng = RngStream::new(19);
    let z_src = Tensor::randn([6, 4], &mut rng);
    let z_pos = Tensor::randn([6, 4], &mut rng).map(|v| v + 1.0);

    // SST objective with α = β = 0 against the bare contrastive gradient,
    // with negatives drawn by an independent plain chain on the same noise.
    let cfg = EbmConfig {
        alpha: 0.0,
        beta: 0.0,
        steps: 5,
        ..EbmConfig::default()
    };
    let noise = chain_noise(&cfg.chain(), 6, 4, &mut RngStream::new(21));
    let g = Graph::new();
    let losses = sst_objective(&b, &g, &z_src, &z_pos, &cfg, Some(&noise), Some(&noise)).unwrap();
    let got = backward(&losses.total, &losses.energy.vars()).unwrap().grads;
    let neg = sgld_forward(&b.energy, &z_src, &cfg.chain(), Some(&mut RngStream::new(21))).unwrap();
    let want = ebm_grad(&b.energy, &z_pos, &neg).unwrap();
    let ebm_err = got
        .iter()
        .zip(&want)
        .flat_map(|(a, w)| a.data().iter().zip(w.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    // Cycle loss with a zero-step chain against the autoencoder residue.
    let back = b.encode_e(&b.decode_g(&z_src, None).unwrap()).unwrap();
    let residue = mean(z_src.data().iter().zip(back.data()).map(|(a, c)| (a - c).abs()));
    let g = Graph::new();
    let zv = g.constant(z_src.clone());
    let energy = b.energy.bind(&g, true);
    let none = Chain::new(0, 0.05);
    let zt = sgld_chain(&energy, &zv, &none, Direction::Forward, None).unwrap();
    let cyc = loss_cyc(
        &zv,
        &zt,
        &b.encoder.bind(&g, false),
        &b.decoder.bind(&g, false),
        &energy,
        &none,
        None,
    )
    .unwrap()
    .item();
    let con = loss_con(&zv, &zt).unwrap().item();
    let cyc_err = (cyc - residue).abs();

    // Adversarial E/D loss with γ = 0 against the two softplus terms alone.
    let spec = tiny_spec();
    let x = Tensor::randn([4, spec.pixels()], &mut rng).map(|v| v.abs().min(1.0));
    let fake = Tensor::randn([4, spec.pixels()], &mut rng).map(|v| v.abs().min(1.0));
    let g = Graph::new();
    let (e, d) = (b.encoder.bind(&g, false), b.discriminator.bind(&g, false));
    let xv = g.param(x);
    let lf = d.forward(&e.forward(&g.constant(fake)).unwrap()).unwrap();
    let lr = d.forward(&e.forward(&xv).unwrap()).unwrap();
    let with_zero = loss_adv_ed(&lf, &lr, &xv, 0.0).unwrap().item();
    let bare =
        lf.softplus().unwrap().mean().unwrap().item() + lr.neg().unwrap().softplus().unwrap().mean().unwrap().item();

    verdict(
        3,
        ebm_err <= 1e-12 && cyc_err <= 1e-12 && con == 0.0 && with_zero == bare,
        format!(
            "contrastive gradient diff {ebm_err:.1e}; zero-step cycle vs residue {cyc_err:.1e}; \
             zero-gamma penalty diff {:.1e}",
            (with_zero - bare).abs()
        ),
    );
}

/// Mean over images and tissue classes of the k-means segmentation Dice.
fn mean_dice<'a>(pairs: impl Iterator<Item = (&'a Image, &'a lest::image::LabelMap)>) -> f64 {
    mean(pairs.map(|(img, mask)| {
        let seg = cluster_segment(img, &mask.foreground()).unwrap();
        dice_scores(&seg, mask).unwrap().mean()
    }))
}

#[test]
#[ignore = "trains a full SIG model (about 6 minutes)"]
fn criterion_04_sig_training() {
    let data = make_multisite(
        &PhantomConfig {
            sites: 4,
            per_site: 200,
            ..PhantomConfig::default()
        },
        7,
    )
    .unwrap();
    let x = data.split(Split::Train).image_tensor().unwrap();
    let init = init_networks(&NetworkSpec::default(), 7).unwrap();
    let lae_before = sig::latent_error(&init, 256, 1).unwrap();
    let start = Instant::now();
    let (bundle, _) = sig::train_sig(init, &SigConfig::default(), &x, 7, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let lae_after = sig::latent_error(&bundle, 256, 1).unwrap();
    let l_pix = sig::reconstruction_error(&bundle, &x).unwrap();

    let all = data.image_tensor().unwrap();
    let rec = lest::sst::tensor_images(&sig::reconstruct(&bundle, &all).unwrap(), 64).unwrap();
    let raw_dice = mean_dice(data.samples.iter().map(|s| (&s.image, &s.mask)));
    let rec_dice = mean_dice(rec.iter().zip(data.samples.iter().map(|s| &s.mask)));
    let drop = 1.0 - lae_after / lae_before;
    verdict(
        4,
        l_pix < 0.05 && drop >= 0.5 && rec_dice >= raw_dice - 0.05 && secs <= 1200.0,
        format!(
            "{} images, {secs:.0}s; L_pix {l_pix:.4}; L_lae {lae_before:.1} -> {lae_after:.1} ({:.0}% lower); \
             Dice raw {raw_dice:.3} recon {rec_dice:.3}",
            x.rows(),
            100.0 * drop
        ),
    );
}

/// The eight-site dataset, its SIG bundle and the default SST run toward
/// the top-ranked site, built once and shared by criteria 5 to 9.
struct EightSites {
    root: PathBuf,
    data: PathBuf,
    sig: PathBuf,
    /// Wall-clock seconds of the default `train-sst` call.
    sst_secs: f64,
}

fn eight_sites() -> &'static EightSites {
    static CELL: OnceLock<EightSites> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = scratch("eight");
        let data = root.join("data");
        let sig = root.join("sig");
        ok(&lest(&[
            "gen",
            "--sites",
            "8",
            "--per-site",
            "100",
            "--seed",
            "7",
            "--out",
            p(&data),
        ]));
        ok(&lest(&[
            "train-sig",
            "--data",
            p(&data),
            "--seed",
            "7",
            "--out",
            p(&sig),
        ]));
        let (_, sst_secs) = variant(&root, &data, &sig, "default", &[]).expect("default SST run diverged");
        EightSites {
            sst_secs,
            root,
            data,
            sig,
        }
    })
}

/// Trains SST with `extra` flags and harmonizes the whole dataset. Returns
/// the harmonized directory and the seconds spent in `train-sst`; a variant
/// that already ran is reused and reports zero seconds. Training that
/// diverges is an outcome, returned as the error message.
fn variant(root: &Path, data: &Path, sig: &Path, name: &str, extra: &[&str]) -> Result<(PathBuf, f64), String> {
    let ebm = root.join(format!("ebm_{name}"));
    let harm = root.join(format!("harm_{name}"));
    if harm.join("manifest.csv").exists() {
        return Ok((harm, 0.0));
    }
    let mut args = vec![
        "train-sst",
        "--sig",
        p(sig),
        "--source",
        p(data),
        "--target",
        p(data),
        "--seed",
        "3",
    ];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", p(&ebm)]);
    let start = Instant::now();
    let out = lest(&args);
    let secs = start.elapsed().as_secs_f64();
    let err = String::from_utf8_lossy(&out.stderr);
    if out.status.code() == Some(2) && err.contains("error[sst::diverged]") {
        return Err(err.trim().to_string());
    }
    ok(&out);
    ok(&lest(&[
        "harmonize",
        "--ebm",
        p(&ebm),
        "--in",
        p(data),
        "--out",
        p(&harm),
    ]));
    Ok((harm, secs))
}

fn evaluate(e: &EightSites, task: &str, harm: &Path, tag: &str) -> serde_json::Value {
    let out = e.root.join(format!("eval_{task}_{tag}"));
    ok(&lest(&[
        "evaluate",
        "--task",
        task,
        "--raw",
        p(&e.data),
        "--harmonized",
        p(harm),
        "--out",
        p(&out),
    ]));
    read_json(&out.join("metrics.json"))
}

/// Mean traveling-subject SSIM of harmonized renderings to the target's.
fn harmonized_ssim(e: &EightSites, harm: &Path, tag: &str) -> f64 {
    let r = evaluate(e, "travel", harm, tag);
    mean(
        r["traveling"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["harmonized_ssim"].as_f64().unwrap()),
    )
}

#[test]
#[ignore = "trains SIG and SST on eight sites (about 12 minutes)"]
fn criterion_05_site_probe() {
    let e = eight_sites();
    let r = evaluate(e, "probe", &e.root.join("harm_default"), "default");
    let raw = r["probe"]["raw"]["bacc"].as_f64().unwrap();
    let harm = r["probe"]["harmonized"]["bacc"].as_f64().unwrap();
    let drop = 1.0 - harm / raw;
    verdict(
        5,
        raw >= 0.9 && drop >= 0.4 && e.sst_secs <= 300.0,
        format!(
            "BACC raw {raw:.3} -> harmonized {harm:.3} ({:.0}% relative drop, need >= 40%); \
             train-sst {:.0}s toward {}",
            100.0 * drop,
            e.sst_secs,
            r["target_site"].as_str().unwrap()
        ),
    );
}

#[test]
#[ignore = "trains SIG and SST on eight sites (about 12 minutes)"]
fn criterion_06_histograms() {
    let e = eight_sites();
    let r = evaluate(e, "hist", &e.root.join("harm_default"), "default");
    let sites = r["histogram"].as_array().unwrap();
    let w = |s: &serde_json::Value, k: &str| s[k]["wasserstein"].as_f64().unwrap();
    let raw = mean(sites.iter().map(|s| w(s, "raw")));
    let harm = mean(sites.iter().map(|s| w(s, "harmonized")));
    let beats_hm = sites.iter().filter(|s| w(s, "harmonized") <= w(s, "baseline")).count();
    let hm = mean(sites.iter().map(|s| w(s, "baseline")));
    verdict(
        6,
        harm <= 0.5 * raw && 2 * beats_hm >= sites.len(),
        format!(
            "mean W1 raw {raw:.4} -> harmonized {harm:.4} ({:.0}% of raw), HM {hm:.4}; \
             at or below HM on {beats_hm}/{} sites",
            100.0 * harm / raw,
            sites.len()
        ),
    );
}

#[test]
#[ignore = "trains SIG and SST on eight sites (about 12 minutes)"]
fn criterion_07_traveling_and_segmentation() {
    let e = eight_sites();
    let harm = e.root.join("harm_default");
    let t = evaluate(e, "travel", &harm, "default");
    let pairs = t["traveling"].as_array().unwrap();
    let better = pairs
        .iter()
        .filter(|p| p["harmonized_ssim"].as_f64().unwrap() > p["raw_ssim"].as_f64().unwrap())
        .count();
    let s = evaluate(e, "seg", &harm, "default");
    let d = |v: &str, c: &str| s["segmentation"][v][c].as_f64().unwrap();
    let seg_ok =
        d("harmonized_dice", "gm") >= d("raw_dice", "gm") && d("harmonized_dice", "csf") >= d("raw_dice", "csf");
    verdict(
        7,
        better as f64 >= 0.8 * pairs.len() as f64 && seg_ok,
        format!(
            "SSIM improved for {better}/{} traveling pairs (need 80%); Dice GM {:.3} -> {:.3}, CSF {:.3} -> {:.3}",
            pairs.len(),
            d("raw_dice", "gm"),
            d("harmonized_dice", "gm"),
            d("raw_dice", "csf"),
            d("harmonized_dice", "csf")
        ),
    );
}

#[test]
#[ignore = "trains SIG and SST on eight sites (about 12 minutes)"]
fn criterion_08_synthesis() {
    let e = eight_sites();
    let synth = e.root.join("synth");
    ok(&lest(&[
        "synthesize",
        "--ebm",
        p(&e.root.join("ebm_default")),
        "-n",
        "100",
        "--seed",
        "5",
        "--out",
        p(&synth),
    ]));
    let out = e.root.join("eval_synth");
    ok(&lest(&[
        "evaluate",
        "--task",
        "synth",
        "--raw",
        p(&e.data),
        "--synth",
        p(&synth),
        "--out",
        p(&out),
    ]));
    let r = read_json(&out.join("metrics.json"));
    let s = |v: &str, k: &str| r["synthesis"][v][k].as_f64().unwrap();
    let gap = (s("original", "ssim_mean") - s("synthesized", "ssim_mean")).abs();
    verdict(
        8,
        gap <= 0.03 && s("synthesized", "pcc_mean") >= s("original", "pcc_mean") - 0.02,
        format!(
            "SSIM original {:.3} synthesized {:.3} (gap {gap:.3}); PCC original {:.3} synthesized {:.3}",
            s("original", "ssim_mean"),
            s("synthesized", "ssim_mean"),
            s("original", "pcc_mean"),
            s("synthesized", "pcc_mean")
        ),
    );
}

/// Harmonization SSIM of one variant; `None` when its training diverged.
type Score = Option<f64>;

fn show(s: Score) -> String {
    s.map_or("diverged".into(), |v| format!("{v:.3}"))
}

/// The label with the highest score; diverged runs rank below any score.
fn best(scores: &[(&str, Score)]) -> String {
    let key = |s: Score| s.unwrap_or(f64::NEG_INFINITY);
    scores
        .iter()
        .fold(scores[0], |b, s| if key(s.1) > key(b.1) { *s } else { b })
        .0
        .to_string()
}

#[test]
#[ignore = "trains a second SIG model and eight SST variants (about 25 minutes)"]
fn criterion_09_ablations() {
    let e = eight_sites();
    let score = |sig: &Path, name: &str, extra: &[&str]| -> Score {
        let (harm, _) = variant(&e.root, &e.data, sig, name, extra).ok()?;
        Some(harmonized_ssim(e, &harm, name))
    };
    let run = |name: &str, extra: &[&str]| score(&e.sig, name, extra);
    let full = run("default", &[]);
    let no_con = run("no_con", &["--alpha", "0"]);
    let no_cyc = run("no_cyc", &["--beta", "0"]);
    let sig_no_pix = e.root.join("sig_no_pix");
    ok(&lest(&[
        "train-sig",
        "--data",
        p(&e.data),
        "--seed",
        "7",
        "--lambda-pix",
        "0",
        "--out",
        p(&sig_no_pix),
    ]));
    let no_pix = score(&sig_no_pix, "no_pix", &[]);
    let alphas = [
        ("0.1", run("alpha_0.1", &["--alpha", "0.1"])),
        ("1", full),
        ("10", run("alpha_10", &["--alpha", "10"])),
    ];
    let betas = [
        ("10", run("beta_10", &["--beta", "10"])),
        ("100", full),
        ("1000", run("beta_1000", &["--beta", "1000"])),
    ];
    // A diverged ablation counts as worse than any finished one.
    let below = |a: Score, b: Score| a.unwrap_or(f64::NEG_INFINITY) < b.unwrap_or(f64::NEG_INFINITY);
    let pix_worst = below(no_pix, no_con) && below(no_pix, no_cyc);
    let (best_alpha, best_beta) = (best(&alphas), best(&betas));
    let fmt = |v: &[(&str, Score)]| {
        v.iter()
            .map(|(k, s)| format!("{k}:{}", show(*s)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    verdict(
        9,
        pix_worst && best_alpha == "1" && best_beta == "100",
        format!(
            "harmonization SSIM full {}, -pix {}, -con {}, -cyc {}; alpha {} (best {best_alpha}); beta {} (best {best_beta})",
            show(full),
            show(no_pix),
            show(no_con),
            show(no_cyc),
            fmt(&alphas),
            fmt(&betas)
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let root = scratch("determinism");
    let (a, b) = (root.join("a"), root.join("b"));
    smoke(&a, "4");
    smoke(&b, "4");
    let files = smoke_artifacts(&a);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap_or_default())
        .map(|f| f.display().to_string())
        .collect();
    verdict(
        10,
        files.len() > 20 && differing.is_empty(),
        format!(
            "{} checkpoint and report files compared; differing {differing:?}",
            files.len()
        ),
    );
}
