use std::path::{Path, PathBuf};

use lest::image::Image;
use lest::metrics::{
    histogram_task, hm_baseline, probe_task, rank_target_sites, segmentation_task, site_embedding, site_histogram,
    synthesis_task, traveling_task,
};
use lest::nets::{init_networks, ModelBundle};
use lest::numerics::RngStream;
use lest::phantoms::{make_multisite, pgm, save_images, Dataset, Split};
use lest::sig::{self, SIG_BUNDLE_FILE};
use lest::sst::{self, EnergyModel, EBM_BUNDLE_FILE};

use crate::config::{overlay, RunConfig};
use crate::report::{EmbeddingPoint, EmbeddingReport, HistogramCurve, MetricsReport, ProbeReport};
use crate::{
    CliError, EvaluateArgs, GenArgs, HarmonizeArgs, SelftestArgs, SynthesizeArgs, Task, TrainSigArgs, TrainSstArgs,
};

/// Stream tag for inference-time Langevin noise in `harmonize`.
const HARMONIZE_STREAM: u64 = 0x4841_524d;

/// A bundle path, or the named bundle inside a directory.
fn bundle_path(p: &Path, file: &str) -> PathBuf {
    if p.is_dir() {
        p.join(file)
    } else {
        p.to_path_buf()
    }
}

/// The most homogeneous site of the train split (all images if the split is
/// too small to rank).
pub fn default_target(data: &Dataset) -> Result<String, CliError> {
    let train = data.split(Split::Train);
    let ranked = rank_target_sites(&train).or_else(|_| rank_target_sites(data))?;
    Ok(ranked[0].site_id.clone())
}

fn require_site(data: &Dataset, site: &str, what: &str) -> Result<(), CliError> {
    if data.site_ids().iter().any(|s| s == site) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "site `{site}` does not occur in the {what} dataset"
        )))
    }
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    overlay(&mut cfg.seed, a.common.seed);
    overlay(&mut cfg.phantoms.sites, a.sites);
    overlay(&mut cfg.phantoms.per_site, a.per_site);
    overlay(&mut cfg.phantoms.traveling, a.traveling);
    cfg.out = Some(a.common.out.clone());
    cfg.persist(&a.common.out)?;
    let data = make_multisite(&cfg.phantoms, cfg.seed)?;
    data.save(&a.common.out)?;
    println!(
        "wrote {} images ({} sites) to {}",
        data.len(),
        data.site_ids().len(),
        a.common.out.display()
    );
    Ok(())
}

pub fn train_sig(a: TrainSigArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    overlay(&mut cfg.seed, a.common.seed);
    overlay(&mut cfg.sig.epochs, a.epochs);
    overlay(&mut cfg.sig.batch_size, a.batch_size);
    overlay(&mut cfg.sig.lambda_pix, a.lambda_pix);
    cfg.out = Some(a.common.out.clone());
    let data = Dataset::load(&a.data)?.split(Split::Train);
    let Some(first) = data.samples.first() else {
        return Err(CliError::Usage(format!("{} has no train images", a.data.display())));
    };
    if first.image.width != first.image.height {
        return Err(CliError::Usage("images must be square".into()));
    }
    cfg.network.image_side = first.image.width;
    cfg.persist(&a.common.out)?;
    let bundle = init_networks(&cfg.network, cfg.seed)?;
    let (bundle, trace) = sig::train_sig(bundle, &cfg.sig, &data.image_tensor()?, cfg.seed, Some(&a.common.out))?;
    let last = trace.rows.last();
    println!(
        "trained SIG for {} epochs on {} images; l_lae {:.4}, l_pix {:.4}; bundle {}",
        bundle.meta.sig_epochs,
        data.len(),
        last.map_or(f64::NAN, |r| r.l_lae),
        last.map_or(f64::NAN, |r| r.l_pix),
        a.common.out.join(SIG_BUNDLE_FILE).display()
    );
    Ok(())
}

pub fn train_sst(a: TrainSstArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    overlay(&mut cfg.seed, a.common.seed);
    overlay(&mut cfg.ebm.alpha, a.alpha);
    overlay(&mut cfg.ebm.beta, a.beta);
    overlay(&mut cfg.ebm.steps, a.steps);
    overlay(&mut cfg.ebm.eta, a.eta);
    overlay(&mut cfg.ebm.epochs, a.epochs);
    overlay(&mut cfg.ebm.lr, a.lr);
    overlay(&mut cfg.ebm.batch_size, a.batch_size);
    cfg.out = Some(a.common.out.clone());
    let bundle = ModelBundle::load(&bundle_path(&a.sig, SIG_BUNDLE_FILE))?;
    let source = Dataset::load(&a.source)?;
    let target = Dataset::load(&a.target)?;
    let site = match a.target_site {
        Some(s) => s,
        None => default_target(&target)?,
    };
    require_site(&target, &site, "target")?;
    let src = source.split(Split::Train).filter(|s| s.site_id != site);
    let tgt = target.split(Split::Train).site(&site);
    if src.is_empty() {
        return Err(CliError::Usage("no source images outside the target site".into()));
    }
    cfg.network = bundle.spec.clone();
    cfg.persist(&a.common.out)?;
    let start = std::time::Instant::now();
    let (model, _) = sst::train_sst(
        bundle,
        &cfg.ebm,
        &src.image_tensor()?,
        &tgt.image_tensor()?,
        &site,
        cfg.seed,
        Some(&a.common.out),
    )?;
    println!(
        "trained SST toward {site} on {} source and {} target images in {:.1}s; bundle {}",
        src.len(),
        tgt.len(),
        start.elapsed().as_secs_f64(),
        a.common.out.join(EBM_BUNDLE_FILE).display()
    );
    drop(model);
    Ok(())
}

pub fn harmonize(a: HarmonizeArgs) -> Result<(), CliError> {
    let model = EnergyModel::load(&bundle_path(&a.ebm, EBM_BUNDLE_FILE))?;
    let data = Dataset::load(&a.input)?;
    let mut rng = RngStream::derive(a.seed, HARMONIZE_STREAM);
    let noisy = a.noise || model.config().noise_on;
    let mut out = sst::harmonize_dataset(&model, &data, noisy.then_some(&mut rng))?;
    // Harmonized images no longer follow their generating styles.
    out.styles.clear();
    out.save(&a.out)?;
    println!(
        "harmonized {} images toward {} into {}",
        out.len(),
        model.target_site(),
        a.out.display()
    );
    Ok(())
}

pub fn synthesize(a: SynthesizeArgs) -> Result<(), CliError> {
    let model = EnergyModel::load(&bundle_path(&a.ebm, EBM_BUNDLE_FILE))?;
    let t = sst::synthesize(&model, a.count, a.seed, a.stochastic)?;
    let images = sst::tensor_images(&t, model.bundle.spec.image_side)?;
    std::fs::create_dir_all(&a.out).map_err(|e| lest::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let items: Vec<(String, Image)> = images
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("synth_{i:04}"), img))
        .collect();
    save_images(&a.out, &items)?;
    println!(
        "wrote {} images in the style of {} to {}",
        items.len(),
        model.target_site(),
        a.out.display()
    );
    Ok(())
}

/// Every `.pgm` file of `dir`, in file-name order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| lest::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .pgm images in {}", dir.display())));
    }
    Ok(paths.iter().map(|p| pgm::load_image(p)).collect::<Result<_, _>>()?)
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str, task: Task) -> Result<&'a Path, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--task {task:?} needs {flag}").to_lowercase()))
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.out = Some(a.out.clone());
    cfg.persist(&a.out)?;
    let raw = Dataset::load(&a.raw)?;
    let harmonized = match &a.harmonized {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let target = match a.target.clone() {
        Some(t) => t,
        None => default_target(&raw)?,
    };
    require_site(&raw, &target, "raw")?;
    let mut report = MetricsReport {
        task: format!("{:?}", a.task).to_lowercase(),
        target_site: Some(target.clone()),
        ..MetricsReport::default()
    };
    match a.task {
        Task::Hist => {
            let harm = harmonized
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task hist needs --harmonized".into()))?;
            let hm = if cfg.metrics.hm_baseline {
                Some(hm_baseline(&raw, &target)?)
            } else {
                None
            };
            report.histogram = Some(histogram_task(&raw, harm, hm.as_ref(), &target)?);
            for site in raw.site_ids() {
                let mut versions: Vec<(&'static str, &Dataset)> = vec![("raw", &raw)];
                if site != target {
                    versions.push(("harmonized", harm));
                    if let Some(h) = &hm {
                        versions.push(("hm", h));
                    }
                }
                for (version, d) in versions {
                    report.curves.push(HistogramCurve {
                        site_id: site.clone(),
                        version,
                        histogram: site_histogram(d, &site)?,
                    });
                }
            }
        }
        Task::Probe => {
            report.probe = Some(ProbeReport {
                raw: probe_task(&raw, &cfg.metrics.probe)?,
                harmonized: match &harmonized {
                    Some(h) => Some(probe_task(h, &cfg.metrics.probe)?),
                    None => None,
                },
            });
        }
        Task::Seg => {
            let harm = harmonized
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task seg needs --harmonized".into()))?;
            report.segmentation = Some(segmentation_task(&raw, harm, &target)?);
        }
        Task::Travel => {
            let harm = harmonized
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task travel needs --harmonized".into()))?;
            report.traveling = Some(traveling_task(&raw, harm, &target)?);
        }
        Task::Synth => {
            let synth = load_image_dir(need(&a.synth, "--synth", a.task)?)?;
            let t = raw.split(Split::Val).site(&target);
            let t = if t.len() >= 2 { t } else { raw.site(&target) };
            let originals: Vec<&Image> = t.images();
            report.synthesis = Some(synthesis_task(&originals, &synth)?);
        }
        Task::Embed => {
            let mut versions = vec![("raw", &raw)];
            if let Some(h) = &harmonized {
                versions.push(("harmonized", h));
            }
            let mut ratios = Vec::new();
            for (version, d) in versions {
                let e = site_embedding(d, cfg.metrics.embed_grid)?;
                for (s, p) in d.samples.iter().zip(&e.points) {
                    report.points.push(EmbeddingPoint {
                        version,
                        site_id: s.site_id.clone(),
                        subject_id: s.subject_id.clone(),
                        x: p[0],
                        y: p[1],
                    });
                }
                ratios.push(e.scatter_ratio);
            }
            report.embedding = Some(EmbeddingReport {
                raw_scatter_ratio: ratios[0],
                harmonized_scatter_ratio: ratios.get(1).copied(),
            });
        }
        Task::Rank => {
            report.ranking = Some(rank_target_sites(&raw.split(Split::Train))?);
        }
    }
    report.write(&a.out)?;
    println!("wrote {} report to {}", report.task, a.out.display());
    Ok(())
}

pub fn selftest(a: SelftestArgs) -> Result<(), CliError> {
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name} {detail}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failed.push(name.to_string());
        }
    };
    for o in lest::selfcheck::gradient_suite(a.trials, a.seed)? {
        check(
            &format!("grad {}", o.name),
            o.passed(),
            format!("({} trials, max rel err {:.2e})", o.trials, o.max_rel_err),
        );
    }
    for inv in lest::selfcheck::invariants(a.seed)? {
        check(&inv.name, inv.passed, inv.detail);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelfTest(failed.join(", ")))
    }
}
