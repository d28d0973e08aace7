//! Site-invariant generation: a latent adversarial autoencoder trained on
//! pooled images without site labels.
//!
//! Each batch runs three sub-steps, each with its own optimizer:
//! 1. encoder and discriminator descend the adversarial loss with the
//!    gradient-norm penalty on `D∘E`,
//! 2. mapping and decoder descend the generator loss,
//! 3. encoder and decoder descend the latent and pixel reconstruction losses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Mlp, ModelBundle};
use crate::numerics::{backward, grad, AdamConfig, AdamState, Graph, RngStream, Tensor, Var};

pub const SIG_BUNDLE_FILE: &str = "sig.bundle";
pub const SIG_TRACE_FILE: &str = "sig_trace.csv";
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigRates {
    pub mapping: f64,
    pub decoder: f64,
    pub encoder: f64,
    pub discriminator: f64,
}

impl Default for SigRates {
    fn default() -> Self {
        Self {
            mapping: 1e-4,
            decoder: 5e-4,
            encoder: 5e-4,
            discriminator: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: SigRates,
    /// Weight of the gradient-norm penalty.
    pub gamma_r1: f64,
    pub lambda_lae: f64,
    /// Zero disables the pixel loss (the no-pixel-loss ablation).
    pub lambda_pix: f64,
    /// Learning rates fall linearly to this fraction of their base value
    /// by the last epoch.
    pub final_lr_scale: f64,
    /// Record one trace row every this many steps.
    pub log_every: usize,
}

impl Default for SigConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: SigRates::default(),
            gamma_r1: 10.0,
            lambda_lae: 1.0,
            lambda_pix: 1.0,
            final_lr_scale: 0.1,
            log_every: 1,
        }
    }
}

impl SigConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config("sig", field, reason));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        for (name, v) in [
            ("lr.mapping", self.lr.mapping),
            ("lr.decoder", self.lr.decoder),
            ("lr.encoder", self.lr.encoder),
            ("lr.discriminator", self.lr.discriminator),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, "must be positive");
            }
        }
        if !(self.gamma_r1.is_finite() && self.gamma_r1 >= 0.0) {
            return bad("gamma_r1", "must be non-negative");
        }
        if !(self.lambda_lae.is_finite() && self.lambda_lae > 0.0) {
            return bad("lambda_lae", "must be positive");
        }
        if !(self.lambda_pix.is_finite() && self.lambda_pix >= 0.0) {
            return bad("lambda_pix", "must be non-negative");
        }
        if !(self.final_lr_scale > 0.0 && self.final_lr_scale <= 1.0) {
            return bad("final_lr_scale", "must lie in (0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigTraceRow {
    pub step: usize,
    pub l_lae: f64,
    pub l_pix: f64,
    pub l_adv_ed: f64,
    pub l_adv_fg: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SigTrace {
    pub rows: Vec<SigTraceRow>,
}

impl SigTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<SigTraceRow>, _>>()
            .map_err(|e| Error::format(path, e))?;
        Ok(Self { rows })
    }

    /// Column means over the rows with `step` in `range`.
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> Option<SigTraceRow> {
        let sel: Vec<&SigTraceRow> = self.rows.iter().filter(|r| range.contains(&r.step)).collect();
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        let m = |f: fn(&SigTraceRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(SigTraceRow {
            step: range.start,
            l_lae: m(|r| r.l_lae),
            l_pix: m(|r| r.l_pix),
            l_adv_ed: m(|r| r.l_adv_ed),
            l_adv_fg: m(|r| r.l_adv_fg),
        })
    }
}

/// Squared latent reconstruction error: squared L2 norm per code, averaged
/// over the batch.
pub fn loss_lae(w: &Var, w_rec: &Var) -> Result<Var> {
    let batch = w.shape().first().copied().unwrap_or(1).max(1) as f64;
    Ok(w.sub(w_rec)?.square()?.sum()?.scale(1.0 / batch)?)
}

/// Mean absolute pixel error.
pub fn loss_pix(x: &Var, x_rec: &Var) -> Result<Var> {
    Ok(x.sub(x_rec)?.abs()?.mean()?)
}

/// `γ/2 · E‖∇ₓ D∘E(x)‖²`. `logits` must be `D∘E(x)` for the `[batch, pixels]`
/// leaf `x`; rows are independent, so the gradient of the summed logits
/// gives every per-sample input gradient at once.
pub fn r_reg(logits: &Var, x: &Var, gamma: f64) -> Result<Var> {
    let g = x.graph();
    if gamma == 0.0 {
        return Ok(g.scalar(0.0));
    }
    let batch = x.shape().first().copied().unwrap_or(1).max(1) as f64;
    let dx = grad(&logits.sum()?, &[x])?.remove(0);
    Ok(dx.square()?.sum()?.scale(gamma / 2.0 / batch)?)
}

/// `Φ(D∘E∘G∘F(z)) + Φ(−D∘E(x)) + R_reg`, batch-averaged.
pub fn loss_adv_ed(logits_fake: &Var, logits_real: &Var, x: &Var, gamma: f64) -> Result<Var> {
    let fake = logits_fake.softplus()?.mean()?;
    let real = logits_real.neg()?.softplus()?.mean()?;
    fake.add(&real)?.add(&r_reg(logits_real, x, gamma)?).map_err(Into::into)
}

/// `Φ(−D∘E∘G∘F(z))`, batch-averaged.
pub fn loss_adv_fg(logits_fake: &Var) -> Result<Var> {
    Ok(logits_fake.neg()?.softplus()?.mean()?)
}

fn check_loss(step: usize, name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            module: "sig",
            step,
            reason: format!("{name} = {v}"),
        });
    }
    Ok(v)
}

/// One Adam state per network per sub-step.
struct Group {
    first: AdamState,
    second: AdamState,
    base: (f64, f64),
}

impl Group {
    fn new(a: (&Mlp, f64), b: (&Mlp, f64)) -> Self {
        Self {
            first: AdamState::new(AdamConfig::with_lr(a.1), a.0.params()),
            second: AdamState::new(AdamConfig::with_lr(b.1), b.0.params()),
            base: (a.1, b.1),
        }
    }

    fn scale_lr(&mut self, s: f64) {
        self.first.config.lr = self.base.0 * s;
        self.second.config.lr = self.base.1 * s;
    }

    fn step(&mut self, a: &mut Mlp, b: &mut Mlp, grads: &[Tensor]) -> Result<()> {
        let k = a.params().len();
        self.first.step(&mut a.params_mut(), &grads[..k])?;
        self.second.step(&mut b.params_mut(), &grads[k..])?;
        Ok(())
    }
}

/// Optimizer state and sampling streams for one SIG run.
pub struct SigTrainer {
    pub bundle: ModelBundle,
    config: SigConfig,
    opt_ed: Group,
    opt_fg: Group,
    opt_eg: Group,
    rng: RngStream,
    step: usize,
}

impl SigTrainer {
    pub fn new(bundle: ModelBundle, config: SigConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lr = &config.lr;
        let opt_ed = Group::new((&bundle.encoder, lr.encoder), (&bundle.discriminator, lr.discriminator));
        let opt_fg = Group::new((&bundle.mapping, lr.mapping), (&bundle.decoder, lr.decoder));
        let opt_eg = Group::new((&bundle.encoder, lr.encoder), (&bundle.decoder, lr.decoder));
        Ok(Self {
            bundle,
            config,
            opt_ed,
            opt_fg,
            opt_eg,
            rng: RngStream::derive(seed, 0x5349_4700),
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Multiplies every base learning rate by `s`.
    pub fn scale_lr(&mut self, s: f64) {
        for g in [&mut self.opt_ed, &mut self.opt_fg, &mut self.opt_eg] {
            g.scale_lr(s);
        }
    }

    fn latent_batch(&mut self, n: usize) -> Tensor {
        Tensor::randn([n, self.bundle.spec.latent_dim], &mut self.rng)
    }

    /// Sub-step 1: update E and D; F and G are constants.
    pub fn step_ed(&mut self, x: &Tensor) -> Result<f64> {
        let n = x.rows();
        let z = self.latent_batch(n);
        let noise = self.bundle.decoder.sample_noise(n, &mut self.rng);
        let fake = self.bundle.decode_g(&self.bundle.map_f(&z)?, Some(&noise))?;
        let g = Graph::new();
        let e = self.bundle.encoder.bind(&g, true);
        let d = self.bundle.discriminator.bind(&g, true);
        let xv = g.param(x.clone());
        let logits_fake = d.forward(&e.forward(&g.constant(fake))?)?;
        let logits_real = d.forward(&e.forward(&xv)?)?;
        let loss = loss_adv_ed(&logits_fake, &logits_real, &xv, self.config.gamma_r1)?;
        let value = check_loss(self.step, "l_adv_ed", loss.item())?;
        let vars: Vec<&Var> = e.vars().into_iter().chain(d.vars()).collect();
        let grads = backward(&loss, &vars)?;
        let b = &mut self.bundle;
        self.opt_ed.step(&mut b.encoder, &mut b.discriminator, &grads.grads)?;
        Ok(value)
    }

    /// Sub-step 2: update F and G; E and D are constants.
    pub fn step_fg(&mut self, n: usize) -> Result<f64> {
        let z = self.latent_batch(n);
        let noise = self.bundle.decoder.sample_noise(n, &mut self.rng);
        let g = Graph::new();
        let f = self.bundle.mapping.bind(&g, true);
        let gen = self.bundle.decoder.bind(&g, true);
        let e = self.bundle.encoder.bind(&g, false);
        let d = self.bundle.discriminator.bind(&g, false);
        let w = f.forward(&g.constant(z))?;
        let logits = d.forward(&e.forward(&gen.forward_noisy(&w, Some(&noise))?)?)?;
        let loss = loss_adv_fg(&logits)?;
        let value = check_loss(self.step, "l_adv_fg", loss.item())?;
        let vars: Vec<&Var> = f.vars().into_iter().chain(gen.vars()).collect();
        let grads = backward(&loss, &vars)?;
        let b = &mut self.bundle;
        self.opt_fg.step(&mut b.mapping, &mut b.decoder, &grads.grads)?;
        Ok(value)
    }

    /// Sub-step 3: update E and G on the reconstruction losses; `F(z)` is a
    /// constant target and D is unused. Returns `(l_lae, l_pix)`.
    pub fn step_eg(&mut self, x: &Tensor) -> Result<(f64, f64)> {
        let n = x.rows();
        let z = self.latent_batch(n);
        let noise = self.bundle.decoder.sample_noise(n, &mut self.rng);
        let w = self.bundle.map_f(&z)?;
        let g = Graph::new();
        let e = self.bundle.encoder.bind(&g, true);
        let gen = self.bundle.decoder.bind(&g, true);
        let wv = g.constant(w);
        let w_rec = e.forward(&gen.forward_noisy(&wv, Some(&noise))?)?;
        let lae = loss_lae(&wv, &w_rec)?;
        let xv = g.constant(x.clone());
        let pix = loss_pix(&xv, &gen.forward(&e.forward(&xv)?)?)?;
        let (l_lae, l_pix) = (
            check_loss(self.step, "l_lae", lae.item())?,
            check_loss(self.step, "l_pix", pix.item())?,
        );
        // The objective uses the per-image L1 norm (the per-pixel mean times
        // the pixel count); the trace reports the per-pixel mean.
        let pixels = x.cols() as f64;
        let loss = lae
            .scale(self.config.lambda_lae)?
            .add(&pix.scale(self.config.lambda_pix * pixels)?)?;
        let vars: Vec<&Var> = e.vars().into_iter().chain(gen.vars()).collect();
        let grads = backward(&loss, &vars)?;
        let b = &mut self.bundle;
        self.opt_eg.step(&mut b.encoder, &mut b.decoder, &grads.grads)?;
        Ok((l_lae, l_pix))
    }

    /// All three sub-steps on one batch of real images.
    pub fn train_batch(&mut self, x: &Tensor) -> Result<SigTraceRow> {
        let l_adv_ed = self.step_ed(x)?;
        let l_adv_fg = self.step_fg(x.rows())?;
        let (l_lae, l_pix) = self.step_eg(x)?;
        let row = SigTraceRow {
            step: self.step,
            l_lae,
            l_pix,
            l_adv_ed,
            l_adv_fg,
        };
        self.step += 1;
        Ok(row)
    }
}

/// Trains F, G, E and D on the rows of `images` (`[n, pixels]`). When `out`
/// is given, the bundle and trace are written there after every epoch, and
/// the trace is dumped before a divergence error is returned.
pub fn train_sig(
    mut bundle: ModelBundle,
    config: &SigConfig,
    images: &Tensor,
    seed: u64,
    out: Option<&Path>,
) -> Result<(ModelBundle, SigTrace)> {
    config.validate()?;
    let n = images.rows();
    if n < config.batch_size {
        return Err(Error::data(
            "sig",
            format!("{n} images is fewer than one batch of {}", config.batch_size),
        ));
    }
    if images.cols() != bundle.spec.pixels() {
        return Err(Error::data(
            "sig",
            format!(
                "images have {} pixels, spec expects {}",
                images.cols(),
                bundle.spec.pixels()
            ),
        ));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if config.lambda_pix == 0.0 && !bundle.meta.flags.iter().any(|f| f == "no_pix") {
        bundle.meta.flags.push("no_pix".into());
    }
    let mut trainer = SigTrainer::new(bundle, config.clone(), seed)?;
    let mut order_rng = RngStream::derive(seed, 0x5349_4701);
    let mut trace = SigTrace::default();
    let batches = n / config.batch_size;
    for epoch in 0..config.epochs {
        let t = if config.epochs > 1 {
            epoch as f64 / (config.epochs - 1) as f64
        } else {
            0.0
        };
        trainer.scale_lr(1.0 + (config.final_lr_scale - 1.0) * t);
        let perm = order_rng.permutation(n);
        for b in 0..batches {
            let idx = &perm[b * config.batch_size..(b + 1) * config.batch_size];
            let x = images.select_rows(idx);
            match trainer.train_batch(&x) {
                Ok(row) => {
                    if row.step % config.log_every == 0 {
                        trace.rows.push(row);
                    }
                }
                Err(e) => {
                    if let Some(dir) = out {
                        trace.write_csv(&dir.join(SIG_TRACE_FILE))?;
                    }
                    return Err(e);
                }
            }
        }
        trainer.bundle.meta.sig_epochs += 1;
        if let Some(last) = trace.rows.last() {
            let m = &mut trainer.bundle.meta.final_losses;
            m.insert("sig.l_lae".into(), last.l_lae);
            m.insert("sig.l_pix".into(), last.l_pix);
            m.insert("sig.l_adv_ed".into(), last.l_adv_ed);
            m.insert("sig.l_adv_fg".into(), last.l_adv_fg);
        }
        if let Some(dir) = out {
            trainer.bundle.save(&dir.join(SIG_BUNDLE_FILE))?;
            trace.write_csv(&dir.join(SIG_TRACE_FILE))?;
        }
    }
    Ok((trainer.bundle, trace))
}

/// Mean pixel L1 of `G∘E(x)` over `images`, decoding without noise.
pub fn reconstruction_error(bundle: &ModelBundle, images: &Tensor) -> Result<f64> {
    let rec = reconstruct(bundle, images)?;
    let n = images.len() as f64;
    Ok(images
        .data()
        .iter()
        .zip(rec.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// `G∘E(x)` in chunks, without noise.
pub fn reconstruct(bundle: &ModelBundle, images: &Tensor) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.rows());
    let idx: Vec<usize> = (0..images.rows()).collect();
    for chunk in idx.chunks(64) {
        let x = images.select_rows(chunk);
        let rec = bundle.decode_g(&bundle.encode_e(&x)?, None)?;
        rows.extend((0..rec.rows()).map(|i| rec.row(i).to_vec()));
    }
    Ok(Tensor::stack_rows(&rows)?)
}

/// Mean `‖F(z) − E∘G∘F(z)‖²` over `n` fresh latent draws, without noise.
pub fn latent_error(bundle: &ModelBundle, n: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::derive(seed, 0x5349_4702);
    let z = Tensor::randn([n, bundle.spec.latent_dim], &mut rng);
    let w = bundle.map_f(&z)?;
    let w_rec = bundle.encode_e(&bundle.decode_g(&w, None)?)?;
    Ok(w.data()
        .iter()
        .zip(w_rec.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n as f64)
}
