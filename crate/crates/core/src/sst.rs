//! Site-specific style translation: an energy model over one target site's
//! latent codes, Langevin translation of source codes toward it, and
//! synthesis of new target-styled images from the mapping network.
//!
//! The encoder and decoder are frozen here; only the energy net trains.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::{BoundMlp, Mlp, ModelBundle};
use crate::numerics::{backward, grad, AdamConfig, AdamState, Graph, RngStream, Tensor, Var};
use crate::phantoms::Dataset;

pub const EBM_BUNDLE_FILE: &str = "ebm.bundle";
pub const SST_TRACE_FILE: &str = "sst_trace.csv";
const DIVERGENCE_LIMIT: f64 = 1e6;
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbmConfig {
    /// Langevin steps per chain.
    pub steps: usize,
    pub eta: f64,
    /// When set, the step size moves linearly from `eta` to this value over
    /// the chain. Unset keeps it constant.
    pub eta_final: Option<f64>,
    /// Weight of the latent content loss.
    pub alpha: f64,
    /// Weight of the latent cycle loss.
    pub beta: f64,
    /// Weight of `mean(E(pos)² + E(neg)²)`, which keeps energies bounded.
    pub energy_l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Inject Langevin noise at inference.
    pub noise_on: bool,
    /// Inject Langevin noise while training.
    pub train_noise: bool,
    pub log_every: usize,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            eta: 0.05,
            eta_final: None,
            alpha: 1.0,
            beta: 100.0,
            energy_l2: 0.0,
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            noise_on: false,
            train_noise: true,
            log_every: 1,
        }
    }
}

impl EbmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config("sst", field, reason));
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        self.chain().validate()?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha", "must be non-negative");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta", "must be non-negative");
        }
        if !(self.energy_l2.is_finite() && self.energy_l2 >= 0.0) {
            return bad("energy_l2", "must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1");
        }
        Ok(())
    }

    pub fn chain(&self) -> Chain {
        Chain {
            steps: self.steps,
            eta: self.eta,
            eta_final: self.eta_final,
        }
    }
}

/// Length and step sizes of one Langevin chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chain {
    pub steps: usize,
    pub eta: f64,
    pub eta_final: Option<f64>,
}

impl Chain {
    pub fn new(steps: usize, eta: f64) -> Self {
        Self {
            steps,
            eta,
            eta_final: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // η = 0 is allowed here (an identity chain); training configs
        // reject it through `EbmConfig::validate`.
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.eta) || self.eta_final.is_some_and(|v| !ok(v)) {
            return Err(Error::config("sst", "eta", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn eta_at(&self, t: usize) -> f64 {
        match self.eta_final {
            Some(end) if self.steps > 1 => self.eta + (end - self.eta) * t as f64 / (self.steps - 1) as f64,
            _ => self.eta,
        }
    }
}

/// Langevin direction: forward descends the energy, inverse ascends it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Inverse => -1.0,
        }
    }
}

/// A scalar energy per latent code.
pub trait Energy {
    /// Energies `[batch, 1]` of the codes `z`, recorded on z's graph.
    fn energy(&self, z: &Var) -> Result<Var>;
}

impl Energy for BoundMlp {
    fn energy(&self, z: &Var) -> Result<Var> {
        self.forward(z)
    }
}

impl Energy for Mlp {
    fn energy(&self, z: &Var) -> Result<Var> {
        self.bind(z.graph(), false).forward(z)
    }
}

/// `½‖z‖²` per row. Useful as a closed-form reference energy.
#[derive(Clone, Copy, Debug, Default)]
pub struct Quadratic;

impl Energy for Quadratic {
    fn energy(&self, z: &Var) -> Result<Var> {
        Ok(z.square()?.sum_cols()?.scale(0.5)?)
    }
}

/// Negative log-density of an isotropic 2-D Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub sigmas: Vec<f64>,
}

impl GaussianMixture {
    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m[0] += w * mu[0];
            m[1] += w * mu[1];
        }
        m
    }

    /// Row-major 2×2 covariance.
    pub fn covariance(&self) -> [f64; 4] {
        let m = self.mean();
        let mut c = [0.0; 4];
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.sigmas) {
            let d = [mu[0] - m[0], mu[1] - m[1]];
            c[0] += w * (s * s + d[0] * d[0]);
            c[1] += w * d[0] * d[1];
            c[2] += w * d[1] * d[0];
            c[3] += w * (s * s + d[1] * d[1]);
        }
        c
    }
}

impl Energy for GaussianMixture {
    fn energy(&self, z: &Var) -> Result<Var> {
        let g = z.graph();
        let mut density: Option<Var> = None;
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.sigmas) {
            let shift = g.constant(Tensor::vector(vec![-mu[0], -mu[1]]));
            let q = z.add_row(&shift)?.square()?.sum_cols()?.scale(-0.5 / (s * s))?;
            let term = q.exp()?.scale(w / (2.0 * std::f64::consts::PI * s * s))?;
            density = Some(match density {
                Some(d) => d.add(&term)?,
                None => term,
            });
        }
        let density = density.ok_or_else(|| Error::data("sst", "mixture has no components"))?;
        Ok(density.log()?.neg()?)
    }
}

enum Noise<'a> {
    Off,
    Draw(&'a mut RngStream),
    Fixed(&'a [Tensor]),
}

impl Noise<'_> {
    fn at(&mut self, t: usize, shape: &[usize]) -> Option<Tensor> {
        match self {
            Noise::Off => None,
            Noise::Draw(rng) => Some(Tensor::randn(shape.to_vec(), rng)),
            Noise::Fixed(maps) => Some(maps[t].clone()),
        }
    }
}

/// Numeric faults inside a chain become divergence errors carrying the step.
fn at_step(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(n) if n.is_numeric_fault() => Error::Diverged {
            module: "sst",
            step: t,
            reason: n.to_string(),
        },
        e => e,
    }
}

fn run_plain<E: Energy + ?Sized>(
    energy: &E,
    z0: &Tensor,
    chain: &Chain,
    dir: Direction,
    mut noise: Noise<'_>,
    mut path: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    chain.validate()?;
    if let Noise::Fixed(maps) = &noise {
        if maps.len() < chain.steps {
            return Err(Error::data("sst", "fewer noise maps than chain steps"));
        }
    }
    let mut z = z0.clone();
    if let Some(p) = path.as_deref_mut() {
        p.push(z.clone());
    }
    for t in 0..chain.steps {
        let eta = chain.eta_at(t);
        let g = Graph::new();
        let zv = g.param(z.clone());
        let step = || -> Result<Tensor> {
            let e = energy.energy(&zv)?.sum()?;
            let dz = backward(&e, &[&zv])?.grads.remove(0).check_finite("energy gradient")?;
            Ok(dz)
        };
        let dz = step().map_err(at_step(t))?;
        let half = dir.sign() * eta / 2.0;
        let mut next = z.zip(&dz, "sgld", |a, d| a - half * d)?;
        if let Some(eps) = noise.at(t, z.shape()) {
            let s = eta.sqrt();
            next = next.zip(&eps, "sgld", |a, e| a + s * e)?;
        }
        z = next.check_finite("sgld").map_err(|e| at_step(t)(e.into()))?;
        if let Some(p) = path.as_deref_mut() {
            p.push(z.clone());
        }
    }
    Ok(z)
}

/// `zᵗ⁺¹ = zᵗ − (η/2)·∂E/∂z + √η·ε`, starting at `z0`. Noise is drawn from
/// `rng` when given and omitted otherwise.
pub fn sgld_forward<E: Energy + ?Sized>(
    energy: &E,
    z0: &Tensor,
    chain: &Chain,
    rng: Option<&mut RngStream>,
) -> Result<Tensor> {
    let noise = rng.map_or(Noise::Off, Noise::Draw);
    run_plain(energy, z0, chain, Direction::Forward, noise, None)
}

/// Like [`sgld_forward`] with the gradient term's sign flipped, so codes
/// climb the energy.
pub fn sgld_inverse<E: Energy + ?Sized>(
    energy: &E,
    z0: &Tensor,
    chain: &Chain,
    rng: Option<&mut RngStream>,
) -> Result<Tensor> {
    let noise = rng.map_or(Noise::Off, Noise::Draw);
    run_plain(energy, z0, chain, Direction::Inverse, noise, None)
}

/// Every state of a chain, `z0` first.
pub fn sgld_path<E: Energy + ?Sized>(
    energy: &E,
    z0: &Tensor,
    chain: &Chain,
    dir: Direction,
    rng: Option<&mut RngStream>,
) -> Result<Vec<Tensor>> {
    let mut path = Vec::with_capacity(chain.steps + 1);
    let noise = rng.map_or(Noise::Off, Noise::Draw);
    run_plain(energy, z0, chain, dir, noise, Some(&mut path))?;
    Ok(path)
}

/// The chain recorded on z0's graph, so that losses on its output can be
/// differentiated with respect to the energy parameters. `noise[t]` holds
/// fixed standard-normal draws for step `t`.
pub fn sgld_chain<E: Energy + ?Sized>(
    energy: &E,
    z0: &Var,
    chain: &Chain,
    dir: Direction,
    noise: Option<&[Tensor]>,
) -> Result<Var> {
    chain.validate()?;
    if noise.is_some_and(|n| n.len() < chain.steps) {
        return Err(Error::data("sst", "fewer noise maps than chain steps"));
    }
    let g = z0.graph().clone();
    // The energy gradient is taken with respect to the chain state, which
    // must therefore be reachable by the sweep.
    let mut z = if z0.requires_grad() {
        z0.clone()
    } else {
        g.param(z0.value().clone())
    };
    for t in 0..chain.steps {
        let eta = chain.eta_at(t);
        let step = |z: &Var| -> Result<Var> {
            let e = energy.energy(z)?.sum()?;
            let dz = grad(&e, &[z])?.remove(0);
            let mut next = z.sub(&dz.scale(dir.sign() * eta / 2.0)?)?;
            if let Some(maps) = noise {
                next = next.add(&g.constant(maps[t].map(|v| v * eta.sqrt())))?;
            }
            Ok(next)
        };
        z = step(&z).map_err(at_step(t))?;
    }
    Ok(z)
}

/// Standard-normal draws for one chain over a `[batch, dim]` state.
pub fn chain_noise(chain: &Chain, batch: usize, dim: usize, rng: &mut RngStream) -> Vec<Tensor> {
    (0..chain.steps).map(|_| Tensor::randn([batch, dim], rng)).collect()
}

/// Contrastive surrogate `mean E(pos) − mean E(neg)`. Its parameter gradient
/// is the likelihood gradient with the negatives held constant.
pub fn ebm_loss<E: Energy + ?Sized>(energy: &E, g: &Graph, z_pos: &Tensor, z_neg: &Tensor) -> Result<Var> {
    if z_pos.rows() == 0 || z_neg.rows() == 0 {
        return Err(Error::data("sst", "contrastive batch is empty"));
    }
    let pos = energy.energy(&g.constant(z_pos.clone()))?.mean()?;
    let neg = energy.energy(&g.constant(z_neg.clone()))?.mean()?;
    Ok(pos.sub(&neg)?)
}

/// Gradient of [`ebm_loss`] with respect to the energy net's parameters, in
/// [`Mlp::params`] order.
pub fn ebm_grad(energy: &Mlp, z_pos: &Tensor, z_neg: &Tensor) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let bound = energy.bind(&g, true);
    let loss = ebm_loss(&bound, &g, z_pos, z_neg)?;
    Ok(backward(&loss, &bound.vars())?.grads)
}

/// Mean absolute difference between source and translated codes.
pub fn loss_con(z_src: &Var, z_trans: &Var) -> Result<Var> {
    Ok(z_src.sub(z_trans)?.abs()?.mean()?)
}

/// Mean absolute difference between `z_src` and the inverse chain run from
/// `E∘G(z_trans)`.
pub fn loss_cyc<E: Energy + ?Sized>(
    z_src: &Var,
    z_trans: &Var,
    encoder: &BoundMlp,
    decoder: &BoundMlp,
    energy: &E,
    chain: &Chain,
    noise: Option<&[Tensor]>,
) -> Result<Var> {
    let back = encoder.forward(&decoder.forward(z_trans)?)?;
    let z_rec = sgld_chain(energy, &back, chain, Direction::Inverse, noise)?;
    loss_con(z_src, &z_rec)
}

/// Loss terms of one training step.
pub struct SstLosses {
    /// The energy net bound trainably on the objective's graph.
    pub energy: BoundMlp,
    pub total: Var,
    pub l_ebm: f64,
    pub l_con: f64,
    pub l_cyc: f64,
    pub e_pos: f64,
    pub e_neg: f64,
}

/// Builds `L_EBM + α·L_con + β·L_cyc` on `g`. `noise_fwd` and
/// `noise_inv` are the fixed draws of the translating and inverse chains.
/// Content and cycle losses are always reported; they only enter the
/// graph when their weight is positive.
#[allow(clippy::too_many_arguments)]
pub fn sst_objective(
    bundle: &ModelBundle,
    g: &Graph,
    z_src: &Tensor,
    z_pos: &Tensor,
    config: &EbmConfig,
    noise_fwd: Option<&[Tensor]>,
    noise_inv: Option<&[Tensor]>,
) -> Result<SstLosses> {
    let chain = config.chain();
    let src = g.constant(z_src.clone());
    let bound = bundle.energy.bind(g, true);
    let energy = &bound;
    let encoder = bundle.encoder.bind(g, false);
    let decoder = bundle.decoder.bind(g, false);
    let weighted = config.alpha > 0.0 || config.beta > 0.0;
    let (z_trans, z_neg) = if weighted {
        let zt = sgld_chain(energy, &src, &chain, Direction::Forward, noise_fwd)?;
        let neg = zt.value().clone();
        (Some(zt), neg)
    } else {
        let noise = noise_fwd.map_or(Noise::Off, Noise::Fixed);
        let neg = run_plain(&bundle.energy, z_src, &chain, Direction::Forward, noise, None)?;
        (None, neg)
    };

    let e_pos = energy.energy(&g.constant(z_pos.clone()))?;
    let e_neg = energy.energy(&g.constant(z_neg.clone()))?;
    let l_ebm = e_pos.mean()?.sub(&e_neg.mean()?)?;
    let mut total = l_ebm.clone();
    if config.energy_l2 > 0.0 {
        let reg = e_pos.square()?.mean()?.add(&e_neg.square()?.mean()?)?;
        total = total.add(&reg.scale(config.energy_l2)?)?;
    }

    let neg_var = g.constant(z_neg.clone());
    let (l_con, l_cyc) = match &z_trans {
        Some(zt) => {
            let con = loss_con(&src, zt)?;
            let cyc = loss_cyc(&src, zt, &encoder, &decoder, energy, &chain, noise_inv)?;
            if config.alpha > 0.0 {
                total = total.add(&con.scale(config.alpha)?)?;
            }
            if config.beta > 0.0 {
                total = total.add(&cyc.scale(config.beta)?)?;
            }
            (con.item(), cyc.item())
        }
        None => {
            let con = loss_con(&src, &neg_var)?.item();
            let back = bundle.encoder.apply(&bundle.decoder.apply(&z_neg, None)?, None)?;
            let noise = noise_inv.map_or(Noise::Off, Noise::Fixed);
            let rec = run_plain(&bundle.energy, &back, &chain, Direction::Inverse, noise, None)?;
            let cyc = loss_con(&src, &g.constant(rec))?.item();
            (con, cyc)
        }
    };
    Ok(SstLosses {
        energy: bound,
        l_ebm: l_ebm.item(),
        e_pos: e_pos.mean()?.item(),
        e_neg: e_neg.mean()?.item(),
        total,
        l_con,
        l_cyc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SstTraceRow {
    pub step: usize,
    pub l_ebm: f64,
    pub l_con: f64,
    pub l_cyc: f64,
    pub e_pos: f64,
    pub e_neg: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SstTrace {
    pub rows: Vec<SstTraceRow>,
}

impl SstTrace {
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
            .collect::<std::result::Result<Vec<SstTraceRow>, _>>()
            .map_err(|e| Error::format(path, e))?;
        Ok(Self { rows })
    }
}

/// A trained energy net together with the frozen coders it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub bundle: ModelBundle,
}

impl EnergyModel {
    /// Wraps a bundle whose metadata names a target site and SST config.
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        if bundle.meta.target_site.is_none() || bundle.meta.ebm.is_none() {
            return Err(Error::data("sst", "bundle carries no trained energy model"));
        }
        Ok(Self { bundle })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ModelBundle::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.bundle.save(path)
    }

    pub fn target_site(&self) -> &str {
        self.bundle.meta.target_site.as_deref().unwrap_or_default()
    }

    pub fn config(&self) -> &EbmConfig {
        self.bundle.meta.ebm.as_ref().expect("checked in new")
    }

    /// Mean energy of `codes`.
    pub fn mean_energy(&self, codes: &Tensor) -> Result<f64> {
        let e = self.bundle.energy(codes)?;
        Ok(e.sum() / e.len().max(1) as f64)
    }

    /// Forward chain from `codes`; noisy only when `rng` is given.
    pub fn translate(&self, codes: &Tensor, rng: Option<&mut RngStream>) -> Result<Tensor> {
        sgld_forward(&self.bundle.energy, codes, &self.config().chain(), rng)
    }
}

fn in_chunks(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let idx: Vec<usize> = (0..x.rows()).collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(x.rows());
    for chunk in idx.chunks(CHUNK) {
        let out = f(&x.select_rows(chunk))?;
        rows.extend((0..out.rows()).map(|i| out.row(i).to_vec()));
    }
    Ok(Tensor::stack_rows(&rows)?)
}

/// Latent codes `E(x)` of a `[n, pixels]` image batch.
pub fn encode_all(bundle: &ModelBundle, images: &Tensor) -> Result<Tensor> {
    if images.cols() != bundle.spec.pixels() {
        return Err(Error::data(
            "sst",
            format!(
                "images have {} pixels, spec expects {}",
                images.cols(),
                bundle.spec.pixels()
            ),
        ));
    }
    in_chunks(images, |x| bundle.encode_e(x))
}

/// `G(P(E(x)))` row by row in input order, decoding without decoder noise.
/// Langevin noise is injected only when `rng` is given.
pub fn harmonize(model: &EnergyModel, images: &Tensor, mut rng: Option<&mut RngStream>) -> Result<Tensor> {
    let b = &model.bundle;
    let codes = encode_all(b, images)?;
    in_chunks(&codes, |z| {
        let zt = model.translate(z, rng.as_deref_mut())?;
        b.decode_g(&zt, None)
    })
}

/// Harmonizes every image of `data`, keeping labels, masks and order.
pub fn harmonize_dataset(model: &EnergyModel, data: &Dataset, rng: Option<&mut RngStream>) -> Result<Dataset> {
    let out = harmonize(model, &data.image_tensor()?, rng)?;
    data.with_images(tensor_images(&out, model.bundle.spec.image_side)?)
}

/// Rows of a `[n, side²]` tensor as square images.
pub fn tensor_images(t: &Tensor, side: usize) -> Result<Vec<Image>> {
    (0..t.rows())
        .map(|i| Image::new(side, side, t.row(i).to_vec()))
        .collect()
}

/// `G(P(F(z)))` for `n` fresh Gaussian draws. Langevin noise is injected
/// only when `stochastic` is set.
pub fn synthesize(model: &EnergyModel, n: usize, seed: u64, stochastic: bool) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::data("sst", "synthesis count must be positive"));
    }
    let b = &model.bundle;
    let mut rng = RngStream::derive(seed, 0x534d_5301);
    let mut chain_rng = RngStream::derive(seed, 0x534d_5302);
    let z = Tensor::randn([n, b.spec.latent_dim], &mut rng);
    in_chunks(&z, |z| {
        let w = b.map_f(z)?;
        let wt = model.translate(&w, stochastic.then_some(&mut chain_rng))?;
        b.decode_g(&wt, None)
    })
}

fn check_row(row: &SstTraceRow) -> Result<()> {
    for (name, v) in [
        ("l_ebm", row.l_ebm),
        ("l_con", row.l_con),
        ("l_cyc", row.l_cyc),
        ("e_pos", row.e_pos),
        ("e_neg", row.e_neg),
    ] {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                module: "sst",
                step: row.step,
                reason: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

/// Trains the energy net of `bundle` on codes of `target` images, with
/// negatives and translations started from codes of `source` images.
/// The encoder and decoder are left bit-identical.
pub fn train_sst(
    mut bundle: ModelBundle,
    config: &EbmConfig,
    source: &Tensor,
    target: &Tensor,
    target_site: &str,
    seed: u64,
    out: Option<&Path>,
) -> Result<(EnergyModel, SstTrace)> {
    config.validate()?;
    if config.eta <= 0.0 {
        return Err(Error::config("sst", "eta", "must be positive"));
    }
    for (name, set) in [("source", source), ("target", target)] {
        if set.rows() < config.batch_size {
            return Err(Error::data(
                "sst",
                format!(
                    "{name} set has {} images, fewer than one batch of {}",
                    set.rows(),
                    config.batch_size
                ),
            ));
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let checksum = bundle.coder_checksum();
    let z_src_all = encode_all(&bundle, source)?;
    let z_tgt_all = encode_all(&bundle, target)?;
    let meta = &mut bundle.meta;
    meta.flags.retain(|f| f != "no_con" && f != "no_cyc");
    if config.alpha == 0.0 {
        meta.flags.push("no_con".into());
    }
    if config.beta == 0.0 {
        meta.flags.push("no_cyc".into());
    }
    meta.target_site = Some(target_site.to_string());
    meta.ebm = Some(config.clone());
    meta.sst_epochs = 0;

    let chain = config.chain();
    let dim = bundle.spec.latent_dim;
    let bs = config.batch_size;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), bundle.energy.params());
    let mut order_rng = RngStream::derive(seed, 0x5353_5401);
    let mut noise_rng = RngStream::derive(seed, 0x5353_5402);
    let mut trace = SstTrace::default();
    let mut step = 0;
    for _ in 0..config.epochs {
        let perm = order_rng.permutation(z_src_all.rows());
        for batch in perm.chunks_exact(bs) {
            let z_src = z_src_all.select_rows(batch);
            let pos_idx: Vec<usize> = (0..bs).map(|_| order_rng.below(z_tgt_all.rows())).collect();
            let z_pos = z_tgt_all.select_rows(&pos_idx);
            let (fwd, inv) = if config.train_noise {
                (
                    Some(chain_noise(&chain, bs, dim, &mut noise_rng)),
                    Some(chain_noise(&chain, bs, dim, &mut noise_rng)),
                )
            } else {
                (None, None)
            };
            let mut attempt = || -> Result<SstTraceRow> {
                let g = Graph::new();
                let losses = sst_objective(&bundle, &g, &z_src, &z_pos, config, fwd.as_deref(), inv.as_deref())?;
                let row = SstTraceRow {
                    step,
                    l_ebm: losses.l_ebm,
                    l_con: losses.l_con,
                    l_cyc: losses.l_cyc,
                    e_pos: losses.e_pos,
                    e_neg: losses.e_neg,
                };
                check_row(&row)?;
                let grads = backward(&losses.total, &losses.energy.vars())?;
                adam.step(&mut bundle.energy.params_mut(), &grads.grads)?;
                Ok(row)
            };
            match attempt().map_err(at_step(step)) {
                Ok(row) => {
                    if step % config.log_every == 0 {
                        trace.rows.push(row);
                    }
                }
                Err(e) => {
                    if let Some(dir) = out {
                        trace.write_csv(&dir.join(SST_TRACE_FILE))?;
                    }
                    return Err(e);
                }
            }
            step += 1;
        }
        bundle.meta.sst_epochs += 1;
        if let Some(last) = trace.rows.last() {
            let m = &mut bundle.meta.final_losses;
            m.insert("sst.l_ebm".into(), last.l_ebm);
            m.insert("sst.l_con".into(), last.l_con);
            m.insert("sst.l_cyc".into(), last.l_cyc);
        }
        if let Some(dir) = out {
            bundle.save(&dir.join(EBM_BUNDLE_FILE))?;
            trace.write_csv(&dir.join(SST_TRACE_FILE))?;
        }
    }
    if bundle.coder_checksum() != checksum {
        return Err(Error::data("sst", "encoder or decoder changed during energy training"));
    }
    Ok((EnergyModel::new(bundle)?, trace))
}
