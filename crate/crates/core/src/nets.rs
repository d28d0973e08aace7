//! The five networks: mapping `F`, decoder `G`, encoder `E`, latent
//! discriminator `D`, and the energy function over latent codes.
//!
//! Every network is a stack of dense blocks. The coder pair uses seven blocks
//! whose widths shrink geometrically from the pixel count to the latent width
//! (clipped at [`NetworkSpec::coder_width`]); decoder blocks carry a learned
//! noise gate that starts closed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_tensor_record, write_tensor_record, Graph, RngStream, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    None,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    /// `[out, in]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
    pub activation: Activation,
    /// Scalar gate on injected Gaussian noise (decoder blocks only).
    pub noise_scale: Option<Tensor>,
}

impl DenseBlock {
    fn he_init(inp: usize, out: usize, activation: Activation, noisy: bool, rng: &mut RngStream) -> Self {
        let std = (2.0 / inp as f64).sqrt();
        let weight = Tensor::randn([out, inp], rng).map(|v| v * std);
        Self {
            weight,
            bias: Tensor::zeros([out]),
            activation,
            noise_scale: noisy.then(|| Tensor::scalar(0.0)),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// A stack of dense blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub blocks: Vec<DenseBlock>,
}

impl Mlp {
    fn build(widths: &[usize], last: Activation, noisy: bool, rng: &mut RngStream) -> Self {
        let n = widths.len() - 1;
        let blocks = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { Activation::LeakyRelu };
                DenseBlock::he_init(widths[i], widths[i + 1], act, noisy, rng)
            })
            .collect();
        Self { blocks }
    }

    pub fn in_width(&self) -> usize {
        self.blocks[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.blocks.last().map(DenseBlock::out_width).unwrap_or(0)
    }

    /// Parameters in a fixed order shared by [`Mlp::params_mut`] and [`BoundMlp::vars`].
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if let Some(n) = &b.noise_scale {
                out.push(n);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(n) = &mut b.noise_scale {
                out.push(n);
            }
        }
        out
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &b.weight));
            out.push((format!("{prefix}.{i}.bias"), &b.bias));
            if let Some(n) = &b.noise_scale {
                out.push((format!("{prefix}.{i}.noise"), n));
            }
        }
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut b.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut b.bias));
            if let Some(n) = &mut b.noise_scale {
                out.push((format!("{prefix}.{i}.noise"), n));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundMlp {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundMlp {
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    weight: leaf(&b.weight),
                    bias: leaf(&b.bias),
                    noise: b.noise_scale.as_ref().map(leaf),
                    activation: b.activation,
                })
                .collect(),
        }
    }

    /// One standard-normal noise map per block, shaped `[batch, out_width]`.
    pub fn sample_noise(&self, batch: usize, rng: &mut RngStream) -> Vec<Tensor> {
        self.blocks
            .iter()
            .map(|b| Tensor::randn([batch, b.out_width()], rng))
            .collect()
    }

    /// Forward pass on plain tensors, without recording gradients.
    pub fn apply(&self, x: &Tensor, noise: Option<&[Tensor]>) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let out = bound.forward_noisy(&g.constant(x.clone()), noise)?;
        Ok(out.value().clone())
    }
}

struct BoundBlock {
    weight: Var,
    bias: Var,
    noise: Option<Var>,
    activation: Activation,
}

/// An [`Mlp`] whose parameters live on a graph.
pub struct BoundMlp {
    blocks: Vec<BoundBlock>,
}

impl BoundMlp {
    pub fn forward(&self, x: &Var) -> Result<Var> {
        self.forward_noisy(x, None)
    }

    /// Forward pass; `noise[i]` is injected into block `i` through its gate.
    pub fn forward_noisy(&self, x: &Var, noise: Option<&[Tensor]>) -> Result<Var> {
        let in_width = self.blocks[0].weight.shape()[1];
        if x.shape().len() != 2 || x.shape()[1] != in_width {
            return Err(crate::numerics::NumericsError::ShapeMismatch {
                op: "mlp_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![x.shape().first().copied().unwrap_or(0), in_width],
            }
            .into());
        }
        if let Some(noise) = noise {
            if noise.len() != self.blocks.len() {
                return Err(Error::data(
                    "nets",
                    format!("expected {} noise maps, got {}", self.blocks.len(), noise.len()),
                ));
            }
        }
        let g = x.graph().clone();
        let mut h = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            h = h.matmul_t(&b.weight)?.add_row(&b.bias)?;
            if let (Some(gate), Some(noise)) = (&b.noise, noise) {
                let eta = g.constant(noise[i].clone());
                h = h.add(&eta.mul_scalar(gate)?)?;
            }
            h = match b.activation {
                Activation::LeakyRelu => h.leaky_relu(LEAKY_SLOPE)?,
                Activation::None => h,
                Activation::Sigmoid => h.sigmoid()?,
            };
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<&Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if let Some(n) = &b.noise {
                out.push(n);
            }
        }
        out
    }
}

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub image_side: usize,
    pub latent_dim: usize,
    pub f_layers: usize,
    pub d_layers: usize,
    pub coder_blocks: usize,
    /// Upper bound on hidden coder widths.
    pub coder_width: usize,
    pub energy_layers: usize,
    pub energy_width: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            image_side: 64,
            latent_dim: 64,
            f_layers: 8,
            d_layers: 3,
            coder_blocks: 7,
            coder_width: 256,
            energy_layers: 2,
            energy_width: 256,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_side", self.image_side),
            ("latent_dim", self.latent_dim),
            ("f_layers", self.f_layers),
            ("d_layers", self.d_layers),
            ("coder_blocks", self.coder_blocks),
            ("coder_width", self.coder_width),
            ("energy_layers", self.energy_layers),
            ("energy_width", self.energy_width),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config("nets", name, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    /// Encoder widths from the pixel count down to the latent width.
    pub fn coder_widths(&self) -> Vec<usize> {
        let n = self.coder_blocks;
        let top = self.pixels() as f64;
        let bottom = self.latent_dim as f64;
        (0..=n)
            .map(|i| {
                if i == 0 {
                    self.pixels()
                } else if i == n {
                    self.latent_dim
                } else {
                    let w = top * (bottom / top).powf(i as f64 / n as f64);
                    (w.round() as usize).clamp(1, self.coder_width.max(1))
                }
            })
            .collect()
    }
}

/// Bookkeeping stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub sig_epochs: usize,
    pub sst_epochs: usize,
    pub final_losses: BTreeMap<String, f64>,
    /// Ablation and mode markers, e.g. `no_pix`, `no_con`, `no_cyc`.
    pub flags: Vec<String>,
    pub target_site: Option<String>,
    pub ebm: Option<crate::sst::EbmConfig>,
}

/// All network parameters plus the spec and seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub mapping: Mlp,
    pub decoder: Mlp,
    pub encoder: Mlp,
    pub discriminator: Mlp,
    pub energy: Mlp,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    format: String,
    spec: NetworkSpec,
    seed: u64,
    meta: TrainingMeta,
    params: usize,
}

const BUNDLE_FORMAT: &str = "lest-bundle/1";

/// He-initialised networks; biases and noise gates start at zero.
pub fn init_networks(spec: &NetworkSpec, seed: u64) -> Result<ModelBundle> {
    spec.validate()?;
    let l = spec.latent_dim;
    let mut rng = RngStream::derive(seed, 0x6e657473);
    let mapping = Mlp::build(&vec![l; spec.f_layers + 1], Activation::None, false, &mut rng);
    let enc_widths = spec.coder_widths();
    let encoder = Mlp::build(&enc_widths, Activation::None, false, &mut rng);
    let dec_widths: Vec<usize> = enc_widths.iter().rev().copied().collect();
    let decoder = Mlp::build(&dec_widths, Activation::Sigmoid, true, &mut rng);
    let mut d_widths = vec![l; spec.d_layers];
    d_widths.push(1);
    let discriminator = Mlp::build(&d_widths, Activation::None, false, &mut rng);
    let mut e_widths = vec![l];
    e_widths.extend(std::iter::repeat_n(spec.energy_width, spec.energy_layers));
    e_widths.push(1);
    let energy = Mlp::build(&e_widths, Activation::None, false, &mut rng);
    Ok(ModelBundle {
        spec: spec.clone(),
        seed,
        mapping,
        decoder,
        encoder,
        discriminator,
        energy,
        meta: TrainingMeta::default(),
    })
}

fn check_width(op: &'static str, x: &Tensor, width: usize) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != width {
        return Err(crate::numerics::NumericsError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![x.rows(), width],
        }
        .into());
    }
    Ok(())
}

impl ModelBundle {
    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|(_, n)| n.param_count()).sum()
    }

    fn nets(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("F", &self.mapping),
            ("G", &self.decoder),
            ("E", &self.encoder),
            ("D", &self.discriminator),
            ("energy", &self.energy),
        ]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.nets().into_iter().flat_map(|(p, n)| n.named_params(p)).collect()
    }

    /// `W = F(z)` for a `[batch, latent_dim]` batch.
    pub fn map_f(&self, z: &Tensor) -> Result<Tensor> {
        check_width("map_F", z, self.spec.latent_dim)?;
        self.mapping.apply(z, None)
    }

    /// `x̃ = G(w, η)`; `noise = None` decodes with η = 0.
    pub fn decode_g(&self, w: &Tensor, noise: Option<&[Tensor]>) -> Result<Tensor> {
        check_width("decode_G", w, self.spec.latent_dim)?;
        self.decoder.apply(w, noise)
    }

    pub fn encode_e(&self, x: &Tensor) -> Result<Tensor> {
        check_width("encode_E", x, self.spec.pixels())?;
        self.encoder.apply(x, None)
    }

    /// Pre-sigmoid logits, `[batch, 1]`.
    pub fn disc_d(&self, codes: &Tensor) -> Result<Tensor> {
        check_width("disc_D", codes, self.spec.latent_dim)?;
        self.discriminator.apply(codes, None)
    }

    /// Energies, `[batch, 1]`.
    pub fn energy(&self, codes: &Tensor) -> Result<Tensor> {
        check_width("energy", codes, self.spec.latent_dim)?;
        self.energy.apply(codes, None)
    }

    /// Order-independent digest of the encoder and decoder weights.
    pub fn coder_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for net in [&self.encoder, &self.decoder] {
            for t in net.params() {
                for v in t.data() {
                    h ^= v.to_bits();
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_params();
        let header = BundleHeader {
            format: BUNDLE_FORMAT.to_string(),
            spec: self.spec.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
            params: named.len(),
        };
        let tmp = path.with_extension("tmp");
        let write = || -> Result<()> {
            let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            let line = serde_json::to_string(&header).map_err(|e| Error::format(path, e))?;
            w.write_all(line.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
            for (name, t) in &named {
                write_tensor_record(&mut w, name, t)?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
            Ok(())
        };
        write()?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: BundleHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::format(path, e))?;
        if header.format != BUNDLE_FORMAT {
            return Err(Error::format(
                path,
                format!("unknown bundle format {:?}", header.format),
            ));
        }
        let mut bundle = init_networks(&header.spec, header.seed)?;
        bundle.meta = header.meta;
        let mut records = BTreeMap::new();
        while let Some((name, t)) = read_tensor_record(&mut r)? {
            if records.insert(name.clone(), t).is_some() {
                return Err(Error::format(path, format!("duplicate parameter {name}")));
            }
        }
        if records.len() != header.params {
            return Err(Error::format(
                path,
                format!("header declares {} parameters, found {}", header.params, records.len()),
            ));
        }
        for (prefix, net) in [
            ("F", &mut bundle.mapping),
            ("G", &mut bundle.decoder),
            ("E", &mut bundle.encoder),
            ("D", &mut bundle.discriminator),
            ("energy", &mut bundle.energy),
        ] {
            for (name, slot) in net.named_params_mut(prefix) {
                let t = records
                    .remove(&name)
                    .ok_or_else(|| Error::format(path, format!("missing parameter {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::format(
                        path,
                        format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape()),
                    ));
                }
                *slot = t;
            }
        }
        if let Some(name) = records.keys().next() {
            return Err(Error::format(path, format!("unexpected parameter {name}")));
        }
        Ok(bundle)
    }
}
