//! Finite-difference checks over every differentiable primitive and the five
//! networks, shared by the `selftest` command and the test suites.

use serde::Serialize;

use crate::error::Result;
use crate::nets::{init_networks, Mlp, ModelBundle, NetworkSpec, LEAKY_SLOPE};
use crate::numerics::{finite_diff_check, NumericsError, RngStream, Tensor, Var};

/// Central-difference step used by the suite.
pub const FD_STEP: f64 = 1e-6;
/// Relative error bound used by the suite.
pub const FD_TOL: f64 = 1e-5;

type Inputs = fn(&mut RngStream) -> (Tensor, Vec<Tensor>);
type Body = Box<dyn Fn(&Var, &Trial) -> Result<Var>>;
type Draw = Box<dyn Fn(&mut RngStream) -> Result<Trial>>;

/// Operands of one trial: the checked argument, constants and, for the
/// network cases, the network itself.
pub struct Trial {
    pub x: Tensor,
    pub consts: Vec<Tensor>,
    pub net: Option<Mlp>,
}

/// One differentiable function of a single tensor argument; the remaining
/// operands are drawn per trial and held constant.
pub struct GradCase {
    pub name: String,
    draw: Draw,
    body: Body,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn randn(shape: [usize; 2], rng: &mut RngStream) -> Tensor {
    Tensor::randn(shape, rng)
}

fn positive(shape: [usize; 2], rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform_in(0.5, 2.0);
    }
    t
}

/// Weighted sum so that every output element reaches the loss with a
/// distinct coefficient.
fn reduce(y: &Var, w: &Tensor) -> Result<Var> {
    let w = y.graph().constant(w.clone());
    Ok(y.mul(&w)?.sum()?)
}

fn case(name: &str, inputs: Inputs, body: impl Fn(&Var, &[Tensor]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name: name.into(),
        draw: Box::new(move |r| {
            let (x, consts) = inputs(r);
            Ok(Trial { x, consts, net: None })
        }),
        body: Box::new(move |x, t| body(x, &t.consts)),
    }
}

/// Elementwise unary op on a `[3, 4]` input, reduced with random weights.
fn unary(name: &str, inputs: Inputs, op: fn(&Var) -> Result<Var, NumericsError>) -> GradCase {
    case(name, inputs, move |x, k| reduce(&op(x)?, &k[0]))
}

/// Every recorded primitive, each operand position checked separately.
pub fn primitive_cases() -> Vec<GradCase> {
    let m34: Inputs = |r| (randn([3, 4], r), vec![randn([3, 4], r), randn([3, 4], r)]);
    let p34: Inputs = |r| (positive([3, 4], r), vec![randn([3, 4], r), positive([3, 4], r)]);
    let k = |g: &Var, t: &Tensor| g.graph().constant(t.clone());
    vec![
        case(
            "matmul.lhs",
            |r| (randn([3, 4], r), vec![randn([4, 5], r), randn([3, 5], r)]),
            move |x, c| reduce(&x.matmul(&k(x, &c[0]))?, &c[1]),
        ),
        case(
            "matmul.rhs",
            |r| (randn([4, 5], r), vec![randn([3, 4], r), randn([3, 5], r)]),
            move |x, c| reduce(&k(x, &c[0]).matmul(x)?, &c[1]),
        ),
        case(
            "matmul_t.lhs",
            |r| (randn([3, 4], r), vec![randn([5, 4], r), randn([3, 5], r)]),
            move |x, c| reduce(&x.matmul_t(&k(x, &c[0]))?, &c[1]),
        ),
        case(
            "matmul_t.rhs",
            |r| (randn([5, 4], r), vec![randn([3, 4], r), randn([3, 5], r)]),
            move |x, c| reduce(&k(x, &c[0]).matmul_t(x)?, &c[1]),
        ),
        case("add", m34, move |x, c| reduce(&x.add(&k(x, &c[1]))?, &c[0])),
        case("sub.lhs", m34, move |x, c| reduce(&x.sub(&k(x, &c[1]))?, &c[0])),
        case("sub.rhs", m34, move |x, c| reduce(&k(x, &c[1]).sub(x)?, &c[0])),
        case("mul", m34, move |x, c| reduce(&x.mul(&k(x, &c[1]))?, &c[0])),
        case("mul.self", m34, |x, c| reduce(&x.mul(x)?, &c[0])),
        case("div.lhs", p34, move |x, c| reduce(&x.div(&k(x, &c[1]))?, &c[0])),
        case("div.rhs", p34, move |x, c| reduce(&k(x, &c[1]).div(x)?, &c[0])),
        unary("scale", m34, |x| x.scale(-1.7)),
        unary("neg", m34, |x| x.neg()),
        unary("add_scalar", m34, |x| x.add_scalar(0.3)),
        case(
            "add_row.matrix",
            |r| (randn([3, 4], r), vec![randn([3, 4], r), Tensor::randn([4], r)]),
            move |x, c| reduce(&x.add_row(&k(x, &c[1]))?, &c[0]),
        ),
        case(
            "add_row.row",
            |r| (Tensor::randn([4], r), vec![randn([3, 4], r), randn([3, 4], r)]),
            move |x, c| reduce(&k(x, &c[1]).add_row(x)?, &c[0]),
        ),
        case(
            "sum_rows",
            |r| (randn([3, 4], r), vec![Tensor::randn([4], r)]),
            |x, c| reduce(&x.sum_rows()?, &c[0]),
        ),
        case(
            "broadcast_rows",
            |r| (Tensor::randn([4], r), vec![randn([3, 4], r)]),
            |x, c| reduce(&x.broadcast_rows(3)?, &c[0]),
        ),
        case(
            "sum_cols",
            |r| (randn([3, 4], r), vec![randn([3, 1], r)]),
            |x, c| reduce(&x.sum_cols()?, &c[0]),
        ),
        case(
            "broadcast_cols",
            |r| (randn([3, 1], r), vec![randn([3, 4], r)]),
            |x, c| reduce(&x.broadcast_cols(4)?, &c[0]),
        ),
        case("sum", m34, |x, c| Ok(reduce(x, &c[0])?.sum()?.scale(1.3)?)),
        case("mean", m34, |x, c| {
            Ok(x.mul(&x.graph().constant(c[0].clone()))?.mean()?)
        }),
        case(
            "broadcast_scalar",
            |r| (Tensor::scalar(r.normal()), vec![randn([3, 4], r)]),
            |x, c| reduce(&x.broadcast_scalar(&[3, 4])?, &c[0]),
        ),
        case(
            "mul_scalar.tensor",
            |r| (randn([3, 4], r), vec![randn([3, 4], r), Tensor::scalar(r.normal())]),
            move |x, c| reduce(&x.mul_scalar(&k(x, &c[1]))?, &c[0]),
        ),
        case(
            "mul_scalar.scalar",
            |r| (Tensor::scalar(r.normal()), vec![randn([3, 4], r), randn([3, 4], r)]),
            move |x, c| reduce(&k(x, &c[1]).mul_scalar(x)?, &c[0]),
        ),
        unary("abs", m34, |x| x.abs()),
        unary("square", m34, |x| x.square()),
        case("l1_norm", m34, |x, _| Ok(x.l1_norm()?)),
        case("sq_l2_norm", m34, |x, _| Ok(x.sq_l2_norm()?)),
        unary("leaky_relu", m34, |x| x.leaky_relu(LEAKY_SLOPE)),
        unary("softplus", m34, |x| x.softplus()),
        unary("sigmoid", m34, |x| x.sigmoid()),
        unary("exp", m34, |x| x.exp()),
        unary("log", p34, |x| x.log()),
    ]
}

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        image_side: 4,
        latent_dim: 5,
        f_layers: 3,
        d_layers: 3,
        coder_blocks: 3,
        coder_width: 12,
        energy_layers: 2,
        energy_width: 8,
    }
}

/// A network with fresh weights, random biases and, for the decoder, open
/// noise gates; the loss weights every output and noise is held fixed.
fn net_case(name: &str, pick: fn(&ModelBundle) -> &Mlp) -> GradCase {
    GradCase {
        name: name.into(),
        draw: Box::new(move |r| {
            let bundle = init_networks(&small_spec(), r.next_u64())?;
            let mut net = pick(&bundle).clone();
            for b in &mut net.blocks {
                for v in b.bias.data_mut() {
                    *v = 0.3 * r.normal();
                }
                if let Some(s) = &mut b.noise_scale {
                    *s = Tensor::scalar(0.5 * r.normal());
                }
            }
            let x = Tensor::randn([3, net.in_width()], r);
            let mut consts = vec![Tensor::randn([3, net.out_width()], r)];
            consts.extend(net.sample_noise(3, r));
            Ok(Trial {
                x,
                consts,
                net: Some(net),
            })
        }),
        body: Box::new(|x, t| {
            let net = t.net.as_ref().expect("network trial");
            let noisy = net.blocks.iter().any(|b| b.noise_scale.is_some());
            let y = net
                .bind(x.graph(), false)
                .forward_noisy(x, noisy.then_some(&t.consts[1..]))?;
            reduce(&y, &t.consts[0])
        }),
    }
}

/// Input gradients of the mapping, decoder, encoder, discriminator and
/// energy networks.
pub fn network_cases() -> Vec<GradCase> {
    vec![
        net_case("net.mapping", |b| &b.mapping),
        net_case("net.decoder", |b| &b.decoder),
        net_case("net.encoder", |b| &b.encoder),
        net_case("net.discriminator", |b| &b.discriminator),
        net_case("net.energy", |b| &b.energy),
    ]
}

impl GradCase {
    /// Runs `trials` independent draws from `seed`.
    pub fn run(&self, trials: usize, seed: u64) -> Result<CaseOutcome> {
        let mut rng = RngStream::new(seed);
        let mut out = CaseOutcome {
            name: self.name.clone(),
            trials,
            failures: 0,
            max_rel_err: 0.0,
        };
        for _ in 0..trials {
            let trial = (self.draw)(&mut rng)?;
            let report = finite_diff_check(|v: &Var| (self.body)(v, &trial), &trial.x, FD_STEP, FD_TOL)?;
            if !report.passed {
                out.failures += 1;
            }
            if report.max_rel_err.is_nan() || report.max_rel_err > out.max_rel_err {
                out.max_rel_err = report.max_rel_err;
            }
        }
        Ok(out)
    }
}

/// Every primitive and network case, each with its own derived seed.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<CaseOutcome>> {
    primitive_cases()
        .into_iter()
        .chain(network_cases())
        .enumerate()
        .map(|(i, c)| c.run(trials, RngStream::derive(seed, i as u64).next_u64()))
        .collect()
}

/// Outcome of one fixed invariant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Invariant {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn inv(name: &str, passed: bool, detail: impl Into<String>) -> Invariant {
    Invariant {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Closed-form and identity checks across the modules.
pub fn invariants(seed: u64) -> Result<Vec<Invariant>> {
    use crate::metrics::{cluster_segment, dice_scores, pcc, psnr, ssim, Histogram, PSNR_CAP_DB};
    use crate::numerics::{read_tensor_record, write_tensor_record};
    use crate::phantoms::{make_multisite, render, sample_anatomy, PhantomConfig, SiteStyle, TissueIntensities};
    use crate::sst::{sgld_forward, sgld_inverse, Chain, Quadratic};

    let mut out = Vec::new();
    let mut rng = RngStream::derive(seed, 0x5345_4c46);

    let z = Tensor::randn([4, 3], &mut rng);
    let eta = 0.3;
    let chain = Chain::new(1, eta);
    let fwd = sgld_forward(&Quadratic, &z, &chain, None)?;
    let back = sgld_inverse(&Quadratic, &z, &chain, None)?;
    // Up to the rounding of `z - (eta/2) z` against `(1 - eta/2) z`.
    let exact = |got: &Tensor, c: f64| {
        got.data()
            .iter()
            .zip(z.data())
            .all(|(g, v)| (g - c * v).abs() <= 1e-15 * v.abs().max(1.0))
    };
    out.push(inv(
        "sgld.quadratic_forward",
        exact(&fwd, 1.0 - eta / 2.0),
        "one noiseless step is (1 - eta/2) z",
    ));
    out.push(inv(
        "sgld.quadratic_inverse",
        exact(&back, 1.0 + eta / 2.0),
        "one noiseless step is (1 + eta/2) z",
    ));
    let still = sgld_forward(&Quadratic, &z, &Chain::new(5, 0.0), None)?;
    out.push(inv(
        "sgld.zero_step_identity",
        still == z,
        "eta = 0 leaves codes unchanged",
    ));

    let anat = sample_anatomy(32, TissueIntensities::default(), &mut rng)?;
    let mask = anat.mask();
    let fg = mask.foreground();
    let styled = SiteStyle {
        noise_sigma: 0.02,
        ..SiteStyle::identity("a")
    };
    let img = render(&anat, &styled, &mut rng)?;
    out.push(inv(
        "metrics.ssim_self",
        (ssim(&img, &img, &fg)? - 1.0).abs() < 1e-12,
        "ssim(x, x) = 1",
    ));
    out.push(inv(
        "metrics.psnr_self",
        psnr(&img, &img, &fg)? == PSNR_CAP_DB,
        "psnr(x, x) is capped",
    ));
    out.push(inv(
        "metrics.pcc_self",
        (pcc(&img, &img, &fg)? - 1.0).abs() < 1e-12,
        "pcc(x, x) = 1",
    ));
    let h = Histogram::new(&img, &fg, 64)?;
    let total: f64 = h.probs.iter().sum();
    out.push(inv(
        "metrics.histogram_mass",
        (total - 1.0).abs() < 1e-9,
        format!("sum = {total}"),
    ));
    let base = anat.base_image();
    let d = dice_scores(&cluster_segment(&base, &fg)?, &mask)?;
    out.push(inv(
        "metrics.segment_identity_style",
        d.csf == 1.0 && d.gm == 1.0 && d.wm == 1.0,
        format!("dice {d:?}"),
    ));

    let cfg = PhantomConfig {
        image_side: 16,
        sites: 2,
        per_site: 4,
        traveling: 1,
        ..PhantomConfig::default()
    };
    let a = make_multisite(&cfg, seed)?;
    let b = make_multisite(&cfg, seed)?;
    out.push(inv(
        "phantoms.deterministic",
        a.samples == b.samples,
        "same seed, same dataset",
    ));

    let t = Tensor::randn([3, 5], &mut rng);
    let mut buf = Vec::new();
    write_tensor_record(&mut buf, "t", &t)?;
    let back = read_tensor_record(&mut buf.as_slice())?;
    let same = matches!(&back, Some((n, r)) if n == "t" && r.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    out.push(inv("numerics.record_roundtrip", same, "tensor records are bit-exact"));
    Ok(out)
}
