//! Hourglass encoder/decoder whose skip connections pass through attention
//! gates, with a soft-argmax landmark head.
//!
//! Level `l` runs at `1/2^l` resolution with `min(N 2^l, 4N)` channels. Each
//! decoder level reduces the coarser feature with a 1x1 conv, upsamples it,
//! and adds the gated skip feature from the encoder before a residual block.

mod train;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::heatmap::{peak_probabilities, HeatmapStack};
use crate::tensor::gradcheck::{check, randn, GradCheckReport};
use crate::tensor::{read_weights, write_weights, Graph, NamedTensor, Real, Tensor, Var};

pub use train::{train, train_with, TrainReport, TrainSample};

/// Gate bias that saturates the sigmoid to exactly 1 in `f32`.
pub const OPEN_GATE_BIAS: f32 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HourglassConfig {
    pub depth: usize,
    pub width: usize,
    pub landmarks: usize,
    pub height: usize,
    pub input_width: usize,
    pub attention: bool,
    /// Inverse temperature of the soft-argmax decoder.
    pub beta: f64,
    pub sigma_target: f64,
    pub wing_w: f64,
    pub wing_eps: f64,
    /// Weight of the per-pixel Gaussian-target MSE term.
    pub mse_weight: f64,
    pub lr: f64,
    /// Learning rate reached at the last epoch along a cosine schedule,
    /// capped at `lr`.
    pub lr_final: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl HourglassConfig {
    /// Global stage: two reference points on a 64x64 view.
    pub fn global_default() -> Self {
        Self {
            depth: 3,
            width: 8,
            landmarks: 2,
            height: 64,
            input_width: 64,
            attention: true,
            beta: 1.0,
            sigma_target: 2.5,
            wing_w: 10.0,
            wing_eps: 2.0,
            mse_weight: 0.0,
            lr: 1e-3,
            lr_final: 1e-5,
            epochs: 20,
            batch_size: 1,
            seed: 1,
        }
    }

    /// Local stage: every landmark in the 96x96 reference frame.
    pub fn local_default(landmarks: usize) -> Self {
        Self {
            depth: 3,
            width: 16,
            landmarks,
            height: 96,
            input_width: 96,
            sigma_target: 1.5,
            epochs: 24,
            ..Self::global_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.width < 4 {
            return bad(format!("width {} below 4", self.width));
        }
        if self.landmarks < 1 {
            return bad("need at least one landmark".into());
        }
        let unit = 1usize << self.depth;
        if self.height == 0 || self.input_width == 0 || !self.height.is_multiple_of(unit) || !self.input_width.is_multiple_of(unit) {
            return bad(format!(
                "input {}x{} not divisible by 2^{}",
                self.height, self.input_width, self.depth
            ));
        }
        if !(self.beta > 0.0 && self.wing_w > 0.0 && self.wing_eps > 0.0 && self.lr > 0.0 && self.sigma_target > 0.0) {
            return bad("beta, wing parameters, sigma and learning rate must be positive".into());
        }
        if !(self.lr_final >= 0.0) {
            return bad(format!("final learning rate {} is negative", self.lr_final));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.width << level).min(4 * self.width)
    }

    pub const KEYS: [&'static str; 16] = [
        "depth",
        "width",
        "landmarks",
        "height",
        "input_width",
        "attention",
        "beta",
        "sigma_target",
        "wing_w",
        "wing_eps",
        "mse_weight",
        "lr",
        "lr_final",
        "epochs",
        "batch_size",
        "seed",
    ];

    pub fn to_config(&self, prefix: &str) -> FlatConfig {
        let mut c = FlatConfig::new();
        let k = |s: &str| format!("{prefix}{s}");
        c.set(&k("depth"), self.depth);
        c.set(&k("width"), self.width);
        c.set(&k("landmarks"), self.landmarks);
        c.set(&k("height"), self.height);
        c.set(&k("input_width"), self.input_width);
        c.set(&k("attention"), self.attention);
        c.set(&k("beta"), self.beta);
        c.set(&k("sigma_target"), self.sigma_target);
        c.set(&k("wing_w"), self.wing_w);
        c.set(&k("wing_eps"), self.wing_eps);
        c.set(&k("mse_weight"), self.mse_weight);
        c.set(&k("lr"), self.lr);
        c.set(&k("lr_final"), self.lr_final);
        c.set(&k("epochs"), self.epochs);
        c.set(&k("batch_size"), self.batch_size);
        c.set(&k("seed"), self.seed);
        c
    }

    /// Reads `<prefix><key>` entries over `base`.
    pub fn from_config(c: &FlatConfig, prefix: &str, base: &Self) -> Result<Self> {
        let mut m = base.clone();
        macro_rules! field {
            ($($f:ident),*) => {
                $(if let Some(v) = c.get(&format!("{prefix}{}", stringify!($f)))? {
                    m.$f = v;
                })*
            };
        }
        field!(
            depth,
            width,
            landmarks,
            height,
            input_width,
            attention,
            beta,
            sigma_target,
            wing_w,
            wing_eps,
            mse_weight,
            lr,
            lr_final,
            epochs,
            batch_size,
            seed
        );
        m.validate()?;
        Ok(m)
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Normal with `gain * sqrt(2 / fan_in)` standard deviation.
    He(f64),
    Normal(f64),
    Zero,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize, k: usize, init: Init) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![c_out, c_in, k, k],
        init,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![c_out],
        init: Init::Zero,
    });
}

fn block_specs(out: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize) {
    conv_specs(out, &format!("{name}.conv1"), c_in, c_out, 3, Init::He(1.0));
    // residual branch starts small so stacked blocks stay near identity
    conv_specs(out, &format!("{name}.conv2"), c_out, c_out, 3, Init::He(0.1));
    if c_in != c_out {
        conv_specs(out, &format!("{name}.skip"), c_in, c_out, 1, Init::He(0.5));
    }
}

fn gate_channels(c: usize) -> usize {
    (c / 2).max(1)
}

fn param_specs(cfg: &HourglassConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let c = |l| cfg.channels(l);
    conv_specs(&mut s, "stem", 1, c(0), 3, Init::He(1.0));
    block_specs(&mut s, "enc0", c(0), c(0));
    for l in 1..=cfg.depth {
        block_specs(&mut s, &format!("enc{l}"), c(l - 1), c(l));
    }
    block_specs(&mut s, "mid", c(cfg.depth), c(cfg.depth));
    for l in (0..cfg.depth).rev() {
        conv_specs(&mut s, &format!("up{l}"), c(l + 1), c(l), 1, Init::He(1.0));
        if cfg.attention {
            let ci = gate_channels(c(l));
            conv_specs(&mut s, &format!("ag{l}.wx"), c(l), ci, 1, Init::He(1.0));
            conv_specs(&mut s, &format!("ag{l}.wg"), c(l + 1), ci, 1, Init::He(1.0));
            conv_specs(&mut s, &format!("ag{l}.psi"), ci, 1, 1, Init::He(1.0));
        }
        block_specs(&mut s, &format!("dec{l}"), c(l), c(l));
    }
    conv_specs(&mut s, "head", c(0), cfg.landmarks, 1, Init::Normal(0.01));
    s
}

/// Parameter tensors registered on a graph, addressed by name.
pub struct Bound<'a> {
    vars: &'a [Var],
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))]
    }
}

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, pad: usize) -> Result<Var> {
    g.conv2d(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), 1, pad)
}

/// `relu(conv2(relu(conv1(x))) + skip(x))`.
fn residual_block<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, projected: bool) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv1"), x, 1)?;
    let h = g.relu(h)?;
    let h = conv(g, p, &format!("{name}.conv2"), h, 1)?;
    let skip = if projected {
        conv(g, p, &format!("{name}.skip"), x, 0)?
    } else {
        x
    };
    let s = g.add(h, skip)?;
    g.relu(s)
}

/// `x * sigmoid(psi(relu(W_x x + up(W_g g))))`, with `g` at half the
/// resolution of `x`. Returns the gated feature and the gate map.
///
/// `W_g` runs before the upsampling; for a 1x1 conv under nearest
/// upsampling the two orders agree exactly.
pub fn attention_gate<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    gating: Var,
) -> Result<(Var, Var)> {
    let gx = conv(g, p, &format!("{name}.wx"), x, 0)?;
    let gg = conv(g, p, &format!("{name}.wg"), gating, 0)?;
    let same = g.value(gg)?.shape()[2..] == g.value(gx)?.shape()[2..];
    let gg = if same { gg } else { g.upsample_nearest2(gg)? };
    let s = g.add(gx, gg)?;
    let s = g.relu(s)?;
    let a = conv(g, p, &format!("{name}.psi"), s, 0)?;
    let alpha = g.sigmoid(a)?;
    Ok((g.mul(x, alpha)?, alpha))
}

/// Heatmap logits plus the gate maps, finest level first.
pub struct ForwardOutput {
    pub heatmaps: Var,
    pub gates: Vec<Var>,
}

pub fn forward_graph<T: Real>(g: &mut Graph<T>, cfg: &HourglassConfig, p: &Bound, input: Var) -> Result<ForwardOutput> {
    let [_, c, h, w] = g.value(input)?.dims4()?;
    if c != 1 || h != cfg.height || w != cfg.input_width {
        return Err(Error::ShapeMismatch(format!(
            "model expects 1x{}x{} input, got {c}x{h}x{w}",
            cfg.height, cfg.input_width
        )));
    }
    let chan = |l| cfg.channels(l);
    let x = conv(g, p, "stem", input, 1)?;
    let x = g.relu(x)?;
    let mut skips = vec![residual_block(g, p, "enc0", x, false)?];
    for l in 1..=cfg.depth {
        let pooled = g.maxpool2(*skips.last().expect("skip"))?;
        skips.push(residual_block(g, p, &format!("enc{l}"), pooled, chan(l - 1) != chan(l))?);
    }
    let mut cur = residual_block(g, p, "mid", skips.pop().expect("bottom"), false)?;
    let mut gates = Vec::new();
    for l in (0..cfg.depth).rev() {
        let skip = skips.pop().expect("skip per level");
        let reduced = conv(g, p, &format!("up{l}"), cur, 0)?;
        let up = g.upsample_nearest2(reduced)?;
        let filtered = if cfg.attention {
            let (gated, alpha) = attention_gate(g, p, &format!("ag{l}"), skip, cur)?;
            gates.push(alpha);
            gated
        } else {
            skip
        };
        let merged = g.add(up, filtered)?;
        cur = residual_block(g, p, &format!("dec{l}"), merged, false)?;
    }
    gates.reverse();
    let heatmaps = conv(g, p, "head", cur, 0)?;
    Ok(ForwardOutput { heatmaps, gates })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourglassModel {
    pub config: HourglassConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

/// Decoded landmarks of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub points: Vec<Point2>,
    /// Largest soft-argmax probability per landmark.
    pub peak: Vec<f64>,
}

impl HourglassModel {
    pub fn new(config: HourglassConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let specs = param_specs(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let n: usize = s.shape.iter().product();
            let std = match s.init {
                Init::He(gain) => gain * (2.0 / (s.shape[1..].iter().product::<usize>()) as f64).sqrt(),
                Init::Normal(std) => std,
                Init::Zero => 0.0,
            };
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect();
            names.push(s.name);
            params.push(Tensor::from_vec(&s.shape, data)?);
        }
        Ok(Self::assemble(config, names, params))
    }

    fn assemble(config: HourglassConfig, names: Vec<String>, params: Vec<Tensor<f32>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            params,
            index,
        }
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers `tensors` (this model's parameters, possibly cast) as
    /// leaves and returns their handles.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, tensors: &[Tensor<T>]) -> Vec<Var> {
        tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    pub fn bound<'a>(&'a self, vars: &'a [Var]) -> Bound<'a> {
        Bound {
            vars,
            index: &self.index,
        }
    }

    /// Sets every gate to the fully open limit: `psi` weights zero and a
    /// saturating bias.
    pub fn open_gates(&mut self) {
        for l in 0..self.config.depth {
            if let Some(w) = self.param_mut(&format!("ag{l}.psi.w")) {
                w.data_mut().fill(0.0);
            }
            if let Some(b) = self.param_mut(&format!("ag{l}.psi.b")) {
                b.data_mut().fill(OPEN_GATE_BIAS);
            }
        }
    }

    /// The same network without gates, sharing every other parameter.
    pub fn without_gates(&self) -> Self {
        let config = HourglassConfig {
            attention: false,
            ..self.config.clone()
        };
        let (names, params) = self
            .names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| !n.starts_with("ag"))
            .map(|(n, t)| (n.clone(), t.clone()))
            .unzip();
        Self::assemble(config, names, params)
    }

    /// Heatmap logits `1 x K x H x W` and gate maps for one image.
    pub fn forward_with_gates(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g, &self.params);
        let x = g.leaf(image.clone());
        let out = forward_graph(&mut g, &self.config, &self.bound(&vars), x)?;
        let gates = out
            .gates
            .iter()
            .map(|&v| g.value(v).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(out.heatmaps)?.clone(), gates))
    }

    pub fn forward(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward_with_gates(image)?.0)
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<Prediction> {
        let heat = HeatmapStack::from_tensor(&self.forward(image)?)?;
        let points = crate::heatmap::decode_soft_argmax(&heat, self.config.beta)?;
        let peak = peak_probabilities(&heat, self.config.beta);
        Ok(Prediction { points, peak })
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    /// Sidecar path holding the config next to a weights file.
    pub fn sidecar_path(weights: &Path) -> PathBuf {
        let mut s = weights.as_os_str().to_owned();
        s.push(".cfg");
        PathBuf::from(s)
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        write_weights(weights, &self.named_tensors())?;
        let text = self.config.to_config("").to_text("hourglass model config");
        std::fs::write(Self::sidecar_path(weights), text)?;
        Ok(())
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let sidecar = Self::sidecar_path(weights);
        let c = FlatConfig::load(&sidecar)?;
        c.reject_unknown(|k| HourglassConfig::KEYS.contains(&k))?;
        let config = HourglassConfig::from_config(&c, "", &HourglassConfig::global_default())?;
        let expected = param_specs(&config);
        let stored = read_weights(weights)?;
        if stored.len() != expected.len() {
            return Err(Error::format(
                weights,
                format!("{} tensors stored, config needs {}", stored.len(), expected.len()),
            ));
        }
        for ((name, t), spec) in stored.iter().zip(&expected) {
            if *name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::format(
                    weights,
                    format!("tensor `{name}` {:?} does not match `{}` {:?}", t.shape(), spec.name, spec.shape),
                ));
            }
        }
        let (names, params) = stored.into_iter().unzip();
        Ok(Self::assemble(config, names, params))
    }
}

/// Finite-difference check of the full training loss (network, soft-argmax
/// and Wing loss) in `f64`, over `samples` randomly chosen parameters.
pub fn gradcheck_model(cfg: &HourglassConfig, samples: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let model = HourglassModel::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // nonzero biases keep activations off the relu kink
    let inputs: Vec<Tensor<f64>> = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| {
            let t = p.cast::<f64>();
            if n == "head.w" {
                // the training init is tiny; scale it up so upstream gradients
                // stay well above finite-difference roundoff
                randn(t.shape(), 0.5, &mut rng)
            } else if n.ends_with(".b") && !n.contains("psi") {
                let r = randn(t.shape(), 0.1, &mut rng);
                Tensor::from_vec(t.shape(), t.data().iter().zip(r.data()).map(|(a, b)| a + b).collect())
                    .expect("same shape")
            } else {
                t
            }
        })
        .collect();
    let image = randn(&[1, 1, cfg.height, cfg.input_width], 0.5, &mut rng);
    let target: Vec<f64> = (0..cfg.landmarks)
        .flat_map(|_| {
            let x: f64 = rng.random_range(0.0..(cfg.input_width - 1) as f64);
            let y: f64 = rng.random_range(0.0..(cfg.height - 1) as f64);
            [x, y]
        })
        .collect();
    let target = Tensor::from_vec(&[1, cfg.landmarks, 2], target)?;
    check("hourglass+AG wing loss", &inputs, samples, 1e-5, tolerance, &mut rng, |g, v| {
        let x = g.leaf(image.clone());
        let out = forward_graph(g, cfg, &model.bound(v), x)?;
        let coords = g.soft_argmax(out.heatmaps, cfg.beta)?;
        let t = g.leaf(target.clone());
        g.wing_loss(coords, t, cfg.wing_w, cfg.wing_eps)
    })
}
