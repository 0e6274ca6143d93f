//! Central finite-difference checks of the recorded backward pass.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error denominator floor; gradients below it compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` with central differences on
/// `samples` randomly chosen input elements (all of them if fewer exist).
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    samples: usize,
    step: f64,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss)?.item())
    };

    let mut g = Graph::new();
    g.set_check_finite(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let picks = sample(rng, total, samples.min(total)).into_vec();
    let mut perturbed = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for flat in &picks {
        let (ti, ei) = locate(inputs, *flat);
        let orig = inputs[ti].data()[ei];
        perturbed[ti].data_mut()[ei] = orig + step;
        let up = eval(&perturbed)?;
        perturbed[ti].data_mut()[ei] = orig - step;
        let down = eval(&perturbed)?;
        perturbed[ti].data_mut()[ei] = orig;
        let numeric = (up - down) / (2.0 * step);
        max_rel = max_rel.max(relative_error(analytic[ti].data()[ei], numeric));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked: picks.len(),
        max_rel_error: max_rel,
        tolerance,
    })
}

fn locate(inputs: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("flat index beyond inputs")
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Uniform values in `[lo, hi)` whose magnitude stays at least `gap` away
/// from zero, keeping kinks out of finite-difference reach.
pub fn rand_away_from_zero(shape: &[usize], lo: f64, hi: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// `sum(x * r)` for a fixed random projection `r`, turning any op output
/// into a scalar with a nontrivial gradient.
fn project(g: &mut Graph<f64>, x: Var, proj: &Tensor<f64>) -> Result<Var> {
    let r = g.leaf(proj.clone());
    let m = g.mul(x, r)?;
    g.sum(m)
}

/// Gradient checks for every operator in isolation, in 64-bit mode.
pub fn operator_suite(seed: u64, samples: usize, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut reports = Vec::new();

    let x = randn(&[2, 3, 6, 6], 1.0, &mut rng);
    let w = randn(&[4, 3, 3, 3], 0.5, &mut rng);
    let b = randn(&[4], 0.5, &mut rng);
    let proj = randn(&[2, 4, 6, 6], 1.0, &mut rng);
    reports.push(check("conv2d 3x3 pad 1", &[x.clone(), w, b], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        project(g, y, &proj)
    })?);

    let w = randn(&[2, 3, 3, 3], 0.5, &mut rng);
    let b = randn(&[2], 0.5, &mut rng);
    let proj = randn(&[2, 2, 2, 2], 1.0, &mut rng);
    reports.push(check("conv2d 3x3 stride 2", &[x.clone(), w, b], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 0)?;
        project(g, y, &proj)
    })?);

    let w = randn(&[5, 3, 1, 1], 0.5, &mut rng);
    let b = randn(&[5], 0.5, &mut rng);
    let proj = randn(&[2, 5, 6, 6], 1.0, &mut rng);
    reports.push(check("conv2d 1x1", &[x.clone(), w, b], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
        project(g, y, &proj)
    })?);

    let xk = rand_away_from_zero(&[2, 3, 6, 6], -2.0, 2.0, 0.01, &mut rng);
    let proj = randn(&[2, 3, 6, 6], 1.0, &mut rng);
    reports.push(check("relu", &[xk], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.relu(v[0])?;
        project(g, y, &proj)
    })?);

    reports.push(check("sigmoid", std::slice::from_ref(&x), samples, h, tolerance, &mut rng, |g, v| {
        let y = g.sigmoid(v[0])?;
        project(g, y, &proj)
    })?);

    let y2 = randn(&[2, 3, 6, 6], 1.0, &mut rng);
    reports.push(check("add", &[x.clone(), y2.clone()], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, &proj)
    })?);

    reports.push(check("mul", &[x.clone(), y2], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, &proj)
    })?);

    let gate = randn(&[2, 1, 6, 6], 1.0, &mut rng);
    reports.push(check("mul broadcast", &[x.clone(), gate], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, &proj)
    })?);

    let proj_half = randn(&[2, 3, 3, 3], 1.0, &mut rng);
    reports.push(check("maxpool2", std::slice::from_ref(&x), samples, h, tolerance, &mut rng, |g, v| {
        let y = g.maxpool2(v[0])?;
        project(g, y, &proj_half)
    })?);

    let small = randn(&[2, 3, 3, 3], 1.0, &mut rng);
    reports.push(check("upsample_nearest2", &[small], samples, h, tolerance, &mut rng, |g, v| {
        let y = g.upsample_nearest2(v[0])?;
        project(g, y, &proj)
    })?);

    reports.push(check("sum and scale", std::slice::from_ref(&x), samples, h, tolerance, &mut rng, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let s = g.sum(sq)?;
        g.scale(s, -0.75)
    })?);

    let heat = randn(&[1, 3, 8, 7], 1.0, &mut rng);
    let proj_xy = randn(&[1, 3, 2], 1.0, &mut rng);
    reports.push(check("soft_argmax", &[heat], samples, h, tolerance, &mut rng, |g, v| {
        let c = g.soft_argmax(v[0], 1.7)?;
        project(g, c, &proj_xy)
    })?);

    // residuals spread over both wing branches, clear of |x| = w and 0
    let pred = rand_away_from_zero(&[64], -25.0, 25.0, 0.05, &mut rng);
    let target = Tensor::zeros(&[64]);
    reports.push(check("wing_loss", &[pred.clone(), target.clone()], samples, h, tolerance, &mut rng, |g, v| {
        g.wing_loss(v[0], v[1], 10.0, 2.0)
    })?);

    reports.push(check("mse", &[pred, target], samples, h, tolerance, &mut rng, |g, v| {
        g.mse(v[0], v[1])
    })?);

    Ok(reports)
}
