use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{forward_graph, HourglassModel};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::heatmap::encode_gaussian;
use crate::tensor::{adam_step, AdamState, Graph, Tensor};

/// One training image (`1 x 1 x H x W`) with its target coordinates in
/// input pixels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor<f32>,
    pub target: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub seconds: f64,
}

/// Loss and parameter gradients for a single sample.
pub(super) fn sample_gradients(model: &HourglassModel, s: &TrainSample) -> Result<(f64, Vec<Tensor<f32>>)> {
    let cfg = &model.config;
    if s.target.len() != cfg.landmarks {
        return Err(Error::ShapeMismatch(format!(
            "sample has {} targets, model predicts {}",
            s.target.len(),
            cfg.landmarks
        )));
    }
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g, model.params());
    let x = g.leaf(s.image.clone());
    let out = forward_graph(&mut g, cfg, &model.bound(&vars), x)?;
    let coords = g.soft_argmax(out.heatmaps, cfg.beta)?;
    let flat: Vec<f32> = s.target.iter().flat_map(|p| [p.x as f32, p.y as f32]).collect();
    let target = g.leaf(Tensor::from_vec(&[1, cfg.landmarks, 2], flat)?);
    let mut loss = g.wing_loss(coords, target, cfg.wing_w, cfg.wing_eps)?;
    if cfg.mse_weight > 0.0 {
        let maps = encode_gaussian(&s.target, cfg.sigma_target, (cfg.height, cfg.input_width))?;
        let maps = g.leaf(maps.to_tensor());
        let m = g.mse(out.heatmaps, maps)?;
        let m = g.scale(m, cfg.mse_weight)?;
        loss = g.add(loss, m)?;
    }
    let value = g.value(loss)?.item() as f64;
    let grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    Ok((value, grads))
}

/// Adam on the Wing loss of soft-argmax coordinates, in mini-batches whose
/// gradients are averaged. Shuffling is seeded from the config, so the same
/// inputs give the same weights.
pub fn train(model: &mut HourglassModel, samples: &[TrainSample]) -> Result<TrainReport> {
    train_with(model, samples.len(), |_, i| Ok(samples[i].clone()))
}

/// Like [`train`], drawing sample `i` of `epoch` from `source`, so each
/// epoch may see a fresh variant of every sample.
///
/// Per-sample gradients within a batch run on the rayon pool and are summed
/// in batch order, so the thread count does not change the result.
pub fn train_with<F>(model: &mut HourglassModel, count: usize, source: F) -> Result<TrainReport>
where
    F: Fn(usize, usize) -> Result<TrainSample> + Sync,
{
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F5A_4D1E);
    let mut adam = AdamState::<f32>::new(cfg.lr);
    let mut order: Vec<usize> = (0..count).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        adam.lr = cosine_lr(cfg.lr, cfg.lr_final, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let shared: &HourglassModel = model;
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = source(epoch, i)?;
                    sample_gradients(shared, &s).map_err(|e| match e {
                        Error::NonFinite(what) => Error::NonFiniteLoss {
                            epoch,
                            sample: i,
                            detail: format!("non-finite {what}"),
                        },
                        other => other,
                    })
                })
                .collect();
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let (loss, grads) = r?;
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        sample: i,
                        detail: format!("loss {loss}"),
                    });
                }
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (a, g) in a.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(model.params_mut(), &grads, &mut adam)?;
        }
        let mean = total / count as f64;
        log::info!("epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps: adam.step_count(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Cosine decay from `start` at the first epoch to `end` at the last.
pub fn cosine_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs < 2 {
        return start;
    }
    let end = end.min(start);
    let t = epoch as f64 / (epochs - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos())
}
