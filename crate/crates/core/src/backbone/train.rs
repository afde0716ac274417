//! DDPM ε-prediction trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::Fmap;

use super::dataset::{sample_record, DatasetConfig};
use super::layers::Grads;
use super::{ConditionEmbedding, Denoiser, LatentCodec, PixelCodec};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub grad_clip: f64,
    pub ema_decay: f32,
    /// Probability of replacing the caption by the null embedding.
    pub cond_dropout: f64,
    pub seed: u64,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            warmup: 100,
            grad_clip: 1.0,
            ema_decay: 0.999,
            cond_dropout: 0.15,
            seed: 0,
            dataset: DatasetConfig::default(),
        }
    }
}

/// Loss and progress of one optimizer step, handed to the progress callback.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first and last `window` steps.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

/// `mean((v_θ(√ᾱ x0 + √(1−ᾱ) ε, t, c) − (√ᾱ ε − √(1−ᾱ) x0))²)`; adds its
/// gradient into `grads` when given.
pub fn sample_loss(net: &Denoiser, x0: &Fmap, noise: &Fmap, t: usize, cond: &ConditionEmbedding, grads: Option<&mut Grads>) -> Result<f64> {
    let ab = net.schedule().alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let mut xt = x0.clone();
    for (x, e) in xt.data.iter_mut().zip(&noise.data) {
        *x = a * *x + b * e;
    }
    let (pred, cache) = net.forward_train(&xt, t, cond)?;
    let n = pred.data.len() as f64;
    let mut loss = 0.0f64;
    let mut d = pred.clone();
    for (g, ((p, e), x)) in d.data.iter_mut().zip(pred.data.iter().zip(&noise.data).zip(&x0.data)) {
        let r = (p - (a * e - b * x)) as f64;
        loss += r * r;
        *g = (2.0 * r / n) as f32;
    }
    if let Some(grads) = grads {
        net.backward(&cache, &d, grads);
    }
    Ok(loss / n)
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(g: &Grads) -> Self {
        Self {
            m: g.data.iter().map(|x| vec![0.0; x.len()]).collect(),
            v: g.data.iter().map(|x| vec![0.0; x.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Denoiser, g: &Grads, lr: f32) {
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in net.params_mut().params_mut().iter_mut().enumerate() {
            let (m, v, gi) = (&mut self.m[i], &mut self.v[i], &g.data[i]);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * gi[j];
                v[j] = b2 * v[j] + (1.0 - b2) * gi[j] * gi[j];
                p.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

fn random_noise(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Fmap {
    let data = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    Fmap::from_vec(c, h, w, data).expect("sized")
}

/// Trains `net` in place and finally swaps in the EMA weights.
/// `progress` sees every step and may request an early stop by returning `false`.
pub fn train_toy(net: &mut Denoiser, cfg: &TrainConfig, mut progress: impl FnMut(&StepStats, &Denoiser) -> bool) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = net.params().zeros_like();
    let mut adam = Adam::new(&grads);
    let mut ema: Vec<Vec<f32>> = net.params().params().iter().map(|p| p.data.clone()).collect();
    let mut report = TrainReport::default();
    let t_max = net.schedule().train_steps;
    let dataset = DatasetConfig {
        resolution: net.config().resolution,
        ..cfg.dataset.clone()
    };
    for step in 1..=cfg.steps {
        grads.zero();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let rec = sample_record(&dataset, &mut rng);
            let x0 = PixelCodec.encode(&rec.image);
            let t = rng.random_range(1..=t_max);
            let cond = if rng.random::<f64>() < cfg.cond_dropout {
                net.null_embedding()
            } else {
                net.embed_prompt(&rec.caption)
            };
            let noise = random_noise(x0.c, x0.h, x0.w, &mut rng);
            loss += sample_loss(net, &x0, &noise, t, &cond, Some(&mut grads))?;
        }
        loss /= cfg.batch as f64;
        grads.scale(1.0 / cfg.batch as f32);
        let norm = grads.global_norm();
        if norm > cfg.grad_clip {
            grads.scale((cfg.grad_clip / norm) as f32);
        }
        let lr = cfg.lr * (step as f32 / cfg.warmup.max(1) as f32).min(1.0);
        adam.step(net, &grads, lr);
        let decay = cfg.ema_decay.min((1.0 + step as f32) / (10.0 + step as f32));
        for (e, p) in ema.iter_mut().zip(net.params().params()) {
            for (a, b) in e.iter_mut().zip(&p.data) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        report.losses.push(loss);
        let stats = StepStats {
            step,
            loss,
            grad_norm: norm,
            lr,
        };
        if !progress(&stats, net) {
            break;
        }
    }
    for (p, e) in net.params_mut().params_mut().iter_mut().zip(ema) {
        p.data = e;
    }
    Ok(report)
}
