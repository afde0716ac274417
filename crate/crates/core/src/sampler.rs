//! DDIM inversion and denoising with Local Perturbation and masked
//! classifier-free guidance.

use std::path::PathBuf;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionContext, EditAttention, KvCache, KvRecorder};
use crate::backbone::{ConditionEmbedding, Denoiser, LatentCodec, NoiseSchedule, PlainAttention};
use crate::error::{Error, Result};
use crate::imaging::{downsample_mask, ImageBuffer, MaskBuffer};
use crate::tensor::Fmap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Denoising steps `τ1`.
    pub steps: usize,
    /// Guidance scale `w`.
    pub guidance: f64,
    pub seed: u64,
    pub step2_tau0: usize,
    pub step3_tau0_completion: usize,
    pub step3_tau0_general: usize,
    /// Prompt used while inverting; empty means the null embedding.
    pub inversion_prompt: String,
    /// Fixed-point iterations per inversion step (0 = plain DDIM inversion).
    pub inversion_refine: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            seed: 0,
            step2_tau0: 1,
            step3_tau0_completion: 13,
            step3_tau0_general: 25,
            inversion_prompt: String::new(),
            inversion_refine: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::invalid("at least two sampler steps are required"));
        }
        if !(self.guidance >= 0.0) || !self.guidance.is_finite() {
            return Err(Error::invalid("guidance scale must be finite and non-negative"));
        }
        for t in [self.step2_tau0, self.step3_tau0_completion, self.step3_tau0_general] {
            if t >= self.steps {
                return Err(Error::invalid(format!("tau0 {t} must be below the step count {}", self.steps)));
            }
        }
        Ok(())
    }

    /// `τ0` constants are stated for 50 steps; other step counts scale them.
    pub fn scaled_tau0(&self, tau0_at_50: usize) -> usize {
        if self.steps == 50 {
            tau0_at_50
        } else {
            ((tau0_at_50 as f64 * self.steps as f64 / 50.0).round() as usize).min(self.steps - 1)
        }
    }
}

/// `x̂0 = (x_t − √(1−ᾱ_t) ε)/√ᾱ_t`.
#[inline]
pub fn predict_x0(x: f64, eps: f64, ab_t: f64) -> f64 {
    (x - (1.0 - ab_t).sqrt() * eps) / ab_t.sqrt()
}

/// Deterministic update of one value.
#[inline]
pub fn ddim_scalar(x: f64, eps: f64, ab_t: f64, ab_prev: f64) -> f64 {
    ab_prev.sqrt() * predict_x0(x, eps, ab_t) + (1.0 - ab_prev).sqrt() * eps
}

/// `x_prev = √ᾱ_prev x̂0 + √(1−ᾱ_prev) ε`.
pub fn ddim_step(x: &Fmap, eps: &Fmap, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Fmap> {
    if !x.same_shape(eps) {
        return Err(Error::dims("latent and noise prediction shapes"));
    }
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let mut out = x.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = ddim_scalar(*o as f64, *e as f64, ab_t, ab_prev) as f32;
    }
    Ok(out)
}

/// `σ_t = √((1−ᾱ_prev)/(1−ᾱ_t) · (1−ᾱ_t/ᾱ_prev))`.
pub fn ddpm_sigma(t: usize, t_prev: usize, schedule: &NoiseSchedule) -> f64 {
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    if ab_t >= ab_prev {
        return 0.0;
    }
    ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).max(0.0).sqrt()
}

/// Noise field for timestep `t` under `seed`: element `i` is always the
/// `i`-th draw, whatever mask it is later used under.
pub fn lp_noise(seed: u64, t: usize, len: usize) -> Vec<f32> {
    let key = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (t as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[inline]
fn stochastic_scalar(x: f64, eps: f64, noise: f64, ab_t: f64, ab_prev: f64, sigma: f64) -> f64 {
    ab_prev.sqrt() * predict_x0(x, eps, ab_t) + (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt() * eps + sigma * noise
}

/// Stochastic update with `σ = ddpm_sigma` everywhere.
pub fn ddpm_step(x: &Fmap, eps: &Fmap, t: usize, t_prev: usize, schedule: &NoiseSchedule, noise: &[f32]) -> Result<Fmap> {
    if !x.same_shape(eps) || noise.len() != x.data.len() {
        return Err(Error::dims("ddpm operands"));
    }
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let sigma = ddpm_sigma(t, t_prev, schedule);
    let mut out = x.clone();
    for ((o, e), n) in out.data.iter_mut().zip(&eps.data).zip(noise) {
        *o = stochastic_scalar(*o as f64, *e as f64, *n as f64, ab_t, ab_prev, sigma) as f32;
    }
    Ok(out)
}

/// Mixed update: stochastic inside `mask`, deterministic elsewhere; `x̂0` is
/// shared by both.
pub fn lp_step(x: &Fmap, eps: &Fmap, t: usize, t_prev: usize, schedule: &NoiseSchedule, mask: &MaskBuffer, noise: &[f32]) -> Result<Fmap> {
    if !x.same_shape(eps) || noise.len() != x.data.len() {
        return Err(Error::dims("local perturbation operands"));
    }
    if mask.height() != x.h || mask.width() != x.w {
        return Err(Error::dims(format!(
            "perturbation mask {}x{} does not match latent {}x{}",
            mask.height(),
            mask.width(),
            x.h,
            x.w
        )));
    }
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let sigma = ddpm_sigma(t, t_prev, schedule);
    let hw = x.hw();
    let m = mask.data();
    let mut out = x.clone();
    for c in 0..x.c {
        for i in 0..hw {
            let idx = c * hw + i;
            let (xv, ev) = (x.data[idx] as f64, eps.data[idx] as f64);
            out.data[idx] = if m[i] != 0 {
                stochastic_scalar(xv, ev, noise[idx] as f64, ab_t, ab_prev, sigma)
            } else {
                ddim_scalar(xv, ev, ab_t, ab_prev)
            } as f32;
        }
    }
    Ok(out)
}

/// `ε̂ = ε_∅ + w (ε_c − ε_∅) M₂`.
pub fn masked_cfg(eps_null: &Fmap, eps_cond: &Fmap, w: f64, m2: &MaskBuffer) -> Result<Fmap> {
    if !eps_null.same_shape(eps_cond) || m2.height() != eps_null.h || m2.width() != eps_null.w {
        return Err(Error::dims("guidance operands"));
    }
    let hw = eps_null.hw();
    let m = m2.data();
    let w = w as f32;
    let mut out = eps_null.clone();
    for c in 0..out.c {
        for i in 0..hw {
            if m[i] != 0 {
                let idx = c * hw + i;
                out.data[idx] = eps_null.data[idx] + w * (eps_cond.data[idx] - eps_null.data[idx]);
            }
        }
    }
    Ok(out)
}

/// Latents of an inversion, clean first: `latents[j]` sits at noise level
/// `j`, where level 0 is `x_0` and level `steps` is `x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrajectory {
    pub steps: usize,
    pub latents: Vec<Fmap>,
    pub prompt: String,
    /// Content hash of (image, prompt, sampler settings, weights).
    pub key: String,
}

impl DiffusionTrajectory {
    /// Latent the denoising step `τ` starts from.
    pub fn at_step(&self, tau: usize) -> &Fmap {
        &self.latents[self.steps + 1 - tau]
    }

    pub fn x_t(&self) -> &Fmap {
        &self.latents[self.steps]
    }

    pub fn x_0(&self) -> &Fmap {
        &self.latents[0]
    }

    fn write_to(&self, out: &mut impl std::io::Write) -> Result<()> {
        out.write_u64::<LittleEndian>(self.latents.len() as u64)?;
        for l in &self.latents {
            for d in [l.c, l.h, l.w] {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            for v in &l.data {
                out.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    fn read_from(input: &mut impl std::io::Read, steps: usize, prompt: &str, key: &str) -> Result<Self> {
        let n = input.read_u64::<LittleEndian>()? as usize;
        if n != steps + 1 {
            return Err(Error::MissingCache("trajectory length does not match the step count".into()));
        }
        let mut latents = Vec::with_capacity(n);
        for _ in 0..n {
            let c = input.read_u64::<LittleEndian>()? as usize;
            let h = input.read_u64::<LittleEndian>()? as usize;
            let w = input.read_u64::<LittleEndian>()? as usize;
            let mut data = vec![0.0f32; c * h * w];
            input.read_f32_into::<LittleEndian>(&mut data)?;
            latents.push(Fmap::from_vec(c, h, w, data)?);
        }
        Ok(Self {
            steps,
            latents,
            prompt: prompt.to_string(),
            key: key.to_string(),
        })
    }
}

/// Output of a denoising run.
#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    /// Latent after each step: `latents[τ−1]` follows step `τ`.
    pub latents: Vec<Fmap>,
    pub image: ImageBuffer,
}

impl DenoiseOutput {
    pub fn final_latent(&self) -> &Fmap {
        self.latents.last().expect("at least one step")
    }
}

/// Per-run perturbation and guidance regions in pixel space.
#[derive(Debug, Clone, Default)]
pub struct SamplingMasks {
    /// Local Perturbation region; `None` means pure DDIM.
    pub perturb: Option<MaskBuffer>,
    /// Guidance region `𝓜₂`; `None` disables guidance.
    pub guide: Option<MaskBuffer>,
}

/// Inversion and denoising bound to one network and codec.
pub struct Sampler<'a> {
    pub net: &'a Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub config: SamplerConfig,
    /// Directory for persisted trajectories and key/value caches.
    pub cache_dir: Option<PathBuf>,
    fingerprint: String,
}

/// Content hash of all network weights and the schedule.
pub fn weights_fingerprint(net: &Denoiser) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(net.config()).unwrap_or_default());
    h.update(serde_json::to_vec(net.schedule()).unwrap_or_default());
    for p in net.params().params() {
        h.update(p.name.as_bytes());
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}

impl<'a> Sampler<'a> {
    pub fn new(net: &'a Denoiser, codec: &'a dyn LatentCodec, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net,
            codec,
            config,
            cache_dir: None,
            fingerprint: weights_fingerprint(net),
        })
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.net.schedule()
    }

    fn embed(&self, prompt: &str) -> ConditionEmbedding {
        self.net.embed_prompt(prompt)
    }

    fn to_latent_mask(&self, mask: &MaskBuffer, latent: &Fmap) -> Result<MaskBuffer> {
        if mask.height() == latent.h && mask.width() == latent.w {
            Ok(mask.clone())
        } else {
            downsample_mask(mask, latent.h, latent.w)
        }
    }

    /// Cache key of an inversion.
    pub fn trajectory_key(&self, img: &ImageBuffer, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        h.update((img.height() as u64).to_le_bytes());
        h.update((img.width() as u64).to_le_bytes());
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
        h.update(prompt.as_bytes());
        h.update([0]);
        h.update((self.config.steps as u64).to_le_bytes());
        h.update((self.config.inversion_refine as u64).to_le_bytes());
        hex::encode(&h.finalize()[..16])
    }

    /// Deterministic DDIM inversion from `x_0` to `x_T`.
    pub fn invert(&self, img: &ImageBuffer, prompt: &str) -> Result<DiffusionTrajectory> {
        let steps = self.config.steps;
        let sched = self.schedule();
        let cond = self.embed(prompt);
        let mut x = self.codec.encode(img);
        let mut latents = Vec::with_capacity(steps + 1);
        latents.push(x.clone());
        for tau in (1..=steps).rev() {
            let (t, t_prev) = sched.step_pair(steps, tau);
            let eps = self.net.predict_noise(&x, t, &cond, &mut PlainAttention)?;
            let mut next = ddim_step(&x, &eps, t_prev, t, sched)?;
            for _ in 0..self.config.inversion_refine {
                // Fixed point of x_t ↦ invert(x_prev, ε(x_t, t)), which makes the
                // matching denoising step land back on x_prev.
                let eps = self.net.predict_noise(&next, t, &cond, &mut PlainAttention)?;
                next = ddim_step(&x, &eps, t_prev, t, sched)?;
            }
            if !next.is_finite() {
                return Err(Error::Numerical(format!("inversion diverged at step {tau}")));
            }
            x = next;
            latents.push(x.clone());
        }
        Ok(DiffusionTrajectory {
            steps,
            latents,
            prompt: prompt.to_string(),
            key: self.trajectory_key(img, prompt),
        })
    }

    /// Reference pass over an inverted trajectory recording the source
    /// keys/values of `layers` at every step.
    pub fn record_kv(&self, traj: &DiffusionTrajectory, layers: &[usize]) -> Result<KvCache> {
        let null = self.net.null_embedding();
        let mut cache = KvCache::new();
        for tau in 1..=traj.steps {
            let (t, _) = self.schedule().step_pair(traj.steps, tau);
            let mut rec = KvRecorder {
                cache: &mut cache,
                tau,
                layers,
            };
            self.net.predict_noise(traj.at_step(tau), t, &null, &mut rec)?;
        }
        Ok(cache)
    }

    /// Inversion plus key/value recording, persisted under the cache
    /// directory when one is configured.
    pub fn invert_with_kv(&self, img: &ImageBuffer, prompt: &str, layers: &[usize]) -> Result<(Arc<DiffusionTrajectory>, Arc<KvCache>)> {
        let key = self.trajectory_key(img, prompt);
        let layer_tag: String = layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-");
        if let Some(dir) = &self.cache_dir {
            let tp = dir.join(format!("{key}.traj"));
            let kp = dir.join(format!("{key}.L{layer_tag}.kv"));
            if tp.exists() && kp.exists() {
                let traj = DiffusionTrajectory::read_from(&mut std::io::BufReader::new(std::fs::File::open(&tp)?), self.config.steps, prompt, &key);
                let kv = KvCache::read_from(&mut std::io::BufReader::new(std::fs::File::open(&kp)?));
                if let (Ok(traj), Ok(kv)) = (traj, kv) {
                    if kv.is_complete(self.config.steps, layers) {
                        return Ok((Arc::new(traj), Arc::new(kv)));
                    }
                }
                log::warn!("ignoring unreadable cache entry {key}");
            }
        }
        let traj = self.invert(img, prompt)?;
        let kv = self.record_kv(&traj, layers)?;
        if let Some(dir) = &self.cache_dir {
            std::fs::create_dir_all(dir)?;
            let write = |name: String, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
                let mut buf = Vec::new();
                f(&mut buf)?;
                let tmp = dir.join(format!("{name}.tmp{}", std::process::id()));
                std::fs::write(&tmp, buf)?;
                std::fs::rename(tmp, dir.join(name))?;
                Ok(())
            };
            write(format!("{key}.traj"), &|b| traj.write_to(b))?;
            write(format!("{key}.L{layer_tag}.kv"), &|b| kv.write_to(b))?;
        }
        Ok((Arc::new(traj), Arc::new(kv)))
    }

    /// Runs all `steps` denoising steps from `x_T`. Each step evaluates the
    /// null and conditional branches, merges them with masked guidance and
    /// advances with the Local Perturbation update.
    pub fn denoise(&self, x_t: &Fmap, cond: &ConditionEmbedding, ctx: &mut AttentionContext, masks: &SamplingMasks, seed: u64) -> Result<DenoiseOutput> {
        let steps = self.config.steps;
        let sched = self.schedule();
        let null = self.net.null_embedding();
        let empty = MaskBuffer::empty(x_t.h, x_t.w);
        let perturb = match &masks.perturb {
            Some(m) => self.to_latent_mask(m, x_t)?,
            None => empty.clone(),
        };
        let guide = match &masks.guide {
            Some(m) => self.to_latent_mask(m, x_t)?,
            None => empty,
        };
        let mut x = x_t.clone();
        let mut latents = Vec::with_capacity(steps);
        for tau in 1..=steps {
            ctx.current_tau = tau;
            let (t, t_prev) = sched.step_pair(steps, tau);
            let eps_null = self.net.predict_noise(&x, t, &null, &mut EditAttention { ctx })?;
            let eps_cond = self.net.predict_noise(&x, t, cond, &mut EditAttention { ctx })?;
            let eps = masked_cfg(&eps_null, &eps_cond, self.config.guidance, &guide)?;
            let noise = if perturb.is_empty() {
                vec![0.0; x.data.len()]
            } else {
                lp_noise(seed, t, x.data.len())
            };
            x = lp_step(&x, &eps, t, t_prev, sched, &perturb, &noise)?;
            if !x.is_finite() {
                return Err(Error::Numerical(format!("denoising diverged at step {tau}")));
            }
            latents.push(x.clone());
        }
        let image = self.codec.decode(&x)?;
        Ok(DenoiseOutput { latents, image })
    }

    /// Invert then denoise with plain attention and no guidance.
    pub fn reconstruct(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let traj = self.invert(img, &self.config.inversion_prompt)?;
        let mut ctx = AttentionContext::plain(self.config.steps);
        let cond = self.embed(&self.config.inversion_prompt);
        Ok(self.denoise(traj.x_t(), &cond, &mut ctx, &SamplingMasks::default(), self.config.seed)?.image)
    }
}
