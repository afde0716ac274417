//! The three-step edit: transform the object, clear the vacated region,
//! then refine the target region. Also hosts replay, appearance transfer
//! and multi-object composition.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionContext, AttentionMode, BlendKind, BlendSchedule, KvCache, RegionMasks};
use crate::backbone::{ConditionEmbedding, Denoiser, LatentCodec};
use crate::error::{Error, Result};
use crate::geometry::{self, AffineParams, CameraIntrinsics, DepthMap, SyntheticDepth};
use crate::imaging::{
    blend, boundary_mask, dilate, mask_union, save_mask_png, save_png, scaled_inpaint_radius, ImageBuffer, MaskBuffer,
};
use crate::instruction::{EditInstruction, Step1Transform};
use crate::sampler::{masked_cfg, lp_noise, lp_step, DiffusionTrajectory, Sampler, SamplerConfig, SamplingMasks};
use crate::tensor::Fmap;

/// Self-attention variant used in Steps 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Tca,
    Mmsa,
    Ssa,
    Sdsa,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub sampler: SamplerConfig,
    /// Layers whose self-attention is edited; `None` = all decoder layers.
    pub hooked_layers: Option<Vec<usize>>,
    pub attention: AttentionVariant,
    pub blend: BlendKind,
    /// Step-2 masked branch restricts every query, not just those in `M_s`.
    pub step2_restrict_all: bool,
    pub step2_prompt: String,
    /// Ring width of the Step-3 perturbation region without `M_d`.
    pub boundary_radius: usize,
    /// Perturb the whole latent instead of the local region.
    pub global_perturbation: bool,
    /// Apply the prompt everywhere instead of the local region.
    pub global_guidance: bool,
    pub disable_perturbation: bool,
    pub disable_guidance: bool,
    /// Depth used for 3D rotations when a request carries none.
    pub default_depth: SyntheticDepth,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            hooked_layers: None,
            attention: AttentionVariant::Tca,
            blend: BlendKind::Linear,
            step2_restrict_all: true,
            step2_prompt: "empty scene".into(),
            boundary_radius: 3,
            global_perturbation: false,
            global_guidance: false,
            disable_perturbation: false,
            disable_guidance: false,
            default_depth: SyntheticDepth::Constant { depth: 1.0 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: ImageBuffer,
    pub source_mask: MaskBuffer,
    pub instruction: EditInstruction,
    pub completion_mask: Option<MaskBuffer>,
    /// Object label steering Step 3.
    pub prompt: Option<String>,
    /// Overrides the configured Step-2 prompt.
    pub step2_prompt: Option<String>,
    /// Extra region added to the Step-3 perturbation mask.
    pub extra_perturb: Option<MaskBuffer>,
    pub depth: Option<DepthMap>,
    pub seed: Option<u64>,
}

impl EditRequest {
    pub fn new(image: ImageBuffer, source_mask: MaskBuffer, instruction: EditInstruction) -> Self {
        Self {
            image,
            source_mask,
            instruction,
            completion_mask: None,
            prompt: None,
            step2_prompt: None,
            extra_perturb: None,
            depth: None,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image.same_dims(&self.source_mask) {
            return Err(Error::dims("source mask does not match the image"));
        }
        if self.source_mask.is_empty() {
            return Err(Error::invalid("source mask is empty"));
        }
        for m in [&self.completion_mask, &self.extra_perturb].into_iter().flatten() {
            if !self.image.same_dims(m) {
                return Err(Error::dims("auxiliary mask does not match the image"));
            }
        }
        self.instruction.validate()
    }
}

/// Output of one diffusion step of the pipeline.
#[derive(Debug, Clone)]
pub struct StepRun {
    pub image: ImageBuffer,
    /// Latent after the first denoising step.
    pub first_latent: Fmap,
    pub perturb_mask: MaskBuffer,
    pub seconds: f64,
    pub trajectory_key: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Durations {
    pub step1: f64,
    pub step2: f64,
    pub step3: f64,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub source: ImageBuffer,
    pub source_mask: MaskBuffer,
    pub coarse: ImageBuffer,
    pub target_mask: MaskBuffer,
    pub background: ImageBuffer,
    pub composite: ImageBuffer,
    pub output: ImageBuffer,
    /// `M_t ∪ M_d`.
    pub full_target: MaskBuffer,
    pub completion_mask: Option<MaskBuffer>,
    pub instruction: EditInstruction,
    pub durations: Durations,
    pub config: PipelineConfig,
    pub cache_keys: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct ResultManifest<'a> {
    instruction: &'a EditInstruction,
    durations: &'a Durations,
    config: &'a PipelineConfig,
    cache_keys: &'a [String],
    warnings: &'a [String],
    files: Vec<(&'static str, &'static str)>,
}

impl EditResult {
    pub const FILES: [(&'static str, &'static str); 8] = [
        ("source", "source.png"),
        ("source_mask", "source_mask.png"),
        ("coarse", "coarse.png"),
        ("target_mask", "target_mask.png"),
        ("background", "background.png"),
        ("composite", "composite.png"),
        ("output", "output.png"),
        ("full_target", "full_target_mask.png"),
    ];

    /// PNGs for every buffer plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_png(&self.source, dir.join("source.png"))?;
        save_mask_png(&self.source_mask, dir.join("source_mask.png"))?;
        save_png(&self.coarse, dir.join("coarse.png"))?;
        save_mask_png(&self.target_mask, dir.join("target_mask.png"))?;
        save_png(&self.background, dir.join("background.png"))?;
        save_png(&self.composite, dir.join("composite.png"))?;
        save_png(&self.output, dir.join("output.png"))?;
        save_mask_png(&self.full_target, dir.join("full_target_mask.png"))?;
        let mut files = Self::FILES.to_vec();
        if let Some(m) = &self.completion_mask {
            save_mask_png(m, dir.join("completion_mask.png"))?;
            files.push(("completion_mask", "completion_mask.png"));
        }
        let manifest = ResultManifest {
            instruction: &self.instruction,
            durations: &self.durations,
            config: &self.config,
            cache_keys: &self.cache_keys,
            warnings: &self.warnings,
            files,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

type Memo = Vec<(String, Arc<DiffusionTrajectory>, Arc<KvCache>)>;

const MEMO_CAPACITY: usize = 8;

/// Immutable editing configuration bound to a network. Safe to share
/// across threads; each call carries its own run state.
pub struct Editor {
    net: Arc<Denoiser>,
    codec: Arc<dyn LatentCodec>,
    pub config: PipelineConfig,
    cache_dir: Option<PathBuf>,
    memo: Mutex<Memo>,
}

impl Editor {
    pub fn new(net: Arc<Denoiser>, codec: Arc<dyn LatentCodec>, config: PipelineConfig) -> Result<Self> {
        config.sampler.validate()?;
        Ok(Self {
            net,
            codec,
            config,
            cache_dir: None,
            memo: Mutex::new(Vec::new()),
        })
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn shared_net(&self) -> Arc<Denoiser> {
        self.net.clone()
    }

    pub fn codec(&self) -> Arc<dyn LatentCodec> {
        self.codec.clone()
    }

    pub fn sampler(&self) -> Result<Sampler<'_>> {
        let s = Sampler::new(&self.net, self.codec.as_ref(), self.config.sampler.clone())?;
        Ok(match &self.cache_dir {
            Some(d) => s.with_cache_dir(d.clone()),
            None => s,
        })
    }

    fn hooked(&self) -> Vec<usize> {
        self.config.hooked_layers.clone().unwrap_or_else(|| self.net.decoder_layer_ids())
    }

    /// Inversion of `img` with its key/value cache, memoized in memory.
    pub fn source_inversion(&self, img: &ImageBuffer) -> Result<(Arc<DiffusionTrajectory>, Arc<KvCache>)> {
        let sampler = self.sampler()?;
        let prompt = self.config.sampler.inversion_prompt.clone();
        let key = sampler.trajectory_key(img, &prompt);
        if let Some((_, t, k)) = self.memo.lock().expect("memo lock").iter().find(|(k, _, _)| *k == key) {
            return Ok((t.clone(), k.clone()));
        }
        let (t, k) = sampler.invert_with_kv(img, &prompt, &self.hooked())?;
        let mut memo = self.memo.lock().expect("memo lock");
        if memo.len() >= MEMO_CAPACITY {
            memo.remove(0);
        }
        memo.push((key, t.clone(), k.clone()));
        Ok((t, k))
    }

    fn scaled_tau0(&self, tau0: usize) -> usize {
        self.config.sampler.scaled_tau0(tau0).max(1)
    }

    fn schedule(&self, tau0: usize) -> Result<BlendSchedule> {
        let steps = self.config.sampler.steps;
        match self.config.blend {
            BlendKind::Linear => BlendSchedule::linear(tau0, steps),
            BlendKind::HardSwitch => BlendSchedule::hard_switch(tau0, steps),
        }
    }

    fn mode(&self, tca: AttentionMode) -> AttentionMode {
        match self.config.attention {
            AttentionVariant::Tca => tca,
            AttentionVariant::Mmsa => AttentionMode::Mmsa,
            AttentionVariant::Ssa => AttentionMode::Ssa,
            AttentionVariant::Sdsa => AttentionMode::Sdsa,
            AttentionVariant::Plain => AttentionMode::Plain,
        }
    }

    fn embed(&self, prompt: &str) -> ConditionEmbedding {
        self.net.embed_prompt(prompt)
    }

    fn perturb_region(&self, local: MaskBuffer) -> Option<MaskBuffer> {
        if self.config.disable_perturbation {
            None
        } else if self.config.global_perturbation {
            Some(MaskBuffer::full(local.height(), local.width()))
        } else {
            Some(local)
        }
    }

    /// `(𝓜₁, 𝓜₂)` for a prompt over a local region.
    fn guidance_regions(&self, prompt: &str, cross: MaskBuffer, guide: Option<MaskBuffer>) -> (Option<MaskBuffer>, Option<MaskBuffer>) {
        if prompt.is_empty() || self.config.disable_guidance {
            return (None, None);
        }
        if self.config.global_guidance {
            let full = MaskBuffer::full(cross.height(), cross.width());
            return (Some(full.clone()), Some(full));
        }
        (Some(cross), guide)
    }

    pub fn step1(&self, req: &EditRequest) -> Result<(ImageBuffer, MaskBuffer)> {
        req.validate()?;
        let (h, w) = (req.image.height(), req.image.width());
        match req.instruction.to_transform(h, w)? {
            Step1Transform::Identity => Ok((req.image.clone(), req.source_mask.clone())),
            Step1Transform::Planar(p) => geometry::transform_2d(&req.image, &req.source_mask, &p, None),
            Step1Transform::Depth(r) => {
                let depth = match &req.depth {
                    Some(d) => d.clone(),
                    None => geometry::synthetic_depth(&self.config.default_depth, h, w)?,
                };
                geometry::transform_3d(&req.image, &req.source_mask, &depth, &CameraIntrinsics::default_for(h, w), &r)
            }
        }
    }

    /// Clears the source region of `img`.
    pub fn step2(&self, img: &ImageBuffer, source_mask: &MaskBuffer, prompt: &str, seed: u64) -> Result<StepRun> {
        if !img.same_dims(source_mask) {
            return Err(Error::dims("source mask does not match the image"));
        }
        if source_mask.is_empty() {
            return Err(Error::invalid("source mask is empty"));
        }
        if source_mask.is_full() {
            log::warn!("source mask covers the whole image; background attention falls back to plain");
        }
        let start = Instant::now();
        let (traj, kv) = self.source_inversion(img)?;
        let dilated = dilate(source_mask, scaled_inpaint_radius(img.height(), img.width()));
        let regions = RegionMasks {
            source: Some(dilated.clone()),
            target: Some(dilated.clone()),
            cross: None,
        };
        let (cross, guide) = self.guidance_regions(prompt, dilated.clone(), Some(dilated.clone()));
        let regions = RegionMasks { cross, ..regions };
        let mode = self.mode(AttentionMode::Step2 {
            restrict_all: self.config.step2_restrict_all,
        });
        let mut ctx = AttentionContext::new(
            mode,
            self.schedule(self.scaled_tau0(self.config.sampler.step2_tau0))?,
            &regions,
            self.net.attention_layers(),
            self.hooked(),
            Some(kv),
        )?;
        let perturb = self.perturb_region(dilated.clone());
        let cond = if regions.cross.is_some() { self.embed(prompt) } else { self.net.null_embedding() };
        let masks = SamplingMasks {
            perturb: perturb.clone(),
            guide,
        };
        let out = self.sampler()?.denoise(traj.x_t(), &cond, &mut ctx, &masks, seed)?;
        Ok(StepRun {
            image: out.image,
            first_latent: out.latents[0].clone(),
            perturb_mask: perturb.unwrap_or_else(|| MaskBuffer::empty(img.height(), img.width())),
            seconds: start.elapsed().as_secs_f64(),
            trajectory_key: traj.key.clone(),
        })
    }

    /// Refines the target region of the composite `Î_c`.
    #[allow(clippy::too_many_arguments)]
    pub fn step3(
        &self,
        composite: &ImageBuffer,
        source: &ImageBuffer,
        source_mask: &MaskBuffer,
        target_mask: &MaskBuffer,
        completion: Option<&MaskBuffer>,
        prompt: Option<&str>,
        extra_perturb: Option<&MaskBuffer>,
        seed: u64,
    ) -> Result<StepRun> {
        let start = Instant::now();
        let (_, kv) = self.source_inversion(source)?;
        let full_target = match completion {
            Some(d) => mask_union(target_mask, d)?,
            None => target_mask.clone(),
        };
        let tau0 = match completion {
            Some(_) => self.config.sampler.step3_tau0_completion,
            None => self.config.sampler.step3_tau0_general,
        };
        let mut local = match completion {
            Some(d) => d.clone(),
            None => boundary_mask(target_mask, self.config.boundary_radius),
        };
        if let Some(extra) = extra_perturb {
            local = mask_union(&local, extra)?;
        }
        let prompt = prompt.unwrap_or("");
        let (cross, guide) = self.guidance_regions(prompt, full_target.clone(), completion.cloned());
        let regions = RegionMasks {
            source: Some(source_mask.clone()),
            target: Some(full_target.clone()),
            cross,
        };
        self.refine(composite, &regions, guide, local, prompt, kv, tau0, seed, start)
    }

    #[allow(clippy::too_many_arguments)]
    fn refine(
        &self,
        composite: &ImageBuffer,
        regions: &RegionMasks,
        guide: Option<MaskBuffer>,
        local: MaskBuffer,
        prompt: &str,
        kv: Arc<KvCache>,
        tau0: usize,
        seed: u64,
        start: Instant,
    ) -> Result<StepRun> {
        let sampler = self.sampler()?;
        let traj = sampler.invert(composite, &self.config.sampler.inversion_prompt)?;
        let mut ctx = AttentionContext::new(
            self.mode(AttentionMode::Step3),
            self.schedule(self.scaled_tau0(tau0))?,
            regions,
            self.net.attention_layers(),
            self.hooked(),
            Some(kv),
        )?;
        let perturb = self.perturb_region(local);
        let cond = if regions.cross.is_some() { self.embed(prompt) } else { self.net.null_embedding() };
        let masks = SamplingMasks {
            perturb: perturb.clone(),
            guide,
        };
        let out = sampler.denoise(traj.x_t(), &cond, &mut ctx, &masks, seed)?;
        Ok(StepRun {
            image: out.image,
            first_latent: out.latents[0].clone(),
            perturb_mask: perturb.unwrap_or_else(|| MaskBuffer::empty(composite.height(), composite.width())),
            seconds: start.elapsed().as_secs_f64(),
            trajectory_key: traj.key,
        })
    }

    /// Replays the recorded inversion of `img`: the decoded `x_0`.
    pub fn noop_replay(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let (traj, _) = self.source_inversion(img)?;
        self.codec.decode(traj.x_0())
    }

    pub fn edit(&self, req: &EditRequest) -> Result<EditResult> {
        req.validate()?;
        let seed = req.seed.unwrap_or(self.config.sampler.seed);
        let t1 = Instant::now();
        let (coarse, target_mask) = self.step1(req)?;
        let step1 = t1.elapsed().as_secs_f64();
        let mut warnings = Vec::new();
        if req.source_mask.is_full() {
            warnings.push("source mask covers the whole image".to_string());
        }
        let full_target = match &req.completion_mask {
            Some(d) => mask_union(&target_mask, d)?,
            None => target_mask.clone(),
        };
        if req.instruction.op == crate::instruction::Op::Identity {
            let replay = self.noop_replay(&req.image)?;
            let (traj, _) = self.source_inversion(&req.image)?;
            return Ok(EditResult {
                source: req.image.clone(),
                source_mask: req.source_mask.clone(),
                coarse,
                target_mask,
                background: replay.clone(),
                composite: req.image.clone(),
                output: replay,
                full_target,
                completion_mask: req.completion_mask.clone(),
                instruction: req.instruction.clone(),
                durations: Durations { step1, ..Durations::default() },
                config: self.config.clone(),
                cache_keys: vec![traj.key.clone()],
                warnings,
            });
        }
        let step2_prompt = req.step2_prompt.clone().unwrap_or_else(|| self.config.step2_prompt.clone());
        let s2 = self.step2(&req.image, &req.source_mask, &step2_prompt, seed)?;
        let composite = blend(&coarse, &s2.image, &target_mask)?;
        let s3 = self.step3(
            &composite,
            &req.image,
            &req.source_mask,
            &target_mask,
            req.completion_mask.as_ref(),
            req.prompt.as_deref(),
            req.extra_perturb.as_ref(),
            seed.wrapping_add(1),
        )?;
        Ok(EditResult {
            source: req.image.clone(),
            source_mask: req.source_mask.clone(),
            coarse,
            target_mask,
            background: s2.image,
            composite,
            output: s3.image,
            full_target,
            completion_mask: req.completion_mask.clone(),
            instruction: req.instruction.clone(),
            durations: Durations {
                step1,
                step2: s2.seconds,
                step3: s3.seconds,
            },
            config: self.config.clone(),
            cache_keys: vec![s2.trajectory_key, s3.trajectory_key],
            warnings,
        })
    }

    /// Re-renders the object in `target_mask` of `edited` with the look of
    /// the object in `appearance_mask` of `appearance`.
    pub fn appearance_transfer(
        &self,
        edited: &ImageBuffer,
        target_mask: &MaskBuffer,
        appearance: &ImageBuffer,
        appearance_mask: &MaskBuffer,
        label: Option<&str>,
        seed: u64,
    ) -> Result<ImageBuffer> {
        if !edited.same_dims(target_mask) || !appearance.same_dims(appearance_mask) {
            return Err(Error::dims("appearance transfer masks must match their images"));
        }
        if target_mask.is_empty() || appearance_mask.is_empty() {
            return Err(Error::invalid("appearance transfer needs non-empty masks"));
        }
        let start = Instant::now();
        let (_, kv) = self.source_inversion(appearance)?;
        let prompt = label.unwrap_or("");
        let (cross, guide) = self.guidance_regions(prompt, target_mask.clone(), Some(target_mask.clone()));
        let regions = RegionMasks {
            source: Some(appearance_mask.clone()),
            target: Some(target_mask.clone()),
            cross,
        };
        let run = self.refine(
            edited,
            &regions,
            guide,
            target_mask.clone(),
            prompt,
            kv,
            self.config.sampler.step3_tau0_general,
            seed,
            start,
        )?;
        Ok(run.image)
    }

    /// Places several objects on one canvas and refines them together.
    /// Parts whose source is the canvas itself are first removed from it.
    pub fn compose(&self, canvas: &ImageBuffer, parts: &[ComposePart], seed: u64) -> Result<ImageBuffer> {
        if parts.is_empty() {
            return Err(Error::invalid("composition needs at least one part"));
        }
        let (h, w) = (canvas.height(), canvas.width());
        let mut removal = MaskBuffer::empty(h, w);
        for p in parts.iter().filter(|p| p.from_canvas) {
            removal = mask_union(&removal, &p.source_mask)?;
        }
        let mut base = canvas.clone();
        if !removal.is_empty() {
            base = self.step2(canvas, &removal, &self.config.step2_prompt, seed)?.image;
        }
        let mut composite = base;
        let mut targets = MaskBuffer::empty(h, w);
        let mut full = MaskBuffer::empty(h, w);
        let mut completion = MaskBuffer::empty(h, w);
        let mut placed = Vec::new();
        for p in parts {
            if !p.image.same_dims(&p.source_mask) || p.image.height() != h || p.image.width() != w {
                return Err(Error::dims("composition parts must match the canvas size"));
            }
            let (ic, mt) = geometry::transform_2d(&p.image, &p.source_mask, &p.transform, None)?;
            composite = blend(&ic, &composite, &mt)?;
            targets = mask_union(&targets, &mt)?;
            let mut region = mt.clone();
            if let Some(d) = &p.completion_mask {
                completion = mask_union(&completion, d)?;
                region = mask_union(&region, d)?;
            }
            full = mask_union(&full, &region)?;
            placed.push((region, p.label.clone().unwrap_or_default()));
        }
        // The pasted objects serve as their own appearance source.
        let (_, kv) = self.source_inversion(&composite)?;
        let sampler = self.sampler()?;
        let traj = sampler.invert(&composite, &self.config.sampler.inversion_prompt)?;
        let tau0 = if completion.is_empty() {
            self.config.sampler.step3_tau0_general
        } else {
            self.config.sampler.step3_tau0_completion
        };
        let schedule = self.schedule(self.scaled_tau0(tau0))?;
        let make_ctx = |cross: Option<MaskBuffer>| {
            AttentionContext::new(
                self.mode(AttentionMode::Step3),
                schedule,
                &RegionMasks {
                    source: Some(targets.clone()),
                    target: Some(full.clone()),
                    cross,
                },
                self.net.attention_layers(),
                self.hooked(),
                Some(kv.clone()),
            )
        };
        let mut null_ctx = make_ctx(None)?;
        let mut branches = Vec::new();
        for (region, label) in &placed {
            if label.is_empty() || self.config.disable_guidance {
                continue;
            }
            branches.push(Branch {
                cond: self.embed(label),
                ctx: make_ctx(Some(region.clone()))?,
                region: region.clone(),
            });
        }
        let local = if completion.is_empty() {
            boundary_mask(&targets, self.config.boundary_radius)
        } else {
            completion.clone()
        };
        let perturb = self.perturb_region(local).unwrap_or_else(|| MaskBuffer::empty(h, w));
        let guide = if completion.is_empty() { MaskBuffer::empty(h, w) } else { completion };
        let x = denoise_regions(&sampler, traj.x_t(), &mut null_ctx, &mut branches, &perturb, &guide, seed)?;
        self.codec.decode(&x)
    }
}

/// One object placed by [`Editor::compose`].
#[derive(Debug, Clone)]
pub struct ComposePart {
    pub image: ImageBuffer,
    pub source_mask: MaskBuffer,
    pub transform: AffineParams,
    pub label: Option<String>,
    pub completion_mask: Option<MaskBuffer>,
    /// The part is cut out of the canvas before pasting.
    pub from_canvas: bool,
}

struct Branch {
    cond: ConditionEmbedding,
    ctx: AttentionContext,
    region: MaskBuffer,
}

/// Denoising with one conditional branch per labelled region; each pixel
/// takes the conditional prediction of the first region covering it.
fn denoise_regions(
    sampler: &Sampler<'_>,
    x_t: &Fmap,
    null_ctx: &mut AttentionContext,
    branches: &mut [Branch],
    perturb: &MaskBuffer,
    guide: &MaskBuffer,
    seed: u64,
) -> Result<Fmap> {
    use crate::attention::EditAttention;
    let steps = sampler.config.steps;
    let sched = sampler.schedule();
    let null = sampler.net.null_embedding();
    let mut x = x_t.clone();
    let hw = x.hw();
    for tau in 1..=steps {
        let (t, t_prev) = sched.step_pair(steps, tau);
        null_ctx.current_tau = tau;
        let eps_null = sampler.net.predict_noise(&x, t, &null, &mut EditAttention { ctx: null_ctx })?;
        let mut eps_cond = eps_null.clone();
        let mut taken = vec![false; hw];
        for b in branches.iter_mut() {
            b.ctx.current_tau = tau;
            let e = sampler.net.predict_noise(&x, t, &b.cond, &mut EditAttention { ctx: &b.ctx })?;
            for i in 0..hw {
                if b.region.data()[i] != 0 && !taken[i] {
                    taken[i] = true;
                    for c in 0..x.c {
                        eps_cond.data[c * hw + i] = e.data[c * hw + i];
                    }
                }
            }
        }
        let eps = masked_cfg(&eps_null, &eps_cond, sampler.config.guidance, guide)?;
        let noise = lp_noise(seed, t, x.data.len());
        x = lp_step(&x, &eps, t, t_prev, sched, perturb, &noise)?;
        if !x.is_finite() {
            return Err(Error::Numerical(format!("composition diverged at step {tau}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{DenoiserConfig, NoiseSchedule, PixelCodec};
    use crate::instruction::{Direction, Op};

    fn tiny_editor() -> Editor {
        let net = Denoiser::new(DenoiserConfig::tiny(), NoiseSchedule::default()).unwrap();
        let config = PipelineConfig {
            sampler: SamplerConfig {
                steps: 4,
                step2_tau0: 1,
                step3_tau0_completion: 1,
                step3_tau0_general: 2,
                ..SamplerConfig::default()
            },
            ..PipelineConfig::default()
        };
        Editor::new(Arc::new(net), Arc::new(PixelCodec), config).unwrap()
    }

    fn scene() -> (ImageBuffer, MaskBuffer) {
        let img = ImageBuffer::from_fn(8, 8, |y, x| if (2..5).contains(&y) && (1..4).contains(&x) { [0.9, 0.1, 0.1] } else { [0.1, 0.5, 0.2] });
        let mask = MaskBuffer::from_fn(8, 8, |y, x| (2..5).contains(&y) && (1..4).contains(&x));
        (img, mask)
    }

    #[test]
    fn identity_edit_replays_exactly() {
        let ed = tiny_editor();
        let (img, mask) = scene();
        let res = ed.edit(&EditRequest::new(img.clone(), mask, EditInstruction::identity())).unwrap();
        assert_eq!(res.output, img);
    }

    #[test]
    fn composite_obeys_blend_and_runs_are_deterministic() {
        let ed = tiny_editor();
        let (img, mask) = scene();
        let req = EditRequest::new(img, mask, EditInstruction::new(Op::Move, Direction::E, 0.25));
        let a = ed.edit(&req).unwrap();
        let b = ed.edit(&req).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.composite, blend(&a.coarse, &a.background, &a.target_mask).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("output.png").exists());
    }

    #[test]
    fn step_errors() {
        let ed = tiny_editor();
        let (img, _) = scene();
        assert!(ed.step2(&img, &MaskBuffer::empty(8, 8), "empty scene", 0).is_err());
        assert!(ed.step2(&img, &MaskBuffer::empty(4, 8), "empty scene", 0).is_err());
    }

    #[test]
    fn full_mask_warns() {
        let ed = tiny_editor();
        let (img, _) = scene();
        let full = MaskBuffer::full(8, 8);
        let res = ed.edit(&EditRequest::new(img, full, EditInstruction::identity())).unwrap();
        assert_eq!(res.warnings.len(), 1);
    }
}
