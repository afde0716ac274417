use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use log::info;

use geoedit_core::backbone::checkpoint;
use geoedit_core::backbone::dataset::{gen_shapes_dataset, DatasetConfig};
use geoedit_core::backbone::train::{train_toy as run_training, TrainConfig};
use geoedit_core::backbone::{Denoiser, DenoiserConfig, NoiseSchedule, PixelCodec};
use geoedit_core::bench::{build_bench, procedural_bench, run_eval, EvalConfig, GenConfig};
use geoedit_core::geometry::DepthMap;
use geoedit_core::imaging::{load_mask_png, load_png, save_mask_png, save_png};
use geoedit_core::instruction::{Direction, EditInstruction, Op};
use geoedit_core::pipeline::{AttentionVariant, EditRequest, Editor, PipelineConfig};
use geoedit_core::sampler::SamplerConfig;
use geoedit_core::Error;
use geoedit_service::ServiceConfig;

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of background-only samples.
    #[arg(long, default_value_t = 0.1)]
    empty_fraction: f64,
    /// Continue from these weights instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write an intermediate checkpoint every N steps (0 disables).
    #[arg(long, default_value_t = 250)]
    save_every: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn train_toy(a: TrainArgs) -> Result<()> {
    let (mut net, prior_steps) = match &a.init {
        Some(path) => {
            let (net, header) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            (net, header.meta["steps"].as_u64().unwrap_or(0) as usize)
        }
        None => (Denoiser::new(DenoiserConfig { seed: a.seed, ..DenoiserConfig::default() }, NoiseSchedule::default())?, 0),
    };
    info!("{} parameters", net.params().num_scalars());
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed.wrapping_add(prior_steps as u64),
        warmup: if a.init.is_some() { 1 } else { 100 },
        dataset: DatasetConfig {
            empty_fraction: a.empty_fraction,
            ..DatasetConfig::default()
        },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut window = Vec::new();
    let out = a.out.clone();
    let report = run_training(&mut net, &cfg, |s, net| {
        window.push(s.loss);
        if s.step % 25 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            info!(
                "step {} loss {:.4} grad {:.3} lr {:.2e} ({:.1}s)",
                s.step + prior_steps,
                mean,
                s.grad_norm,
                s.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if a.save_every > 0 && s.step % a.save_every == 0 {
            let meta = serde_json::json!({ "steps": s.step + prior_steps, "loss": s.loss, "ema": false });
            if let Err(e) = checkpoint::save(net, meta, &out.with_extension("partial.ckpt")) {
                log::warn!("intermediate save failed: {e}");
            }
        }
        true
    })?;
    let (head, tail) = report.head_tail(50);
    info!("loss {head:.4} -> {tail:.4}");
    let meta = serde_json::json!({
        "steps": prior_steps + report.losses.len(),
        "loss_head": head,
        "loss_tail": tail,
        "batch": a.batch,
        "seed": a.seed,
        "ema": true,
    });
    checkpoint::save(&net, meta, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let records = gen_shapes_dataset(a.n, a.seed, &DatasetConfig::default());
    let mut index = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let img = format!("{i:05}.png");
        let mask = format!("{i:05}_mask.png");
        save_png(&r.image, a.out.join(&img))?;
        save_mask_png(&r.mask, a.out.join(&mask))?;
        index.push(serde_json::json!({ "image": img, "mask": mask, "caption": r.caption, "label": r.label }));
    }
    std::fs::write(a.out.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    info!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct GenBenchArgs {
    /// Directory holding `index.json` as written by `gen-data`.
    #[arg(long, required_unless_present = "procedural")]
    images: Option<PathBuf>,
    /// Build from N freshly generated procedural images instead.
    #[arg(long)]
    procedural: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instructions per (operation, difficulty) cell.
    #[arg(long, default_value_t = 1)]
    per_cell: usize,
    /// Output directory; the manifest is `<out>/manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_bench(a: GenBenchArgs) -> Result<()> {
    let cfg = GenConfig {
        per_cell: a.per_cell,
        ..GenConfig::default()
    };
    let manifest = match (&a.images, a.procedural) {
        (_, Some(n)) => procedural_bench(n, a.seed, &a.out, &cfg)?,
        (Some(dir), None) => build_bench(dir, a.seed, &a.out, &cfg)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    info!(
        "wrote {} records, {} instructions {:?} to {}",
        manifest.records.len(),
        manifest.num_instructions(),
        manifest.counts,
        a.out.join("manifest.json").display()
    );
    Ok(())
}

/// Sampler and pipeline knobs shared by `edit` and `eval`.
#[derive(Args)]
pub struct PipelineArgs {
    /// Denoiser weights (env GEOEDIT_CHECKPOINT, else the bundled toy checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Denoising steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 7.5)]
    guidance_scale: f64,
    /// Last refinement step that attends purely to source keys; later steps
    /// fade linearly to plain self-attention (default 13 with a completion
    /// mask, 25 without).
    #[arg(long)]
    tau0: Option<usize>,
    /// Same for the inpainting step.
    #[arg(long, default_value_t = 1)]
    step2_tau0: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Self-attention variant: tca, mmsa, ssa, sdsa, plain.
    #[arg(long, default_value = "tca")]
    attention: String,
    /// Directory for cached inversions.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

/// Marker for a checkpoint that does not exist.
#[derive(Debug)]
pub struct MissingCheckpoint(PathBuf);

impl std::fmt::Display for MissingCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "checkpoint {} not found", self.0.display())
    }
}

impl std::error::Error for MissingCheckpoint {}

fn checkpoint_path(arg: &Option<PathBuf>) -> Result<PathBuf> {
    let path = arg.clone().unwrap_or_else(crate::default_checkpoint);
    if !path.exists() {
        return Err(MissingCheckpoint(path).into());
    }
    Ok(path)
}

fn load_net(arg: &Option<PathBuf>) -> Result<Denoiser> {
    let path = checkpoint_path(arg)?;
    let (net, _) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(net)
}

fn editor(p: &PipelineArgs) -> Result<Editor> {
    let attention: AttentionVariant = serde_json::from_value(serde_json::Value::String(p.attention.clone()))
        .map_err(|_| Error::InvalidInput(format!("unknown attention variant {:?}", p.attention)))?;
    let mut sampler = SamplerConfig {
        steps: p.steps,
        guidance: p.guidance_scale,
        seed: p.seed,
        step2_tau0: p.step2_tau0,
        ..SamplerConfig::default()
    };
    if let Some(t) = p.tau0 {
        sampler.step3_tau0_completion = t;
        sampler.step3_tau0_general = t;
    }
    let config = PipelineConfig {
        sampler,
        attention,
        ..PipelineConfig::default()
    };
    let net = load_net(&p.checkpoint)?;
    let mut editor = Editor::new(Arc::new(net), Arc::new(PixelCodec), config)?;
    if let Some(dir) = &p.cache_dir {
        editor = editor.with_cache_dir(dir);
    }
    Ok(editor)
}

#[derive(Args)]
pub struct EditArgs {
    #[arg(long)]
    image: PathBuf,
    /// Binary PNG mask of the object to edit.
    #[arg(long)]
    source_mask: PathBuf,
    /// Instruction as JSON (inline or a path to a .json file).
    #[arg(long, conflicts_with_all = ["op", "direction", "magnitude"])]
    instruction: Option<String>,
    /// move, resize, rotate2d, rotate3d or identity.
    #[arg(long, required_unless_present = "instruction")]
    op: Option<String>,
    /// n..nw / left, right, up, down for moves; enlarge, shrink; cw, ccw; x, y, z.
    #[arg(long)]
    direction: Option<String>,
    /// Fraction of the image size (move), scale factor (resize) or degrees.
    #[arg(long)]
    magnitude: Option<f64>,
    /// Region where missing object parts may be generated.
    #[arg(long)]
    completion_mask: Option<PathBuf>,
    /// Object description used to steer the refinement.
    #[arg(long)]
    prompt: Option<String>,
    /// 16-bit depth PNG for 3D rotations, with the factor it was scaled by.
    #[arg(long, requires = "depth_scale")]
    depth: Option<PathBuf>,
    #[arg(long)]
    depth_scale: Option<f64>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output directory for every artifact.
    #[arg(long)]
    out: PathBuf,
}

fn parse_instruction(a: &EditArgs) -> Result<EditInstruction> {
    let inst = match &a.instruction {
        Some(s) => {
            let text = if s.trim_start().starts_with('{') { s.clone() } else { std::fs::read_to_string(s)? };
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("instruction: {e}")))?
        }
        None => {
            let op: Op = a.op.as_deref().unwrap_or("").parse()?;
            let direction: Direction = a.direction.as_deref().unwrap_or("none").parse()?;
            EditInstruction::new(op, direction, a.magnitude.unwrap_or(0.0))
        }
    };
    inst.validate()?;
    Ok(inst)
}

pub fn edit(a: EditArgs) -> Result<()> {
    let instruction = parse_instruction(&a)?;
    let image = load_png(&a.image).map_err(input_error)?;
    let mask = load_mask_png(&a.source_mask).map_err(input_error)?;
    let editor = editor(&a.pipeline)?;
    let res = editor.net().config().resolution;
    if (image.height(), image.width()) != (res, res) {
        return Err(Error::InvalidInput(format!("image is {}×{}, the checkpoint works at {res}×{res}", image.height(), image.width())).into());
    }
    let mut req = EditRequest::new(image, mask, instruction);
    if let Some(p) = &a.completion_mask {
        req.completion_mask = Some(load_mask_png(p).map_err(input_error)?);
    }
    req.prompt = a.prompt.clone();
    req.seed = Some(a.pipeline.seed);
    if let (Some(p), Some(s)) = (&a.depth, a.depth_scale) {
        req.depth = Some(DepthMap::load(p, s).map_err(input_error)?);
    }
    let start = Instant::now();
    let result = editor.edit(&req)?;
    result.save(&a.out)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    info!("wrote {} in {:.1}s", a.out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

/// Unreadable input files count as invalid input.
fn input_error(e: Error) -> Error {
    match e {
        Error::Io(e) => Error::InvalidInput(e.to_string()),
        Error::Image(e) => Error::InvalidInput(e.to_string()),
        other => other,
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Parallel instructions.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Correspondence provider for mean distance: ncc or oracle.
    #[arg(long, default_value = "ncc")]
    provider: String,
    /// Embedder for the consistency and distribution metrics: backbone or random.
    #[arg(long, default_value = "backbone")]
    embedder: String,
    /// Evaluate only the first N instructions.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut editor = editor(&a.pipeline)?;
    if a.pipeline.cache_dir.is_none() {
        editor = editor.with_cache_dir(a.out.join("cache"));
    }
    let cfg = EvalConfig {
        jobs: a.jobs,
        provider: a.provider,
        embedder: a.embedder,
        limit: a.limit,
    };
    let summary = run_eval(&a.manifest, &editor, &cfg, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, env = "GEOEDIT_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "GEOEDIT_DATA_DIR", default_value = "geoedit-data")]
    data_dir: PathBuf,
    /// Pipeline jobs that may run at once.
    #[arg(long, env = "GEOEDIT_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let mut config = ServiceConfig::from_env().map_err(Error::InvalidInput)?;
    config.port = a.port;
    config.data_dir = a.data_dir;
    config.workers = a.workers.max(1);
    config.checkpoint = checkpoint_path(&a.checkpoint)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(geoedit_service::serve(config))
}

/// 2 invalid input, 3 out-of-bounds instruction, 4 missing checkpoint.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<MissingCheckpoint>().is_some() {
        return 4;
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::InvalidInput(_) | Error::DimensionMismatch(_) => 2,
                Error::OutOfBounds(_) => 3,
                _ => 1,
            };
        }
    }
    1
}
