//! Attention processors for editing: masked mutual self-attention, its
//! timestep-blended form, the shared-KV ablations, and localized
//! cross-attention.
//!
//! Processors are pure functions over token matrices (one token per row,
//! row index `y * w + x` on the layer's grid). [`EditAttention`] routes a
//! network's hook calls to them according to an [`AttentionContext`].

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::backbone::layers::softmax_rows;
use crate::backbone::{AttentionHook, KvPair, LayerInfo};
use crate::error::{Error, Result};
use crate::imaging::{downsample_mask, MaskBuffer};
use crate::tensor::{gemm, Mat};

/// Additive logit for excluded keys.
pub const MASKED_LOGIT: f32 = -1e9;

fn check_qkv(q: &Mat, k: &Mat, v: &Mat) -> Result<()> {
    if q.cols != k.cols || k.rows != v.rows {
        return Err(Error::dims(format!(
            "attention operands q {}x{}, k {}x{}, v {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    Ok(())
}

fn logits(q: &Mat, k: &Mat) -> Mat {
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut s = Mat::zeros(q.rows, k.rows);
    gemm(q.rows, q.cols, k.rows, scale, &q.data, false, &k.data, true, 0.0, &mut s.data);
    s
}

fn weighted_values(p: &Mat, v: &Mat) -> Mat {
    let mut out = Mat::zeros(p.rows, v.cols);
    gemm(p.rows, p.cols, v.cols, 1.0, &p.data, false, &v.data, false, 0.0, &mut out.data);
    out
}

/// `softmax(QKᵀ/√d)V`.
pub fn plain_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    check_qkv(q, k, v)?;
    let mut s = logits(q, k);
    softmax_rows(&mut s);
    Ok(weighted_values(&s, v))
}

/// Attention restricted to keys where `key_mask` is set. Query rows with no
/// admissible key fall back to unmasked attention.
pub fn masked_self_attention(q: &Mat, k: &Mat, v: &Mat, key_mask: &[bool]) -> Result<Mat> {
    check_qkv(q, k, v)?;
    if key_mask.len() != k.rows {
        return Err(Error::dims(format!("key mask has {} entries for {} keys", key_mask.len(), k.rows)));
    }
    let mut s = logits(q, k);
    if s.data.iter().all(|x| x.is_nan()) && !s.data.is_empty() {
        return Err(Error::Numerical("all attention logits are NaN".into()));
    }
    if key_mask.iter().any(|m| *m) {
        for r in 0..s.rows {
            for (x, keep) in s.row_mut(r).iter_mut().zip(key_mask) {
                if !keep {
                    *x = MASKED_LOGIT;
                }
            }
        }
    }
    softmax_rows(&mut s);
    Ok(weighted_values(&s, v))
}

/// Per-row select: rows where `rows_mask` is set come from `inside`.
pub fn select_rows(rows_mask: &[bool], inside: &Mat, outside: &Mat) -> Result<Mat> {
    if inside.rows != outside.rows || inside.cols != outside.cols || rows_mask.len() != inside.rows {
        return Err(Error::dims("row selection operands"));
    }
    let mut out = outside.clone();
    for (r, on) in rows_mask.iter().enumerate() {
        if *on {
            out.row_mut(r).copy_from_slice(inside.row(r));
        }
    }
    Ok(out)
}

fn complement(m: &[bool]) -> Vec<bool> {
    m.iter().map(|x| !x).collect()
}

/// Mask-guided mutual self-attention: target queries inside `m_t` read the
/// source foreground, all others read the source background.
pub fn mmsa(q: &Mat, k_s: &Mat, v_s: &Mat, m_s: &[bool], m_t: &[bool]) -> Result<Mat> {
    if m_t.len() != q.rows {
        return Err(Error::dims("query mask length"));
    }
    let inside = m_t.iter().any(|x| *x);
    let outside = m_t.iter().any(|x| !x);
    let s_o = if inside { Some(masked_self_attention(q, k_s, v_s, m_s)?) } else { None };
    let s_b = if outside { Some(masked_self_attention(q, k_s, v_s, &complement(m_s))?) } else { None };
    match (s_o, s_b) {
        (Some(o), Some(b)) => select_rows(m_t, &o, &b),
        (Some(o), None) => Ok(o),
        (None, Some(b)) => Ok(b),
        (None, None) => Ok(Mat::zeros(0, v_s.cols)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendKind {
    Linear,
    HardSwitch,
}

/// Blend weight schedule over 1-based denoising steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendSchedule {
    pub kind: BlendKind,
    pub tau0: usize,
    pub tau1: usize,
    /// Last step of full masked attention for [`BlendKind::HardSwitch`].
    pub tau_switch: usize,
}

impl BlendSchedule {
    pub fn linear(tau0: usize, tau1: usize) -> Result<Self> {
        let s = Self {
            kind: BlendKind::Linear,
            tau0,
            tau1,
            tau_switch: tau0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn hard_switch(tau_switch: usize, tau1: usize) -> Result<Self> {
        let s = Self {
            kind: BlendKind::HardSwitch,
            tau0: tau_switch.min(tau1.saturating_sub(1)),
            tau1,
            tau_switch,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau0 >= self.tau1 {
            return Err(Error::invalid(format!("blend schedule needs tau0 < tau1, got {} >= {}", self.tau0, self.tau1)));
        }
        Ok(())
    }
}

/// `α_τ`: linearly falls from 1 at `τ0` to 0 at `τ1`, clamped to [0, 1].
pub fn alpha(schedule: &BlendSchedule, tau: usize) -> f64 {
    match schedule.kind {
        BlendKind::Linear => {
            let (t0, t1, t) = (schedule.tau0 as f64, schedule.tau1 as f64, tau as f64);
            ((t1 - t) / (t1 - t0)).clamp(0.0, 1.0)
        }
        BlendKind::HardSwitch => {
            if tau <= schedule.tau_switch {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn convex(a: f64, masked: &Mat, plain: &Mat) -> Mat {
    let a = a as f32;
    let mut out = plain.clone();
    for (o, m) in out.data.iter_mut().zip(&masked.data) {
        *o = (1.0 - a) * *o + a * m;
    }
    out
}

/// Refinement-step blend `(1−α) S_t + α MMSA(M_s, M_t*)`.
#[allow(clippy::too_many_arguments)]
pub fn tca_step3(q: &Mat, k: &Mat, v: &Mat, k_s: &Mat, v_s: &Mat, m_s: &[bool], m_t_star: &[bool], a: f64) -> Result<Mat> {
    if a <= 0.0 {
        return plain_attention(q, k, v);
    }
    let masked = mmsa(q, k_s, v_s, m_s, m_t_star)?;
    if a >= 1.0 {
        return Ok(masked);
    }
    Ok(convex(a, &masked, &plain_attention(q, k, v)?))
}

/// Inpainting-step blend: the masked branch reads only the source background.
/// With `restrict_all` unset, queries outside `m_s` keep plain attention in
/// the masked branch.
#[allow(clippy::too_many_arguments)]
pub fn tca_step2(q: &Mat, k: &Mat, v: &Mat, k_s: &Mat, v_s: &Mat, m_s: &[bool], a: f64, restrict_all: bool) -> Result<Mat> {
    if a <= 0.0 {
        return plain_attention(q, k, v);
    }
    let background = masked_self_attention(q, k_s, v_s, &complement(m_s))?;
    let masked = if restrict_all {
        background
    } else {
        if m_s.len() != q.rows {
            return Err(Error::dims("query mask length"));
        }
        select_rows(m_s, &background, &plain_attention(q, k, v)?)?
    };
    if a >= 1.0 {
        return Ok(masked);
    }
    Ok(convex(a, &masked, &plain_attention(q, k, v)?))
}

/// Shared self-attention over concatenated source and target keys/values.
pub fn ssa(q: &Mat, k_s: &Mat, k_t: &Mat, v_s: &Mat, v_t: &Mat) -> Result<Mat> {
    plain_attention(q, &k_s.vstack(k_t)?, &v_s.vstack(v_t)?)
}

/// Shared attention where only the source-foreground keys are shared;
/// target keys stay admissible.
pub fn sdsa(q: &Mat, k_s: &Mat, k_t: &Mat, v_s: &Mat, v_t: &Mat, fg: &[bool]) -> Result<Mat> {
    if fg.len() != k_s.rows {
        return Err(Error::dims("foreground mask length"));
    }
    let mut mask = fg.to_vec();
    mask.extend(std::iter::repeat_n(true, k_t.rows));
    masked_self_attention(q, &k_s.vstack(k_t)?, &v_s.vstack(v_t)?, &mask)
}

/// Cross-attention that reads the condition inside `m1` and the null
/// embedding elsewhere.
pub fn localized_cross_attention(q: &Mat, k_c: &Mat, v_c: &Mat, k_null: &Mat, v_null: &Mat, m1: &[bool]) -> Result<Mat> {
    if m1.len() != q.rows {
        return Err(Error::dims("cross-attention region length"));
    }
    let inside = m1.iter().any(|x| *x);
    let outside = m1.iter().any(|x| !x);
    if !outside {
        return plain_attention(q, k_c, v_c);
    }
    let null = plain_attention(q, k_null, v_null)?;
    if !inside {
        return Ok(null);
    }
    select_rows(m1, &plain_attention(q, k_c, v_c)?, &null)
}

/// Source keys/values per `(step τ, layer id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    entries: BTreeMap<(usize, usize), (Mat, Mat)>,
}

const KV_MAGIC: &[u8; 8] = b"GEOKVC\0\0";

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tau: usize, layer: usize, k: Mat, v: Mat) {
        self.entries.insert((tau, layer), (k, v));
    }

    pub fn get(&self, tau: usize, layer: usize) -> Option<(&Mat, &Mat)> {
        self.entries.get(&(tau, layer)).map(|(k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether every `(τ, layer)` pair of a `steps`-step run is present.
    pub fn is_complete(&self, steps: usize, layers: &[usize]) -> bool {
        (1..=steps).all(|t| layers.iter().all(|l| self.entries.contains_key(&(t, *l))))
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(KV_MAGIC)?;
        out.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        for ((tau, layer), (k, v)) in &self.entries {
            out.write_u64::<LittleEndian>(*tau as u64)?;
            out.write_u64::<LittleEndian>(*layer as u64)?;
            for m in [k, v] {
                out.write_u64::<LittleEndian>(m.rows as u64)?;
                out.write_u64::<LittleEndian>(m.cols as u64)?;
                for x in &m.data {
                    out.write_f32::<LittleEndian>(*x)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != KV_MAGIC {
            return Err(Error::MissingCache("not a key/value cache file".into()));
        }
        let n = input.read_u64::<LittleEndian>()? as usize;
        let mut cache = Self::new();
        for _ in 0..n {
            let tau = input.read_u64::<LittleEndian>()? as usize;
            let layer = input.read_u64::<LittleEndian>()? as usize;
            let mut mats = Vec::with_capacity(2);
            for _ in 0..2 {
                let rows = input.read_u64::<LittleEndian>()? as usize;
                let cols = input.read_u64::<LittleEndian>()? as usize;
                let mut data = vec![0.0f32; rows * cols];
                input.read_f32_into::<LittleEndian>(&mut data)?;
                mats.push(Mat::from_vec(rows, cols, data)?);
            }
            let v = mats.pop().expect("two matrices");
            let k = mats.pop().expect("two matrices");
            cache.insert(tau, layer, k, v);
        }
        Ok(cache)
    }
}

/// Self-attention routing of an editing run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionMode {
    Plain,
    /// Source-region inpainting: masked branch reads the source background.
    Step2 { restrict_all: bool },
    /// Target refinement: blended mask-guided mutual self-attention.
    Step3,
    /// Ablation: shared keys/values from source and target.
    Ssa,
    /// Ablation: shared keys/values restricted to the source foreground.
    Sdsa,
    /// Ablation: mask-guided mutual self-attention at every step, no blend.
    Mmsa,
}

/// Pixel-space region masks of a run.
#[derive(Debug, Clone, Default)]
pub struct RegionMasks {
    /// `M_s`: source object.
    pub source: Option<MaskBuffer>,
    /// `M_t*`: full target region.
    pub target: Option<MaskBuffer>,
    /// `𝓜₁`: region whose cross-attention reads the condition.
    pub cross: Option<MaskBuffer>,
}

#[derive(Debug, Clone, Default)]
struct GridMasks {
    source: Vec<bool>,
    target: Vec<bool>,
    cross: Option<Vec<bool>>,
}

fn to_grid(mask: &MaskBuffer, grid: (usize, usize)) -> Result<Vec<bool>> {
    Ok(downsample_mask(mask, grid.0, grid.1)?.data().iter().map(|v| *v != 0).collect())
}

/// Routing state for one sampling run.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    pub mode: AttentionMode,
    pub schedule: BlendSchedule,
    /// 1-based denoising step; set by the sampler before each evaluation.
    pub current_tau: usize,
    /// Layers whose self-attention is replaced.
    pub hooked_layers: Vec<usize>,
    pub kv: Option<Arc<KvCache>>,
    grids: HashMap<(usize, usize), GridMasks>,
}

impl AttentionContext {
    /// Plain attention everywhere, no localized cross-attention.
    pub fn plain(steps: usize) -> Self {
        Self {
            mode: AttentionMode::Plain,
            schedule: BlendSchedule {
                kind: BlendKind::Linear,
                tau0: 0,
                tau1: steps.max(1),
                tau_switch: 0,
            },
            current_tau: 1,
            hooked_layers: Vec::new(),
            kv: None,
            grids: HashMap::new(),
        }
    }

    /// Precomputes every mask at every layer grid.
    pub fn new(
        mode: AttentionMode,
        schedule: BlendSchedule,
        masks: &RegionMasks,
        layers: &[LayerInfo],
        hooked_layers: Vec<usize>,
        kv: Option<Arc<KvCache>>,
    ) -> Result<Self> {
        schedule.validate()?;
        let needs_source = !matches!(mode, AttentionMode::Plain | AttentionMode::Ssa);
        let needs_target = matches!(mode, AttentionMode::Step3 | AttentionMode::Mmsa);
        if needs_source && masks.source.is_none() {
            return Err(Error::invalid("attention mode needs a source mask"));
        }
        if needs_target && masks.target.is_none() {
            return Err(Error::invalid("attention mode needs a target mask"));
        }
        if mode != AttentionMode::Plain && !hooked_layers.is_empty() && kv.is_none() {
            return Err(Error::MissingCache("editing attention requires a source key/value cache".into()));
        }
        let mut grids = HashMap::new();
        for l in layers {
            if grids.contains_key(&l.grid) {
                continue;
            }
            let source = match &masks.source {
                Some(m) => to_grid(m, l.grid)?,
                None => Vec::new(),
            };
            let target = match &masks.target {
                Some(m) => to_grid(m, l.grid)?,
                None => Vec::new(),
            };
            let cross = masks.cross.as_ref().map(|m| to_grid(m, l.grid)).transpose()?;
            grids.insert(l.grid, GridMasks { source, target, cross });
        }
        Ok(Self {
            mode,
            schedule,
            current_tau: 1,
            hooked_layers,
            kv,
            grids,
        })
    }

    pub fn alpha(&self) -> f64 {
        alpha(&self.schedule, self.current_tau)
    }

    fn grid(&self, layer: &LayerInfo) -> Option<&GridMasks> {
        self.grids.get(&layer.grid)
    }
}

/// Hook dispatching a network's attention calls through an [`AttentionContext`].
pub struct EditAttention<'a> {
    pub ctx: &'a AttentionContext,
}

impl AttentionHook for EditAttention<'_> {
    fn self_attention(&mut self, layer: &LayerInfo, q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
        let ctx = self.ctx;
        if ctx.mode == AttentionMode::Plain || !ctx.hooked_layers.contains(&layer.id) {
            return plain_attention(q, k, v);
        }
        let tau = ctx.current_tau;
        let (k_s, v_s) = ctx
            .kv
            .as_ref()
            .and_then(|c| c.get(tau, layer.id))
            .ok_or_else(|| Error::MissingCache(format!("no source keys for step {tau}, layer {}", layer.id)))?;
        if k_s.rows != k.rows || k_s.cols != k.cols {
            return Err(Error::dims("cached keys do not match the layer grid"));
        }
        let g = ctx.grid(layer).ok_or_else(|| Error::dims("no masks for layer grid"))?;
        match ctx.mode {
            AttentionMode::Plain => plain_attention(q, k, v),
            AttentionMode::Step2 { restrict_all } => tca_step2(q, k, v, k_s, v_s, &g.source, ctx.alpha(), restrict_all),
            AttentionMode::Step3 => tca_step3(q, k, v, k_s, v_s, &g.source, &g.target, ctx.alpha()),
            AttentionMode::Mmsa => mmsa(q, k_s, v_s, &g.source, &g.target),
            AttentionMode::Ssa => ssa(q, k_s, k, v_s, v),
            AttentionMode::Sdsa => sdsa(q, k_s, k, v_s, v, &g.source),
        }
    }

    fn cross_attention(&mut self, layer: &LayerInfo, q: &Mat, cond: KvPair<'_>, null: KvPair<'_>) -> Result<Mat> {
        match self.ctx.grid(layer).and_then(|g| g.cross.as_ref()) {
            Some(m1) => localized_cross_attention(q, cond.k, cond.v, null.k, null.v, m1),
            None => plain_attention(q, cond.k, cond.v),
        }
    }
}

/// Plain attention that records the self-attention keys/values of selected
/// layers under one step index.
pub struct KvRecorder<'a> {
    pub cache: &'a mut KvCache,
    pub tau: usize,
    pub layers: &'a [usize],
}

impl AttentionHook for KvRecorder<'_> {
    fn self_attention(&mut self, layer: &LayerInfo, q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
        if self.layers.contains(&layer.id) {
            self.cache.insert(self.tau, layer.id, k.clone(), v.clone());
        }
        plain_attention(q, k, v)
    }
}
