use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{silu, silu_grad, Fmap, Mat};

use super::layers::{
    attention_backward, attention_forward, concat_channels, pixel_shuffle, pixel_unshuffle, silu_fmap, silu_fmap_backward,
    split_channels, timestep_embedding, upsample_nearest, upsample_nearest_backward, AttnCache, Conv2d, ConvCache, Grads,
    GroupNorm, Linear, NormCache, ParamStore,
};
use super::text::{ConditionEmbedding, TextEncoder};
use super::{AttentionHook, DenoiserConfig, KvPair, LayerInfo, NoiseSchedule};

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache {
    x: Fmap,
    n1: NormCache,
    a1: Fmap,
    c1: ConvCache,
    n2: NormCache,
    a2: Fmap,
    c2: ConvCache,
    skip: Option<ConvCache>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, embed: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0, rng),
            temb: Linear::new(ps, &format!("{name}.temb"), embed, cout, 1.0, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 1.0, rng)),
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Fmap, temb: &Mat) -> (Fmap, ResCache) {
        let (a1, n1) = self.norm1.forward(ps, x);
        let (mut h, c1) = self.conv1.forward(ps, &silu_fmap(&a1));
        let tp = self.temb.forward(ps, temb);
        let n = h.hw();
        for c in 0..h.c {
            let add = tp.data[c];
            h.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += add);
        }
        let (a2, n2) = self.norm2.forward(ps, &h);
        let (h2, c2) = self.conv2.forward(ps, &silu_fmap(&a2));
        let (mut out, skip) = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(ps, x);
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        out.add_assign(&h2);
        (
            out,
            ResCache {
                x: x.clone(),
                n1,
                a1,
                c1,
                n2,
                a2,
                c2,
                skip,
            },
        )
    }

    fn backward(&self, ps: &ParamStore, g: &mut Grads, cache: &ResCache, dy: &Fmap, temb: &Mat, dtemb: &mut Mat) -> Fmap {
        let ds2 = self.conv2.backward(ps, g, &cache.c2, dy);
        let da2 = silu_fmap_backward(&cache.a2, &ds2);
        let dh = self.norm2.backward(ps, g, &cache.n2, &da2);
        let n = dh.hw();
        let mut dtp = Mat::zeros(1, dh.c);
        for c in 0..dh.c {
            dtp.data[c] = dh.data[c * n..(c + 1) * n].iter().sum();
        }
        let dt = self.temb.backward(ps, g, temb, &dtp);
        for (a, b) in dtemb.data.iter_mut().zip(&dt.data) {
            *a += b;
        }
        let ds1 = self.conv1.backward(ps, g, &cache.c1, &dh);
        let da1 = silu_fmap_backward(&cache.a1, &ds1);
        let mut dx = self.norm1.backward(ps, g, &cache.n1, &da1);
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => dx.add_assign(&conv.backward(ps, g, sc, dy)),
            _ => dx.add_assign(dy),
        }
        let _ = &cache.x;
        dx
    }
}

struct AttnBlock {
    info: LayerInfo,
    norm1: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: GroupNorm,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
}

struct AttnBlockCache {
    n1: NormCache,
    t1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    a1: AttnCache,
    o1: Mat,
    n2: NormCache,
    t2: Mat,
    q2: Mat,
    k2: Mat,
    v2: Mat,
    a2: AttnCache,
    o2: Mat,
}

impl AttnBlock {
    fn new(ps: &mut ParamStore, name: &str, info: LayerInfo, c: usize, cond_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            info,
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c),
            q: Linear::new(ps, &format!("{name}.q"), c, c, 1.0, rng),
            k: Linear::new(ps, &format!("{name}.k"), c, c, 1.0, rng),
            v: Linear::new(ps, &format!("{name}.v"), c, c, 1.0, rng),
            o: Linear::new(ps, &format!("{name}.o"), c, c, 0.5, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c),
            cq: Linear::new(ps, &format!("{name}.cq"), c, c, 1.0, rng),
            ck: Linear::new(ps, &format!("{name}.ck"), cond_dim, c, 1.0, rng),
            cv: Linear::new(ps, &format!("{name}.cv"), cond_dim, c, 1.0, rng),
            co: Linear::new(ps, &format!("{name}.co"), c, c, 0.5, rng),
        }
    }

    /// Inference path: every attention product goes through `hook`.
    fn forward_hooked(
        &self,
        ps: &ParamStore,
        x: &Fmap,
        cond: &Mat,
        null: &Mat,
        cond_is_null: bool,
        hook: &mut dyn AttentionHook,
    ) -> Result<Fmap> {
        let (a, _) = self.norm1.forward(ps, x);
        let t = a.to_tokens();
        let (q, k, v) = (self.q.forward(ps, &t), self.k.forward(ps, &t), self.v.forward(ps, &t));
        let att = hook.self_attention(&self.info, &q, &k, &v)?;
        if att.rows != t.rows || att.cols != q.cols {
            return Err(Error::dims("self-attention processor returned wrong shape"));
        }
        let mut x1 = x.clone();
        x1.add_assign(&Fmap::from_tokens(&self.o.forward(ps, &att), x.h, x.w)?);

        let (b, _) = self.norm2.forward(ps, &x1);
        let tb = b.to_tokens();
        let q2 = self.cq.forward(ps, &tb);
        let (kc, vc) = (self.ck.forward(ps, cond), self.cv.forward(ps, cond));
        let att2 = if cond_is_null {
            let pair = KvPair { k: &kc, v: &vc };
            hook.cross_attention(&self.info, &q2, pair, pair)?
        } else {
            let (kn, vn) = (self.ck.forward(ps, null), self.cv.forward(ps, null));
            hook.cross_attention(&self.info, &q2, KvPair { k: &kc, v: &vc }, KvPair { k: &kn, v: &vn })?
        };
        if att2.rows != tb.rows || att2.cols != q2.cols {
            return Err(Error::dims("cross-attention processor returned wrong shape"));
        }
        x1.add_assign(&Fmap::from_tokens(&self.co.forward(ps, &att2), x.h, x.w)?);
        Ok(x1)
    }

    fn forward_train(&self, ps: &ParamStore, x: &Fmap, cond: &Mat) -> (Fmap, AttnBlockCache) {
        let (a, n1) = self.norm1.forward(ps, x);
        let t1 = a.to_tokens();
        let (q, k, v) = (self.q.forward(ps, &t1), self.k.forward(ps, &t1), self.v.forward(ps, &t1));
        let (o1, a1) = attention_forward(&q, &k, &v);
        let mut x1 = x.clone();
        x1.add_assign(&Fmap::from_tokens(&self.o.forward(ps, &o1), x.h, x.w).expect("grid"));
        let (b, n2) = self.norm2.forward(ps, &x1);
        let t2 = b.to_tokens();
        let q2 = self.cq.forward(ps, &t2);
        let (k2, v2) = (self.ck.forward(ps, cond), self.cv.forward(ps, cond));
        let (o2, a2) = attention_forward(&q2, &k2, &v2);
        x1.add_assign(&Fmap::from_tokens(&self.co.forward(ps, &o2), x.h, x.w).expect("grid"));
        (
            x1,
            AttnBlockCache {
                n1,
                t1,
                q,
                k,
                v,
                a1,
                o1,
                n2,
                t2,
                q2,
                k2,
                v2,
                a2,
                o2,
            },
        )
    }

    /// Returns `dx`; accumulates the condition-token gradient into `dcond`.
    fn backward(&self, ps: &ParamStore, g: &mut Grads, c: &AttnBlockCache, cond: &Mat, dy: &Fmap, dcond: &mut Mat) -> Fmap {
        let (h, w) = (dy.h, dy.w);
        let dtok = dy.to_tokens();
        let do2 = self.co.backward(ps, g, &c.o2, &dtok);
        let (dq2, dk2, dv2) = attention_backward(&c.q2, &c.k2, &c.v2, &c.a2, &do2);
        let dc1 = self.ck.backward(ps, g, cond, &dk2);
        let dc2 = self.cv.backward(ps, g, cond, &dv2);
        for ((d, a), b) in dcond.data.iter_mut().zip(&dc1.data).zip(&dc2.data) {
            *d += a + b;
        }
        let dt2 = self.cq.backward(ps, g, &c.t2, &dq2);
        let db = Fmap::from_tokens(&dt2, h, w).expect("grid");
        let mut dx1 = self.norm2.backward(ps, g, &c.n2, &db);
        dx1.add_assign(dy);

        let dtok1 = dx1.to_tokens();
        let do1 = self.o.backward(ps, g, &c.o1, &dtok1);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.a1, &do1);
        let mut dt1 = self.q.backward(ps, g, &c.t1, &dq);
        for (a, b) in dt1.data.iter_mut().zip(self.k.backward(ps, g, &c.t1, &dk).data) {
            *a += b;
        }
        for (a, b) in dt1.data.iter_mut().zip(self.v.backward(ps, g, &c.t1, &dv).data) {
            *a += b;
        }
        let da = Fmap::from_tokens(&dt1, h, w).expect("grid");
        let mut dx = self.norm1.backward(ps, g, &c.n1, &da);
        dx.add_assign(&dx1);
        dx
    }
}

struct EncLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv2d>,
}

struct DecLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv2d>,
}

/// Noise-prediction U-Net `ε(x_t, t, c)`.
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: ParamStore,
    text: TextEncoder,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    enc: Vec<EncLevel>,
    mid: ResBlock,
    dec: Vec<DecLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    layers: Vec<LayerInfo>,
}

/// Activations retained by [`Denoiser::forward_train`].
pub struct NetCache {
    temb_sin: Mat,
    temb_pre: Mat,
    temb_hidden: Mat,
    temb_out: Mat,
    temb_act: Mat,
    stem: ConvCache,
    enc_res: Vec<ResCache>,
    enc_attn: Vec<Option<AttnBlockCache>>,
    enc_down: Vec<Option<ConvCache>>,
    skip_channels: Vec<usize>,
    mid: ResCache,
    dec_res: Vec<ResCache>,
    dec_attn: Vec<Option<AttnBlockCache>>,
    dec_up: Vec<Option<ConvCache>>,
    out_norm: NormCache,
    out_pre: Fmap,
    out_conv: ConvCache,
    cond: ConditionEmbedding,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let e = config.embed_dim;
        let table = ps.add_normal("text.table", vec![config.vocab_size, config.cond_dim], 1.0, &mut rng);
        let text = TextEncoder {
            table,
            vocab: config.vocab_size,
            dim: config.cond_dim,
            len: config.cond_len,
        };
        let time1 = Linear::new(&mut ps, "time.fc1", e, e, 1.0, &mut rng);
        let time2 = Linear::new(&mut ps, "time.fc2", e, e, 1.0, &mut rng);
        let stem = Conv2d::new(&mut ps, "stem", config.in_channels * 4, config.base_channels, 3, 1, 1.0, &mut rng);

        let grids = config.level_grids();
        let mut layers = Vec::new();
        let mut enc = Vec::new();
        for (i, &grid) in grids.iter().enumerate() {
            let c = config.level_channels(i);
            let cin = if i == 0 { c } else { config.level_channels(i) };
            let res = ResBlock::new(&mut ps, &format!("enc{i}.res"), cin, c, e, &mut rng);
            let attn = config.attention_grids.contains(&grid).then(|| {
                let info = LayerInfo {
                    id: layers.len(),
                    grid: (grid, grid),
                    decoder: false,
                };
                layers.push(info);
                AttnBlock::new(&mut ps, &format!("enc{i}.attn"), info, c, config.cond_dim, &mut rng)
            });
            let down = (i + 1 < grids.len())
                .then(|| Conv2d::new(&mut ps, &format!("enc{i}.down"), c, config.level_channels(i + 1), 3, 2, 1.0, &mut rng));
            enc.push(EncLevel { res, attn, down });
        }
        let cl = config.level_channels(grids.len() - 1);
        let mid = ResBlock::new(&mut ps, "mid.res", cl, cl, e, &mut rng);
        let mut dec: Vec<DecLevel> = Vec::new();
        for (i, &grid) in grids.iter().enumerate().rev() {
            let c = config.level_channels(i);
            let res = ResBlock::new(&mut ps, &format!("dec{i}.res"), 2 * c, c, e, &mut rng);
            let attn = config.attention_grids.contains(&grid).then(|| {
                let info = LayerInfo {
                    id: layers.len(),
                    grid: (grid, grid),
                    decoder: true,
                };
                layers.push(info);
                AttnBlock::new(&mut ps, &format!("dec{i}.attn"), info, c, config.cond_dim, &mut rng)
            });
            let up = (i > 0).then(|| Conv2d::new(&mut ps, &format!("dec{i}.up"), c, config.level_channels(i - 1), 3, 1, 1.0, &mut rng));
            dec.push(DecLevel { res, attn, up });
        }
        let out_norm = GroupNorm::new(&mut ps, "out.norm", config.base_channels);
        let out_conv = Conv2d::new(&mut ps, "out.conv", config.base_channels, config.in_channels * 4, 3, 1, 0.1, &mut rng);
        Ok(Self {
            config,
            schedule,
            params: ps,
            text,
            time1,
            time2,
            stem,
            enc,
            mid,
            dec,
            out_norm,
            out_conv,
            layers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Every attention layer, in forward order.
    pub fn attention_layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn decoder_layer_ids(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.decoder).map(|l| l.id).collect()
    }

    pub fn embed_prompt(&self, text: &str) -> ConditionEmbedding {
        self.text.embed(&self.params, text)
    }

    pub fn null_embedding(&self) -> ConditionEmbedding {
        self.text.null(&self.params)
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    fn time_embedding(&self, t: usize) -> (Mat, Mat, Mat, Mat, Mat) {
        let sin = Mat::from_vec(1, self.config.embed_dim, timestep_embedding(t, self.config.embed_dim)).expect("dim");
        let pre = self.time1.forward(&self.params, &sin);
        let hidden = Mat::from_vec(1, pre.cols, pre.data.iter().map(|v| silu(*v)).collect()).expect("dim");
        let out = self.time2.forward(&self.params, &hidden);
        let act = Mat::from_vec(1, out.cols, out.data.iter().map(|v| silu(*v)).collect()).expect("dim");
        (sin, pre, hidden, out, act)
    }

    fn check_input(&self, x: &Fmap, t: usize) -> Result<()> {
        let div = 1usize << self.config.levels;
        if x.c != self.config.in_channels || x.h % div != 0 || x.w % div != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::dims(format!(
                "latent {}x{}x{} incompatible with the network (channels {}, sides divisible by {div})",
                x.c, x.h, x.w, self.config.in_channels
            )));
        }
        if t == 0 || t > self.schedule.train_steps {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.schedule.train_steps)));
        }
        if !x.is_finite() {
            return Err(Error::Numerical("non-finite latent".into()));
        }
        Ok(())
    }

    /// `ε(x_t, t, cond)` with every attention layer routed through `hook`.
    /// The network itself regresses `v = √ᾱ ε − √(1−ᾱ) x0`; converting to
    /// `ε = √ᾱ v + √(1−ᾱ) x_t` keeps `x̂0` errors bounded at high noise.
    pub fn predict_noise(&self, x: &Fmap, t: usize, cond: &ConditionEmbedding, hook: &mut dyn AttentionHook) -> Result<Fmap> {
        self.check_input(x, t)?;
        if cond.tokens.cols != self.config.cond_dim {
            return Err(Error::dims("condition embedding width"));
        }
        let ps = &self.params;
        let null = if cond.is_null { cond.clone() } else { self.null_embedding() };
        let (_, _, _, _, temb) = self.time_embedding(t);

        let mut h = self.stem.forward(ps, &pixel_unshuffle(x)).0;
        let mut skips = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            h = level.res.forward(ps, &h, &temb).0;
            if let Some(attn) = &level.attn {
                h = attn.forward_hooked(ps, &h, &cond.tokens, &null.tokens, cond.is_null, hook)?;
            }
            skips.push(h.clone());
            if let Some(down) = &level.down {
                h = down.forward(ps, &h).0;
            }
        }
        h = self.mid.forward(ps, &h, &temb).0;
        for level in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            h = level.res.forward(ps, &concat_channels(&h, &skip), &temb).0;
            if let Some(attn) = &level.attn {
                h = attn.forward_hooked(ps, &h, &cond.tokens, &null.tokens, cond.is_null, hook)?;
            }
            if let Some(up) = &level.up {
                h = up.forward(ps, &upsample_nearest(&h)).0;
            }
        }
        let (a, _) = self.out_norm.forward(ps, &h);
        let v = pixel_shuffle(&self.out_conv.forward(ps, &silu_fmap(&a)).0);
        let out = self.v_to_eps(x, &v, t);
        if !out.is_finite() {
            return Err(Error::Numerical("non-finite noise prediction".into()));
        }
        Ok(out)
    }

    pub fn v_to_eps(&self, x: &Fmap, v: &Fmap, t: usize) -> Fmap {
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = v.clone();
        for (o, xv) in out.data.iter_mut().zip(&x.data) {
            *o = (a * *o as f64 + b * *xv as f64) as f32;
        }
        out
    }

    /// Globally pooled encoder activations at a fixed low noise level; a
    /// cheap feature embedding for the metric suite.
    pub fn pooled_features(&self, x: &Fmap) -> Result<Vec<f32>> {
        let t = (self.schedule.train_steps / 20).max(1);
        self.check_input(x, t)?;
        let ps = &self.params;
        let (_, _, _, _, temb) = self.time_embedding(t);
        let mut feats = Vec::new();
        let pool = |f: &Fmap, out: &mut Vec<f32>| {
            let n = f.hw() as f32;
            for c in 0..f.c {
                out.push(f.channel(c).iter().sum::<f32>() / n);
            }
        };
        let mut h = self.stem.forward(ps, &pixel_unshuffle(x)).0;
        for level in &self.enc {
            h = level.res.forward(ps, &h, &temb).0;
            pool(&h, &mut feats);
            if let Some(down) = &level.down {
                h = down.forward(ps, &h).0;
            }
        }
        h = self.mid.forward(ps, &h, &temb).0;
        pool(&h, &mut feats);
        Ok(feats)
    }

    /// Forward pass with plain attention that keeps every activation.
    /// Returns the raw `v` prediction.
    pub fn forward_train(&self, x: &Fmap, t: usize, cond: &ConditionEmbedding) -> Result<(Fmap, NetCache)> {
        self.check_input(x, t)?;
        let ps = &self.params;
        let (temb_sin, temb_pre, temb_hidden, temb_out, temb_act) = self.time_embedding(t);
        let (mut h, stem) = self.stem.forward(ps, &pixel_unshuffle(x));
        let mut enc_res = Vec::new();
        let mut enc_attn = Vec::new();
        let mut enc_down = Vec::new();
        let mut skips = Vec::new();
        for level in &self.enc {
            let (o, rc) = level.res.forward(ps, &h, &temb_act);
            h = o;
            enc_res.push(rc);
            enc_attn.push(level.attn.as_ref().map(|attn| {
                let (o, ac) = attn.forward_train(ps, &h, &cond.tokens);
                h = o;
                ac
            }));
            skips.push(h.clone());
            enc_down.push(level.down.as_ref().map(|down| {
                let (o, dc) = down.forward(ps, &h);
                h = o;
                dc
            }));
        }
        let skip_channels = skips.iter().map(|s| s.c).collect();
        let (o, mid) = self.mid.forward(ps, &h, &temb_act);
        h = o;
        let mut dec_res = Vec::new();
        let mut dec_attn = Vec::new();
        let mut dec_up = Vec::new();
        for level in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            let (o, rc) = level.res.forward(ps, &concat_channels(&h, &skip), &temb_act);
            h = o;
            dec_res.push(rc);
            dec_attn.push(level.attn.as_ref().map(|attn| {
                let (o, ac) = attn.forward_train(ps, &h, &cond.tokens);
                h = o;
                ac
            }));
            dec_up.push(level.up.as_ref().map(|up| {
                let (o, uc) = up.forward(ps, &upsample_nearest(&h));
                h = o;
                uc
            }));
        }
        let (out_pre, out_norm) = self.out_norm.forward(ps, &h);
        let (o, out_conv) = self.out_conv.forward(ps, &silu_fmap(&out_pre));
        Ok((
            pixel_shuffle(&o),
            NetCache {
                temb_sin,
                temb_pre,
                temb_hidden,
                temb_out,
                temb_act,
                stem,
                enc_res,
                enc_attn,
                enc_down,
                skip_channels,
                mid,
                dec_res,
                dec_attn,
                dec_up,
                out_norm,
                out_pre,
                out_conv,
                cond: cond.clone(),
            },
        ))
    }

    /// Accumulates parameter gradients of `⟨d_out, ε⟩` into `grads`.
    pub fn backward(&self, cache: &NetCache, d_out: &Fmap, grads: &mut Grads) {
        let ps = &self.params;
        let mut dtemb = Mat::zeros(1, self.config.embed_dim);
        let mut dcond = Mat::zeros(cache.cond.tokens.rows, cache.cond.tokens.cols);
        let temb = &cache.temb_act;

        let d = pixel_unshuffle(d_out);
        let ds = self.out_conv.backward(ps, grads, &cache.out_conv, &d);
        let da = silu_fmap_backward(&cache.out_pre, &ds);
        let mut dh = self.out_norm.backward(ps, grads, &cache.out_norm, &da);

        let mut dskips: Vec<Option<Fmap>> = vec![None; self.dec.len()];
        for (i, level) in self.dec.iter().enumerate().rev() {
            if let (Some(up), Some(uc)) = (&level.up, &cache.dec_up[i]) {
                dh = upsample_nearest_backward(&up.backward(ps, grads, uc, &dh));
            }
            if let (Some(attn), Some(ac)) = (&level.attn, &cache.dec_attn[i]) {
                dh = attn.backward(ps, grads, ac, &cache.cond.tokens, &dh, &mut dcond);
            }
            let dcat = level.res.backward(ps, grads, &cache.dec_res[i], &dh, temb, &mut dtemb);
            let skip_c = cache.skip_channels[self.enc.len() - 1 - i];
            let (dprev, dskip) = split_channels(&dcat, dcat.c - skip_c);
            dh = dprev;
            dskips[i] = Some(dskip);
        }
        dh = self.mid.backward(ps, grads, &cache.mid, &dh, temb, &mut dtemb);
        for (i, level) in self.enc.iter().enumerate().rev() {
            if let (Some(down), Some(dc)) = (&level.down, &cache.enc_down[i]) {
                dh = down.backward(ps, grads, dc, &dh);
            }
            dh.add_assign(dskips[self.enc.len() - 1 - i].as_ref().expect("decoder visited every level"));
            if let (Some(attn), Some(ac)) = (&level.attn, &cache.enc_attn[i]) {
                dh = attn.backward(ps, grads, ac, &cache.cond.tokens, &dh, &mut dcond);
            }
            dh = level.res.backward(ps, grads, &cache.enc_res[i], &dh, temb, &mut dtemb);
        }
        self.stem.backward(ps, grads, &cache.stem, &dh);

        // Time MLP: act = silu(out), out = fc2(hidden), hidden = silu(pre), pre = fc1(sin).
        let dout = Mat::from_vec(
            1,
            dtemb.cols,
            dtemb.data.iter().zip(&cache.temb_out.data).map(|(d, x)| d * silu_grad(*x)).collect(),
        )
        .expect("dim");
        let dhidden = self.time2.backward(ps, grads, &cache.temb_hidden, &dout);
        let dpre = Mat::from_vec(
            1,
            dhidden.cols,
            dhidden.data.iter().zip(&cache.temb_pre.data).map(|(d, x)| d * silu_grad(*x)).collect(),
        )
        .expect("dim");
        self.time1.backward(ps, grads, &cache.temb_sin, &dpre);
        self.text.backward(grads, &cache.cond.ids, &dcond);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PlainAttention;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> Denoiser {
        Denoiser::new(DenoiserConfig::tiny(), NoiseSchedule::default()).unwrap()
    }

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> Fmap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Fmap::from_vec(c, h, w, (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn hooked_forward_matches_training_forward() {
        let net = tiny();
        let x = noise(3, 8, 8, 1);
        let cond = net.embed_prompt("red circle");
        let a = net.predict_noise(&x, 500, &cond, &mut PlainAttention).unwrap();
        let (v, _) = net.forward_train(&x, 500, &cond).unwrap();
        let b = net.v_to_eps(&x, &v, 500);
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| (p - q).abs() < 1e-5));
    }

    #[test]
    fn predict_noise_is_deterministic() {
        let net = tiny();
        let x = noise(3, 8, 8, 2);
        let cond = net.null_embedding();
        let a = net.predict_noise(&x, 10, &cond, &mut PlainAttention).unwrap();
        let b = net.predict_noise(&x, 10, &cond, &mut PlainAttention).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.c, a.h, a.w), (3, 8, 8));
    }

    #[test]
    fn rejects_bad_shapes_and_timesteps() {
        let net = tiny();
        let cond = net.null_embedding();
        assert!(net.predict_noise(&noise(3, 6, 8, 0), 5, &cond, &mut PlainAttention).is_err());
        assert!(net.predict_noise(&noise(1, 8, 8, 0), 5, &cond, &mut PlainAttention).is_err());
        assert!(net.predict_noise(&noise(3, 8, 8, 0), 0, &cond, &mut PlainAttention).is_err());
        assert!(net.predict_noise(&noise(3, 8, 8, 0), 1001, &cond, &mut PlainAttention).is_err());
    }

    #[test]
    fn layer_ids_follow_forward_order() {
        let net = Denoiser::new(DenoiserConfig::default(), NoiseSchedule::default()).unwrap();
        let layers = net.attention_layers();
        assert_eq!(layers.len(), 4);
        assert_eq!(layers.iter().map(|l| l.grid.0).collect::<Vec<_>>(), vec![16, 8, 8, 16]);
        assert_eq!(net.decoder_layer_ids(), vec![2, 3]);
    }
}
