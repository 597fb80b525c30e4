//! Conditional mask denoiser predicting `x_0` logits from a noisy label grid,
//! conditioning features and the timestep.
//!
//! The network is a small U-Net: a label embedding is concatenated with the
//! features, passed through residual blocks at `depth + 1` resolutions with
//! skip connections, and projected to per-class logits. The timestep enters
//! every residual block as a per-channel scale and shift.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{self, Container};
use crate::discrete::ce_loss_with_grad;
use crate::error::{Error, Result};
use crate::grids::{FeatureGrid, LabelGrid, LogitsGrid};
use crate::nn::{self, Act, ParamSet, Real};
use crate::seed::Rng;

pub const CHECKPOINT_MAGIC: &[u8] = b"DDPSCKPT";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub num_classes: usize,
    pub feature_channels: usize,
    pub base_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
    /// Label embedding width.
    pub embed_dim: usize,
    /// Self-attention after the residual block, per level; index `depth` is
    /// the bottleneck.
    pub attention: Vec<bool>,
}

impl DenoiserConfig {
    pub fn desk(num_classes: usize, feature_channels: usize) -> Self {
        Self {
            num_classes,
            feature_channels,
            base_channels: 32,
            depth: 2,
            embed_dim: 16,
            attention: vec![false; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("denoiser depth must be >= 1".into()));
        }
        if self.base_channels < 8 || self.base_channels % 2 != 0 {
            return Err(Error::Config("base_channels must be even and >= 8".into()));
        }
        if self.num_classes < 2 || self.embed_dim == 0 {
            return Err(Error::Config("need >= 2 classes and a label embedding".into()));
        }
        if self.attention.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "attention needs {} entries, got {}",
                self.depth + 1,
                self.attention.len()
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        if level == 0 {
            self.base_channels
        } else {
            2 * self.base_channels
        }
    }

    fn time_dim(&self) -> usize {
        2 * self.base_channels
    }

    /// Spatial dimensions must halve cleanly `depth` times.
    pub fn grid_multiple(&self) -> usize {
        1 << self.depth
    }

    pub(crate) fn to_block(&self) -> Vec<(String, String)> {
        let att: Vec<String> = self.attention.iter().map(|&a| u8::from(a).to_string()).collect();
        vec![
            ("num_classes".into(), self.num_classes.to_string()),
            ("feature_channels".into(), self.feature_channels.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("attention".into(), att.join(",")),
        ]
    }

    pub(crate) fn from_block(block: &checkpoint::ConfigBlock) -> Result<Self> {
        let attention = block
            .get_str("attention")?
            .split(',')
            .map(|s| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Format(format!("bad attention flag {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let cfg = Self {
            num_classes: block.get("num_classes")?,
            feature_channels: block.get("feature_channels")?,
            base_channels: block.get("base_channels")?,
            depth: block.get("depth")?,
            embed_dim: block.get("embed_dim")?,
            attention,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sinusoidal embedding with interleaved `[sin, cos]` pairs at geometric
/// frequencies `10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "timestep embedding dim {dim} must be even"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct ResIdx {
    conv1: ConvIdx,
    conv2: ConvIdx,
    time: ConvIdx,
    skip: Option<ConvIdx>,
    cout: usize,
}

#[derive(Clone, Debug)]
struct AttnIdx {
    qkv: ConvIdx,
    proj: ConvIdx,
}

#[derive(Clone, Debug)]
struct Block {
    res: ResIdx,
    attn: Option<AttnIdx>,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    time1: ConvIdx,
    time2: ConvIdx,
    stem: ConvIdx,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    head: ConvIdx,
}

fn push_conv<F: Real>(ps: &mut ParamSet<F>, name: &str, shape: &[usize], cout: usize) -> ConvIdx {
    ConvIdx {
        w: ps.push(format!("{name}.weight"), shape),
        b: ps.push(format!("{name}.bias"), &[cout]),
    }
}

fn push_block<F: Real>(
    ps: &mut ParamSet<F>,
    name: &str,
    cin: usize,
    cout: usize,
    tdim: usize,
    attention: bool,
) -> Block {
    let res = ResIdx {
        conv1: push_conv(ps, &format!("{name}.conv1"), &[9, cin, cout], cout),
        conv2: push_conv(ps, &format!("{name}.conv2"), &[9, cout, cout], cout),
        time: push_conv(ps, &format!("{name}.time"), &[tdim, 2 * cout], 2 * cout),
        skip: (cin != cout).then(|| push_conv(ps, &format!("{name}.skip"), &[cin, cout], cout)),
        cout,
    };
    let attn = attention.then(|| AttnIdx {
        qkv: push_conv(ps, &format!("{name}.attn.qkv"), &[cout, 3 * cout], 3 * cout),
        proj: push_conv(ps, &format!("{name}.attn.proj"), &[cout, cout], cout),
    });
    Block { res, attn }
}

fn build_layout<F: Real>(cfg: &DenoiserConfig) -> (Layout, ParamSet<F>) {
    let mut ps = ParamSet::new();
    let tdim = cfg.time_dim();
    let base = cfg.base_channels;
    let embed = ps.push("embed", &[cfg.num_classes + 1, cfg.embed_dim]);
    let time1 = push_conv(&mut ps, "time.lin1", &[base, tdim], tdim);
    let time2 = push_conv(&mut ps, "time.lin2", &[tdim, tdim], tdim);
    let stem = push_conv(
        &mut ps,
        "stem",
        &[9, cfg.embed_dim + cfg.feature_channels, base],
        base,
    );
    let mut down = Vec::new();
    let mut cin = base;
    for l in 0..cfg.depth {
        let cout = cfg.channels(l);
        down.push(push_block(&mut ps, &format!("down{l}"), cin, cout, tdim, cfg.attention[l]));
        cin = cout;
    }
    let mid = push_block(
        &mut ps,
        "mid",
        cin,
        cfg.channels(cfg.depth),
        tdim,
        cfg.attention[cfg.depth],
    );
    let mut up: Vec<Block> = Vec::new();
    let mut below = cfg.channels(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let cout = cfg.channels(l);
        up.push(push_block(
            &mut ps,
            &format!("up{l}"),
            below + cout,
            cout,
            tdim,
            cfg.attention[l],
        ));
        below = cout;
    }
    up.reverse();
    let head = push_conv(&mut ps, "head", &[base, cfg.num_classes], cfg.num_classes);
    (
        Layout {
            embed,
            time1,
            time2,
            stem,
            down,
            mid,
            up,
            head,
        },
        ps,
    )
}

/// Denoiser weights plus the configuration that fixes their layout.
#[derive(Clone, Debug)]
pub struct DenoiserParams<F> {
    config: DenoiserConfig,
    layout: Layout,
    tensors: ParamSet<F>,
    /// Whether training included condition dropout, so the zero-feature
    /// forward pass is a meaningful unconditional model.
    pub unconditional_branch: bool,
}

impl<F: Real> PartialEq for DenoiserParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors == other.tensors
            && self.unconditional_branch == other.unconditional_branch
    }
}

struct ResTape<F> {
    x: Act<F>,
    a1: Act<F>,
    h1: Act<F>,
    scale: Vec<F>,
    h2: Act<F>,
    a2: Act<F>,
}

struct AttnTape<F> {
    x: Act<F>,
    qkv: Act<F>,
    /// Row-softmaxed attention weights, `[N][N]`.
    weights: Vec<F>,
    mixed: Act<F>,
}

struct BlockTape<F> {
    res: ResTape<F>,
    attn: Option<AttnTape<F>>,
}

/// Intermediate activations kept for the backward pass.
pub struct Tape<F> {
    labels: Vec<u16>,
    input: Act<F>,
    time_sin: Vec<F>,
    time_h: Vec<F>,
    time_out: Vec<F>,
    time_act: Vec<F>,
    down: Vec<BlockTape<F>>,
    down_dims: Vec<(usize, usize)>,
    mid: BlockTape<F>,
    up: Vec<BlockTape<F>>,
    head_in: Act<F>,
    head_act: Act<F>,
}

impl<F: Real> DenoiserParams<F> {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (layout, tensors) = build_layout(&config);
        Ok(Self {
            config,
            layout,
            tensors,
            unconditional_branch: false,
        })
    }

    /// Random initialization: variance `1/fan_in` weights, zero biases, unit
    /// normal label embeddings, and small timestep projections.
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for t in &mut p.tensors.tensors {
            if t.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = if t.name == "embed" {
                1
            } else {
                t.shape[..t.shape.len() - 1].iter().product()
            };
            let mut std = 1.0 / (fan_in as f64).sqrt();
            if t.name.ends_with(".time.weight") {
                std *= 0.1;
            }
            nn::normal_fill(&mut t.data, std, rng);
        }
        Ok(p)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }
    pub fn tensors(&self) -> &ParamSet<F> {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.tensors
    }

    pub fn with_tensors(&self, tensors: ParamSet<F>) -> Result<Self> {
        if !tensors.same_layout(&self.tensors) {
            return Err(Error::Shape("parameter layout differs".into()));
        }
        Ok(Self {
            tensors,
            ..self.clone()
        })
    }

    pub fn cast<G: Real>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.cast(),
            unconditional_branch: self.unconditional_branch,
        }
    }

    fn check_inputs(&self, noisy: &LabelGrid, features: Option<&FeatureGrid>) -> Result<()> {
        let cfg = &self.config;
        if noisy.num_classes() != cfg.num_classes {
            return Err(Error::Shape(format!(
                "noisy grid has {} classes, denoiser expects {}",
                noisy.num_classes(),
                cfg.num_classes
            )));
        }
        let m = cfg.grid_multiple();
        if noisy.height() % m != 0 || noisy.width() % m != 0 {
            return Err(Error::NotDivisible {
                height: noisy.height(),
                width: noisy.width(),
                factor: m,
            });
        }
        if let Some(f) = features {
            if f.height() != noisy.height() || f.width() != noisy.width() {
                return Err(Error::Shape(format!(
                    "features {}x{} vs noisy mask {}x{}",
                    f.height(),
                    f.width(),
                    noisy.height(),
                    noisy.width()
                )));
            }
            if f.channels() != cfg.feature_channels {
                return Err(Error::Shape(format!(
                    "{} feature channels, denoiser expects {}",
                    f.channels(),
                    cfg.feature_channels
                )));
            }
        }
        Ok(())
    }

    /// Logits for `x_0`. `features = None` runs the unconditional branch
    /// (all-zero features).
    pub fn forward(
        &self,
        noisy: &LabelGrid,
        features: Option<&FeatureGrid>,
        t: usize,
    ) -> Result<LogitsGrid> {
        let (out, _) = self.forward_tape(noisy, features, t)?;
        LogitsGrid::new(
            out.h,
            out.w,
            out.c,
            out.data.iter().map(|v| v.f64()).collect(),
        )
    }

    pub fn forward_tape(
        &self,
        noisy: &LabelGrid,
        features: Option<&FeatureGrid>,
        t: usize,
    ) -> Result<(Act<F>, Tape<F>)> {
        self.check_inputs(noisy, features)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let ps = &self.tensors;
        let (h, w) = (noisy.height(), noisy.width());
        let (e, fc) = (cfg.embed_dim, cfg.feature_channels);

        let table = ps.get(lay.embed);
        let mut input = Act::zeros(h, w, e + fc);
        for (p, &label) in noisy.values().iter().enumerate() {
            let dst = &mut input.data[p * (e + fc)..(p + 1) * (e + fc)];
            dst[..e].copy_from_slice(&table[label as usize * e..(label as usize + 1) * e]);
            if let Some(f) = features {
                for (d, &v) in dst[e..].iter_mut().zip(&f.values()[p * fc..(p + 1) * fc]) {
                    *d = F::of(v as f64);
                }
            }
        }

        let time_sin: Vec<F> = timestep_embedding(t as f64, cfg.base_channels)?
            .into_iter()
            .map(F::of)
            .collect();
        let time_h = nn::linear(&time_sin, ps.get(lay.time1.w), ps.get(lay.time1.b));
        let time_a = nn::silu_vec(&time_h);
        let time_out = nn::linear(&time_a, ps.get(lay.time2.w), ps.get(lay.time2.b));
        let time_act = nn::silu_vec(&time_out);

        let mut x = nn::conv3x3(&input, ps.get(lay.stem.w), ps.get(lay.stem.b));
        let mut down = Vec::with_capacity(cfg.depth);
        let mut down_dims = Vec::with_capacity(cfg.depth);
        let mut skips = Vec::with_capacity(cfg.depth);
        for block in &lay.down {
            let (y, tape) = self.block_forward(block, x, &time_act);
            down.push(tape);
            down_dims.push((y.h, y.w));
            x = nn::avg_pool2(&y);
            skips.push(y);
        }
        let (mut x, mid) = self.block_forward(&lay.mid, x, &time_act);
        let mut up: Vec<BlockTape<F>> = Vec::with_capacity(cfg.depth);
        for (block, skip) in lay.up.iter().zip(&skips).rev() {
            let merged = nn::concat(&nn::upsample2(&x), skip);
            let (y, tape) = self.block_forward(block, merged, &time_act);
            up.push(tape);
            x = y;
        }
        up.reverse();
        let head_act = nn::silu(&x);
        let out = nn::conv1x1(&head_act, ps.get(lay.head.w), ps.get(lay.head.b));
        Ok((
            out,
            Tape {
                labels: noisy.values().to_vec(),
                input,
                time_sin,
                time_h,
                time_out,
                time_act,
                down,
                down_dims,
                mid,
                up,
                head_in: x,
                head_act,
            },
        ))
    }

    fn block_forward(&self, block: &Block, x: Act<F>, time_act: &[F]) -> (Act<F>, BlockTape<F>) {
        let (y, res) = self.res_forward(&block.res, x, time_act);
        match &block.attn {
            None => (y, BlockTape { res, attn: None }),
            Some(a) => {
                let (z, at) = self.attn_forward(a, y);
                (z, BlockTape { res, attn: Some(at) })
            }
        }
    }

    fn res_forward(&self, r: &ResIdx, x: Act<F>, time_act: &[F]) -> (Act<F>, ResTape<F>) {
        let ps = &self.tensors;
        let a1 = nn::silu(&x);
        let h1 = nn::conv3x3(&a1, ps.get(r.conv1.w), ps.get(r.conv1.b));
        let ss = nn::linear(time_act, ps.get(r.time.w), ps.get(r.time.b));
        let (scale, shift) = ss.split_at(r.cout);
        let h2 = nn::scale_shift(&h1, scale, shift);
        let a2 = nn::silu(&h2);
        let mut out = nn::conv3x3(&a2, ps.get(r.conv2.w), ps.get(r.conv2.b));
        match &r.skip {
            Some(s) => out.add_assign(&nn::conv1x1(&x, ps.get(s.w), ps.get(s.b))),
            None => out.add_assign(&x),
        }
        (
            out,
            ResTape {
                x,
                a1,
                h1,
                scale: scale.to_vec(),
                h2,
                a2,
            },
        )
    }

    fn attn_forward(&self, a: &AttnIdx, x: Act<F>) -> (Act<F>, AttnTape<F>) {
        let ps = &self.tensors;
        let c = x.c;
        let n = x.pixels();
        let qkv = nn::conv1x1(&x, ps.get(a.qkv.w), ps.get(a.qkv.b));
        let inv = F::of(1.0 / (c as f64).sqrt());
        let mut weights = vec![F::zero(); n * n];
        for i in 0..n {
            let q = &qkv.px(i)[..c];
            let row = &mut weights[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                let k = &qkv.px(j)[c..2 * c];
                *r = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<F>() * inv;
            }
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r = *r / sum;
            }
        }
        let mut mixed = Act::zeros(x.h, x.w, c);
        for i in 0..n {
            let o = &mut mixed.data[i * c..(i + 1) * c];
            for j in 0..n {
                let wgt = weights[i * n + j];
                for (ov, &vv) in o.iter_mut().zip(&qkv.px(j)[2 * c..]) {
                    *ov += wgt * vv;
                }
            }
        }
        let mut out = nn::conv1x1(&mixed, ps.get(a.proj.w), ps.get(a.proj.b));
        out.add_assign(&x);
        (
            out,
            AttnTape {
                x,
                qkv,
                weights,
                mixed,
            },
        )
    }

    /// Parameter gradients given `dlogits = dL/dlogits` for one forward pass.
    pub fn backward(&self, tape: &Tape<F>, dlogits: &Act<F>) -> ParamSet<F> {
        let cfg = &self.config;
        let lay = &self.layout;
        let ps = &self.tensors;
        let mut g = ps.zeros_like();
        let mut dtime = vec![F::zero(); cfg.time_dim()];

        let dhead_act = {
            let (dw, db) = two_mut(&mut g, lay.head.w, lay.head.b);
            nn::conv1x1_backward(&tape.head_act, ps.get(lay.head.w), dlogits, dw, db, true)
                .expect("dx requested")
        };
        let mut dx = nn::silu_backward(&tape.head_in, &dhead_act);

        let mut dskips = Vec::with_capacity(cfg.depth);
        for (block, bt) in lay.up.iter().zip(&tape.up) {
            let dmerged = self.block_backward(block, bt, &dx, &tape.time_act, &mut g, &mut dtime);
            let below = dmerged.c - block.res.cout;
            let (dup, dskip) = nn::split(&dmerged, below);
            dskips.push(dskip);
            dx = nn::upsample2_backward(&dup);
        }
        dx = self.block_backward(&lay.mid, &tape.mid, &dx, &tape.time_act, &mut g, &mut dtime);
        for l in (0..cfg.depth).rev() {
            let (h, w) = tape.down_dims[l];
            let mut dy = nn::avg_pool2_backward(&dx, h, w);
            dy.add_assign(&dskips[l]);
            dx = self.block_backward(&lay.down[l], &tape.down[l], &dy, &tape.time_act, &mut g, &mut dtime);
        }

        let dinput = {
            let (dw, db) = two_mut(&mut g, lay.stem.w, lay.stem.b);
            nn::conv3x3_backward(&tape.input, ps.get(lay.stem.w), &dx, dw, db, true)
                .expect("dx requested")
        };
        let e = cfg.embed_dim;
        let table = g.get_mut(lay.embed);
        for (p, &label) in tape.labels.iter().enumerate() {
            let src = &dinput.px(p)[..e];
            for (d, &s) in table[label as usize * e..(label as usize + 1) * e]
                .iter_mut()
                .zip(src)
            {
                *d += s;
            }
        }

        let dtime_out = nn::silu_vec_backward(&tape.time_out, &dtime);
        let dtime_a = {
            let (dw, db) = two_mut(&mut g, lay.time2.w, lay.time2.b);
            nn::linear_backward(&nn::silu_vec(&tape.time_h), ps.get(lay.time2.w), &dtime_out, dw, db)
        };
        let dtime_h = nn::silu_vec_backward(&tape.time_h, &dtime_a);
        let (dw, db) = two_mut(&mut g, lay.time1.w, lay.time1.b);
        nn::linear_backward(&tape.time_sin, ps.get(lay.time1.w), &dtime_h, dw, db);
        g
    }

    fn block_backward(
        &self,
        block: &Block,
        tape: &BlockTape<F>,
        dout: &Act<F>,
        time_act: &[F],
        g: &mut ParamSet<F>,
        dtime: &mut [F],
    ) -> Act<F> {
        let dres = match (&block.attn, &tape.attn) {
            (Some(a), Some(at)) => self.attn_backward(a, at, dout, g),
            _ => dout.clone(),
        };
        self.res_backward(&block.res, &tape.res, &dres, time_act, g, dtime)
    }

    fn res_backward(
        &self,
        r: &ResIdx,
        tape: &ResTape<F>,
        dout: &Act<F>,
        time_act: &[F],
        g: &mut ParamSet<F>,
        dtime: &mut [F],
    ) -> Act<F> {
        let ps = &self.tensors;
        let da2 = {
            let (dw, db) = two_mut(g, r.conv2.w, r.conv2.b);
            nn::conv3x3_backward(&tape.a2, ps.get(r.conv2.w), dout, dw, db, true).expect("dx")
        };
        let dh2 = nn::silu_backward(&tape.h2, &da2);
        let (dh1, dscale, dshift) = nn::scale_shift_backward(&tape.h1, &tape.scale, &dh2);
        let dss: Vec<F> = dscale.into_iter().chain(dshift).collect();
        {
            let (dw, db) = two_mut(g, r.time.w, r.time.b);
            let dt = nn::linear_backward(time_act, ps.get(r.time.w), &dss, dw, db);
            for (a, b) in dtime.iter_mut().zip(dt) {
                *a += b;
            }
        }
        let da1 = {
            let (dw, db) = two_mut(g, r.conv1.w, r.conv1.b);
            nn::conv3x3_backward(&tape.a1, ps.get(r.conv1.w), &dh1, dw, db, true).expect("dx")
        };
        let mut dx = nn::silu_backward(&tape.x, &da1);
        match &r.skip {
            Some(s) => {
                let (dw, db) = two_mut(g, s.w, s.b);
                let dskip =
                    nn::conv1x1_backward(&tape.x, ps.get(s.w), dout, dw, db, true).expect("dx");
                dx.add_assign(&dskip);
            }
            None => dx.add_assign(dout),
        }
        dx
    }

    fn attn_backward(
        &self,
        a: &AttnIdx,
        tape: &AttnTape<F>,
        dout: &Act<F>,
        g: &mut ParamSet<F>,
    ) -> Act<F> {
        let ps = &self.tensors;
        let c = tape.x.c;
        let n = tape.x.pixels();
        let inv = F::of(1.0 / (c as f64).sqrt());
        let dmixed = {
            let (dw, db) = two_mut(g, a.proj.w, a.proj.b);
            nn::conv1x1_backward(&tape.mixed, ps.get(a.proj.w), dout, dw, db, true).expect("dx")
        };
        let mut dqkv = Act::zeros(tape.x.h, tape.x.w, 3 * c);
        let mut dscore = vec![F::zero(); n];
        for i in 0..n {
            let dm = dmixed.px(i);
            let row = &tape.weights[i * n..(i + 1) * n];
            // dA_ij = <dm_i, v_j>; dv_j += A_ij dm_i
            for j in 0..n {
                let v = &tape.qkv.px(j)[2 * c..];
                dscore[j] = dm.iter().zip(v).map(|(&a, &b)| a * b).sum();
                let aij = row[j];
                let dv = &mut dqkv.data[j * 3 * c + 2 * c..(j + 1) * 3 * c];
                for (d, &m) in dv.iter_mut().zip(dm) {
                    *d += aij * m;
                }
            }
            let dot: F = row.iter().zip(&dscore).map(|(&a, &b)| a * b).sum();
            let q = tape.qkv.px(i)[..c].to_vec();
            for j in 0..n {
                let ds = row[j] * (dscore[j] - dot) * inv;
                if ds == F::zero() {
                    continue;
                }
                let k = tape.qkv.px(j)[c..2 * c].to_vec();
                for ch in 0..c {
                    dqkv.data[i * 3 * c + ch] += ds * k[ch];
                    dqkv.data[j * 3 * c + c + ch] += ds * q[ch];
                }
            }
        }
        let (dw, db) = two_mut(g, a.qkv.w, a.qkv.b);
        let mut dx =
            nn::conv1x1_backward(&tape.x, ps.get(a.qkv.w), &dqkv, dw, db, true).expect("dx");
        dx.add_assign(dout);
        dx
    }

}

fn two_mut<F: Real>(g: &mut ParamSet<F>, a: usize, b: usize) -> (&mut [F], &mut [F]) {
    debug_assert!(a < b);
    let (lo, hi) = g.tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

/// One training example for the denoiser.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub noisy: &'a LabelGrid,
    pub features: Option<&'a FeatureGrid>,
    pub t: usize,
    pub target: &'a LabelGrid,
}

impl<F: Real> DenoiserParams<F> {
    /// Loss and parameter gradients for one example under a loss given as
    /// `logits -> (loss, dloss/dlogits)`.
    pub fn example_gradient<L>(&self, ex: &Example<'_>, loss: L) -> Result<(f64, ParamSet<F>)>
    where
        L: Fn(&LogitsGrid) -> Result<(f64, Vec<f64>)>,
    {
        let (out, tape) = self.forward_tape(ex.noisy, ex.features, ex.t)?;
        let logits = LogitsGrid::new(
            out.h,
            out.w,
            out.c,
            out.data.iter().map(|v| v.f64()).collect(),
        )?;
        let (value, dlogits) = loss(&logits)?;
        let dout = Act {
            data: dlogits.into_iter().map(F::of).collect(),
            ..out
        };
        Ok((value, self.backward(&tape, &dout)))
    }

    /// Mean cross-entropy loss over the batch and its gradient. Examples are
    /// processed in parallel and reduced in batch order.
    pub fn batch_gradients(&self, batch: &[Example<'_>]) -> Result<(f64, ParamSet<F>)> {
        self.batch_gradients_with(batch, |ex, logits| ce_loss_with_grad(logits, ex.target))
    }

    pub fn batch_gradients_with<L>(&self, batch: &[Example<'_>], loss: L) -> Result<(f64, ParamSet<F>)>
    where
        L: Fn(&Example<'_>, &LogitsGrid) -> Result<(f64, Vec<f64>)> + Sync,
    {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let per: Vec<(f64, ParamSet<F>)> = batch
            .par_iter()
            .map(|ex| self.example_gradient(ex, |l| loss(ex, l)))
            .collect::<Result<_>>()?;
        let mut iter = per.into_iter();
        let (mut total, mut grads) = iter.next().expect("non-empty");
        for (l, g) in iter {
            total += l;
            grads.add_assign(&g);
        }
        let n = batch.len() as f64;
        grads.scale(F::of(1.0 / n));
        Ok((total / n, grads))
    }

    fn config_block(&self) -> checkpoint::ConfigBlock {
        let mut entries = self.config.to_block();
        entries.push((
            "unconditional_branch".into(),
            u8::from(self.unconditional_branch).to_string(),
        ));
        checkpoint::ConfigBlock { entries }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, &[])
    }

    /// Save with additional `key = value` entries in the config block (for
    /// example the diffusion settings the model was trained under). Loading
    /// ignores keys it does not know.
    pub fn save_with(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        let mut block = self.config_block();
        block.entries.extend_from_slice(extra);
        checkpoint::write_file(path, CHECKPOINT_MAGIC, &block, &self.tensors)
    }
}

impl DenoiserParams<f32> {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(checkpoint::read_file(path, CHECKPOINT_MAGIC)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(checkpoint::decode(CHECKPOINT_MAGIC, bytes)?)
    }

    fn from_container(c: Container) -> Result<Self> {
        let config = DenoiserConfig::from_block(&c.config)?;
        let mut params = Self::zeros(config)?;
        if !params.tensors.same_layout(&c.tensors) {
            return Err(Error::Format("tensor layout does not match config".into()));
        }
        params.tensors = c.tensors;
        params.unconditional_branch = c.config.get::<u8>("unconditional_branch")? == 1;
        Ok(params)
    }
}

pub fn save_params<F: Real>(params: &DenoiserParams<F>, path: &Path) -> Result<()> {
    params.save(path)
}

pub fn load_params(path: &Path) -> Result<DenoiserParams<f32>> {
    DenoiserParams::load(path)
}

/// Exponential moving average of the denoiser weights.
#[derive(Clone, Debug)]
pub struct EmaState<F> {
    pub shadow: DenoiserParams<F>,
    pub decay: f64,
    pub update_interval: usize,
    calls: usize,
}

impl<F: Real> EmaState<F> {
    pub fn new(params: &DenoiserParams<F>, decay: f64, update_interval: usize) -> Self {
        Self {
            shadow: params.clone(),
            decay,
            update_interval: update_interval.max(1),
            calls: 0,
        }
    }

    /// Count one training iteration; blend in `params` every
    /// `update_interval` calls. Returns whether the shadow changed.
    pub fn step(&mut self, params: &DenoiserParams<F>) -> Result<bool> {
        self.calls += 1;
        if self.calls % self.update_interval != 0 {
            return Ok(false);
        }
        self.apply(params)?;
        Ok(true)
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn apply(&mut self, params: &DenoiserParams<F>) -> Result<()> {
        if !self.shadow.tensors.same_layout(&params.tensors) {
            return Err(Error::Shape("EMA shadow and params differ in layout".into()));
        }
        let d = F::of(self.decay);
        let one_minus = F::of(1.0 - self.decay);
        for (s, &p) in self.shadow.tensors.values_mut().zip(params.tensors.values()) {
            *s = d * *s + one_minus * p;
        }
        self.shadow.unconditional_branch = params.unconditional_branch;
        Ok(())
    }
}

pub fn ema_update<F: Real>(ema: &mut EmaState<F>, params: &DenoiserParams<F>) -> Result<bool> {
    ema.step(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn tiny(attention: bool) -> DenoiserConfig {
        DenoiserConfig {
            num_classes: 3,
            feature_channels: 2,
            base_channels: 8,
            depth: 1,
            embed_dim: 4,
            attention: vec![attention, attention],
        }
    }

    fn random_inputs(h: usize, w: usize, k: usize, c: usize, seed: u64) -> (LabelGrid, FeatureGrid, LabelGrid) {
        let mut r = rng(seed);
        let noisy = LabelGrid::new(h, w, k, (0..h * w).map(|_| r.random_range(0..k as u16)).collect()).unwrap();
        let target = LabelGrid::new(h, w, k, (0..h * w).map(|_| r.random_range(0..k as u16)).collect()).unwrap();
        let feats = FeatureGrid::new(h, w, c, (0..h * w * c).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
        (noisy, feats, target)
    }

    #[test]
    fn timestep_embedding_examples() {
        let e = timestep_embedding(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(timestep_embedding(7.0, 16).unwrap(), timestep_embedding(7.0, 16).unwrap());
        assert!(timestep_embedding(1.0, 7).is_err());
        let embs: Vec<Vec<f64>> = (0..=1000).map(|t| timestep_embedding(t as f64, 32).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = DenoiserConfig::desk(4, 6);
        let p = DenoiserParams::<f32>::zeros(cfg).unwrap();
        let (noisy, feats, _) = random_inputs(8, 8, 4, 6, 1);
        let l = p.forward(&noisy, Some(&feats), 5).unwrap();
        assert!(l.values().iter().all(|&v| v == 0.0));
        let probs = crate::discrete::softmax(l.pixel(0));
        assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn output_shape_and_determinism() {
        for cfg in [DenoiserConfig::desk(4, 6), DenoiserConfig { attention: vec![true, false, true], ..DenoiserConfig::desk(4, 6) }] {
            let p = DenoiserParams::<f32>::init(cfg, &mut rng(2)).unwrap();
            let (noisy, feats, _) = random_inputs(16, 16, 4, 6, 3);
            let a = p.forward(&noisy, Some(&feats), 3).unwrap();
            let b = p.forward(&noisy, Some(&feats), 3).unwrap();
            assert_eq!((a.height(), a.width(), a.channels()), (16, 16, 4));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_spatial_mismatch() {
        let p = DenoiserParams::<f32>::init(DenoiserConfig::desk(4, 6), &mut rng(2)).unwrap();
        let (noisy, _, _) = random_inputs(8, 8, 4, 6, 3);
        let feats = FeatureGrid::zeros(4, 8, 6);
        assert!(p.forward(&noisy, Some(&feats), 1).is_err());
        let odd = LabelGrid::filled(6, 8, 4, 0).unwrap();
        assert!(p.forward(&odd, None, 1).is_err());
    }

    #[test]
    fn timestep_changes_output() {
        let p = DenoiserParams::<f32>::init(DenoiserConfig::desk(4, 6), &mut rng(5)).unwrap();
        let (noisy, feats, _) = random_inputs(8, 8, 4, 6, 6);
        let a = p.forward(&noisy, Some(&feats), 1).unwrap();
        let b = p.forward(&noisy, Some(&feats), 20).unwrap();
        assert_ne!(a, b);
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 { 0.0 } else { diff / scale }
    }

    fn gradient_check(cfg: DenoiserConfig) {
        let mut p = DenoiserParams::<f64>::init(cfg, &mut rng(7)).unwrap();
        // Non-zero biases so every bias gradient path is exercised.
        let mut r = rng(8);
        for t in &mut p.tensors.tensors {
            if t.name.ends_with(".bias") {
                nn::normal_fill(&mut t.data, 0.1, &mut r);
            }
        }
        let (noisy, feats, target) = random_inputs(4, 4, 3, 2, 9);
        let ex = Example { noisy: &noisy, features: Some(&feats), t: 3, target: &target };
        let (_, grads) = p.batch_gradients(&[ex]).unwrap();
        let loss = |p: &DenoiserParams<f64>| {
            let l = p.forward(&noisy, Some(&feats), 3).unwrap();
            crate::discrete::ce_loss(&l, &target).unwrap()
        };
        let h = 1e-5;
        for (ti, tensor) in p.tensors.tensors.iter().enumerate() {
            let mut numeric = Vec::with_capacity(tensor.data.len());
            for i in 0..tensor.data.len() {
                let mut a = p.clone();
                a.tensors.tensors[ti].data[i] += h;
                let mut b = p.clone();
                b.tensors.tensors[ti].data[i] -= h;
                numeric.push((loss(&a) - loss(&b)) / (2.0 * h));
            }
            let analytic = &grads.tensors[ti].data;
            let err = relative_error(analytic, &numeric);
            assert!(err <= 1e-4, "{}: relative error {err}", tensor.name);
            assert!(analytic.iter().any(|v| *v != 0.0) || tensor.name == "embed", "{} has zero gradient", tensor.name);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(tiny(false));
    }

    #[test]
    fn gradients_match_finite_differences_with_attention() {
        gradient_check(tiny(true));
    }

    #[test]
    fn zero_loss_point_is_stationary() {
        let cfg = tiny(false);
        let mut p = DenoiserParams::<f64>::zeros(cfg).unwrap();
        let head_b = p.layout.head.b;
        // Constant target class 1 with margin 20 on the head bias.
        p.tensors.get_mut(head_b).copy_from_slice(&[0.0, 20.0, 0.0]);
        let (noisy, feats, _) = random_inputs(4, 4, 3, 2, 10);
        let target = LabelGrid::filled(4, 4, 3, 1).unwrap();
        let ex = Example { noisy: &noisy, features: Some(&feats), t: 2, target: &target };
        let (loss, g) = p.batch_gradients(&[ex]).unwrap();
        assert!(loss < 1e-8);
        assert!(g.l2_norm() < 1e-6);
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let p = DenoiserParams::<f64>::init(tiny(false), &mut rng(11)).unwrap();
        let data: Vec<_> = (0..3).map(|i| random_inputs(4, 4, 3, 2, 20 + i)).collect();
        let batch: Vec<Example> = data
            .iter()
            .enumerate()
            .map(|(i, (n, f, t))| Example { noisy: n, features: Some(f), t: i + 1, target: t })
            .collect();
        let (loss, g) = p.batch_gradients(&batch).unwrap();
        let mut mean = p.tensors.zeros_like();
        let mut lsum = 0.0;
        for ex in &batch {
            let (l, gi) = p.batch_gradients(std::slice::from_ref(ex)).unwrap();
            mean.add_assign(&gi);
            lsum += l;
        }
        mean.scale(1.0 / 3.0);
        assert!((loss - lsum / 3.0).abs() < 1e-12);
        for (a, b) in g.values().zip(mean.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let mut p = DenoiserParams::<f32>::init(DenoiserConfig::desk(4, 6), &mut rng(12)).unwrap();
        p.unconditional_branch = true;
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"DDPSCKPT");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DenoiserParams::from_bytes(&bad), Err(Error::Version(_))));
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(DenoiserParams::from_bytes(cut), Err(Error::Truncated(_))));
    }

    #[test]
    fn ema_behaviour() {
        let p = DenoiserParams::<f64>::init(tiny(false), &mut rng(13)).unwrap();
        let mut ema = EmaState::new(&p, 0.99, 1);
        ema.step(&p).unwrap();
        for (a, b) in ema.shadow.tensors.values().zip(p.tensors.values()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }

        let q = DenoiserParams::<f64>::init(tiny(false), &mut rng(14)).unwrap();
        let mut zero = EmaState::new(&p, 0.0, 1);
        zero.step(&q).unwrap();
        assert_eq!(zero.shadow.tensors, q.tensors);

        // Constant target: the gap shrinks by `decay` per update.
        let mut ema = EmaState::new(&p, 0.9, 25);
        let gap0: Vec<f64> = p.tensors.values().zip(q.tensors.values()).map(|(a, b)| a - b).collect();
        let mut updates = 0;
        for _ in 0..250 {
            if ema.step(&q).unwrap() {
                updates += 1;
            }
        }
        assert_eq!(updates, 10);
        for ((s, t), g0) in ema.shadow.tensors.values().zip(q.tensors.values()).zip(&gap0) {
            let expect = g0 * 0.9f64.powi(10);
            assert!((s - t - expect).abs() < 1e-12);
        }
        assert!(ema.shadow.tensors.all_finite());
        let other = DenoiserParams::<f64>::init(DenoiserConfig::desk(4, 6), &mut rng(1)).unwrap();
        assert!(ema.apply(&other).is_err());
    }
}
