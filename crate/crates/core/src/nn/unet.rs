//! Mini classifier-free U-Net: ResNet blocks with time/class conditioning,
//! self-attention at the lowest resolution, one skip connection per level.

use serde::{Deserialize, Serialize};

use super::layers::{ConvSpec, EmbeddingSpec, GroupNormSpec, LinearSpec};
use super::{sinusoidal_time_embed, ParamStore};
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub attention: bool,
    pub num_classes: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_size: 16,
            in_channels: 1,
            base_channels: 32,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            attention: true,
            num_classes: 4,
            time_dim: 128,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    /// Class index that selects the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.res_blocks == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "unet needs at least one level, block, and channel".into(),
            ));
        }
        let factor = 1usize << (levels - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "image size {} not divisible by {factor} ({levels} levels)",
                self.image_size
            )));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim {} must be even and positive",
                self.time_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNormSpec,
    pub conv1: ConvSpec,
    pub emb: LinearSpec,
    pub norm2: GroupNormSpec,
    pub conv2: ConvSpec,
    pub skip: Option<ConvSpec>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Self {
        ResBlock {
            norm1: GroupNormSpec::new(format!("{name}.norm1"), cin, groups),
            conv1: ConvSpec::new(format!("{name}.conv1"), cin, cout, 3),
            emb: LinearSpec::new(format!("{name}.emb"), tdim, cout),
            norm2: GroupNormSpec::new(format!("{name}.norm2"), cout, groups),
            conv2: ConvSpec::new(format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| ConvSpec::new(format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm1.forward(cx.g, cx.store, x)?;
        let h = cx.g.silu(h);
        let h = self.conv1.forward(cx.g, cx.store, cx.adapters, h)?;
        let e = self.emb.forward(cx.g, cx.store, emb)?;
        let n = cx.g.shape(e)[0];
        let e = cx.g.reshape(e, &[n, self.conv1.out_channels, 1, 1])?;
        let h = cx.g.broadcast_add(h, e)?;
        let h = self.norm2.forward(cx.g, cx.store, h)?;
        let h = cx.g.silu(h);
        let h = self.conv2.forward(cx.g, cx.store, cx.adapters, h)?;
        let shortcut = match &self.skip {
            Some(s) => s.forward(cx.g, cx.store, cx.adapters, x)?,
            None => x,
        };
        cx.g.add(shortcut, h)
    }
}

/// Single-head self-attention with 1x1-conv projections.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub norm: GroupNormSpec,
    pub q: ConvSpec,
    pub k: ConvSpec,
    pub v: ConvSpec,
    pub proj: ConvSpec,
}

impl AttnBlock {
    fn new(name: &str, ch: usize, groups: usize) -> Self {
        AttnBlock {
            norm: GroupNormSpec::new(format!("{name}.norm"), ch, groups),
            q: ConvSpec::new(format!("{name}.q"), ch, ch, 1),
            k: ConvSpec::new(format!("{name}.k"), ch, ch, 1),
            v: ConvSpec::new(format!("{name}.v"), ch, ch, 1),
            proj: ConvSpec::new(format!("{name}.proj"), ch, ch, 1),
        }
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm.forward(cx.g, cx.store, x)?;
        let q = self.q.forward(cx.g, cx.store, cx.adapters, h)?;
        let k = self.k.forward(cx.g, cx.store, cx.adapters, h)?;
        let v = self.v.forward(cx.g, cx.store, cx.adapters, h)?;
        let q = cx.g.reshape(q, &[n, c, hw])?;
        let k = cx.g.reshape(k, &[n, c, hw])?;
        let v = cx.g.reshape(v, &[n, c, hw])?;
        let qt = cx.g.transpose(q)?;
        let scores = cx.g.matmul(qt, k)?;
        let scores = cx.g.scale(scores, T::lit(1.0 / (c as f64).sqrt()));
        let attn = cx.g.softmax(scores);
        let attn_t = cx.g.transpose(attn)?;
        let out = cx.g.matmul(v, attn_t)?;
        let out = cx.g.reshape(out, &s)?;
        let out = self.proj.forward(cx.g, cx.store, cx.adapters, out)?;
        cx.g.add(x, out)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Res(ResBlock),
    Attn(AttnBlock),
}

impl Block {
    fn convs(&self) -> Vec<&ConvSpec> {
        match self {
            Block::Res(r) => {
                let mut v = vec![&r.conv1, &r.conv2];
                v.extend(r.skip.as_ref());
                v
            }
            Block::Attn(a) => vec![&a.q, &a.k, &a.v, &a.proj],
        }
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, emb: Var) -> Result<Var> {
        match self {
            Block::Res(r) => r.forward(cx, x, emb),
            Block::Attn(a) => a.forward(cx, x),
        }
    }
}

struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    adapters: &'a AdapterSet,
}

/// The network description; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    time1: LinearSpec,
    time2: LinearSpec,
    class_emb: EmbeddingSpec,
    stem: ConvSpec,
    down: Vec<Vec<Block>>,
    mid: Vec<Block>,
    up: Vec<Vec<Block>>,
    upsample: Vec<ConvSpec>,
    out_norm: GroupNormSpec,
    out_conv: ConvSpec,
    adapters: AdapterSet,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let gs = cfg.norm_groups;
        let td = cfg.time_dim;
        let levels = cfg.channel_mults.len();
        let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let lowest = levels - 1;

        let mut down = Vec::new();
        let mut cur = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..cfg.res_blocks {
                blocks.push(Block::Res(ResBlock::new(&format!("down.{i}.{j}.res"), cur, c, td, gs)));
                cur = c;
                if cfg.attention && i == lowest {
                    blocks.push(Block::Attn(AttnBlock::new(&format!("down.{i}.{j}.attn"), c, gs)));
                }
            }
            down.push(blocks);
        }
        let mut mid = vec![Block::Res(ResBlock::new("mid.0.res", cur, cur, td, gs))];
        if cfg.attention {
            mid.push(Block::Attn(AttnBlock::new("mid.attn", cur, gs)));
        }
        mid.push(Block::Res(ResBlock::new("mid.1.res", cur, cur, td, gs)));

        let mut up = vec![Vec::new(); levels];
        let mut upsample = Vec::new();
        for i in (0..levels).rev() {
            cur += ch[i];
            let mut blocks = Vec::new();
            for j in 0..cfg.res_blocks {
                blocks.push(Block::Res(ResBlock::new(
                    &format!("up.{i}.{j}.res"),
                    cur,
                    ch[i],
                    td,
                    gs,
                )));
                cur = ch[i];
                if cfg.attention && i == lowest {
                    blocks.push(Block::Attn(AttnBlock::new(&format!("up.{i}.{j}.attn"), ch[i], gs)));
                }
            }
            up[i] = blocks;
            if i > 0 {
                upsample.push(ConvSpec::new(format!("up.{i}.upsample"), ch[i], ch[i - 1], 3));
                cur = ch[i - 1];
            }
        }

        let net = UNet {
            time1: LinearSpec::new("time.lin1", td, td),
            time2: LinearSpec::new("time.lin2", td, td),
            class_emb: EmbeddingSpec {
                name: "class_emb".into(),
                rows: cfg.num_classes + 1,
                dim: td,
            },
            stem: ConvSpec::new("stem", cfg.in_channels, ch[0], 3),
            down,
            mid,
            up,
            upsample,
            out_norm: GroupNormSpec::new("out.norm", ch[0], gs),
            out_conv: ConvSpec::new("out.conv", ch[0], cfg.in_channels, 3),
            adapters: AdapterSet::default(),
            cfg,
        };
        for n in net.norms() {
            if n.channels % n.groups != 0 {
                return Err(Error::Config(format!(
                    "{} groups do not divide {} channels of `{}`",
                    n.groups, n.channels, n.name
                )));
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut AdapterSet {
        &mut self.adapters
    }

    fn all_blocks(&self) -> impl Iterator<Item = &Block> {
        self.down
            .iter()
            .flatten()
            .chain(self.mid.iter())
            .chain(self.up.iter().flatten())
    }

    /// Every convolution in forward order of construction.
    pub fn conv_layers(&self) -> Vec<&ConvSpec> {
        let mut v = vec![&self.stem];
        for b in self.down.iter().flatten().chain(self.mid.iter()) {
            v.extend(b.convs());
        }
        for (i, blocks) in self.up.iter().enumerate().rev() {
            for b in blocks {
                v.extend(b.convs());
            }
            if i > 0 {
                v.push(&self.upsample[self.up.len() - 1 - i]);
            }
        }
        v.push(&self.out_conv);
        v
    }

    fn norms(&self) -> Vec<&GroupNormSpec> {
        let mut v = Vec::new();
        for b in self.all_blocks() {
            match b {
                Block::Res(r) => {
                    v.push(&r.norm1);
                    v.push(&r.norm2);
                }
                Block::Attn(a) => v.push(&a.norm),
            }
        }
        v.push(&self.out_norm);
        v
    }

    fn linears(&self) -> Vec<&LinearSpec> {
        let mut v = vec![&self.time1, &self.time2];
        for b in self.all_blocks() {
            if let Block::Res(r) = b {
                v.push(&r.emb);
            }
        }
        v
    }

    /// Parameter count of the base network (no adapters).
    pub fn base_param_count(&self) -> usize {
        self.conv_layers().iter().map(|c| c.param_count()).sum::<usize>()
            + self.norms().iter().map(|n| n.param_count()).sum::<usize>()
            + self.linears().iter().map(|l| l.param_count()).sum::<usize>()
            + self.class_emb.param_count()
    }

    /// Freshly initialized base parameters, all trainable.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = rng::substream(seed, domain::INIT, 0);
        let mut store = ParamStore::new();
        self.time1.init(&mut store, &mut rng)?;
        self.time2.init(&mut store, &mut rng)?;
        self.class_emb.init(&mut store, &mut rng)?;
        for c in self.conv_layers() {
            c.init(&mut store, &mut rng)?;
        }
        for n in self.norms() {
            n.init(&mut store)?;
        }
        for l in self.linears().into_iter().skip(2) {
            l.init(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    /// Predicts the noise in `x_t` (`[N, C, H, W]`) at timesteps `t` for
    /// `labels`; label `null_class()` is the unconditional branch.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        t: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let want = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(
                "unet",
                format!("input {s:?}, expected [N, {}, {}, {}]", want[0], want[1], want[2]),
            ));
        }
        let n = s[0];
        if t.len() != n || labels.len() != n {
            return Err(Error::shape(
                "unet",
                format!("{n} inputs with {} timesteps and {} labels", t.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > self.cfg.null_class()) {
            return Err(Error::invalid(format!(
                "class id {bad} exceeds the null class {}",
                self.cfg.null_class()
            )));
        }
        let mut cx = Ctx {
            g,
            store,
            adapters: &self.adapters,
        };

        let temb = sinusoidal_time_embed::<T>(t, self.cfg.time_dim)?;
        let temb = cx.g.constant(temb);
        let temb = self.time1.forward(cx.g, store, temb)?;
        let temb = cx.g.silu(temb);
        let temb = self.time2.forward(cx.g, store, temb)?;
        let cemb = self.class_emb.forward(cx.g, store, labels)?;
        let emb = cx.g.add(temb, cemb)?;
        let emb = cx.g.silu(emb);

        let mut h = self.stem.forward(cx.g, store, &self.adapters, x)?;
        let mut skips = Vec::new();
        let levels = self.down.len();
        for (i, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = b.forward(&mut cx, h, emb)?;
            }
            skips.push(h);
            if i + 1 < levels {
                h = cx.g.avg_pool2x(h)?;
            }
        }
        for b in &self.mid {
            h = b.forward(&mut cx, h, emb)?;
        }
        for i in (0..levels).rev() {
            h = cx.g.concat(&[h, skips[i]])?;
            for b in &self.up[i] {
                h = b.forward(&mut cx, h, emb)?;
            }
            if i > 0 {
                h = cx.g.upsample2x(h)?;
                h = self.upsample[levels - 1 - i].forward(cx.g, store, &self.adapters, h)?;
            }
        }
        let h = self.out_norm.forward(cx.g, store, h)?;
        let h = cx.g.silu(h);
        self.out_conv.forward(cx.g, store, &self.adapters, h)
    }
}
