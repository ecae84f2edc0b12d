//! The four networks: time-aware encoder (TAE), latent UNet (shared by
//! teacher, LoRA critic and student), pixel decoder, and LoRA adapters.
//!
//! All parameters live in a flat [`ParamStore`] with dotted names:
//!
//! - `ae.enc.*` encoder convs, FiLM projections and the time MLP
//! - `ae.latent_mu` / `ae.latent_sigma` frozen latent normalization stats
//! - `ae.dec.*` decoder
//! - `teacher.unet.*` the UNet (the student and the critic reuse this base
//!   through low-rank adapters; a full-finetune copy uses `stu.unet.*`)
//! - `stu.adapt.<target>.a|.b` and `phi.adapt.<target>.a|.b` LoRA factors
//! - `probe.*` the frozen random feature extractor for the perceptual loss
//!
//! Forward passes are built on the [`crate::autodiff`] graph; the public
//! tensor-in/tensor-out ops here run the same graphs with frozen leaves.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture descriptor. Shapes of every tensor in a store derive
/// deterministically from this.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Arch {
    pub img_channels: usize,
    pub img_size: usize,
    pub latent_channels: usize,
    pub enc_channels: [usize; 3],
    pub unet_channels: [usize; 3],
    pub time_dim: usize,
    pub time_features: usize,
    pub probe_channels: usize,
    pub lora_rank: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            img_channels: 3,
            img_size: 48,
            latent_channels: 4,
            enc_channels: [16, 32, 64],
            unet_channels: [32, 64, 128],
            time_dim: 32,
            time_features: 64,
            probe_channels: 8,
            lora_rank: 4,
        }
    }
}

impl Arch {
    /// A miniature configuration for fast structural tests.
    pub fn tiny() -> Self {
        Arch {
            img_channels: 3,
            img_size: 16,
            latent_channels: 4,
            enc_channels: [6, 8, 12],
            unet_channels: [8, 12, 16],
            time_dim: 8,
            time_features: 16,
            probe_channels: 4,
            lora_rank: 2,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.img_size / 4
    }

    pub fn lora_scale(&self) -> f64 {
        1.0 / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size % 4 != 0 || self.img_size < 16 {
            return Err(Error::InvalidParam(format!(
                "img_size must be a multiple of 4 and >= 16, got {}",
                self.img_size
            )));
        }
        if self.latent_size() % 4 != 0 {
            return Err(Error::InvalidParam(format!(
                "latent size {} must be a multiple of 4 for the UNet down/up path",
                self.latent_size()
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim < 2 {
            return Err(Error::InvalidParam(format!(
                "time_dim must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        if self.lora_rank == 0 {
            return Err(Error::InvalidParam("lora_rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Raw sinusoidal position features for an integer timestep:
/// pairs `[sin(t * f_i), cos(t * f_i)]` with `f_i = 10000^(-2i/dim)`.
pub fn sinusoid_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10_000f64.powf(-(2.0 * i as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    out
}

pub type GradStore = BTreeMap<String, Vec<f64>>;

/// Lazily inserts store tensors into a graph, once per name, tracking which
/// leaves require gradients.
pub struct Bind<'s> {
    pub store: &'s ParamStore,
    trainable: Option<&'s HashSet<String>>,
    vars: HashMap<String, Var>,
}

impl<'s> Bind<'s> {
    /// All parameters frozen (pure forward).
    pub fn frozen(store: &'s ParamStore) -> Self {
        Bind {
            store,
            trainable: None,
            vars: HashMap::new(),
        }
    }

    /// Parameters in `trainable` require gradients; everything else frozen.
    pub fn trainable(store: &'s ParamStore, trainable: &'s HashSet<String>) -> Self {
        Bind {
            store,
            trainable: Some(trainable),
            vars: HashMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let rg = self.trainable.map(|set| set.contains(name)).unwrap_or(false);
        let v = g.leaf(t, rg);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Collect gradients of all bound trainable leaves after a backward pass.
    pub fn grads(&self, g: &Graph) -> GradStore {
        let mut out = GradStore::new();
        if let Some(set) = self.trainable {
            for (name, &v) in &self.vars {
                if set.contains(name) {
                    if let Some(grad) = g.grad(v) {
                        out.insert(name.clone(), grad.to_vec());
                    }
                }
            }
        }
        out
    }
}

/// Reference to a LoRA adapter family applied on top of a base UNet.
#[derive(Debug, Clone, Copy)]
pub struct AdapterRef<'a> {
    /// Name prefix of the factors, e.g. `"stu.adapt."`.
    pub prefix: &'a str,
    /// Multiplier on the low-rank delta (1/rank by convention).
    pub scale: f64,
}

impl<'a> AdapterRef<'a> {
    pub fn new(prefix: &'a str, arch: &Arch) -> Self {
        AdapterRef {
            prefix,
            scale: arch.lora_scale(),
        }
    }
}

/// Weight with an optional low-rank delta: W + scale * reshape(B @ A).
fn eff_weight(
    g: &mut Graph,
    bind: &mut Bind,
    name: &str,
    adapters: Option<AdapterRef>,
) -> Result<Var> {
    let w = bind.var(g, name)?;
    let Some(ad) = adapters else {
        return Ok(w);
    };
    let a_name = format!("{}{}.a", ad.prefix, name);
    let b_name = format!("{}{}.b", ad.prefix, name);
    if !bind.store.contains(&a_name) {
        return Ok(w);
    }
    let wshape = g.shape(w).to_vec();
    let (m, n) = weight_mn(&wshape);
    let a = bind.var(g, &a_name)?;
    let b = bind.var(g, &b_name)?;
    let ashape = g.shape(a).to_vec();
    let bshape = g.shape(b).to_vec();
    if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != n || bshape[0] != m || ashape[0] != bshape[1] {
        return Err(Error::Adapter(format!(
            "adapter for {name}: A {ashape:?} / B {bshape:?} incompatible with weight {wshape:?}"
        )));
    }
    let delta = g.matmul(b, a);
    let delta = g.reshape(delta, &wshape);
    let delta = g.scale(delta, ad.scale);
    Ok(g.add(w, delta))
}

/// (m, n) view of a weight: conv [Co,Ci,K,K] flattens to [Co, Ci*K*K].
fn weight_mn(shape: &[usize]) -> (usize, usize) {
    let m = shape[0];
    (m, shape[1..].iter().product())
}

fn conv_layer(
    g: &mut Graph,
    bind: &mut Bind,
    name: &str,
    adapters: Option<AdapterRef>,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = eff_weight(g, bind, &format!("{name}.w"), adapters)?;
    let b = bind.var(g, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), stride, 1))
}

fn linear(
    g: &mut Graph,
    bind: &mut Bind,
    name: &str,
    adapters: Option<AdapterRef>,
    x: Var,
) -> Result<Var> {
    let w = eff_weight(g, bind, &format!("{name}.w"), adapters)?;
    let b = bind.var(g, &format!("{name}.b"))?;
    let y = g.matvec(w, x);
    Ok(g.add(y, b))
}

/// Two-layer time MLP over the raw sinusoid: l2(silu(l1(raw))).
fn time_features(
    g: &mut Graph,
    bind: &mut Bind,
    arch: &Arch,
    prefix: &str,
    adapters: Option<AdapterRef>,
    t: usize,
) -> Result<Var> {
    let raw = sinusoid_embedding(t, arch.time_dim);
    let raw = g.leaf_f64(&[arch.time_dim], raw, false);
    let h = linear(g, bind, &format!("{prefix}.l1"), adapters, raw)?;
    let h = g.silu(h);
    linear(g, bind, &format!("{prefix}.l2"), adapters, h)
}

fn film_site(
    g: &mut Graph,
    bind: &mut Bind,
    name: &str,
    te: Option<Var>,
    h: Var,
) -> Result<Var> {
    let Some(te) = te else { return Ok(h) };
    let s = linear(g, bind, &format!("{name}.scale"), None, te)?;
    let sh = linear(g, bind, &format!("{name}.shift"), None, te)?;
    Ok(g.film(h, s, sh))
}

/// Channel-affine from stored stats: y = x * mul + add.
fn stats_affine(
    g: &mut Graph,
    bind: &mut Bind,
    h: Var,
    mul: impl Fn(f64) -> f64,
    add: impl Fn(f64, f64) -> f64,
) -> Result<Var> {
    let mu = bind.store.get("ae.latent_mu")?;
    let sigma = bind.store.get("ae.latent_sigma")?;
    let c = mu.numel();
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for i in 0..c {
        let (m, s) = (mu.data()[i] as f64, sigma.data()[i] as f64);
        scale.push(mul(s) - 1.0); // film applies (1 + scale)
        shift.push(add(m, s));
    }
    let scale = g.leaf_f64(&[c], scale, false);
    let shift = g.leaf_f64(&[c], shift, false);
    Ok(g.film(h, scale, shift))
}

/// Time-aware encoder: image -> normalized latent. `t_s = None` runs with
/// the time pathway inactive (autoencoder pretraining), which matches the
/// zero-initialized FiLM projections bit for bit.
pub fn tae_forward_g(
    g: &mut Graph,
    bind: &mut Bind,
    arch: &Arch,
    x: Var,
    t_s: Option<usize>,
) -> Result<Var> {
    let te = match t_s {
        Some(t) => Some(time_features(g, bind, arch, "ae.enc.time", None, t)?),
        None => None,
    };
    let mut h = conv_layer(g, bind, "ae.enc.stem", None, x, 1)?;
    h = g.silu(h);
    h = film_site(g, bind, "ae.enc.film0", te, h)?;
    h = conv_layer(g, bind, "ae.enc.c0", None, h, 1)?;
    h = g.silu(h);
    h = film_site(g, bind, "ae.enc.film1", te, h)?;
    h = conv_layer(g, bind, "ae.enc.down1", None, h, 2)?;
    h = g.silu(h);
    h = film_site(g, bind, "ae.enc.film2", te, h)?;
    h = conv_layer(g, bind, "ae.enc.c1", None, h, 1)?;
    h = g.silu(h);
    h = film_site(g, bind, "ae.enc.film3", te, h)?;
    h = conv_layer(g, bind, "ae.enc.down2", None, h, 2)?;
    h = g.silu(h);
    h = film_site(g, bind, "ae.enc.film4", te, h)?;
    h = conv_layer(g, bind, "ae.enc.c2", None, h, 1)?;
    h = g.silu(h);
    h = film_site(g, bind, "ae.enc.film5", te, h)?;
    let z = conv_layer(g, bind, "ae.enc.head", None, h, 1)?;
    // normalize: (z - mu) / sigma
    stats_affine(g, bind, z, |s| 1.0 / s, |m, s| -m / s)
}

/// Decoder: normalized latent -> image (unclamped).
pub fn decoder_forward_g(g: &mut Graph, bind: &mut Bind, _arch: &Arch, z: Var) -> Result<Var> {
    // denormalize: z * sigma + mu
    let mut h = stats_affine(g, bind, z, |s| s, |m, _| m)?;
    h = conv_layer(g, bind, "ae.dec.c0", None, h, 1)?;
    h = g.silu(h);
    h = conv_layer(g, bind, "ae.dec.c1", None, h, 1)?;
    h = g.silu(h);
    h = g.upsample2x(h);
    h = conv_layer(g, bind, "ae.dec.u1", None, h, 1)?;
    h = g.silu(h);
    h = conv_layer(g, bind, "ae.dec.c2", None, h, 1)?;
    h = g.silu(h);
    h = g.upsample2x(h);
    h = conv_layer(g, bind, "ae.dec.u2", None, h, 1)?;
    h = g.silu(h);
    h = conv_layer(g, bind, "ae.dec.c3", None, h, 1)?;
    h = g.silu(h);
    conv_layer(g, bind, "ae.dec.head", None, h, 1)
}

fn resblock(
    g: &mut Graph,
    bind: &mut Bind,
    prefix: &str,
    adapters: Option<AdapterRef>,
    h: Var,
    te: Var,
) -> Result<Var> {
    let a = conv_layer(g, bind, &format!("{prefix}.c1"), adapters, h, 1)?;
    let tb = linear(g, bind, &format!("{prefix}.t"), adapters, te)?;
    let a = g.add_bias(a, tb);
    let a = g.silu(a);
    let a = conv_layer(g, bind, &format!("{prefix}.c2"), adapters, a, 1)?;
    Ok(g.add(h, a))
}

/// Latent UNet with skip connections and additive time conditioning.
/// `base` selects the weight family (`"teacher."` or `"stu."`); `adapters`
/// optionally applies LoRA deltas to every `.w` under that family.
pub fn unet_forward_g(
    g: &mut Graph,
    bind: &mut Bind,
    arch: &Arch,
    base: &str,
    adapters: Option<AdapterRef>,
    z: Var,
    t: usize,
) -> Result<Var> {
    let p = |s: &str| format!("{base}unet.{s}");
    let te = time_features(g, bind, arch, &p("time"), adapters, t)?;
    let cond = bind.var(g, &p("cond"))?;
    let te = g.add(te, cond);

    let h = conv_layer(g, bind, &p("in"), adapters, z, 1)?;
    let s0 = resblock(g, bind, &p("rb0"), adapters, h, te)?;
    let h = conv_layer(g, bind, &p("down1"), adapters, s0, 2)?;
    let h = g.silu(h);
    let s1 = resblock(g, bind, &p("rb1"), adapters, h, te)?;
    let h = conv_layer(g, bind, &p("down2"), adapters, s1, 2)?;
    let h = g.silu(h);
    let h = resblock(g, bind, &p("rb2"), adapters, h, te)?;
    let h = resblock(g, bind, &p("mid"), adapters, h, te)?;

    let h = g.upsample2x(h);
    let h = conv_layer(g, bind, &p("up1.pre"), adapters, h, 1)?;
    let h = g.silu(h);
    let h = g.concat_c(h, s1);
    let h = conv_layer(g, bind, &p("up1.post"), adapters, h, 1)?;
    let h = g.silu(h);
    let h = resblock(g, bind, &p("rb3"), adapters, h, te)?;

    let h = g.upsample2x(h);
    let h = conv_layer(g, bind, &p("up2.pre"), adapters, h, 1)?;
    let h = g.silu(h);
    let h = g.concat_c(h, s0);
    let h = conv_layer(g, bind, &p("up2.post"), adapters, h, 1)?;
    let h = g.silu(h);
    let h = resblock(g, bind, &p("rb4"), adapters, h, te)?;

    conv_layer(g, bind, &p("head"), adapters, h, 1)
}

/// Frozen random 3-layer feature extractor for the perceptual surrogate.
/// Returns features after each activation.
pub fn probe_features_g(g: &mut Graph, bind: &mut Bind, x: Var) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(3);
    let h = conv_layer(g, bind, "probe.c0", None, x, 1)?;
    let h = g.silu(h);
    feats.push(h);
    let h = conv_layer(g, bind, "probe.c1", None, h, 2)?;
    let h = g.silu(h);
    feats.push(h);
    let h = conv_layer(g, bind, "probe.c2", None, h, 2)?;
    let h = g.silu(h);
    feats.push(h);
    Ok(feats)
}

// ---- initialization --------------------------------------------------------

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> Result<()> {
        let fan_in = ci * k * k;
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let w = Tensor::randn(&[co, ci, k, k], std, &self.rng.derive_str(&format!("{name}.w")));
        self.store.insert(&format!("{name}.w"), w)?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
    }

    fn linear(&mut self, name: &str, m: usize, n: usize, std_gain: f64) -> Result<()> {
        let std = (std_gain / n as f64).sqrt() as f32;
        let w = Tensor::randn(&[m, n], std, &self.rng.derive_str(&format!("{name}.w")));
        self.store.insert(&format!("{name}.w"), w)?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[m]))
    }

    fn linear_zero(&mut self, name: &str, m: usize, n: usize) -> Result<()> {
        self.store.insert(&format!("{name}.w"), Tensor::zeros(&[m, n]))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[m]))
    }
}

/// Build every parameter tensor for the architecture, deterministically in
/// the seed. FiLM projections start at zero so the encoder is
/// time-independent at step 0; LoRA adapters are created separately.
pub fn init_params(arch: &Arch, seed: u64) -> Result<ParamStore> {
    arch.validate()?;
    let mut store = ParamStore::new(arch.clone());
    let mut init = Init {
        store: &mut store,
        rng: Rng::new(seed),
    };
    let [e0, e1, e2] = arch.enc_channels;
    let cz = arch.latent_channels;
    let tf = arch.time_features;

    // encoder
    init.conv("ae.enc.stem", e0, arch.img_channels, 3)?;
    init.conv("ae.enc.c0", e0, e0, 3)?;
    init.conv("ae.enc.down1", e1, e0, 3)?;
    init.conv("ae.enc.c1", e1, e1, 3)?;
    init.conv("ae.enc.down2", e2, e1, 3)?;
    init.conv("ae.enc.c2", e2, e2, 3)?;
    init.conv("ae.enc.head", cz, e2, 3)?;
    init.linear("ae.enc.time.l1", tf, arch.time_dim, 2.0)?;
    init.linear("ae.enc.time.l2", tf, tf, 1.0)?;
    for (i, c) in [e0, e0, e1, e1, e2, e2].into_iter().enumerate() {
        init.linear_zero(&format!("ae.enc.film{i}.scale"), c, tf)?;
        init.linear_zero(&format!("ae.enc.film{i}.shift"), c, tf)?;
    }

    // decoder
    init.conv("ae.dec.c0", e2, cz, 3)?;
    init.conv("ae.dec.c1", e2, e2, 3)?;
    init.conv("ae.dec.u1", e1, e2, 3)?;
    init.conv("ae.dec.c2", e1, e1, 3)?;
    init.conv("ae.dec.u2", e0, e1, 3)?;
    init.conv("ae.dec.c3", e0, e0, 3)?;
    init.conv("ae.dec.head", arch.img_channels, e0, 3)?;

    // teacher UNet
    let [u0, u1, u2] = arch.unet_channels;
    init.conv("teacher.unet.in", u0, cz, 3)?;
    for (name, c) in [("rb0", u0), ("rb1", u1), ("rb2", u2), ("mid", u2), ("rb3", u1), ("rb4", u0)] {
        init.conv(&format!("teacher.unet.{name}.c1"), c, c, 3)?;
        init.linear(&format!("teacher.unet.{name}.t"), c, tf, 1.0)?;
        init.conv(&format!("teacher.unet.{name}.c2"), c, c, 3)?;
    }
    init.conv("teacher.unet.down1", u1, u0, 3)?;
    init.conv("teacher.unet.down2", u2, u1, 3)?;
    init.conv("teacher.unet.up1.pre", u1, u2, 3)?;
    init.conv("teacher.unet.up1.post", u1, 2 * u1, 3)?;
    init.conv("teacher.unet.up2.pre", u0, u1, 3)?;
    init.conv("teacher.unet.up2.post", u0, 2 * u0, 3)?;
    init.conv("teacher.unet.head", cz, u0, 3)?;
    init.linear("teacher.unet.time.l1", tf, arch.time_dim, 2.0)?;
    init.linear("teacher.unet.time.l2", tf, tf, 1.0)?;
    init.store.insert("teacher.unet.cond", Tensor::zeros(&[tf]))?;

    // frozen perceptual probe
    let pc = arch.probe_channels;
    init.conv("probe.c0", pc, arch.img_channels, 3)?;
    init.conv("probe.c1", pc, pc, 3)?;
    init.conv("probe.c2", pc, pc, 3)?;

    // latent normalization stats (identity until calibrated)
    store.insert("ae.latent_mu", Tensor::zeros(&[cz]))?;
    store.insert("ae.latent_sigma", Tensor::full(&[cz], 1.0))?;

    Ok(store)
}

// ---- LoRA ------------------------------------------------------------------

/// Every UNet weight under `base` eligible for a low-rank adapter.
pub fn adapted_weight_names(store: &ParamStore, base: &str) -> Vec<String> {
    let prefix = format!("{base}unet.");
    store
        .names()
        .filter(|n| n.starts_with(&prefix) && n.ends_with(".w"))
        .map(|n| n.to_string())
        .collect()
}

/// Create rank-r factors for every UNet weight: A random (std 0.02), B zero,
/// stored as `{adapter_prefix}{target}.a` / `.b`. With B = 0 the adapted
/// forward equals the base forward bit for bit.
pub fn init_adapters(
    store: &mut ParamStore,
    base: &str,
    adapter_prefix: &str,
    seed: u64,
) -> Result<()> {
    let rank = store.meta().lora_rank;
    let rng = Rng::new(seed);
    for target in adapted_weight_names(store, base) {
        let (m, n) = weight_mn(store.get(&target)?.shape());
        if rank > m.min(n) {
            return Err(Error::Adapter(format!(
                "rank {rank} exceeds min dim of {target} ({m}x{n})"
            )));
        }
        let a = Tensor::randn(&[rank, n], 0.02, &rng.derive_str(&target));
        let b = Tensor::zeros(&[m, rank]);
        store.insert(&format!("{adapter_prefix}{target}.a"), a)?;
        store.insert(&format!("{adapter_prefix}{target}.b"), b)?;
    }
    Ok(())
}

/// Merge adapters into their targets: W' = W + scale * (B @ A). Returns a
/// new store with the factor entries removed; the input is untouched.
pub fn lora_merge(store: &ParamStore, adapter_prefix: &str, scale: f64) -> Result<ParamStore> {
    let mut out = store.clone();
    let a_names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(adapter_prefix) && n.ends_with(".a"))
        .map(|n| n.to_string())
        .collect();
    for a_name in a_names {
        let target = a_name[adapter_prefix.len()..a_name.len() - 2].to_string();
        let b_name = format!("{adapter_prefix}{target}.b");
        let w = store.get(&target)?; // unknown target -> NameNotFound
        let a = store.get(&a_name)?;
        let b = store.get(&b_name).map_err(|_| {
            Error::Adapter(format!("missing B factor for {target}"))
        })?;
        let (m, n) = weight_mn(w.shape());
        let r = a.shape()[0];
        if a.shape() != [r, n] || b.shape() != [m, r] {
            return Err(Error::Adapter(format!(
                "adapter for {target}: A {:?} / B {:?} incompatible with weight {:?}",
                a.shape(),
                b.shape(),
                w.shape()
            )));
        }
        if r > m.min(n) {
            return Err(Error::Adapter(format!(
                "rank {r} exceeds min dim of {target} ({m}x{n})"
            )));
        }
        let mut merged = w.clone();
        let (ad, bd) = (a.data(), b.data());
        let md = merged.data_mut();
        for i in 0..m {
            for l in 0..r {
                let bil = bd[i * r + l] as f64 * scale;
                if bil == 0.0 {
                    continue;
                }
                for j in 0..n {
                    md[i * n + j] = (md[i * n + j] as f64 + bil * ad[l * n + j] as f64) as f32;
                }
            }
        }
        out.set(&target, merged)?;
        out.remove(&a_name);
        out.remove(&b_name);
    }
    Ok(out)
}

// ---- public tensor-level forwards -------------------------------------------

pub const COND_TS_MAX: usize = 999;

fn check_ts(t_s: usize) -> Result<()> {
    if t_s > COND_TS_MAX {
        return Err(Error::TimestepOutOfRange {
            t: t_s as i64,
            max: COND_TS_MAX,
        });
    }
    Ok(())
}

/// Encode an image (C×H×W, H and W divisible by 4) into a normalized latent
/// conditioned on the timestep.
pub fn tae_encode(x: &Tensor, t_s: usize, store: &ParamStore) -> Result<Tensor> {
    check_ts(t_s)?;
    check_image_dims(x, store.meta())?;
    let mut g = Graph::new();
    let mut bind = Bind::frozen(store);
    let xv = g.leaf(x, false);
    let z = tae_forward_g(&mut g, &mut bind, store.meta(), xv, Some(t_s))?;
    Ok(g.to_tensor(z))
}

/// Encoder with the time pathway inactive (autoencoder stage).
pub fn tae_encode_plain(x: &Tensor, store: &ParamStore) -> Result<Tensor> {
    check_image_dims(x, store.meta())?;
    let mut g = Graph::new();
    let mut bind = Bind::frozen(store);
    let xv = g.leaf(x, false);
    let z = tae_forward_g(&mut g, &mut bind, store.meta(), xv, None)?;
    Ok(g.to_tensor(z))
}

fn check_image_dims(x: &Tensor, arch: &Arch) -> Result<()> {
    if x.shape().len() != 3 || x.channels() != arch.img_channels {
        return Err(Error::ShapeMismatch(format!(
            "expected {}×H×W image, got {:?}",
            arch.img_channels,
            x.shape()
        )));
    }
    if x.height() % 4 != 0 || x.width() % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims must be divisible by 4, got {}×{}",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// One UNet evaluation. The output tensor has the input's shape; teacher and
/// critic read it as an ε-prediction, the student role reads it as the clean
/// latent (conversions between the two go through [`crate::schedule`]).
pub fn unet_forward(
    z: &Tensor,
    t: usize,
    store: &ParamStore,
    base: &str,
    adapters: Option<AdapterRef>,
) -> Result<Tensor> {
    check_ts(t)?;
    let arch = store.meta();
    if z.shape().len() != 3 || z.channels() != arch.latent_channels {
        return Err(Error::ShapeMismatch(format!(
            "expected {}×h×w latent, got {:?}",
            arch.latent_channels,
            z.shape()
        )));
    }
    let mut g = Graph::new();
    let mut bind = Bind::frozen(store);
    let zv = g.leaf(z, false);
    let out = unet_forward_g(&mut g, &mut bind, arch, base, adapters, zv, t)?;
    Ok(g.to_tensor(out))
}

/// Decode a latent to pixel space, clamped to [0,1] (evaluation-time
/// convention; the training graphs use the unclamped path).
pub fn vae_decode(z: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let arch = store.meta();
    if z.shape().len() != 3 || z.channels() != arch.latent_channels {
        return Err(Error::ShapeMismatch(format!(
            "expected {}×h×w latent, got {:?}",
            arch.latent_channels,
            z.shape()
        )));
    }
    let mut g = Graph::new();
    let mut bind = Bind::frozen(store);
    let zv = g.leaf(z, false);
    let x = decoder_forward_g(&mut g, &mut bind, arch, zv)?;
    Ok(g.to_tensor(x).clamp01())
}

/// Which UNet family the student uses in this store.
pub fn student_role(store: &ParamStore) -> (&'static str, Option<&'static str>) {
    if !store.names_with_prefix("stu.unet.").is_empty() {
        ("stu.", None)
    } else if !store.names_with_prefix("stu.adapt.").is_empty() {
        ("teacher.", Some("stu.adapt."))
    } else {
        ("teacher.", None)
    }
}

/// Full one-step restoration: bilinear-upsample the LQ input 4x, encode with
/// the TAE at `t_s`, run the student UNet, decode and clamp.
pub fn student_forward(lq: &Tensor, t_s: usize, store: &ParamStore) -> Result<Tensor> {
    check_ts(t_s)?;
    let arch = store.meta();
    if lq.shape().len() != 3 || lq.channels() != arch.img_channels {
        return Err(Error::ShapeMismatch(format!(
            "expected {}×h×w LQ image, got {:?}",
            arch.img_channels,
            lq.shape()
        )));
    }
    if lq.height() % 4 != 0 || lq.width() % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "LQ dims must be multiples of 4, got {}×{}",
            lq.height(),
            lq.width()
        )));
    }
    let up = crate::tensor::resize_bilinear(lq, lq.height() * 4, lq.width() * 4);
    let (base, adapter_prefix) = student_role(store);
    let mut g = Graph::new();
    let mut bind = Bind::frozen(store);
    let xv = g.leaf(&up, false);
    let z = tae_forward_g(&mut g, &mut bind, arch, xv, Some(t_s))?;
    let adapters = adapter_prefix.map(|p| AdapterRef::new(p, arch));
    let z_hat = unet_forward_g(&mut g, &mut bind, arch, base, adapters, z, t_s)?;
    let x = decoder_forward_g(&mut g, &mut bind, arch, z_hat)?;
    Ok(g.to_tensor(x).clamp01())
}
