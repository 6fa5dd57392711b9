//! Parameter-efficient adapters for convolutional layers.
//!
//! A LoDA adapter runs in parallel with a frozen convolution `W`:
//!
//! ```text
//! y = conv(x, W) + scale * conv1x1(leaky_relu(conv(x, A)), B)
//! ```
//!
//! `A` maps `C_in` channels down to `r` with `W`'s kernel, stride, and
//! padding; `B` maps back to `C_out` with a 1x1 kernel. `B` starts at zero,
//! so an adapted network computes exactly the base network until trained.
//!
//! The reshaped-LoRA baseline instead views `W` as a
//! `(C_out * k) x (C_in * k)` matrix and adds a rank-`r` product `B A` to it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Classifier, ConvSpec, ParamStore, UNet};
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AdapterKind {
    Loda { rank: usize, slope: f64, scale: f64 },
    LoraReshaped { rank: usize },
}

/// Which convolutions of a network carry adapters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    layers: BTreeMap<String, AdapterKind>,
}

impl AdapterSet {
    pub fn get(&self, layer: &str) -> Option<&AdapterKind> {
        self.layers.get(layer)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AdapterKind)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn clear(&mut self) {
        self.layers.clear();
    }
}

/// Selects the convolutions an adapter is attached to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum TargetFilter {
    /// Every convolution whose channel counts admit the adapter rank.
    #[default]
    AllEligible,
    /// Convolutions whose name contains any of the patterns. A matched
    /// layer that cannot take the rank is an error.
    Matching(Vec<String>),
}

impl TargetFilter {
    fn selects(&self, spec: &ConvSpec, eligible: bool) -> bool {
        match self {
            TargetFilter::AllEligible => eligible,
            TargetFilter::Matching(pats) => pats.iter().any(|p| spec.name.contains(p.as_str())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodaConfig {
    pub rank: usize,
    pub slope: f64,
    pub scale: f64,
    pub init_seed: u64,
    pub target: TargetFilter,
}

impl Default for LodaConfig {
    fn default() -> Self {
        LodaConfig {
            rank: 4,
            slope: 0.1,
            scale: 1.0,
            init_seed: 0,
            target: TargetFilter::AllEligible,
        }
    }
}

/// A network whose convolutions can carry adapters.
pub trait Adaptable {
    fn conv_layers(&self) -> Vec<&ConvSpec>;
    fn adapter_set(&self) -> &AdapterSet;
    fn adapter_set_mut(&mut self) -> &mut AdapterSet;
}

impl Adaptable for UNet {
    fn conv_layers(&self) -> Vec<&ConvSpec> {
        UNet::conv_layers(self)
    }

    fn adapter_set(&self) -> &AdapterSet {
        self.adapters()
    }

    fn adapter_set_mut(&mut self) -> &mut AdapterSet {
        self.adapters_mut()
    }
}

impl Adaptable for Classifier {
    fn conv_layers(&self) -> Vec<&ConvSpec> {
        self.conv_specs()
    }

    fn adapter_set(&self) -> &AdapterSet {
        self.adapters()
    }

    fn adapter_set_mut(&mut self) -> &mut AdapterSet {
        self.adapters_mut()
    }
}

pub fn loda_a_name(layer: &str) -> String {
    format!("{layer}.loda_a")
}

pub fn loda_b_name(layer: &str) -> String {
    format!("{layer}.loda_b")
}

pub fn lora_a_name(layer: &str) -> String {
    format!("{layer}.lora_a")
}

pub fn lora_b_name(layer: &str) -> String {
    format!("{layer}.lora_b")
}

/// The adapted layer of an adapter tensor name, or `None` for other names.
pub fn adapter_layer(name: &str) -> Option<&str> {
    [".loda_a", ".loda_b", ".lora_a", ".lora_b"]
        .iter()
        .find_map(|suffix| name.strip_suffix(suffix))
}

/// `r * C_in * k^2 + C_out * r`.
pub fn loda_param_count(spec: &ConvSpec, rank: usize) -> usize {
    rank * spec.in_channels * spec.kernel * spec.kernel + spec.out_channels * rank
}

/// `r * (C_in * k) + (C_out * k) * r`.
pub fn lora_param_count(spec: &ConvSpec, rank: usize) -> usize {
    rank * spec.in_channels * spec.kernel + spec.out_channels * spec.kernel * rank
}

fn loda_eligible(spec: &ConvSpec, rank: usize) -> bool {
    rank < spec.in_channels.min(spec.out_channels)
}

fn lora_eligible(spec: &ConvSpec, rank: usize) -> bool {
    rank < (spec.in_channels * spec.kernel).min(spec.out_channels * spec.kernel)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttachReport {
    pub layers: Vec<String>,
    pub trainable: usize,
    pub total: usize,
}

fn select_layers<N: Adaptable>(
    net: &N,
    target: &TargetFilter,
    rank: usize,
    eligible: fn(&ConvSpec, usize) -> bool,
    bound: &str,
) -> Result<Vec<ConvSpec>> {
    if rank == 0 {
        return Err(Error::invalid("adapter rank must be positive"));
    }
    let mut chosen = Vec::new();
    for spec in net.conv_layers() {
        let ok = eligible(spec, rank);
        if !target.selects(spec, ok) {
            continue;
        }
        if !ok {
            return Err(Error::Adapter {
                layer: spec.name.clone(),
                reason: format!(
                    "rank {rank} is not below {bound} ({} -> {} channels, kernel {})",
                    spec.in_channels, spec.out_channels, spec.kernel
                ),
            });
        }
        if net.adapter_set().get(&spec.name).is_some() {
            return Err(Error::Adapter {
                layer: spec.name.clone(),
                reason: "already adapted".into(),
            });
        }
        chosen.push(spec.clone());
    }
    if chosen.is_empty() {
        return Err(Error::NoAdaptedLayers);
    }
    Ok(chosen)
}

/// Attaches LoDA adapters and freezes every base parameter.
pub fn attach_loda<T: Scalar, N: Adaptable>(
    net: &mut N,
    store: &mut ParamStore<T>,
    cfg: &LodaConfig,
) -> Result<AttachReport> {
    if !(0.0..1.0).contains(&cfg.slope) {
        return Err(Error::invalid(format!("LoDA slope {} outside [0, 1)", cfg.slope)));
    }
    let layers = select_layers(net, &cfg.target, cfg.rank, loda_eligible, "min(in, out) channels")?;
    store.freeze_all();
    let mut rng = rng::substream(cfg.init_seed, domain::ADAPTER_INIT, 0);
    let r = cfg.rank;
    for spec in &layers {
        let k = spec.kernel;
        let bound = 1.0 / ((spec.in_channels * k * k) as f64).sqrt();
        store.insert(
            loda_a_name(&spec.name),
            Tensor::rand_uniform([r, spec.in_channels, k, k], -bound, bound, &mut rng),
            true,
        )?;
        store.insert(
            loda_b_name(&spec.name),
            Tensor::zeros([spec.out_channels, r, 1, 1]),
            true,
        )?;
        net.adapter_set_mut().layers.insert(
            spec.name.clone(),
            AdapterKind::Loda {
                rank: r,
                slope: cfg.slope,
                scale: cfg.scale,
            },
        );
    }
    let (trainable, total) = store.counts();
    Ok(AttachReport {
        layers: layers.into_iter().map(|s| s.name).collect(),
        trainable,
        total,
    })
}

/// Attaches reshaped-LoRA adapters and freezes every base parameter.
pub fn attach_lora_reshaped<T: Scalar, N: Adaptable>(
    net: &mut N,
    store: &mut ParamStore<T>,
    rank: usize,
    target: &TargetFilter,
    init_seed: u64,
) -> Result<AttachReport> {
    let layers = select_layers(net, target, rank, lora_eligible, "min(out * k, in * k)")?;
    store.freeze_all();
    let mut rng = rng::substream(init_seed, domain::ADAPTER_INIT, 1);
    for spec in &layers {
        let k = spec.kernel;
        let bound = 1.0 / ((spec.in_channels * k) as f64).sqrt();
        store.insert(
            lora_a_name(&spec.name),
            Tensor::rand_uniform([rank, spec.in_channels * k], -bound, bound, &mut rng),
            true,
        )?;
        store.insert(
            lora_b_name(&spec.name),
            Tensor::zeros([spec.out_channels * k, rank]),
            true,
        )?;
        net.adapter_set_mut()
            .layers
            .insert(spec.name.clone(), AdapterKind::LoraReshaped { rank });
    }
    let (trainable, total) = store.counts();
    Ok(AttachReport {
        layers: layers.into_iter().map(|s| s.name).collect(),
        trainable,
        total,
    })
}

/// `(trainable, total)` parameter counts, frozen base included in `total`.
pub fn trainable_param_count<T: Scalar>(store: &ParamStore<T>) -> (usize, usize) {
    store.counts()
}

/// Rebuilds the adapter set of `net` from adapter tensors present in
/// `store`, e.g. after loading an adapter checkpoint. LoDA adapters take
/// their slope and scale from `cfg`.
pub fn restore_adapters<T: Scalar, N: Adaptable>(
    net: &mut N,
    store: &ParamStore<T>,
    cfg: &LodaConfig,
) -> Result<usize> {
    let specs: Vec<ConvSpec> = net.conv_layers().into_iter().cloned().collect();
    let set = net.adapter_set_mut();
    set.clear();
    for spec in specs {
        let loda = store.get(&loda_a_name(&spec.name));
        let lora = store.get(&lora_a_name(&spec.name));
        match (loda, lora) {
            (Some(a), None) => {
                store.tensor(&loda_b_name(&spec.name))?;
                set.layers.insert(
                    spec.name.clone(),
                    AdapterKind::Loda {
                        rank: a.tensor.shape()[0],
                        slope: cfg.slope,
                        scale: cfg.scale,
                    },
                );
            }
            (None, Some(a)) => {
                store.tensor(&lora_b_name(&spec.name))?;
                set.layers.insert(
                    spec.name.clone(),
                    AdapterKind::LoraReshaped {
                        rank: a.tensor.shape()[0],
                    },
                );
            }
            (Some(_), Some(_)) => {
                return Err(Error::Adapter {
                    layer: spec.name,
                    reason: "both LoDA and LoRA tensors present".into(),
                })
            }
            (None, None) => {}
        }
    }
    Ok(set.len())
}

/// The weight update `unreshape(B A)` of a reshaped-LoRA adapter, as a
/// `[C_out, C_in, k, k]` kernel.
pub fn lora_delta<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, weight_shape: [usize; 4]) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let d = g.matmul(bv, av)?;
    let d = g.reshape(d, &weight_shape)?;
    Ok(g.value(d).clone())
}

pub(crate) fn conv_with_adapter<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    adapters: &AdapterSet,
    spec: &ConvSpec,
    x: Var,
) -> Result<Var> {
    let w = store.bind(g, &spec.weight_name())?;
    let b = if spec.bias {
        Some(store.bind(g, &spec.bias_name())?)
    } else {
        None
    };
    match adapters.get(&spec.name) {
        None => g.conv2d(x, w, b, spec.stride, spec.padding),
        Some(&AdapterKind::Loda { slope, scale, .. }) => {
            let base = g.conv2d(x, w, b, spec.stride, spec.padding)?;
            let a = store.bind(g, &loda_a_name(&spec.name))?;
            let bm = store.bind(g, &loda_b_name(&spec.name))?;
            let h = g.conv2d(x, a, None, spec.stride, spec.padding)?;
            let h = g.leaky_relu(h, slope)?;
            let mut h = g.conv2d(h, bm, None, 1, 0)?;
            if scale != 1.0 {
                h = g.scale(h, T::lit(scale));
            }
            g.add(base, h)
        }
        Some(&AdapterKind::LoraReshaped { .. }) => {
            let a = store.bind(g, &lora_a_name(&spec.name))?;
            let bm = store.bind(g, &lora_b_name(&spec.name))?;
            let d = g.matmul(bm, a)?;
            let d = g.reshape(d, &spec.weight_shape())?;
            let w = g.add(w, d)?;
            g.conv2d(x, w, b, spec.stride, spec.padding)
        }
    }
}
