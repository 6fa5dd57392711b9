//! Stage implementations, in model precision (`f32`).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{seed_tag, AccessLog, FinetuneMode, Metrics, RunConfig, RunLock, RunPaths, Split, Tracked};
use crate::accountant::{calibrate_sigma, PrivacySpend};
use crate::adapters::{attach_loda, attach_lora_reshaped, restore_adapters};
use crate::data::{gen_shapes_dataset, LabeledDataset, Style};
use crate::diffusion::{cfg_loss_with, ddpm_sample, draw_training_inputs, Denoiser, EpsModel, NoiseSchedule};
use crate::dp::{dp_sgd_step, DpSgdConfig};
use crate::error::{Error, Result};
use crate::extra;
use crate::io::{self, Checkpoint};
use crate::nn::{Adam, Classifier, ParamStore, UNet};
use crate::rng::{self, derive_seed, domain};
use crate::tensor::{Graph, Tensor, Var};

pub type Store = ParamStore<f32>;

/// Checkpoint metadata keys.
pub mod meta_key {
    pub const DP_STEPS: &str = "dp_steps";
    pub const MODE: &str = "mode";
    pub const SEED: &str = "seed";
}

/// Public pre-training set and the disjoint private train/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub public: LabeledDataset,
    pub private_train: LabeledDataset,
    pub private_test: LabeledDataset,
}

pub fn gen_data(cfg: &RunConfig, seed: u64) -> Result<Datasets> {
    let k = cfg.data.num_classes;
    Ok(Datasets {
        public: gen_shapes_dataset(
            Style::Public,
            cfg.data.public_per_class,
            k,
            derive_seed(seed, seed_tag::PUBLIC_DATA),
        )?,
        private_train: gen_shapes_dataset(
            Style::Private,
            cfg.data.private_per_class,
            k,
            derive_seed(seed, seed_tag::PRIVATE_TRAIN),
        )?,
        private_test: gen_shapes_dataset(
            Style::Private,
            cfg.data.test_per_class,
            k,
            derive_seed(seed, seed_tag::PRIVATE_TEST),
        )?,
    })
}

/// Counts conditioning labels seen by the network.
struct LabelCounter<'a> {
    inner: Denoiser<'a, f32>,
    null: AtomicUsize,
    total: AtomicUsize,
}

impl EpsModel<f32> for LabelCounter<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn eps(&self, g: &mut Graph<f32>, x: Var, t: &[usize], labels: &[usize]) -> Result<Var> {
        let null = self.null_class();
        self.null
            .fetch_add(labels.iter().filter(|&&l| l == null).count(), Ordering::Relaxed);
        self.total.fetch_add(labels.len(), Ordering::Relaxed);
        self.inner.eps(g, x, t, labels)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub store: Store,
    pub steps: u64,
    pub first_loss: f64,
    pub final_epoch_loss: f64,
    /// Fraction of conditioning labels that were the null token.
    pub null_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub first_loss: f64,
    pub final_epoch_loss: f64,
    pub null_fraction: f64,
}

impl PretrainOutcome {
    pub fn summary(&self) -> PretrainSummary {
        PretrainSummary {
            steps: self.steps,
            first_loss: self.first_loss,
            final_epoch_loss: self.final_epoch_loss,
            null_fraction: self.null_fraction,
        }
    }
}

pub fn unet(cfg: &RunConfig) -> Result<UNet> {
    UNet::new(cfg.unet_config())
}

pub fn fresh_unet_params(cfg: &RunConfig, seed: u64) -> Result<Store> {
    unet(cfg)?.init_params(derive_seed(seed, seed_tag::UNET_INIT))
}

#[allow(clippy::too_many_arguments)]
fn train_diffusion(
    stage: &str,
    cfg: &RunConfig,
    data: &LabeledDataset,
    mut store: Store,
    epochs: usize,
    p_uncond: f64,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<PretrainOutcome> {
    let net = unet(cfg)?;
    let schedule = cfg.schedule()?;
    store.unfreeze_all();
    let layout = store.trainable_layout();
    let mut opt = Adam::new(cfg.pipeline.pretrain_lr, layout.len);
    let (mut null, mut total) = (0, 0);
    let batch = cfg.pipeline.pretrain_batch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    let mut first_loss = f64::NAN;
    let mut epoch_loss = f64::NAN;
    for epoch in 0..epochs {
        order.shuffle(&mut rng::substream(seed, domain::TRAIN, epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(batch) {
            let (x0, labels) = data.batch(idx)?;
            let model = LabelCounter {
                inner: Denoiser::new(&net, &store),
                null: AtomicUsize::new(0),
                total: AtomicUsize::new(0),
            };
            let mut r = rng::substream(seed, domain::DIFFUSION, step);
            let draws = draw_training_inputs(&x0, &labels, &schedule, p_uncond, model.null_class(), &mut r)?;
            let mut g = Graph::new();
            let loss = cfg_loss_with(&model, &mut g, &x0, &schedule, &draws)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    step: step as usize,
                    loss: value,
                });
            }
            g.backward(loss)?;
            null += model.null.into_inner();
            total += model.total.into_inner();
            let grad = layout.flatten(&g);
            opt.step(&mut store, &layout, &grad)?;
            if step == 0 {
                first_loss = value;
            }
            sum += value;
            batches += 1;
            metrics.emit(stage, step, Some(value), None, extra! {"epoch" => epoch})?;
            step += 1;
        }
        epoch_loss = sum / batches.max(1) as f64;
    }
    Ok(PretrainOutcome {
        store,
        steps: step,
        first_loss,
        final_epoch_loss: epoch_loss,
        null_fraction: if total == 0 { 0.0 } else { null as f64 / total as f64 },
    })
}

/// Unconditional pre-training on the whole public set: every label is the
/// null token.
pub fn pretrain_step1(
    cfg: &RunConfig,
    public: &LabeledDataset,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<PretrainOutcome> {
    let store = fresh_unet_params(cfg, seed)?;
    let seed = derive_seed(seed, seed_tag::PRETRAIN1);
    train_diffusion(
        "pretrain1",
        cfg,
        public,
        store,
        cfg.pipeline.pretrain1_epochs,
        1.0,
        seed,
        metrics,
    )
}

/// The leading `step2_fraction` of the public set. Classes are interleaved,
/// so the subset stays balanced.
pub fn step2_subset(cfg: &RunConfig, public: &LabeledDataset) -> Result<LabeledDataset> {
    let n = ((public.len() as f64 * cfg.pipeline.step2_fraction).round() as usize).clamp(1, public.len());
    public.subset(&(0..n).collect::<Vec<_>>())
}

/// Class-conditional pre-training with conditioning dropout, continuing
/// from `init` (or from fresh weights when `None`).
pub fn pretrain_step2(
    cfg: &RunConfig,
    public: &LabeledDataset,
    init: Option<Store>,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<PretrainOutcome> {
    let store = match init {
        Some(s) => s,
        None => fresh_unet_params(cfg, seed)?,
    };
    let subset = step2_subset(cfg, public)?;
    let seed2 = derive_seed(seed, seed_tag::PRETRAIN2);
    train_diffusion(
        "pretrain2",
        cfg,
        &subset,
        store,
        cfg.pipeline.pretrain2_epochs,
        cfg.diffusion.p_uncond,
        seed2,
        metrics,
    )
}

/// Mean conditional (label-kept) denoising loss over `data` with draws from
/// `seed`, evaluated without a tape.
pub fn conditional_loss(cfg: &RunConfig, store: &Store, data: &LabeledDataset, seed: u64) -> Result<f64> {
    let net = unet(cfg)?;
    let schedule = cfg.schedule()?;
    let model = Denoiser::new(&net, store);
    let mut sum = 0.0;
    let mut n = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for (j, chunk) in idx.chunks(cfg.pipeline.sample_batch).enumerate() {
        let (x0, labels) = data.batch(chunk)?;
        let mut r = rng::substream(seed, domain::DIFFUSION, j as u64);
        let draws = draw_training_inputs(&x0, &labels, &schedule, 0.0, model.null_class(), &mut r)?;
        let mut g = Graph::no_grad();
        let loss = cfg_loss_with(&model, &mut g, &x0, &schedule, &draws)?;
        sum += g.value(loss).item() as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(sum / n as f64)
}

/// DP-SGD settings for `epochs` passes at rate `q`: the configured noise
/// multiplier, or one calibrated to the target budget.
pub fn dp_config(cfg: &RunConfig, epochs: usize, lr: f64) -> Result<DpSgdConfig> {
    let steps = cfg.dp_steps_for(epochs);
    let sigma = match cfg.dp.noise_multiplier {
        Some(s) => s,
        None => calibrate_sigma(cfg.dp.sample_rate, steps, cfg.dp.target_epsilon, cfg.dp.delta)?,
    };
    let out = DpSgdConfig {
        noise_multiplier: sigma,
        lr,
        ..cfg.dp_template(steps)
    };
    out.validate()?;
    Ok(out)
}

/// Builds the network and parameters for fine-tuning in `mode`: adapters
/// attached and the base frozen, or everything trainable.
pub fn prepare_finetune(cfg: &RunConfig, base: &Store, mode: FinetuneMode, seed: u64) -> Result<(UNet, Store)> {
    let mut net = unet(cfg)?;
    let mut store = base.clone();
    let init_seed = derive_seed(seed, seed_tag::ADAPTER_INIT);
    match mode {
        FinetuneMode::Loda => {
            attach_loda(&mut net, &mut store, &cfg.loda_config(init_seed))?;
        }
        FinetuneMode::LoraReshaped => {
            attach_lora_reshaped(&mut net, &mut store, cfg.loda.lora_rank, &cfg.loda.targets, init_seed)?;
        }
        FinetuneMode::Full => store.unfreeze_all(),
    }
    Ok((net, store))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub mode: FinetuneMode,
    pub net: UNet,
    pub store: Store,
    pub sigma: f64,
    pub steps: u64,
    pub spend: PrivacySpend,
    pub trainable: usize,
    pub total: usize,
    /// True when the budget ran out before the configured step count.
    pub halted: bool,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint<f32> {
        Checkpoint::new(self.store.clone())
            .with_meta(meta_key::DP_STEPS, self.steps)
            .with_meta(meta_key::MODE, self.mode.code())
            .with_meta(meta_key::SEED, seed)
    }

    /// Adapter-only for adapter modes; the whole model for full mode.
    pub fn save(&self, path: &Path, seed: u64) -> Result<u64> {
        let ck = self.checkpoint(seed);
        io::save_checkpoint(&ck.store, &ck.meta, path, self.mode != FinetuneMode::Full)
    }
}

/// DP-SGD fine-tuning of the pre-trained model on the private split. With
/// `resume`, training continues from its tensors and persisted step count.
#[allow(clippy::too_many_arguments)]
pub fn dp_finetune(
    cfg: &RunConfig,
    base: &Store,
    private: &Tracked,
    mode: FinetuneMode,
    dp: &DpSgdConfig,
    seed: u64,
    resume: Option<&Checkpoint<f32>>,
    metrics: &mut Metrics,
) -> Result<FinetuneOutcome> {
    let stage = format!("finetune_{mode}");
    let data = private.read(&stage);
    dp.validate()?;
    let (net, mut store) = prepare_finetune(cfg, base, mode, seed)?;
    let mut start = 0;
    if let Some(ck) = resume {
        if ck.meta.get(meta_key::MODE) != Some(&mode.code()) {
            return Err(Error::Config(format!(
                "resume checkpoint was not written by {mode} fine-tuning"
            )));
        }
        start = ck.meta.get(meta_key::DP_STEPS).copied().unwrap_or(0);
        let trainable: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        ck.apply_to(&mut store)?;
        store.freeze_all();
        for name in trainable {
            store.set_trainable(&name, true)?;
        }
    }
    let (trainable, total) = store.counts();
    let mut accountant = dp.accountant()?.with_steps(start);
    let schedule = cfg.schedule()?;
    let p_uncond = cfg.diffusion.p_uncond;
    let null = net.config().null_class();
    let dseed = derive_seed(seed, seed_tag::FINETUNE);
    let mut halted = false;
    while accountant.steps() < dp.steps {
        let res = dp_sgd_step(&mut store, dp, data.len(), dseed, &mut accountant, |step, i, s, g| {
            let x0 = data.images.slice_rows(i, i + 1)?;
            let mut r = rng::substream(dseed, domain::DIFFUSION, (step << 32) | i as u64);
            let draws = draw_training_inputs(&x0, &data.labels[i..i + 1], &schedule, p_uncond, null, &mut r)?;
            cfg_loss_with(&Denoiser::new(&net, s), g, &x0, &schedule, &draws)
        });
        match res {
            Ok(st) => metrics.emit(
                &stage,
                st.step,
                Some(st.mean_loss),
                Some(st.epsilon),
                extra! {
                    "batch" => st.batch_size,
                    "mean_grad_norm" => st.mean_grad_norm,
                    "max_grad_norm" => st.max_grad_norm,
                    "clipped_fraction" => st.clipped_fraction,
                },
            )?,
            Err(Error::BudgetExhausted { .. }) => {
                halted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let spend = accountant.spend()?;
    Ok(FinetuneOutcome {
        mode,
        net,
        store,
        sigma: dp.noise_multiplier,
        steps: accountant.steps(),
        spend,
        trainable,
        total,
        halted,
    })
}

/// Rebuilds a fine-tuned model from the base checkpoint and a fine-tuning
/// checkpoint (adapter-only or full).
pub fn load_finetuned(cfg: &RunConfig, base: &Store, ck: &Checkpoint<f32>) -> Result<(UNet, Store)> {
    let mut net = unet(cfg)?;
    let mut store = base.clone();
    ck.apply_to(&mut store)?;
    restore_adapters(&mut net, &store, &cfg.loda_config(0))?;
    store.freeze_all();
    Ok((net, store))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub data: LabeledDataset,
    /// SHA-256 of the little-endian sample bytes.
    pub hash: String,
}

pub fn sample_hash(images: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for v in images.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `n_per_class` guided samples of every class, grouped by class. Chunks of
/// `sample_batch` chains draw from their own substreams and run in parallel.
pub fn generate_synthetic(
    cfg: &RunConfig,
    net: &UNet,
    store: &Store,
    n_per_class: usize,
    seed: u64,
) -> Result<Synthetic> {
    let schedule: NoiseSchedule = cfg.schedule()?;
    let guidance = cfg.guidance();
    let k = cfg.data.num_classes;
    let size = cfg.unet.image_size;
    let chunk = cfg.pipeline.sample_batch;
    let gseed = derive_seed(seed, seed_tag::GENERATE);
    let jobs: Vec<(usize, usize, usize)> = (0..k)
        .flat_map(|c| {
            (0..n_per_class)
                .step_by(chunk)
                .enumerate()
                .map(move |(j, start)| (c, j, chunk.min(n_per_class - start)))
        })
        .collect();
    let parts: Vec<Result<Tensor<f32>>> = jobs
        .par_iter()
        .map(|&(c, j, n)| {
            let model = Denoiser::new(net, store);
            let mut r = rng::substream(gseed, domain::SAMPLING, ((c as u64) << 32) | j as u64);
            ddpm_sample(&model, &schedule, &guidance, c, n, 1, size, &mut r)
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let images = Tensor::cat_rows(&parts)?;
    let labels = jobs.iter().flat_map(|&(c, _, n)| std::iter::repeat_n(c, n)).collect();
    let hash = sample_hash(&images);
    Ok(Synthetic {
        data: LabeledDataset::new(images, labels, k)?,
        hash,
    })
}

/// The first `per_class` samples of each class, one class per grid row.
pub fn grid_samples(data: &LabeledDataset, per_class: usize) -> Result<Tensor<f32>> {
    let mut idx = Vec::new();
    for c in 0..data.num_classes {
        let rows: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] == c)
            .take(per_class)
            .collect();
        if rows.len() < per_class {
            return Err(Error::invalid(format!("class {c} has fewer than {per_class} samples")));
        }
        idx.extend(rows);
    }
    data.images.select_rows(&idx)
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub net: Classifier,
    pub store: Store,
    pub final_epoch_loss: f64,
    pub train_accuracy: f64,
}

pub fn classifier(cfg: &RunConfig) -> Result<Classifier> {
    Classifier::new(cfg.classifier_config())
}

/// Non-private Adam training of the downstream CNN.
pub fn train_downstream(
    cfg: &RunConfig,
    data: &Tracked,
    stage: &str,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<ClassifierOutcome> {
    let data = data.read(stage);
    let seed = derive_seed(seed, seed_tag::DOWNSTREAM);
    let net = classifier(cfg)?;
    let mut store: Store = net.init_params(seed)?;
    let layout = store.trainable_layout();
    let mut opt = Adam::new(cfg.pipeline.classifier_lr, layout.len);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    let mut epoch_loss = f64::NAN;
    for epoch in 0..cfg.pipeline.classifier_epochs {
        order.shuffle(&mut rng::substream(seed, domain::TRAIN, epoch as u64));
        let (mut sum, mut batches) = (0.0, 0);
        for idx in order.chunks(cfg.pipeline.classifier_batch) {
            let (x, labels) = data.batch(idx)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = net.forward(&mut g, &store, xv)?;
            let loss = g.cross_entropy_loss(logits, &labels)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    step: step as usize,
                    loss: value,
                });
            }
            g.backward(loss)?;
            opt.step(&mut store, &layout, &layout.flatten(&g))?;
            metrics.emit(stage, step, Some(value), None, extra! {"epoch" => epoch})?;
            sum += value;
            batches += 1;
            step += 1;
        }
        epoch_loss = sum / batches.max(1) as f64;
    }
    let preds = net.predict(&store, &data.images, cfg.pipeline.sample_batch)?;
    let train_accuracy = evaluate_predictions(&preds, &data.labels, data.num_classes)?.accuracy;
    Ok(ClassifierOutcome {
        net,
        store,
        final_epoch_loss: epoch_loss,
        train_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
}

pub fn evaluate_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if preds.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::invalid(format!("class index outside [0, {num_classes})")));
        }
        confusion[l][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
        per_class_accuracy,
    })
}

/// Accuracy and confusion matrix of a classifier on the held-out split.
pub fn evaluate(net: &Classifier, store: &Store, test: &Tracked, stage: &str, batch: usize) -> Result<Evaluation> {
    let data = test.read(stage);
    let preds = net.predict(store, &data.images, batch)?;
    evaluate_predictions(&preds, &data.labels, data.num_classes)
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub net: Classifier,
    pub store: Store,
    pub sigma: f64,
    pub steps: u64,
    pub spend: PrivacySpend,
    pub halted: bool,
}

/// The downstream CNN trained directly on the private split with DP-SGD.
pub fn baseline_dpsgd_classifier(
    cfg: &RunConfig,
    private: &Tracked,
    dp: &DpSgdConfig,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<BaselineOutcome> {
    let stage = "baseline_dpsgd";
    let data = private.read(stage);
    dp.validate()?;
    let seed = derive_seed(seed, seed_tag::BASELINE);
    let net = classifier(cfg)?;
    let mut store: Store = net.init_params(seed)?;
    let mut accountant = dp.accountant()?;
    let mut halted = false;
    while accountant.steps() < dp.steps {
        let res = dp_sgd_step(&mut store, dp, data.len(), seed, &mut accountant, |_, i, s, g| {
            let x = g.constant(data.images.slice_rows(i, i + 1)?);
            let logits = net.forward(g, s, x)?;
            g.cross_entropy_loss(logits, &data.labels[i..i + 1])
        });
        match res {
            Ok(st) => metrics.emit(
                stage,
                st.step,
                Some(st.mean_loss),
                Some(st.epsilon),
                extra! {"batch" => st.batch_size, "clipped_fraction" => st.clipped_fraction},
            )?,
            Err(Error::BudgetExhausted { .. }) => {
                halted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(BaselineOutcome {
        net,
        store,
        sigma: dp.noise_multiplier,
        steps: accountant.steps(),
        spend: accountant.spend()?,
        halted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: FinetuneMode,
    pub noise_multiplier: f64,
    pub steps: u64,
    pub spend: PrivacySpend,
    pub halted: bool,
    pub trainable_params: usize,
    pub total_params: usize,
    pub checkpoint_bytes: u64,
    pub synthetic_hash: String,
    pub synthetic_train_accuracy: f64,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub noise_multiplier: f64,
    pub steps: u64,
    pub spend: PrivacySpend,
    pub halted: bool,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub seed: u64,
    pub class_counts: BTreeMap<String, Vec<usize>>,
    pub base_params: usize,
    pub base_checkpoint_bytes: u64,
    pub pretrain1: PretrainSummary,
    pub pretrain2: PretrainSummary,
    pub modes: Vec<ModeReport>,
    pub baseline: BaselineReport,
    /// Stages that read the private training split.
    pub private_train_readers: Vec<String>,
    /// Seconds per stage; the only field that varies between identical runs.
    pub wall_time: BTreeMap<String, f64>,
}

impl Report {
    pub fn mode(&self, mode: FinetuneMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Fails unless only DP-SGD stages read the private training split.
pub fn check_privacy_hygiene(log: &AccessLog) -> Result<Vec<String>> {
    let readers = log.stages_reading(Split::PrivateTrain);
    if let Some(bad) = readers
        .iter()
        .find(|s| !(s.starts_with("finetune_") || s.as_str() == "baseline_dpsgd"))
    {
        return Err(Error::Privacy(format!("stage `{bad}` read the private training split")));
    }
    Ok(readers)
}

/// Loads the three data files under `paths`, generating and writing any
/// that are missing.
pub fn ensure_data(cfg: &RunConfig, seed: u64, paths: &RunPaths) -> Result<Datasets> {
    let files = [paths.public_data(), paths.private_train(), paths.private_test()];
    if files.iter().all(|p| p.exists()) {
        return Ok(Datasets {
            public: io::read_dataset(&files[0])?,
            private_train: io::read_dataset(&files[1])?,
            private_test: io::read_dataset(&files[2])?,
        });
    }
    let d = gen_data(cfg, seed)?;
    io::write_dataset(&d.public, &files[0])?;
    io::write_dataset(&d.private_train, &files[1])?;
    io::write_dataset(&d.private_test, &files[2])?;
    // Reload so every stage sees the quantized on-disk images.
    ensure_data(cfg, seed, paths)
}

/// Fine-tunes in `mode`, then generates, trains, and evaluates downstream.
#[allow(clippy::too_many_arguments)]
fn run_mode(
    cfg: &RunConfig,
    base: &Store,
    data: &Datasets,
    log: &AccessLog,
    mode: FinetuneMode,
    dp: &DpSgdConfig,
    seed: u64,
    paths: &RunPaths,
    metrics: &mut Metrics,
    wall: &mut BTreeMap<String, f64>,
) -> Result<ModeReport> {
    let private = Tracked::new(&data.private_train, Split::PrivateTrain, log);
    let test = Tracked::new(&data.private_test, Split::PrivateTest, log);
    let t = Instant::now();
    let ft = dp_finetune(cfg, base, &private, mode, dp, seed, None, metrics)?;
    let bytes = ft.save(&paths.finetune(mode), seed)?;
    wall.insert(format!("finetune_{mode}"), t.elapsed().as_secs_f64());
    metrics.emit(
        &format!("finetune_{mode}"),
        ft.steps,
        None,
        Some(ft.spend.epsilon),
        extra! {"done" => true, "halted" => ft.halted, "trainable" => ft.trainable, "total" => ft.total},
    )?;

    let t = Instant::now();
    let synth = generate_synthetic(cfg, &ft.net, &ft.store, cfg.pipeline.synthetic_per_class, seed)?;
    io::write_dataset(&synth.data, &paths.synthetic(mode))?;
    let grid = grid_samples(
        &synth.data,
        cfg.pipeline.grid_per_class.min(cfg.pipeline.synthetic_per_class),
    )?;
    io::export_image_grid(
        &grid,
        cfg.pipeline.grid_per_class.min(cfg.pipeline.synthetic_per_class),
        &paths.grid(mode),
    )?;
    wall.insert(format!("generate_{mode}"), t.elapsed().as_secs_f64());
    metrics.emit(
        &format!("generate_{mode}"),
        0,
        None,
        None,
        extra! {"hash" => synth.hash},
    )?;

    let t = Instant::now();
    let synthetic = Tracked::new(&synth.data, Split::Synthetic, log);
    let stage = format!("downstream_{mode}");
    let cls = train_downstream(cfg, &synthetic, &stage, seed, metrics)?;
    io::save_checkpoint(&cls.store, &BTreeMap::new(), &paths.classifier(mode), false)?;
    let evaluation = evaluate(
        &cls.net,
        &cls.store,
        &test,
        &format!("evaluate_{mode}"),
        cfg.pipeline.sample_batch,
    )?;
    wall.insert(stage.clone(), t.elapsed().as_secs_f64());
    metrics.emit(
        &format!("evaluate_{mode}"),
        0,
        None,
        None,
        extra! {"accuracy" => evaluation.accuracy, "train_accuracy" => cls.train_accuracy},
    )?;
    Ok(ModeReport {
        mode,
        noise_multiplier: ft.sigma,
        steps: ft.steps,
        spend: ft.spend,
        halted: ft.halted,
        trainable_params: ft.trainable,
        total_params: ft.total,
        checkpoint_bytes: bytes,
        synthetic_hash: synth.hash,
        synthetic_train_accuracy: cls.train_accuracy,
        evaluation,
    })
}

/// Every stage in order, writing artifacts, `metrics.jsonl`, and
/// `report.json` under `out`. The master seed is `cfg.pipeline.seed`.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<Report> {
    cfg.validate()?;
    let _lock = RunLock::acquire(out)?;
    let paths = RunPaths::new(out);
    let seed = cfg.pipeline.seed;
    let mut metrics = Metrics::append_to(&paths.metrics())?;
    metrics.emit("config", 0, None, None, extra! {"config" => cfg, "seed" => seed})?;
    let mut wall = BTreeMap::new();
    let log = AccessLog::new();

    let t = Instant::now();
    let data = ensure_data(cfg, seed, &paths)?;
    wall.insert("gen_data".to_string(), t.elapsed().as_secs_f64());
    let public = Tracked::new(&data.public, Split::Public, &log);

    let t = Instant::now();
    let p1 = pretrain_step1(cfg, public.read("pretrain1"), seed, &mut metrics)?;
    io::save_checkpoint(&p1.store, &BTreeMap::new(), &paths.pretrain1(), false)?;
    wall.insert("pretrain1".to_string(), t.elapsed().as_secs_f64());
    let p1_summary = p1.summary();

    let t = Instant::now();
    let p2 = pretrain_step2(cfg, public.read("pretrain2"), Some(p1.store), seed, &mut metrics)?;
    let base_bytes = io::save_checkpoint(&p2.store, &BTreeMap::new(), &paths.pretrain2(), false)?;
    wall.insert("pretrain2".to_string(), t.elapsed().as_secs_f64());
    let mut base = p2.store.clone();
    base.freeze_all();

    let dp = dp_config(cfg, cfg.dp.epochs, cfg.dp.lr)?;
    let mut modes = vec![cfg.dp.mode];
    if cfg.pipeline.compare_full && cfg.dp.mode != FinetuneMode::Full {
        modes.push(FinetuneMode::Full);
    }
    let mut reports = Vec::new();
    for mode in modes {
        reports.push(run_mode(
            cfg,
            &base,
            &data,
            &log,
            mode,
            &dp,
            seed,
            &paths,
            &mut metrics,
            &mut wall,
        )?);
    }

    let t = Instant::now();
    let private = Tracked::new(&data.private_train, Split::PrivateTrain, &log);
    let test = Tracked::new(&data.private_test, Split::PrivateTest, &log);
    let bdp = dp_config(cfg, cfg.pipeline.baseline_epochs, cfg.pipeline.baseline_lr)?;
    let b = baseline_dpsgd_classifier(cfg, &private, &bdp, seed, &mut metrics)?;
    let meta = BTreeMap::from([(meta_key::DP_STEPS.to_string(), b.steps)]);
    io::save_checkpoint(&b.store, &meta, &paths.baseline(), false)?;
    let evaluation = evaluate(&b.net, &b.store, &test, "evaluate_baseline", cfg.pipeline.sample_batch)?;
    wall.insert("baseline_dpsgd".to_string(), t.elapsed().as_secs_f64());
    metrics.emit(
        "evaluate_baseline",
        0,
        None,
        Some(b.spend.epsilon),
        extra! {"accuracy" => evaluation.accuracy},
    )?;

    let readers = check_privacy_hygiene(&log)?;
    let report = Report {
        config: cfg.clone(),
        seed,
        class_counts: BTreeMap::from([
            ("public".to_string(), data.public.class_counts()),
            ("private_train".to_string(), data.private_train.class_counts()),
            ("private_test".to_string(), data.private_test.class_counts()),
        ]),
        base_params: base.counts().1,
        base_checkpoint_bytes: base_bytes,
        pretrain1: p1_summary,
        pretrain2: p2.summary(),
        modes: reports,
        baseline: BaselineReport {
            noise_multiplier: b.sigma,
            steps: b.steps,
            spend: b.spend,
            halted: b.halted,
            evaluation,
        },
        private_train_readers: readers,
        wall_time: wall,
    };
    io::write_file(&paths.report(), serde_json::to_string_pretty(&report)?.as_bytes())?;
    metrics.emit("report", 0, None, None, extra! {"path" => "report.json"})?;
    Ok(report)
}
