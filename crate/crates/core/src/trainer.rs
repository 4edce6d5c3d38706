//! Alternating optimization of the encoders, similarity module, decoder and discriminator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, HostTensor};
use crate::data::{Batch, DataLoader, DatasetManifest, LoaderConfig, Normalization, Position, SaliencyModel};
use crate::decoder::{Decoder, DecoderConfig, PredictionPair, RefineGrid};
use crate::discriminator::Discriminator;
use crate::encoder::{read_store, Encoder};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_adv_loss, task_structure_loss, LossWeights};
use crate::nn::ops::{scalar, sigmoid};
use crate::nn::{clip_scale, grad_norm, Adam, AdamConfig, Mode, Moments, ParamStore};
use crate::similarity::{latent_loss, Similarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sod,
    Cod,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sod => "sod",
            Task::Cod => "cod",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sod" => Ok(Task::Sod),
            "cod" => Ok(Task::Cod),
            other => Err(Error::argument(format!("unknown task {other:?}"))),
        }
    }
}

/// Parameter groups, in checkpoint order.
pub const GROUPS: [&str; 5] = ["alpha_s", "alpha_c", "theta", "beta", "gamma"];

fn encoder_group(task: Task) -> &'static str {
    match task {
        Task::Sod => "alpha_s",
        Task::Cod => "alpha_c",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: u64,
    pub sod_steps: u64,
    pub cod_steps: u64,
    pub base_lr: f64,
    pub decay_step: u64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub similarity_interval: u64,
    pub latent_dim: usize,
    pub mining_count: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub latent_weight: f64,
    pub seed: u64,
    pub separate_tasks: bool,
    pub disable_similarity: bool,
    pub disable_adversarial: bool,
    /// Global gradient-norm bound per update; 0 disables clipping.
    pub clip_norm: f64,
    pub freeze_bn: bool,
    pub refine_grid: RefineGrid,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Iterations between rolling checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub flip: bool,
    pub cache: bool,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let a = AdamConfig::default();
        let n = Normalization::default();
        let d = DecoderConfig::default();
        Self {
            max_iters: 36000,
            sod_steps: 3,
            cod_steps: 1,
            base_lr: 2.5e-5,
            decay_step: 24000,
            decay_rate: 0.1,
            batch_size: 15,
            image_size: 352,
            similarity_interval: 400,
            latent_dim: 700,
            mining_count: 400,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            latent_weight: w.latent_weight,
            seed: 0,
            separate_tasks: false,
            disable_similarity: false,
            disable_adversarial: false,
            clip_norm: 0.5,
            freeze_bn: false,
            refine_grid: d.refine_grid,
            blur_kernel: d.blur_kernel,
            blur_sigma: d.blur_sigma,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            checkpoint_interval: 2000,
            flip: false,
            cache: false,
            norm_mean: n.mean,
            norm_std: n.std,
        }
    }
}

fn field(name: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: name.into(),
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sod_steps", self.sod_steps as f64),
            ("cod_steps", self.cod_steps as f64),
            ("base_lr", self.base_lr),
            ("decay_rate", self.decay_rate),
            ("batch_size", self.batch_size as f64),
            ("image_size", self.image_size as f64),
            ("similarity_interval", self.similarity_interval as f64),
            ("latent_dim", self.latent_dim as f64),
            ("blur_sigma", self.blur_sigma),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be positive, got {v}")));
            }
        }
        if self.image_size % 32 != 0 {
            return Err(field("image_size", "must be a multiple of 32"));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(field("blur_kernel", "must be odd"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(field("clip_norm", "must be non-negative"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(field(name, "must lie in [0, 1)"));
            }
        }
        if self.norm_std.iter().any(|s| *s <= 0.0) {
            return Err(field("norm_std", "entries must be positive"));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            latent_weight: self.latent_weight,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            refine_grid: self.refine_grid,
            blur_kernel: self.blur_kernel,
            blur_sigma: self.blur_sigma,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.norm_mean,
            std: self.norm_std,
        }
    }

    pub fn loader(&self) -> LoaderConfig {
        LoaderConfig {
            image_size: self.image_size,
            batch_size: self.batch_size,
            shuffle: true,
            flip: self.flip,
            cache: self.cache,
            normalization: self.normalization(),
        }
    }

    fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }
}

/// Step learning-rate schedule over 0-based iteration indices.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    if iteration < config.decay_step {
        config.base_lr
    } else {
        config.base_lr * config.decay_rate
    }
}

/// Which tasks a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Joint,
    SodOnly,
    CodOnly,
}

/// Generator task of 1-based iteration `t`.
pub fn task_at(t: u64, config: &TrainConfig, scope: Scope) -> Task {
    match scope {
        Scope::SodOnly => Task::Sod,
        Scope::CodOnly => Task::Cod,
        Scope::Joint => {
            if (t - 1) % (config.sod_steps + config.cod_steps) < config.sod_steps {
                Task::Sod
            } else {
                Task::Cod
            }
        }
    }
}

pub fn similarity_due(t: u64, config: &TrainConfig, scope: Scope) -> bool {
    scope == Scope::Joint && !config.disable_similarity && t % config.similarity_interval == 0
}

/// All learnable modules.
pub struct Model {
    pub sod_encoder: Encoder,
    pub cod_encoder: Encoder,
    pub similarity: Similarity,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn new(config: &TrainConfig, pretrained: Option<&Path>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (sod_encoder, cod_encoder) = crate::encoder::init_encoders(None, &mut rng)?;
        let model = Self {
            sod_encoder,
            cod_encoder,
            similarity: Similarity::new(config.latent_dim, &mut rng)?,
            decoder: Decoder::new(config.decoder(), &mut rng)?,
            discriminator: Discriminator::new(&mut rng)?,
        };
        if let Some(path) = pretrained {
            let source = read_store(path)?;
            model.sod_encoder.load_backbone(&source, path)?;
            model.cod_encoder.load_backbone(&source, path)?;
            model.decoder.load_backbone_stages(&source, path)?;
        }
        Ok(model)
    }

    fn skeleton(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            sod_encoder: Encoder::skeleton()?,
            cod_encoder: Encoder::skeleton()?,
            similarity: Similarity::skeleton(config.latent_dim)?,
            decoder: Decoder::skeleton(config.decoder())?,
            discriminator: Discriminator::skeleton()?,
        })
    }

    pub fn store(&self, group: &str) -> &ParamStore {
        match group {
            "alpha_s" => self.sod_encoder.store(),
            "alpha_c" => self.cod_encoder.store(),
            "theta" => self.similarity.store(),
            "beta" => self.decoder.store(),
            "gamma" => self.discriminator.store(),
            other => panic!("unknown parameter group {other}"),
        }
    }

    pub fn encoder(&self, task: Task) -> &Encoder {
        match task {
            Task::Sod => &self.sod_encoder,
            Task::Cod => &self.cod_encoder,
        }
    }

    /// Evaluation-mode prediction through the task's encoder and the shared decoder.
    pub fn predict(&self, images: &Tensor, task: Task) -> Result<PredictionPair> {
        let pyramid = self.encoder(task).forward(images, Mode::Eval)?;
        self.decoder.forward(&pyramid, Mode::Eval)
    }

    /// Sigmoid of the refined map, `B×1×H×W`.
    pub fn predict_probs(&self, images: &Tensor, task: Task) -> Result<Tensor> {
        sigmoid(&self.predict(images, task)?.refined_logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Similarity,
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub kind: UpdateKind,
    pub task: Option<Task>,
    /// The objective that was differentiated.
    pub loss: f64,
    /// Gradient norm of every group in this update's backward pass (0 when absent).
    pub grad_norms: BTreeMap<String, f64>,
    pub updated: Vec<String>,
    pub clip_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based iteration number.
    pub iteration: u64,
    pub task: Task,
    pub lr: f64,
    pub l_str: f64,
    pub l_adv: Option<f64>,
    pub l_dis: Option<f64>,
    pub l_latent: Option<f64>,
    pub events: Vec<UpdateEvent>,
}

/// What the next iteration needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    pub iteration: u64,
    pub task: Task,
    pub similarity: bool,
}

#[derive(Default)]
pub struct StepBatches<'a> {
    pub sod: Option<&'a Batch>,
    pub cod: Option<&'a Batch>,
    pub connection: Option<&'a Batch>,
}

/// Result of a generator sub-step, reused by the following discriminator sub-step.
pub struct GeneratorOutput {
    pub event: UpdateEvent,
    pub structure: f64,
    pub adversarial: Option<f64>,
    /// Detached refined probabilities.
    pub probs: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    iteration: u64,
    scope: Scope,
    config: TrainConfig,
    positions: BTreeMap<String, Position>,
    adam_steps: BTreeMap<String, u64>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizers: BTreeMap<String, Adam>,
    /// Completed iterations.
    pub iteration: u64,
    pub scope: Scope,
    /// Data stream positions by stream name, refreshed before each checkpoint.
    pub positions: BTreeMap<String, Position>,
}

impl TrainState {
    pub fn new(config: TrainConfig, scope: Scope, pretrained: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config, pretrained)?;
        let optimizers = GROUPS
            .iter()
            .map(|g| (g.to_string(), Adam::new(config.adam())))
            .collect();
        Ok(Self {
            config,
            model,
            optimizers,
            iteration: 0,
            scope,
            positions: BTreeMap::new(),
        })
    }

    fn bn_mode(&self) -> Mode {
        if self.config.freeze_bn {
            Mode::Eval
        } else {
            Mode::Train
        }
    }

    pub fn plan(&self) -> Plan {
        let t = self.iteration + 1;
        Plan {
            iteration: t,
            task: task_at(t, &self.config, self.scope),
            similarity: similarity_due(t, &self.config, self.scope),
        }
    }

    /// Norms of every group's gradient, then one clipped Adam step on `groups`.
    fn apply(&mut self, groups: &[&str], grads: &GradStore, lr: f64) -> Result<(BTreeMap<String, f64>, f64)> {
        let mut norms = BTreeMap::new();
        for g in GROUPS {
            norms.insert(g.to_string(), grad_norm([self.model.store(g)], grads)?);
        }
        let total = groups.iter().map(|g| norms[*g] * norms[*g]).sum::<f64>().sqrt();
        let scale = clip_scale(total, self.config.clip());
        for g in groups {
            let adam = self.optimizers.get_mut(*g).expect("every group has an optimizer");
            adam.step(self.model.store(g), grads, lr, scale)?;
        }
        Ok((norms, scale))
    }

    /// Latent contradiction update of both encoders and the similarity module.
    pub fn similarity_update(&mut self, batch: &Batch, lr: f64) -> Result<(UpdateEvent, f64)> {
        let mode = self.bn_mode();
        let ps = self.model.sod_encoder.forward(&batch.images, mode)?;
        let pc = self.model.cod_encoder.forward(&batch.images, mode)?;
        let codes_s = self.model.similarity.embed(&ps)?;
        let codes_c = self.model.similarity.embed(&pc)?;
        let latent = latent_loss(&codes_s, &codes_c)?;
        if latent.degenerate {
            log::warn!("degenerate latent code at iteration {}", self.iteration + 1);
        }
        let cos = scalar(&latent.value)?;
        let objective = (latent.value * self.config.latent_weight)?;
        let grads = objective.backward()?;
        let updated = ["alpha_s", "alpha_c", "theta"];
        let (grad_norms, clip) = self.apply(&updated, &grads, lr)?;
        let event = UpdateEvent {
            kind: UpdateKind::Similarity,
            task: None,
            loss: cos * self.config.latent_weight,
            grad_norms,
            updated: updated.map(String::from).to_vec(),
            clip_scale: clip,
        };
        Ok((event, cos))
    }

    /// Structure (plus adversarial) update of one encoder and the decoder.
    pub fn generator_update(&mut self, task: Task, batch: &Batch, lr: f64) -> Result<GeneratorOutput> {
        let y = batch
            .masks
            .as_ref()
            .ok_or_else(|| Error::Schedule(format!("{task} batch has no masks")))?;
        let mode = self.bn_mode();
        let pyramid = self.model.encoder(task).forward(&batch.images, mode)?;
        let pair = self.model.decoder.forward(&pyramid, mode)?;
        let structure = task_structure_loss(&pair, y)?;
        let probs = sigmoid(&pair.refined_logits)?;
        let lambda = match task {
            Task::Sod => self.config.lambda1,
            Task::Cod => self.config.lambda2,
        };
        let (objective, adversarial) = if self.config.disable_adversarial {
            (structure.clone(), None)
        } else {
            let conf = self.model.discriminator.forward(&probs, Mode::TrainFrozenStats)?;
            let adv = generator_adv_loss(&conf)?;
            let value = scalar(&adv)?;
            ((&structure + (adv * lambda)?)?, Some(value))
        };
        let loss = scalar(&objective)?;
        let grads = objective.backward()?;
        let updated = [encoder_group(task), "beta"];
        let (grad_norms, clip) = self.apply(&updated, &grads, lr)?;
        Ok(GeneratorOutput {
            event: UpdateEvent {
                kind: UpdateKind::Generator,
                task: Some(task),
                loss,
                grad_norms,
                updated: updated.map(String::from).to_vec(),
                clip_scale: clip,
            },
            structure: scalar(&structure)?,
            adversarial,
            probs: probs.detach(),
        })
    }

    /// Discriminator update on detached predictions versus ground truth.
    pub fn discriminator_update(&mut self, task: Task, probs: &Tensor, gt: &Tensor, lr: f64) -> Result<UpdateEvent> {
        let disc = &self.model.discriminator;
        let conf_pred = disc.forward(&probs.detach(), Mode::Train)?;
        let conf_gt = disc.forward(gt, Mode::Train)?;
        let objective = discriminator_loss(&conf_pred, &conf_gt)?;
        let loss = scalar(&objective)?;
        let grads = objective.backward()?;
        let (grad_norms, clip) = self.apply(&["gamma"], &grads, lr)?;
        Ok(UpdateEvent {
            kind: UpdateKind::Discriminator,
            task: Some(task),
            loss,
            grad_norms,
            updated: vec!["gamma".into()],
            clip_scale: clip,
        })
    }

    /// Runs every sub-step scheduled for the next iteration.
    pub fn train_step(&mut self, batches: &StepBatches) -> Result<StepLog> {
        let plan = self.plan();
        let lr = lr_at(self.iteration, &self.config);
        let mut events = Vec::new();
        let mut l_latent = None;
        if plan.similarity {
            let batch = batches
                .connection
                .ok_or_else(|| Error::Schedule(format!("iteration {} needs a connection batch", plan.iteration)))?;
            let (event, cos) = self.similarity_update(batch, lr)?;
            events.push(event);
            l_latent = Some(cos);
        }
        let batch = match plan.task {
            Task::Sod => batches.sod,
            Task::Cod => batches.cod,
        }
        .ok_or_else(|| Error::Schedule(format!("iteration {} needs a {} batch", plan.iteration, plan.task)))?;
        let gen = self.generator_update(plan.task, batch, lr)?;
        events.push(gen.event);
        let mut l_dis = None;
        if !self.config.disable_adversarial {
            let gt = batch.masks.as_ref().expect("checked by the generator update");
            let event = self.discriminator_update(plan.task, &gen.probs, gt, lr)?;
            l_dis = Some(event.loss);
            events.push(event);
        }
        self.iteration += 1;
        Ok(StepLog {
            iteration: plan.iteration,
            task: plan.task,
            lr,
            l_str: gen.structure,
            l_adv: gen.adversarial,
            l_dis,
            l_latent,
            events,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for g in GROUPS {
            for (name, t) in self.model.store(g).tensors() {
                tensors.insert(
                    format!("{g}.{name}"),
                    HostTensor {
                        shape: t.dims().to_vec(),
                        data: crate::nn::ops::host(&t)?,
                    },
                );
            }
            for (name, m) in &self.optimizers[g].moments {
                let shape = self
                    .model
                    .store(g)
                    .param(name)
                    .map(|v| v.dims().to_vec())
                    .unwrap_or_else(|| vec![m.first.len()]);
                for (kind, data) in [("m", &m.first), ("v", &m.second)] {
                    tensors.insert(
                        format!("adam.{g}.{kind}.{name}"),
                        HostTensor {
                            shape: shape.clone(),
                            data: data.clone(),
                        },
                    );
                }
            }
        }
        let meta = Metadata {
            iteration: self.iteration,
            scope: self.scope,
            config: self.config.clone(),
            positions: self.positions.clone(),
            adam_steps: self.optimizers.iter().map(|(k, a)| (k.clone(), a.steps)).collect(),
        };
        checkpoint::save(path, &tensors, &serde_json::to_string(&meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut tensors, meta) = checkpoint::load(path)?;
        let meta: Metadata = serde_json::from_str(&meta).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("bad metadata: {e}"),
        })?;
        let model = Model::skeleton(&meta.config)?;
        let mut optimizers = BTreeMap::new();
        for g in GROUPS {
            let prefix = format!("{g}.");
            let adam_prefix = format!("adam.{g}.");
            let mut values = HashMap::new();
            let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
            let keys: Vec<String> = tensors
                .keys()
                .filter(|k| k.starts_with(&prefix) || k.starts_with(&adam_prefix))
                .cloned()
                .collect();
            for key in keys {
                let t = tensors.remove(&key).expect("key listed");
                if let Some(rest) = key.strip_prefix(&adam_prefix) {
                    let (kind, name) = rest.split_once('.').ok_or_else(|| Error::Checkpoint {
                        path: path.to_path_buf(),
                        message: format!("malformed optimizer entry {key}"),
                    })?;
                    let m = moments.entry(name.to_string()).or_default();
                    match kind {
                        "m" => m.first = t.data,
                        _ => m.second = t.data,
                    }
                } else {
                    let name = key[prefix.len()..].to_string();
                    values.insert(name, Tensor::from_vec(t.data, t.shape, &Device::Cpu)?);
                }
            }
            model.store(g).load_from(&values, "", path)?;
            let mut adam = Adam::new(meta.config.adam());
            adam.steps = meta.adam_steps.get(g).copied().unwrap_or(0);
            adam.moments = moments;
            optimizers.insert(g.to_string(), adam);
        }
        Ok(Self {
            config: meta.config,
            model,
            optimizers,
            iteration: meta.iteration,
            scope: meta.scope,
            positions: meta.positions,
        })
    }
}

impl SaliencyModel for Model {
    fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        self.predict_probs(images, Task::Sod)
    }
}

/// One row of the loss history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: u64,
    pub task: Task,
    #[serde(rename = "L_str")]
    pub l_str: f64,
    #[serde(rename = "L_adv")]
    pub l_adv: Option<f64>,
    #[serde(rename = "L_dis")]
    pub l_dis: Option<f64>,
    #[serde(rename = "L_latent")]
    pub l_latent: Option<f64>,
    pub lr: f64,
}

impl From<&StepLog> for HistoryRow {
    fn from(log: &StepLog) -> Self {
        Self {
            iter: log.iteration,
            task: log.task,
            l_str: log.l_str,
            l_adv: log.l_adv,
            l_dis: log.l_dis,
            l_latent: log.l_latent,
            lr: log.lr,
        }
    }
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub struct Manifests {
    pub sod: DatasetManifest,
    pub cod: DatasetManifest,
    pub connection: Option<DatasetManifest>,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub pretrained: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub struct RunResult {
    pub name: String,
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    pub out_dir: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const ROLLING_CHECKPOINT: &str = "latest.safetensors";
pub const HISTORY_FILE: &str = "history.csv";

/// Trains to `config.max_iters`: one joint run, or separate SOD and COD runs.
pub fn fit(manifests: &Manifests, config: &TrainConfig, options: &FitOptions) -> Result<Vec<RunResult>> {
    config.validate()?;
    if let Some(resume) = &options.resume {
        let mut state = TrainState::load(resume)?;
        if state.config.max_iters != config.max_iters {
            log::info!(
                "extending run from {} to {} iterations",
                state.config.max_iters,
                config.max_iters
            );
        }
        state.config.max_iters = config.max_iters;
        let history_path = options.out_dir.join(HISTORY_FILE);
        let mut history = if history_path.exists() {
            read_history(&history_path)?
        } else {
            Vec::new()
        };
        history.retain(|r| r.iter <= state.iteration);
        let name = scope_name(state.scope).to_string();
        return Ok(vec![run(state, history, manifests, &options.out_dir, name)?]);
    }
    let pretrained = options.pretrained.as_deref();
    let scopes: Vec<Scope> = if config.separate_tasks {
        vec![Scope::SodOnly, Scope::CodOnly]
    } else {
        vec![Scope::Joint]
    };
    let mut results = Vec::new();
    for scope in scopes {
        let name = scope_name(scope).to_string();
        let dir = if config.separate_tasks {
            options.out_dir.join(&name)
        } else {
            options.out_dir.clone()
        };
        let state = TrainState::new(config.clone(), scope, pretrained)?;
        results.push(run(state, Vec::new(), manifests, &dir, name)?);
    }
    Ok(results)
}

fn scope_name(scope: Scope) -> &'static str {
    match scope {
        Scope::Joint => "joint",
        Scope::SodOnly => "sod",
        Scope::CodOnly => "cod",
    }
}

fn loader(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    stream: u64,
    state: &TrainState,
    name: &str,
) -> Result<DataLoader> {
    let mut l = DataLoader::new(manifest.clone(), config.loader(), config.seed.wrapping_add(stream))?;
    if let Some(pos) = state.positions.get(name) {
        l.seek(*pos)?;
    }
    Ok(l)
}

fn run(
    mut state: TrainState,
    mut history: Vec<HistoryRow>,
    manifests: &Manifests,
    out_dir: &Path,
    name: String,
) -> Result<RunResult> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config = state.config.clone();
    let mut sod = loader(&manifests.sod, &config, 0, &state, "sod")?;
    let mut cod = loader(&manifests.cod, &config, 1, &state, "cod")?;
    let needs_connection = state.scope == Scope::Joint && !config.disable_similarity;
    let mut connection = match (&manifests.connection, needs_connection) {
        (Some(m), true) => Some(loader(m, &config, 2, &state, "connection")?),
        (None, true) if config.similarity_interval <= config.max_iters => {
            return Err(Error::argument("similarity training needs a connection manifest"))
        }
        _ => None,
    };
    let history_path = out_dir.join(HISTORY_FILE);
    while state.iteration < config.max_iters {
        let plan = state.plan();
        let task_batch = match plan.task {
            Task::Sod => sod.next_batch()?,
            Task::Cod => cod.next_batch()?,
        };
        let conn_batch = match (&mut connection, plan.similarity) {
            (Some(l), true) => Some(l.next_batch()?),
            _ => None,
        };
        let batches = StepBatches {
            sod: (plan.task == Task::Sod).then_some(&task_batch),
            cod: (plan.task == Task::Cod).then_some(&task_batch),
            connection: conn_batch.as_ref(),
        };
        let log = state.train_step(&batches)?;
        log::debug!("{name} iter {} {} L_str {:.4}", log.iteration, log.task, log.l_str);
        if log.iteration % 50 == 0 {
            log::info!(
                "{name} iter {}/{} L_str {:.4}",
                log.iteration,
                config.max_iters,
                log.l_str
            );
        }
        history.push(HistoryRow::from(&log));
        if config.checkpoint_interval > 0 && state.iteration % config.checkpoint_interval == 0 {
            record_positions(&mut state, &sod, &cod, connection.as_ref());
            state.save(&out_dir.join(ROLLING_CHECKPOINT))?;
            write_history(&history_path, &history)?;
        }
    }
    record_positions(&mut state, &sod, &cod, connection.as_ref());
    state.save(&out_dir.join(FINAL_CHECKPOINT))?;
    write_history(&history_path, &history)?;
    Ok(RunResult {
        name,
        state,
        history,
        out_dir: out_dir.to_path_buf(),
    })
}

fn record_positions(state: &mut TrainState, sod: &DataLoader, cod: &DataLoader, connection: Option<&DataLoader>) {
    state.positions.insert("sod".into(), sod.position());
    state.positions.insert("cod".into(), cod.position());
    if let Some(c) = connection {
        state.positions.insert("connection".into(), c.position());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_follows_three_to_one() {
        let c = TrainConfig::default();
        let tasks: Vec<Task> = (1..=8).map(|t| task_at(t, &c, Scope::Joint)).collect();
        use Task::*;
        assert_eq!(tasks, vec![Sod, Sod, Sod, Cod, Sod, Sod, Sod, Cod]);
        for start in 1..20 {
            let cods = (start..start + 4)
                .filter(|t| task_at(*t, &c, Scope::Joint) == Cod)
                .count();
            assert_eq!(cods, 1);
        }
        assert!(similarity_due(400, &c, Scope::Joint));
        assert!(!similarity_due(399, &c, Scope::Joint));
        assert!(!similarity_due(400, &c, Scope::SodOnly));
    }

    #[test]
    fn learning_rate_steps_down() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 2.5e-5);
        assert!((lr_at(24000, &c) - 2.5e-6).abs() < 1e-20);
        assert_eq!(lr_at(35999, &c), lr_at(24000, &c));
        assert_eq!(lr_at(23999, &c), 2.5e-5);
    }

    #[test]
    fn defaults_match_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.max_iters, c.batch_size, c.image_size), (36000, 15, 352));
        assert_eq!((c.similarity_interval, c.latent_dim, c.mining_count), (400, 700, 400));
        assert_eq!((c.sod_steps, c.cod_steps), (3, 1));
        c.validate().unwrap();
        let bad = TrainConfig {
            image_size: 100,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "image_size"));
    }
}
