//! Round-based federated training over simulated clients.
//!
//! Every client holds a private head and optimizer. Only adapter stacks and
//! sample counts travel to the server, as [`Upload`]s.

use std::path::PathBuf;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    dirichlet_partition, gen_synthetic, load_tabular, Dataset, Labels, PartitionSpec,
    SyntheticSpec, TabularSchema, TaskKind,
};
use crate::error::{Error, Result};
use crate::model::{
    adamw_step, forward, loss_and_backward, loss_and_logit_grad, lr_at, AdapterStack, Backbone,
    ClassifierHead, ModelDims, Nonlinearity, OptimizerState, ParamSet,
};
use crate::numerics::{Matrix, Rng};
use crate::ot::ActivationMode;
use crate::pia::{client_pia, fedavg, merge, server_pia, CostMode, FusionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedpia,
    FedavgAdapters,
    LocalOnly,
    FullFinetune,
    ClassifierOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedpia => "fedpia",
            Method::FedavgAdapters => "fedavg_adapters",
            Method::LocalOnly => "local_only",
            Method::FullFinetune => "full_finetune",
            Method::ClassifierOnly => "classifier_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One single-label task split by Dirichlet label skew.
    #[default]
    LabelSkew,
    /// Even-indexed clients get a single-label task, odd-indexed clients a
    /// multi-label one.
    TaskHeterogeneous,
    /// Rows loaded from a CSV file, then split like `label_skew`.
    Tabular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// Every client starts from the server's initial stack.
    #[default]
    Shared,
    /// Every client draws its own stack, so neuron orders disagree from
    /// the start.
    PerClient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenario: Scenario,
    pub input_dim: usize,
    pub num_classes: usize,
    pub samples_per_client: usize,
    pub margin: f64,
    pub clusters_per_class: usize,
    pub concentration: f64,
    /// Give each client a random subset of the classes.
    pub class_masks: bool,
    /// Smallest class subset when masks are on.
    pub min_classes: usize,
    /// Rotate and rescale each client's features.
    pub feature_shift: bool,
    pub test_fraction: f64,
    pub min_client_samples: usize,
    pub tabular_path: Option<PathBuf>,
    pub tabular_schema: Option<TabularSchema>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::LabelSkew,
            input_dim: 16,
            num_classes: 6,
            samples_per_client: 200,
            margin: 2.0,
            clusters_per_class: 1,
            concentration: 0.5,
            class_masks: true,
            min_classes: 2,
            feature_shift: false,
            test_fraction: 0.25,
            min_client_samples: 8,
            tabular_path: None,
            tabular_schema: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub depth: usize,
    pub nonlinearity: Nonlinearity,
    pub adapter_init: AdapterInit,
    pub adapter_init_std: f64,
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            bottleneck: 8,
            depth: 2,
            nonlinearity: Nonlinearity::Relu,
            adapter_init: AdapterInit::Shared,
            adapter_init_std: 0.1,
            head_init_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub server_pia_on: bool,
    pub client_pia_on: bool,
    /// Fraction of each client's training split that is kept.
    pub dataset_fraction: f64,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Fedpia, Method::FedavgAdapters],
            clients: 5,
            rounds: 30,
            local_steps: 100,
            batch_size: 16,
            base_lr: 1e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            seeds: vec![0],
            server_pia_on: true,
            client_pia_on: true,
            dataset_fraction: 1.0,
            fusion: FusionConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.data.input_dim,
            hidden: self.model.hidden,
            bottleneck: self.model.bottleneck,
            depth: self.model.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(config_err("methods must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if self.clients == 0 {
            return Err(config_err("clients must be at least 1"));
        }
        if self.rounds == 0 || self.local_steps == 0 || self.batch_size == 0 {
            return Err(config_err("rounds, local_steps and batch_size must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(config_err(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(config_err("warmup_frac must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err("weight_decay must be >= 0"));
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return Err(config_err("dataset_fraction must lie in (0, 1]"));
        }
        let d = &self.data;
        if !(d.concentration > 0.0 && d.concentration.is_finite()) {
            return Err(config_err("concentration must be positive"));
        }
        if !(0.0..1.0).contains(&d.test_fraction) || d.test_fraction == 0.0 {
            return Err(config_err("test_fraction must lie in (0, 1)"));
        }
        if d.scenario != Scenario::Tabular && d.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        if d.class_masks && (d.min_classes == 0 || d.min_classes > d.num_classes) {
            return Err(config_err("min_classes must lie in [1, num_classes]"));
        }
        if d.scenario == Scenario::Tabular && (d.tabular_path.is_none() || d.tabular_schema.is_none()) {
            return Err(config_err("tabular scenario needs tabular_path and tabular_schema"));
        }
        if !(self.model.adapter_init_std >= 0.0 && self.model.head_init_std >= 0.0) {
            return Err(config_err("init std must be >= 0"));
        }
        self.fusion.validate()?;
        self.dims().validate()
    }
}

/// One client's share of the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Random class subsets, at least `min_classes` each, covering every class.
fn draw_class_masks(rng: &mut Rng, clients: usize, classes: usize, min_classes: usize) -> Vec<Vec<usize>> {
    let mut masks: Vec<Vec<usize>> = (0..clients)
        .map(|_| {
            let size = min_classes + rng.below(classes - min_classes + 1);
            let mut all: Vec<usize> = (0..classes).collect();
            rng.shuffle(&mut all);
            all.truncate(size);
            all
        })
        .collect();
    for c in 0..classes {
        if !masks.iter().any(|m| m.contains(&c)) {
            let k = rng.below(clients);
            masks[k].push(c);
        }
    }
    for m in &mut masks {
        m.sort_unstable();
    }
    masks
}

fn split_group(
    ds: &Dataset,
    clients: usize,
    cfg: &DataConfig,
    rng: &mut Rng,
) -> Result<Vec<Dataset>> {
    let mut spec = PartitionSpec::new(clients, cfg.concentration, rng.next_u64());
    spec.min_samples = cfg.min_client_samples;
    if cfg.class_masks {
        spec.class_masks = Some(draw_class_masks(rng, clients, ds.num_classes, cfg.min_classes));
    }
    if cfg.feature_shift {
        spec.feature_shift_seeds = Some((0..clients).map(|_| rng.next_u64()).collect());
    }
    dirichlet_partition(ds, &spec)
}

/// Client datasets for one seed, already split into train and test.
pub fn build_federation(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientData>> {
    let d = &cfg.data;
    let k = cfg.clients;
    let mut rng = Rng::new(seed).split("data");
    let synthetic = |kind, n, rng: &mut Rng| {
        gen_synthetic(&SyntheticSpec {
            seed: rng.next_u64(),
            n_samples: n,
            dim: d.input_dim,
            num_classes: d.num_classes,
            kind,
            margin: d.margin,
            clusters_per_class: d.clusters_per_class,
        })
    };
    let parts = match d.scenario {
        Scenario::LabelSkew => {
            let ds = synthetic(TaskKind::Single, k * d.samples_per_client, &mut rng)?;
            split_group(&ds, k, d, &mut rng)?
        }
        Scenario::TaskHeterogeneous => {
            let n_single = k.div_ceil(2);
            let n_multi = k / 2;
            let single = synthetic(TaskKind::Single, n_single * d.samples_per_client, &mut rng)?;
            let mut single = split_group(&single, n_single, d, &mut rng)?.into_iter();
            let mut multi = if n_multi > 0 {
                let ds = synthetic(TaskKind::Multi, n_multi * d.samples_per_client, &mut rng)?;
                split_group(&ds, n_multi, d, &mut rng)?.into_iter()
            } else {
                Vec::new().into_iter()
            };
            (0..k)
                .map(|i| if i % 2 == 0 { single.next() } else { multi.next() })
                .map(|p| p.expect("group sizes add up to the client count"))
                .collect()
        }
        Scenario::Tabular => {
            let path = d.tabular_path.as_ref().expect("validated");
            let schema = d.tabular_schema.as_ref().expect("validated");
            let ds = load_tabular(path, schema)?;
            if ds.dim() != d.input_dim {
                return Err(config_err(format!(
                    "input_dim is {} but the table has {} feature columns",
                    d.input_dim,
                    ds.dim()
                )));
            }
            split_group(&ds, k, d, &mut rng)?
        }
    };
    parts
        .into_iter()
        .enumerate()
        .map(|(i, part)| {
            let (train, test) = part.train_test_split(&mut rng.split(&format!("split{i}")), d.test_fraction);
            if train.is_empty() || test.is_empty() {
                return Err(Error::data(format!("client {i} has too few samples to split")));
            }
            Ok(ClientData {
                train: train.truncate_fraction(cfg.dataset_fraction),
                test,
            })
        })
        .collect()
}

/// Everything a client keeps between rounds. Only `adapters` is ever read
/// by the server, and only through an [`Upload`].
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub backbone: Backbone,
    pub adapters: AdapterStack,
    pub head: ClassifierHead,
    pub optimizer: OptimizerState,
    pub rng: Rng,
}

impl ClientState {
    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn evaluate(&self, split: &Dataset) -> Result<EvalScores> {
        evaluate(&self.backbone, &self.adapters, &self.head, split)
    }

    /// Mean loss over the whole training split.
    pub fn train_loss(&self) -> Result<f64> {
        dataset_loss(&self.backbone, &self.adapters, &self.head, &self.train)
    }
}

/// What a client sends to the server at the end of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub client: usize,
    pub adapters: AdapterStack,
    pub num_samples: usize,
}

/// Which tensors local training updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    HeadOnly,
    AdaptersAndHead,
    Everything,
}

/// Where a call to [`local_train`] sits in the experiment's step schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainContext {
    pub round: usize,
    pub step_offset: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub scope: TrainScope,
}

/// `steps` AdamW updates on minibatches drawn with replacement from the
/// client's round substream. Returns the loss of each minibatch before its
/// update.
pub fn local_train(client: &mut ClientState, steps: usize, ctx: &TrainContext) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Usage("local_train needs at least one step".into()));
    }
    let n = client.train.len();
    if n == 0 {
        return Err(Error::data(format!("client {} has no training data", client.id)));
    }
    client.backbone.frozen = ctx.scope != TrainScope::Everything;
    let mut rng = client.rng.split(&format!("round{}/batches", ctx.round));
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let idx: Vec<usize> = (0..ctx.batch_size).map(|_| rng.below(n)).collect();
        let x = client.train.features.select_rows(&idx);
        let y = client.train.labels.select(&idx);
        let (logits, cache) = forward(&client.backbone, &client.adapters, &client.head, &x)?;
        let (loss, grads) = loss_and_backward(
            &logits,
            &y,
            &cache,
            &client.backbone,
            &client.adapters,
            &client.head,
        )?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "client {} loss diverged at round {} step {s}",
                client.id, ctx.round
            )));
        }
        losses.push(loss);
        let lr = lr_at(ctx.step_offset + s, ctx.total_steps, ctx.base_lr, ctx.warmup_frac);
        let mut params = client.head.tensors_mut();
        let mut g = grads.head.tensors();
        if ctx.scope != TrainScope::HeadOnly {
            params.extend(client.adapters.tensors_mut());
            g.extend(grads.adapters.tensors());
        }
        let backbone_grads;
        if ctx.scope == TrainScope::Everything {
            backbone_grads = grads.backbone.expect("backbone is trainable");
            params.extend(client.backbone.tensors_mut());
            g.extend(backbone_grads.tensors());
        }
        adamw_step(&mut client.optimizer, params, g, lr)?;
    }
    Ok(losses)
}

pub fn dataset_loss(
    backbone: &Backbone,
    adapters: &AdapterStack,
    head: &ClassifierHead,
    ds: &Dataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::data("loss of an empty dataset"));
    }
    let (logits, _) = forward(backbone, adapters, head, &ds.features)?;
    Ok(loss_and_logit_grad(&logits, &ds.labels)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub accuracy: f64,
    /// Mean of per-class F1 over classes that occur in the targets or the
    /// predictions.
    pub macro_f1: f64,
}

fn macro_f1(counts: &[(usize, usize, usize)]) -> f64 {
    let f1: Vec<f64> = counts
        .iter()
        .filter(|&&(tp, fp, fne)| tp + fp + fne > 0)
        .map(|&(tp, fp, fne)| 2.0 * tp as f64 / (2 * tp + fp + fne) as f64)
        .collect();
    if f1.is_empty() {
        1.0
    } else {
        f1.iter().sum::<f64>() / f1.len() as f64
    }
}

/// Single-label: argmax accuracy. Multi-label: a class is predicted when
/// its sigmoid reaches 0.5, and accuracy is the fraction of correct
/// (sample, class) decisions.
pub fn scores_from_logits(logits: &Matrix, labels: &Labels) -> Result<EvalScores> {
    let (n, c) = logits.shape();
    if n == 0 {
        return Err(Error::data("cannot evaluate an empty split"));
    }
    if labels.len() != n {
        return Err(Error::data(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); c];
    let correct = match labels {
        Labels::Single(y) => {
            let mut correct = 0;
            for (r, &truth) in y.iter().enumerate() {
                if truth >= c {
                    return Err(Error::data(format!("label {truth} out of range for {c} classes")));
                }
                let row = logits.row(r);
                let pred = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                if pred == truth {
                    correct += 1;
                    counts[truth].0 += 1;
                } else {
                    counts[pred].1 += 1;
                    counts[truth].2 += 1;
                }
            }
            correct as f64 / n as f64
        }
        Labels::Multi(t) => {
            if t.shape() != (n, c) {
                return Err(Error::shape("multi-hot targets do not match logits"));
            }
            let mut correct = 0;
            for r in 0..n {
                for j in 0..c {
                    let pred = logits[(r, j)] >= 0.0;
                    let truth = t[(r, j)] > 0.5;
                    match (pred, truth) {
                        (true, true) => counts[j].0 += 1,
                        (true, false) => counts[j].1 += 1,
                        (false, true) => counts[j].2 += 1,
                        (false, false) => {}
                    }
                    correct += usize::from(pred == truth);
                }
            }
            correct as f64 / (n * c) as f64
        }
    };
    Ok(EvalScores {
        accuracy: correct,
        macro_f1: macro_f1(&counts),
    })
}

pub fn evaluate(
    backbone: &Backbone,
    adapters: &AdapterStack,
    head: &ClassifierHead,
    split: &Dataset,
) -> Result<EvalScores> {
    if split.is_empty() {
        return Err(Error::data("cannot evaluate an empty split"));
    }
    let (logits, _) = forward(backbone, adapters, head, &split.features)?;
    scores_from_logits(&logits, &split.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub num_classes: usize,
    pub train_size: usize,
    /// Training-split loss after the round's aggregation step, before any
    /// local update.
    pub loss_at_round_start: f64,
    /// Training-split loss after local training.
    pub loss_at_round_end: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<ClientRoundMetrics>,
    pub mean_loss_at_round_start: f64,
    pub mean_loss_at_round_end: f64,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    /// Not serialized, so metric files stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RoundMetrics {
    pub fn from_clients(round: usize, clients: Vec<ClientRoundMetrics>, wall_time_secs: f64) -> Self {
        let mean = |f: fn(&ClientRoundMetrics) -> f64| {
            clients.iter().map(f).sum::<f64>() / clients.len().max(1) as f64
        };
        Self {
            round,
            mean_loss_at_round_start: mean(|c| c.loss_at_round_start),
            mean_loss_at_round_end: mean(|c| c.loss_at_round_end),
            mean_accuracy: mean(|c| c.accuracy),
            mean_macro_f1: mean(|c| c.macro_f1),
            clients,
            wall_time_secs,
        }
    }
}

/// Mean over rounds `r ≥ 2` and clients of
/// `loss_at_round_start(r) − loss_at_round_end(r−1)`. Zero with fewer than
/// two rounds.
pub fn spike_score(metrics: &[RoundMetrics]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in metrics.windows(2) {
        for (prev, cur) in pair[0].clients.iter().zip(&pair[1].clients) {
            total += cur.loss_at_round_start - prev.loss_at_round_end;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Server-side aggregation. Sees nothing but the uploads.
pub fn aggregate(
    method: Method,
    uploads: &[Upload],
    cfg: &ExperimentConfig,
) -> Result<Option<AdapterStack>> {
    let stacks: Vec<AdapterStack> = uploads.iter().map(|u| u.adapters.clone()).collect();
    let sizes: Vec<usize> = uploads.iter().map(|u| u.num_samples).collect();
    match method {
        Method::Fedpia if cfg.server_pia_on => server_pia(&stacks, &sizes, &cfg.fusion).map(Some),
        Method::Fedpia | Method::FedavgAdapters | Method::FullFinetune => {
            fedavg(&stacks, &sizes).map(Some)
        }
        Method::LocalOnly | Method::ClassifierOnly => Ok(None),
    }
}

fn average_backbones(backbones: &[Backbone], sizes: &[usize]) -> Result<Backbone> {
    let total: usize = sizes.iter().sum();
    let mut out = backbones[0].zeros_like();
    for (b, &n) in backbones.iter().zip(sizes) {
        let w = n as f64 / total as f64;
        for (dst, src) in out.tensors_mut().into_iter().zip(b.tensors()) {
            if dst.len() != src.len() {
                return Err(Error::shape("backbone shapes differ between clients"));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// State of one experiment run: one method, one seed.
#[derive(Clone, Debug)]
pub struct Federation {
    pub cfg: ExperimentConfig,
    pub method: Method,
    pub seed: u64,
    /// Backbone shared by all clients. Changes only under full fine-tuning.
    pub backbone: Backbone,
    pub global: AdapterStack,
    pub clients: Vec<ClientState>,
    pub round: usize,
}

impl Federation {
    pub fn new(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let data = build_federation(cfg, seed)?;
        Self::with_data(cfg, method, seed, data)
    }

    /// Builds the federation over caller-provided client data.
    pub fn with_data(
        cfg: &ExperimentConfig,
        method: Method,
        seed: u64,
        data: Vec<ClientData>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::data("no clients"));
        }
        let dims = cfg.dims();
        let root = Rng::new(seed);
        let backbone = Backbone::init(&mut root.split("backbone"), &dims)?;
        let init_stack = |label: &str| -> Result<AdapterStack> {
            let mut s = AdapterStack::init(&mut root.split(label), &dims, cfg.model.adapter_init_std)?;
            for l in &mut s.layers {
                l.nonlinearity = cfg.model.nonlinearity;
            }
            Ok(s)
        };
        let global = init_stack("adapters/global")?;
        let clients = data
            .into_iter()
            .enumerate()
            .map(|(id, d)| {
                if d.train.dim() != dims.input_dim {
                    return Err(Error::shape(format!(
                        "client {id} has {} features, model expects {}",
                        d.train.dim(),
                        dims.input_dim
                    )));
                }
                let adapters = match cfg.model.adapter_init {
                    AdapterInit::Shared => global.clone(),
                    AdapterInit::PerClient => init_stack(&format!("adapters/client{id}"))?,
                };
                let head = ClassifierHead::init(
                    &mut root.split(&format!("head/client{id}")),
                    dims.hidden,
                    d.train.num_classes,
                    cfg.model.head_init_std,
                )?;
                Ok(ClientState {
                    id,
                    train: d.train,
                    test: d.test,
                    backbone: backbone.clone(),
                    adapters,
                    head,
                    optimizer: OptimizerState::new(cfg.weight_decay),
                    rng: root.split(&format!("client{id}")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            method,
            seed,
            backbone,
            global,
            clients,
            round: 0,
        })
    }

    fn scope(&self) -> TrainScope {
        match self.method {
            Method::ClassifierOnly => TrainScope::HeadOnly,
            Method::FullFinetune => TrainScope::Everything,
            _ => TrainScope::AdaptersAndHead,
        }
    }

    /// One communication round: client-side initialization, local
    /// training and evaluation in parallel, then aggregation in client
    /// order.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let started = Instant::now();
        self.round += 1;
        let round = self.round;
        let cfg = &self.cfg;
        let method = self.method;
        let ctx = TrainContext {
            round,
            step_offset: (round - 1) * cfg.local_steps,
            total_steps: cfg.rounds * cfg.local_steps,
            base_lr: cfg.base_lr,
            warmup_frac: cfg.warmup_frac,
            batch_size: cfg.batch_size,
            scope: self.scope(),
        };
        let global = &self.global;
        let backbone = &self.backbone;

        let results = self
            .clients
            .par_iter_mut()
            .map(|client| -> Result<(ClientRoundMetrics, Upload)> {
                // There is no aggregate before the first upload: round 1
                // starts from each client's initial stack.
                let receive = if round == 1 { None } else { Some(method) };
                match receive {
                    None => {}
                    Some(Method::Fedpia) => {
                        client.adapters = if cfg.client_pia_on {
                            let probe = probe_batch(client, round, &cfg.fusion);
                            client_pia(&client.backbone, global, &client.adapters, &probe, &cfg.fusion)?
                        } else {
                            merge(&client.adapters, global, cfg.fusion.lambda_merge)?
                        };
                    }
                    Some(Method::FedavgAdapters) => client.adapters = global.clone(),
                    Some(Method::FullFinetune) => {
                        client.adapters = global.clone();
                        client.backbone = backbone.clone();
                    }
                    Some(Method::LocalOnly | Method::ClassifierOnly) => {}
                }
                let loss_at_round_start = client.train_loss()?;
                local_train(client, cfg.local_steps, &ctx)?;
                let loss_at_round_end = client.train_loss()?;
                let scores = client.evaluate(&client.test)?;
                Ok((
                    ClientRoundMetrics {
                        client: client.id,
                        num_classes: client.num_classes(),
                        train_size: client.train.len(),
                        loss_at_round_start,
                        loss_at_round_end,
                        accuracy: scores.accuracy,
                        macro_f1: scores.macro_f1,
                    },
                    Upload {
                        client: client.id,
                        adapters: client.adapters.clone(),
                        num_samples: client.train.len(),
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (metrics, uploads): (Vec<_>, Vec<_>) = results.into_iter().unzip();

        if let Some(g) = aggregate(method, &uploads, cfg)? {
            self.global = g;
        }
        if method == Method::FullFinetune {
            let backbones: Vec<Backbone> = self.clients.iter().map(|c| c.backbone.clone()).collect();
            let sizes: Vec<usize> = uploads.iter().map(|u| u.num_samples).collect();
            self.backbone = average_backbones(&backbones, &sizes)?;
        }
        Ok(RoundMetrics::from_clients(round, metrics, started.elapsed().as_secs_f64()))
    }
}

/// Up to `m_probe` distinct training samples, drawn from a substream of
/// their own so the training batches do not depend on whether a probe
/// was taken.
fn probe_batch(client: &ClientState, round: usize, fusion: &FusionConfig) -> Matrix {
    if fusion.client_cost_mode == CostMode::Weight {
        return Matrix::zeros(0, client.train.dim());
    }
    let mut idx: Vec<usize> = (0..client.train.len()).collect();
    client.rng.split(&format!("round{round}/probe")).shuffle(&mut idx);
    idx.truncate(fusion.m_probe);
    client.train.features.select_rows(&idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub final_mean_accuracy: f64,
    pub final_mean_macro_f1: f64,
    pub spike_score: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub rounds: Vec<RoundMetrics>,
    pub summary: RunSummary,
    pub final_global: AdapterStack,
    pub final_backbone: Backbone,
    /// Each client's adapters and head after the last round.
    pub final_clients: Vec<(AdapterStack, ClassifierHead)>,
}

/// Runs every round of one method under one seed, handing each round's
/// metrics to `on_round` as soon as they exist.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    mut on_round: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<RunOutcome> {
    let mut fed = Federation::new(cfg, method, seed)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let m = fed.run_round()?;
        on_round(&m)?;
        rounds.push(m);
    }
    let last = rounds.last().expect("at least one round");
    let summary = RunSummary {
        method,
        seed,
        rounds: rounds.len(),
        final_mean_accuracy: last.mean_accuracy,
        final_mean_macro_f1: last.mean_macro_f1,
        spike_score: spike_score(&rounds),
    };
    Ok(RunOutcome {
        summary,
        rounds,
        final_clients: fed
            .clients
            .into_iter()
            .map(|c| (c.adapters, c.head))
            .collect(),
        final_global: fed.global,
        final_backbone: fed.backbone,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<RunOutcome> {
    run_experiment_with(cfg, method, seed, |_| Ok(()))
}

/// Built-in benchmarks used by the acceptance suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    LabelSkew,
    TaskHeterogeneous,
}

/// Fixed settings of the built-in five-client, five-seed benchmarks.
pub fn benchmark_config(benchmark: Benchmark) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![0, 1, 2, 3, 4],
        base_lr: 3e-4,
        ..ExperimentConfig::default()
    };
    cfg.fusion.normalize_weights = true;
    cfg.fusion.activation_mode = ActivationMode::PerSample;
    cfg.model.adapter_init_std = 0.3;
    cfg.data.input_dim = 8;
    cfg.data.samples_per_client = 400;
    cfg.data.test_fraction = 0.5;
    cfg.data.clusters_per_class = 3;
    cfg.data.margin = 3.0;
    cfg.data.scenario = match benchmark {
        Benchmark::LabelSkew => Scenario::LabelSkew,
        Benchmark::TaskHeterogeneous => Scenario::TaskHeterogeneous,
    };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            clients: 3,
            rounds: 3,
            local_steps: 10,
            base_lr: 1e-2,
            ..ExperimentConfig::default()
        };
        cfg.data.samples_per_client = 60;
        cfg
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            seed,
            n_samples: n,
            dim: 16,
            num_classes: 2,
            kind: TaskKind::Single,
            margin: 4.0,
            clusters_per_class: 1,
        })
        .unwrap()
    }

    fn ctx(lr: f64) -> TrainContext {
        TrainContext {
            round: 1,
            step_offset: 0,
            total_steps: 50,
            base_lr: lr,
            warmup_frac: 0.0,
            batch_size: 16,
            scope: TrainScope::AdaptersAndHead,
        }
    }

    fn one_client(lr_cfg: f64) -> ClientState {
        let ds = blobs(120, 4);
        let cfg = ExperimentConfig { base_lr: lr_cfg, ..tiny() };
        let data = vec![ClientData { train: ds.clone(), test: ds }];
        Federation::with_data(&cfg, Method::LocalOnly, 9, data)
            .unwrap()
            .clients
            .remove(0)
    }

    #[test]
    fn defaults_follow_training_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.base_lr, 0.0001);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.rounds, 30);
        assert_eq!(cfg.warmup_frac, 0.1);
        assert_eq!(cfg.weight_decay, 0.01);
        assert_eq!(cfg.data.concentration, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let mut c = one_client(0.0);
        let before = (c.adapters.clone(), c.head.clone());
        let losses = local_train(&mut c, 20, &ctx(0.0)).unwrap();
        assert_eq!((c.adapters.clone(), c.head.clone()), before);
        let full = c.train_loss().unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        assert_eq!(c.train_loss().unwrap(), full);
    }

    #[test]
    fn training_reduces_loss() {
        let mut c = one_client(1e-2);
        let before = c.train_loss().unwrap();
        local_train(&mut c, 50, &ctx(1e-2)).unwrap();
        assert!(c.train_loss().unwrap() < before);
    }

    #[test]
    fn training_is_deterministic_and_leaves_backbone() {
        let mut a = one_client(1e-2);
        let mut b = one_client(1e-2);
        let backbone = a.backbone.clone();
        let la = local_train(&mut a, 30, &ctx(1e-2)).unwrap();
        let lb = local_train(&mut b, 30, &ctx(1e-2)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.backbone, backbone);
    }

    #[test]
    fn empty_partition_is_data_error() {
        let mut c = one_client(1e-2);
        c.train = c.train.subset(&[]);
        assert!(matches!(local_train(&mut c, 1, &ctx(1e-2)), Err(Error::Data(_))));
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let logits = Matrix::from_rows(&[vec![2.0, -1.0], vec![-1.0, 3.0]]).unwrap();
        let s = scores_from_logits(&logits, &Labels::Single(vec![0, 1])).unwrap();
        assert_eq!((s.accuracy, s.macro_f1), (1.0, 1.0));

        let constant = Matrix::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        let s = scores_from_logits(&constant, &Labels::Single(vec![0, 1, 0, 1])).unwrap();
        assert_eq!(s.accuracy, 0.5);
    }

    #[test]
    fn hand_computed_multilabel_f1() {
        // Class 0: tp 2, fp 1, fn 0 → 4/5. Class 1: tp 1, fp 0, fn 1 → 2/3.
        // Class 2: tp 0, fp 0, fn 1 → 0.
        let targets = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let logits = Matrix::from_rows(&[
            vec![1.0, 2.0, -1.0],
            vec![0.5, -3.0, -2.0],
            vec![-1.0, -0.1, -0.5],
            vec![0.3, -1.0, -1.0],
        ])
        .unwrap();
        let s = scores_from_logits(&logits, &Labels::Multi(targets)).unwrap();
        let expected = (0.8 + 2.0 / 3.0 + 0.0) / 3.0;
        assert!((s.macro_f1 - expected).abs() < 1e-12);
        assert!((s.accuracy - 9.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn empty_split_is_data_error() {
        let c = one_client(1e-2);
        let empty = c.test.subset(&[]);
        assert!(matches!(c.evaluate(&empty), Err(Error::Data(_))));
    }

    fn round(r: usize, pairs: &[(f64, f64)]) -> RoundMetrics {
        let clients = pairs
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| ClientRoundMetrics {
                client: i,
                num_classes: 2,
                train_size: 1,
                loss_at_round_start: s,
                loss_at_round_end: e,
                accuracy: 0.0,
                macro_f1: 0.0,
            })
            .collect();
        RoundMetrics::from_clients(r, clients, 0.0)
    }

    #[test]
    fn spike_score_arithmetic() {
        let flat = [round(1, &[(1.0, 0.5)]), round(2, &[(0.5, 0.4)]), round(3, &[(0.4, 0.3)])];
        assert_eq!(spike_score(&flat), 0.0);
        let jumps = [round(1, &[(1.0, 0.5)]), round(2, &[(0.7, 0.4)]), round(3, &[(0.8, 0.3)])];
        assert!((spike_score(&jumps) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rounds_record_every_client() {
        let cfg = tiny();
        let out = run_experiment(&cfg, Method::Fedpia, 1).unwrap();
        assert_eq!(out.rounds.len(), 3);
        for (i, m) in out.rounds.iter().enumerate() {
            assert_eq!(m.round, i + 1);
            assert_eq!(m.clients.len(), 3);
            for c in &m.clients {
                assert!(c.loss_at_round_start.is_finite() && c.loss_at_round_end.is_finite());
            }
        }
    }

    #[test]
    fn heads_keep_their_own_class_counts() {
        let mut cfg = tiny();
        cfg.data.scenario = Scenario::TaskHeterogeneous;
        let fed = Federation::new(&cfg, Method::Fedpia, 3).unwrap();
        for c in &fed.clients {
            assert_eq!(c.num_classes(), c.train.num_classes);
            assert_eq!(c.train.kind(), if c.id % 2 == 0 { TaskKind::Single } else { TaskKind::Multi });
        }
    }

    #[test]
    fn class_masks_cover_every_class() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let masks = draw_class_masks(&mut rng, 3, 8, 2);
            for c in 0..8 {
                assert!(masks.iter().any(|m| m.contains(&c)));
            }
            assert!(masks.iter().all(|m| m.len() >= 2));
        }
    }

    #[test]
    fn misspelled_key_is_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[fusion]\ngamna = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("gamna"));
    }
}
