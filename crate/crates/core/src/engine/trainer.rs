//! The training loop.
//!
//! Each iteration draws a batch, picks the class set for the active phase,
//! evaluates the phase objective, applies one AdamW step and feeds the
//! batch cosine score to the scheduler:
//!
//! | phase          | classes      | prototypes       | objective            |
//! |----------------|--------------|------------------|----------------------|
//! | alignment      | NCS sample   | untouched        | CosFace              |
//! | stabilization  | NCS sample   | batch EMA update | classifier + proto   |
//! | refinement     | all          | batch EMA update | classifier + proto   |
//!
//! A run is a pure function of its config: every random draw comes from
//! generators derived from `seed`, and the training generator is part of
//! the checkpoint.

use std::fmt;

use rand::seq::index;

use super::checkpoint::Checkpoint;
use super::config::{DataSpec, EncoderSpec, RunConfig, Split, TrainConfig, TrainMode};
use super::optimizer::{check_finite, AdamW};
use super::scheduler::{css_score, step_scheduler, Phase, SchedulerConfig, StageState};
use super::stage::{loss_alignment, loss_refinement, loss_stabilization, ClassifierBinding};
use crate::encoders::{Encoder, FeatureEncoder, MlpEncoder, VitEncoder};
use crate::error::{Error, Result};
use crate::losses::ClassifierBank;
use crate::ncs::{self, SampleSet};
use crate::prototypes::PrototypeBank;
use crate::rng::{self, DetRng};
use crate::synth::{gen_image_dataset, gen_sphere_dataset, Dataset};
use crate::tensor::{Graph, Tensor};

pub const LOG_HEADER: &str = "iteration,phase,loss,css_raw,css_smoothed,lr";

const STREAM_ENCODER: u64 = 1;
const STREAM_CLASSIFIER: u64 = 2;
const STREAM_TRAIN: u64 = 3;

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    /// Phase whose objective produced `loss`.
    pub phase: Phase,
    pub loss: f64,
    pub css_raw: f64,
    pub css_smoothed: f64,
    pub lr: f64,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.iteration, self.phase, self.loss, self.css_raw, self.css_smoothed, self.lr
        )
    }
}

/// Materializes the samples described by `spec`.
pub fn build_dataset(spec: &DataSpec, split: Split) -> Result<Dataset> {
    match spec {
        DataSpec::Sphere(s) => match split {
            Split::Train | Split::All => Ok(gen_sphere_dataset(s)?.0),
            Split::Eval => Err(Error::Config("sphere data has no eval split".into())),
        },
        DataSpec::Image(s) => {
            let data = gen_image_dataset(s)?;
            Ok(match split {
                Split::Train => data.train,
                Split::Eval => data.eval,
                Split::All => concat(data.train, data.eval)?,
            })
        }
    }
}

fn concat(a: Dataset, b: Dataset) -> Result<Dataset> {
    if b.is_empty() {
        return Ok(a);
    }
    let cols = a.input_dim();
    let mut data = a.inputs.into_data();
    data.extend_from_slice(b.inputs.data());
    let rows = data.len() / cols;
    let mut labels = a.labels;
    labels.extend(b.labels);
    let mut ids = a.ids;
    ids.extend(b.ids);
    Ok(Dataset {
        inputs: Tensor::matrix(rows, cols, data)?,
        labels,
        ids,
        classes: a.classes,
    })
}

/// A freshly initialized encoder matching `data`.
pub fn build_encoder(spec: &EncoderSpec, data: &DataSpec, init_std: f64, rng: &mut DetRng) -> Result<Encoder> {
    match (spec, data) {
        (EncoderSpec::Mlp { .. }, DataSpec::Sphere(d)) => {
            let cfg = spec.mlp_config(d.dim).expect("mlp spec");
            Ok(Encoder::Mlp(MlpEncoder::new(cfg, init_std, rng)?))
        }
        (EncoderSpec::Mlp { .. }, DataSpec::Image(d)) => {
            let cfg = spec.mlp_config(d.width * d.width * d.channels).expect("mlp spec");
            Ok(Encoder::Mlp(MlpEncoder::new(cfg, init_std, rng)?))
        }
        (EncoderSpec::Vit { .. }, DataSpec::Image(d)) => {
            let cfg = spec.vit_config(d.width, d.channels).expect("vit spec");
            Ok(Encoder::Vit(VitEncoder::new(cfg, init_std, rng)?))
        }
        (EncoderSpec::Vit { .. }, DataSpec::Sphere(_)) => Err(Error::Config("the vit encoder needs image data".into())),
    }
}

/// Owns all mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    encoder: Encoder,
    classifier: ClassifierBank,
    prototypes: PrototypeBank,
    optimizer: AdamW,
    stage: StageState,
    rng: DetRng,
    data: Dataset,
    last_set: Option<SampleSet>,
}

struct StepOutcome {
    row: LogRow,
    stage: StageState,
    prototypes: PrototypeBank,
    set: SampleSet,
    encoder_grads: Vec<Tensor>,
    classifier_grad: Tensor,
}

impl Trainer {
    /// Starts a run on `data` with a caller-supplied encoder. The classifier
    /// and the training generator are derived from `config.train.seed`.
    pub fn new(config: RunConfig, data: Dataset, encoder: Encoder) -> Result<Self> {
        config.train.validate()?;
        check_data(&data, &encoder)?;
        let classes = data.classes;
        let dim = encoder.output_dim();
        let seed = config.train.seed;
        let classifier = ClassifierBank::random(dim, classes, &mut rng::derived(seed, STREAM_CLASSIFIER))?;
        let mut lens: Vec<usize> = encoder.params().iter().map(Tensor::len).collect();
        lens.push(dim * classes);
        let (b1, b2) = config.train.betas;
        let optimizer = AdamW::new(b1, b2, config.train.weight_decay, &lens);
        Ok(Trainer {
            encoder,
            classifier,
            prototypes: PrototypeBank::new(dim, classes),
            optimizer,
            stage: StageState::default(),
            rng: rng::derived(seed, STREAM_TRAIN),
            data,
            config,
            last_set: None,
        })
    }

    /// Builds data and encoder from the `data`/`encoder` sections of `config`.
    pub fn from_run_config(config: RunConfig) -> Result<Self> {
        let (data_spec, enc_spec) = match (&config.data, &config.encoder) {
            (Some(d), Some(e)) => (d, e),
            _ => return Err(Error::Config("config needs both `data` and `encoder` sections".into())),
        };
        let data = build_dataset(data_spec, Split::Train)?;
        let mut enc_rng = rng::derived(config.train.seed, STREAM_ENCODER);
        let encoder = build_encoder(enc_spec, data_spec, config.train.init_std, &mut enc_rng)?;
        Self::new(config, data, encoder)
    }

    /// Restores a snapshot onto `data` (which must be the run's data).
    pub fn from_checkpoint(ckpt: Checkpoint, data: Dataset) -> Result<Self> {
        check_data(&data, &ckpt.encoder)?;
        if ckpt.classifier.classes() != data.classes || ckpt.prototypes.classes() != data.classes {
            return Err(Error::Format("checkpoint class count does not match the data".into()));
        }
        Ok(Trainer {
            config: ckpt.config,
            encoder: ckpt.encoder,
            classifier: ckpt.classifier,
            prototypes: ckpt.prototypes,
            optimizer: ckpt.optimizer,
            stage: ckpt.stage,
            rng: rng::restore(&ckpt.rng),
            data,
            last_set: None,
        })
    }

    /// Continues a checkpointed run. Model state and hyperparameters come
    /// from the checkpoint; the iteration budget and output paths from
    /// `overrides`.
    pub fn resume(ckpt: Checkpoint, overrides: &RunConfig) -> Result<Self> {
        let spec = ckpt
            .config
            .data
            .clone()
            .ok_or_else(|| Error::Config("checkpoint does not record its data".into()))?;
        let data = build_dataset(&spec, Split::Train)?;
        let mut t = Self::from_checkpoint(ckpt, data)?;
        t.config.train.max_iterations = overrides.train.max_iterations;
        t.config.checkpoint = overrides.checkpoint.clone();
        t.config.log = overrides.log.clone();
        t.config.checkpoint_every = overrides.checkpoint_every;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn classifier(&self) -> &ClassifierBank {
        &self.classifier
    }

    pub fn prototypes(&self) -> &PrototypeBank {
        &self.prototypes
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn stage(&self) -> &StageState {
        &self.stage
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Classes whose columns the most recent step could change.
    pub fn last_classes(&self) -> Option<&SampleSet> {
        self.last_set.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.stage.iteration >= self.config.train.max_iterations
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            classifier: self.classifier.clone(),
            prototypes: self.prototypes.clone(),
            optimizer: self.optimizer.clone(),
            stage: self.stage,
            rng: rng::snapshot(&self.rng),
            config: self.config.clone(),
        }
    }

    fn scheduler_config(&self) -> SchedulerConfig {
        let t = &self.config.train;
        SchedulerConfig {
            delta1: t.delta1,
            delta2: t.delta2,
            smoothing: t.css_smoothing,
        }
    }

    /// Runs one iteration. On error no state is modified.
    pub fn step(&mut self) -> Result<LogRow> {
        let mut rng = self.rng.clone();
        let out = self.forward_backward(&mut rng)?;
        for (i, g) in out.encoder_grads.iter().enumerate() {
            check_finite(g, i)?;
        }
        check_finite(&out.classifier_grad, out.encoder_grads.len())?;

        let lr = out.row.lr;
        let mut optimizer = self.optimizer.clone();
        let mut encoder = self.encoder.clone();
        let mut classifier = self.classifier.clone();
        optimizer.begin_step();
        for (i, (p, g)) in encoder.params_mut().iter_mut().zip(&out.encoder_grads).enumerate() {
            optimizer.update(i, p, g, lr)?;
        }
        let slot = out.encoder_grads.len();
        let cols = out.set.global_ids();
        optimizer.update_columns(slot, classifier.weights_mut(), &out.classifier_grad, cols, lr)?;
        classifier.renormalize_columns(cols)?;

        self.optimizer = optimizer;
        self.encoder = encoder;
        self.classifier = classifier;
        self.prototypes = out.prototypes;
        self.stage = out.stage;
        self.rng = rng;
        self.last_set = Some(out.set);
        Ok(out.row)
    }

    fn forward_backward(&self, rng: &mut DetRng) -> Result<StepOutcome> {
        let cfg: &TrainConfig = &self.config.train;
        let t = self.stage.iteration;
        let lr = cfg.lr_at(t);
        let n = self.data.len();
        let b = cfg.batch_size.at(t).min(n);
        let indices = index::sample(rng, n, b).into_vec();
        let (x, labels) = self.data.batch(&indices);
        let classes = self.data.classes;

        let phase = match cfg.mode {
            TrainMode::Pco => self.stage.phase,
            TrainMode::CosfaceBaseline => Phase::Alignment,
        };
        let set = match (cfg.mode, phase) {
            (TrainMode::CosfaceBaseline, _) | (_, Phase::Refinement) => SampleSet::full(classes),
            _ => ncs::sample(classes, cfg.r, &labels, rng)?,
        };

        let mut g = Graph::new();
        let params = self.encoder.bind(&mut g);
        let features = self.encoder.forward(&mut g, &params, &x)?;
        let binding = ClassifierBinding::bind(&mut g, &self.classifier, set)?;
        let mut prototypes = self.prototypes.clone();
        let loss = match phase {
            Phase::Alignment => loss_alignment(&mut g, features, &binding, &labels, cfg.s, cfg.m)?,
            Phase::Stabilization => {
                prototypes.batch_update(&labels, g.value(features))?;
                loss_stabilization(&mut g, features, &binding, &prototypes, &labels, cfg.s, cfg.m1, cfg.m2)?
            }
            Phase::Refinement => {
                prototypes.batch_update(&labels, g.value(features))?;
                loss_refinement(&mut g, features, &binding, &prototypes, &labels, cfg.s, cfg.m1, cfg.m2)?
            }
        };
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::non_finite(format!("loss at iteration {}", t + 1)));
        }
        let css = css_score(g.value(features), &self.classifier, &labels)?;
        g.backward(loss)?;

        let encoder_grads = params
            .iter()
            .zip(self.encoder.params())
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let sub = g
            .grad(binding.var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(binding.var).shape()));
        let classifier_grad = ncs::scatter_gradients(&sub, &binding.set, classes)?;

        let mut stage = step_scheduler(&self.stage, css, &self.scheduler_config());
        if cfg.mode == TrainMode::CosfaceBaseline {
            stage.phase = Phase::Alignment;
        }
        let row = LogRow {
            iteration: stage.iteration,
            phase,
            loss: loss_value,
            css_raw: stage.css_raw,
            css_smoothed: stage.css_smoothed,
            lr,
        };
        Ok(StepOutcome {
            row,
            stage,
            prototypes,
            set: binding.set,
            encoder_grads,
            classifier_grad,
        })
    }

    /// Steps until the iteration budget is spent, handing each row to
    /// `on_row`.
    pub fn run(&mut self, mut on_row: impl FnMut(&Trainer, &LogRow) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let row = self.step()?;
            on_row(self, &row)?;
        }
        Ok(())
    }
}

fn check_data(data: &Dataset, encoder: &Encoder) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= data.classes) {
        return Err(Error::OutOfRange {
            what: "classes",
            index: bad,
            len: data.classes,
        });
    }
    if data.input_dim() != encoder.input_dim() {
        return Err(Error::Shape {
            op: "train",
            lhs: vec![encoder.input_dim()],
            rhs: vec![data.input_dim()],
        });
    }
    Ok(())
}

/// Runs `config` to completion and returns the final snapshot and the log.
pub fn train(config: &TrainConfig, dataset: &Dataset, encoder: Encoder) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut trainer = Trainer::new(RunConfig::new(config.clone()), dataset.clone(), encoder)?;
    let mut log = Vec::with_capacity(config.max_iterations as usize);
    trainer.run(|_, row| {
        log.push(*row);
        Ok(())
    })?;
    Ok((trainer.checkpoint(), log))
}
