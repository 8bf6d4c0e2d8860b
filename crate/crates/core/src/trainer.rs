//! Training loops for the NW-head variants and the ERM baselines.
//!
//! One support set is drawn per query mini-batch. The implicit objective
//! conditions that support on one training environment (round-robin over
//! a shuffled environment order each epoch); the explicit objective draws
//! two environments and adds `λ · mean ‖f(x, S_e) − f(x, S_e')‖²`.
//! Queries are kept out of the supports they are scored against.

use std::collections::BTreeSet;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::featnet::{FeatureNet, Linear, DEFAULT_FEATURE_DIM, DEFAULT_HIDDEN};
use crate::infer::{build_cache, predict, InferenceMode, ModeKind};
use crate::metrics::{compute_metric, Metric};
use crate::numcore::{OptimHyper, Optimizer, OptimizerKind, Rng, Tape, Tensor, Var};
use crate::nwhead::{
    cross_entropy_tracked, nw_probs_tracked, onehot, prediction_gap_tracked, PredictionSimplex,
};
use crate::support::{
    sample_balanced_query_batch, sample_env_pair, sample_support, SupportDraw, SupportSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Balanced, environment-conditioned support; per-environment loss.
    NwImplicit,
    /// Two environment-conditioned supports plus a prediction-matching penalty.
    NwExplicit,
    /// Balanced support drawn from all training environments.
    NwBalanced,
    /// One example per class, then a uniform fill.
    NwUnbalanced,
    Erm,
    /// ERM on class-balanced query batches.
    ErmBalanced,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NwImplicit => "nw_implicit",
            Variant::NwExplicit => "nw_explicit",
            Variant::NwBalanced => "nw_balanced",
            Variant::NwUnbalanced => "nw_unbalanced",
            Variant::Erm => "erm",
            Variant::ErmBalanced => "erm_balanced",
        }
    }

    pub fn is_erm(self) -> bool {
        matches!(self, Variant::Erm | Variant::ErmBalanced)
    }

    /// Inference mode used for validation during training.
    pub fn validation_mode(self) -> InferenceMode {
        match self {
            Variant::NwUnbalanced => InferenceMode::new(ModeKind::FullUnbalanced),
            _ => InferenceMode::new(ModeKind::Full),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nw_implicit" => Ok(Variant::NwImplicit),
            "nw_explicit" => Ok(Variant::NwExplicit),
            "nw_balanced" => Ok(Variant::NwBalanced),
            "nw_unbalanced" => Ok(Variant::NwUnbalanced),
            "erm" => Ok(Variant::Erm),
            "erm_balanced" => Ok(Variant::ErmBalanced),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub n_q: usize,
    pub n_c: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub max_epochs: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 validates at the end of each epoch.
    pub eval_every: usize,
    pub metric: Metric,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Multiply the learning rate by `lr_gamma` every `lr_step_epochs` epochs (0 = off).
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::NwImplicit,
            lambda: 0.01,
            n_q: 8,
            n_c: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Adam,
            max_epochs: 10,
            seed: 0,
            eval_every: 0,
            metric: Metric::Accuracy,
            hidden: DEFAULT_HIDDEN.to_vec(),
            feature_dim: DEFAULT_FEATURE_DIM,
            lr_step_epochs: 0,
            lr_gamma: 0.1,
        }
    }
}

/// Grid searched for the explicit penalty weight.
pub const LAMBDA_GRID: [f64; 3] = [0.01, 0.1, 1.0];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::NwExplicit && !(self.lambda > 0.0) {
            return Err(Error::Config("nw_explicit needs lambda > 0".into()));
        }
        if self.n_q == 0 || self.n_c == 0 {
            return Err(Error::Config("n_q and n_c must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.lr_step_epochs > 0 && !(self.lr_gamma > 0.0) {
            return Err(Error::Config("lr_gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims
    }
}

/// A trained predictor: NW head over a feature net, or ERM with a linear head.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Nw(FeatureNet),
    Erm { net: FeatureNet, head: Linear },
}

impl Model {
    pub fn net(&self) -> &FeatureNet {
        match self {
            Model::Nw(net) => net,
            Model::Erm { net, .. } => net,
        }
    }

    pub fn head(&self) -> Option<&Linear> {
        match self {
            Model::Nw(_) => None,
            Model::Erm { head, .. } => Some(head),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Nw(net) => net.params(),
            Model::Erm { net, head } => {
                let mut p = net.params();
                p.extend([&head.weight, &head.bias]);
                p
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Nw(net) => net.params_mut(),
            Model::Erm { net, head } => {
                let mut p = net.params_mut();
                p.extend([&mut head.weight, &mut head.bias]);
                p
            }
        }
    }

    /// Predictions on `queries`: through the linear head for ERM, through
    /// `mode` over the training cache for NW.
    pub fn predict(
        &self,
        train: &Dataset,
        queries: &Dataset,
        mode: &InferenceMode,
        rng: &mut Rng,
    ) -> Result<Vec<PredictionSimplex>> {
        let feats = self.net().extract(&queries.all_inputs())?;
        match self {
            Model::Erm { head, .. } => crate::infer::probe_predictions(head, feats.tensor()),
            Model::Nw(net) => {
                let cache = build_cache(net, train)?;
                predict(mode, &cache, &feats, rng)
            }
        }
    }
}

/// Scalar pieces of one step's objective.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub cross_entropy: Var,
    pub penalty: Option<Var>,
}

fn nw_probs_for(
    tape: &mut Tape,
    net: &FeatureNet,
    params: &[Var],
    ds: &Dataset,
    query_feats: Var,
    support: &SupportDraw,
) -> Result<Var> {
    let s_in = tape.constant(ds.inputs(&support.indices));
    let s_feats = net.extract_tracked(tape, params, s_in)?;
    let s_labels = tape.constant(onehot(&support.labels, ds.n_classes())?);
    nw_probs_tracked(tape, query_feats, s_feats, s_labels)
}

fn query_setup(
    tape: &mut Tape,
    net: &FeatureNet,
    params: &[Var],
    ds: &Dataset,
    queries: &[usize],
) -> Result<(Var, Var)> {
    if queries.is_empty() {
        return Err(Error::Contract("empty query batch".into()));
    }
    let q_in = tape.constant(ds.inputs(queries));
    let q_feats = net.extract_tracked(tape, params, q_in)?;
    let labels: Vec<usize> = queries.iter().map(|&i| ds.example(i).y).collect();
    let targets = tape.constant(onehot(&labels, ds.n_classes())?);
    Ok((q_feats, targets))
}

pub fn query_labels(ds: &Dataset, queries: &[usize]) -> BTreeSet<usize> {
    queries.iter().map(|&i| ds.example(i).y).collect()
}

/// Cross-entropy of the NW head against a given support draw.
pub fn loss_nw_on(
    tape: &mut Tape,
    net: &FeatureNet,
    params: &[Var],
    ds: &Dataset,
    queries: &[usize],
    support: &SupportDraw,
) -> Result<StepLoss> {
    let (q_feats, targets) = query_setup(tape, net, params, ds, queries)?;
    let probs = nw_probs_for(tape, net, params, ds, q_feats, support)?;
    let ce = cross_entropy_tracked(tape, probs, targets)?;
    Ok(StepLoss {
        total: ce,
        cross_entropy: ce,
        penalty: None,
    })
}

/// Implicit objective for one mini-batch: balanced support conditioned on
/// `env`, or on a uniformly drawn training environment when `env` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn loss_implicit(
    tape: &mut Tape,
    net: &FeatureNet,
    params: &[Var],
    ds: &Dataset,
    queries: &[usize],
    env: Option<usize>,
    n_c: usize,
    rng: &mut Rng,
) -> Result<StepLoss> {
    let envs = ds.env_ids();
    if envs.is_empty() {
        return Err(Error::Config("training set has no environments".into()));
    }
    let env = env.unwrap_or_else(|| envs[rng.below(envs.len())]);
    let support = sample_support(
        ds,
        &SupportSpec::balanced_in_env(n_c, env).excluding(queries),
        &query_labels(ds, queries),
        rng,
    )
    .map_err(|e| e.context(format!("implicit step, environment {env}")))?;
    loss_nw_on(tape, net, params, ds, queries, &support)
}

/// Explicit objective against two given supports.
#[allow(clippy::too_many_arguments)]
pub fn loss_explicit_on(
    tape: &mut Tape,
    net: &FeatureNet,
    params: &[Var],
    ds: &Dataset,
    queries: &[usize],
    first: &SupportDraw,
    second: &SupportDraw,
    lambda: f64,
) -> Result<StepLoss> {
    let (q_feats, targets) = query_setup(tape, net, params, ds, queries)?;
    let p1 = nw_probs_for(tape, net, params, ds, q_feats, first)?;
    let p2 = nw_probs_for(tape, net, params, ds, q_feats, second)?;
    let ce = cross_entropy_tracked(tape, p1, targets)?;
    let gap = prediction_gap_tracked(tape, p1, p2)?;
    let weighted = tape.scale(gap, lambda)?;
    let total = tape.add(ce, weighted)?;
    Ok(StepLoss {
        total,
        cross_entropy: ce,
        penalty: Some(gap),
    })
}

/// Explicit objective for one mini-batch over a sampled environment pair.
#[allow(clippy::too_many_arguments)]
pub fn loss_explicit(
    tape: &mut Tape,
    net: &FeatureNet,
    params: &[Var],
    ds: &Dataset,
    queries: &[usize],
    n_c: usize,
    lambda: f64,
    rng: &mut Rng,
) -> Result<StepLoss> {
    let ((_, first), (_, second)) = sample_env_pair(ds, n_c, &query_labels(ds, queries), queries, rng)
        .map_err(|e| e.context("explicit step"))?;
    loss_explicit_on(tape, net, params, ds, queries, &first, &second, lambda)
}

/// Cross-entropy of `softmax(head(net(x)))`. `params` holds the net's
/// handles followed by the head's weight and bias.
pub fn loss_erm(
    tape: &mut Tape,
    net: &FeatureNet,
    head: &Linear,
    params: &[Var],
    ds: &Dataset,
    queries: &[usize],
) -> Result<StepLoss> {
    let n_net = net.params().len();
    if params.len() != n_net + 2 {
        return Err(Error::Contract("ERM needs net and head parameter handles".into()));
    }
    if head.input_dim() != net.feature_dim() || head.output_dim() != ds.n_classes() {
        return Err(Error::shape(
            "erm head",
            head.weight.shape(),
            &[net.feature_dim(), ds.n_classes()],
        ));
    }
    let (feats, targets) = query_setup(tape, net, &params[..n_net], ds, queries)?;
    let logits = head.forward_tracked(tape, feats, &params[n_net..])?;
    let probs = tape.softmax_rows(logits)?;
    let ce = cross_entropy_tracked(tape, probs, targets)?;
    Ok(StepLoss {
        total: ce,
        cross_entropy: ce,
        penalty: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub penalty: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub evaluations: Vec<Checkpoint>,
    /// Best validation evaluation; earliest wins ties.
    pub selected: Option<Checkpoint>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    val: &'a Dataset,
    model: Model,
    opt: Optimizer,
    sample_rng: Rng,
    eval_rng: Rng,
    report: TrainReport,
    best: Option<Model>,
    step: usize,
}

impl Trainer<'_> {
    fn evaluate(&mut self, epoch: usize) -> Result<f64> {
        let preds = self.model.predict(
            self.train,
            self.val,
            &self.cfg.variant.validation_mode(),
            &mut self.eval_rng,
        )?;
        let groups = self.val.envs();
        let metric = compute_metric(&preds, &self.val.labels(), Some(&groups), self.cfg.metric)?;
        let cp = Checkpoint {
            epoch,
            step: self.step,
            metric,
        };
        self.report.evaluations.push(cp);
        if self.report.selected.is_none_or(|s| metric > s.metric) {
            self.report.selected = Some(cp);
            self.best = Some(self.model.clone());
        }
        debug!("epoch {epoch} step {}: val {} = {metric:.4}", self.step, self.cfg.metric);
        Ok(metric)
    }

    fn step_loss(&mut self, tape: &mut Tape, params: &[Var], queries: &[usize], env: usize) -> Result<StepLoss> {
        let cfg = self.cfg;
        let ds = self.train;
        let rng = &mut self.sample_rng;
        match &self.model {
            Model::Erm { net, head } => loss_erm(tape, net, head, params, ds, queries),
            Model::Nw(net) => match cfg.variant {
                Variant::NwImplicit => loss_implicit(tape, net, params, ds, queries, Some(env), cfg.n_c, rng),
                Variant::NwExplicit => loss_explicit(tape, net, params, ds, queries, cfg.n_c, cfg.lambda, rng),
                Variant::NwBalanced | Variant::NwUnbalanced => {
                    let spec = if cfg.variant == Variant::NwBalanced {
                        SupportSpec::balanced(cfg.n_c)
                    } else {
                        SupportSpec::unbalanced(cfg.n_c)
                    };
                    let spec = spec.excluding(queries);
                    let support = sample_support(ds, &spec, &query_labels(ds, queries), rng)?;
                    loss_nw_on(tape, net, params, ds, queries, &support)
                }
                Variant::Erm | Variant::ErmBalanced => unreachable!("ERM variants build an ERM model"),
            },
        }
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<()> {
        let cfg = self.cfg;
        if cfg.lr_step_epochs > 0 && epoch > 0 && epoch.is_multiple_of(cfg.lr_step_epochs) {
            let lr = self.opt.lr() * cfg.lr_gamma;
            self.opt.set_lr(lr)?;
        }
        let n = self.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.sample_rng.shuffle(&mut order);
        let mut envs = self.train.env_ids();
        self.sample_rng.shuffle(&mut envs);

        let (mut loss_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut last_eval = None;
        for (b, chunk) in order.chunks(cfg.n_q).enumerate() {
            let queries = if cfg.variant == Variant::ErmBalanced {
                sample_balanced_query_batch(self.train, cfg.n_q, &mut self.sample_rng)?
            } else {
                chunk.to_vec()
            };
            let mut tape = Tape::new();
            let params: Vec<Var> = {
                let ps = self.model.params();
                ps.into_iter()
                    .enumerate()
                    .map(|(i, p)| tape.param(crate::numcore::ParamId(i), p.clone()))
                    .collect()
            };
            let env = envs[b % envs.len()];
            let loss = self.step_loss(&mut tape, &params, &queries, env).map_err(|e| match e {
                Error::Domain(msg) => Error::Domain(format!("step {}: {msg}", self.step)),
                other => other,
            })?;
            let total = tape.value(loss.total).item()?;
            let pen = loss.penalty.map(|p| tape.value(p).item()).transpose()?;
            let grads = tape.backward(loss.total)?;
            let grad_norm = grads.norm();
            if !total.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    loss: total,
                    grad_norm,
                });
            }
            let shapes: Vec<Vec<usize>> = self.model.params().iter().map(|p| p.shape().to_vec()).collect();
            let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            let g = grads.ordered(&shape_refs);
            self.opt.step(&mut self.model.params_mut(), &g)?;
            self.step += 1;
            loss_sum += total;
            pen_sum += pen.unwrap_or(0.0);
            batches += 1;
            if cfg.eval_every > 0 && self.step.is_multiple_of(cfg.eval_every) {
                last_eval = Some(self.evaluate(epoch)?);
            }
        }
        if cfg.eval_every == 0 {
            last_eval = Some(self.evaluate(epoch)?);
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            penalty: (cfg.variant == Variant::NwExplicit).then(|| pen_sum / batches.max(1) as f64),
            val_metric: last_eval,
        };
        info!(
            "{} seed {} epoch {epoch}: loss {:.4} val {:?}",
            cfg.variant.name(),
            cfg.seed,
            rec.train_loss,
            rec.val_metric
        );
        self.report.history.push(rec);
        Ok(())
    }
}

/// Trains `cfg.variant` on `train` and returns the checkpoint that scored
/// best on the out-of-distribution `val` set.
pub fn train(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let train_envs: BTreeSet<usize> = train.env_ids().into_iter().collect();
    if let Some(e) = val.env_ids().into_iter().find(|e| train_envs.contains(e)) {
        return Err(Error::Config(format!(
            "validation environment {e} also appears in training"
        )));
    }
    if val.is_empty() && cfg.max_epochs > 0 {
        return Err(Error::Config("empty validation set".into()));
    }
    if cfg.variant == Variant::NwExplicit && train.n_envs() < 2 {
        return Err(Error::Config("nw_explicit needs at least 2 training environments".into()));
    }

    let root = Rng::new(cfg.seed);
    let mut init_rng = root.split_named("init");
    let net = FeatureNet::init(&cfg.layer_dims(train.input_dim()), &mut init_rng)?;
    let model = if cfg.variant.is_erm() {
        Model::Erm {
            head: Linear::zeros(net.feature_dim(), train.n_classes()),
            net,
        }
    } else {
        Model::Nw(net)
    };
    let opt = Optimizer::new(
        cfg.optimizer,
        OptimHyper {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..OptimHyper::default()
        },
    )?;
    let mut t = Trainer {
        cfg,
        train,
        val,
        model,
        opt,
        sample_rng: root.split_named("sample"),
        eval_rng: root.split_named("eval"),
        report: TrainReport::default(),
        best: None,
        step: 0,
    };
    for epoch in 0..cfg.max_epochs {
        t.run_epoch(epoch)?;
    }
    let model = t.best.take().unwrap_or(t.model);
    Ok((model, t.report))
}
