//! Teacher training, noisy-teacher prediction and student distillation.
//!
//! Both stages share one loop: shuffle, then for each batch compute every
//! example's loss and gradient on its own tape (in parallel), sum the
//! gradients in example order, and take an optimizer step. Dev
//! perplexity is measured in evaluation mode on clean sources and the best
//! checkpoint is kept.
//!
//! Every random draw comes from a stream keyed by the seed, the epoch and
//! the example's index in the training split, so a run is fully determined
//! by its seed, data and config regardless of thread count.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::{truncate, Example, TokenId};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::losses::{check_lambda, check_smoothing, final_loss_on, kd_loss_on, nll_loss_on};
use crate::model::{
    bind, forward, forward_on, init_params, Dropout, ForwardNoise, ModelConfig, TransformerParams,
};
use crate::noise::{
    build_replacement_table, gaussian_noise_factors, perturb_pipeline, NoiseConfig,
    ReplacementTable,
};
use crate::par;
use crate::seeding::{derive_rng, Purpose};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// SGD with heavy-ball momentum.
    Sgd,
    /// Adam with bias correction.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            )),
        }
    }
}

const ADAM_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    /// Adam's second-moment decay. Unused by SGD.
    pub beta2: f64,
    /// Updates over which the learning rate ramps linearly up to its value.
    pub warmup_steps: u64,
    /// After warmup, decay the learning rate linearly to zero at the end of
    /// `max_epochs`.
    pub linear_decay: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluate every this many updates; 0 means once per epoch.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub label_smoothing: f64,
    /// Rescales the batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.001,
            momentum: 0.9,
            beta2: 0.98,
            warmup_steps: 100,
            linear_decay: true,
            batch_size: 8,
            max_epochs: 20,
            eval_every: 0,
            patience: 3,
            label_smoothing: 0.1,
            clip_norm: Some(5.0),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        check_smoothing(self.label_smoothing)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the distillation term; `1 - lambda` weights the gold NLL.
    pub lambda: f64,
    /// Dropout rate of the teacher while it produces soft targets.
    pub teacher_dropout: f64,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.5,
            teacher_dropout: 0.1,
            noise: NoiseConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(0.0..1.0).contains(&self.teacher_dropout) {
            return Err(Error::config("teacher_dropout", "must be in [0, 1)"));
        }
        self.noise.validate()?;
        self.train.validate()
    }
}

/// One line of the training log. Step losses are per target token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        nll: f64,
        kd: f64,
        #[serde(rename = "final")]
        final_loss: f64,
        lambda: f64,
    },
    Eval {
        epoch: usize,
        step: u64,
        dev_ppl: f64,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The checkpoint with the lowest dev perplexity.
    pub best: Checkpoint,
    pub log: Vec<LogRecord>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn step_losses(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.log.iter().filter_map(|r| match *r {
            LogRecord::Step {
                nll,
                kd,
                final_loss,
                ..
            } => Some((nll, kd, final_loss)),
            LogRecord::Eval { .. } => None,
        })
    }

    pub fn dev_perplexities(&self) -> impl Iterator<Item = f64> + '_ {
        self.log.iter().filter_map(|r| match *r {
            LogRecord::Eval { dev_ppl, .. } => Some(dev_ppl),
            LogRecord::Step { .. } => None,
        })
    }
}

/// Next-token probabilities `[prefix_len × vocab_size]` from `params` with
/// dropout active at rate `alpha`, masks drawn from `rng`. `alpha = 0` is
/// evaluation mode and leaves `rng` untouched.
pub fn teacher_distribution(
    params: &TransformerParams,
    src: &[TokenId],
    prefix: &[TokenId],
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config("teacher_dropout", "must be in [0, 1)"));
    }
    let noise = ForwardNoise {
        dropout: (alpha > 0.0).then_some(Dropout { rate: alpha, rng }),
        src_embedding_scale: None,
    };
    let lp = forward(params, params.config(), src, prefix, noise)?;
    Ok(lp.map(f64::exp))
}

struct TeacherSide<'a> {
    params: &'a TransformerParams,
    alpha: f64,
}

struct StudentNoise<'a> {
    cfg: &'a NoiseConfig,
    table: Option<ReplacementTable>,
}

struct Objective<'a> {
    lambda: f64,
    teacher: Option<TeacherSide<'a>>,
    noise: Option<StudentNoise<'a>>,
}

struct ExampleGrad {
    grad: Vec<f64>,
    nll: f64,
    kd: f64,
    final_loss: f64,
    tokens: usize,
}

fn example_grad(
    params: &TransformerParams,
    ex: &Example,
    coords: [u64; 2],
    obj: &Objective,
    cfg: &TrainConfig,
) -> Result<ExampleGrad> {
    let mcfg = params.config();
    let clean = truncate(&ex.source, mcfg.max_src_len);
    let prefix = &ex.target[..ex.target.len() - 1];
    let gold = &ex.target[1..];

    let teacher_probs = match &obj.teacher {
        Some(t) => {
            let mut rng = derive_rng(cfg.seed, Purpose::TeacherDropout, &coords);
            Some(teacher_distribution(
                t.params,
                clean.tokens(),
                prefix,
                t.alpha,
                &mut rng,
            )?)
        }
        None => None,
    };

    let (src, scale) = match &obj.noise {
        Some(n) => {
            let mut rng = derive_rng(n.cfg.seed, Purpose::Perturb, &coords);
            let src = perturb_pipeline(&clean, n.cfg, n.table.as_ref(), &mut rng)?;
            let scale = if n.cfg.gaussian_enabled {
                let mut rng = derive_rng(n.cfg.seed, Purpose::EmbeddingNoise, &coords);
                Some(gaussian_noise_factors(
                    &[src.len(), mcfg.hidden_size],
                    n.cfg.gaussian_sigma,
                    &mut rng,
                )?)
            } else {
                None
            };
            (src, scale)
        }
        None => (clean, None),
    };

    let mut dropout_rng = derive_rng(cfg.seed, Purpose::Dropout, &coords);
    let mut noise = ForwardNoise {
        dropout: Some(Dropout {
            rate: mcfg.dropout_rate,
            rng: &mut dropout_rng,
        }),
        src_embedding_scale: scale.as_ref(),
    };
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, true);
    let lp = forward_on(&mut tape, params, &vars, src.tokens(), prefix, &mut noise)?;
    let nll = nll_loss_on(&mut tape, lp, gold, cfg.label_smoothing)?;
    let (loss, kd) = match &teacher_probs {
        Some(p) => {
            let kd = kd_loss_on(&mut tape, p, lp)?;
            (final_loss_on(&mut tape, nll, kd, obj.lambda)?, Some(kd))
        }
        None => (nll, None),
    };
    let grads = tape.backward(loss)?;
    let mut grad = Vec::with_capacity(params.num_scalars());
    for (&v, t) in vars.iter().zip(params.tensors()) {
        match grads.values(v) {
            Some(g) => grad.extend_from_slice(g),
            None => grad.resize(grad.len() + t.len(), 0.0),
        }
    }
    Ok(ExampleGrad {
        grad,
        nll: tape.value(nll).item()?,
        kd: kd.map(|k| tape.value(k).item()).transpose()?.unwrap_or(0.0),
        final_loss: tape.value(loss).item()?,
        tokens: gold.len(),
    })
}

fn check_splits(train: &[Example], dev: &[Example], model: &ModelConfig) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::InvalidInput("dev split is empty".into()));
    }
    let longest = train
        .iter()
        .chain(dev)
        .map(|ex| ex.target.len() - 1)
        .max()
        .unwrap_or(0);
    if longest > model.max_tgt_len {
        return Err(Error::config(
            "max_tgt_len",
            format!(
                "{} is shorter than the longest target ({longest} tokens with BOS)",
                model.max_tgt_len
            ),
        ));
    }
    Ok(())
}

fn divergence(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn new_state(params: &TransformerParams, optimizer: Optimizer) -> OptimizerState {
    let zeros = || {
        params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    };
    OptimizerState {
        step: 0,
        first_moment: zeros(),
        second_moment: match optimizer {
            Optimizer::Sgd => Vec::new(),
            Optimizer::Adam => zeros(),
        },
    }
}

/// Learning-rate multiplier for update `t` (1-based) of `total`.
pub fn lr_factor(t: u64, total: u64, cfg: &TrainConfig) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        (t as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    if !cfg.linear_decay || t <= cfg.warmup_steps || total <= cfg.warmup_steps {
        return warm;
    }
    let left = total.saturating_sub(t) + 1;
    left as f64 / (total - cfg.warmup_steps + 1) as f64
}

/// Applies one update with the flattened batch gradient `grad`.
fn apply_update(
    params: &mut TransformerParams,
    state: &mut OptimizerState,
    grad: &[f64],
    total: u64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step;
    let lr = cfg.learning_rate * lr_factor(t, total, cfg);
    let b1 = cfg.momentum;
    let b2 = cfg.beta2;
    let correct1 = 1.0 - b1.powf(t as f64);
    let correct2 = 1.0 - b2.powf(t as f64);
    let mut offset = 0;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let n = p.len();
        let g = &grad[offset..offset + n];
        let m = state.first_moment[i].values_mut();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((pv, mv), gv) in p.values_mut().iter_mut().zip(m).zip(g) {
                    *mv = b1 * *mv + gv;
                    *pv -= lr * *mv;
                }
            }
            Optimizer::Adam => {
                let v = state.second_moment[i].values_mut();
                for (((pv, mv), vv), gv) in p.values_mut().iter_mut().zip(m).zip(v).zip(g) {
                    *mv = b1 * *mv + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    *pv -= lr * (*mv / correct1) / ((*vv / correct2).sqrt() + ADAM_EPSILON);
                }
            }
        }
        offset += n;
    }
}

fn fit(
    mut params: TransformerParams,
    train: &[Example],
    dev: &[Example],
    obj: &Objective,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut state = new_state(&params, cfg.optimizer);
    let total_steps = (cfg.max_epochs * train.len().div_ceil(cfg.batch_size)) as u64;
    let mut step: u64 = 0;
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    let mut evaluate = |params: &TransformerParams,
                        state: &OptimizerState,
                        epoch: usize,
                        log: &mut Vec<LogRecord>|
     -> Result<bool> {
        let step = state.step;
        let ppl = perplexity(params, dev).map_err(|e| divergence(step, e))?;
        if !ppl.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("dev perplexity is {ppl}"),
            });
        }
        log::info!("epoch {epoch} step {step}: dev perplexity {ppl:.4}");
        log.push(LogRecord::Eval {
            epoch,
            step,
            dev_ppl: ppl,
        });
        if best.as_ref().is_none_or(|b| ppl < b.dev_perplexity) {
            best = Some(Checkpoint {
                params: params.clone(),
                optimizer: state.clone(),
                epoch,
                step,
                dev_perplexity: ppl,
            });
            since_best = 0;
        } else {
            since_best += 1;
        }
        Ok(since_best >= cfg.patience)
    };

    'epochs: for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut derive_rng(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let params_ref = &params;
            let results = par::map(batch, |&i| {
                example_grad(params_ref, &train[i], [epoch as u64, i as u64], obj, cfg)
            });
            let mut total = vec![0.0; params.num_scalars()];
            let (mut nll, mut kd, mut fin, mut tokens) = (0.0, 0.0, 0.0, 0);
            for r in results {
                let r = r.map_err(|e| divergence(step, e))?;
                for (t, g) in total.iter_mut().zip(&r.grad) {
                    *t += g;
                }
                nll += r.nll;
                kd += r.kd;
                fin += r.final_loss;
                tokens += r.tokens;
            }
            if !fin.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss is {fin}"),
                });
            }
            let inv = 1.0 / batch.len() as f64;
            total.iter_mut().for_each(|g| *g *= inv);
            if let Some(max) = cfg.clip_norm {
                let norm = total.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    let s = max / norm;
                    total.iter_mut().for_each(|g| *g *= s);
                }
            }
            apply_update(&mut params, &mut state, &total, total_steps, cfg);
            let per_token = 1.0 / tokens as f64;
            log.push(LogRecord::Step {
                step,
                epoch,
                nll: nll * per_token,
                kd: kd * per_token,
                final_loss: fin * per_token,
                lambda: obj.lambda,
            });
            if cfg.eval_every > 0
                && step.is_multiple_of(cfg.eval_every)
                && evaluate(&params, &state, epoch, &mut log)?
            {
                stopped_early = true;
                break 'epochs;
            }
        }
        if cfg.eval_every == 0 && evaluate(&params, &state, epoch, &mut log)? {
            stopped_early = true;
            break;
        }
    }
    let evaluated_last = matches!(log.last(), Some(LogRecord::Eval { .. }));
    if !evaluated_last {
        evaluate(&params, &state, epochs_run - 1, &mut log)?;
    }
    Ok(TrainOutcome {
        best: best.expect("at least one evaluation ran"),
        log,
        epochs_run,
        stopped_early,
    })
}

fn seeded(cfg: &ModelConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..cfg.clone()
    }
}

/// Trains a model from scratch on label-smoothed NLL. Initialization uses
/// `cfg.seed` in place of `model_cfg.seed`.
pub fn train_teacher(
    model_cfg: &ModelConfig,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_splits(train, dev, model_cfg)?;
    let params = init_params(&seeded(model_cfg, cfg.seed))?;
    let obj = Objective {
        lambda: 0.0,
        teacher: None,
        noise: None,
    };
    fit(params, train, dev, &obj, cfg)
}

/// Trains a fresh student, initialized from `cfg.train.seed`, against the
/// frozen `teacher`. The teacher reads clean sources with dropout at
/// `cfg.teacher_dropout`; the student reads perturbed sources. The student
/// architecture must equal the teacher's.
pub fn train_student(
    teacher: &Checkpoint,
    student_cfg: &ModelConfig,
    train: &[Example],
    dev: &[Example],
    cfg: &DistillConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_splits(train, dev, student_cfg)?;
    if !teacher.config().same_architecture(student_cfg)
        || teacher.params.shape_manifest() != init_params(student_cfg)?.shape_manifest()
    {
        return Err(Error::ConfigMismatch(
            "student and teacher architectures differ".into(),
        ));
    }
    let table = if cfg.noise.word_replace > 0.0 {
        Some(build_replacement_table(
            teacher.params.token_embeddings(),
            cfg.noise.candidates,
        )?)
    } else {
        None
    };
    let noise = (!cfg.noise.is_off()).then_some(StudentNoise {
        cfg: &cfg.noise,
        table,
    });
    let obj = Objective {
        lambda: cfg.lambda,
        teacher: Some(TeacherSide {
            params: &teacher.params,
            alpha: cfg.teacher_dropout,
        }),
        noise,
    };
    let params = init_params(&seeded(student_cfg, cfg.train.seed))?;
    fit(params, train, dev, &obj, &cfg.train)
}
