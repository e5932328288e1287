//! One-iteration training step, full runs, metrics logging and evaluation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::DiffTensor;
use crate::error::{Error, Result};
use crate::model::{AdapterState, BoundParams, VelocityField};
use crate::objective::{reward_gate, shaping_loss, total_loss, DivergenceWeights, GateConfig, LossBreakdown};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::reward::{Decoder, RewardLoss, RewardModel};
use crate::rng::RngStream;
use crate::sampler::{grad_window_for, rollout, rollout_split, Trajectory};
use crate::schedule::{match_horizon_pair, HorizonMatch, HorizonSet, NoiseSchedule};
use crate::task::ToyTask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    RewardOnly,
    DistillOnly,
    NoGate,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Full, Self::RewardOnly, Self::DistillOnly, Self::NoGate];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::RewardOnly => "reward-only",
            Self::DistillOnly => "distill-only",
            Self::NoGate => "no-gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub student_steps: usize,
    pub teacher_steps: usize,
    pub shift: f64,
    pub batch: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub horizons: HorizonSet,
    pub divergence: DivergenceWeights,
    pub reward_loss: RewardLoss,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub ablation: Ablation,
    pub smoothing: f64,
    /// Teacher re-noising reuses the student's per-step streams.
    pub shared_noise: bool,
    /// Record elapsed milliseconds; off keeps metrics bitwise reproducible.
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.student_steps == 0 || self.teacher_steps < self.student_steps {
            return Err(Error::InvalidArgument(format!(
                "need teacher steps ({}) >= student steps ({}) >= 1",
                self.teacher_steps, self.student_steps
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gate temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidArgument(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        self.divergence.validate()?;
        self.optimizer.validate()
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.ablation {
            Ablation::RewardOnly => 0.0,
            _ => self.alpha,
        }
    }

    pub fn reward_weight(&self) -> f64 {
        match self.ablation {
            Ablation::DistillOnly => 0.0,
            _ => 1.0,
        }
    }

    pub fn gate(&self) -> GateConfig {
        let override_value = match self.ablation {
            Ablation::DistillOnly | Ablation::NoGate => Some(1.0),
            _ => None,
        };
        GateConfig {
            temperature: self.temperature,
            enabled: true,
            override_value,
        }
    }

    pub fn shaping_enabled(&self) -> bool {
        self.effective_alpha() > 0.0 && !self.horizons.is_empty()
    }
}

/// Decoder plus reward model.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub decoder: Decoder,
    pub reward: RewardModel,
}

impl Scorer {
    pub fn per_sample(&self, x: &DiffTensor, cond: &[usize]) -> Result<DiffTensor> {
        self.reward.per_sample(&self.decoder.decode(x)?, cond)
    }
}

/// Phases of one iteration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SampleInputs,
    StudentRollout,
    TeacherRollout,
    StudentReward,
    HorizonLoop,
    MatchHorizon,
    HorizonDivergence,
    HorizonLoopEnd,
    ShapingAggregate,
    TeacherReward,
    Gate,
    TotalLoss,
    BackwardUpdate,
    EmaUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: AdapterState,
    pub teacher: AdapterState,
    pub adam: AdamState,
    pub iteration: usize,
    pub smoothed_student: Option<f64>,
    pub smoothed_teacher: Option<f64>,
}

impl TrainState {
    /// Student from `adapter`, teacher as its copy, fresh moments.
    pub fn new(adapter: AdapterState) -> Self {
        let n = adapter.len();
        Self {
            teacher: adapter.clone_as_teacher(),
            student: adapter,
            adam: AdamState::new(n),
            iteration: 0,
            smoothed_student: None,
            smoothed_teacher: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub smoothed_student: f64,
    pub smoothed_teacher: f64,
    pub zero_norm: usize,
}

/// Everything an iteration produces before it is committed.
pub struct IterationDetail {
    pub record: IterationRecord,
    pub trace: Vec<Phase>,
    pub student: Trajectory,
    pub teacher: Trajectory,
    pub gradients: Vec<f64>,
    /// Ids of every leaf that received a gradient.
    pub gradient_leaves: Vec<u64>,
    pub teacher_leaves: Vec<u64>,
    pub student_leaves: Vec<u64>,
}

/// The differentiable part of one iteration.
pub struct LossGraph {
    pub total: DiffTensor,
    pub breakdown: LossBreakdown,
    pub student: Trajectory,
    pub teacher: Trajectory,
    pub teacher_leaves: Vec<u64>,
    pub zero_norm: usize,
}

pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    field: &'a VelocityField,
    task: &'a ToyTask,
    scorer: &'a Scorer,
    student_schedule: NoiseSchedule,
    teacher_schedule: NoiseSchedule,
    pairs: Vec<HorizonMatch>,
    window_start: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, field: &'a VelocityField, task: &'a ToyTask, scorer: &'a Scorer) -> Result<Self> {
        cfg.validate()?;
        let student_schedule = NoiseSchedule::new(cfg.student_steps, cfg.shift)?;
        let teacher_schedule = NoiseSchedule::new(cfg.teacher_steps, cfg.shift)?;
        let pairs = match_horizon_pair(&student_schedule, &teacher_schedule, &cfg.horizons);
        let window_start = grad_window_for(&cfg.horizons, &student_schedule, cfg.shaping_enabled());
        Ok(Self {
            cfg,
            field,
            task,
            scorer,
            student_schedule,
            teacher_schedule,
            pairs,
            window_start,
        })
    }

    pub fn window_start(&self) -> usize {
        self.window_start
    }

    pub fn pairs(&self) -> &[HorizonMatch] {
        &self.pairs
    }

    /// Builds the iteration's total loss over the given student adapter
    /// leaves. Steps before the gradient window always run on the current
    /// `state.student`. `gate` replaces the computed gate value when set.
    pub fn loss_graph(&self, state: &TrainState, adapter: &BoundParams, gate: Option<f64>) -> Result<LossGraph> {
        let mut trace = Vec::with_capacity(14);
        self.forward(state, adapter, gate, &mut trace)
    }

    fn forward(
        &self,
        state: &TrainState,
        student_params: &BoundParams,
        gate_override: Option<f64>,
        trace: &mut Vec<Phase>,
    ) -> Result<LossGraph> {
        let cfg = self.cfg;
        let it = state.iteration;
        let seed = cfg.seed;

        trace.push(Phase::SampleInputs);
        let cond = self
            .task
            .sample_conditions(cfg.batch, &mut RngStream::new(seed, format!("prompt/{it}")));
        let x1 = RngStream::new(seed, format!("x1/{it}")).normal_tensor(&[cfg.batch, self.task.dim]);

        let backbone = self.field.backbone().bind(false);
        let teacher_params = state.teacher.bind(false);
        let student_noise = RngStream::new(seed, format!("student/{it}"));
        let teacher_noise = if cfg.shared_noise {
            student_noise.clone()
        } else {
            RngStream::new(seed, format!("teacher/{it}"))
        };

        trace.push(Phase::StudentRollout);
        let student = rollout_split(
            self.field,
            &backbone,
            student_params,
            &state.student.bind(false),
            &self.student_schedule,
            &x1,
            &cond,
            &student_noise,
            self.window_start,
        )?;
        trace.push(Phase::TeacherRollout);
        let teacher = rollout(
            self.field,
            &backbone,
            &teacher_params,
            &self.teacher_schedule,
            &x1,
            &cond,
            &teacher_noise,
            self.teacher_schedule.steps() + 1,
        )?;

        trace.push(Phase::StudentReward);
        let student_rewards = self.scorer.per_sample(student.output(), &cond)?;
        let reward_loss = cfg.reward_loss.apply(&student_rewards)?;
        let r_s = student_rewards.value().mean();

        let (shape, per_horizon, zero_norm) = if cfg.shaping_enabled() {
            trace.push(Phase::HorizonLoop);
            for _ in &self.pairs {
                trace.push(Phase::MatchHorizon);
                trace.push(Phase::HorizonDivergence);
            }
            trace.push(Phase::HorizonLoopEnd);
            trace.push(Phase::ShapingAggregate);
            let s = shaping_loss(&student, &teacher, &self.pairs, &cfg.horizons, &cfg.divergence)?;
            (s.loss, s.per_horizon, s.zero_norm)
        } else {
            (DiffTensor::scalar(0.0), Vec::new(), 0)
        };

        trace.push(Phase::TeacherReward);
        let r_t = self
            .scorer
            .per_sample(&teacher.output().stop_gradient(), &cond)?
            .value()
            .mean();

        trace.push(Phase::Gate);
        let gate = match gate_override {
            Some(g) => g,
            None => reward_gate(r_t, r_s, &cfg.gate()),
        };

        trace.push(Phase::TotalLoss);
        let (total, mut breakdown) =
            total_loss(&reward_loss, &shape, cfg.reward_weight(), gate, cfg.effective_alpha()).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, step: it },
                other => other,
            })?;
        breakdown.per_horizon = per_horizon;
        breakdown.student_reward = r_s;
        breakdown.teacher_reward = r_t;
        Ok(LossGraph {
            total,
            breakdown,
            student,
            teacher,
            teacher_leaves: teacher_params.leaves().iter().map(DiffTensor::id).collect(),
            zero_norm,
        })
    }

    /// Runs one iteration against `state` without modifying it.
    pub fn compute(&self, state: &TrainState) -> Result<(IterationDetail, TrainState)> {
        let start = Instant::now();
        let cfg = self.cfg;
        let it = state.iteration;
        let mut trace = Vec::with_capacity(14);
        let student_params = state.student.bind(true);
        let LossGraph {
            total,
            breakdown,
            student,
            teacher,
            teacher_leaves,
            zero_norm,
        } = self.forward(state, &student_params, None, &mut trace)?;
        let r_s = breakdown.student_reward;
        let r_t = breakdown.teacher_reward;

        trace.push(Phase::BackwardUpdate);
        let grads = total.backward()?;
        let flat = state.student.flatten_grads(&student_params, &grads);
        let mut next = state.clone();
        let grad_norm = adam_step(next.student.values_mut(), &flat, &mut next.adam, &cfg.optimizer).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite {
                what: "gradient".into(),
                step: it,
            },
            other => other,
        })?;
        if !next.student.all_finite() {
            return Err(Error::NonFinite {
                what: "adapter parameters".into(),
                step: it,
            });
        }

        trace.push(Phase::EmaUpdate);
        let updated_student = next.student.clone();
        next.teacher.ema_update(&updated_student, cfg.gamma)?;
        next.iteration += 1;
        let smooth = |prev: Option<f64>, x: f64| match prev {
            None => x,
            Some(p) => cfg.smoothing * p + (1.0 - cfg.smoothing) * x,
        };
        let sm_s = smooth(state.smoothed_student, r_s);
        let sm_t = smooth(state.smoothed_teacher, r_t);
        next.smoothed_student = Some(sm_s);
        next.smoothed_teacher = Some(sm_t);

        let wall_ms = if cfg.wall_clock {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        let record = IterationRecord {
            iteration: it,
            breakdown,
            grad_norm,
            wall_ms,
            smoothed_student: sm_s,
            smoothed_teacher: sm_t,
            zero_norm,
        };
        let detail = IterationDetail {
            record,
            trace,
            gradient_leaves: grads.leaf_ids().collect(),
            teacher_leaves,
            student_leaves: student_params.leaves().iter().map(DiffTensor::id).collect(),
            student,
            teacher,
            gradients: flat,
        };
        Ok((detail, next))
    }

    /// Runs one iteration and commits it. On error `state` is left bitwise unchanged.
    pub fn train_iteration(&self, state: &mut TrainState) -> Result<IterationRecord> {
        let (detail, next) = self.compute(state)?;
        *state = next;
        Ok(detail.record)
    }

    /// Runs the configured number of iterations, appending to `log`.
    ///
    /// Stops at the first failed iteration; `state` and `log` then hold
    /// everything committed before it.
    pub fn run(
        &self,
        state: &mut TrainState,
        log: &mut Vec<IterationRecord>,
        mut on_iteration: impl FnMut(&IterationDetail),
    ) -> Result<()> {
        for _ in 0..self.cfg.iterations {
            let (detail, next) = self.compute(state)?;
            *state = next;
            on_iteration(&detail);
            log.push(detail.record);
        }
        Ok(())
    }
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "iteration",
    "reward_loss",
    "shape_loss",
    "gate",
    "total",
    "R_S",
    "R_T",
    "grad_norm",
    "wall_ms",
    "R_S_smooth",
    "R_T_smooth",
];

/// Metrics CSV with a `# config_hash=… seed=…` first line.
pub fn write_metrics(path: &Path, records: &[IterationRecord], config_hash: &str, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={config_hash} seed={seed}").map_err(|e| Error::io(path, e))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(METRICS_COLUMNS).map_err(|e| Error::csv(path, e))?;
        for r in records {
            let b = &r.breakdown;
            let row = [
                r.iteration.to_string(),
                b.reward_loss.to_string(),
                b.shape_loss.to_string(),
                b.gate.to_string(),
                b.total.to_string(),
                b.student_reward.to_string(),
                b.teacher_reward.to_string(),
                r.grad_norm.to_string(),
                r.wall_ms.to_string(),
                r.smoothed_student.to_string(),
                r.smoothed_teacher.to_string(),
            ];
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// The comment line and the numeric rows of a metrics CSV.
pub fn read_metrics(path: &Path) -> Result<(String, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default().to_string();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("{}: bad number {f:?}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((first, rows))
}

/// Optional per-step trajectory dump rows: `iteration, role, step, sigma, mean, norm`.
pub fn trajectory_rows(iteration: usize, role: &str, t: &Trajectory) -> Vec<[String; 6]> {
    t.records
        .iter()
        .map(|r| {
            let v = r.x0hat.value();
            let rows = v.rows().max(1) as f64;
            [
                iteration.to_string(),
                role.to_string(),
                r.step.to_string(),
                r.sigma.to_string(),
                v.mean().to_string(),
                (v.norm_sq() / rows).sqrt().to_string(),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub steps: usize,
    pub samples: usize,
    pub mean_reward: f64,
    pub per_condition_reward: Vec<f64>,
    pub mode_accuracy: f64,
}

/// Mean reward, per-condition reward and nearest-center accuracy of given samples.
pub fn summarize(scorer: &Scorer, samples: &Tensor, cond: &[usize], steps: usize) -> Result<(EvalSummary, Vec<f64>)> {
    let x = DiffTensor::constant(samples.clone());
    let rewards = scorer.per_sample(&x, cond)?.value().clone().into_data();
    let decoded = scorer.decoder.decode(&x)?;
    let centers = scorer.reward.centers();
    let k = centers.rows();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut hits = 0usize;
    for (i, &c) in cond.iter().enumerate() {
        sums[c] += rewards[i];
        counts[c] += 1;
        let row = decoded.value().row(i);
        let nearest = (0..k)
            .map(|j| {
                let d: f64 = row.iter().zip(centers.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                (j, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(j, _)| j);
        if nearest == c {
            hits += 1;
        }
    }
    let n = cond.len();
    let summary = EvalSummary {
        steps,
        samples: n,
        mean_reward: rewards.iter().sum::<f64>() / n as f64,
        per_condition_reward: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        mode_accuracy: hits as f64 / n as f64,
    };
    Ok((summary, rewards))
}

pub struct EvalOutput {
    pub summary: EvalSummary,
    pub samples: Tensor,
    pub cond: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// Samples `n` outputs with `steps` sampling steps from fixed eval streams.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    field: &VelocityField,
    adapter: Option<&AdapterState>,
    task: &ToyTask,
    scorer: &Scorer,
    steps: usize,
    shift: f64,
    n: usize,
    seed: u64,
) -> Result<EvalOutput> {
    if steps == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one step".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
    }
    let schedule = NoiseSchedule::new(steps, shift)?;
    let cond = task.sample_conditions(n, &mut RngStream::new(seed, "eval/prompt"));
    let x1 = RngStream::new(seed, "eval/x1").normal_tensor(&[n, task.dim]);
    let backbone = field.backbone().bind(false);
    let zero;
    let adapter = match adapter {
        Some(a) => a,
        None => {
            zero = crate::model::ParamSet::zeros(field.arch().adapter_layout());
            &zero
        }
    };
    let traj = rollout(
        field,
        &backbone,
        &adapter.bind(false),
        &schedule,
        &x1,
        &cond,
        &RngStream::new(seed, "eval/noise"),
        steps + 1,
    )?;
    let samples = traj.output().value().clone();
    let (summary, rewards) = summarize(scorer, &samples, &cond, steps)?;
    Ok(EvalOutput {
        summary,
        samples,
        cond,
        rewards,
    })
}

/// Flow-matching pretraining of the backbone from scratch.
pub fn pretrain(
    field: &mut VelocityField,
    task: &ToyTask,
    iterations: usize,
    batch: usize,
    optimizer: &AdamConfig,
    seed: u64,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<()> {
    optimizer.validate()?;
    let mut adam = AdamState::new(field.backbone().len());
    for it in 0..iterations {
        let cond = task.sample_conditions(batch, &mut RngStream::new(seed, format!("pretrain/prompt/{it}")));
        let (x0, _) = task.sample(&cond, &mut RngStream::new(seed, format!("pretrain/data/{it}")));
        let params = field.backbone().bind(true);
        let loss = field.pretrain_loss(&params, None, &x0, &cond, &mut RngStream::new(seed, format!("pretrain/noise/{it}")))?;
        let value = loss.item().expect("scalar loss");
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "pretraining loss".into(),
                step: it,
            });
        }
        let grads = loss.backward()?;
        let flat = field.backbone().flatten_grads(&params, &grads);
        adam_step(field.backbone_mut().values_mut(), &flat, &mut adam, optimizer)?;
        on_iteration(it, value);
    }
    Ok(())
}
