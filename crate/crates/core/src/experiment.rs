//! Command implementations behind the `rats` binary.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{HorizonScheme, RunConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, AdapterState, ParamRole, VelocityField};
use crate::rng::RngStream;
use crate::train::{
    evaluate, pretrain, trajectory_rows, write_metrics, Ablation, EvalSummary, IterationRecord, TrainConfig,
    TrainState, Trainer,
};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

fn save_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let body = cfg.to_toml()?;
    write_text(&out.join("config.toml"), &format!("# config_hash={}\n{body}", cfg.hash()))
}

/// Pretrains the backbone; writes `backbone.ckpt`, `pretrain.csv` and `config.toml`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let hash = cfg.hash();
    let mut field = VelocityField::init(cfg.arch(), &mut RngStream::new(cfg.seed, "init/backbone"))?;
    let mut losses = Vec::with_capacity(cfg.pretrain.iterations);
    pretrain(
        &mut field,
        &cfg.task,
        cfg.pretrain.iterations,
        cfg.pretrain.batch,
        &cfg.pretrain.optimizer,
        cfg.seed,
        |_, l| losses.push(l),
    )?;
    let mut csv = format!("# config_hash={hash} seed={}\niteration,loss\n", cfg.seed);
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&out.join("pretrain.csv"), &csv)?;
    let path = out.join("backbone.ckpt");
    save_checkpoint(&path, ParamRole::Backbone, field.arch(), field.backbone(), &hash, cfg.seed)?;
    save_config(cfg, out)?;
    Ok(path)
}

/// Loads the backbone named in the config.
pub fn load_backbone(cfg: &RunConfig, base_dir: &Path) -> Result<VelocityField> {
    let path = cfg
        .backbone_path(base_dir)
        .ok_or_else(|| Error::Config("model.backbone is required; run `pretrain` first".into()))?;
    let (header, params) = load_checkpoint(&path)?;
    if header.role != ParamRole::Backbone {
        return Err(Error::Checkpoint {
            path,
            msg: format!("expected a backbone checkpoint, found {:?}", header.role),
        });
    }
    if header.arch != cfg.arch() {
        return Err(Error::Checkpoint {
            path,
            msg: "backbone architecture does not match the config".into(),
        });
    }
    VelocityField::from_parts(header.arch, params)
}

fn initial_adapter(field: &VelocityField, seed: u64) -> AdapterState {
    field.init_adapter(&mut RngStream::new(seed, "init/adapter"))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub iterations_completed: usize,
    pub window_start: usize,
    pub final_student_reward: Option<f64>,
    pub final_teacher_reward: Option<f64>,
    pub final_smoothed_student: Option<f64>,
    pub final_smoothed_teacher: Option<f64>,
    pub final_gate: Option<f64>,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<IterationRecord>,
    pub state: TrainState,
}

/// Trains one adapter with `train` on `field`, writing artifacts into `out`.
///
/// Metrics and checkpoints of completed iterations are written even when an
/// iteration fails; the failure is then returned.
pub fn train_to_dir(
    cfg: &RunConfig,
    train: &TrainConfig,
    field: &VelocityField,
    out: &Path,
) -> Result<RunOutput> {
    create_dir(out)?;
    let hash = cfg.hash();
    let scorer = cfg.scorer()?;
    let trainer = Trainer::new(train, field, &cfg.task, &scorer)?;
    let mut state = TrainState::new(initial_adapter(field, train.seed));
    let mut records = Vec::with_capacity(train.iterations);
    let mut dump = cfg.rats.trajectory_dump.then(|| {
        String::from("iteration,role,step,sigma,mean,norm\n")
    });
    let result = trainer.run(&mut state, &mut records, |d| {
        if let Some(buf) = dump.as_mut() {
            let it = d.record.iteration;
            for row in trajectory_rows(it, "student", &d.student)
                .into_iter()
                .chain(trajectory_rows(it, "teacher", &d.teacher))
            {
                buf.push_str(&row.join(","));
                buf.push('\n');
            }
        }
    });

    write_metrics(&out.join("metrics.csv"), &records, &hash, train.seed)?;
    if let Some(buf) = dump {
        write_text(
            &out.join("trajectory.csv"),
            &format!("# config_hash={hash} seed={}\n{buf}", train.seed),
        )?;
    }
    save_checkpoint(&out.join("adapter.ckpt"), ParamRole::Adapter, field.arch(), &state.student, &hash, train.seed)?;
    save_checkpoint(&out.join("teacher.ckpt"), ParamRole::Teacher, field.arch(), &state.teacher, &hash, train.seed)?;
    let last = records.last();
    let summary = RunSummary {
        config_hash: hash,
        seed: train.seed,
        ablation: train.ablation,
        iterations_completed: records.len(),
        window_start: trainer.window_start(),
        final_student_reward: last.map(|r| r.breakdown.student_reward),
        final_teacher_reward: last.map(|r| r.breakdown.teacher_reward),
        final_smoothed_student: last.map(|r| r.smoothed_student),
        final_smoothed_teacher: last.map(|r| r.smoothed_teacher),
        final_gate: last.map(|r| r.breakdown.gate),
    };
    write_json(&out.join("summary.json"), &summary)?;
    result?;
    Ok(RunOutput {
        summary,
        records,
        state,
    })
}

/// One RATS run from the config; artifacts go to `out`.
pub fn cmd_rats(cfg: &RunConfig, base_dir: &Path, out: &Path) -> Result<RunOutput> {
    let field = load_backbone(cfg, base_dir)?;
    create_dir(out)?;
    save_config(cfg, out)?;
    train_to_dir(cfg, &cfg.train_config(), &field, out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub mode: Ablation,
    pub alpha: f64,
    pub scheme: HorizonScheme,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: Ablation, scheme: HorizonScheme) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.scheme == scheme)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# config_hash={} seeds={}\ncell,mode,alpha,scheme,mean",
            self.config_hash,
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
        );
        for seed in &self.seeds {
            s.push_str(&format!(",seed_{seed}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}", r.cell, r.mode.name(), r.alpha, r.scheme.name(), r.mean));
            for v in &r.per_seed {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every grid cell with the same seeds and tabulates final smoothed student reward.
pub fn cmd_ablate(cfg: &RunConfig, base_dir: &Path, out: &Path) -> Result<AblationTable> {
    let grid = cfg
        .ablate
        .as_ref()
        .ok_or_else(|| Error::Config("no [ablate] grid in config".into()))?;
    if grid.seeds.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let field = load_backbone(cfg, base_dir)?;
    ablate_with(cfg, &field, out)
}

/// [`cmd_ablate`] with an already loaded backbone.
pub fn ablate_with(cfg: &RunConfig, field: &VelocityField, out: &Path) -> Result<AblationTable> {
    let grid = cfg
        .ablate
        .as_ref()
        .ok_or_else(|| Error::Config("no [ablate] grid in config".into()))?;
    create_dir(out)?;
    save_config(cfg, out)?;
    let base = cfg.train_config();
    let modes = if grid.modes.is_empty() { vec![base.ablation] } else { grid.modes.clone() };
    let alphas = if grid.alphas.is_empty() { vec![base.alpha] } else { grid.alphas.clone() };
    let schemes = if grid.horizon_schemes.is_empty() {
        vec![HorizonScheme::NonUniform]
    } else {
        grid.horizon_schemes.clone()
    };
    let mut rows = Vec::new();
    for &mode in &modes {
        for &alpha in &alphas {
            for &scheme in &schemes {
                let cell = format!("{}_a{}_{}", mode.name(), alpha, scheme.name());
                let mut per_seed = Vec::with_capacity(grid.seeds.len());
                for &seed in &grid.seeds {
                    let train = TrainConfig {
                        ablation: mode,
                        alpha,
                        horizons: scheme.apply(&base.horizons)?,
                        seed,
                        ..base.clone()
                    };
                    let dir = out.join("cells").join(&cell).join(format!("seed_{seed}"));
                    let run = train_to_dir(cfg, &train, field, &dir)?;
                    per_seed.push(run.summary.final_smoothed_student.unwrap_or(f64::NAN));
                }
                let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
                rows.push(AblationRow {
                    cell,
                    mode,
                    alpha,
                    scheme,
                    per_seed,
                    mean,
                });
            }
        }
    }
    let table = AblationTable {
        config_hash: cfg.hash(),
        seeds: grid.seeds.clone(),
        rows,
    };
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub results: Vec<EvalSummary>,
}

/// Evaluates the backbone, or backbone plus the adapter at `checkpoint`, at each step count.
pub fn cmd_eval(
    cfg: &RunConfig,
    base_dir: &Path,
    checkpoint: Option<&Path>,
    steps: &[usize],
    out: &Path,
) -> Result<EvalReport> {
    if steps.is_empty() || steps.contains(&0) {
        return Err(Error::InvalidArgument("step counts must be >= 1".into()));
    }
    let field = load_backbone(cfg, base_dir)?;
    let adapter = match checkpoint {
        None => None,
        Some(path) => {
            let (header, params) = load_checkpoint(path)?;
            if header.arch != cfg.arch() || params.layout() != &cfg.arch().adapter_layout() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: "adapter does not match the configured architecture".into(),
                });
            }
            Some(params)
        }
    };
    eval_with(cfg, &field, adapter.as_ref(), checkpoint, steps, out)
}

/// [`cmd_eval`] with an already loaded backbone and adapter.
pub fn eval_with(
    cfg: &RunConfig,
    field: &VelocityField,
    adapter: Option<&AdapterState>,
    checkpoint: Option<&Path>,
    steps: &[usize],
    out: &Path,
) -> Result<EvalReport> {
    create_dir(out)?;
    let scorer = cfg.scorer()?;
    let hash = cfg.hash();
    let mut results = Vec::with_capacity(steps.len());
    for &n in steps {
        let r = evaluate(
            field,
            adapter,
            &cfg.task,
            &scorer,
            n,
            cfg.sampler.shift,
            cfg.eval.samples,
            cfg.eval.seed,
        )?;
        let mut csv = format!("# config_hash={hash} seed={}\ncondition", cfg.eval.seed);
        for j in 0..cfg.task.dim {
            csv.push_str(&format!(",x{j}"));
        }
        csv.push_str(",reward\n");
        for (i, &c) in r.cond.iter().enumerate() {
            csv.push_str(&c.to_string());
            for v in r.samples.row(i) {
                csv.push_str(&format!(",{v}"));
            }
            csv.push_str(&format!(",{}\n", r.rewards[i]));
        }
        write_text(&out.join(format!("samples_{n}.csv")), &csv)?;
        results.push(r.summary);
    }
    let report = EvalReport {
        config_hash: hash,
        seed: cfg.eval.seed,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        results,
    };
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}
