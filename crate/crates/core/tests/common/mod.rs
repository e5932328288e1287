#![allow(dead_code)]

use rats_core::config::RunConfig;
use rats_core::model::VelocityField;
use rats_core::rng::RngStream;
use rats_core::train::pretrain;

pub const SMALL: &str = r#"
seed = 3

[task]
dim = 2
conditions = 3
radius = 1.0
own_mode_prob = 0.6
mode_std = 0.05

[model]
hidden = [12, 12]
adapter_rank = 6

[pretrain]
iterations = 150
batch = 64
optimizer = { learning_rate = 0.003 }

[reward]
model = { kind = "composite", beta = 8.0, other_weight = 0.2, align = 0.1 }

[sampler]
student_steps = 3
teacher_steps = 10
shift = 3.0

[rats]
iterations = 6
batch = 8
alpha = 2.0
gamma = 0.9
temperature = 0.02
horizons = { targets = [0.75, 0.40, 0.15], weights = [0.2, 0.3, 0.5] }
optimizer = { learning_rate = 0.01, max_grad_norm = 1.0 }

[eval]
samples = 32
steps = [3, 10]
seed = 11
"#;

pub fn small_config() -> RunConfig {
    RunConfig::parse(SMALL).unwrap()
}

pub fn small_field(cfg: &RunConfig) -> VelocityField {
    let mut field = VelocityField::init(cfg.arch(), &mut RngStream::new(cfg.seed, "init/backbone")).unwrap();
    pretrain(
        &mut field,
        &cfg.task,
        cfg.pretrain.iterations,
        cfg.pretrain.batch,
        &cfg.pretrain.optimizer,
        cfg.seed,
        |_, _| {},
    )
    .unwrap();
    field
}

/// Adds noise to every adapter value so gradients reach both factors.
pub fn perturbed_adapter(field: &VelocityField, seed: u64, scale: f64) -> rats_core::model::AdapterState {
    let mut a = field.init_adapter(&mut RngStream::new(seed, "init/adapter"));
    let mut r = RngStream::new(seed, "perturb");
    for v in a.values_mut() {
        *v += scale * r.normal();
    }
    a
}
