//! Training progress on the desk corpus with budgeting switched off (F = 1).

use budlora_core::budget::{BudgetSchedule, ControllerState};
use budlora_core::distill::{distill, ema, pretrain, Controller, CorpusConfig, KdConfig, SyntheticCorpus, TrainPlan};
use budlora_core::gatedlora::LoraConfig;
use budlora_core::model::{select_layers, SelectionMode, TrainMode, TransformerConfig, TransformerModel};
use budlora_core::{Rng, Serial};

#[test]
fn budgeted_f1_distillation_reduces_smoothed_loss() {
    let cfg = TransformerConfig {
        n_layers: 4,
        ..TransformerConfig::desk()
    };
    let corpus = SyntheticCorpus::generate(&CorpusConfig {
        n_sequences: 1024,
        seq_len: 32,
        ..Default::default()
    })
    .unwrap();
    let plan = TrainPlan {
        total_steps: 200,
        base_lr: 3e-3,
        seq_len: 32,
        ..Default::default()
    };
    let mut teacher = TransformerModel::<f32>::new(cfg, &mut Rng::new(1)).unwrap();
    pretrain(&mut teacher, &corpus, &plan, &Serial).unwrap();

    let sel = select_layers(4, 2, SelectionMode::Mixed).unwrap();
    let mut student = teacher.build_student(&sel).unwrap();
    let lora = LoraConfig {
        r_max: 16,
        alpha: 32.0,
        ..Default::default()
    };
    student.wrap_with_gated_lora(&lora, &mut Rng::new(2)).unwrap();
    let mut ctl = Controller {
        schedule: BudgetSchedule::short_decay(1.0).unwrap(),
        state: ControllerState::for_modules(&student.gated_modules(), 0.9, 1e-3).unwrap(),
    };
    let plan = TrainPlan {
        total_steps: 500,
        base_lr: 1e-3,
        seed: 7,
        ..plan
    };
    let out = distill(&teacher, &mut student, &corpus, &plan, &KdConfig::default(), TrainMode::Lora, Some(&mut ctl), &Serial).unwrap();
    let losses = out.losses();
    let smoothed = ema(&losses, 0.98);
    assert!(smoothed.last().unwrap() < &losses[0], "{} -> {}", losses[0], smoothed.last().unwrap());
    assert!(out.trace.iter().all(|r| r.retained_cost_fraction == 1.0));
}
