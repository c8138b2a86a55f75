use alloc::vec::Vec;

use super::{next_token_targets, omega_mask, AdamW, AdamWConfig, KdConfig, SyntheticCorpus, TrainPlan};
use super::optim::clip_global_norm;
use crate::budget::{BudgetSchedule, ControllerState};
use crate::exec::Executor;
use crate::model::{TrainMode, TransformerModel};
use crate::numerics::{Matrix, Real, Rng, Tape};
use crate::{Error, Result};

/// Budget schedule plus controller state, advanced after every update.
#[derive(Debug, Clone)]
pub struct Controller {
    pub schedule: BudgetSchedule,
    pub state: ControllerState,
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_kd: f64,
    pub loss_ce: f64,
    pub loss_total: f64,
    pub lr: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// `Σ d_m c_m / Σ c_m` after this step's controller update.
    pub retained_cost_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<StepRecord>,
    /// Per-step retentions in registration order (empty rows when the
    /// model has no gated modules).
    pub retentions: Vec<Vec<f64>>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss_total).collect()
    }
}

/// Exponential moving average seeded with the first value.
pub fn ema(values: &[f64], beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut s = match values.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in values {
        s = beta * s + (1.0 - beta) * v;
        out.push(s);
    }
    out
}

/// Plain next-token training of every parameter.
pub fn pretrain<T: Real, E: Executor>(
    model: &mut TransformerModel<T>,
    corpus: &SyntheticCorpus,
    plan: &TrainPlan,
    exec: &E,
) -> Result<TrainOutcome> {
    run(model, None, corpus, plan, TrainMode::Full, None, exec)
}

/// Distills `teacher` into `student`. `mode` picks which student tensors
/// train; the controller, when given, rewrites retentions after each
/// optimizer update at `t = (step + 1) / total_steps`.
#[allow(clippy::too_many_arguments)]
pub fn distill<T: Real, E: Executor>(
    teacher: &TransformerModel<T>,
    student: &mut TransformerModel<T>,
    corpus: &SyntheticCorpus,
    plan: &TrainPlan,
    kd: &KdConfig,
    mode: TrainMode,
    controller: Option<&mut Controller>,
    exec: &E,
) -> Result<TrainOutcome> {
    kd.validate()?;
    if teacher.config().vocab_size != student.config().vocab_size {
        return Err(Error::Compatibility(alloc::format!(
            "teacher vocabulary {} differs from student vocabulary {}",
            teacher.config().vocab_size,
            student.config().vocab_size
        )));
    }
    run(student, Some((teacher, kd)), corpus, plan, mode, controller, exec)
}

struct SeqResult<T> {
    kd: f64,
    ce: f64,
    total: f64,
    grads: Vec<Matrix<T>>,
}

fn trainable_mask<T: Real>(model: &TransformerModel<T>, mode: TrainMode) -> Vec<bool> {
    let mut mask = Vec::new();
    model.walk(&mut |_, _, kind| mask.push(kind.trainable(mode)));
    mask
}

fn sequence_grads<T: Real>(
    student: &TransformerModel<T>,
    teacher: Option<(&TransformerModel<T>, &KdConfig)>,
    tokens: &[u32],
    mode: TrainMode,
    trainable: &[bool],
) -> Result<SeqResult<T>> {
    let targets = next_token_targets(tokens);
    let mut tape = Tape::new();
    let pass = student.forward_on(&mut tape, tokens, mode)?;
    let ce = tape.cross_entropy(pass.logits, &targets)?;
    let (kd_value, loss) = match teacher {
        Some((t, cfg)) => {
            let teacher_logits = t.forward(tokens)?;
            let kd = tape.tempered_kl(pass.logits, &teacher_logits, T::cast(cfg.tau), &omega_mask(tokens.len()))?;
            let a = tape.scale(kd, T::cast(cfg.lambda_kd))?;
            let b = tape.scale(ce, T::cast(1.0 - cfg.lambda_kd))?;
            (tape.value(kd).get(0, 0).as_f64(), tape.add(a, b)?)
        }
        None => (0.0, ce),
    };
    let ce_value = tape.value(ce).get(0, 0).as_f64();
    let total = tape.value(loss).get(0, 0).as_f64();
    let mut g = tape.backward(loss)?;
    let grads = pass
        .params
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .map(|(&v, _)| {
            g.take(v).unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect();
    Ok(SeqResult {
        kd: kd_value,
        ce: ce_value,
        total,
        grads,
    })
}

fn retained_fraction<T: Real>(model: &TransformerModel<T>) -> f64 {
    let gated = model.gated_modules();
    let total: f64 = gated.iter().map(|g| g.dense_cost() as f64).sum();
    if total == 0.0 {
        return 1.0;
    }
    gated.iter().map(|g| g.retention() * g.dense_cost() as f64).sum::<f64>() / total
}

fn run<T: Real, E: Executor>(
    student: &mut TransformerModel<T>,
    teacher: Option<(&TransformerModel<T>, &KdConfig)>,
    corpus: &SyntheticCorpus,
    plan: &TrainPlan,
    mode: TrainMode,
    mut controller: Option<&mut Controller>,
    exec: &E,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if corpus.train_indices().is_empty() {
        return Err(Error::Value(alloc::string::String::from("corpus has no training sequences")));
    }
    if let Some(c) = controller.as_deref() {
        if c.state.len() != student.gated_modules().len() {
            return Err(Error::State(alloc::format!(
                "controller tracks {} modules but the student has {}",
                c.state.len(),
                student.gated_modules().len()
            )));
        }
    }
    let trainable = trainable_mask(student, mode);
    let mut initial: Vec<&Matrix<T>> = Vec::new();
    let mut k = 0;
    student.walk(&mut |_, m, _| {
        if trainable[k] {
            initial.push(m);
        }
        k += 1;
    });
    let mut opt = AdamW::new(AdamWConfig::default(), &initial);
    let base_rng = Rng::new(plan.seed);
    let mut out = TrainOutcome::default();

    for step in 0..plan.total_steps {
        let lr = plan.lr_at(step);
        let mut rng = base_rng.fork(step as u64);
        let batch = corpus.sample_batch(&mut rng, plan.batch_size);
        let model: &TransformerModel<T> = student;
        let results = exec.map(batch.len(), |i| {
            let seq = batch[i];
            let tokens = &seq[..plan.seq_len.min(seq.len())];
            sequence_grads(model, teacher, tokens, mode, &trainable)
        });

        let n = batch.len() as f64;
        let (mut kd, mut ce, mut total) = (0.0, 0.0, 0.0);
        let mut grads: Vec<Matrix<T>> = Vec::new();
        for r in results {
            let r = r?;
            kd += r.kd / n;
            ce += r.ce / n;
            total += r.total / n;
            if grads.is_empty() {
                grads = r.grads;
            } else {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.add_assign(g);
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                reason: alloc::format!("non-finite loss {total}"),
            });
        }
        let inv = T::cast(1.0 / n);
        for g in grads.iter_mut() {
            g.scale_assign(inv);
        }
        let grad_norm = clip_global_norm(&mut grads, plan.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Training {
                step,
                reason: alloc::string::String::from("non-finite gradient"),
            });
        }

        let mut params: Vec<&mut Matrix<T>> = Vec::with_capacity(grads.len());
        let mut k = 0;
        student.walk_mut(&mut |_, m, _| {
            if trainable[k] {
                params.push(m);
            }
            k += 1;
        });
        opt.step(&mut params, &grads, lr)?;
        drop(params);

        let retained = match controller.as_deref_mut() {
            Some(c) => {
                let t = (step + 1) as f64 / plan.total_steps as f64;
                let mut mods = student.gated_modules_mut();
                c.state.controller_step(&c.schedule, t, &mut mods)?.retained_fraction
            }
            None => retained_fraction(student),
        };
        out.retentions.push(student.gated_modules().iter().map(|g| g.retention()).collect());
        out.trace.push(StepRecord {
            step,
            loss_kd: kd,
            loss_ce: ce,
            loss_total: total,
            lr,
            grad_norm,
            retained_cost_fraction: retained,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::BudgetSchedule;
    use crate::distill::CorpusConfig;
    use crate::gatedlora::LoraConfig;
    use crate::model::{select_layers, Linear, SelectionMode, TransformerConfig};
    use crate::Serial;

    fn setup() -> (TransformerModel<f32>, SyntheticCorpus, TrainPlan) {
        let cfg = TransformerConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 8,
            vocab_size: 64,
            max_seq_len: 32,
        };
        let model = TransformerModel::new(cfg, &mut Rng::new(1)).unwrap();
        let corpus = SyntheticCorpus::generate(&CorpusConfig {
            n_sequences: 200,
            seq_len: 16,
            ..Default::default()
        })
        .unwrap();
        let plan = TrainPlan {
            total_steps: 10,
            base_lr: 3e-3,
            batch_size: 2,
            seq_len: 16,
            ..Default::default()
        };
        (model, corpus, plan)
    }

    fn lora() -> LoraConfig {
        LoraConfig {
            r_max: 4,
            alpha: 8.0,
            ..Default::default()
        }
    }

    #[test]
    fn copy_student_has_zero_kd_and_zero_update() {
        let (teacher, corpus, plan) = setup();
        let teacher = teacher.cast::<f64>();
        let mut student = teacher.clone();
        let kd = KdConfig { tau: 3.0, lambda_kd: 1.0 };
        let plan = TrainPlan { total_steps: 1, ..plan };
        let out = distill(&teacher, &mut student, &corpus, &plan, &kd, TrainMode::Full, None, &Serial).unwrap();
        assert!(out.trace[0].loss_total.abs() < 1e-8);
        assert!(out.trace[0].grad_norm < 1e-5);
        // lr at step 0 is 0, and the gradient is (numerically) zero
        assert_eq!(student, teacher);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (teacher, corpus, plan) = setup();
        let sel = select_layers(2, 1, SelectionMode::Mixed).unwrap();
        let go = || {
            let mut s = teacher.build_student(&sel).unwrap();
            s.wrap_with_gated_lora(&lora(), &mut Rng::new(3)).unwrap();
            let out = distill(&teacher, &mut s, &corpus, &plan, &KdConfig::default(), TrainMode::Lora, None, &Serial)
                .unwrap();
            (s, out)
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn lora_mode_freezes_dense_and_teacher() {
        let (teacher, corpus, plan) = setup();
        let before = teacher.clone();
        let mut s = teacher.clone();
        s.wrap_with_gated_lora(&lora(), &mut Rng::new(3)).unwrap();
        let frozen: Vec<Matrix<f32>> = s.gated_modules().iter().map(|g| g.weight().clone()).collect();
        let b0: Vec<Matrix<f32>> = s.gated_modules().iter().map(|g| g.lora_b().clone()).collect();
        let embed = s.embed().clone();
        distill(&teacher, &mut s, &corpus, &plan, &KdConfig::default(), TrainMode::Lora, None, &Serial).unwrap();
        assert_eq!(teacher, before);
        for (g, w) in s.gated_modules().iter().zip(&frozen) {
            assert_eq!(g.weight(), w);
        }
        assert_eq!(s.embed(), &embed);
        assert!(s.gated_modules().iter().zip(&b0).any(|(g, b)| g.lora_b() != b));
    }

    #[test]
    fn controller_drives_retention_to_target() {
        let (teacher, corpus, plan) = setup();
        let plan = TrainPlan { total_steps: 20, ..plan };
        let mut s = teacher.clone();
        s.wrap_with_gated_lora(&lora(), &mut Rng::new(3)).unwrap();
        let state = ControllerState::for_modules(&s.gated_modules(), 0.0, 1e-3).unwrap();
        let mut ctl = Controller {
            schedule: BudgetSchedule::short_decay(0.0).unwrap(),
            state,
        };
        let out = distill(
            &teacher,
            &mut s,
            &corpus,
            &plan,
            &KdConfig::default(),
            TrainMode::Lora,
            Some(&mut ctl),
            &Serial,
        )
        .unwrap();
        assert_eq!(out.trace[0].retained_cost_fraction, 1.0);
        assert_eq!(out.trace.last().unwrap().retained_cost_fraction, 0.0);
        assert!(s.gated_modules().iter().all(|g| g.retention() == 0.0));
        assert!(out.trace.windows(2).all(|w| w[1].retained_cost_fraction <= w[0].retained_cost_fraction));
    }

    #[test]
    fn full_and_pretrain_reduce_loss() {
        let (mut model, corpus, plan) = setup();
        let plan = TrainPlan { total_steps: 60, ..plan };
        let out = pretrain(&mut model, &corpus, &plan, &Serial).unwrap();
        let l = out.losses();
        let first: f64 = l[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "{first} -> {last}");
        assert!(model.linears().all(|(_, _, l)| matches!(l, Linear::Dense(_))));
    }

    #[test]
    fn vocab_mismatch_and_controller_mismatch() {
        let (teacher, corpus, plan) = setup();
        let mut cfg = *teacher.config();
        cfg.vocab_size = 65;
        let mut other = TransformerModel::<f32>::new(cfg, &mut Rng::new(2)).unwrap();
        let r = distill(&teacher, &mut other, &corpus, &plan, &KdConfig::default(), TrainMode::Full, None, &Serial);
        assert!(matches!(r, Err(Error::Compatibility(_))));

        let mut s = teacher.clone();
        let mut ctl = Controller {
            schedule: BudgetSchedule::short_decay(0.0).unwrap(),
            state: ControllerState::new(&[1, 2], 0.9, 1e-3).unwrap(),
        };
        let r = distill(
            &teacher,
            &mut s,
            &corpus,
            &plan,
            &KdConfig::default(),
            TrainMode::Lora,
            Some(&mut ctl),
            &Serial,
        );
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn ema_smooths() {
        assert_eq!(ema(&[], 0.9), Vec::<f64>::new());
        let e = ema(&[1.0, 0.0, 0.0], 0.5);
        assert_eq!(e, alloc::vec![1.0, 0.5, 0.25]);
    }
}
