//! Contracts of the pre-training loss, the EMA teacher, the fine-tuning
//! schedule and prediction.

use rand::Rng;
use smart_core::data::{
    apply_mask_plan, generate_synthetic, sample_mask_plan, Batch, Dataset, EhrRecord, MaskPlan, Missingness,
    SyntheticSpec, TaskKind,
};
use smart_core::model::{AblationFlags, MartModel, Mode, ModelConfig};
use smart_core::rng::stream;
use smart_core::train::{
    ema_update, epoch_mask_plan, finetune, predict, pretrain, pretrain_epoch, reconstruction_loss, teacher_targets,
    PretrainBatch, PretrainState, TrainConfig,
};
use smart_core::{Error, ParamStore, Tape, Tensor};

fn dataset(n: usize, steps: usize, task: TaskKind, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_patients: n,
        vars: 4,
        t_max: steps,
        min_steps: Some(2),
        observed_rate: 0.4,
        missingness: Missingness::MnarBySeverity,
        positive_rate: 0.3,
        task,
        seed,
    })
    .unwrap()
}

fn small_model(task: TaskKind, seed: u64) -> MartModel {
    let config = ModelConfig {
        vars: 4,
        dim: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    MartModel::new(config, AblationFlags::default(), task, seed).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 2,
        finetune_epochs: 3,
        unfreeze_epoch: 1,
        batch_size: 16,
        micro_batch: 8,
        ..TrainConfig::default()
    }
}

fn loss_of(model: &MartModel, pb: &PretrainBatch, targets: &Tensor) -> f64 {
    let mut t = Tape::new();
    let l = reconstruction_loss(&mut t, model, pb, targets, 1.0, &mut Mode::Eval).unwrap();
    t.value(l).data()[0]
}

fn random_plans(records: &[&EhrRecord], rate: f64, seed: u64) -> Vec<MaskPlan> {
    let mut r = stream(seed, &[]);
    records
        .iter()
        .map(|rec| sample_mask_plan(&rec.extended_mask(), rec.vars(), (rate, rate), &mut r).unwrap())
        .collect()
}

#[test]
fn empty_plan_gives_zero_loss_and_no_step() {
    let data = dataset(40, 8, TaskKind::Binary, 1);
    let model = small_model(TaskKind::Binary, 2);
    let records: Vec<&EhrRecord> = data.train.iter().take(6).collect();
    let plans: Vec<MaskPlan> = records
        .iter()
        .map(|r| MaskPlan::empty(r.steps() + 1, r.vars()))
        .collect();
    let pb = PretrainBatch::new(&records, &plans, 1).unwrap();
    assert_eq!(pb.removed, 0);
    let targets = teacher_targets(&model, &model.teacher(), &pb).unwrap();
    assert_eq!(loss_of(&model, &pb, &targets), 0.0);

    let mut trained = model.clone();
    let config = TrainConfig {
        mask_interval: (0.0, 0.0),
        ..small_config()
    };
    let mut state = PretrainState::new(&trained, &config);
    assert_eq!(
        pretrain_epoch(&mut trained, &mut state, &data.train, &config).unwrap(),
        0.0
    );
    assert_eq!(trained.store, model.store);
    assert_eq!(state.teacher, model.teacher());
}

/// Targets only matter at removed cells; in particular never on the
/// summary row.
#[test]
fn loss_ignores_targets_outside_removed_cells() {
    let data = dataset(60, 10, TaskKind::Binary, 3);
    let model = small_model(TaskKind::Binary, 4);
    let mut rng = stream(5, &[]);
    for trial in 0..20 {
        let records: Vec<&EhrRecord> = data.train.iter().skip(trial * 2).take(5).collect();
        let plans = random_plans(&records, 0.5, trial as u64);
        for p in &plans {
            assert!(p.removed[..p.vars].iter().all(|&x| !x));
        }
        let pb = PretrainBatch::new(&records, &plans, 1).unwrap();
        let targets = teacher_targets(&model, &model.teacher(), &pb).unwrap();
        let base = loss_of(&model, &pb, &targets);

        let s = targets.shape().to_vec();
        let (rows, vars, dim) = (s[1], s[2], s[3]);
        let mut perturbed = targets.clone();
        for (i, x) in perturbed.data_mut().iter_mut().enumerate() {
            let cell = i / dim;
            let row = (cell / vars) % rows;
            if pb.weights.data()[cell] == 0.0 || row == 0 {
                *x += rng.random_range(-5.0..5.0);
            }
        }
        assert_eq!(loss_of(&model, &pb, &perturbed), base);
        assert!(pb.weights.data()[..vars].iter().all(|&w| w == 0.0));

        if pb.removed > 0 {
            let mut moved = targets.clone();
            let cell = pb.weights.data().iter().position(|&w| w > 0.0).unwrap();
            moved.data_mut()[cell * dim] += 1.0;
            assert_ne!(loss_of(&model, &pb, &moved), base);
        }
    }
}

#[test]
fn student_equal_to_teacher_reproduces_targets() {
    let data = dataset(30, 8, TaskKind::Binary, 6);
    let model = small_model(TaskKind::Binary, 7);
    let records: Vec<&EhrRecord> = data.train.iter().take(8).collect();
    let plans: Vec<MaskPlan> = records
        .iter()
        .map(|r| MaskPlan::empty(r.steps() + 1, r.vars()))
        .collect();
    let pb = PretrainBatch::new(&records, &plans, 1).unwrap();
    assert_eq!(pb.augmented, pb.original);
    let targets = teacher_targets(&model, &model.teacher(), &pb).unwrap();
    let mut t = Tape::new();
    let a = &pb.augmented;
    let rep = model
        .backbone(&mut t, &model.store, &a.values, &a.mask, &a.lengths, &mut Mode::Eval)
        .unwrap();
    assert_eq!(t.value(rep.s), &targets);
    let ones = Tensor::full(pb.weights.shape().to_vec(), 1.0);
    let l = t.masked_l1(rep.s, &targets, &ones, 1.0).unwrap();
    assert_eq!(t.value(l).data()[0], 0.0);
}

#[test]
fn ema_contract() {
    let model = small_model(TaskKind::Binary, 8);
    let mut student = model.store.clone();
    let mut rng = stream(9, &[]);
    for id in student.ids().collect::<Vec<_>>() {
        for x in student.get_mut(id).tensor.data_mut() {
            *x += rng.random_range(-1.0..1.0);
        }
    }
    let teacher0 = model.teacher();

    let mut fixed = teacher0.clone();
    ema_update(&mut fixed, &student, 1.0).unwrap();
    assert_eq!(fixed, teacher0);

    let mut copied = teacher0.clone();
    ema_update(&mut copied, &student, 0.0).unwrap();
    for (id, p) in copied.iter() {
        assert_eq!(p.tensor, student.get(id).tensor);
    }

    let mut one = ParamStore::new();
    one.add("w", Tensor::scalar(1.0)).unwrap();
    let mut zero = ParamStore::new();
    zero.add("w", Tensor::scalar(0.0)).unwrap();
    ema_update(&mut one, &zero, 0.996).unwrap();
    assert_eq!(one.iter().next().unwrap().1.tensor.data()[0], 0.996);

    for k in [1, 10, 250] {
        let lambda: f64 = 0.996;
        let mut teacher = teacher0.clone();
        for _ in 0..k {
            ema_update(&mut teacher, &student, lambda).unwrap();
        }
        let lk = lambda.powi(k);
        for (id, p) in teacher.iter() {
            let t0 = teacher0.get(id).tensor.data();
            let s = student.get(id).tensor.data();
            for (j, &got) in p.tensor.data().iter().enumerate() {
                let expect = lk * t0[j] + (1.0 - lk) * s[j];
                assert!((got - expect).abs() <= 1e-12, "k={k} {}: {got} vs {expect}", p.name);
            }
        }
    }

    let mut wrong = ParamStore::new();
    wrong.add("other", Tensor::scalar(0.0)).unwrap();
    assert!(matches!(
        ema_update(&mut wrong, &student, 0.5),
        Err(Error::TreeMismatch(_))
    ));
}

#[test]
fn teacher_moves_only_through_ema() {
    let data = dataset(40, 8, TaskKind::Binary, 10);
    let mut model = small_model(TaskKind::Binary, 11);
    let config = TrainConfig {
        ema_decay: 1.0,
        ..small_config()
    };
    let mut state = PretrainState::new(&model, &config);
    let before = state.teacher.clone();
    pretrain(&mut model, &mut state, &data.train, &config, &mut |_| {}).unwrap();
    assert_eq!(state.teacher, before);
    assert_ne!(model.teacher(), before);
    assert_eq!(state.epochs_done, 2);
}

#[test]
fn frozen_epochs_leave_the_backbone_bitwise_unchanged() {
    let data = dataset(60, 8, TaskKind::Binary, 12);
    let base = small_model(TaskKind::Binary, 13);
    let config = TrainConfig {
        finetune_epochs: 2,
        unfreeze_epoch: 2,
        ..small_config()
    };
    let mut model = base.clone();
    finetune(&mut model, &data.train, &data.val, &config, true, &mut |_| {}).unwrap();
    for id in base.backbone_ids() {
        assert_eq!(
            model.store.get(id).tensor,
            base.store.get(id).tensor,
            "{}",
            base.store.get(id).name
        );
    }
    for id in base.embedding_decoder.ids() {
        assert_eq!(model.store.get(id).tensor, base.store.get(id).tensor);
    }
    let out = base.label_decoder.out.weight;
    assert_ne!(model.store.get(out).tensor, base.store.get(out).tensor);
    assert!(model.store.iter().all(|(_, p)| p.trainable));

    // without pre-training nothing is frozen
    let mut fresh = base.clone();
    finetune(&mut fresh, &data.train, &data.val, &config, false, &mut |_| {}).unwrap();
    let first = base.backbone_ids().next().unwrap();
    assert_ne!(fresh.store.get(first).tensor, base.store.get(first).tensor);
}

#[test]
fn zero_finetune_epochs_is_the_identity() {
    let data = dataset(30, 6, TaskKind::Binary, 14);
    let base = small_model(TaskKind::Binary, 15);
    let mut model = base.clone();
    let config = TrainConfig {
        finetune_epochs: 0,
        unfreeze_epoch: 0,
        ..small_config()
    };
    let outcome = finetune(&mut model, &data.train, &data.val, &config, true, &mut |_| {}).unwrap();
    assert_eq!(outcome.best_epoch, None);
    assert!(outcome.history.is_empty());
    assert_eq!(model.store, base.store);
}

#[test]
fn every_parameter_learns_after_unfreezing() {
    let data = dataset(40, 8, TaskKind::Binary, 16);
    let mut model = small_model(TaskKind::Binary, 17);
    // the output layer starts at zero, which blocks every upstream gradient
    let out = model.label_decoder.out.weight;
    let p = model.store.get_mut(out);
    p.tensor = Tensor::from_fn(p.tensor.shape().to_vec(), |i| (i as f64 * 0.7).sin());
    let batch = Batch::from_records(&data.train).unwrap();
    let mut t = Tape::new();
    let logits = model.classify_batch(&mut t, &batch, &mut Mode::Eval).unwrap();
    let y = Tensor::from_fn([batch.size(), 1], |i| {
        f64::from(u8::from(batch.labels[i] == smart_core::data::Label::Binary(true)))
    });
    let loss = t.bce_with_logits(logits, &y, batch.size() as f64).unwrap();
    let grads = t.backward(loss).unwrap();
    let skip = model.embedding_decoder.ids();
    for (id, p) in model.store.iter().filter(|(id, _)| !skip.contains(id)) {
        let g = grads.param(id).unwrap_or_else(|| panic!("{} untouched", p.name));
        assert!(g.data().iter().any(|&x| x != 0.0), "{} has zero gradient", p.name);
    }
}

#[test]
fn prediction_is_deterministic_and_order_equivariant() {
    for task in [
        TaskKind::Binary,
        TaskKind::MultiLabel { labels: 25 },
        TaskKind::MultiClass { classes: 10 },
    ] {
        let data = dataset(40, 8, task, 18);
        let model = small_model(task, 19);
        let a = predict(&model, &data.train, 7).unwrap();
        assert_eq!(a, predict(&model, &data.train, 7).unwrap());
        assert!(a.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
        if let TaskKind::MultiClass { .. } = task {
            assert!(a.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12));
        }
        let reversed: Vec<EhrRecord> = data.train.iter().rev().cloned().collect();
        let b = predict(&model, &reversed, 5).unwrap();
        let back: Vec<Vec<f64>> = b.into_iter().rev().collect();
        assert_eq!(back, a);
    }
}

#[test]
fn micro_batches_only_change_rounding() {
    let data = dataset(50, 8, TaskKind::Binary, 20);
    let mut base = small_model(TaskKind::Binary, 21);
    // dropout masks are drawn per micro-batch, so compare without them
    base.config.dropout = 0.0;
    let run = |micro: usize| {
        let mut model = base.clone();
        let config = TrainConfig {
            micro_batch: micro,
            finetune_epochs: 1,
            unfreeze_epoch: 0,
            ..small_config()
        };
        let mut state = PretrainState::new(&model, &config);
        pretrain(&mut model, &mut state, &data.train, &config, &mut |_| {}).unwrap();
        finetune(&mut model, &data.train, &[], &config, true, &mut |_| {}).unwrap();
        model.store
    };
    let (a, b) = (run(16), run(3));
    for (id, p) in a.iter() {
        for (x, y) in p.tensor.data().iter().zip(b.get(id).tensor.data()) {
            assert!((x - y).abs() <= 1e-9, "{}: {x} vs {y}", p.name);
        }
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = dataset(50, 8, TaskKind::Binary, 22);
    let run = || {
        let mut model = small_model(TaskKind::Binary, 23);
        let config = small_config();
        let mut state = PretrainState::new(&model, &config);
        let mut logs = Vec::new();
        pretrain(&mut model, &mut state, &data.train, &config, &mut |l| logs.push(*l)).unwrap();
        let outcome = finetune(&mut model, &data.train, &data.val, &config, true, &mut |l| {
            logs.push(*l)
        })
        .unwrap();
        (model.store, state.teacher, logs, outcome)
    };
    assert_eq!(run(), run());
}

#[test]
fn mask_plans_follow_the_schedule() {
    let data = dataset(80, 12, TaskKind::Binary, 24);
    let config = small_config();
    let mut differing = 0;
    for (i, rec) in data.train.iter().enumerate() {
        let p0 = epoch_mask_plan(rec, i, 0, &config).unwrap();
        assert_eq!(p0, epoch_mask_plan(rec, i, 0, &config).unwrap());
        let p1 = epoch_mask_plan(rec, i, 1, &config).unwrap();
        differing += usize::from(p0.removed != p1.removed);
        for p in [&p0, &p1] {
            assert!((0.0..0.75).contains(&p.rate));
            assert!(p.removed[..rec.vars()].iter().all(|&x| !x));
            for (c, &r) in p.data_rows().iter().enumerate() {
                assert!(!r || rec.mask()[c], "removed an unobserved cell");
            }
            let (x, m) = apply_mask_plan(rec.values(), rec.mask(), p).unwrap();
            let observed = |m: &[bool]| m.iter().filter(|&&b| b).count();
            assert_eq!(observed(&m), observed(rec.mask()) - p.removed_count());
            assert!(x.iter().zip(&m).all(|(&v, &o)| o || v == 0.0));
        }
    }
    assert!(
        differing * 10 > data.train.len() * 9,
        "only {differing} plans changed between epochs"
    );
}

#[test]
fn pretraining_loss_falls_early() {
    for seed in [1, 42, 3407] {
        let data = dataset(200, 16, TaskKind::Binary, seed);
        let mut model = small_model(TaskKind::Binary, seed);
        let config = TrainConfig {
            pretrain_epochs: 5,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        };
        let mut state = PretrainState::new(&model, &config);
        let mut losses = Vec::new();
        pretrain(&mut model, &mut state, &data.train, &config, &mut |l| {
            losses.push(l.loss)
        })
        .unwrap();
        assert!(losses[4] < losses[0], "seed {seed}: {losses:?}");
    }
}
