//! Finite-difference checks (h = 1e-5, f64) for every differentiable op and
//! for composed models.

use rand::Rng;
use smart_core::data::{EhrRecord, Label, MaskPlan, TaskKind};
use smart_core::gradcheck::{check_inputs, check_params};
use smart_core::mart::{batch_bias, feed_forward, FeedForwardParams, LinearParams, NormParams};
use smart_core::model::{AblationFlags, MartModel, Mode, ModelConfig};
use smart_core::rng::{stream, SmartRng};
use smart_core::train::{reconstruction_loss, teacher_targets, PretrainBatch};
use smart_core::{ParamStore, Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn uniform(shape: &[usize], rng: &mut SmartRng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

/// Reduce `out` to a scalar with fixed random weights so no symmetry hides
/// gradient errors (a plain sum of a softmax is constant, for instance).
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut r = stream(seed, &[99]);
    let w = uniform(tape.shape(out), &mut r);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn assert_close(name: &str, errors: &[f64]) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {i} relative error {e:e}");
    }
}

fn check<F>(name: &str, shapes: &[&[usize]], seed: u64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut r = stream(seed, &[]);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut r)).collect();
    let errors = check_inputs(&inputs, H, |t, v| {
        let out = f(t, v)?;
        if t.value(out).numel() == 1 {
            Ok(out)
        } else {
            project(t, out, seed)
        }
    })
    .unwrap();
    assert_close(name, &errors);
}

#[test]
fn matmul_sum_matches_finite_differences() {
    check("matmul", &[&[3, 4], &[4, 2]], 1, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        t.sum(m)
    });
    check("matmul projected", &[&[3, 4], &[4, 2]], 2, |t, v| t.matmul(v[0], v[1]));
    check("batched matmul", &[&[2, 3, 4], &[4, 5]], 3, |t, v| t.matmul(v[0], v[1]));
    check("batched both", &[&[2, 3, 4], &[2, 4, 2]], 4, |t, v| {
        t.matmul(v[0], v[1])
    });
}

#[test]
fn elementwise_and_reductions() {
    check("add broadcast", &[&[2, 3, 4], &[3, 1]], 5, |t, v| t.add(v[0], v[1]));
    check("sub", &[&[2, 3], &[2, 3]], 6, |t, v| t.sub(v[0], v[1]));
    check("mul broadcast", &[&[2, 3], &[3]], 7, |t, v| t.mul(v[0], v[1]));
    check("scale", &[&[4]], 8, |t, v| t.scale(v[0], -1.5));
    check("reshape", &[&[2, 6]], 9, |t, v| t.reshape(v[0], &[3, 4]));
    check("mean", &[&[2, 5]], 10, |t, v| t.mean(v[0]));
}

#[test]
fn softmax_layer_norm_linear_gelu() {
    check("softmax last", &[&[3, 5]], 11, |t, v| t.softmax(v[0], 1));
    check("softmax first", &[&[3, 5]], 12, |t, v| t.softmax(v[0], 0));
    check("layer_norm", &[&[4, 6], &[6], &[6]], 13, |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });
    check("linear", &[&[2, 3, 5], &[5, 4], &[4]], 14, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    });
    check("linear no bias", &[&[7, 3], &[3, 2]], 15, |t, v| {
        t.linear(v[0], v[1], None)
    });
    check("gelu", &[&[50]], 16, |t, v| t.gelu(v[0]));
}

#[test]
fn dropout_with_a_fixed_mask() {
    check("dropout", &[&[40]], 17, |t, v| {
        let mut r = stream(5, &[]);
        t.dropout(v[0], 0.3, true, &mut r)
    });
}

#[test]
fn model_specific_ops() {
    let mut r = stream(18, &[]);
    let values = uniform(&[2, 3, 4], &mut r);
    let mask = Tensor::from_fn([2, 3, 4], |i| (i % 3 != 0) as u8 as f64);
    check("variable_encode", &[&[4, 2, 6], &[4, 6]], 19, |t, v| {
        t.variable_encode(&values, &mask, v[0], v[1])
    });
    check("prepend_row", &[&[2, 3, 4, 2], &[4, 2]], 20, |t, v| {
        t.prepend_row(v[0], v[1])
    });

    let m = Tensor::from_fn([2, 5, 3], |i| ((i * 7) % 3 != 0) as u8 as f64);
    let bias = batch_bias(&m, &[5, 3], true).unwrap();
    let shape: &[usize] = &[2, 5, 3, 4];
    check("temporal_attention", &[shape, shape, shape], 21, |t, v| {
        t.temporal_attention(v[0], v[1], v[2], &bias, 2)
    });
    check("cross_item_weights", &[&[2, 3, 4], &[2, 3, 4]], 22, |t, v| {
        t.cross_item_weights(v[0], v[1], 2)
    });
    check("mix_items", &[&[2, 2, 3, 3], &[2, 4, 3, 6]], 23, |t, v| {
        t.mix_items(v[0], v[1])
    });
    let weights = Tensor::from_fn([2, 4, 3], |i| (i % 4) as f64 * 0.25);
    check("weighted_row_sum", &[&[2, 4, 3, 5]], 24, |t, v| {
        t.weighted_row_sum(v[0], &weights)
    });
    check("gather_rows", &[&[3, 4, 2, 2]], 25, |t, v| {
        t.gather_rows(v[0], &[0, 3, 1])
    });
}

#[test]
fn losses() {
    let mut r = stream(26, &[]);
    let target = uniform(&[2, 3, 4], &mut r);
    let weights = Tensor::from_fn([2, 3], |i| (i % 2) as f64);
    check("masked_l1", &[&[2, 3, 4]], 27, |t, v| {
        t.masked_l1(v[0], &target, &weights, 12.0)
    });
    let y = Tensor::from_fn([5, 3], |i| (i % 2) as f64);
    check("bce", &[&[5, 3]], 28, |t, v| t.bce_with_logits(v[0], &y, 15.0));
    check("cross entropy", &[&[4, 6]], 29, |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 5, 2, 2], 4.0)
    });
}

#[test]
fn two_layer_mlp() {
    check("mlp", &[&[6, 4], &[4, 8], &[8], &[8, 3], &[3]], 30, |t, v| {
        let h = t.linear(v[0], v[1], Some(v[2]))?;
        let h = t.gelu(h)?;
        let o = t.linear(h, v[3], Some(v[4]))?;
        t.softmax(o, 1)
    });
}

#[test]
fn feed_forward_sublayer() {
    let mut store = ParamStore::new();
    let mut r = stream(31, &[]);
    let p = FeedForwardParams {
        inner: LinearParams::init(&mut store, "inner", 6, 24, &mut r).unwrap(),
        outer: LinearParams::init(&mut store, "outer", 24, 6, &mut r).unwrap(),
        norm: NormParams::init(&mut store, "norm", 6).unwrap(),
    };
    let x = uniform(&[2, 3, 6], &mut r);
    let errors = check_params(&store, H, |t, s| {
        let x = t.constant(x.clone());
        let y = feed_forward(t, s, &p, x, 0.0, &mut Mode::Eval)?;
        project(t, y, 32)
    })
    .unwrap();
    for (name, e) in errors {
        assert!(e < TOL, "{name}: {e:e}");
    }
}

fn tiny_records(steps: usize, vars: usize, seed: u64) -> Vec<EhrRecord> {
    let mut r = stream(seed, &[]);
    (0..2)
        .map(|i| {
            let mask: Vec<bool> = (0..steps * vars).map(|_| r.random::<f64>() < 0.7).collect();
            let values = mask
                .iter()
                .map(|&m| if m { r.random_range(-2.0..2.0) } else { 0.0 })
                .collect();
            EhrRecord::new(
                format!("p{i}"),
                steps - i,
                vars,
                truncate(values, steps - i, vars),
                truncate(mask, steps - i, vars),
                Label::Binary(i == 0),
            )
            .unwrap()
        })
        .collect()
}

fn truncate<T>(mut v: Vec<T>, steps: usize, vars: usize) -> Vec<T> {
    v.truncate(steps * vars);
    v
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vars: 3,
        dim: 8,
        heads: 2,
        layers: 2,
        ..ModelConfig::default()
    }
}

/// Encoder, two blocks, embedding decoder and the masked reconstruction loss
/// at T=4, N=3, d=8.
#[test]
fn full_pretraining_objective() {
    let model = MartModel::new(tiny_config(), AblationFlags::default(), TaskKind::Binary, 7).unwrap();
    let records = tiny_records(4, 3, 8);
    let plans: Vec<MaskPlan> = records
        .iter()
        .map(|r| {
            let mut p = MaskPlan::empty(r.steps() + 1, 3);
            for (c, m) in r.mask().iter().enumerate() {
                p.removed[3 + c] = *m && c % 2 == 0;
            }
            p
        })
        .collect();
    let refs: Vec<&EhrRecord> = records.iter().collect();
    let pb = PretrainBatch::new(&refs, &plans, 1).unwrap();
    assert!(pb.removed > 0);
    let mut teacher = model.teacher();
    // a perturbed teacher keeps targets away from the student's outputs
    for id in teacher.ids().collect::<Vec<_>>() {
        for x in teacher.get_mut(id).tensor.data_mut() {
            *x *= 0.9;
        }
    }
    let targets = teacher_targets(&model, &teacher, &pb).unwrap();
    let denom = pb.removed as f64 * 8.0;
    let errors = check_params(&model.store, H, |t, s| {
        let mut m = model.clone();
        m.store = s.clone();
        reconstruction_loss(t, &m, &pb, &targets, denom, &mut Mode::Eval)
    })
    .unwrap();
    for (name, e) in errors {
        assert!(e < TOL, "{name}: {e:e}");
    }
}

#[test]
fn full_classification_objective() {
    for ablation in [
        AblationFlags::default(),
        AblationFlags {
            no_cls: true,
            ..AblationFlags::default()
        },
    ] {
        let model = MartModel::new(tiny_config(), ablation, TaskKind::Binary, 9).unwrap();
        let records = tiny_records(4, 3, 10);
        let batch = smart_core::data::Batch::from_records(&records).unwrap();
        let y = Tensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        let errors = check_params(&model.store, H, |t, s| {
            let mut m = model.clone();
            m.store = s.clone();
            let logits = m.classify_batch(t, &batch, &mut Mode::Eval)?;
            t.bce_with_logits(logits, &y, 2.0)
        })
        .unwrap();
        for (name, e) in errors {
            assert!(e < TOL, "{name}: {e:e}");
        }
    }
}
