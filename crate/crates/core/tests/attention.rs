//! Properties of the observation bias, both attention sublayers, the
//! feed-forward sublayer and the encoder.

use rand::Rng;
use smart_core::data::{Batch, TaskKind};
use smart_core::encoder::{encode, positional_encoding, EncoderParams};
use smart_core::mart::{
    batch_bias, block_forward, build_bias, feed_forward, key_weights, mart_forward, variable_attention_weights,
    BlockInputs, FeedForwardParams, KeyPooling, LinearParams, MartBlockParams, Mode, NormParams,
};
use smart_core::model::{AblationFlags, MartModel, ModelConfig};
use smart_core::rng::{stream, SmartRng};
use smart_core::{ParamStore, Tape, Tensor};

fn uniform(shape: &[usize], rng: &mut SmartRng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

/// Random `[rows, vars]` mask with an all-true first row.
fn extended_mask(rows: usize, vars: usize, rng: &mut SmartRng) -> Vec<bool> {
    (0..rows * vars)
        .map(|i| i < vars || rng.random::<f64>() < 0.4)
        .collect()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn bias_matches_brute_force_on_random_masks() {
    let mut rng = stream(100, &[]);
    for _ in 0..1000 {
        let steps = rng.random_range(0..=10);
        let vars = rng.random_range(1..=6);
        let rows = steps + 1;
        let m = extended_mask(rows, vars, &mut rng);
        let b = build_bias(&m, vars).unwrap();
        assert_eq!((b.rows, b.vars), (rows, vars));
        for i in 0..rows {
            for j in 0..rows {
                for n in 0..vars {
                    let expect = u8::from(m[i * vars + n]) + u8::from(m[j * vars + n]);
                    assert_eq!(b.get(i, j, n), expect);
                    assert_eq!(b.get(i, j, n), b.get(j, i, n));
                }
            }
        }
        // the batched form agrees wherever the key is a valid row
        let mt = Tensor::from_fn([1, rows, vars], |i| f64::from(u8::from(m[i])));
        let bb = batch_bias(&mt, &[rows], true).unwrap();
        for n in 0..vars {
            for i in 0..rows {
                for j in 0..rows {
                    assert_eq!(bb.data()[(n * rows + i) * rows + j], f64::from(b.get(i, j, n)));
                }
            }
        }
    }
}

fn raw_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: &Tensor, heads: usize) -> Tensor {
    let mut t = Tape::new();
    let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let o = t.temporal_attention(q, k, v, bias, heads).unwrap();
    t.value(o).clone()
}

#[test]
fn constant_bias_cancels_on_fully_observed_input() {
    let mut rng = stream(101, &[]);
    for _ in 0..50 {
        let (rows, vars, dim) = (rng.random_range(1..8), rng.random_range(1..5), 8);
        let shape = [2, rows, vars, dim];
        let (q, k, v) = (
            uniform(&shape, &mut rng),
            uniform(&shape, &mut rng),
            uniform(&shape, &mut rng),
        );
        let full = Tensor::full([2, rows, vars], 1.0);
        let with = batch_bias(&full, &[rows, rows], true).unwrap();
        let without = batch_bias(&full, &[rows, rows], false).unwrap();
        assert!(with.data().iter().all(|&b| b == 2.0));
        assert!(
            max_diff(
                &raw_attention(&q, &k, &v, &with, 2),
                &raw_attention(&q, &k, &v, &without, 2)
            ) <= 1e-10
        );
    }
}

/// With one head, `dim == rows` and one-hot values, the output row of query
/// `i` is exactly its attention distribution.
#[test]
fn observed_keys_gain_a_factor_of_e() {
    let mut rng = stream(102, &[]);
    for _ in 0..200 {
        let rows = rng.random_range(2..9);
        let shape = [1, rows, 1, rows];
        let (q, k) = (uniform(&shape, &mut rng), uniform(&shape, &mut rng));
        let v = Tensor::from_fn(shape.to_vec(), |i| f64::from(u8::from(i / rows == i % rows)));
        let m = extended_mask(rows, 1, &mut rng);
        let mt = Tensor::from_fn([1, rows, 1], |i| f64::from(u8::from(m[i])));
        let biased = raw_attention(&q, &k, &v, &batch_bias(&mt, &[rows], true).unwrap(), 1);
        let plain = raw_attention(&q, &k, &v, &batch_bias(&mt, &[rows], false).unwrap(), 1);
        let w = |t: &Tensor, i: usize, j: usize| t.data()[i * rows + j];
        for i in (0..rows).filter(|&i| m[i]) {
            let row_sum: f64 = (0..rows).map(|j| w(&biased, i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for a in (0..rows).filter(|&j| m[j]) {
                for b in (0..rows).filter(|&j| !m[j]) {
                    let ratio = (w(&biased, i, a) / w(&biased, i, b)) / (w(&plain, i, a) / w(&plain, i, b));
                    assert!((ratio / std::f64::consts::E - 1.0).abs() < 1e-12, "ratio {ratio}");
                }
            }
        }
    }
}

#[test]
fn single_position_returns_its_value() {
    let mut rng = stream(103, &[]);
    let shape = [3, 1, 4, 8];
    let (q, k, v) = (
        uniform(&shape, &mut rng),
        uniform(&shape, &mut rng),
        uniform(&shape, &mut rng),
    );
    let bias = batch_bias(&Tensor::full([3, 1, 4], 1.0), &[1, 1, 1], true).unwrap();
    assert!(max_diff(&raw_attention(&q, &k, &v, &bias, 4), &v) <= 1e-15);
}

/// Plain single-head attention written out with loops.
fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: &Tensor) -> Tensor {
    let s = q.shape();
    let (batch, rows, vars, dim) = (s[0], s[1], s[2], s[3]);
    let at = |t: &Tensor, b: usize, r: usize, n: usize, c: usize| t.data()[((b * rows + r) * vars + n) * dim + c];
    let mut out = Tensor::zeros(s.to_vec());
    for b in 0..batch {
        for n in 0..vars {
            for i in 0..rows {
                let logits: Vec<f64> = (0..rows)
                    .map(|j| {
                        let dot: f64 = (0..dim).map(|c| at(q, b, i, n, c) * at(k, b, j, n, c)).sum();
                        dot / (dim as f64).sqrt() + bias.data()[((b * vars + n) * rows + i) * rows + j]
                    })
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dim {
                    let val: f64 = (0..rows).map(|j| e[j] / z * at(v, b, j, n, c)).sum();
                    out.data_mut()[((b * rows + i) * vars + n) * dim + c] = val;
                }
            }
        }
    }
    out
}

#[test]
fn one_head_matches_reference_attention() {
    let mut rng = stream(104, &[]);
    for _ in 0..20 {
        let (rows, vars) = (rng.random_range(1..7), rng.random_range(1..4));
        let shape = [2, rows, vars, 6];
        let (q, k, v) = (
            uniform(&shape, &mut rng),
            uniform(&shape, &mut rng),
            uniform(&shape, &mut rng),
        );
        let m = Tensor::from_fn([2, rows, vars], |i| f64::from(u8::from(i % 3 != 1)));
        let valid = [rows, rows.div_ceil(2)];
        let bias = batch_bias(&m, &valid, true).unwrap();
        assert!(
            max_diff(
                &raw_attention(&q, &k, &v, &bias, 1),
                &reference_attention(&q, &k, &v, &bias)
            ) <= 1e-12
        );
    }
}

/// Splitting channels into heads equals running each channel slice alone.
#[test]
fn heads_are_independent_channel_slices() {
    let mut rng = stream(105, &[]);
    let (rows, vars, dim, heads) = (5, 3, 8, 4);
    let shape = [1, rows, vars, dim];
    let (q, k, v) = (
        uniform(&shape, &mut rng),
        uniform(&shape, &mut rng),
        uniform(&shape, &mut rng),
    );
    let m = Tensor::from_fn([1, rows, vars], |i| f64::from(u8::from(i % 2 == 0)));
    let bias = batch_bias(&m, &[rows], true).unwrap();
    let all = raw_attention(&q, &k, &v, &bias, heads);
    let hd = dim / heads;
    let slice =
        |t: &Tensor, h: usize| Tensor::from_fn([1, rows, vars, hd], |i| t.data()[(i / hd) * dim + h * hd + i % hd]);
    for h in 0..heads {
        let one = raw_attention(&slice(&q, h), &slice(&k, h), &slice(&v, h), &bias, 1);
        assert!(max_diff(&one, &slice(&all, h)) <= 1e-14);
    }
}

fn block_setup(dim: usize, seed: u64) -> (ParamStore, MartBlockParams, MartBlockParams) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, &[]);
    let a = MartBlockParams::init(&mut store, "block.0", dim, 4, &mut rng).unwrap();
    let b = MartBlockParams::init(&mut store, "block.1", dim, 4, &mut rng).unwrap();
    (store, a, b)
}

struct Inputs {
    bias: Tensor,
    keys: Tensor,
    query_rows: Vec<usize>,
}

impl Inputs {
    fn new(mask: &Tensor, valid: &[usize]) -> Self {
        Inputs {
            bias: batch_bias(mask, valid, true).unwrap(),
            keys: key_weights(mask, valid, true, KeyPooling::Mean).unwrap(),
            query_rows: vec![0; valid.len()],
        }
    }

    fn block(&self, heads: usize) -> BlockInputs<'_> {
        BlockInputs {
            bias: &self.bias,
            key_weights: &self.keys,
            query_rows: &self.query_rows,
            heads,
            dropout: 0.0,
            temporal: true,
            variable: true,
        }
    }
}

fn random_mask(batch: usize, rows: usize, vars: usize, rng: &mut SmartRng) -> Tensor {
    Tensor::from_fn([batch, rows, vars], |i| {
        let row = (i / vars) % rows;
        f64::from(u8::from(row == 0 || rng.random::<f64>() < 0.5))
    })
}

fn var_weights(store: &ParamStore, p: &MartBlockParams, h: &Tensor, inputs: &BlockInputs<'_>) -> Tensor {
    let mut t = Tape::new();
    let h = t.constant(h.clone());
    let w = variable_attention_weights(&mut t, store, &p.variable, h, inputs).unwrap();
    t.value(w).clone()
}

#[test]
fn variable_attention_weights_are_row_stochastic() {
    let mut rng = stream(106, &[]);
    let (store, p, _) = block_setup(8, 107);
    for vars in 1..6 {
        let mask = random_mask(2, 4, vars, &mut rng);
        let inputs = Inputs::new(&mask, &[4, 3]);
        let h = uniform(&[2, 4, vars, 8], &mut rng);
        let w = var_weights(&store, &p, &h, &inputs.block(4));
        assert_eq!(w.shape(), &[2, 4, vars, vars]);
        for row in w.data().chunks(vars) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        if vars == 1 {
            assert!(w.data().iter().all(|&x| x == 1.0));
        }
    }
}

#[test]
fn keys_ignore_unobserved_steps() {
    let mut rng = stream(108, &[]);
    let (store, p, _) = block_setup(8, 109);
    let (rows, vars) = (6, 4);
    let mask = random_mask(2, rows, vars, &mut rng);
    let inputs = Inputs::new(&mask, &[rows, 4]);
    let h = uniform(&[2, rows, vars, 8], &mut rng);
    let base = var_weights(&store, &p, &h, &inputs.block(2));
    let mut probed = 0;
    for b in 0..2 {
        for t in 1..rows {
            for n in 0..vars {
                // an unobserved step, or a padded one past the valid length
                if mask.data()[(b * rows + t) * vars + n] > 0.0 && t < [rows, 4][b] {
                    continue;
                }
                let mut hp = h.clone();
                for c in 0..8 {
                    hp.data_mut()[((b * rows + t) * vars + n) * 8 + c] += 3.0;
                }
                // the query row is untouched, so the whole map must be
                assert_eq!(var_weights(&store, &p, &hp, &inputs.block(2)), base);
                probed += 1;
            }
        }
    }
    assert!(probed > 0);
}

#[test]
fn feed_forward_with_zero_weights_is_the_residual() {
    let mut store = ParamStore::new();
    let mut rng = stream(110, &[]);
    let p = FeedForwardParams {
        inner: LinearParams::init(&mut store, "inner", 6, 24, &mut rng).unwrap(),
        outer: LinearParams::init(&mut store, "outer", 24, 6, &mut rng).unwrap(),
        norm: NormParams::init(&mut store, "norm", 6).unwrap(),
    };
    for id in [p.inner.weight, p.inner.bias, p.outer.weight, p.outer.bias] {
        store.get_mut(id).tensor.data_mut().fill(0.0);
    }
    let x = uniform(&[2, 3, 4, 6], &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = feed_forward(&mut t, &store, &p, xv, 0.0, &mut Mode::Eval).unwrap();
    let g = t.param(&store, p.norm.gamma);
    let b = t.param(&store, p.norm.beta);
    let normed = t.layer_norm(xv, g, b).unwrap();
    assert_eq!(t.value(y).shape(), x.shape());
    assert_eq!(t.value(y), t.value(normed));
}

fn run_blocks(store: &ParamStore, blocks: &[MartBlockParams], h: &Tensor, inputs: &BlockInputs<'_>) -> Tensor {
    let mut t = Tape::new();
    let h = t.constant(h.clone());
    let o = mart_forward(&mut t, store, blocks, h, inputs, &mut Mode::Eval).unwrap();
    t.value(o).clone()
}

#[test]
fn stacking_applies_blocks_in_order() {
    let mut rng = stream(111, &[]);
    let (store, a, b) = block_setup(8, 112);
    let mask = random_mask(3, 5, 3, &mut rng);
    let inputs = Inputs::new(&mask, &[5, 2, 4]);
    let h = uniform(&[3, 5, 3, 8], &mut rng);
    let bi = inputs.block(4);

    let one = run_blocks(&store, &[a], &h, &bi);
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let direct = block_forward(&mut t, &store, &a, hv, &bi, &mut Mode::Eval).unwrap();
    assert_eq!(&one, t.value(direct));
    assert_eq!(one.shape(), h.shape());

    let two = run_blocks(&store, &[a, b], &h, &bi);
    assert_eq!(two, run_blocks(&store, &[b], &one, &bi));
    let mut t = Tape::new();
    let hv = t.constant(h);
    assert!(mart_forward(&mut t, &store, &[], hv, &bi, &mut Mode::Eval).is_err());
}

#[test]
fn positional_table_matches_closed_form() {
    let pe = positional_encoding(5, 32).unwrap();
    for c in 0..32 {
        let freq = (10000f64).powf(-((c / 2 * 2) as f64) / 32.0);
        let expect = if c % 2 == 0 {
            (3.0 * freq).sin()
        } else {
            (3.0 * freq).cos()
        };
        assert!((pe.data()[3 * 32 + c] - expect).abs() <= 1e-12);
    }
    let big = positional_encoding(200, 64).unwrap();
    assert!(big.data().iter().all(|x| x.abs() <= 1.0));
    assert!(positional_encoding(4, 7).is_err());
}

fn encode_values(store: &ParamStore, p: &EncoderParams, values: &Tensor, mask: &Tensor) -> (Tensor, Tensor) {
    let mut t = Tape::new();
    let hs = encode(&mut t, store, p, values, mask, true).unwrap();
    (t.value(hs.h).clone(), hs.mask)
}

#[test]
fn encoder_keeps_variables_apart() {
    let mut rng = stream(113, &[]);
    let mut store = ParamStore::new();
    let (steps, vars, dim) = (5, 4, 8);
    let p = EncoderParams::init(&mut store, vars, dim, true, &mut rng).unwrap();
    let mask = random_mask(2, steps, vars, &mut rng);
    let values = Tensor::from_fn([2, steps, vars], |i| mask.data()[i] * rng.random_range(-1.0..1.0));
    let (h, ext) = encode_values(&store, &p, &values, &mask);
    assert_eq!(h.shape(), &[2, steps + 1, vars, dim]);
    let ones = |t: &Tensor| t.data().iter().filter(|&&x| x > 0.0).count();
    assert_eq!(ones(&ext), ones(&mask) + 2 * vars);

    for n in 0..vars {
        let mut perturbed = values.clone();
        let mut pm = mask.clone();
        for b in 0..2 {
            for t in 0..steps {
                let i = (b * steps + t) * vars + n;
                pm.data_mut()[i] = 1.0;
                perturbed.data_mut()[i] += 0.5;
            }
        }
        let (hp, _) = encode_values(&store, &p, &perturbed, &pm);
        for (i, (a, b)) in h.data().iter().zip(hp.data()).enumerate() {
            let var = (i / dim) % vars;
            let row = (i / (dim * vars)) % (steps + 1);
            if var != n || row == 0 {
                assert_eq!(a, b, "variable {n} leaked into element {i}");
            }
        }
        assert_ne!(h, hp);
    }
}

#[test]
fn summary_vector_receives_gradient() {
    let config = ModelConfig {
        vars: 3,
        dim: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let mut model = MartModel::new(config, AblationFlags::default(), TaskKind::Binary, 5).unwrap();
    // a trained head; the zero-initialized one passes no gradient back
    let out = model.store.get_mut(model.label_decoder.out.weight);
    out.tensor = Tensor::from_fn(out.tensor.shape().to_vec(), |i| (i as f64 * 0.7).cos());
    let data = smart_core::data::generate_synthetic(&smart_core::data::SyntheticSpec {
        n_patients: 20,
        vars: 3,
        t_max: 6,
        ..Default::default()
    })
    .unwrap();
    let batch = Batch::from_records(&data.train).unwrap();
    let mut t = Tape::new();
    let logits = model.classify_batch(&mut t, &batch, &mut Mode::Eval).unwrap();
    let y = Tensor::from_fn([batch.size(), 1], |i| (i % 2) as f64);
    let loss = t.bce_with_logits(logits, &y, batch.size() as f64).unwrap();
    let grads = t.backward(loss).unwrap();
    let cls = model.store.find("encoder.cls").unwrap();
    assert!(grads.param(cls).unwrap().data().iter().any(|&g| g != 0.0));
    // the embedding decoder is not on the classification path
    for (id, p) in model
        .store
        .iter()
        .filter(|(_, p)| !p.name.starts_with("embedding_decoder"))
    {
        let g = grads.param(id).unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(g.is_finite(), "{}", p.name);
    }
}
