use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check, DEFAULT_STEP};

pub(crate) fn tiny_config(input_dim: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim,
            model_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            conv_kernel: 5,
            ffn_mult: 2,
            dropout: 0.1,
            seed: 3,
        },
        classifier: ClassifierConfig::default(),
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    assert!(c.validate().is_ok());
    c.encoder.n_heads = 5;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.encoder.n_blocks = 0;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.classifier.layers = vec![(9, 5), (7, 4)];
    assert!(c.validate().is_err());
}

#[test]
fn output_shapes_preserve_length() {
    let model = Model::new(ModelConfig::default()).unwrap();
    for &t in &[1usize, 7, 200] {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let x = tape.constant(random(&[t, 80], t as u64));
        let f = model.forward(&mut tape, &p, x, None).unwrap();
        assert_eq!(tape.value(f.embeddings).shape(), &[t, 64]);
        assert_eq!(tape.value(f.cas).shape(), &[t, NUM_CLASSES]);
        assert_eq!(tape.value(f.clip_probs).shape(), &[NUM_CLASSES]);
        assert!(tape
            .value(f.clip_probs)
            .data()
            .iter()
            .all(|&y| y > 0.0 && y < 1.0));
    }
}

#[test]
fn rejects_wrong_input_width() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[4, 40]));
    assert!(model.encode(&mut tape, &p, x, None).is_err());
}

#[test]
fn parameter_count_and_init_bounds() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let w = model.params().get("input.weight").unwrap();
    let bound = (1.0f64 / 80.0).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    let g = model.params().get("block0.attn_norm.gain").unwrap();
    assert!(g.data().iter().all(|&v| v == 1.0));
    let cas = model.params().get("cas0.weight").unwrap();
    assert_eq!(cas.shape(), &[9, 64, 5]);
    let cas = model.params().get("cas1.weight").unwrap();
    assert_eq!(cas.shape(), &[7, 5, 5]);
}

#[test]
fn init_is_seeded() {
    let a = Model::new(ModelConfig::default()).unwrap();
    let b = Model::new(ModelConfig::default()).unwrap();
    assert_eq!(a.params(), b.params());
    let mut c = ModelConfig::default();
    c.encoder.seed = 1;
    assert_ne!(Model::new(c).unwrap().params(), a.params());
}

fn zero_named(model: &mut Model, prefix: &str) {
    let names: Vec<String> = model.params().names().to_vec();
    for (n, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        if n.starts_with(prefix) && n.ends_with("weight") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if n.starts_with(prefix) && n.ends_with("bias") && prefix == "head" {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn zero_head_gives_one_half() {
    let mut model = Model::new(tiny_config(6)).unwrap();
    zero_named(&mut model, "head");
    let y = model.predict(&random(&[9, 6], 1)).unwrap();
    assert!(y.iter().all(|&v| v == 0.5));
}

#[test]
fn zero_cas_weights_give_bias() {
    let mut model = Model::new(tiny_config(6)).unwrap();
    zero_named(&mut model, "cas");
    let bias = model.params().get("cas1.bias").unwrap().clone();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let x = tape.constant(random(&[4, 6], 2));
    let f = model.forward(&mut tape, &p, x, None).unwrap();
    for t in 0..4 {
        assert_eq!(tape.value(f.cas).row(t), bias.data());
    }
}

#[test]
fn audio_head_pools_constant_rows() {
    let model = Model::new(tiny_config(6)).unwrap();
    let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    let run = |t: usize| {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&vec![row.clone(); t]).unwrap());
        let y = model.audio_head(&mut tape, &p, x).unwrap();
        tape.value(y).data().to_vec()
    };
    for (a, b) in run(1).iter().zip(run(5)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn audio_head_matches_manual_composition() {
    let model = Model::new(tiny_config(6)).unwrap();
    let x = random(&[5, 8], 4);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let vx = tape.constant(x.clone());
    let y = model.audio_head(&mut tape, &p, vx).unwrap();

    let w = model.params().get("head.weight").unwrap();
    let b = model.params().get("head.bias").unwrap();
    for c in 0..NUM_CLASSES {
        let mut z = b.data()[c];
        for j in 0..8 {
            let mean: f64 = (0..5).map(|t| x.at(t, j)).sum::<f64>() / 5.0;
            z += mean * w.at(j, c);
        }
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((tape.value(y).data()[c] - expected).abs() < 1e-12);
    }
}

#[test]
fn single_frame_clip_is_supported() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let y = model.predict(&random(&[1, 80], 5)).unwrap();
    assert_eq!(y.len(), NUM_CLASSES);
}

#[test]
fn dropout_only_in_training() {
    let model = Model::new(tiny_config(6)).unwrap();
    let x = random(&[6, 6], 6);
    let run = |rng: Option<&mut ChaCha8Rng>| {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let vx = tape.constant(x.clone());
        let e = model.encode(&mut tape, &p, vx, rng).unwrap();
        tape.value(e).clone()
    };
    assert_eq!(run(None), run(None));
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(1);
    let a = run(Some(&mut r1));
    assert_eq!(a, run(Some(&mut r2)));
    assert_ne!(a, run(None));
}

fn model_gradient_check(build: impl Fn(&Model, &mut Tape, Var, &Bound) -> crate::Result<Var>) -> f64 {
    let model = Model::new(tiny_config(6)).unwrap();
    let mut inputs = vec![random(&[16, 6], 7)];
    inputs.extend(model.params().tensors().iter().cloned());
    let res = check(
        &inputs,
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            build(&model, tape, vars[0], &bound)
        },
        DEFAULT_STEP,
    )
    .unwrap();
    // every tensor except the key bias must also pass on its own; softmax is
    // shift invariant per query, so that gradient is exactly zero
    for (name, (&e, a)) in model
        .params()
        .names()
        .iter()
        .zip(res.rel_errors[1..].iter().zip(&res.analytic[1..]))
    {
        if name.ends_with("attn.k.bias") {
            assert!(a.iter().all(|v| v.abs() < 1e-12), "{}", name);
        } else {
            assert!(e < 1e-4, "{} {}", name, e);
        }
    }
    res.global_rel_error()
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let err = model_gradient_check(|m, tape, x, p| {
        let e = m.encode(tape, p, x, None)?;
        tape.sum_all(e)
    });
    assert!(err < 1e-4, "{}", err);
}

#[test]
fn heads_gradient_matches_finite_differences() {
    let err = model_gradient_check(|m, tape, x, p| {
        let f = m.forward(tape, p, x, None)?;
        let a = tape.sum_all(f.clip_probs)?;
        let c = tape.sigmoid(f.cas)?;
        let c = tape.sum_all(c)?;
        tape.add(a, c)
    });
    assert!(err < 1e-4, "{}", err);
}
