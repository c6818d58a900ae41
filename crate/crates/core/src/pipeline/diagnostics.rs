//! Finite-difference gradient checks over every operation and the full
//! training objective, as run by `stutterkit grad-check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{cls_loss, contrast_side, stutter_contrast_loss, total_loss, ContrastSides};
use crate::mining::{frame_likelihood, mine_confusing, mine_easy, binarize, MinedFrames, MiningConfig};
use crate::model::{Bound, ClassifierConfig, EncoderConfig, Model, ModelConfig};
use crate::tensor::gradcheck::{check, DEFAULT_STEP};
use crate::tensor::{Reduce, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_error: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.rel_error < GRAD_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .expect("shape")
}

/// The tiny configuration used for whole-model checks: d = 8, one block.
pub fn tiny_model_config(input_dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim,
            model_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            conv_kernel: 5,
            ffn_mult: 2,
            dropout: 0.1,
            seed,
        },
        classifier: ClassifierConfig::default(),
    }
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn sum(t: &mut Tape, v: Result<Var>) -> Result<Var> {
        let v = v?;
        t.sum_all(v)
    }
    fn weighted(t: &mut Tape, v: Result<Var>) -> Result<Var> {
        // non-uniform weights so that sum-preserving ops still get a signal
        let v = v?;
        let n = t.value(v).len();
        let shape = t.value(v).shape().to_vec();
        let w = t.constant(Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect())?);
        let p = t.mul(v, w)?;
        t.sum_all(p)
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| { let r = t.matmul(v[0], v[1]); sum(t, r) })),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| { let r = t.transpose(v[0]); weighted(t, r) })),
        ("conv1d", vec![vec![7, 3], vec![4, 3, 2], vec![2]], Box::new(|t, v| { let r = t.conv1d(v[0], v[1], v[2]); weighted(t, r) })),
        ("conv1d_long_kernel", vec![vec![3, 2], vec![6, 2, 2], vec![2]], Box::new(|t, v| { let r = t.conv1d(v[0], v[1], v[2]); weighted(t, r) })),
        ("depthwise_conv1d", vec![vec![7, 3], vec![5, 3], vec![3]], Box::new(|t, v| { let r = t.depthwise_conv1d(v[0], v[1], v[2]); weighted(t, r) })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let r = t.add(v[0], v[1]); weighted(t, r) })),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let r = t.sub(v[0], v[1]); weighted(t, r) })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let r = t.mul(v[0], v[1]); weighted(t, r) })),
        ("mul_scalar_broadcast", vec![vec![2, 3], vec![]], Box::new(|t, v| { let r = t.mul(v[0], v[1]); weighted(t, r) })),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|t, v| { let r = t.add_row(v[0], v[1]); weighted(t, r) })),
        ("sigmoid", vec![vec![2, 3]], Box::new(|t, v| { let r = t.sigmoid(v[0]); weighted(t, r) })),
        ("relu", vec![vec![2, 3]], Box::new(|t, v| { let r = t.relu(v[0]); weighted(t, r) })),
        ("silu", vec![vec![2, 3]], Box::new(|t, v| { let r = t.silu(v[0]); weighted(t, r) })),
        ("exp", vec![vec![2, 3]], Box::new(|t, v| { let r = t.exp(v[0]); weighted(t, r) })),
        ("log", vec![vec![2, 3]], Box::new(|t, v| {
            let e = t.exp(v[0])?;
            let r = t.log(e);
            weighted(t, r)
        })),
        ("clamp", vec![vec![2, 3]], Box::new(|t, v| { let r = t.clamp(v[0], -1.0, 1.0); weighted(t, r) })),
        ("reduce_sum", vec![vec![3, 4]], Box::new(|t, v| { let r = t.reduce(Reduce::Sum, v[0], 1); weighted(t, r) })),
        ("reduce_mean", vec![vec![3, 4]], Box::new(|t, v| { let r = t.reduce(Reduce::Mean, v[0], 0); weighted(t, r) })),
        ("reduce_max", vec![vec![3, 4]], Box::new(|t, v| { let r = t.reduce(Reduce::Max, v[0], 1); weighted(t, r) })),
        ("gather_rows", vec![vec![5, 3]], Box::new(|t, v| { let r = t.gather_rows(v[0], &[4, 1, 1, 0]); weighted(t, r) })),
        ("slice_concat", vec![vec![3, 5], vec![3, 2]], Box::new(|t, v| {
            let a = t.slice_cols(v[0], 1, 3)?;
            let r = t.concat_cols(&[v[1], a]);
            weighted(t, r)
        })),
        ("layernorm", vec![vec![4, 5], vec![5], vec![5]], Box::new(|t, v| { let r = t.layernorm(v[0], v[1], v[2]); weighted(t, r) })),
        ("softmax_rows", vec![vec![3, 4]], Box::new(|t, v| { let r = t.softmax_rows(v[0]); weighted(t, r) })),
        ("log_softmax_rows", vec![vec![3, 4]], Box::new(|t, v| { let r = t.log_softmax_rows(v[0]); weighted(t, r) })),
        ("normalize_rows", vec![vec![3, 4]], Box::new(|t, v| { let r = t.normalize_rows(v[0]); weighted(t, r) })),
        ("cls_loss", vec![vec![5]], Box::new(|t, v| {
            let y = t.sigmoid(v[0])?;
            cls_loss(t, y, &[true, false, true, false, false])
        })),
        ("contrast_side", vec![vec![2, 4], vec![2, 4], vec![3, 4]], Box::new(|t, v| contrast_side(t, v[0], v[1], v[2], 0.07))),
    ]
}

/// One finite-difference check per differentiable operation.
pub fn op_grad_checks(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
            let r = check(&inputs, |t, v| f(t, v), DEFAULT_STEP)?;
            Ok(GradCheckEntry {
                name: name.to_string(),
                rel_error: r.max_rel_error(),
            })
        })
        .collect()
}

/// Frames, feature width and class labels of the whole-objective check.
pub const COMPOSITE_FRAMES: usize = 16;
pub const COMPOSITE_INPUT_DIM: usize = 12;

/// Gradient of `L_cls + L_SC` with respect to the input features and every
/// parameter of the tiny model. Mined indices are chosen once at the
/// unperturbed point and then held fixed, as selection is not differentiable.
/// Returns the error and whether both contrast halves were present.
pub fn composite_grad_check(seed: u64) -> Result<(GradCheckEntry, bool)> {
    let model = Model::new(tiny_model_config(COMPOSITE_INPUT_DIM, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = uniform(&mut rng, &[COMPOSITE_FRAMES, COMPOSITE_INPUT_DIM]);
    let labels = [true, false, true, false, false];

    let mut tape = Tape::new();
    let p = model.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let f = model.forward(&mut tape, &p, xv, None)?;
    let probs = frame_likelihood(&mut tape, f.cas)?;
    let probs = tape.value(probs).data().to_vec();
    let mut sorted = probs.clone();
    sorted.sort_by(f64::total_cmp);
    let mining = MiningConfig {
        theta: sorted[sorted.len() / 2],
        inner_mask: 1,
        outer_mask: 3,
        confusing_ratio: 4,
        easy_ratio: 4,
    };
    let b = binarize(&probs, mining.theta);
    let (cs, cf) = mine_confusing(&b, &mining, &mut rng)?;
    let (es, ef) = mine_easy(&probs, mining.easy_ratio);
    let both = !cs.is_empty() && !cf.is_empty();

    let mut inputs = vec![x];
    inputs.extend(model.params().tensors().iter().cloned());
    let r = check(
        &inputs,
        |tape, vars| {
            let params = Bound::from_vars(vars[1..].to_vec());
            let f = model.forward(tape, &params, vars[0], None)?;
            let cls = cls_loss(tape, f.clip_probs, &labels)?;
            let mined = MinedFrames::from_indices(tape, f.embeddings, cs.clone(), cf.clone(), es.clone(), ef.clone())?;
            let terms = stutter_contrast_loss(tape, &mined, true, ContrastSides::BOTH, 0.07)?;
            let sc = terms.sum(tape)?;
            total_loss(tape, cls, sc, 1.0)
        },
        DEFAULT_STEP,
    )?;
    Ok((
        GradCheckEntry {
            name: "composite_objective".into(),
            rel_error: r.global_rel_error(),
        },
        both,
    ))
}

/// Gradient of the summed frame likelihoods through the encoder and the
/// frame classifier.
pub fn frame_head_grad_check(seed: u64) -> Result<GradCheckEntry> {
    let model = Model::new(tiny_model_config(COMPOSITE_INPUT_DIM, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca5);
    let mut inputs = vec![uniform(&mut rng, &[COMPOSITE_FRAMES, COMPOSITE_INPUT_DIM])];
    inputs.extend(model.params().tensors().iter().cloned());
    let r = check(
        &inputs,
        |tape, vars| {
            let params = Bound::from_vars(vars[1..].to_vec());
            let f = model.forward(tape, &params, vars[0], None)?;
            let p = frame_likelihood(tape, f.cas)?;
            tape.sum_all(p)
        },
        DEFAULT_STEP,
    )?;
    Ok(GradCheckEntry {
        name: "frame_likelihood_head".into(),
        rel_error: r.global_rel_error(),
    })
}

/// Every operation check followed by the two whole-model checks.
pub fn grad_check_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out = op_grad_checks(seed)?;
    out.push(frame_head_grad_check(seed)?);
    out.push(composite_grad_check(seed)?.0);
    Ok(out)
}
