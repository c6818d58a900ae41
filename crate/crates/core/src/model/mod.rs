//! Conformer-lite encoder, clip-level head and frame-level CAS head.
//!
//! Each encoder block is three pre-norm residual sublayers:
//!
//! 1. multi-head self-attention
//! 2. depthwise temporal convolution → pointwise projection → SiLU
//! 3. feed-forward (`d → ffn_mult·d → d`, SiLU)
//!
//! Inputs are projected to the model width and summed with sinusoidal
//! absolute positions before the first block.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 80,
            model_dim: 64,
            n_blocks: 3,
            n_heads: 4,
            conv_kernel: 15,
            ffn_mult: 2,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.model_dim == 0 {
            return bad("input_dim and model_dim must be > 0".into());
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be >= 1".into());
        }
        if self.conv_kernel == 0 || self.ffn_mult == 0 {
            return bad("conv_kernel and ffn_mult must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Temporal convolution stack producing class activation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// `(kernel, out_channels)` per layer; ReLU between layers.
    pub layers: Vec<(usize, usize)>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            layers: vec![(9, NUM_CLASSES), (7, NUM_CLASSES)],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        match self.layers.last() {
            Some(&(_, out)) if out == NUM_CLASSES => {}
            _ => {
                return Err(Error::Config(format!(
                    "classifier must end with {} outputs",
                    NUM_CLASSES
                )))
            }
        }
        if self.layers.iter().any(|&(k, o)| k == 0 || o == 0) {
            return Err(Error::Config("classifier kernels and widths must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.classifier.validate()
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    conv_norm: Norm,
    depthwise: Conv,
    pointwise: Linear,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    blocks: Vec<Block>,
    head: Linear,
    classifier: Vec<Conv>,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store
            .push(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.uniform(format!("{}.weight", name), &[din, dout], din),
            b: self.uniform(format!("{}.bias", name), &[dout], din),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self
                .store
                .push(format!("{}.gain", name), Tensor::filled(&[d], 1.0)),
            b: self.store.push(format!("{}.bias", name), Tensor::zeros(&[d])),
        }
    }

    fn conv(&mut self, name: &str, k: usize, din: usize, dout: usize) -> Conv {
        Conv {
            w: self.uniform(format!("{}.weight", name), &[k, din, dout], k * din),
            b: self.uniform(format!("{}.bias", name), &[dout], k * din),
        }
    }

    fn depthwise(&mut self, name: &str, k: usize, d: usize) -> Conv {
        Conv {
            w: self.uniform(format!("{}.weight", name), &[k, d], k),
            b: self.uniform(format!("{}.bias", name), &[d], k),
        }
    }
}

fn build(config: &ModelConfig) -> (Layout, ParamStore) {
    let enc = &config.encoder;
    let d = enc.model_dim;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(enc.seed),
        store: ParamStore::default(),
    };
    let input = init.linear("input", enc.input_dim, d);
    let blocks = (0..enc.n_blocks)
        .map(|i| {
            let p = |s: &str| format!("block{}.{}", i, s);
            Block {
                attn_norm: init.norm(&p("attn_norm"), d),
                q: init.linear(&p("attn.q"), d, d),
                k: init.linear(&p("attn.k"), d, d),
                v: init.linear(&p("attn.v"), d, d),
                o: init.linear(&p("attn.o"), d, d),
                conv_norm: init.norm(&p("conv_norm"), d),
                depthwise: init.depthwise(&p("conv.depthwise"), enc.conv_kernel, d),
                pointwise: init.linear(&p("conv.pointwise"), d, d),
                ffn_norm: init.norm(&p("ffn_norm"), d),
                ffn_in: init.linear(&p("ffn.in"), d, enc.ffn_mult * d),
                ffn_out: init.linear(&p("ffn.out"), enc.ffn_mult * d, d),
            }
        })
        .collect();
    let head = init.linear("head", d, NUM_CLASSES);
    let mut din = d;
    let classifier = config
        .classifier
        .layers
        .iter()
        .enumerate()
        .map(|(i, &(k, out))| {
            let c = init.conv(&format!("cas{}", i), k, din, out);
            din = out;
            c
        })
        .collect();
    (
        Layout {
            input,
            blocks,
            head,
            classifier,
        },
        init.store,
    )
}

/// Parameters bound to a tape as leaves, in [`ParamStore`] order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created by the caller, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient per parameter; zeros where a parameter did not reach the output.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

/// Outputs of one clip forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// T×d frame embeddings.
    pub embeddings: Var,
    /// C clip-level probabilities.
    pub clip_probs: Var,
    /// T×C class activation scores.
    pub cas: Var,
}

pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
        }
    }
}

/// Sinusoidal absolute position table, T×d.
pub fn positional_encoding(frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; frames * dim];
    for t in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64 * 2.0;
            let angle = t as f64 / 10_000f64.powf(pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(frames, dim, data).expect("shape")
}

impl Model {
    /// Fresh model with seeded uniform(±√(1/fan_in)) initialisation.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build(&config);
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from a config and stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, fresh) = build(&config);
        if fresh.names != params.names {
            return Err(Error::Checkpoint("parameter names do not match config".into()));
        }
        for (a, b) in fresh.tensors.iter().zip(&params.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match config {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    fn linear(&self, tape: &mut Tape, p: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.vars[l.w])?;
        tape.add_row(y, p.vars[l.b])
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, n: Norm, x: Var) -> Result<Var> {
        tape.layernorm(x, p.vars[n.g], p.vars[n.b])
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.encoder.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = tape.value(x).shape().to_vec();
                let n = tape.value(x).len();
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, b: &Block, x: Var) -> Result<Var> {
        let heads = self.config.encoder.n_heads;
        let dh = self.config.encoder.model_dim / heads;
        let q = self.linear(tape, p, b.q, x)?;
        let k = self.linear(tape, p, b.k, x)?;
        let v = self.linear(tape, p, b.v, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&outs)?;
        self.linear(tape, p, b.o, merged)
    }

    /// T×D_in features → T×d embeddings. Dropout is active only when `rng` is given.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.config.encoder.input_dim {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected T×{} input with T >= 1, got {:?}",
                    self.config.encoder.input_dim, shape
                ),
            ));
        }
        let frames = shape[0];
        let h = self.linear(tape, p, self.layout.input, x)?;
        let pe = tape.constant(positional_encoding(frames, self.config.encoder.model_dim));
        let mut h = tape.add(h, pe)?;
        for b in &self.layout.blocks {
            let n = self.norm(tape, p, b.attn_norm, h)?;
            let a = self.attention(tape, p, b, n)?;
            let a = self.dropout(tape, a, rng.as_deref_mut())?;
            h = tape.add(h, a)?;

            let n = self.norm(tape, p, b.conv_norm, h)?;
            let c = tape.depthwise_conv1d(n, p.vars[b.depthwise.w], p.vars[b.depthwise.b])?;
            let c = self.linear(tape, p, b.pointwise, c)?;
            let c = tape.silu(c)?;
            let c = self.dropout(tape, c, rng.as_deref_mut())?;
            h = tape.add(h, c)?;

            let n = self.norm(tape, p, b.ffn_norm, h)?;
            let f = self.linear(tape, p, b.ffn_in, n)?;
            let f = tape.silu(f)?;
            let f = self.linear(tape, p, b.ffn_out, f)?;
            let f = self.dropout(tape, f, rng.as_deref_mut())?;
            h = tape.add(h, f)?;
        }
        Ok(h)
    }

    /// Mean over time → linear → sigmoid, giving C clip probabilities.
    pub fn audio_head(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let d = self.config.encoder.model_dim;
        let pooled = tape.mean(x, 0)?;
        let pooled = tape.reshape(pooled, &[1, d])?;
        let logits = self.linear(tape, p, self.layout.head, pooled)?;
        let probs = tape.sigmoid(logits)?;
        tape.reshape(probs, &[NUM_CLASSES])
    }

    /// Temporal convolutions with ReLU between layers, giving T×C scores.
    pub fn cas_head(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layout.classifier.len() - 1;
        for (i, c) in self.layout.classifier.iter().enumerate() {
            h = tape.conv1d(h, p.vars[c.w], p.vars[c.b])?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Full clip forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let embeddings = self.encode(tape, p, features, rng)?;
        let clip_probs = self.audio_head(tape, p, embeddings)?;
        let cas = self.cas_head(tape, p, embeddings)?;
        Ok(Forward {
            embeddings,
            clip_probs,
            cas,
        })
    }

    /// Binds parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        }
    }

    /// Clip probabilities without dropout.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(features.clone());
        let e = self.encode(&mut tape, &p, x, None)?;
        let y = self.audio_head(&mut tape, &p, e)?;
        Ok(tape.value(y).data().to_vec())
    }
}

#[cfg(test)]
mod tests;
