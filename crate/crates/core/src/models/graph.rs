use std::collections::BTreeMap;

use rand::Rng;

use super::{fusion_channels, ModelConfig, ModelVariant};
use crate::error::{Error, Result};
use crate::featurize::{FeatureKind, FeatureSet};
use crate::nn::checkpoint::{Block, Checkpoint};
use crate::nn::gradcheck::{check_coordinates, sample_coordinates, GradCheckReport, DEFAULT_EPS};
use crate::nn::{seed_rng, softmax_cross_entropy, BatchNorm, Conv2d, Dense, LayerMode, ParamStore, Tape, Var};
use crate::tensor::{Scalar, Tensor};

const META_CONFIG: &str = "meta.config";

/// A batch of model inputs, each `B×1×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs<T: Scalar = f32> {
    tensors: BTreeMap<FeatureKind, Tensor<T>>,
}

impl<T: Scalar> Default for ModelInputs<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ModelInputs<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a `B×H×W` or `B×1×H×W` tensor.
    pub fn insert(&mut self, kind: FeatureKind, tensor: Tensor<T>) -> Result<()> {
        let d = tensor.dims().to_vec();
        let tensor = match d.len() {
            3 => tensor.reshape(&[d[0], 1, d[1], d[2]])?,
            4 if d[1] == 1 => tensor,
            _ => {
                return Err(Error::invalid(format!(
                    "{} input must be B×H×W or B×1×H×W, got {d:?}",
                    kind.name()
                )))
            }
        };
        if let Some(b) = self.batch_size() {
            if tensor.dims()[0] != b {
                return Err(Error::invalid(format!(
                    "{} input has batch {}, others have {b}",
                    kind.name(),
                    tensor.dims()[0]
                )));
            }
        }
        self.tensors.insert(kind, tensor);
        Ok(())
    }

    pub fn get(&self, kind: FeatureKind) -> Option<&Tensor<T>> {
        self.tensors.get(&kind)
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.tensors.values().next().map(|t| t.dims()[0])
    }

    pub fn cast<U: Scalar>(&self) -> ModelInputs<U> {
        ModelInputs {
            tensors: self.tensors.iter().map(|(&k, t)| (k, t.cast())).collect(),
        }
    }
}

impl ModelInputs<f32> {
    /// Stack the `kinds` tensors of several utterances into one batch.
    pub fn from_features(sets: &[&FeatureSet], kinds: &[FeatureKind]) -> Result<Self> {
        let mut inputs = Self::new();
        for &kind in kinds {
            let parts = sets
                .iter()
                .map(|s| s.require(kind))
                .collect::<Result<Vec<_>>>()?;
            inputs.insert(kind, Tensor::stack(&parts)?)?;
        }
        Ok(inputs)
    }
}

/// Parallel conv → ReLU → max-pool paths over one input, flattened and
/// concatenated.
#[derive(Debug, Clone)]
struct ConvStack {
    kind: FeatureKind,
    paths: Vec<(Conv2d, (usize, usize))>,
}

impl ConvStack {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        kind: FeatureKind,
        rng: &mut R,
    ) -> Self {
        let paths = config
            .paths(kind)
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let name = format!("{}.conv{i}", kind.name());
                let conv = Conv2d::new(store, &name, 1, p.kernels, p.kernel.0, p.kernel.1, rng);
                (conv, p.pool)
            })
            .collect();
        Self { kind, paths }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut pooled = Vec::with_capacity(self.paths.len());
        for (i, (conv, (ph, pw))) in self.paths.iter().enumerate() {
            let w = tape.param(store, conv.weight);
            let b = tape.param(store, conv.bias);
            let p = tape.conv_relu_maxpool(x, w, b, *ph, *pw)?;
            tape.label(p, format!("{}.conv{i}", self.kind.name()));
            pooled.push(tape.flatten(p)?);
        }
        let features = tape.concat(&pooled)?;
        tape.label(features, format!("{}.features", self.kind.name()));
        Ok(features)
    }
}

#[derive(Debug, Clone)]
struct DenseBn {
    fc: Dense,
    bn: BatchNorm,
}

impl DenseBn {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc: Dense::new(store, &format!("{name}.fc"), inputs, outputs, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), outputs),
        }
    }
}

#[derive(Debug, Clone)]
enum Head {
    /// dropout → [dense → ReLU → BN] → dense
    Text { hidden: Option<DenseBn>, out: Dense },
    /// dense → BN → ReLU → dropout → dense → BN → dense
    Single {
        first: DenseBn,
        second: DenseBn,
        out: Dense,
    },
    /// per channel dense → BN, concat → dense → ReLU → dropout → dense
    Fusion {
        a: DenseBn,
        b: DenseBn,
        fc: Dense,
        out: Dense,
    },
}

/// A built model: configuration, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct ModelGraph<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    stacks: Vec<ConvStack>,
    head: Head,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (fc0, fc1) = config.fc_sizes;
        let classes = config.classes;
        let v = config.variant;
        let (stacks, head) = match v {
            ModelVariant::M1Text => {
                let stack = ConvStack::new(&mut store, &config, FeatureKind::Text, rng);
                let width = config.stack_width(FeatureKind::Text);
                let t = config.text_fc_size;
                let hidden = (t > 0).then(|| DenseBn::new(&mut store, "head", width, t, rng));
                let out = Dense::new(&mut store, "head.out", if t > 0 { t } else { width }, classes, rng);
                (vec![stack], Head::Text { hidden, out })
            }
            ModelVariant::M2aSpec | ModelVariant::M2bSpecDeep | ModelVariant::M3Mfcc => {
                let stacks: Vec<ConvStack> = config
                    .speech_kinds()
                    .into_iter()
                    .map(|k| ConvStack::new(&mut store, &config, k, rng))
                    .collect();
                let first = DenseBn::new(&mut store, "head.0", config.speech_width(), fc0, rng);
                let second = DenseBn::new(&mut store, "head.1", fc0, fc1, rng);
                let out = Dense::new(&mut store, "head.out", fc1, classes, rng);
                (stacks, Head::Single { first, second, out })
            }
            _ => {
                let (ka, kb) = fusion_channels(v);
                let width = |k: FeatureKind| if k == FeatureKind::Text { config.text_fc_size } else { fc0 };
                let sa = ConvStack::new(&mut store, &config, ka, rng);
                let a = DenseBn::new(&mut store, ka.name(), config.stack_width(ka), width(ka), rng);
                let sb = ConvStack::new(&mut store, &config, kb, rng);
                let b = DenseBn::new(&mut store, kb.name(), config.stack_width(kb), width(kb), rng);
                let fc = Dense::new(&mut store, "head.fc", width(ka) + width(kb), fc1, rng);
                let out = Dense::new(&mut store, "head.out", fc1, classes, rng);
                (vec![sa, sb], Head::Fusion { a, b, fc, out })
            }
        };
        Ok(Self {
            config,
            store,
            stacks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Record a forward pass on `tape` (whose mode selects train or eval
    /// behaviour) and return the `B×classes` logits.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        inputs: &ModelInputs<T>,
        rng: &mut R,
    ) -> Result<Var> {
        let mut store = std::mem::take(&mut self.store);
        let out = self.forward_with(&mut store, tape, inputs, rng);
        self.store = store;
        out
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, inputs: &ModelInputs<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(LayerMode::Eval);
        let logits = self.forward(&mut tape, inputs, &mut seed_rng(0))?;
        Ok(tape.value(logits).clone())
    }

    fn input_var(&self, tape: &mut Tape<T>, inputs: &ModelInputs<T>, kind: FeatureKind) -> Result<Var> {
        let t = inputs.get(kind).ok_or_else(|| {
            Error::invalid(format!(
                "model {} needs a {} input",
                self.config.variant,
                kind.name()
            ))
        })?;
        let (h, w) = self.config.input_shape(kind);
        if t.dims()[2..] != [h, w] {
            return Err(Error::invalid(format!(
                "{} input must be {h}×{w}, got {:?}",
                kind.name(),
                &t.dims()[2..]
            )));
        }
        Ok(tape.input(t.clone()))
    }

    fn forward_with<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        inputs: &ModelInputs<T>,
        rng: &mut R,
    ) -> Result<Var> {
        let rate = self.config.dropout_rate;
        let logits = match &self.head {
            Head::Text { hidden, out } => {
                let x = self.input_var(tape, inputs, FeatureKind::Text)?;
                let f = self.stacks[0].forward(tape, store, x)?;
                let mut h = tape.dropout(f, rate, rng)?;
                if let Some(DenseBn { fc, bn }) = hidden {
                    let z = fc.forward(tape, store, h)?;
                    tape.label(z, "head.fc");
                    let a = tape.relu(z);
                    h = bn.forward(tape, store, a)?;
                }
                out.forward(tape, store, h)?
            }
            Head::Single { first, second, out } => {
                let mut parts = Vec::with_capacity(self.stacks.len());
                for stack in &self.stacks {
                    let x = self.input_var(tape, inputs, stack.kind)?;
                    parts.push(stack.forward(tape, store, x)?);
                }
                let f = tape.concat(&parts)?;
                tape.label(f, "speech.features");
                let z = first.fc.forward(tape, store, f)?;
                tape.label(z, "head.fc0");
                let n = first.bn.forward(tape, store, z)?;
                let a = tape.relu(n);
                let d = tape.dropout(a, rate, rng)?;
                let z = second.fc.forward(tape, store, d)?;
                tape.label(z, "head.fc1");
                let n = second.bn.forward(tape, store, z)?;
                out.forward(tape, store, n)?
            }
            Head::Fusion { a, b, fc, out } => {
                let mut channels = Vec::with_capacity(2);
                for (stack, DenseBn { fc, bn }) in self.stacks.iter().zip([a, b]) {
                    let x = self.input_var(tape, inputs, stack.kind)?;
                    let f = stack.forward(tape, store, x)?;
                    let z = fc.forward(tape, store, f)?;
                    tape.label(z, format!("{}.fc", stack.kind.name()));
                    channels.push(bn.forward(tape, store, z)?);
                }
                let joint = tape.concat(&channels)?;
                tape.label(joint, "fusion");
                let z = fc.forward(tape, store, joint)?;
                tape.label(z, "head.fc");
                let a = tape.relu(z);
                let d = tape.dropout(a, rate, rng)?;
                out.forward(tape, store, d)?
            }
        };
        tape.label(logits, "logits");
        Ok(logits)
    }

    /// Parameters, running statistics, an embedded configuration block and
    /// optionally the optimizer accumulators.
    pub fn to_checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(self.config.variant.id(), &self.store, with_optimizer);
        let meta = encode_config(&self.config);
        ckpt.params.push(Block {
            name: META_CONFIG.to_string(),
            dims: vec![meta.len()],
            data: meta,
        });
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let variant = ModelVariant::from_id(ckpt.variant_id)?;
        let meta = ckpt
            .block(META_CONFIG)
            .ok_or_else(|| Error::format("checkpoint", "missing model configuration block"))?;
        let config = decode_config(variant, &meta.data)?;
        let mut graph = Self::build(config, &mut seed_rng(0))?;
        let mut params = ckpt.clone();
        params.params.retain(|b| b.name != META_CONFIG);
        params.restore_into(&mut graph.store)?;
        Ok(graph)
    }
}

fn encode_config(c: &ModelConfig) -> Vec<f32> {
    let mut v: Vec<f32> = [
        c.spec_shape.0,
        c.spec_shape.1,
        c.mfcc_shape.0,
        c.mfcc_shape.1,
        c.text_shape.0,
        c.text_shape.1,
        c.classes,
        c.text_filters_per_size,
        c.text_fc_size,
        c.kernels_per_path,
        c.fc_sizes.0,
        c.fc_sizes.1,
    ]
    .iter()
    .map(|&x| x as f32)
    .collect();
    v.push(c.dropout_rate as f32);
    v.push(c.text_kernel_heights.len() as f32);
    v.extend(c.text_kernel_heights.iter().map(|&h| h as f32));
    for kernels in [&c.spec_kernels, &c.mfcc_kernels] {
        v.push(kernels.len() as f32);
        for &(h, w) in kernels {
            v.push(h as f32);
            v.push(w as f32);
        }
    }
    v
}

fn decode_config(variant: ModelVariant, data: &[f32]) -> Result<ModelConfig> {
    let bad = || Error::format("checkpoint", "malformed model configuration block");
    let mut it = data.iter().copied();
    let mut count = || -> Result<usize> {
        let x = it.next().ok_or_else(bad)?;
        if x < 0.0 || x.fract() != 0.0 {
            return Err(bad());
        }
        Ok(x as usize)
    };
    let mut fixed = [0usize; 12];
    for slot in &mut fixed {
        *slot = count()?;
    }
    // Dropout is stored as f32; round away the conversion noise.
    let dropout = (data.get(12).copied().ok_or_else(bad)? as f64 * 1e6).round() / 1e6;
    let mut it = data.iter().copied().skip(13);
    let mut next = || -> Result<usize> {
        let x = it.next().ok_or_else(bad)?;
        if x < 0.0 || x.fract() != 0.0 {
            return Err(bad());
        }
        Ok(x as usize)
    };
    let n = next()?;
    let heights = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let mut pairs = || -> Result<Vec<(usize, usize)>> {
        let n = next()?;
        (0..n).map(|_| Ok((next()?, next()?))).collect()
    };
    let spec_kernels = pairs()?;
    let mfcc_kernels = pairs()?;
    Ok(ModelConfig {
        variant,
        spec_shape: (fixed[0], fixed[1]),
        mfcc_shape: (fixed[2], fixed[3]),
        text_shape: (fixed[4], fixed[5]),
        classes: fixed[6],
        text_filters_per_size: fixed[7],
        text_fc_size: fixed[8],
        kernels_per_path: fixed[9],
        fc_sizes: (fixed[10], fixed[11]),
        dropout_rate: dropout,
        text_kernel_heights: heights,
        spec_kernels,
        mfcc_kernels,
    })
}

/// Random inputs in `[-1, 1)` matching `config`'s shapes.
pub(crate) fn random_inputs<T: Scalar, R: Rng + ?Sized>(
    config: &ModelConfig,
    batch: usize,
    rng: &mut R,
) -> ModelInputs<T> {
    let mut inputs = ModelInputs::new();
    for &kind in config.variant.required_features() {
        let (h, w) = config.input_shape(kind);
        let t = Tensor::from_fn(&[batch, 1, h, w], |_| T::from_f64(rng.gen_range(-1.0..1.0)));
        inputs.insert(kind, t).expect("consistent batch");
    }
    inputs
}

/// Finite-difference check of the training loss gradient of `variant` at
/// reduced scale, on `coords` sampled parameter coordinates.
pub fn gradient_check(variant: ModelVariant, seed: u64, coords: usize) -> Result<GradCheckReport> {
    let config = ModelConfig::reduced(variant);
    let mut rng = seed_rng(seed);
    let mut graph = ModelGraph::<f64>::build(config.clone(), &mut rng)?;
    let batch = 3;
    let inputs = random_inputs::<f64, _>(&config, batch, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..config.classes)).collect();
    let dropout_seed: u64 = rng.gen();

    let mut store = std::mem::take(&mut graph.store);
    let run = |s: &mut ParamStore<f64>, backward: bool| -> Result<(f64, u64)> {
        let mut tape = Tape::new(LayerMode::Train);
        let logits = graph.forward_with(s, &mut tape, &inputs, &mut seed_rng(dropout_seed))?;
        let ce = softmax_cross_entropy(tape.value(logits), &labels)?;
        if backward {
            s.zero_grads();
            tape.backward(logits, ce.grad, s)?;
        }
        Ok((ce.loss, tape.branch_signature()))
    };
    run(&mut store, true)?;
    let picks = sample_coordinates(&store, coords, &mut rng);
    check_coordinates(&mut store, &picks, DEFAULT_EPS, |s| run(s, false))
}
