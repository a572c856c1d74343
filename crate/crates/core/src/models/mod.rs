//! The seven emotion classifiers, wired from `nn` layers.

mod graph;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::FeatureKind;

pub use graph::{gradient_check, ModelGraph, ModelInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    M1Text,
    M2aSpec,
    M2bSpecDeep,
    M3Mfcc,
    M4aSpecMfcc,
    M4bTextSpec,
    M4cTextMfcc,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::M1Text,
        ModelVariant::M2aSpec,
        ModelVariant::M2bSpecDeep,
        ModelVariant::M3Mfcc,
        ModelVariant::M4aSpecMfcc,
        ModelVariant::M4bTextSpec,
        ModelVariant::M4cTextMfcc,
    ];

    /// Identifier stored in checkpoint headers.
    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get((id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::format("checkpoint", format!("unknown model variant id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::M1Text => "m1",
            ModelVariant::M2aSpec => "m2a",
            ModelVariant::M2bSpecDeep => "m2b",
            ModelVariant::M3Mfcc => "m3",
            ModelVariant::M4aSpecMfcc => "m4a",
            ModelVariant::M4bTextSpec => "m4b",
            ModelVariant::M4cTextMfcc => "m4c",
        }
    }

    /// Feature tensors the variant consumes, in a fixed order.
    pub fn required_features(self) -> &'static [FeatureKind] {
        use FeatureKind::*;
        match self {
            ModelVariant::M1Text => &[Text],
            ModelVariant::M2aSpec => &[Spectrogram],
            ModelVariant::M2bSpecDeep => &[Spectrogram, SpectrogramDs2],
            ModelVariant::M3Mfcc => &[Mfcc],
            ModelVariant::M4aSpecMfcc => &[Spectrogram, Mfcc],
            ModelVariant::M4bTextSpec => &[Text, Spectrogram],
            ModelVariant::M4cTextMfcc => &[Text, Mfcc],
        }
    }

    pub fn uses_text(self) -> bool {
        self.required_features().contains(&FeatureKind::Text)
    }

    /// Single-channel variants (no fusion head).
    pub fn is_single_channel(self) -> bool {
        !matches!(
            self,
            ModelVariant::M4aSpecMfcc | ModelVariant::M4bTextSpec | ModelVariant::M4cTextMfcc
        )
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|v| v.name() == lower)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown model variant '{s}' (expected one of m1, m2a, m2b, m3, m4a, m4b, m4c)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub text_filters_per_size: usize,
    pub text_kernel_heights: Vec<usize>,
    /// Width of the hidden text FC layer; 0 projects pooled text features
    /// straight to the classes.
    pub text_fc_size: usize,
    pub dropout_rate: f64,
    pub spec_kernels: Vec<(usize, usize)>,
    pub mfcc_kernels: Vec<(usize, usize)>,
    pub kernels_per_path: usize,
    pub fc_sizes: (usize, usize),
    pub classes: usize,
    pub spec_shape: (usize, usize),
    pub mfcc_shape: (usize, usize),
    pub text_shape: (usize, usize),
}

impl ModelConfig {
    pub fn new(variant: ModelVariant) -> Self {
        Self {
            variant,
            text_filters_per_size: 100,
            text_kernel_heights: vec![12, 8, 6, 3],
            text_fc_size: 200,
            dropout_rate: 0.5,
            spec_kernels: vec![(12, 16), (18, 24), (24, 32), (30, 40)],
            mfcc_kernels: vec![(4, 6), (6, 8), (8, 10), (10, 12)],
            kernels_per_path: 200,
            fc_sizes: (400, 200),
            classes: 4,
            spec_shape: (128, 256),
            mfcc_shape: (40, 256),
            text_shape: (128, 300),
        }
    }

    /// Small inputs and layer widths for gradient checks and quick tests:
    /// 32×64 spectrogram, 16×64 MFCC, 32×300 text, 4 kernels per path.
    pub fn reduced(variant: ModelVariant) -> Self {
        Self {
            text_filters_per_size: 4,
            text_fc_size: 12,
            spec_kernels: vec![(3, 4), (5, 6), (6, 8), (8, 10)],
            mfcc_kernels: vec![(2, 3), (3, 4), (4, 5), (5, 6)],
            kernels_per_path: 4,
            fc_sizes: (16, 12),
            spec_shape: (32, 64),
            mfcc_shape: (16, 64),
            text_shape: (32, 300),
            ..Self::new(variant)
        }
    }

    pub fn input_shape(&self, kind: FeatureKind) -> (usize, usize) {
        match kind {
            FeatureKind::Spectrogram => self.spec_shape,
            FeatureKind::SpectrogramDs2 => (self.spec_shape.0 / 2, self.spec_shape.1 / 2),
            FeatureKind::Mfcc => self.mfcc_shape,
            FeatureKind::Text => self.text_shape,
        }
    }

    /// `(kernel, pool)` sizes of every conv path reading `kind`.
    pub(crate) fn paths(&self, kind: FeatureKind) -> Vec<PathShape> {
        let (h, w) = self.input_shape(kind);
        match kind {
            FeatureKind::Text => self
                .text_kernel_heights
                .iter()
                .map(|&kh| PathShape::new(self.text_filters_per_size, (h, w), (kh, w), true))
                .collect(),
            FeatureKind::Mfcc => self
                .mfcc_kernels
                .iter()
                .map(|&k| PathShape::new(self.kernels_per_path, (h, w), k, false))
                .collect(),
            FeatureKind::Spectrogram | FeatureKind::SpectrogramDs2 => self
                .spec_kernels
                .iter()
                .map(|&k| PathShape::new(self.kernels_per_path, (h, w), k, false))
                .collect(),
        }
    }

    /// Flattened width of all pooled conv outputs for `kind`.
    pub(crate) fn stack_width(&self, kind: FeatureKind) -> usize {
        self.paths(kind).iter().map(PathShape::features).sum()
    }

    /// Pooled width of the speech channel (both resolutions for M2B).
    pub(crate) fn speech_width(&self) -> usize {
        self.speech_kinds().iter().map(|&k| self.stack_width(k)).sum()
    }

    pub(crate) fn speech_kinds(&self) -> Vec<FeatureKind> {
        self.variant
            .required_features()
            .iter()
            .copied()
            .filter(|&k| k != FeatureKind::Text)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.fc_sizes.0 == 0 || self.fc_sizes.1 == 0 {
            return Err(Error::invalid("FC sizes must be positive"));
        }
        if self.variant == ModelVariant::M2bSpecDeep
            && (self.spec_shape.0 % 2 != 0 || self.spec_shape.1 % 2 != 0)
        {
            return Err(Error::invalid(format!(
                "downsampled path needs even spectrogram dims, got {:?}",
                self.spec_shape
            )));
        }
        if self.variant.uses_text() && self.variant != ModelVariant::M1Text && self.text_fc_size == 0 {
            return Err(Error::invalid("fusion variants need a text FC layer"));
        }
        for &kind in self.variant.required_features() {
            let (h, w) = self.input_shape(kind);
            let (count, kernels): (usize, Vec<(usize, usize)>) = match kind {
                FeatureKind::Text => (
                    self.text_filters_per_size,
                    self.text_kernel_heights.iter().map(|&kh| (kh, w)).collect(),
                ),
                FeatureKind::Mfcc => (self.kernels_per_path, self.mfcc_kernels.clone()),
                _ => (self.kernels_per_path, self.spec_kernels.clone()),
            };
            if count == 0 || kernels.is_empty() {
                return Err(Error::invalid(format!("{} input has no conv kernels", kind.name())));
            }
            for (kh, kw) in kernels {
                let fits = if kind == FeatureKind::Text {
                    kh >= 1 && kh <= h
                } else {
                    // Pooling by half needs at least two outputs per axis.
                    kh >= 1 && kw >= 1 && kh < h && kw < w
                };
                if !fits {
                    return Err(Error::invalid(format!(
                        "kernel {kh}×{kw} does not fit the {h}×{w} {} input",
                        kind.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Geometry of one conv → ReLU → max-pool path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PathShape {
    pub kernels: usize,
    pub kernel: (usize, usize),
    pub conv_out: (usize, usize),
    pub pool: (usize, usize),
    pub pooled: (usize, usize),
}

impl PathShape {
    /// Text paths pool over the whole conv output; the others pool by
    /// `floor(half)` of it, leaving a 2×2 grid (3 on an axis of length 3).
    fn new(kernels: usize, input: (usize, usize), kernel: (usize, usize), global: bool) -> Self {
        let conv_out = (
            (input.0 + 1).saturating_sub(kernel.0),
            (input.1 + 1).saturating_sub(kernel.1),
        );
        let pool = if global {
            conv_out
        } else {
            (conv_out.0 / 2, conv_out.1 / 2)
        };
        let pooled = (
            conv_out.0.checked_div(pool.0).unwrap_or(0),
            conv_out.1.checked_div(pool.1).unwrap_or(0),
        );
        Self {
            kernels,
            kernel,
            conv_out,
            pool,
            pooled,
        }
    }

    fn features(&self) -> usize {
        self.kernels * self.pooled.0 * self.pooled.1
    }

    fn params(&self) -> usize {
        self.kernels * (self.kernel.0 * self.kernel.1 + 1)
    }
}

fn dense_params(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}

/// Closed-form trainable scalar count (batch-norm running statistics
/// excluded).
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let conv: usize = config
        .variant
        .required_features()
        .iter()
        .flat_map(|&k| config.paths(k))
        .map(|p| p.params())
        .sum();
    let bn = |n: usize| 2 * n;
    let (fc0, fc1) = config.fc_sizes;
    let classes = config.classes;
    let head = match config.variant {
        ModelVariant::M1Text => {
            let width = config.stack_width(FeatureKind::Text);
            match config.text_fc_size {
                0 => dense_params(width, classes),
                h => dense_params(width, h) + bn(h) + dense_params(h, classes),
            }
        }
        ModelVariant::M2aSpec | ModelVariant::M2bSpecDeep | ModelVariant::M3Mfcc => {
            dense_params(config.speech_width(), fc0)
                + bn(fc0)
                + dense_params(fc0, fc1)
                + bn(fc1)
                + dense_params(fc1, classes)
        }
        ModelVariant::M4aSpecMfcc => {
            let spec = config.stack_width(FeatureKind::Spectrogram);
            let mfcc = config.stack_width(FeatureKind::Mfcc);
            dense_params(spec, fc0)
                + dense_params(mfcc, fc0)
                + 2 * bn(fc0)
                + dense_params(2 * fc0, fc1)
                + dense_params(fc1, classes)
        }
        ModelVariant::M4bTextSpec | ModelVariant::M4cTextMfcc => {
            let t = config.text_fc_size;
            dense_params(config.stack_width(FeatureKind::Text), t)
                + bn(t)
                + dense_params(config.speech_width(), fc0)
                + bn(fc0)
                + dense_params(t + fc0, fc1)
                + dense_params(fc1, classes)
        }
    };
    Ok(conv + head)
}

/// Expected `(label, dims)` of every labeled node for a batch of `batch`,
/// derived from the configuration alone.
pub fn symbolic_shapes(config: &ModelConfig, batch: usize) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let mut out = Vec::new();
    let stack = |out: &mut Vec<(String, Vec<usize>)>, kind: FeatureKind| {
        for (i, p) in config.paths(kind).iter().enumerate() {
            out.push((
                format!("{}.conv{i}", kind.name()),
                vec![batch, p.kernels, p.pooled.0, p.pooled.1],
            ));
        }
        out.push((
            format!("{}.features", kind.name()),
            vec![batch, config.stack_width(kind)],
        ));
    };
    let (fc0, fc1) = config.fc_sizes;
    let v = config.variant;
    match v {
        ModelVariant::M1Text => {
            stack(&mut out, FeatureKind::Text);
            if config.text_fc_size > 0 {
                out.push(("head.fc".into(), vec![batch, config.text_fc_size]));
            }
        }
        ModelVariant::M2aSpec | ModelVariant::M2bSpecDeep | ModelVariant::M3Mfcc => {
            for kind in config.speech_kinds() {
                stack(&mut out, kind);
            }
            out.push(("speech.features".into(), vec![batch, config.speech_width()]));
            out.push(("head.fc0".into(), vec![batch, fc0]));
            out.push(("head.fc1".into(), vec![batch, fc1]));
        }
        _ => {
            let (a, b) = fusion_channels(v);
            let width = |k: FeatureKind| if k == FeatureKind::Text { config.text_fc_size } else { fc0 };
            stack(&mut out, a);
            out.push((format!("{}.fc", a.name()), vec![batch, width(a)]));
            stack(&mut out, b);
            out.push((format!("{}.fc", b.name()), vec![batch, width(b)]));
            out.push(("fusion".into(), vec![batch, width(a) + width(b)]));
            out.push(("head.fc".into(), vec![batch, fc1]));
        }
    }
    out.push(("logits".into(), vec![batch, config.classes]));
    Ok(out)
}

/// The two input channels of a fusion variant.
pub(crate) fn fusion_channels(v: ModelVariant) -> (FeatureKind, FeatureKind) {
    match v {
        ModelVariant::M4aSpecMfcc => (FeatureKind::Spectrogram, FeatureKind::Mfcc),
        ModelVariant::M4bTextSpec => (FeatureKind::Text, FeatureKind::Spectrogram),
        ModelVariant::M4cTextMfcc => (FeatureKind::Text, FeatureKind::Mfcc),
        other => unreachable!("{other} is not a fusion variant"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_ids_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
            assert_eq!(ModelVariant::from_id(v.id()).unwrap(), v);
        }
        assert_eq!(ModelVariant::M4cTextMfcc.id(), 7);
        assert!(ModelVariant::from_id(0).is_err());
        assert!(ModelVariant::from_id(8).is_err());
        assert!("m5".parse::<ModelVariant>().is_err());
        assert_eq!("M4C".parse::<ModelVariant>().unwrap(), ModelVariant::M4cTextMfcc);
    }

    #[test]
    fn default_feature_widths() {
        let m2a = ModelConfig::new(ModelVariant::M2aSpec);
        assert_eq!(m2a.speech_width(), 3200);
        let m2b = ModelConfig::new(ModelVariant::M2bSpecDeep);
        assert_eq!(m2b.speech_width(), 6400);
        let m1 = ModelConfig::new(ModelVariant::M1Text);
        assert_eq!(m1.stack_width(FeatureKind::Text), 400);
        let m3 = ModelConfig::new(ModelVariant::M3Mfcc);
        assert_eq!(m3.speech_width(), 3200);
    }

    #[test]
    fn first_spec_path_pools_117_by_241_into_2_by_2() {
        let p = ModelConfig::new(ModelVariant::M2aSpec).paths(FeatureKind::Spectrogram)[0];
        assert_eq!(p.conv_out, (117, 241));
        assert_eq!(p.pool, (58, 120));
        assert_eq!(p.pooled, (2, 2));
        assert_eq!(p.params(), 38_600);
    }

    #[test]
    fn m2a_first_dense_layer_size() {
        assert_eq!(dense_params(3200, 400), 1_280_400);
    }

    #[test]
    fn conv_counts_scale_linearly_with_kernels() {
        let base = ModelConfig::new(ModelVariant::M2aSpec);
        let double = ModelConfig {
            kernels_per_path: 400,
            ..base.clone()
        };
        for (a, b) in base
            .paths(FeatureKind::Spectrogram)
            .iter()
            .zip(double.paths(FeatureKind::Spectrogram))
        {
            assert_eq!(2 * a.params(), b.params());
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        for v in ModelVariant::ALL {
            ModelConfig::new(v).validate().unwrap();
            ModelConfig::reduced(v).validate().unwrap();
        }
        let mut c = ModelConfig::new(ModelVariant::M2aSpec);
        c.spec_kernels[0] = (128, 16);
        assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
        let mut c = ModelConfig::new(ModelVariant::M1Text);
        c.text_kernel_heights.push(129);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(ModelVariant::M3Mfcc);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(ModelVariant::M4cTextMfcc);
        c.text_fc_size = 0;
        assert!(c.validate().is_err());
    }
}
