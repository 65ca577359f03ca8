//! The backbone zoo. Every model is cut into exactly four stages followed by
//! a classifier head, so any pair of models can be used as teacher and
//! student.
//!
//! | name         | family | stage outputs at 32×32                          |
//! |--------------|--------|-------------------------------------------------|
//! | `tiny_cnn`   | CNN    | (B,16,16,16) (B,32,8,8) (B,64,4,4) (B,128,2,2)  |
//! | `tiny_vit`   | ViT    | (B,64,48) ×4                                    |
//! | `tiny_mixer` | MLP    | (B,64,48) ×4                                    |

mod cnn;
mod mixer;
mod vit;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};

pub use cnn::{TinyCnn, TinyCnnConfig};
pub use mixer::{TinyMixer, TinyMixerConfig};
pub use vit::{TinyVit, TinyVitConfig};

use crate::error::{Error, Result};
use crate::feature::{Layout, StageFeature, StageShape};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Cnn,
    Vit,
    Mlp,
}

impl Family {
    pub fn layout(self) -> Layout {
        match self {
            Family::Cnn => Layout::Spatial,
            Family::Vit | Family::Mlp => Layout::Tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    TinyCnn,
    TinyVit,
    TinyMixer,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [
        BackboneKind::TinyCnn,
        BackboneKind::TinyVit,
        BackboneKind::TinyMixer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::TinyCnn => "tiny_cnn",
            BackboneKind::TinyVit => "tiny_vit",
            BackboneKind::TinyMixer => "tiny_mixer",
        }
    }

    pub fn family(self) -> Family {
        match self {
            BackboneKind::TinyCnn => Family::Cnn,
            BackboneKind::TinyVit => Family::Vit,
            BackboneKind::TinyMixer => Family::Mlp,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "model",
                    format!("unknown backbone `{s}` (expected tiny_cnn, tiny_vit or tiny_mixer)"),
                )
            })
    }
}

/// What to build: a zoo name, class count and square input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub num_classes: usize,
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, num_classes: usize, input_size: usize) -> Self {
        Self {
            kind,
            num_classes,
            input_size,
        }
    }

    pub fn parse(name: &str, num_classes: usize, input_size: usize) -> Result<Self> {
        Ok(Self::new(name.parse()?, num_classes, input_size))
    }

    /// Resolves the spec to a concrete architecture, validating sizes.
    pub fn architecture(&self) -> Result<Architecture> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        let s = self.input_size;
        if s < 16 || s > 64 || s % 16 != 0 {
            return Err(Error::config(
                "input_size",
                format!("unsupported input size {s}; expected 16, 32, 48 or 64"),
            ));
        }
        Ok(match self.kind {
            BackboneKind::TinyCnn => {
                Architecture::Cnn(TinyCnnConfig::reference(s, self.num_classes))
            }
            BackboneKind::TinyVit => {
                Architecture::Vit(TinyVitConfig::reference(s, self.num_classes))
            }
            BackboneKind::TinyMixer => {
                Architecture::Mixer(TinyMixerConfig::reference(s, self.num_classes))
            }
        })
    }
}

/// A fully specified architecture. The zoo names map to reference
/// configurations; smaller ones are used for micro-scale checks.
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Cnn(TinyCnnConfig),
    Vit(TinyVitConfig),
    Mixer(TinyMixerConfig),
}

impl Architecture {
    pub fn family(&self) -> Family {
        match self {
            Architecture::Cnn(_) => Family::Cnn,
            Architecture::Vit(_) => Family::Vit,
            Architecture::Mixer(_) => Family::Mlp,
        }
    }

    pub fn stage_shapes(&self) -> [StageShape; 4] {
        match self {
            Architecture::Cnn(c) => c.stage_shapes(),
            Architecture::Vit(c) => c.stage_shapes(),
            Architecture::Mixer(c) => c.stage_shapes(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Architecture::Cnn(c) => c.input_size,
            Architecture::Vit(c) => c.input_size,
            Architecture::Mixer(c) => c.input_size,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::Cnn(c) => c.in_channels,
            Architecture::Vit(c) => c.in_channels,
            Architecture::Mixer(c) => c.in_channels,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Cnn(c) => c.num_classes,
            Architecture::Vit(c) => c.num_classes,
            Architecture::Mixer(c) => c.num_classes,
        }
    }
}

#[derive(Debug, Clone)]
enum Net {
    Cnn(TinyCnn),
    Vit(TinyVit),
    Mixer(TinyMixer),
}

/// A built backbone together with the store that owns its parameters.
pub struct StagedBackbone {
    name: String,
    arch: Architecture,
    net: Net,
    store: ParamStore,
}

impl StagedBackbone {
    /// Builds a zoo model with seed-deterministic initialization.
    pub fn build(spec: &BackboneSpec, seed: u64, dtype: DType) -> Result<Self> {
        let arch = spec.architecture()?;
        Self::with_store(spec.kind.name(), arch, ParamStore::new(seed, dtype))
    }

    pub fn from_architecture(arch: Architecture, seed: u64, dtype: DType) -> Result<Self> {
        let name = match arch.family() {
            Family::Cnn => "custom_cnn",
            Family::Vit => "custom_vit",
            Family::Mlp => "custom_mixer",
        };
        Self::with_store(name, arch, ParamStore::new(seed, dtype))
    }

    /// Builds `arch` drawing parameters from `store` (which may be preloaded
    /// from a checkpoint and/or frozen).
    pub fn with_store(name: &str, arch: Architecture, mut store: ParamStore) -> Result<Self> {
        let net = match &arch {
            Architecture::Cnn(c) => Net::Cnn(TinyCnn::new(c, &mut store)?),
            Architecture::Vit(c) => Net::Vit(TinyVit::new(c, &mut store)?),
            Architecture::Mixer(c) => Net::Mixer(TinyMixer::new(c, &mut store)?),
        };
        Ok(Self {
            name: name.to_string(),
            arch,
            net,
            store,
        })
    }

    /// An independent copy whose parameters are excluded from autodiff.
    pub fn frozen_copy(&self) -> Result<Self> {
        let tensors = self
            .store
            .to_tensors()
            .into_iter()
            .map(|(n, t)| Ok((n, t.copy()?)))
            .collect::<Result<_>>()?;
        let store = ParamStore::from_tensors(tensors, self.dtype()).frozen();
        Self::with_store(&self.name, self.arch.clone(), store)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn family(&self) -> Family {
        self.arch.family()
    }

    pub fn layout(&self) -> Layout {
        self.family().layout()
    }

    pub fn stage_shapes(&self) -> [StageShape; 4] {
        self.arch.stage_shapes()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = self.input_size();
        let expected = [self.arch.in_channels(), s, s];
        match batch.dims() {
            [b, rest @ ..] if *b > 0 && rest == expected => Ok(()),
            dims => Err(Error::Input(format!(
                "{} expects a nonempty batch of shape (B,{},{s},{s}), got {dims:?}",
                self.name, expected[0]
            ))),
        }
    }

    /// Runs stage `i` (1-based). Stage 1 consumes the image batch; later
    /// stages consume the previous stage's output.
    pub fn forward_stage(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        if !(1..=4).contains(&i) {
            return Err(Error::Usage(format!("stage index {i} outside 1..=4")));
        }
        match &self.net {
            Net::Cnn(n) => n.forward_stage(i, x),
            Net::Vit(n) => n.forward_stage(i, x),
            Net::Mixer(n) => n.forward_stage(i, x),
        }
    }

    /// Classifier head on the stage-4 output.
    pub fn head(&self, x: &Tensor) -> Result<Tensor> {
        match &self.net {
            Net::Cnn(n) => n.head(x),
            Net::Vit(n) => n.head(x),
            Net::Mixer(n) => n.head(x),
        }
    }

    /// All four stage features plus logits.
    pub fn forward_stages(&self, batch: &Tensor) -> Result<(Vec<StageFeature>, Tensor)> {
        self.check_input(batch)?;
        let batch = batch.to_dtype(self.dtype())?;
        let mut stages = Vec::with_capacity(4);
        let mut x = batch;
        for i in 1..=4 {
            x = self.forward_stage(i, &x)?;
            stages.push(StageFeature::new(x.clone(), self.layout(), i));
        }
        let logits = self.head(&x)?;
        Ok((stages, logits))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_stages(batch)?.1)
    }
}
