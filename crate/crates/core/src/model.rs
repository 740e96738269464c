//! Model descriptions, parameter accounting, and the CONV/FC split.
//!
//! A [`ModelSpec`] is an ordered list of layers plus the per-sample input
//! shape and the per-node batch size. Large reference networks are shipped as
//! specs flagged `profile_only`: their shapes drive parameter and activation
//! accounting, but they are never executed. Networks that only exist as
//! published counts are described by a bare [`ModelProfile`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::init::seeded_layers;
use crate::layers::{Layer, LayerKind};
use crate::network::Sequential;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model has no fully connected layer")]
    NoFcLayer,
    #[error("model starts with a fully connected layer; use an explicit MLP boundary")]
    NoConvBlock,
    #[error("invalid boundary {boundary} for a {layers}-layer model: {reason}")]
    BadBoundary {
        boundary: usize,
        layers: usize,
        reason: String,
    },
    #[error("layer {index} ({kind:?}): {source}")]
    Shape {
        index: usize,
        kind: LayerKind,
        source: TensorError,
    },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown model {0:?}")]
    Unknown(String),
    #[error("model {0:?} is a count profile and cannot be executed")]
    NotExecutable(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing model file: {0}")]
    Parse(#[from] toml::de::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    /// Per-node batch size `K`.
    pub batch: usize,
    /// Shapes and counts only; too large to train at desk scale.
    #[serde(default)]
    pub profile_only: bool,
    pub layers: Vec<LayerKind>,
}

/// Published counts for a model: total parameters `P`, CONV-block
/// parameters `P_c`, boundary activations per sample `A`, and batch `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub params: u64,
    pub conv_params: u64,
    pub activations: u64,
    pub batch: usize,
}

impl ModelProfile {
    pub fn fc_params(&self) -> u64 {
        self.params - self.conv_params
    }

    pub fn validate(&self) -> Result<()> {
        if self.params == 0 || self.activations == 0 || self.batch == 0 {
            return Err(ModelError::Invalid(format!(
                "profile {:?} needs positive params, activations, and batch",
                self.name
            )));
        }
        if self.conv_params >= self.params {
            return Err(ModelError::Invalid(format!(
                "profile {:?}: conv params {} must be below total {}",
                self.name, self.conv_params, self.params
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    /// `layers[..split_index]` form the CONV block, the rest the FC block.
    pub split_index: usize,
    pub conv_param_count: u64,
    pub fc_param_count: u64,
    /// Per-sample shape of the activations crossing the boundary.
    pub boundary_shape: Vec<usize>,
    pub boundary_activation_count: u64,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, batch: usize, layers: Vec<LayerKind>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            input_shape,
            batch,
            profile_only: false,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn profile_only(mut self) -> Self {
        self.profile_only = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(ModelError::Invalid("batch must be positive".into()));
        }
        if self.layers.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(ModelError::Invalid(
                "model needs layers and a non-degenerate input shape".into(),
            ));
        }
        if let Some(i) = self.layers[..self.layers.len() - 1]
            .iter()
            .position(|k| *k == LayerKind::SoftmaxCrossEntropy)
        {
            return Err(ModelError::Invalid(format!(
                "softmax_ce at layer {i} must be the final layer"
            )));
        }
        self.shapes().map(|_| ())
    }

    /// Per-sample activation shapes: entry `i` is the input to layer `i`, the
    /// final entry is the model output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (index, kind) in self.layers.iter().enumerate() {
            let next = kind
                .output_shape(shapes.last().unwrap())
                .map_err(|source| ModelError::Shape {
                    index,
                    kind: *kind,
                    source,
                })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> usize {
        self.shapes()
            .ok()
            .and_then(|s| s.last().map(|l| l.iter().product()))
            .unwrap_or(0)
    }

    /// Total learnable parameter count and the per-layer breakdown.
    pub fn count_params(&self) -> (u64, Vec<u64>) {
        let per_layer: Vec<u64> = self.layers.iter().map(LayerKind::param_count).collect();
        (per_layer.iter().sum(), per_layer)
    }

    /// Splits at the CONV/FC boundary: after the last convolution, pooling,
    /// or flatten layer that precedes the first fully connected layer.
    pub fn split(&self) -> Result<Partition> {
        let first_fc = self
            .layers
            .iter()
            .position(LayerKind::is_fc)
            .ok_or(ModelError::NoFcLayer)?;
        if first_fc == 0 {
            return Err(ModelError::NoConvBlock);
        }
        let head = &self.layers[..first_fc];
        let last_conv = head.iter().rposition(LayerKind::is_conv);
        let last_reduce = head
            .iter()
            .rposition(|k| matches!(k, LayerKind::MaxPool2d { .. } | LayerKind::Flatten));
        let split_index = match (last_conv, last_reduce) {
            (None, None) => return Err(ModelError::NoConvBlock),
            (a, b) => a.max(b).unwrap() + 1,
        };
        self.partition_at(split_index)
    }

    /// Splits a fully connected model before layer `boundary`: the front block
    /// plays the CONV-worker role, the rest the FC-worker role.
    pub fn mlp_split(&self, boundary: usize) -> Result<Partition> {
        let layers = self.layers.len();
        let bad = |reason: &str| ModelError::BadBoundary {
            boundary,
            layers,
            reason: reason.into(),
        };
        if self.layers.iter().any(LayerKind::is_conv) {
            return Err(bad("model has convolution layers; use split()"));
        }
        if boundary == 0 || boundary >= layers {
            return Err(bad("both blocks must be non-empty"));
        }
        if !self.layers[..boundary].iter().any(LayerKind::has_params) {
            return Err(bad("front block has no parameters"));
        }
        if !self.layers[boundary..].iter().any(LayerKind::is_fc) {
            return Err(bad("back block has no fully connected layer"));
        }
        self.partition_at(boundary)
    }

    fn partition_at(&self, split_index: usize) -> Result<Partition> {
        let shapes = self.shapes()?;
        let (_, per_layer) = self.count_params();
        let conv_param_count = per_layer[..split_index].iter().sum();
        let fc_param_count = per_layer[split_index..].iter().sum();
        let boundary_shape = shapes[split_index].clone();
        Ok(Partition {
            split_index,
            conv_param_count,
            fc_param_count,
            boundary_activation_count: boundary_shape.iter().product::<usize>() as u64,
            boundary_shape,
        })
    }

    /// Count profile using the default CONV/FC split.
    pub fn profile(&self) -> Result<ModelProfile> {
        let p = self.split()?;
        Ok(ModelProfile {
            name: self.name.clone(),
            params: p.conv_param_count + p.fc_param_count,
            conv_params: p.conv_param_count,
            activations: p.boundary_activation_count,
            batch: self.batch,
        })
    }

    /// Deterministically initialized network; refuses profile-only specs.
    pub fn build(&self, seed: u64) -> Result<Sequential> {
        if self.profile_only {
            return Err(ModelError::NotExecutable(self.name.clone()));
        }
        Ok(Sequential::new(seeded_layers(&self.layers, seed)))
    }

    /// Builds the network and cuts it into `(front, back)` blocks.
    pub fn build_split(&self, seed: u64, partition: &Partition) -> Result<(Sequential, Sequential)> {
        let mut layers: Vec<Layer> = self.build(seed)?.layers;
        let back = layers.split_off(partition.split_index);
        Ok((Sequential::new(layers), Sequential::new(back)))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A model file or built-in name resolves to either form.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Spec(ModelSpec),
    Profile(ModelProfile),
}

impl ModelSource {
    pub fn name(&self) -> &str {
        match self {
            ModelSource::Spec(s) => &s.name,
            ModelSource::Profile(p) => &p.name,
        }
    }

    pub fn profile(&self) -> Result<ModelProfile> {
        match self {
            ModelSource::Spec(s) => s.profile(),
            ModelSource::Profile(p) => Ok(p.clone()),
        }
    }

    /// The executable spec, if there is one.
    pub fn executable(&self) -> Result<&ModelSpec> {
        match self {
            ModelSource::Spec(s) if !s.profile_only => Ok(s),
            other => Err(ModelError::NotExecutable(other.name().to_string())),
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        match &mut self {
            ModelSource::Spec(s) => s.batch = batch,
            ModelSource::Profile(p) => p.batch = batch,
        }
        self
    }
}

#[derive(Deserialize)]
struct ProfileFile {
    profile: ModelProfile,
}

/// Parses a model file: either a layer spec or a `[profile]` table.
pub fn parse_model(text: &str) -> Result<ModelSource> {
    let value: toml::Table = toml::from_str(text)?;
    if value.contains_key("profile") {
        let f: ProfileFile = toml::from_str(text)?;
        f.profile.validate()?;
        Ok(ModelSource::Profile(f.profile))
    } else {
        Ok(ModelSource::Spec(ModelSpec::from_toml_str(text)?))
    }
}

/// Resolves a built-in model name, or else reads a model file from disk.
pub fn load_model(name_or_path: &str) -> Result<ModelSource> {
    if let Some(m) = builtin(name_or_path) {
        return Ok(m);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(ModelError::Unknown(name_or_path.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model(&text)
}

pub const BUILTIN_MODELS: &[&str] = &[
    "tiny_cnn",
    "tiny_mlp",
    "mlp",
    "alexnet",
    "vgg16",
    "vgg19",
    "inception_v3",
    "resnet152",
];

pub fn builtin(name: &str) -> Option<ModelSource> {
    let m = match name {
        "tiny_cnn" => ModelSource::Spec(zoo::tiny_cnn()),
        "tiny_mlp" => ModelSource::Spec(zoo::tiny_mlp()),
        "mlp" => ModelSource::Spec(zoo::mlp_1024_1024_4096()),
        "alexnet" => ModelSource::Spec(zoo::alexnet()),
        "vgg16" => ModelSource::Spec(zoo::vgg(&[2, 2, 3, 3, 3], "vgg16")),
        "vgg19" => ModelSource::Spec(zoo::vgg(&[2, 2, 4, 4, 4], "vgg19")),
        "inception_v3" => ModelSource::Profile(zoo::inception_v3()),
        "resnet152" => ModelSource::Profile(zoo::resnet152()),
        _ => return None,
    };
    Some(m)
}

/// Built-in model definitions.
pub mod zoo {
    use super::*;

    fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> LayerKind {
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    fn pool(kernel: usize, stride: usize) -> LayerKind {
        LayerKind::MaxPool2d { kernel, stride }
    }

    fn fc(in_dim: usize, out_dim: usize) -> LayerKind {
        LayerKind::FullyConnected { in_dim, out_dim }
    }

    use LayerKind::{Flatten, ReLU, SoftmaxCrossEntropy as Ce};

    /// Two conv/pool stages on 3x16x16 input, then a 256-128-10 classifier.
    pub fn tiny_cnn() -> ModelSpec {
        ModelSpec::new(
            "tiny_cnn",
            vec![3, 16, 16],
            4,
            vec![
                conv(3, 8, 3, 1, 1),
                ReLU,
                pool(2, 2),
                conv(8, 16, 3, 1, 1),
                ReLU,
                pool(2, 2),
                Flatten,
                fc(256, 128),
                ReLU,
                fc(128, 10),
                Ce,
            ],
        )
        .expect("tiny_cnn is valid")
    }

    /// A small executable MLP for layer-separation runs.
    pub fn tiny_mlp() -> ModelSpec {
        ModelSpec::new(
            "tiny_mlp",
            vec![32],
            4,
            vec![fc(32, 32), ReLU, fc(32, 32), ReLU, fc(32, 64), ReLU, fc(64, 10), Ce],
        )
        .expect("tiny_mlp is valid")
    }

    /// Three hidden layers of 1024, 1024, and 4096 units on 32x32x3 inputs.
    pub fn mlp_1024_1024_4096() -> ModelSpec {
        ModelSpec::new(
            "mlp",
            vec![3072],
            128,
            vec![
                fc(3072, 1024),
                ReLU,
                fc(1024, 1024),
                ReLU,
                fc(1024, 4096),
                ReLU,
                fc(4096, 10),
                Ce,
            ],
        )
        .expect("mlp is valid")
        .profile_only()
    }

    pub fn alexnet() -> ModelSpec {
        ModelSpec::new(
            "alexnet",
            vec![3, 224, 224],
            128,
            vec![
                conv(3, 64, 11, 4, 2),
                ReLU,
                pool(3, 2),
                conv(64, 192, 5, 1, 2),
                ReLU,
                pool(3, 2),
                conv(192, 384, 3, 1, 1),
                ReLU,
                conv(384, 256, 3, 1, 1),
                ReLU,
                conv(256, 256, 3, 1, 1),
                ReLU,
                pool(3, 2),
                Flatten,
                fc(9216, 4096),
                ReLU,
                fc(4096, 4096),
                ReLU,
                fc(4096, 1000),
                Ce,
            ],
        )
        .expect("alexnet is valid")
        .profile_only()
    }

    /// VGG family: `blocks[i]` 3x3 convolutions per stage, five stages.
    pub fn vgg(blocks: &[usize], name: &str) -> ModelSpec {
        let widths = [64, 128, 256, 512, 512];
        let mut layers = Vec::new();
        let mut ch = 3;
        for (&n, &w) in blocks.iter().zip(&widths) {
            for _ in 0..n {
                layers.push(conv(ch, w, 3, 1, 1));
                layers.push(ReLU);
                ch = w;
            }
            layers.push(pool(2, 2));
        }
        layers.extend([Flatten, fc(25088, 4096), ReLU, fc(4096, 4096), ReLU, fc(4096, 1000), Ce]);
        ModelSpec::new(name, vec![3, 224, 224], 64, layers)
            .expect("vgg is valid")
            .profile_only()
    }

    /// Counts only: 2048 pooled features feed a single 1000-way classifier.
    pub fn inception_v3() -> ModelProfile {
        ModelProfile {
            name: "inception_v3".into(),
            params: 27_161_264,
            conv_params: 27_161_264 - 2_049_000,
            activations: 2048,
            batch: 32,
        }
    }

    pub fn resnet152() -> ModelProfile {
        ModelProfile {
            name: "resnet152".into(),
            params: 60_192_808,
            conv_params: 60_192_808 - 2_049_000,
            activations: 2048,
            batch: 32,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_cnn_splits_after_flatten() {
        let spec = zoo::tiny_cnn();
        let p = spec.split().unwrap();
        assert_eq!(p.split_index, 7);
        assert_eq!(p.boundary_activation_count, 4 * 4 * 16);
        let (total, _) = spec.count_params();
        assert_eq!(p.conv_param_count + p.fc_param_count, total);
    }

    #[test]
    fn single_conv_single_fc() {
        let spec = ModelSpec::new(
            "cf",
            vec![1, 4, 4],
            1,
            vec![
                LayerKind::Conv2d {
                    in_ch: 1,
                    out_ch: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerKind::Flatten,
                LayerKind::FullyConnected { in_dim: 8, out_dim: 2 },
            ],
        )
        .unwrap();
        assert_eq!(spec.split().unwrap().split_index, 2);
    }

    #[test]
    fn conv_after_last_pool_stays_in_conv_block() {
        let spec = ModelSpec::new(
            "cpc",
            vec![1, 4, 4],
            1,
            vec![
                LayerKind::Conv2d {
                    in_ch: 1,
                    out_ch: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                LayerKind::Flatten,
                LayerKind::ReLU,
                LayerKind::FullyConnected { in_dim: 16, out_dim: 2 },
            ],
        )
        .unwrap();
        assert_eq!(spec.split().unwrap().split_index, 2);
    }

    #[test]
    fn split_errors() {
        let mlp = zoo::tiny_mlp();
        assert!(matches!(mlp.split(), Err(ModelError::NoConvBlock)));
        let no_fc = ModelSpec::new("nofc", vec![4], 1, vec![LayerKind::ReLU]).unwrap();
        assert!(matches!(no_fc.split(), Err(ModelError::NoFcLayer)));
    }

    #[test]
    fn fc_param_arithmetic() {
        let fc = LayerKind::FullyConnected { in_dim: 9216, out_dim: 4096 };
        assert_eq!(fc.param_count(), 37_752_832);
        assert_eq!(LayerKind::ReLU.param_count(), 0);
    }

    #[test]
    fn mlp_boundaries() {
        let mlp = zoo::mlp_1024_1024_4096();
        // after the second hidden layer's activation
        let p = mlp.mlp_split(4).unwrap();
        assert_eq!(p.conv_param_count, 3072 * 1024 + 1024 + 1024 * 1024 + 1024);
        assert_eq!(p.boundary_activation_count, 1024);
        assert!(matches!(mlp.mlp_split(0), Err(ModelError::BadBoundary { .. })));
        assert!(matches!(mlp.mlp_split(mlp.layers.len()), Err(ModelError::BadBoundary { .. })));
        let last = mlp.layers.len() - 2;
        assert_eq!(mlp.mlp_split(last).unwrap().fc_param_count, 4096 * 10 + 10);
        assert!(matches!(zoo::tiny_cnn().mlp_split(3), Err(ModelError::BadBoundary { .. })));
    }

    #[test]
    fn toml_roundtrip_of_spec() {
        let text = r#"
name = "toy"
input_shape = [1, 4, 4]
batch = 2

[[layers]]
kind = "conv2d"
in_ch = 1
out_ch = 2
kernel = 3

[[layers]]
kind = "maxpool2d"
kernel = 2
stride = 2

[[layers]]
kind = "flatten"

[[layers]]
kind = "fc"
in_dim = 2
out_dim = 2

[[layers]]
kind = "softmax_ce"
"#;
        let m = parse_model(text).unwrap();
        let ModelSource::Spec(spec) = m else { panic!("expected spec") };
        assert_eq!(spec.layers.len(), 5);
        assert_eq!(spec.split().unwrap().split_index, 3);
        let back = toml::to_string(&spec).unwrap();
        assert_eq!(ModelSpec::from_toml_str(&back).unwrap(), spec);
    }

    #[test]
    fn profile_file() {
        let m = parse_model("[profile]\nname = \"x\"\nparams = 100\nconv_params = 10\nactivations = 5\nbatch = 2\n").unwrap();
        assert_eq!(m.profile().unwrap().fc_params(), 90);
        assert!(m.executable().is_err());
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(load_model("no_such_model"), Err(ModelError::Unknown(_))));
    }
}
