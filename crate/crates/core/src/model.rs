//! Canonical model representation and platform-specific parameter encodings.
//!
//! The server only ever aggregates [`CanonicalModel::params`], a flat vector
//! laid out by the ordered [`LayerSpec`] list. Devices hold parameters in one of
//! two layouts: a name-to-tensor map ([`Platform::NameKeyed`]) or a positional
//! list of tensors ([`Platform::IndexKeyed`]). Conversion in both directions is
//! lossless.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closed set of supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Linear => write!(f, "Linear"),
            Arch::Mlp { hidden } => write!(f, "Mlp{{hidden={hidden}}}"),
        }
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Model metadata without parameters: enough to interpret a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "SpecDoc", into = "SpecDoc")]
pub struct ModelSpec {
    pub model_id: String,
    pub version: u64,
    pub arch: Arch,
    pub layers: Vec<LayerSpec>,
}

/// A model in the uniform representation used for aggregation.
///
/// Serialized as `{model_id, version, arch, layers:[{name,shape}], params}`;
/// layer offsets are derived on load and never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ModelDoc", into = "ModelDoc")]
pub struct CanonicalModel {
    pub model_id: String,
    pub version: u64,
    pub arch: Arch,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    model_id: String,
    version: u64,
    arch: Arch,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    model_id: String,
    version: u64,
    arch: Arch,
    layers: Vec<LayerDoc>,
    params: Vec<f64>,
}

fn layout(docs: Vec<LayerDoc>) -> Vec<LayerSpec> {
    let mut offset = 0usize;
    docs.into_iter()
        .map(|d| {
            let len = d.shape.iter().fold(1usize, |acc, &s| acc.saturating_mul(s));
            let spec = LayerSpec {
                name: d.name,
                shape: d.shape,
                offset,
                len,
            };
            offset = offset.saturating_add(len);
            spec
        })
        .collect()
}

fn layer_docs(layers: &[LayerSpec]) -> Vec<LayerDoc> {
    layers
        .iter()
        .map(|l| LayerDoc {
            name: l.name.clone(),
            shape: l.shape.clone(),
        })
        .collect()
}

impl From<SpecDoc> for ModelSpec {
    fn from(d: SpecDoc) -> Self {
        ModelSpec {
            model_id: d.model_id,
            version: d.version,
            arch: d.arch,
            layers: layout(d.layers),
        }
    }
}

impl From<ModelSpec> for SpecDoc {
    fn from(s: ModelSpec) -> Self {
        SpecDoc {
            layers: layer_docs(&s.layers),
            model_id: s.model_id,
            version: s.version,
            arch: s.arch,
        }
    }
}

impl From<ModelDoc> for CanonicalModel {
    fn from(d: ModelDoc) -> Self {
        CanonicalModel {
            model_id: d.model_id,
            version: d.version,
            arch: d.arch,
            layers: layout(d.layers),
            params: d.params,
        }
    }
}

impl From<CanonicalModel> for ModelDoc {
    fn from(m: CanonicalModel) -> Self {
        ModelDoc {
            layers: layer_docs(&m.layers),
            model_id: m.model_id,
            version: m.version,
            arch: m.arch,
            params: m.params,
        }
    }
}

impl ModelSpec {
    /// Builds a spec from `(name, shape)` pairs, deriving offsets.
    pub fn new(
        model_id: impl Into<String>,
        version: u64,
        arch: Arch,
        layers: &[(&str, &[usize])],
    ) -> Self {
        let docs = layers
            .iter()
            .map(|(name, shape)| LayerDoc {
                name: (*name).to_string(),
                shape: shape.to_vec(),
            })
            .collect();
        ModelSpec {
            model_id: model_id.into(),
            version,
            arch,
            layers: layout(docs),
        }
    }

    /// Linear regressor over `n_features` inputs: `w: [n_features]`, `b: [1]`.
    pub fn linear(model_id: impl Into<String>, n_features: usize) -> Self {
        Self::new(
            model_id,
            1,
            Arch::Linear,
            &[("w", &[n_features]), ("b", &[1])],
        )
    }

    /// One-hidden-layer ReLU classifier.
    pub fn mlp(
        model_id: impl Into<String>,
        n_features: usize,
        hidden: usize,
        n_classes: usize,
    ) -> Self {
        Self::new(
            model_id,
            1,
            Arch::Mlp { hidden },
            &[
                ("w1", &[n_features, hidden]),
                ("b1", &[hidden]),
                ("w2", &[hidden, n_classes]),
                ("b2", &[n_classes]),
            ],
        )
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.len).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn with_params(self, params: Vec<f64>) -> CanonicalModel {
        CanonicalModel {
            model_id: self.model_id,
            version: self.version,
            arch: self.arch,
            layers: self.layers,
            params,
        }
    }
}

impl CanonicalModel {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            model_id: self.model_id.clone(),
            version: self.version,
            arch: self.arch,
            layers: self.layers.clone(),
        }
    }
}

/// An invariant violation reported by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoLayers,
    VersionZero,
    EmptyModelId,
    EmptyName {
        index: usize,
    },
    DuplicateName(String),
    EmptyShape {
        layer: String,
    },
    ZeroDimension {
        layer: String,
    },
    LayerLenMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },
    NonContiguous {
        layer: String,
        expected_offset: usize,
        actual_offset: usize,
    },
    LengthMismatch {
        expected: usize,
        actual: usize,
    },
    NonFiniteParam {
        index: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoLayers => write!(f, "model has no layers"),
            Violation::VersionZero => write!(f, "version must be >= 1"),
            Violation::EmptyModelId => write!(f, "model_id is empty"),
            Violation::EmptyName { index } => write!(f, "layer #{index} has an empty name"),
            Violation::DuplicateName(n) => write!(f, "duplicate layer name {n:?}"),
            Violation::EmptyShape { layer } => write!(f, "layer {layer:?} has an empty shape"),
            Violation::ZeroDimension { layer } => {
                write!(f, "layer {layer:?} has a zero-sized dimension")
            }
            Violation::LayerLenMismatch {
                layer,
                expected,
                actual,
            } => {
                write!(
                    f,
                    "layer {layer:?} len {actual} != product of shape {expected}"
                )
            }
            Violation::NonContiguous {
                layer,
                expected_offset,
                actual_offset,
            } => {
                write!(
                    f,
                    "layer {layer:?} offset {actual_offset}, expected {expected_offset}"
                )
            }
            Violation::LengthMismatch { expected, actual } => {
                write!(f, "params length {actual} != total layer length {expected}")
            }
            Violation::NonFiniteParam { index } => write!(f, "param #{index} is not finite"),
        }
    }
}

fn spec_violations(spec: &ModelSpec, out: &mut Vec<Violation>) {
    if spec.model_id.is_empty() {
        out.push(Violation::EmptyModelId);
    }
    if spec.version == 0 {
        out.push(Violation::VersionZero);
    }
    if spec.layers.is_empty() {
        out.push(Violation::NoLayers);
    }
    let mut seen = BTreeSet::new();
    let mut expected_offset = 0usize;
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer.name.is_empty() {
            out.push(Violation::EmptyName { index: i });
        } else if !seen.insert(layer.name.as_str()) {
            out.push(Violation::DuplicateName(layer.name.clone()));
        }
        if layer.shape.is_empty() {
            out.push(Violation::EmptyShape {
                layer: layer.name.clone(),
            });
        }
        if layer.shape.contains(&0) {
            out.push(Violation::ZeroDimension {
                layer: layer.name.clone(),
            });
        }
        let product = layer
            .shape
            .iter()
            .fold(1usize, |acc, &s| acc.saturating_mul(s));
        if product != layer.len {
            out.push(Violation::LayerLenMismatch {
                layer: layer.name.clone(),
                expected: product,
                actual: layer.len,
            });
        }
        if layer.offset != expected_offset {
            out.push(Violation::NonContiguous {
                layer: layer.name.clone(),
                expected_offset,
                actual_offset: layer.offset,
            });
        }
        expected_offset = layer.offset.saturating_add(layer.len);
    }
}

/// Checks a spec (no params) against the layout invariants.
pub fn validate_spec(spec: &ModelSpec) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    spec_violations(spec, &mut out);
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Returns every invariant violation of `model`, or `Ok(())`.
pub fn validate_model(model: &CanonicalModel) -> Result<(), Vec<Violation>> {
    let spec = model.spec();
    let mut out = Vec::new();
    spec_violations(&spec, &mut out);
    let expected: usize = model
        .layers
        .iter()
        .map(|l| l.len)
        .fold(0usize, |a, b| a.saturating_add(b));
    if expected != model.params.len() {
        out.push(Violation::LengthMismatch {
            expected,
            actual: model.params.len(),
        });
    }
    if let Some(index) = model.params.iter().position(|p| !p.is_finite()) {
        out.push(Violation::NonFiniteParam { index });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Device-side parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Platform {
    NameKeyed,
    IndexKeyed,
}

impl Platform {
    pub const ALL: [Platform; 2] = [Platform::NameKeyed, Platform::IndexKeyed];
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Platform::NameKeyed => write!(f, "NameKeyed"),
            Platform::IndexKeyed => write!(f, "IndexKeyed"),
        }
    }
}

/// A shaped block of values, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parameters as a particular device platform holds them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlatformEncoding {
    /// Layer name to tensor; iteration order carries no meaning.
    NameKeyed(HashMap<String, Tensor>),
    /// `(layer position, tensor)` pairs; list order carries no meaning.
    IndexKeyed(Vec<(usize, Tensor)>),
}

impl PlatformEncoding {
    pub fn platform(&self) -> Platform {
        match self {
            PlatformEncoding::NameKeyed(_) => Platform::NameKeyed,
            PlatformEncoding::IndexKeyed(_) => Platform::IndexKeyed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("layer {0:?} missing from encoding")]
    MissingLayer(String),
    #[error("encoding carries unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("layer {0:?} appears more than once")]
    DuplicateLayer(String),
    #[error("layer {layer:?}: expected shape {expected:?} ({expected_len} values), found {found:?} ({found_len} values)")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        expected_len: usize,
        found: Vec<usize>,
        found_len: usize,
    },
}

fn slice_layer(params: &[f64], layer: &LayerSpec) -> Tensor {
    Tensor {
        shape: layer.shape.clone(),
        values: params[layer.offset..layer.offset + layer.len].to_vec(),
    }
}

/// Reshapes a valid model's flat parameters into the given platform layout.
///
/// Callers must run [`validate_model`] first; an invalid layout panics on slicing.
pub fn encode_for_platform(model: &CanonicalModel, platform: Platform) -> PlatformEncoding {
    match platform {
        Platform::NameKeyed => PlatformEncoding::NameKeyed(
            model
                .layers
                .iter()
                .map(|l| (l.name.clone(), slice_layer(&model.params, l)))
                .collect(),
        ),
        Platform::IndexKeyed => PlatformEncoding::IndexKeyed(
            model
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| (i, slice_layer(&model.params, l)))
                .collect(),
        ),
    }
}

fn check_tensor(layer: &LayerSpec, t: &Tensor) -> Result<(), ModelError> {
    if t.shape != layer.shape || t.values.len() != layer.len {
        return Err(ModelError::ShapeMismatch {
            layer: layer.name.clone(),
            expected: layer.shape.clone(),
            expected_len: layer.len,
            found: t.shape.clone(),
            found_len: t.values.len(),
        });
    }
    Ok(())
}

/// Recovers the canonical flat vector from a platform encoding.
pub fn decode_from_platform(
    encoding: &PlatformEncoding,
    spec: &ModelSpec,
) -> Result<Vec<f64>, ModelError> {
    let mut params = vec![0.0; spec.num_params()];
    match encoding {
        PlatformEncoding::NameKeyed(map) => {
            for layer in &spec.layers {
                let t = map
                    .get(&layer.name)
                    .ok_or_else(|| ModelError::MissingLayer(layer.name.clone()))?;
                check_tensor(layer, t)?;
                params[layer.offset..layer.offset + layer.len].copy_from_slice(&t.values);
            }
            if map.len() != spec.layers.len() {
                let unknown = map
                    .keys()
                    .filter(|k| spec.layer(k).is_none())
                    .min()
                    .cloned()
                    .unwrap_or_default();
                return Err(ModelError::UnknownLayer(unknown));
            }
        }
        PlatformEncoding::IndexKeyed(list) => {
            let mut slots: Vec<Option<&Tensor>> = vec![None; spec.layers.len()];
            for (idx, t) in list {
                let slot = slots
                    .get_mut(*idx)
                    .ok_or_else(|| ModelError::UnknownLayer(format!("#{idx}")))?;
                if slot.is_some() {
                    return Err(ModelError::DuplicateLayer(spec.layers[*idx].name.clone()));
                }
                *slot = Some(t);
            }
            for (layer, slot) in spec.layers.iter().zip(slots) {
                let t = slot.ok_or_else(|| ModelError::MissingLayer(layer.name.clone()))?;
                check_tensor(layer, t)?;
                params[layer.offset..layer.offset + layer.len].copy_from_slice(&t.values);
            }
        }
    }
    Ok(params)
}
