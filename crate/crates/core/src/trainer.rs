//! Local training over the canonical parameter layout.
//!
//! A [`Trainer`] owns one parameter vector laid out exactly like its
//! [`ModelSpec`], so `get_parameters`/`set_parameters` exchange canonical
//! vectors with no conversion. `Linear` is an affine regressor trained on MSE;
//! `Mlp{hidden}` is a one-hidden-layer ReLU classifier trained on softmax
//! cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{Arch, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    /// Targets for regression, class indices (as reals) for classification.
    pub labels: Vec<f64>,
    pub task_kind: TaskKind,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        task_kind: TaskKind,
    ) -> Result<Self, TrainError> {
        let ds = Dataset {
            features,
            labels,
            task_kind,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<(), TrainError> {
        if self.features.is_empty() {
            return Err(TrainError::InvalidDataset("dataset has no examples".into()));
        }
        if self.features.len() != self.labels.len() {
            return Err(TrainError::InvalidDataset(format!(
                "{} feature rows but {} labels",
                self.features.len(),
                self.labels.len()
            )));
        }
        let width = self.features[0].len();
        if self.features.iter().any(|r| r.len() != width) {
            return Err(TrainError::InvalidDataset("ragged feature rows".into()));
        }
        if self.task_kind == TaskKind::Classification
            && self.labels.iter().any(|&y| !(y >= 0.0 && y.fract() == 0.0))
        {
            return Err(TrainError::InvalidDataset(
                "class labels must be non-negative integers".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Concatenates datasets of the same kind and width.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset, TrainError> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| TrainError::InvalidDataset("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for part in iter {
            if part.task_kind != out.task_kind {
                return Err(TrainError::InvalidDataset("mixed task kinds".into()));
            }
            out.features.extend(part.features.iter().cloned());
            out.labels.extend(part.labels.iter().copied());
        }
        out.check()?;
        Ok(out)
    }
}

/// Mini-batch size for [`Trainer::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Size(usize),
}

// JSON form: the string "Full" or a positive integer.
impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("Full"),
            BatchSize::Size(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(0) => Err(serde::de::Error::custom("batch_size must be positive")),
            Repr::Num(n) => Ok(BatchSize::Size(n as usize)),
            Repr::Text(t) if t == "Full" => Ok(BatchSize::Full),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "invalid batch_size {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: BatchSize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidHyperparams(
                "learning_rate must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidHyperparams("epochs must be >= 1".into()));
        }
        if self.batch_size == BatchSize::Size(0) {
            return Err(TrainError::InvalidHyperparams(
                "batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: Vec<f64>,
    pub num_examples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Per-row model outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Outputs {
    Regression(Vec<f64>),
    /// One probability vector per row.
    Classification(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("expected {expected} parameters, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss became non-finite during epoch {epoch}")]
    NonFiniteLoss { epoch: u32 },
    #[error("unsupported model layout: {0}")]
    UnsupportedSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Linear {
        n_features: usize,
    },
    Mlp {
        n_features: usize,
        hidden: usize,
        n_classes: usize,
    },
}

/// A single-owner model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    spec: ModelSpec,
    shape: Shape,
    params: Vec<f64>,
}

fn expect_layers(spec: &ModelSpec, names: &[&str]) -> Result<(), TrainError> {
    let got: Vec<&str> = spec.layers.iter().map(|l| l.name.as_str()).collect();
    if got != names {
        return Err(TrainError::UnsupportedSpec(format!(
            "{} expects layers {names:?}, found {got:?}",
            spec.arch
        )));
    }
    Ok(())
}

impl Trainer {
    /// Builds a trainer with all-zero parameters.
    pub fn from_spec(spec: ModelSpec) -> Result<Self, TrainError> {
        crate::model::validate_spec(&spec)
            .map_err(|v| TrainError::UnsupportedSpec(format!("invalid spec: {}", v[0])))?;
        let shape = match spec.arch {
            Arch::Linear => {
                expect_layers(&spec, &["w", "b"])?;
                let w = &spec.layers[0].shape;
                let b = &spec.layers[1].shape;
                if w.len() != 1 || b != &[1] {
                    return Err(TrainError::UnsupportedSpec(
                        "Linear needs w:[d], b:[1]".into(),
                    ));
                }
                Shape::Linear { n_features: w[0] }
            }
            Arch::Mlp { hidden } => {
                expect_layers(&spec, &["w1", "b1", "w2", "b2"])?;
                let s: Vec<&[usize]> = spec.layers.iter().map(|l| l.shape.as_slice()).collect();
                let ok = s[0].len() == 2
                    && s[0][1] == hidden
                    && s[1] == [hidden]
                    && s[2].len() == 2
                    && s[2][0] == hidden
                    && s[2][1] >= 2
                    && s[3] == [s[2][1]];
                if !ok {
                    return Err(TrainError::UnsupportedSpec(
                        "Mlp needs w1:[d,h], b1:[h], w2:[h,c], b2:[c] with c >= 2".into(),
                    ));
                }
                Shape::Mlp {
                    n_features: s[0][0],
                    hidden,
                    n_classes: s[2][1],
                }
            }
        };
        let params = vec![0.0; spec.num_params()];
        Ok(Trainer {
            spec,
            shape,
            params,
        })
    }

    /// Default initialization: zeros for `Linear`, uniform(-0.1, 0.1) for `Mlp`.
    pub fn initialized(spec: ModelSpec, seed: u64) -> Result<Self, TrainError> {
        let mut t = Self::from_spec(spec)?;
        if let Shape::Mlp { .. } = t.shape {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in &mut t.params {
                *p = rng.random_range(-0.1..0.1);
            }
        }
        Ok(t)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.shape {
            Shape::Linear { .. } => TaskKind::Regression,
            Shape::Mlp { .. } => TaskKind::Classification,
        }
    }

    pub fn n_features(&self) -> usize {
        match self.shape {
            Shape::Linear { n_features } | Shape::Mlp { n_features, .. } => n_features,
        }
    }

    pub fn get_parameters(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<(), TrainError> {
        if params.len() != self.params.len() {
            return Err(TrainError::LengthMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn check_width(&self, features: &[Vec<f64>]) -> Result<(), TrainError> {
        let d = self.n_features();
        if let Some(row) = features.iter().find(|r| r.len() != d) {
            return Err(TrainError::DimensionMismatch(format!(
                "model takes {d} features, row has {}",
                row.len()
            )));
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<(), TrainError> {
        data.check()?;
        if data.task_kind != self.task_kind() {
            return Err(TrainError::DimensionMismatch(format!(
                "{:?} model given {:?} data",
                self.task_kind(),
                data.task_kind
            )));
        }
        self.check_width(&data.features)?;
        if let Shape::Mlp { n_classes, .. } = self.shape {
            if let Some(y) = data.labels.iter().find(|&&y| y as usize >= n_classes) {
                return Err(TrainError::DimensionMismatch(format!(
                    "label {y} outside {n_classes} classes"
                )));
            }
        }
        Ok(())
    }

    /// Mean loss and its gradient over the whole dataset at the current parameters.
    pub fn loss_and_gradient(&self, data: &Dataset) -> Result<(f64, Vec<f64>), TrainError> {
        self.check_data(data)?;
        let rows: Vec<usize> = (0..data.len()).collect();
        Ok(self.batch_loss_grad(&self.params, data, &rows, true))
    }

    fn batch_loss_grad(
        &self,
        params: &[f64],
        data: &Dataset,
        rows: &[usize],
        want_grad: bool,
    ) -> (f64, Vec<f64>) {
        let mut grad = if want_grad {
            vec![0.0; params.len()]
        } else {
            Vec::new()
        };
        let mut loss = 0.0;
        match self.shape {
            Shape::Linear { n_features: d } => {
                let (w, b) = params.split_at(d);
                for &r in rows {
                    let x = &data.features[r];
                    let err = dot(w, x) + b[0] - data.labels[r];
                    loss += err * err;
                    if want_grad {
                        let g = 2.0 * err;
                        for (gi, xi) in grad[..d].iter_mut().zip(x) {
                            *gi += g * xi;
                        }
                        grad[d] += g;
                    }
                }
            }
            Shape::Mlp {
                n_features: d,
                hidden: h,
                n_classes: c,
            } => {
                let (w1, rest) = params.split_at(d * h);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h * c);
                let mut z1 = vec![0.0; h];
                let mut a = vec![0.0; h];
                let mut logits = vec![0.0; c];
                let mut probs = vec![0.0; c];
                let mut da = vec![0.0; h];
                for &r in rows {
                    let x = &data.features[r];
                    let y = data.labels[r] as usize;
                    mlp_logits(x, w1, b1, w2, b2, h, c, &mut z1, &mut a, &mut logits);
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                    loss += lse - logits[y];
                    probs.copy_from_slice(&logits);
                    softmax_in_place(&mut probs);
                    if want_grad {
                        let (gw1, grest) = grad.split_at_mut(d * h);
                        let (gb1, grest) = grest.split_at_mut(h);
                        let (gw2, gb2) = grest.split_at_mut(h * c);
                        for k in 0..c {
                            let dz = probs[k] - if k == y { 1.0 } else { 0.0 };
                            gb2[k] += dz;
                            for j in 0..h {
                                gw2[j * c + k] += a[j] * dz;
                            }
                        }
                        for j in 0..h {
                            let mut s = 0.0;
                            for k in 0..c {
                                s += w2[j * c + k] * (probs[k] - if k == y { 1.0 } else { 0.0 });
                            }
                            da[j] = if z1[j] > 0.0 { s } else { 0.0 };
                        }
                        for j in 0..h {
                            gb1[j] += da[j];
                        }
                        for (i, xi) in x.iter().enumerate() {
                            for j in 0..h {
                                gw1[i * h + j] += xi * da[j];
                            }
                        }
                    }
                }
            }
        }
        let n = rows.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        (loss / n, grad)
    }

    /// Mini-batch gradient descent. On error the parameters are left untouched.
    pub fn fit(&mut self, data: &Dataset, hp: &Hyperparams) -> Result<TrainReport, TrainError> {
        hp.validate()?;
        self.check_data(data)?;
        let n = data.len();
        let all: Vec<usize> = (0..n).collect();
        let initial_loss = self.batch_loss_grad(&self.params, data, &all, false).0;
        let batch = match hp.batch_size {
            BatchSize::Full => n,
            BatchSize::Size(b) => b.min(n),
        };
        let mut params = self.params.clone();
        let mut order = all.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        for epoch in 0..hp.epochs {
            if batch < n {
                order.shuffle(&mut rng);
            }
            for rows in order.chunks(batch) {
                let (loss, grad) = self.batch_loss_grad(&params, data, rows, true);
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= hp.learning_rate * g;
                }
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
            }
        }
        let final_loss = self.batch_loss_grad(&params, data, &all, false).0;
        if !final_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: hp.epochs.saturating_sub(1),
            });
        }
        self.params = params;
        Ok(TrainReport {
            params: self.params.clone(),
            num_examples: n,
            initial_loss,
            final_loss,
        })
    }

    /// Returns `(loss, metric)`: MSE twice for regression, cross-entropy and accuracy for classification.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64), TrainError> {
        self.check_data(data)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let loss = self.batch_loss_grad(&self.params, data, &all, false).0;
        let metric = match self.predict(&data.features)? {
            Outputs::Regression(_) => loss,
            Outputs::Classification(probs) => {
                let correct = probs
                    .iter()
                    .zip(&data.labels)
                    .filter(|(p, &y)| argmax(p) == y as usize)
                    .count();
                correct as f64 / data.len() as f64
            }
        };
        Ok((loss, metric))
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Outputs, TrainError> {
        self.check_width(features)?;
        Ok(match self.shape {
            Shape::Linear { n_features: d } => {
                let (w, b) = self.params.split_at(d);
                Outputs::Regression(features.iter().map(|x| dot(w, x) + b[0]).collect())
            }
            Shape::Mlp {
                n_features: d,
                hidden: h,
                n_classes: c,
            } => {
                let (w1, rest) = self.params.split_at(d * h);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h * c);
                let mut z1 = vec![0.0; h];
                let mut a = vec![0.0; h];
                Outputs::Classification(
                    features
                        .iter()
                        .map(|x| {
                            let mut probs = vec![0.0; c];
                            mlp_logits(x, w1, b1, w2, b2, h, c, &mut z1, &mut a, &mut probs);
                            softmax_in_place(&mut probs);
                            probs
                        })
                        .collect(),
                )
            }
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn mlp_logits(
    x: &[f64],
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    h: usize,
    c: usize,
    z1: &mut [f64],
    a: &mut [f64],
    logits: &mut [f64],
) {
    for j in 0..h {
        let mut z = b1[j];
        for (i, xi) in x.iter().enumerate() {
            z += xi * w1[i * h + j];
        }
        z1[j] = z;
        a[j] = z.max(0.0);
    }
    for k in 0..c {
        let mut z = b2[k];
        for j in 0..h {
            z += a[j] * w2[j * c + k];
        }
        logits[k] = z;
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for z in v.iter_mut() {
        *z = (*z - m).exp();
        s += *z;
    }
    for z in v.iter_mut() {
        *z /= s;
    }
}
