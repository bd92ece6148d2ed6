//! Maps health records to training examples for each known model family.
//!
//! The family is picked from the model id prefix, so a newly uploaded model
//! reaches devices without any client change.

use fedcampus_core::model::{CanonicalModel, ModelSpec};
use fedcampus_core::trainer::{BatchSize, Dataset, Hyperparams, TaskKind, Trainer};
use serde::{Deserialize, Serialize};

use crate::data::{DeviceProfile, HealthRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskModel {
    /// Linear regression of sleep efficiency.
    Sleep,
    /// Small MLP classifying a device's archetype from one day of data.
    Activity,
}

pub const SLEEP_FEATURES: usize = 4;
pub const ACTIVITY_FEATURES: usize = 4;
pub const ACTIVITY_HIDDEN: usize = 16;
pub const ACTIVITY_CLASSES: usize = 3;

impl TaskModel {
    pub fn for_model_id(model_id: &str) -> Option<TaskModel> {
        if model_id.starts_with("sleep") {
            Some(TaskModel::Sleep)
        } else if model_id.starts_with("activity") {
            Some(TaskModel::Activity)
        } else {
            None
        }
    }

    /// Whether `spec` has the shape this family trains.
    pub fn accepts(self, spec: &ModelSpec) -> bool {
        let want = match self {
            TaskModel::Sleep => ModelSpec::linear(&spec.model_id, SLEEP_FEATURES),
            TaskModel::Activity => ModelSpec::mlp(
                &spec.model_id,
                ACTIVITY_FEATURES,
                ACTIVITY_HIDDEN,
                ACTIVITY_CLASSES,
            ),
        };
        spec.arch == want.arch && spec.layers == want.layers
    }

    pub fn model_id(self) -> &'static str {
        match self {
            TaskModel::Sleep => "sleep_eff",
            TaskModel::Activity => "activity_level",
        }
    }

    /// Starting model: zeros for the linear model, small random weights for the MLP.
    pub fn initial_model(self, seed: u64) -> CanonicalModel {
        match self {
            TaskModel::Sleep => {
                let spec = ModelSpec::linear(self.model_id(), SLEEP_FEATURES);
                let n = spec.num_params();
                spec.with_params(vec![0.0; n])
            }
            TaskModel::Activity => {
                let spec = ModelSpec::mlp(
                    self.model_id(),
                    ACTIVITY_FEATURES,
                    ACTIVITY_HIDDEN,
                    ACTIVITY_CLASSES,
                );
                let t = Trainer::initialized(spec.clone(), seed).expect("mlp spec is trainable");
                spec.with_params(t.get_parameters())
            }
        }
    }

    pub fn default_hyperparams(self, seed: u64) -> Hyperparams {
        match self {
            TaskModel::Sleep => Hyperparams {
                learning_rate: 0.05,
                epochs: 5,
                batch_size: BatchSize::Size(16),
                seed,
            },
            TaskModel::Activity => Hyperparams {
                learning_rate: 0.1,
                epochs: 2,
                batch_size: BatchSize::Size(16),
                seed,
            },
        }
    }

    pub fn task_kind(self) -> TaskKind {
        match self {
            TaskModel::Sleep => TaskKind::Regression,
            TaskModel::Activity => TaskKind::Classification,
        }
    }

    pub fn features(self, r: &HealthRecord) -> Vec<f64> {
        match self {
            TaskModel::Sleep => vec![
                (r.screen_h - 5.0) / 2.0,
                (r.steps - 8000.0) / 4000.0,
                ((r.sleep_h - 7.5).abs() - 0.7) / 0.6,
                (r.avg_heart_rate - 72.0) / 8.0,
            ],
            TaskModel::Activity => vec![
                (r.steps - 8000.0) / 4000.0,
                (r.avg_heart_rate - 72.0) / 8.0,
                (r.calories - 2200.0) / 400.0,
                (r.screen_h - 5.0) / 2.0,
            ],
        }
    }

    pub fn label(self, profile: &DeviceProfile, r: &HealthRecord) -> f64 {
        match self {
            TaskModel::Sleep => r.sleep_efficiency,
            TaskModel::Activity => profile.archetype.index() as f64,
        }
    }

    pub fn dataset(self, profile: &DeviceProfile, records: &[HealthRecord]) -> Dataset {
        let features = records.iter().map(|r| self.features(r)).collect();
        let labels = records.iter().map(|r| self.label(profile, r)).collect();
        Dataset::new(features, labels, self.task_kind()).expect("featurizer output is well formed")
    }
}
