//! Synthetic devices and their daily health records.

use std::collections::BTreeMap;
use std::fmt;

use fedcampus_core::model::Platform;
use fedcampus_core::seed::{derive_indexed, derive_seed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_CONFIG: &str = include_str!("../config/fleet_defaults.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Archetype {
    Sedentary,
    Moderate,
    Active,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Sedentary, Archetype::Moderate, Archetype::Active];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Person-level mean drawn from `N(mean, std)`, then daily values from `N(person, daily_std)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feature {
    pub mean: f64,
    pub std: f64,
    pub daily_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchetypeParams {
    pub steps: Feature,
    pub avg_heart_rate: Feature,
    pub screen_h: Feature,
    pub sleep_h: Feature,
    pub base_calories: Feature,
    pub kcal_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub clusters: Vec<String>,
    pub days: usize,
    pub label_noise_std: f64,
    pub archetypes: BTreeMap<Archetype, ArchetypeParams>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("checked-in defaults parse")
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.clusters.is_empty() {
            return Err("no cluster labels".into());
        }
        if self.days == 0 {
            return Err("days must be >= 1".into());
        }
        if self.label_noise_std.is_nan() || self.label_noise_std < 0.0 {
            return Err("label_noise_std must be >= 0".into());
        }
        for a in Archetype::ALL {
            let p = self
                .archetypes
                .get(&a)
                .ok_or(format!("missing archetype {a}"))?;
            for (name, f) in [
                ("steps", p.steps),
                ("avg_heart_rate", p.avg_heart_rate),
                ("screen_h", p.screen_h),
                ("sleep_h", p.sleep_h),
                ("base_calories", p.base_calories),
            ] {
                if !(f.std >= 0.0 && f.daily_std >= 0.0 && f.mean.is_finite()) {
                    return Err(format!(
                        "{a}.{name}: need finite mean and non-negative spreads"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn params(&self, a: Archetype) -> &ArchetypeParams {
        &self.archetypes[&a]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub client_id: String,
    pub platform: Platform,
    pub archetype: Archetype,
    pub cluster: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub day: u32,
    pub avg_heart_rate: f64,
    pub steps: f64,
    pub calories: f64,
    pub sleep_h: f64,
    pub screen_h: f64,
    pub sleep_efficiency: f64,
}

/// Profiles `0..n`: archetypes round-robin, platforms alternating, clusters cycling.
pub fn generate_fleet(n: usize, seed: u64, cfg: &FleetConfig) -> Vec<DeviceProfile> {
    (0..n)
        .map(|i| DeviceProfile {
            client_id: format!("device-{i:04}"),
            platform: if i % 2 == 0 {
                Platform::NameKeyed
            } else {
                Platform::IndexKeyed
            },
            archetype: Archetype::ALL[i % 3],
            cluster: cfg.clusters[i % cfg.clusters.len()].clone(),
            seed: derive_indexed(seed, i as u64),
        })
        .collect()
}

/// The synthetic sleep-efficiency truth, before clamping to `[0, 1]`.
pub fn sleep_efficiency_raw(screen_h: f64, steps: f64, sleep_h: f64, noise: f64) -> f64 {
    0.85 - 0.03 * screen_h + 0.015 * (steps / 1000.0) - 0.02 * (sleep_h - 7.5).abs() + noise
}

pub fn sleep_efficiency(screen_h: f64, steps: f64, sleep_h: f64, noise: f64) -> f64 {
    sleep_efficiency_raw(screen_h, steps, sleep_h, noise).clamp(0.0, 1.0)
}

fn normal(mean: f64, std: f64, rng: &mut ChaCha8Rng) -> f64 {
    // std == 0 is a point mass; Normal::new accepts it
    Normal::new(mean, std)
        .expect("finite mean, non-negative std")
        .sample(rng)
}

struct Person {
    steps: f64,
    hr: f64,
    screen: f64,
    sleep: f64,
    base_kcal: f64,
}

fn person(profile: &DeviceProfile, p: &ArchetypeParams) -> Person {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, "person"));
    let mut draw = |f: Feature| normal(f.mean, f.std, &mut rng).max(0.0);
    Person {
        steps: draw(p.steps),
        hr: draw(p.avg_heart_rate),
        screen: draw(p.screen_h),
        sleep: draw(p.sleep_h),
        base_kcal: draw(p.base_calories),
    }
}

/// `days` records for one device. Features are clamped at 0 (sleep and screen
/// time also at 24 h); the label follows [`sleep_efficiency`].
pub fn generate_health_data(
    profile: &DeviceProfile,
    days: usize,
    cfg: &FleetConfig,
) -> Vec<HealthRecord> {
    let p = cfg.params(profile.archetype);
    let me = person(profile, p);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, "days"));
    (0..days)
        .map(|day| {
            let steps = normal(me.steps, p.steps.daily_std, &mut rng).max(0.0);
            let avg_heart_rate = normal(me.hr, p.avg_heart_rate.daily_std, &mut rng).max(0.0);
            let screen_h = normal(me.screen, p.screen_h.daily_std, &mut rng).clamp(0.0, 24.0);
            let sleep_h = normal(me.sleep, p.sleep_h.daily_std, &mut rng).clamp(0.0, 24.0);
            let calories = (normal(me.base_kcal, p.base_calories.daily_std, &mut rng)
                + p.kcal_per_step * steps)
                .max(0.0);
            let noise = normal(0.0, cfg.label_noise_std, &mut rng);
            HealthRecord {
                day: day as u32,
                avg_heart_rate,
                steps,
                calories,
                sleep_h,
                screen_h,
                sleep_efficiency: sleep_efficiency(screen_h, steps, sleep_h, noise),
            }
        })
        .collect()
}

/// Mean of one named attribute over a device's records.
pub fn attribute_mean(records: &[HealthRecord], attribute: &str) -> Option<f64> {
    let get: fn(&HealthRecord) -> f64 = match attribute {
        "steps" => |r| r.steps,
        "calories" => |r| r.calories,
        "avg_heart_rate" => |r| r.avg_heart_rate,
        "sleep_h" => |r| r.sleep_h,
        "screen_h" => |r| r.screen_h,
        "sleep_efficiency" => |r| r.sleep_efficiency,
        _ => return None,
    };
    if records.is_empty() {
        return None;
    }
    Some(records.iter().map(get).sum::<f64>() / records.len() as f64)
}
