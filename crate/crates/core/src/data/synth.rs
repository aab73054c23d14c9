use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureRecord};
use crate::error::{Error, Result};
use crate::nn::ModelRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// label = u XOR v with u carried by the text features and v by the image.
    XorInteraction,
    /// label = the bit carried by one modality; the other is independent noise.
    SingleModality(Modality),
    /// Both modalities carry the label bit.
    LinearlySeparable,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xor" | "xor-interaction" => Ok(Task::XorInteraction),
            "text" | "text-only" => Ok(Task::SingleModality(Modality::Text)),
            "image" | "image-only" => Ok(Task::SingleModality(Modality::Image)),
            "linear" | "linearly-separable" => Ok(Task::LinearlySeparable),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (xor, text, image, linear)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub task: Task,
    /// Standard deviation of the isotropic Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn xor(n_samples: usize, noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_samples,
            text_dim: 16,
            image_dim: 16,
            task: Task::XorInteraction,
            noise,
            seed,
        }
    }
}

fn unit_direction(dim: usize, rng: &mut ModelRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn encode(bit: bool, dir: &[f64], noise: f64, rng: &mut ModelRng) -> Vec<f64> {
    let sign = if bit { 1.0 } else { -1.0 };
    dir.iter()
        .map(|d| {
            let n: f64 = StandardNormal.sample(rng);
            sign * d + noise * n
        })
        .collect()
}

/// Two-class dataset whose label structure is set by `spec.task`. Each
/// modality carries one latent bit as `±direction + noise`, with a random
/// unit direction per modality.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.text_dim == 0 || spec.image_dim == 0 {
        return Err(Error::InvalidArgument("feature dims must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise must be finite and non-negative, got {}",
            spec.noise
        )));
    }
    let mut rng = ModelRng::seed_from_u64(spec.seed);
    let dir_t = unit_direction(spec.text_dim, &mut rng);
    let dir_i = unit_direction(spec.image_dim, &mut rng);
    let mut ds = Dataset::new(spec.text_dim, spec.image_dim, 2);
    for n in 0..spec.n_samples {
        let u: bool = rng.random();
        let v: bool = rng.random();
        let (v, label) = match spec.task {
            Task::XorInteraction => (v, u ^ v),
            Task::SingleModality(Modality::Text) => (v, u),
            Task::SingleModality(Modality::Image) => (v, v),
            Task::LinearlySeparable => (u, u),
        };
        ds.records.push(FeatureRecord {
            id: format!("s{n:06}"),
            text: encode(u, &dir_t, spec.noise, &mut rng),
            image: encode(v, &dir_i, spec.noise, &mut rng),
            label: label as usize,
        });
    }
    Ok(ds)
}
