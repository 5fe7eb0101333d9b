use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    #[serde(rename = "gaussian-mixture-8")]
    GaussianMixture8,
    SwissRoll,
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::GaussianMixture8 => "gaussian-mixture-8",
            DatasetName::SwissRoll => "swiss-roll",
        })
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture-8" => Ok(DatasetName::GaussianMixture8),
            "swiss-roll" => Ok(DatasetName::SwissRoll),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected gaussian-mixture-8 or swiss-roll)"
            ))),
        }
    }
}

/// 2-D point cloud drawn reproducibly from a named distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub name: DatasetName,
    pub seed: u64,
    points: Tensor,
}

/// Mixture components sit on a circle of this radius so each axis has
/// roughly unit variance.
const RING_RADIUS: f64 = std::f64::consts::SQRT_2;
const RING_STD: f64 = 0.1;

impl ToyDataset {
    pub fn generate(name: DatasetName, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(count * 2);
        for _ in 0..count {
            let (x, y) = match name {
                DatasetName::GaussianMixture8 => {
                    let k = rng.gen_range(0..8) as f64;
                    let angle = 2.0 * PI * k / 8.0;
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    (
                        RING_RADIUS * angle.cos() + RING_STD * nx,
                        RING_RADIUS * angle.sin() + RING_STD * ny,
                    )
                }
                DatasetName::SwissRoll => {
                    let u: f64 = rng.gen();
                    let t = 1.5 * PI * (1.0 + 2.0 * u);
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    ((t * t.cos()) / 7.0 + 0.05 * nx, (t * t.sin()) / 7.0 + 0.05 * ny)
                }
            };
            data.push(x);
            data.push(y);
        }
        Self {
            name,
            seed,
            points: Tensor::new(vec![count, 2], data).expect("count x 2"),
        }
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
