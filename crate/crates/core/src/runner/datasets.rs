//! Synthetic 2-D datasets.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::{EmpiricalDataset, GaussianMixture, MixtureComponent, TargetDistribution};
use crate::ensemble::norm;
use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_NAMES: [&str; 3] = ["gauss2-asym", "two-moons", "swiss-roll-rescaled"];

/// Vertical offset of the lower moon's center.
pub const MOONS_OFFSET: f64 = 0.25;

/// Max norm of the rescaled swiss roll.
pub const SWISS_ROLL_RADIUS: f64 = 2.0;

/// The mixture behind `gauss2-asym`: weights 0.7 / 0.3, means (-2, 0) and
/// (2, 0), standard deviations 0.5 and 1.
pub fn gauss2_asym_mixture() -> GaussianMixture {
    GaussianMixture::new(vec![
        MixtureComponent::isotropic(0.7, vec![-2.0, 0.0], 0.25),
        MixtureComponent::isotropic(0.3, vec![2.0, 0.0], 1.0),
    ])
    .expect("valid mixture")
}

/// Draws `n` points of the named dataset, with isotropic Gaussian noise of
/// standard deviation `noise` added to every point.
pub fn generate_dataset(name: &str, n: usize, noise: f64, seed: u64) -> Result<EmpiricalDataset> {
    if n < 10 {
        return Err(Error::invalid("datasets need at least 10 points"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("noise must be finite and >= 0"));
    }
    let mut r = rng::rng_from(rng::derive_seed(seed, name, n as u64));
    let mut pts: Vec<f64> = match name {
        "gauss2-asym" => TargetDistribution::from(gauss2_asym_mixture())
            .sample(n, rng::derive_seed(seed, "gauss2-asym-draws", 0))?
            .into_flat(),
        "two-moons" => {
            let upper = n.div_ceil(2);
            (0..n)
                .flat_map(|i| {
                    let th = PI * r.random::<f64>();
                    if i < upper {
                        [th.cos(), th.sin()]
                    } else {
                        [1.0 - th.cos(), MOONS_OFFSET - th.sin()]
                    }
                })
                .collect()
        }
        "swiss-roll-rescaled" => (0..n)
            .flat_map(|_| {
                let t = 1.5 * PI * (1.0 + 2.0 * r.random::<f64>());
                [t * t.cos(), t * t.sin()]
            })
            .collect(),
        other => return Err(Error::UnknownName(other.to_string())),
    };
    if noise > 0.0 {
        for v in pts.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += noise * z;
        }
    }
    if name == "swiss-roll-rescaled" {
        let max = pts.chunks_exact(2).map(norm).fold(0.0, f64::max);
        for v in pts.iter_mut() {
            *v *= SWISS_ROLL_RADIUS / max;
        }
    }
    EmpiricalDataset::new(2, pts, format!("{name}(n={n}, noise={noise}, seed={seed})"))
}
