//! Normalized spectral densities over a detuning axis (Hz).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of a tabulated profile's integral from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// FWHM of a Gaussian divided by its standard deviation.
pub fn fwhm_per_sigma() -> f64 {
    2.0 * (2.0 * std::f64::consts::LN_2).sqrt()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("spectral profile integrates to {integral}, expected 1")]
    UnnormalizedProfile { integral: f64 },
    #[error("tabulated profile needs a uniform grid of at least two points with matching density")]
    MalformedGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralProfile {
    Delta {
        center: f64,
    },
    Gaussian {
        center: f64,
        fwhm: f64,
    },
    /// Density samples on a uniform grid, per Hz.
    Tabulated {
        frequencies: Vec<f64>,
        density: Vec<f64>,
    },
}

impl SpectralProfile {
    pub fn gaussian(fwhm: f64) -> Self {
        SpectralProfile::Gaussian { center: 0.0, fwhm }
    }

    /// Builds a tabulated profile, rescaling `values` to unit area.
    pub fn tabulated_normalized(frequencies: Vec<f64>, values: Vec<f64>) -> Result<Self, ProfileError> {
        if frequencies.len() < 2 || frequencies.len() != values.len() {
            return Err(ProfileError::MalformedGrid);
        }
        let step = frequencies[1] - frequencies[0];
        let area = trapezoid(&values, step);
        if !(area > 0.0) {
            return Err(ProfileError::UnnormalizedProfile { integral: area });
        }
        let density = values.iter().map(|v| v / area).collect();
        Ok(SpectralProfile::Tabulated { frequencies, density })
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        match self {
            SpectralProfile::Delta { .. } => Ok(()),
            SpectralProfile::Gaussian { fwhm, .. } => {
                if *fwhm > 0.0 {
                    Ok(())
                } else {
                    Err(ProfileError::MalformedGrid)
                }
            }
            SpectralProfile::Tabulated { frequencies, density } => {
                if frequencies.len() < 2 || frequencies.len() != density.len() {
                    return Err(ProfileError::MalformedGrid);
                }
                let step = frequencies[1] - frequencies[0];
                let uniform =
                    frequencies.windows(2).all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.abs().max(1.0));
                if !(step > 0.0) || !uniform || density.iter().any(|d| !(*d >= 0.0)) {
                    return Err(ProfileError::MalformedGrid);
                }
                let integral = trapezoid(density, step);
                if (integral - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(ProfileError::UnnormalizedProfile { integral });
                }
                Ok(())
            }
        }
    }

    /// Quadrature nodes `(detuning, weight)` with weights summing to one.
    pub fn quadrature(&self, points: usize) -> Vec<(f64, f64)> {
        match self {
            SpectralProfile::Delta { center } => vec![(*center, 1.0)],
            SpectralProfile::Gaussian { center, fwhm } => {
                let sigma = fwhm / fwhm_per_sigma();
                let n = points.max(3) | 1;
                let half = 5.0 * sigma;
                let step = 2.0 * half / (n - 1) as f64;
                let mut nodes: Vec<(f64, f64)> = (0..n)
                    .map(|i| {
                        let x = -half + i as f64 * step;
                        let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                        (center + x, end * (-0.5 * (x / sigma).powi(2)).exp())
                    })
                    .collect();
                let total: f64 = nodes.iter().map(|n| n.1).sum();
                nodes.iter_mut().for_each(|n| n.1 /= total);
                nodes
            }
            SpectralProfile::Tabulated { frequencies, density } => {
                let n = density.len();
                let mut nodes: Vec<(f64, f64)> = frequencies
                    .iter()
                    .zip(density)
                    .enumerate()
                    .map(|(i, (&f, &d))| (f, if i == 0 || i == n - 1 { 0.5 * d } else { d }))
                    .filter(|n| n.1 > 0.0)
                    .collect();
                let total: f64 = nodes.iter().map(|n| n.1).sum();
                nodes.iter_mut().for_each(|n| n.1 /= total);
                nodes
            }
        }
    }

    /// Draws one detuning.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SpectralProfile::Delta { center } => *center,
            SpectralProfile::Gaussian { center, fwhm } => {
                let z: f64 = StandardNormal.sample(rng);
                center + z * fwhm / fwhm_per_sigma()
            }
            SpectralProfile::Tabulated { frequencies, density } => {
                // Cells between neighbouring grid points carry trapezoid mass;
                // the position inside a cell is uniform.
                let step = frequencies[1] - frequencies[0];
                let total = trapezoid(density, step);
                let mut target = rng.random::<f64>() * total;
                for (i, w) in density.windows(2).enumerate() {
                    let mass = 0.5 * (w[0] + w[1]) * step;
                    if target < mass || i == density.len() - 2 {
                        let frac = if mass > 0.0 { (target / mass).clamp(0.0, 1.0) } else { rng.random() };
                        return frequencies[i] + frac * step;
                    }
                    target -= mass;
                }
                unreachable!("profile grid has at least two points")
            }
        }
    }
}

pub(crate) fn trapezoid(values: &[f64], step: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    step * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}
