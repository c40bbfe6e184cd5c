//! Measurement aggregation `z = g(M, x)` and the map back to image space.

use rand::Rng;

use crate::data::FrameStack;
use crate::error::{check_len, Error, Result};
use crate::mask::MaskRealization;
use crate::noise::{CoefficientSampler, NoiseModel, NoiseParams};
use crate::raster::Image;
use crate::wht::{self, HadamardSpec};

/// Averaged coefficient measurements in natural order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub values: Vec<f64>,
    pub included_counts: Vec<u32>,
}

impl CoefficientVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SensingMode<'a> {
    Stochastic(NoiseParams),
    Noiseless,
    RawFrames(&'a FrameStack),
}

/// Produces individual coefficient measurements `yᵢ⁽ˢ⁾` for one field of view.
#[derive(Debug, Clone)]
pub enum MeasurementSource {
    /// Poissonian-Gaussian draws (or exact values) from a ground truth.
    Simulated {
        sampler: CoefficientSampler,
        model: NoiseModel,
    },
    /// Measurement `s` of coefficient `i` is `Hᵢ` applied to raw frame `s`.
    Raw { side: usize, frame_coeffs: Vec<Vec<f64>> },
}

impl MeasurementSource {
    pub fn simulated(x: &Image, model: NoiseModel) -> Result<Self> {
        Ok(MeasurementSource::Simulated {
            sampler: CoefficientSampler::new(x)?,
            model,
        })
    }

    pub fn raw(frames: &FrameStack) -> Result<Self> {
        let side = frames.side();
        let spec = HadamardSpec::image(side)?;
        let frame_coeffs = frames
            .frames()
            .iter()
            .map(|f| wht::wht_forward(f, &spec))
            .collect::<Result<_>>()?;
        Ok(MeasurementSource::Raw { side, frame_coeffs })
    }

    pub fn len(&self) -> usize {
        match self {
            MeasurementSource::Simulated { sampler, .. } => sampler.len(),
            MeasurementSource::Raw { side, .. } => side * side,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Upper bound on measurements per coefficient, if any.
    pub fn max_measurements(&self) -> Option<usize> {
        match self {
            MeasurementSource::Simulated { .. } => None,
            MeasurementSource::Raw { frame_coeffs, .. } => Some(frame_coeffs.len()),
        }
    }

    fn check_measurements(&self, s_total: usize) -> Result<()> {
        match self.max_measurements() {
            Some(max) if s_total > max => Err(Error::Shape(format!(
                "{s_total} measurements per coefficient requested but only {max} raw frames available"
            ))),
            _ => Ok(()),
        }
    }

    /// Mean of the measurements of coefficient `i` selected by `row`; 0 when
    /// nothing is selected.
    pub fn measure<R: Rng + ?Sized>(&self, i: usize, row: &[u8], rng: &mut R) -> f64 {
        let count: u32 = row.iter().map(|&m| m as u32).sum();
        if count == 0 {
            return 0.0;
        }
        match self {
            MeasurementSource::Simulated { sampler, model } => sampler.sample(i, count, model, rng),
            MeasurementSource::Raw { frame_coeffs, .. } => {
                let sum: f64 = row
                    .iter()
                    .zip(frame_coeffs)
                    .filter(|(&m, _)| m == 1)
                    .map(|(_, c)| c[i])
                    .sum();
                sum / count as f64
            }
        }
    }

    /// Every individual measurement, row-major `N × s_total`.
    pub fn measurement_matrix<R: Rng + ?Sized>(&self, s_total: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_measurements(s_total)?;
        let n = self.len();
        let mut y = Vec::with_capacity(n * s_total);
        match self {
            MeasurementSource::Simulated { sampler, model } => {
                for i in 0..n {
                    for _ in 0..s_total {
                        y.push(sampler.sample(i, 1, model, rng));
                    }
                }
            }
            MeasurementSource::Raw { frame_coeffs, .. } => {
                for i in 0..n {
                    y.extend(frame_coeffs[..s_total].iter().map(|c| c[i]));
                }
            }
        }
        Ok(y)
    }
}

/// `zᵢ = Σₛ Mᵢ⁽ˢ⁾ yᵢ⁽ˢ⁾ / Σₜ Mᵢ⁽ᵗ⁾`, with `zᵢ = 0` when no measurement of
/// coefficient `i` is included.
pub fn sense_with<R: Rng + ?Sized>(
    source: &MeasurementSource,
    m: &MaskRealization,
    rng: &mut R,
) -> Result<CoefficientVector> {
    check_len(source.len(), m.coefficients())?;
    source.check_measurements(m.measurements())?;
    let n = m.coefficients();
    let mut values = Vec::with_capacity(n);
    let mut included_counts = Vec::with_capacity(n);
    for i in 0..n {
        included_counts.push(m.count(i));
        values.push(source.measure(i, m.row(i), rng));
    }
    Ok(CoefficientVector {
        values,
        included_counts,
    })
}

pub fn sense<R: Rng + ?Sized>(
    x: &Image,
    m: &MaskRealization,
    mode: SensingMode<'_>,
    rng: &mut R,
) -> Result<CoefficientVector> {
    let source = match mode {
        SensingMode::Stochastic(p) => MeasurementSource::simulated(x, NoiseModel::PoissonGaussian(p))?,
        SensingMode::Noiseless => MeasurementSource::simulated(x, NoiseModel::Noiseless)?,
        SensingMode::RawFrames(frames) => {
            if frames.side() != x.side() {
                return Err(Error::Shape("frame stack and image differ in size".into()));
            }
            MeasurementSource::raw(frames)?
        }
    };
    sense_with(&source, m, rng)
}

/// Image-space field `H·z / N`; exact inverse under full noiseless sampling.
pub fn to_image(z: &CoefficientVector, spec: &HadamardSpec) -> Result<Image> {
    coefficients_to_image(&z.values, spec)
}

pub fn coefficients_to_image(values: &[f64], spec: &HadamardSpec) -> Result<Image> {
    if spec.dims() != wht::Dims::Two {
        return Err(Error::invalid("image reconstruction needs a 2D transform"));
    }
    let data = wht::wht_inverse(values, spec)?;
    Image::new(spec.side(), data)
}
