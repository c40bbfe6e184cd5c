//! Orthonormal multi-level 2D Haar transform in the usual pyramid layout:
//! after all levels the single approximation coefficient sits at index 0.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};

fn check_side(len: usize, side: usize) -> Result<()> {
    if side == 0 || !side.is_power_of_two() || len != side * side {
        return Err(Error::Shape(format!(
            "haar transform needs a power-of-two square field, got {len} values for side {side}"
        )));
    }
    Ok(())
}

/// One analysis step along a strided line of length `m`.
fn analyse(line: &mut [f64], tmp: &mut [f64]) {
    let h = line.len() / 2;
    for k in 0..h {
        let (a, b) = (line[2 * k], line[2 * k + 1]);
        tmp[k] = (a + b) * FRAC_1_SQRT_2;
        tmp[h + k] = (a - b) * FRAC_1_SQRT_2;
    }
    line.copy_from_slice(&tmp[..line.len()]);
}

fn synthesise(line: &mut [f64], tmp: &mut [f64]) {
    let h = line.len() / 2;
    for k in 0..h {
        let (s, d) = (line[k], line[h + k]);
        tmp[2 * k] = (s + d) * FRAC_1_SQRT_2;
        tmp[2 * k + 1] = (s - d) * FRAC_1_SQRT_2;
    }
    line.copy_from_slice(&tmp[..line.len()]);
}

fn apply_block(data: &mut [f64], side: usize, m: usize, f: fn(&mut [f64], &mut [f64])) {
    let mut line = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    for r in 0..m {
        f(&mut data[r * side..r * side + m], &mut tmp);
    }
    for c in 0..m {
        for r in 0..m {
            line[r] = data[r * side + c];
        }
        f(&mut line, &mut tmp);
        for r in 0..m {
            data[r * side + c] = line[r];
        }
    }
}

/// Full-depth forward transform of a `side × side` field.
pub fn haar_dwt(data: &[f64], side: usize) -> Result<Vec<f64>> {
    check_side(data.len(), side)?;
    let mut out = data.to_vec();
    let mut m = side;
    while m > 1 {
        apply_block(&mut out, side, m, analyse);
        m /= 2;
    }
    Ok(out)
}

pub fn haar_idwt(coeffs: &[f64], side: usize) -> Result<Vec<f64>> {
    check_side(coeffs.len(), side)?;
    let mut out = coeffs.to_vec();
    let mut m = 2;
    while m <= side {
        apply_block(&mut out, side, m, synthesise);
        m *= 2;
    }
    Ok(out)
}
