//! Gaussian kernel density estimates and the overlap coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{EvoError, Result};

pub const MIN_SAMPLES: usize = 10;
/// Grid extends this many bandwidths past the outermost sample.
pub const TAIL_BANDWIDTHS: f64 = 5.0;
pub const MIN_GRID_POINTS: usize = 1024;
/// Target grid spacing as a fraction of the narrower bandwidth.
pub const POINTS_PER_BANDWIDTH: f64 = 8.0;
pub const MAX_GRID_POINTS: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Silverman's rule `1.06·σ̂·n^(−1/5)`. A constant sample set gets a
/// bandwidth scaled to its magnitude so the density stays finite.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let (mean, sd) = mean_std(samples);
    let scale = if sd > 0.0 { sd } else { 1e-3 * mean.abs().max(1.0) };
    1.06 * scale * (samples.len() as f64).powf(-0.2)
}

pub fn density_at(samples: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    samples
        .iter()
        .map(|s| {
            let z = (x - s) / bandwidth;
            (-0.5 * z * z).exp()
        })
        .sum::<f64>()
        * norm
}

pub fn trapezoid(grid: &[f64], ys: &[f64]) -> f64 {
    grid.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

fn check_samples(name: &str, xs: &[f64]) -> Result<()> {
    if xs.len() < MIN_SAMPLES {
        return Err(EvoError::SampleSize {
            what: name.to_string(),
            needed: MIN_SAMPLES,
            got: xs.len(),
        });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(EvoError::contract(format!("{name} samples contain non-finite values")));
    }
    Ok(())
}

/// Evenly spaced grid covering both sample sets, fine enough to resolve the
/// narrower kernel.
pub fn common_grid(a: &[f64], ha: f64, b: &[f64], hb: f64) -> Vec<f64> {
    let min = |xs: &[f64]| xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |xs: &[f64]| xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = (min(a) - TAIL_BANDWIDTHS * ha).min(min(b) - TAIL_BANDWIDTHS * hb);
    let hi = (max(a) + TAIL_BANDWIDTHS * ha).max(max(b) + TAIL_BANDWIDTHS * hb);
    let step = ha.min(hb) / POINTS_PER_BANDWIDTH;
    let wanted = ((hi - lo) / step).ceil() as usize + 1;
    let n = wanted.clamp(MIN_GRID_POINTS, MAX_GRID_POINTS);
    let dx = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + dx * i as f64).collect()
}

/// Densities of `a` and `b` on a shared grid, plus their overlap
/// coefficient `∫ min(f_a, f_b)`.
pub fn kde_pair(a: &[f64], b: &[f64]) -> Result<(KdeCurve, KdeCurve, f64)> {
    check_samples("first", a)?;
    check_samples("second", b)?;
    let ha = silverman_bandwidth(a);
    let hb = silverman_bandwidth(b);
    let grid = common_grid(a, ha, b, hb);
    let da: Vec<f64> = grid.iter().map(|&x| density_at(a, ha, x)).collect();
    let db: Vec<f64> = grid.iter().map(|&x| density_at(b, hb, x)).collect();
    let mins: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x.min(*y)).collect();
    let overlap = trapezoid(&grid, &mins).clamp(0.0, 1.0);
    Ok((
        KdeCurve {
            grid: grid.clone(),
            density: da,
            bandwidth: ha,
        },
        KdeCurve {
            grid,
            density: db,
            bandwidth: hb,
        },
        overlap,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identical_sets_overlap_fully() {
        let mut rng = Rng::new(3, 0);
        let xs = rng.normal_vec(200, 0.0, 1.0);
        let (a, b, ov) = kde_pair(&xs, &xs).unwrap();
        assert!((ov - 1.0).abs() < 1e-6, "{ov}");
        assert!((a.integral() - 1.0).abs() < 1e-3);
        assert_eq!(a.density, b.density);
    }

    #[test]
    fn disjoint_supports() {
        let mut rng = Rng::new(4, 0);
        let v: Vec<f64> = (0..50).map(|_| -100.0 + rng.uniform_in(-0.01, 0.01)).collect();
        let t: Vec<f64> = (0..50).map(|_| 100.0 + rng.uniform_in(-0.01, 0.01)).collect();
        let (_, _, ov) = kde_pair(&v, &t).unwrap();
        assert!(ov < 1e-3);
    }

    #[test]
    fn too_few_samples() {
        let xs = [0.0; 9];
        let ys = [0.0; 20];
        assert!(matches!(kde_pair(&xs, &ys), Err(EvoError::SampleSize { needed: 10, got: 9, .. })));
    }

    #[test]
    fn constant_samples_still_normalize() {
        let xs = [2.5; 30];
        let mut rng = Rng::new(5, 0);
        let ys = rng.normal_vec(30, 0.0, 1.0);
        let (a, b, _) = kde_pair(&xs, &ys).unwrap();
        assert!((a.integral() - 1.0).abs() < 1e-3, "{}", a.integral());
        assert!((b.integral() - 1.0).abs() < 1e-3);
    }
}
