//! Gaussian kernel density estimate over log-gaps, evaluated on a fixed grid.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
    Silverman,
    Fixed(f64),
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: T) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * T::from_usize_lossy(n - 1);
    let lo = pos.floor();
    let i = lo.to_usize().unwrap_or(0).min(n - 1);
    let j = (i + 1).min(n - 1);
    let frac = pos - lo;
    sorted[i] + (sorted[j] - sorted[i]) * frac
}

pub fn sample_std<T: Scalar>(data: &[T]) -> T {
    let n = T::from_usize_lossy(data.len());
    let mean = data.iter().copied().sum::<T>() / n;
    let ss: T = data.iter().map(|&x| (x - mean) * (x - mean)).sum();
    (ss / (n - T::one())).sqrt()
}

/// Silverman's rule of thumb on sorted data. Falls back to whichever spread
/// measure is positive; `None` when the data has no spread at all.
pub fn silverman_bandwidth<T: Scalar>(sorted: &[T]) -> Option<T> {
    if sorted.len() < 2 {
        return None;
    }
    let sd = sample_std(sorted);
    let iqr = quantile_sorted(sorted, T::lit(0.75)) - quantile_sorted(sorted, T::lit(0.25));
    let robust = iqr / T::lit(1.34);
    let spread = match (sd > T::zero(), robust > T::zero()) {
        (true, true) => sd.min(robust),
        (true, false) => sd,
        (false, true) => robust,
        (false, false) => return None,
    };
    let n = T::from_usize_lossy(sorted.len());
    Some(T::lit(0.9) * spread * n.powf(T::lit(-0.2)))
}

#[derive(Debug, Clone)]
pub struct GridDensity<T> {
    pub grid: Vec<T>,
    pub density: Vec<T>,
    pub bandwidth: T,
}

/// Evaluates the KDE of `sorted` on `points` equally spaced grid points over
/// `[min - 3h, max + 3h]`.
pub fn grid_density<T: Scalar>(sorted: &[T], bandwidth: T, points: usize) -> GridDensity<T> {
    let lo = sorted[0] - T::lit(3.0) * bandwidth;
    let hi = sorted[sorted.len() - 1] + T::lit(3.0) * bandwidth;
    let step = (hi - lo) / T::from_usize_lossy(points - 1);
    let norm = T::one()
        / (T::from_usize_lossy(sorted.len())
            * bandwidth
            * T::lit((2.0 * std::f64::consts::PI).sqrt()));
    let half = T::lit(0.5);
    let grid: Vec<T> = (0..points)
        .map(|i| lo + step * T::from_usize_lossy(i))
        .collect();
    let density = grid
        .iter()
        .map(|&x| {
            let s: T = sorted
                .iter()
                .map(|&d| {
                    let u = (x - d) / bandwidth;
                    (-half * u * u).exp()
                })
                .sum();
            s * norm
        })
        .collect();
    GridDensity {
        grid,
        density,
        bandwidth,
    }
}

/// Index of the first interior local maximum and of the first local minimum
/// after it. Comparisons are strict; a plateau counts once, at its leftmost
/// point.
pub fn first_max_then_min<T: Scalar>(density: &[T]) -> (Option<usize>, Option<usize>) {
    // Collapse equal neighbours into runs of (start index, value).
    let mut runs: Vec<(usize, T)> = Vec::new();
    for (i, &v) in density.iter().enumerate() {
        match runs.last() {
            Some(&(_, last)) if last == v => {}
            _ => runs.push((i, v)),
        }
    }
    let mut max_run = None;
    for r in 1..runs.len().saturating_sub(1) {
        let (prev, cur, next) = (runs[r - 1].1, runs[r].1, runs[r + 1].1);
        match max_run {
            None if cur > prev && cur > next => max_run = Some(runs[r].0),
            Some(m) if cur < prev && cur < next => return (Some(m), Some(runs[r].0)),
            _ => {}
        }
    }
    (max_run, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_type7() {
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&d, 0.25), 1.75);
        assert_eq!(quantile_sorted(&d, 0.75), 3.25);
        assert_eq!(quantile_sorted(&[5.0], 0.5), 5.0);
    }

    #[test]
    fn silverman_reference_value() {
        let d = [1.0, 2.0, 3.0, 4.0];
        // sd = 1.29099, IQR/1.34 = 1.11940 -> 0.9 * 1.11940 * 4^-0.2
        let h = silverman_bandwidth(&d).unwrap();
        assert!((h - 0.9 * (1.5 / 1.34) * 4f64.powf(-0.2)).abs() < 1e-12);
        assert!(silverman_bandwidth(&[3.0, 3.0, 3.0]).is_none());
    }

    #[test]
    fn plateau_extrema_take_leftmost_point() {
        let d = [0.0, 1.0, 2.0, 2.0, 1.0, 0.5, 0.5, 1.0, 0.0];
        assert_eq!(first_max_then_min(&d), (Some(2), Some(5)));
        let mono = [0.0, 1.0, 2.0, 1.0, 0.0];
        assert_eq!(first_max_then_min(&mono), (Some(2), None));
        // A rising step is not a maximum.
        let step = [0.0, 1.0, 1.0, 2.0, 0.0];
        assert_eq!(first_max_then_min(&step), (Some(3), None));
    }

    #[test]
    fn density_integrates_to_one() {
        let data = [0.0f64, 0.5, 2.0, 2.1];
        let h = 0.4;
        let g = grid_density(&data, h, 2048);
        let step = g.grid[1] - g.grid[0];
        let mass: f64 = g.density.iter().sum::<f64>() * step;
        // +-3h truncation loses ~0.27% of each kernel's mass.
        assert!((mass - 0.9973).abs() < 2e-3, "mass {mass}");
    }
}
