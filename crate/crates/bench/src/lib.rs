//! Fixtures shared by the benchmarks.

use perfowave::{AxisBox, UnitCellSpec, WaveSystem};

pub fn centered_hole() -> UnitCellSpec {
    UnitCellSpec::unit_square(Some(
        AxisBox::new(vec![0.25, 0.25], vec![0.75, 0.75]).expect("valid hole"),
    ))
    .expect("valid cell")
}

/// Perforated unit square with `cells` grid cells per period.
pub fn perforated(eps: f64, cells: usize) -> WaveSystem {
    WaveSystem::perforated(&AxisBox::unit(2), eps, &centered_hole(), eps / cells as f64)
        .expect("aligned grid")
}

/// Deterministic pseudo-random sample in `[-1, 1)`.
pub fn sample(n: usize, salt: u64) -> Vec<f64> {
    let mut x = salt
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            x = x
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn sample_is_in_range_and_reproducible() {
        let a = super::sample(100, 3);
        assert_eq!(a, super::sample(100, 3));
        assert!(a.iter().all(|x| (-1.0..1.0).contains(x)));
    }
}
