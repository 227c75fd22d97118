//! Patch-center coordinate construction and the two coordinate sampling
//! schemes: random patches over the whole clip, and all patches of a few
//! random frames.
//!
//! Samplers take an explicit ChaCha8 rng, so sequences are a pure,
//! portable function of (seed, grid, count).

use crate::diffcore::{split_axis, AxisQuery};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Patch-center position in [0,1]^3: i along height, j along width, k along time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub i: f64,
    pub j: f64,
    pub k: f64,
}

/// Decoder patch grid: patch counts per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderGrid {
    pub g_t: usize,
    pub g_h: usize,
    pub g_w: usize,
}

impl DecoderGrid {
    pub fn new(g_t: usize, g_h: usize, g_w: usize) -> Result<Self> {
        if g_t == 0 || g_h == 0 || g_w == 0 {
            return Err(Error::Input("decoder grid extents must be >= 1".into()));
        }
        Ok(DecoderGrid { g_t, g_h, g_w })
    }

    /// Total patch count M.
    pub fn patch_count(&self) -> usize {
        self.g_t * self.g_h * self.g_w
    }

    /// All M patch centers in row-major (t, h, w) order.
    pub fn all_coords(&self) -> Vec<Coord> {
        let mut out = Vec::with_capacity(self.patch_count());
        for t in 0..self.g_t {
            for h in 0..self.g_h {
                for w in 0..self.g_w {
                    out.push(coord_of_patch((t, h, w), self).unwrap());
                }
            }
        }
        out
    }
}

/// Center of grid cell (t, h, w): cell a of G cells maps to (a + 0.5) / G.
pub fn coord_of_patch(idx: (usize, usize, usize), grid: &DecoderGrid) -> Result<Coord> {
    let (t, h, w) = idx;
    if t >= grid.g_t || h >= grid.g_h || w >= grid.g_w {
        return Err(Error::Input(format!(
            "patch index ({}, {}, {}) outside grid ({}, {}, {})",
            t, h, w, grid.g_t, grid.g_h, grid.g_w
        )));
    }
    Ok(Coord {
        i: (h as f64 + 0.5) / grid.g_h as f64,
        j: (w as f64 + 0.5) / grid.g_w as f64,
        k: (t as f64 + 0.5) / grid.g_t as f64,
    })
}

/// Clamped floor cell and fractional weights of a coordinate against plane
/// extents (h_ext, w_ext, t_ext). Fractional position along an axis of
/// extent A is c*(A-1), with the floor clamped to A-2 so the upper neighbor
/// stays in range; extent-1 axes fall back to constant lookup.
pub fn grid_cell_of_coord<F: Scalar>(
    c: Coord,
    extents: (usize, usize, usize),
) -> Result<((usize, usize, usize), (F, F, F))> {
    if !(c.i.is_finite() && c.j.is_finite() && c.k.is_finite()) {
        return Err(Error::Input("non-finite coordinate".into()));
    }
    let qi: AxisQuery<F> = split_axis(F::from_f64(c.i * (extents.0 as f64 - 1.0)), extents.0);
    let qj: AxisQuery<F> = split_axis(F::from_f64(c.j * (extents.1 as f64 - 1.0)), extents.1);
    let qk: AxisQuery<F> = split_axis(F::from_f64(c.k * (extents.2 as f64 - 1.0)), extents.2);
    Ok(((qi.lo, qj.lo, qk.lo), (qi.w, qj.w, qk.w)))
}

/// N distinct patch centers drawn uniformly without replacement.
pub fn sample_random_patch(rng: &mut ChaCha8Rng, grid: &DecoderGrid, n: usize) -> Result<Vec<Coord>> {
    let m = grid.patch_count();
    if n == 0 || n > m {
        return Err(Error::Input(format!("cannot sample {} of {} patches", n, m)));
    }
    let picks = index_sample(rng, m, n);
    let mut out = Vec::with_capacity(n);
    for p in picks.iter() {
        let t = p / (grid.g_h * grid.g_w);
        let rem = p % (grid.g_h * grid.g_w);
        out.push(coord_of_patch((t, rem / grid.g_w, rem % grid.g_w), grid)?);
    }
    Ok(out)
}

/// All patch centers of `n_frames` distinct random time indices.
pub fn sample_random_frame(
    rng: &mut ChaCha8Rng,
    grid: &DecoderGrid,
    n_frames: usize,
) -> Result<Vec<Coord>> {
    if n_frames == 0 || n_frames > grid.g_t {
        return Err(Error::Input(format!(
            "cannot sample {} of {} frames",
            n_frames, grid.g_t
        )));
    }
    let picks = index_sample(rng, grid.g_t, n_frames);
    let mut out = Vec::with_capacity(n_frames * grid.g_h * grid.g_w);
    for t in picks.iter() {
        for h in 0..grid.g_h {
            for w in 0..grid.g_w {
                out.push(coord_of_patch((t, h, w), grid)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn grid888() -> DecoderGrid {
        DecoderGrid::new(8, 8, 8).unwrap()
    }

    #[test]
    fn coord_formula() {
        let g = grid888();
        let c = coord_of_patch((0, 0, 0), &g).unwrap();
        assert_eq!((c.i, c.j, c.k), (0.0625, 0.0625, 0.0625));
        let last = coord_of_patch((7, 7, 7), &g).unwrap();
        assert_eq!((last.i, last.j, last.k), (1.0 - 0.0625, 1.0 - 0.0625, 1.0 - 0.0625));
        let single = DecoderGrid::new(1, 1, 1).unwrap();
        let c1 = coord_of_patch((0, 0, 0), &single).unwrap();
        assert_eq!((c1.i, c1.j, c1.k), (0.5, 0.5, 0.5));
        assert!(coord_of_patch((8, 0, 0), &g).is_err());
    }

    #[test]
    fn grid_cell_clamping() {
        // i = 0 -> l = 0, w = 0
        let ((l, _, _), (w, _, _)) =
            grid_cell_of_coord::<f64>(Coord { i: 0.0, j: 0.0, k: 0.0 }, (16, 16, 16)).unwrap();
        assert_eq!((l, w), (0, 0.0));
        // i = 1, extent 16 -> l = 14, w = 1
        let ((l, _, _), (w, _, _)) =
            grid_cell_of_coord::<f64>(Coord { i: 1.0, j: 0.0, k: 0.0 }, (16, 16, 16)).unwrap();
        assert_eq!(l, 14);
        assert!((w - 1.0).abs() < 1e-12);
        // i = 0.5, extent 3 -> u = 1.0 -> l = 1, w = 0
        let ((l, _, _), (w, _, _)) =
            grid_cell_of_coord::<f64>(Coord { i: 0.5, j: 0.0, k: 0.0 }, (3, 3, 3)).unwrap();
        assert_eq!(l, 1);
        assert_eq!(w, 0.0);
        assert!(grid_cell_of_coord::<f64>(Coord { i: f64::NAN, j: 0.0, k: 0.0 }, (4, 4, 4)).is_err());
    }

    #[test]
    fn random_patch_full_draw_is_all_centers() {
        let g = grid888();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = sample_random_patch(&mut rng, &g, g.patch_count()).unwrap();
        let key = |c: &Coord| ((c.i * 1e6) as i64, (c.j * 1e6) as i64, (c.k * 1e6) as i64);
        let got: BTreeSet<_> = coords.iter().map(key).collect();
        let want: BTreeSet<_> = g.all_coords().iter().map(key).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn random_patch_no_duplicates_and_deterministic() {
        let g = grid888();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = sample_random_patch(&mut r1, &g, 64).unwrap();
        let b = sample_random_patch(&mut r2, &g, 64).unwrap();
        assert_eq!(a, b);
        let key = |c: &Coord| ((c.i * 1e6) as i64, (c.j * 1e6) as i64, (c.k * 1e6) as i64);
        let set: BTreeSet<_> = a.iter().map(key).collect();
        assert_eq!(set.len(), 64);
        assert!(sample_random_patch(&mut r1, &g, g.patch_count() + 1).is_err());
    }

    #[test]
    fn random_patch_per_frame_coverage_chi_squared() {
        // empirical per-frame counts over many draws ~ uniform
        let g = grid888();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws / 8 {
            for c in sample_random_patch(&mut rng, &g, 8).unwrap() {
                let t = (c.k * 8.0 - 0.5).round() as usize;
                counts[t] += 1;
            }
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-squared critical value, 7 dof, alpha = 0.01
        assert!(chi2 < 18.475, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn random_frame_shapes() {
        let g = grid888();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all = sample_random_frame(&mut rng, &g, g.g_t).unwrap();
        assert_eq!(all.len(), g.patch_count());
        let one = sample_random_frame(&mut rng, &g, 1).unwrap();
        assert_eq!(one.len(), 64);
        let k0 = one[0].k;
        assert!(one.iter().all(|c| c.k == k0));
        assert!(sample_random_frame(&mut rng, &g, 9).is_err());
    }

    #[test]
    fn random_frame_distinct_k_values() {
        let g = grid888();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coords = sample_random_frame(&mut rng, &g, 3).unwrap();
        let ks: BTreeSet<i64> = coords.iter().map(|c| (c.k * 1e6) as i64).collect();
        assert_eq!(ks.len(), 3);
    }

    #[test]
    fn full_scale_sampling_ratio() {
        // 4 of 128 frames covers the same fraction as 3.125% of all patches
        let grid = DecoderGrid::new(128, 16, 16).unwrap();
        let m = grid.patch_count();
        let frame_coords = 4 * grid.g_h * grid.g_w;
        assert_eq!(frame_coords as f64 / m as f64, 0.03125);
        assert_eq!((0.03125 * m as f64) as usize, 1024);
    }
}
