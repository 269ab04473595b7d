//! Boundary-to-boundary distances via an exact separable squared Euclidean
//! distance transform with per-axis spacing, evaluated on the union
//! bounding box of the two point sets.

use crate::volgrid::Spacing;

/// Large finite stand-in for "no site yet"; kept finite so the parabola
/// envelope arithmetic stays well-defined.
const BIG: f64 = 1e30;

type Voxel = (usize, usize, usize);

/// 1D squared distance transform (lower envelope of parabolas) with sample
/// spacing `w`: d[i] = min_j ((i - j)^2 * w^2 + f[j]).
fn dt_1d(f: &[f64], w2: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        d[0] = f[0];
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64 * w2;
        loop {
            let p = v[k];
            let fp = f[p] + (p * p) as f64 * w2;
            let s = (fq - fp) / (2.0 * w2 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    // q dominates everywhere so far
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for i in 0..n {
        while z[k + 1] < i as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = i as isize - p as isize;
        d[i] = (diff * diff) as f64 * w2 + f[p];
    }
}

struct Box3 {
    lo: [usize; 3],
    dims: [usize; 3],
}

impl Box3 {
    fn around(points: &[&[Voxel]]) -> Box3 {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for set in points {
            for &(x, y, z) in *set {
                let c = [x, y, z];
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        Box3 {
            lo,
            dims: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
        }
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x - self.lo[0]) + self.dims[0] * ((y - self.lo[1]) + self.dims[1] * (z - self.lo[2]))
    }
}

/// Distance (mm) from every point of `from` to the nearest point of `to`.
/// Both sets must be nonempty.
pub(crate) fn directed_distances(from: &[Voxel], to: &[Voxel], spacing: Spacing) -> Vec<f64> {
    debug_assert!(!from.is_empty() && !to.is_empty());
    let bbox = Box3::around(&[from, to]);
    let [nx, ny, nz] = bbox.dims;
    let mut field = vec![BIG; nx * ny * nz];
    for &(x, y, z) in to {
        field[bbox.index(x, y, z)] = 0.0;
    }

    let w2 = [
        spacing.sx * spacing.sx,
        spacing.sy * spacing.sy,
        spacing.sz * spacing.sz,
    ];
    let max_n = nx.max(ny).max(nz);
    let mut f = vec![0.0f64; max_n];
    let mut d = vec![0.0f64; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0.0f64; max_n + 1];

    // pass along x
    for zz in 0..nz {
        for yy in 0..ny {
            let row = nx * (yy + ny * zz);
            f[..nx].copy_from_slice(&field[row..row + nx]);
            dt_1d(&f[..nx], w2[0], &mut d[..nx], &mut v, &mut z);
            field[row..row + nx].copy_from_slice(&d[..nx]);
        }
    }
    // pass along y
    for zz in 0..nz {
        for xx in 0..nx {
            for yy in 0..ny {
                f[yy] = field[xx + nx * (yy + ny * zz)];
            }
            dt_1d(&f[..ny], w2[1], &mut d[..ny], &mut v, &mut z);
            for yy in 0..ny {
                field[xx + nx * (yy + ny * zz)] = d[yy];
            }
        }
    }
    // pass along z
    for yy in 0..ny {
        for xx in 0..nx {
            for zz in 0..nz {
                f[zz] = field[xx + nx * (yy + ny * zz)];
            }
            dt_1d(&f[..nz], w2[2], &mut d[..nz], &mut v, &mut z);
            for zz in 0..nz {
                field[xx + nx * (yy + ny * zz)] = d[zz];
            }
        }
    }

    from.iter()
        .map(|&(x, y, z)| field[bbox.index(x, y, z)].sqrt())
        .collect()
}

/// Percentile (0..=1) of a sorted slice with linear interpolation between
/// order statistics.
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (n - 1) as f64 * q;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Symmetric HD95 between two boundary point sets: pool the directed
/// nearest distances both ways and take the 95th percentile of the pooled
/// multiset (linear interpolation). Both sets must be nonempty.
pub(crate) fn hd95_from_boundaries(a: &[Voxel], b: &[Voxel], spacing: Spacing) -> f64 {
    let mut pooled = directed_distances(a, b, spacing);
    pooled.extend(directed_distances(b, a, spacing));
    pooled.sort_unstable_by(f64::total_cmp);
    percentile_sorted(&pooled, 0.95)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_directed(from: &[Voxel], to: &[Voxel], s: Spacing) -> Vec<f64> {
        from.iter()
            .map(|&(x, y, z)| {
                to.iter()
                    .map(|&(tx, ty, tz)| {
                        let dx = (x as f64 - tx as f64) * s.sx;
                        let dy = (y as f64 - ty as f64) * s.sy;
                        let dz = (z as f64 - tz as f64) * s.sz;
                        (dx * dx + dy * dy + dz * dz).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn two_points_three_voxels_apart() {
        let s = Spacing::isotropic(1.0).unwrap();
        let a = vec![(1usize, 2usize, 2usize)];
        let b = vec![(4usize, 2usize, 2usize)];
        assert_eq!(hd95_from_boundaries(&a, &b, s), 3.0);
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let s = Spacing::new(0.5, 1.0, 2.0).unwrap();
        let a: Vec<Voxel> = vec![(0, 0, 0), (3, 1, 2), (5, 5, 5)];
        assert_eq!(hd95_from_boundaries(&a, &a, s), 0.0);
    }

    #[test]
    fn directed_matches_brute_force_on_random_sets() {
        let s = Spacing::new(0.8, 1.1, 1.9).unwrap();
        // Deterministic pseudo-random point sets.
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..20 {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for _ in 0..30 {
                a.push((
                    (next() % 12) as usize,
                    (next() % 12) as usize,
                    (next() % 12) as usize,
                ));
                b.push((
                    (next() % 12) as usize,
                    (next() % 12) as usize,
                    (next() % 12) as usize,
                ));
            }
            a.dedup();
            b.dedup();
            let fast = directed_distances(&a, &b, s);
            let brute = brute_directed(&a, &b, s);
            for (f, g) in fast.iter().zip(&brute) {
                assert!((f - g).abs() < 1e-9, "edt {f} vs brute {g}");
            }
        }
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile_sorted(&v, 0.0), 0.0);
        assert_eq!(percentile_sorted(&v, 1.0), 3.0);
        assert!((percentile_sorted(&v, 0.95) - 2.85).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[5.0], 0.95), 5.0);
    }
}
