//! Brute-force reference implementations shared by the integration tests.
//! Deliberately naive: no grouping, no distance transforms.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nestedformer::metrics::SegmentationMask;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn coords(grid: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Full `N×N` multi-head attention where pairs rejected by `allowed` get a
/// score of −∞. `bias(a, b, head)` is added to allowed scores.
pub fn masked_full_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let dqk = q.len() / n;
    let dv = v.len() / n;
    let (hq, hv) = (dqk / heads, dv / heads);
    let scale = 1.0 / (hq as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    for h in 0..heads {
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    if !allowed(i, j) {
                        return f64::NEG_INFINITY;
                    }
                    let dot: f64 = (0..hq).map(|c| q[i * dqk + h * hq + c] * k[j * dqk + h * hq + c]).sum();
                    scale * dot + bias(i, j, h)
                })
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in 0..hv {
                    out[i * dv + h * hv + c] += e[j] / z * v[j * dv + h * hv + c];
                }
            }
        }
    }
    out
}

/// Random label volume with blobs so boundaries are non-trivial.
pub fn random_mask(rng: &mut ChaCha8Rng, extents: [usize; 3], classes: u8) -> SegmentationMask {
    let n: usize = extents.iter().product();
    let density = rng.random_range(0.05..0.6);
    let labels = (0..n)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(1..classes)
            } else {
                0
            }
        })
        .collect();
    SegmentationMask::new(labels, extents, classes as usize).unwrap()
}

pub fn brute_dice(a: &[u8], b: &[u8], class: u8) -> f64 {
    let p = a.iter().filter(|&&l| l == class).count();
    let g = b.iter().filter(|&&l| l == class).count();
    let i = a.iter().zip(b).filter(|(&x, &y)| x == class && y == class).count();
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

/// Surface voxels: class voxels touching another label (6-neighbourhood) or the border.
pub fn brute_surface(labels: &[u8], extents: [usize; 3], class: u8) -> Vec<[usize; 3]> {
    let idx = |p: [i64; 3]| -> Option<usize> {
        if (0..3).any(|a| p[a] < 0 || p[a] >= extents[a] as i64) {
            None
        } else {
            Some((p[0] as usize * extents[1] + p[1] as usize) * extents[2] + p[2] as usize)
        }
    };
    coords(extents)
        .into_iter()
        .filter(|c| {
            let p = [c[0] as i64, c[1] as i64, c[2] as i64];
            if labels[idx(p).unwrap()] != class {
                return false;
            }
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                .iter()
                .any(|o| match idx([p[0] + o[0], p[1] + o[1], p[2] + o[2]]) {
                    None => true,
                    Some(j) => labels[j] != class,
                })
        })
        .collect()
}

fn nearest(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    (0..3)
                        .map(|i| ((a[i] as f64 - b[i] as f64) * spacing[i]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn pct95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let r = 0.95 * (v.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (r - lo as f64)
}

/// Returns (hd95, hausdorff) by exhaustive pairwise distances.
pub fn brute_hd(a: &SegmentationMask, b: &SegmentationMask, class: u8, spacing: [f64; 3]) -> (f64, f64) {
    let sa = brute_surface(a.labels(), a.extents(), class);
    let sb = brute_surface(b.labels(), b.extents(), class);
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => (0.0, 0.0),
        (true, false) | (false, true) => (f64::INFINITY, f64::INFINITY),
        _ => {
            let (ab, ba) = (nearest(&sa, &sb, spacing), nearest(&sb, &sa, spacing));
            let full = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
            (pct95(ab).max(pct95(ba)), full)
        }
    }
}
