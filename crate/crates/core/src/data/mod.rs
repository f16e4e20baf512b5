//! Volumes, masks, synthetic phantoms, on-disk formats and dataset helpers.

pub mod io;
pub mod phantom;

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::tensor::Tensor;

pub use io::{read_mask, read_mmv, write_mask, write_mmv};
pub use phantom::{generate_phantom, rasterize_ellipsoid, Ellipsoid, Phantom, PhantomSpec};

/// `M` co-registered scalar volumes sharing extents `D×H×W`. Stored
/// modality-major, then z, y, x.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    extents: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
    modalities: usize,
}

impl MultiModalVolume {
    pub fn new(modalities: usize, extents: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::Validation("volume needs at least one modality".into()));
        }
        if extents.contains(&0) {
            return Err(Error::Validation(format!("zero extent in {extents:?}")));
        }
        let n = modalities * extents.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::dim(format!(
                "{modalities} modalities of {extents:?} need {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume intensities must be finite".into()));
        }
        Ok(MultiModalVolume {
            extents,
            spacing,
            data,
            modalities,
        })
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn modality(&self, i: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn modality_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Modality `i` as a `[D, H, W, 1]` tensor.
    pub fn modality_tensor(&self, i: usize) -> Result<Tensor> {
        if i >= self.modalities {
            return Err(Error::Contract(format!("modality {i} out of range")));
        }
        let [d, h, w] = self.extents;
        Tensor::new(vec![d, h, w, 1], self.modality(i).iter().map(|&v| v as f64).collect())
    }
}

/// Per-modality z-score over nonzero voxels. Zero voxels (background) stay
/// zero; a modality with zero variance on its support maps to all zeros.
pub fn normalize(v: &MultiModalVolume) -> MultiModalVolume {
    let mut out = v.clone();
    for i in 0..v.modalities() {
        let src = v.modality(i);
        let support: Vec<f64> = src.iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
        let dst = out.modality_mut(i);
        if support.is_empty() {
            continue;
        }
        let n = support.len() as f64;
        let mean = support.iter().sum::<f64>() / n;
        let var = support.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        if var <= 0.0 {
            dst.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let std = var.sqrt();
        for x in dst.iter_mut() {
            if *x != 0.0 {
                *x = ((*x as f64 - mean) / std) as f32;
            }
        }
    }
    out
}

/// Train / validation / test index lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation of `0..n` cut by `fractions` (train, val, test).
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n);
    let n_test = ((fractions[2] * n as f64).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    for (name, f, count) in [
        ("train", fractions[0], n_train),
        ("val", fractions[1], n_val),
        ("test", fractions[2], n_test),
    ] {
        if f > 0.0 && count == 0 {
            warn!("{name} split is empty for {n} cases at fraction {f}");
        }
    }
    Ok(Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// One labeled case.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub name: String,
    pub volume: MultiModalVolume,
    pub mask: SegmentationMask,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseMeta {
    pub spec: PhantomSpec,
    pub seed: u64,
}

pub fn case_dir(root: &Path, idx: usize) -> PathBuf {
    root.join(format!("case_{idx:04}"))
}

/// Seed for case `idx` of a dataset generated from `base`.
pub fn case_seed(base: u64, idx: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx as u64)
}

/// Generate `n` phantom cases; each case directory holds `volume.mmv`,
/// `mask.msk` and `meta.json`. Cases are independent and generated in parallel.
pub fn generate_dataset(root: &Path, spec: &PhantomSpec, n: usize) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    (0..n).into_par_iter().try_for_each(|idx| -> Result<()> {
        let case_spec = PhantomSpec {
            seed: case_seed(spec.seed, idx),
            ..spec.clone()
        };
        let phantom = generate_phantom(&case_spec)?;
        let dir = case_dir(root, idx);
        fs::create_dir_all(&dir)?;
        write_mmv(&dir.join("volume.mmv"), &phantom.volume)?;
        write_mask(&dir.join("mask.msk"), &phantom.mask)?;
        let meta = CaseMeta {
            seed: case_spec.seed,
            spec: case_spec,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    })
}

/// Generate cases in memory (same seeds as [`generate_dataset`]).
pub fn generate_cases(spec: &PhantomSpec, n: usize) -> Result<Vec<Case>> {
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|idx| {
            let p = generate_phantom(&PhantomSpec {
                seed: case_seed(spec.seed, idx),
                ..spec.clone()
            })?;
            Ok(Case {
                name: format!("case_{idx:04}"),
                volume: p.volume,
                mask: p.mask,
            })
        })
        .collect()
}

/// Load every `case_*` directory under `root` in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Case>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("case_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no case_* directories in {}",
            root.display()
        )));
    }
    dirs.iter()
        .map(|d| {
            Ok(Case {
                name: d.file_name().unwrap().to_string_lossy().into_owned(),
                volume: read_mmv(&d.join("volume.mmv"))?,
                mask: read_mask(&d.join("mask.msk"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<f32>) -> MultiModalVolume {
        let n = data.len();
        MultiModalVolume::new(1, [1, 1, n], [1.0; 3], data).unwrap()
    }

    #[test]
    fn constant_modality_normalizes_to_zero() {
        let v = normalize(&vol(vec![3.0; 8]));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn standardized_data_is_unchanged() {
        let data = vec![-1.0f32, 1.0, -1.0, 1.0];
        let v = normalize(&vol(data.clone()));
        for (a, b) in v.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_support_has_zero_mean_unit_variance() {
        let data: Vec<f32> = (0..64)
            .map(|i| {
                if i % 5 == 0 {
                    0.0
                } else {
                    (i as f32 * 0.37).sin() * 4.0 + 2.0
                }
            })
            .collect();
        let v = normalize(&vol(data.clone()));
        let support: Vec<f64> = v
            .data()
            .iter()
            .zip(&data)
            .filter(|(_, &o)| o != 0.0)
            .map(|(&x, _)| x as f64)
            .collect();
        let n = support.len() as f64;
        let mean = support.iter().sum::<f64>() / n;
        let var = support.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
        // Background stays zero.
        assert!(v.data().iter().zip(&data).all(|(&x, &o)| o != 0.0 || x == 0.0));
    }

    #[test]
    fn split_all_train() {
        let s = split(7, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(s.train.len(), 7);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split(5, [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn zero_modalities_rejected() {
        assert!(MultiModalVolume::new(0, [1, 1, 1], [1.0; 3], vec![]).is_err());
    }
}
