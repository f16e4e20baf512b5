//! Dice and HD95 over labeled volumes, and the per-case evaluation report.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Case;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Integer labels over a `D×H×W` grid (z-major, then y, then x).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    labels: Vec<u8>,
    extents: [usize; 3],
    classes: usize,
    spacing: [f32; 3],
}

impl SegmentationMask {
    pub fn new(labels: Vec<u8>, extents: [usize; 3], classes: usize) -> Result<Self> {
        if !(1..=256).contains(&classes) {
            return Err(Error::Validation(format!("N_c = {classes} must be in 1..=256")));
        }
        let n: usize = extents.iter().product();
        if labels.len() != n || n == 0 {
            return Err(Error::dim(format!(
                "mask of {extents:?} needs {n} labels, got {}",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::Validation(format!(
                "label {} at voxel index {i} is not below N_c={classes}",
                labels[i]
            )));
        }
        Ok(SegmentationMask {
            labels,
            extents,
            classes,
            spacing: [1.0; 3],
        })
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Per-voxel argmax of `[D, H, W, N_c]` logits; ties go to the lower label.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 4 || s[3] == 0 || s[3] > 256 {
            return Err(Error::dim(format!("from_logits: expected [D, H, W, N_c], got {s:?}")));
        }
        let labels = logits
            .data()
            .chunks_exact(s[3])
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        SegmentationMask::new(labels, [s[0], s[1], s[2]], s[3])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    /// Labels as `usize`, the form the loss ops take.
    pub fn targets(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

fn check_pair(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.extents != b.extents {
        return Err(Error::dim(format!(
            "mask extents differ: {:?} vs {:?}",
            a.extents, b.extents
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for label `class`; 1.0 when both are empty.
pub fn dice_score(pred: &SegmentationMask, gt: &SegmentationMask, class: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Voxels of `class` with a face neighbor of another label or on the volume border.
pub fn boundary(mask: &SegmentationMask, class: u8) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.extents;
    let at = |z: usize, y: usize, x: usize| mask.labels[(z * h + y) * w + x] == class;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Squared distance transform along one line: `out[q] = min_p f[p] + (s·(q−p))²`,
/// via the lower envelope of parabolas. Infinite entries are not sites.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = s * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + s2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + s2 * (p * p) as f64;
                    let cross = (fq - fp) / (2.0 * s2 * (q - p) as f64);
                    if cross <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cross);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = s * (q as f64 - p as f64);
        *o = f[p] + dq * dq;
    }
}

/// Exact squared Euclidean distance (in spacing units) from every voxel to
/// the nearest of `sites`.
pub fn squared_distance_field(extents: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = extents;
    let mut field = vec![f64::INFINITY; d * h * w];
    for &[z, y, x] in sites {
        field[(z * h + y) * w + x] = 0.0;
    }
    let strides = [h * w, w, 1];
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    for axis in (0..3).rev() {
        let len = extents[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for base in 0..field.len() {
            // Visit each line once, from its first element.
            if (base / strides[axis]) % len != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = field[base + i * strides[axis]];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut zs);
            for (i, o) in out.iter().enumerate() {
                field[base + i * strides[axis]] = *o;
            }
        }
    }
    field
}

/// Linear-interpolation percentile (`p` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn directed_distances(from: &[[usize; 3]], to_field: &[f64], extents: [usize; 3]) -> Vec<f64> {
    let [_, h, w] = extents;
    from.iter()
        .map(|&[z, y, x]| to_field[(z * h + y) * w + x].sqrt())
        .collect()
}

fn surface_distances(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
    class: u8,
    spacing: [f64; 3],
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_pair(pred, gt)?;
    let (bp, bg) = (boundary(pred, class), boundary(gt, class));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => Ok(Some((Vec::new(), Vec::new()))),
        (true, false) | (false, true) => Ok(None),
        (false, false) => {
            let fg = squared_distance_field(gt.extents, &bg, spacing);
            let fp = squared_distance_field(pred.extents, &bp, spacing);
            Ok(Some((
                directed_distances(&bp, &fg, pred.extents),
                directed_distances(&bg, &fp, gt.extents),
            )))
        }
    }
}

/// 95th-percentile symmetric surface distance in spacing units. Both empty
/// gives 0; exactly one empty gives `f64::INFINITY` (reported as undefined).
pub fn hd95(pred: &SegmentationMask, gt: &SegmentationMask, class: u8, spacing: [f64; 3]) -> Result<f64> {
    Ok(match surface_distances(pred, gt, class, spacing)? {
        None => f64::INFINITY,
        Some((a, _)) if a.is_empty() => 0.0,
        Some((a, b)) => percentile(&a, 95.0).max(percentile(&b, 95.0)),
    })
}

/// Classic (100th-percentile) Hausdorff distance between the class boundaries.
pub fn hausdorff(pred: &SegmentationMask, gt: &SegmentationMask, class: u8, spacing: [f64; 3]) -> Result<f64> {
    Ok(match surface_distances(pred, gt, class, spacing)? {
        None => f64::INFINITY,
        Some((a, b)) => a.iter().chain(&b).copied().fold(0.0, f64::max),
    })
}

/// One (case, class) row. `hd95` is `None` when exactly one mask is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub class: usize,
    pub dice: f64,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub mean_dice: f64,
    /// Mean over cases where HD95 is defined; `None` if it never is.
    pub mean_hd95: Option<f64>,
    pub undefined_hd95: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cases: usize,
    pub rows: Vec<CaseMetrics>,
    pub classes: Vec<ClassSummary>,
    /// Mean of the per-class mean Dice over foreground classes.
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

pub const SUMMARY_CASE: &str = "mean";

impl Report {
    /// CSV with header `case,class,dice,hd95`: every case row for each class,
    /// followed by that class's `mean` row. Undefined HD95 is written as
    /// `undefined`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["case", "class", "dice", "hd95"])?;
        let hd = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        for s in &self.classes {
            for r in self.rows.iter().filter(|r| r.class == s.class) {
                w.write_record([r.case.clone(), r.class.to_string(), r.dice.to_string(), hd(r.hd95)])?;
            }
            w.write_record([
                SUMMARY_CASE.to_string(),
                s.class.to_string(),
                s.mean_dice.to_string(),
                hd(s.mean_hd95),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Metrics of `preds[i]` against `cases[i].mask` for every foreground class.
pub fn evaluate_predictions(cases: &[Case], preds: &[SegmentationMask]) -> Result<Report> {
    if cases.is_empty() {
        return Err(Error::Validation("evaluate: empty dataset".into()));
    }
    if cases.len() != preds.len() {
        return Err(Error::Contract(format!(
            "evaluate: {} cases but {} predictions",
            cases.len(),
            preds.len()
        )));
    }
    let classes = cases[0].mask.classes();
    let per_case: Vec<Vec<CaseMetrics>> = cases
        .par_iter()
        .zip(preds.par_iter())
        .map(|(case, pred)| {
            let gt = &case.mask;
            if gt.classes() != classes {
                return Err(Error::Validation(format!(
                    "{}: N_c = {} differs from {classes}",
                    case.name,
                    gt.classes()
                )));
            }
            let spacing = gt.spacing().map(f64::from);
            (1..classes)
                .map(|c| {
                    let h = hd95(pred, gt, c as u8, spacing)?;
                    Ok(CaseMetrics {
                        case: case.name.clone(),
                        class: c,
                        dice: dice_score(pred, gt, c as u8)?,
                        hd95: h.is_finite().then_some(h),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CaseMetrics> = per_case.into_iter().flatten().collect();
    let summaries: Vec<ClassSummary> = (1..classes)
        .map(|c| {
            let of = || rows.iter().filter(move |r| r.class == c);
            ClassSummary {
                class: c,
                mean_dice: mean(of().map(|r| r.dice)).unwrap_or(0.0),
                mean_hd95: mean(of().filter_map(|r| r.hd95)),
                undefined_hd95: of().filter(|r| r.hd95.is_none()).count(),
            }
        })
        .collect();
    Ok(Report {
        cases: cases.len(),
        mean_dice: mean(summaries.iter().map(|s| s.mean_dice)).unwrap_or(1.0),
        mean_hd95: mean(summaries.iter().filter_map(|s| s.mean_hd95)),
        classes: summaries,
        rows,
    })
}

/// Argmax predictions of `model` on every case, then [`evaluate_predictions`].
pub fn evaluate(model: &Model, cases: &[Case]) -> Result<Report> {
    let preds = cases
        .par_iter()
        .map(|c| {
            let logits = model.predict(&c.volume)?;
            SegmentationMask::from_logits(&logits)?.with_spacing(c.mask.spacing())
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(cases, &preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(ext: [usize; 3], fg: &[usize]) -> SegmentationMask {
        let mut l = vec![0u8; ext.iter().product()];
        for &i in fg {
            l[i] = 1;
        }
        SegmentationMask::new(l, ext, 2).unwrap()
    }

    #[test]
    fn dice_worked_example() {
        let p = mask([1, 1, 8], &[0, 1]);
        let g = mask([1, 1, 8], &[0, 1, 2, 3]);
        assert!((dice_score(&p, &g, 1).unwrap() - 2.0 * 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_conventions() {
        let e = mask([2, 2, 2], &[]);
        assert_eq!(dice_score(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(hd95(&e, &e, 1, [1.0; 3]).unwrap(), 0.0);
        let f = mask([2, 2, 2], &[0]);
        assert!(hd95(&e, &f, 1, [1.0; 3]).unwrap().is_infinite());
    }

    #[test]
    fn single_voxels_three_apart() {
        let p = mask([1, 1, 8], &[1]);
        let g = mask([1, 1, 8], &[4]);
        assert_eq!(hd95(&p, &g, 1, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&p, &g, 1, [1.0, 1.0, 0.5]).unwrap(), 1.5);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
        assert!((percentile(&[0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn interior_voxel_is_not_boundary() {
        let all: Vec<usize> = (0..27).collect();
        let b = boundary(&mask([3, 3, 3], &all), 1);
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[1, 1, 1]));
    }

    #[test]
    fn extent_mismatch_is_dimension_error() {
        let a = mask([2, 2, 2], &[0]);
        let b = mask([2, 2, 3], &[0]);
        assert!(matches!(dice_score(&a, &b, 1), Err(Error::Dimension(_))));
        assert!(matches!(hd95(&a, &b, 1, [1.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn argmax_prefers_lower_label_on_ties() {
        let t = Tensor::new(vec![1, 1, 2, 3], vec![0.0, 1.0, 1.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(SegmentationMask::from_logits(&t).unwrap().labels(), &[1, 0]);
    }
}
