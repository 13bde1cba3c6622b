//! Segmentation-performance and shift-equivalence metrics.
//!
//! Test sets are grouped into subsets, one per raw image, whose members are
//! crops of that image at adjacent window offsets. Equivalence is measured as
//! the mean over subsets of the per-subset variance of IoU (`mvIoU`) and of
//! the predicted defect area (`mvda`); lower is better. Defect area counts
//! only the largest 8-connected foreground component, everything smaller is
//! treated as overkill.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// A single binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn from_bits(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("mask data length {} != {h}x{w}", data.len())));
        }
        Ok(Mask { h, w, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[x * self.w + y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[x * self.w + y] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_all_false(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// Intersection over union of two masks. Both empty counts as a perfect
/// match (1); exactly one empty counts as 0.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<Real> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape("iou: mask shapes differ".into()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as Real / union as Real })
}

/// Area (pixel count) of the largest 8-connected foreground component;
/// 0 for an empty mask.
pub fn largest_cc_area(mask: &Mask) -> usize {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut best = 0usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut area = 0usize;
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            area += 1;
            let (x, y) = (idx / w, idx % w);
            for dx in -1isize..=1 {
                for dy in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= h as isize || ny >= w as isize {
                        continue;
                    }
                    let nidx = nx as usize * w + ny as usize;
                    if mask.data[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        best = best.max(area);
    }
    best
}

/// One prediction/ground-truth pair with the window offset it came from.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub pred: Mask,
    pub gt: Mask,
    pub offset: (usize, usize),
}

/// All samples cropped from one raw image.
#[derive(Debug, Clone)]
pub struct SubsetGroup {
    pub raw_id: String,
    pub samples: Vec<MaskPair>,
}

/// Per-subset means: `(mean IoU, mean largest-component area)`.
pub fn subset_stats(group: &SubsetGroup) -> Result<(Real, Real)> {
    if group.samples.is_empty() {
        return Err(Error::InvalidArgument(format!("subset {} is empty", group.raw_id)));
    }
    let n = group.samples.len() as Real;
    let mut iou_sum = 0.0;
    let mut area_sum = 0.0;
    for s in &group.samples {
        iou_sum += iou(&s.pred, &s.gt)?;
        area_sum += largest_cc_area(&s.pred) as Real;
    }
    Ok((iou_sum / n, area_sum / n))
}

fn unbiased_variance(values: &[Real]) -> Real {
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1.0)
}

fn subset_values<F>(groups: &[SubsetGroup], what: &str, f: F) -> Result<Vec<Vec<Real>>>
where
    F: Fn(&MaskPair) -> Result<Real>,
{
    groups
        .iter()
        .map(|g| {
            if g.samples.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "{what}: subset {} has {} sample(s); variance needs at least 2",
                    g.raw_id,
                    g.samples.len()
                )));
            }
            g.samples.iter().map(&f).collect()
        })
        .collect()
}

/// Mean over subsets of the unbiased variance of per-sample IoU.
pub fn mviou(groups: &[SubsetGroup]) -> Result<Real> {
    let values = subset_values(groups, "mviou", |s| iou(&s.pred, &s.gt))?;
    Ok(values.iter().map(|v| unbiased_variance(v)).sum::<Real>() / values.len() as Real)
}

/// Mean over subsets of the unbiased variance of the predicted defect area
/// (largest connected component).
pub fn mvda(groups: &[SubsetGroup]) -> Result<Real> {
    let values = subset_values(groups, "mvda", |s| Ok(largest_cc_area(&s.pred) as Real))?;
    Ok(values.iter().map(|v| unbiased_variance(v)).sum::<Real>() / values.len() as Real)
}

/// Micro-averaged pixel precision, recall and F1 over aligned mask lists.
pub fn pixel_prf(preds: &[Mask], gts: &[Mask]) -> Result<(Real, Real, Real)> {
    if preds.len() != gts.len() {
        return Err(Error::Shape("pixel_prf: list lengths differ".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        if p.shape() != g.shape() {
            return Err(Error::Shape("pixel_prf: mask shapes differ".into()));
        }
        for (&pv, &gv) in p.data.iter().zip(&g.data) {
            tp += (pv && gv) as usize;
            fp += (pv && !gv) as usize;
            fn_ += (!pv && gv) as usize;
        }
    }
    let precision = if tp + fp == 0 {
        if fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as Real / (tp + fp) as Real
    };
    let recall = if tp + fn_ == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as Real / (tp + fn_) as Real
    };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok((precision, recall, f1))
}

/// All metrics for one method on one test set.
#[derive(Debug, Clone)]
pub struct EquivReport {
    pub miou: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub mviou: Real,
    pub mvda: Real,
    pub per_subset_miou: Vec<Real>,
    pub per_subset_marea: Vec<Real>,
}

/// Computes the full report from grouped predictions. `mIoU` averages
/// per-sample IoU within each subset and then across subsets; precision,
/// recall and F1 are micro-averaged over all pixels of the set.
pub fn evaluate_groups(groups: &[SubsetGroup]) -> Result<EquivReport> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("evaluate_groups: no subsets".into()));
    }
    let mut per_subset_miou = Vec::with_capacity(groups.len());
    let mut per_subset_marea = Vec::with_capacity(groups.len());
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for g in groups {
        let (miou_j, marea_j) = subset_stats(g)?;
        per_subset_miou.push(miou_j);
        per_subset_marea.push(marea_j);
        for s in &g.samples {
            preds.push(s.pred.clone());
            gts.push(s.gt.clone());
        }
    }
    let (precision, recall, f1) = pixel_prf(&preds, &gts)?;
    Ok(EquivReport {
        miou: per_subset_miou.iter().sum::<Real>() / groups.len() as Real,
        precision,
        recall,
        f1,
        mviou: mviou(groups)?,
        mvda: mvda(groups)?,
        per_subset_miou,
        per_subset_marea,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_str(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let mut m = Mask::zeros(h, w);
        for (x, row) in rows.iter().enumerate() {
            for (y, ch) in row.chars().enumerate() {
                m.set(x, y, ch == '1');
            }
        }
        m
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Mask {
        let data = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        Mask::from_bits(h, w, data).unwrap()
    }

    #[test]
    fn iou_edge_cases() {
        let a = mask_from_str(&["110", "000"]);
        let b = mask_from_str(&["011", "000"]);
        assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let empty = Mask::zeros(2, 3);
        assert!((iou(&empty, &empty).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(iou(&a, &empty).unwrap(), 0.0);
        // overlap 1, union 3
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = mask_from_str(&["100", "001"]);
        let d = mask_from_str(&["010", "000"]);
        assert_eq!(iou(&c, &d).unwrap(), 0.0);
    }

    #[test]
    fn iou_counting_example() {
        // overlap 3, union 7
        let a = mask_from_str(&["11111", "00000"]);
        let b = mask_from_str(&["00111", "11000"]);
        let i = iou(&a, &b).unwrap();
        assert!((i - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn largest_cc_basics() {
        assert_eq!(largest_cc_area(&Mask::zeros(4, 4)), 0);
        // components of size 4 and 7
        let m = mask_from_str(&["11000", "11000", "00000", "01110", "01111"]);
        assert_eq!(largest_cc_area(&m), 7);
        // diagonal touch counts as one component under 8-connectivity
        let m = mask_from_str(&["10", "01"]);
        assert_eq!(largest_cc_area(&m), 2);
    }

    #[test]
    fn largest_cc_two_components() {
        let m = mask_from_str(&[
            "110000000",
            "111000000",
            "000000000",
            "000111110",
            "000111100",
        ]);
        assert_eq!(largest_cc_area(&m), 9);
    }

    #[test]
    fn subset_stats_means() {
        let perfect = mask_from_str(&["11", "00"]);
        let group = SubsetGroup {
            raw_id: "r0".into(),
            samples: vec![
                MaskPair { pred: perfect.clone(), gt: perfect.clone(), offset: (0, 0) },
                MaskPair { pred: perfect.clone(), gt: perfect.clone(), offset: (0, 1) },
            ],
        };
        let (miou_j, marea_j) = subset_stats(&group).unwrap();
        assert!((miou_j - 1.0).abs() < 1e-15);
        assert!((marea_j - 2.0).abs() < 1e-15);
        assert!(subset_stats(&SubsetGroup { raw_id: "e".into(), samples: vec![] }).is_err());
    }

    #[test]
    fn subset_stats_mean_of_areas() {
        // predicted areas 44, 55, 49, 63 -> mean 52.75
        let mut samples = Vec::new();
        for area in [44usize, 55, 49, 63] {
            let mut pred = Mask::zeros(16, 16);
            for i in 0..area {
                pred.set(i / 16, i % 16, true);
            }
            samples.push(MaskPair { pred, gt: Mask::zeros(16, 16), offset: (0, 0) });
        }
        let (_, marea) = subset_stats(&SubsetGroup { raw_id: "r".into(), samples }).unwrap();
        assert!((marea - 52.75).abs() < 1e-12);
    }

    #[test]
    fn mviou_two_point_variance() {
        // gt area 5; predictions overlap 2-of-2 and 3-of-3 give IoU 0.4, 0.6
        let gt = mask_from_str(&["11111", "00000"]);
        let pred_a = mask_from_str(&["11000", "00000"]);
        let pred_b = mask_from_str(&["11100", "00000"]);
        let group = SubsetGroup {
            raw_id: "r".into(),
            samples: vec![
                MaskPair { pred: pred_a, gt: gt.clone(), offset: (0, 0) },
                MaskPair { pred: pred_b, gt: gt.clone(), offset: (0, 1) },
            ],
        };
        let v = mviou(&[group]).unwrap();
        assert!((v - 0.02).abs() < 1e-12);
    }

    #[test]
    fn mvda_three_point_variance() {
        // areas 55, 49, 63 -> unbiased variance 148/3 = 49.33..
        let mut samples = Vec::new();
        for area in [55usize, 49, 63] {
            let mut pred = Mask::zeros(16, 16);
            for i in 0..area {
                pred.set(i / 16, i % 16, true);
            }
            samples.push(MaskPair { pred, gt: Mask::zeros(16, 16), offset: (0, 0) });
        }
        let v = mvda(&[SubsetGroup { raw_id: "r".into(), samples }]).unwrap();
        assert!((v - 148.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn mv_metrics_zero_for_constant_predictions() {
        let pred = mask_from_str(&["110", "000"]);
        let gt = mask_from_str(&["100", "000"]);
        let group = SubsetGroup {
            raw_id: "r".into(),
            samples: (0..4)
                .map(|i| MaskPair { pred: pred.clone(), gt: gt.clone(), offset: (0, i) })
                .collect(),
        };
        assert_eq!(mviou(std::slice::from_ref(&group)).unwrap(), 0.0);
        assert_eq!(mvda(std::slice::from_ref(&group)).unwrap(), 0.0);
    }

    #[test]
    fn mv_metrics_reject_singleton_subsets() {
        let m = Mask::zeros(2, 2);
        let group = SubsetGroup {
            raw_id: "r".into(),
            samples: vec![MaskPair { pred: m.clone(), gt: m.clone(), offset: (0, 0) }],
        };
        assert!(mviou(std::slice::from_ref(&group)).is_err());
        assert!(mvda(std::slice::from_ref(&group)).is_err());
    }

    #[test]
    fn mvda_ignores_small_spurious_components() {
        // A 1-pixel blob smaller than the main component must not change
        // the measured area.
        let base = mask_from_str(&["11100000", "11100000", "00000000", "00000000"]);
        let mut with_blob = base.clone();
        with_blob.set(3, 7, true);
        assert_eq!(largest_cc_area(&base), largest_cc_area(&with_blob));
    }

    #[test]
    fn prf_examples() {
        let gt = mask_from_str(&["11000", "00011"]);
        let (p, r, f) = pixel_prf(&[gt.clone()], &[gt.clone()]).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
        let none = Mask::zeros(2, 5);
        let (_, r, _) = pixel_prf(&[none.clone()], &[gt.clone()]).unwrap();
        assert_eq!(r, 0.0);
        // TP=3, FP=1, FN=2
        let gt = mask_from_str(&["11111", "00000"]);
        let pred = mask_from_str(&["11100", "10000"]);
        let (p, r, f) = pixel_prf(&[pred], &[gt]).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        assert!((r - 0.6).abs() < 1e-15);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        // empty vs empty
        let (p, r, f) = pixel_prf(&[none.clone()], &[none]).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    /// Brute-force oracles on random masks: IoU by pixel counting, variance
    /// by direct definition, areas by an independent union-find labelling.
    #[test]
    fn metrics_match_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n_groups = rng.gen_range(1..4);
            let mut groups = Vec::new();
            for gi in 0..n_groups {
                let n = rng.gen_range(2..5);
                let samples = (0..n)
                    .map(|i| MaskPair {
                        pred: random_mask(&mut rng, 16, 16, 0.3),
                        gt: random_mask(&mut rng, 16, 16, 0.3),
                        offset: (0, i),
                    })
                    .collect();
                groups.push(SubsetGroup { raw_id: format!("r{gi}"), samples });
            }

            let mut acc_iou = 0.0;
            let mut acc_area = 0.0;
            for g in &groups {
                let ious: Vec<Real> = g
                    .samples
                    .iter()
                    .map(|s| {
                        let inter = s
                            .pred
                            .bits()
                            .iter()
                            .zip(s.gt.bits())
                            .filter(|(&a, &b)| a && b)
                            .count() as Real;
                        let uni = s
                            .pred
                            .bits()
                            .iter()
                            .zip(s.gt.bits())
                            .filter(|(&a, &b)| a || b)
                            .count() as Real;
                        if uni == 0.0 {
                            1.0
                        } else {
                            inter / uni
                        }
                    })
                    .collect();
                let areas: Vec<Real> =
                    g.samples.iter().map(|s| union_find_largest(&s.pred) as Real).collect();
                let var = |vals: &[Real]| {
                    let m = vals.iter().sum::<Real>() / vals.len() as Real;
                    vals.iter().map(|v| (v - m) * (v - m)).sum::<Real>() / (vals.len() - 1) as Real
                };
                acc_iou += var(&ious);
                acc_area += var(&areas);
            }
            let want_mviou = acc_iou / groups.len() as Real;
            let want_mvda = acc_area / groups.len() as Real;
            assert!((mviou(&groups).unwrap() - want_mviou).abs() <= 1e-12);
            assert!((mvda(&groups).unwrap() - want_mvda).abs() <= 1e-12);
            for g in &groups {
                for s in &g.samples {
                    assert_eq!(largest_cc_area(&s.pred), union_find_largest(&s.pred));
                }
            }
        }
    }

    /// Independent connected-component labelling via union-find.
    fn union_find_largest(mask: &Mask) -> usize {
        let (h, w) = mask.shape();
        let mut parent: Vec<usize> = (0..h * w).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            let mut i = i;
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for x in 0..h {
            for y in 0..w {
                if !mask.at(x, y) {
                    continue;
                }
                for (dx, dy) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= h as isize || ny >= w as isize {
                        continue;
                    }
                    if mask.at(nx as usize, ny as usize) {
                        let a = find(&mut parent, x * w + y);
                        let b = find(&mut parent, nx as usize * w + ny as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut counts = std::collections::HashMap::new();
        for x in 0..h {
            for y in 0..w {
                if mask.at(x, y) {
                    let root = find(&mut parent, x * w + y);
                    *counts.entry(root).or_insert(0usize) += 1;
                }
            }
        }
        counts.values().copied().max().unwrap_or(0)
    }
}
