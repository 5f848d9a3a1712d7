//! Segmentation evaluation: dice, 95th-percentile Hausdorff distance,
//! average surface distance, region composition, and mean±std aggregation.
//!
//! Distances are computed between border-point sets in millimeters using a
//! KD-tree; the directed multisets are pooled symmetrically before taking the
//! percentile (HD95) or mean (ASD).

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::domain::{LabelMask, LabelScheme};
use crate::error::{BiglError, Result};

/// A named evaluation region: the union of one or more label classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub member_classes: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: &str, member_classes: &[u8]) -> Self {
        RegionSpec { name: name.to_string(), member_classes: member_classes.to_vec() }
    }
}

/// Whole tumor, tumor core and enhancing tumor over the remapped classes
/// (1 = necrotic/non-enhancing core, 2 = edema, 3 = enhancing).
pub fn brats_regions() -> Vec<RegionSpec> {
    vec![
        RegionSpec::new("WT", &[1, 2, 3]),
        RegionSpec::new("TC", &[1, 3]),
        RegionSpec::new("ET", &[3]),
    ]
}

/// Four singleton cardiac structures.
pub fn cardiac_regions() -> Vec<RegionSpec> {
    vec![
        RegionSpec::new("AA", &[1]),
        RegionSpec::new("LAC", &[2]),
        RegionSpec::new("LVC", &[3]),
        RegionSpec::new("MYO", &[4]),
    ]
}

pub fn regions_for(scheme: LabelScheme) -> Vec<RegionSpec> {
    match scheme {
        LabelScheme::Brats => brats_regions(),
        LabelScheme::Cardiac => cardiac_regions(),
    }
}

/// Binary mask of one region over a class map.
pub fn region_mask_2d(classes: &ArrayView2<u8>, region: &RegionSpec) -> Array2<bool> {
    classes.mapv(|c| region.member_classes.contains(&c))
}

pub fn region_mask_3d(classes: &ArrayView3<u8>, region: &RegionSpec) -> Array3<bool> {
    classes.mapv(|c| region.member_classes.contains(&c))
}

/// Per-region binary masks of a labeled slice, in region order for the
/// mask's scheme.
pub fn compose_regions(mask: &LabelMask) -> Vec<(RegionSpec, Array2<bool>)> {
    regions_for(mask.scheme)
        .into_iter()
        .map(|r| {
            let m = region_mask_2d(&mask.classes.view(), &r);
            (r, m)
        })
        .collect()
}

/// Dice overlap 2|P∩G| / (|P|+|G|); both masks empty gives 1.0.
pub fn dice_flat(pred: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn dice(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(shape_err("dice", &[pred.dim().0, pred.dim().1], &[gt.dim().0, gt.dim().1]));
    }
    Ok(dice_flat(pred.as_slice().unwrap(), gt.as_slice().unwrap()))
}

pub fn dice_3d(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        let p = pred.dim();
        let g = gt.dim();
        return Err(shape_err("dice", &[p.0, p.1, p.2], &[g.0, g.1, g.2]));
    }
    Ok(dice_flat(pred.as_slice().unwrap(), gt.as_slice().unwrap()))
}

fn shape_err(context: &str, expected: &[usize], got: &[usize]) -> BiglError {
    BiglError::ShapeMismatch {
        context: context.into(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// Border points of a 2D mask: foreground pixels with at least one background
/// 4-neighbor; the image edge counts as background. Points in mm.
fn border_points_2d(mask: &Array2<bool>, spacing: (f64, f64)) -> Vec<[f64; 3]> {
    let (h, w) = mask.dim();
    let mut pts = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] {
                continue;
            }
            let edge = i == 0
                || j == 0
                || i == h - 1
                || j == w - 1
                || !mask[[i - 1, j]]
                || !mask[[i + 1, j]]
                || !mask[[i, j - 1]]
                || !mask[[i, j + 1]];
            if edge {
                pts.push([i as f64 * spacing.0, j as f64 * spacing.1, 0.0]);
            }
        }
    }
    pts
}

/// Border voxels of a 3D mask with a 6-neighborhood; volume faces count as
/// background. Points in mm.
fn border_points_3d(mask: &Array3<bool>, spacing: (f64, f64, f64)) -> Vec<[f64; 3]> {
    let (d, h, w) = mask.dim();
    let mut pts = Vec::new();
    for z in 0..d {
        for i in 0..h {
            for j in 0..w {
                if !mask[[z, i, j]] {
                    continue;
                }
                let edge = z == 0
                    || i == 0
                    || j == 0
                    || z == d - 1
                    || i == h - 1
                    || j == w - 1
                    || !mask[[z - 1, i, j]]
                    || !mask[[z + 1, i, j]]
                    || !mask[[z, i - 1, j]]
                    || !mask[[z, i + 1, j]]
                    || !mask[[z, i, j - 1]]
                    || !mask[[z, i, j + 1]];
                if edge {
                    pts.push([
                        z as f64 * spacing.2,
                        i as f64 * spacing.0,
                        j as f64 * spacing.1,
                    ]);
                }
            }
        }
    }
    pts
}

/// Static 3D KD-tree for nearest-neighbor distance queries.
struct KdTree {
    points: Vec<[f64; 3]>,
    /// node layout: subtree of `idx[lo..hi]` rooted at the median, split on
    /// axis `depth % 3`
    idx: Vec<usize>,
}

impl KdTree {
    fn build(points: Vec<[f64; 3]>) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree { points, idx: Vec::new() };
        Self::build_rec(&tree.points, &mut idx, 0);
        tree.idx = idx;
        tree
    }

    fn build_rec(points: &[[f64; 3]], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).unwrap()
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let (_, hi) = rest.split_at_mut(1);
        Self::build_rec(points, lo, depth + 1);
        Self::build_rec(points, hi, depth + 1);
    }

    /// Distance from `q` to the nearest stored point.
    fn nearest(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.nearest_rec(q, 0, self.idx.len(), 0, &mut best);
        best.sqrt()
    }

    fn nearest_rec(&self, q: &[f64; 3], lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.idx[mid]];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d2 < *best {
            *best = d2;
        }
        let axis = depth % 3;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, near.0, near.1, depth + 1, best);
        if delta * delta < *best {
            self.nearest_rec(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn directed_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let tree = KdTree::build(to.to_vec());
    from.iter().map(|p| tree.nearest(p)).collect()
}

fn undefined(pred_empty: bool, gt_empty: bool) -> BiglError {
    let side = match (pred_empty, gt_empty) {
        (true, true) => "both masks empty",
        (true, false) => "prediction empty",
        (false, true) => "ground truth empty",
        (false, false) => unreachable!(),
    };
    BiglError::UndefinedDistance(side.into())
}

/// Directed border-distance multisets (pred→gt, gt→pred) in mm.
pub fn surface_distances(
    pred: &Array2<bool>,
    gt: &Array2<bool>,
    spacing: (f64, f64),
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.dim() != gt.dim() {
        return Err(shape_err(
            "surface distances",
            &[pred.dim().0, pred.dim().1],
            &[gt.dim().0, gt.dim().1],
        ));
    }
    let pb = border_points_2d(pred, spacing);
    let gb = border_points_2d(gt, spacing);
    if pb.is_empty() || gb.is_empty() {
        return Err(undefined(pb.is_empty(), gb.is_empty()));
    }
    Ok((directed_distances(&pb, &gb), directed_distances(&gb, &pb)))
}

pub fn surface_distances_3d(
    pred: &Array3<bool>,
    gt: &Array3<bool>,
    spacing: (f64, f64, f64),
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.dim() != gt.dim() {
        let p = pred.dim();
        let g = gt.dim();
        return Err(shape_err("surface distances", &[p.0, p.1, p.2], &[g.0, g.1, g.2]));
    }
    let pb = border_points_3d(pred, spacing);
    let gb = border_points_3d(gt, spacing);
    if pb.is_empty() || gb.is_empty() {
        return Err(undefined(pb.is_empty(), gb.is_empty()));
    }
    Ok((directed_distances(&pb, &gb), directed_distances(&gb, &pb)))
}

/// Linear-interpolation percentile of a sorted slice; `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn pooled(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.extend(b);
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    a
}

/// 95th percentile of the pooled symmetric border-distance multiset.
pub fn hd95(pred: &Array2<bool>, gt: &Array2<bool>, spacing: (f64, f64)) -> Result<f64> {
    let (a, b) = surface_distances(pred, gt, spacing)?;
    Ok(percentile(&pooled(a, b), 0.95))
}

pub fn hd95_3d(pred: &Array3<bool>, gt: &Array3<bool>, spacing: (f64, f64, f64)) -> Result<f64> {
    let (a, b) = surface_distances_3d(pred, gt, spacing)?;
    Ok(percentile(&pooled(a, b), 0.95))
}

/// Mean of the pooled symmetric border-distance multiset.
pub fn asd(pred: &Array2<bool>, gt: &Array2<bool>, spacing: (f64, f64)) -> Result<f64> {
    let (a, b) = surface_distances(pred, gt, spacing)?;
    let n = a.len() + b.len();
    Ok((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / n as f64)
}

pub fn asd_3d(pred: &Array3<bool>, gt: &Array3<bool>, spacing: (f64, f64, f64)) -> Result<f64> {
    let (a, b) = surface_distances_3d(pred, gt, spacing)?;
    let n = a.len() + b.len();
    Ok((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / n as f64)
}

/// One case × region row of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub case_id: String,
    pub region: String,
    /// dice in [0, 1]
    pub dsc: f64,
    /// mm; absent when undefined (an empty mask on either side)
    pub hd95: Option<f64>,
    /// mm; absent when undefined
    pub asd: Option<f64>,
}

/// Mean/std summary of one region over the per-case table. Dice is reported
/// in percent; distances in mm over the cases where they are defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd95_mean: Option<f64>,
    pub hd95_std: Option<f64>,
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
    pub n_distance_defined: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regions: Vec<String>,
    pub per_case: Vec<RegionMetrics>,
    pub n_cases: usize,
    /// (case_id, region, reason) rows excluded from distance aggregation
    pub undefined_cases: Vec<(String, String, String)>,
    pub summary: BTreeMap<String, RegionSummary>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// `"80.39$\pm$12.48"`-style two-decimal formatting.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}$\\pm${std:.2}")
}

impl MetricsReport {
    /// Aggregate a per-case table into the report structure.
    pub fn from_rows(regions: &[RegionSpec], mut rows: Vec<RegionMetrics>) -> Self {
        rows.sort_by(|a, b| (a.case_id.clone(), a.region.clone()).cmp(&(b.case_id.clone(), b.region.clone())));
        let mut summary = BTreeMap::new();
        let mut undefined = Vec::new();
        let n_cases = rows
            .iter()
            .map(|r| r.case_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        for region in regions {
            let of_region: Vec<&RegionMetrics> =
                rows.iter().filter(|r| r.region == region.name).collect();
            if of_region.is_empty() {
                continue;
            }
            let dsc: Vec<f64> = of_region.iter().map(|r| r.dsc * 100.0).collect();
            let (dsc_mean, dsc_std) = mean_std(&dsc);
            let hd: Vec<f64> = of_region.iter().filter_map(|r| r.hd95).collect();
            let as_: Vec<f64> = of_region.iter().filter_map(|r| r.asd).collect();
            for r in &of_region {
                if r.hd95.is_none() {
                    undefined.push((
                        r.case_id.clone(),
                        r.region.clone(),
                        "empty mask on one side; surface distance undefined".to_string(),
                    ));
                }
            }
            let (hd95_mean, hd95_std) = if hd.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&hd);
                (Some(m), Some(s))
            };
            let (asd_mean, asd_std) = if as_.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&as_);
                (Some(m), Some(s))
            };
            summary.insert(
                region.name.clone(),
                RegionSummary {
                    dsc_mean,
                    dsc_std,
                    hd95_mean,
                    hd95_std,
                    asd_mean,
                    asd_std,
                    n_distance_defined: hd.len(),
                },
            );
        }
        MetricsReport {
            regions: regions.iter().map(|r| r.name.clone()).collect(),
            per_case: rows,
            n_cases,
            undefined_cases: undefined,
            summary,
        }
    }

    /// The mean±std cell for one region and metric ("dsc", "hd95", "asd");
    /// "N/A" when undefined everywhere.
    pub fn cell(&self, region: &str, metric: &str) -> String {
        let Some(s) = self.summary.get(region) else {
            return "N/A".to_string();
        };
        match metric {
            "dsc" => format_mean_std(s.dsc_mean, s.dsc_std),
            "hd95" => match (s.hd95_mean, s.hd95_std) {
                (Some(m), Some(sd)) => format_mean_std(m, sd),
                _ => "N/A".to_string(),
            },
            "asd" => match (s.asd_mean, s.asd_std) {
                (Some(m), Some(sd)) => format_mean_std(m, sd),
                _ => "N/A".to_string(),
            },
            _ => "N/A".to_string(),
        }
    }
}

/// Metrics of one predicted volume against ground truth over the given
/// regions. Undefined distances become `None` entries.
pub fn volume_metrics(
    case_id: &str,
    pred: &Array3<u8>,
    gt: &Array3<u8>,
    spacing: (f64, f64, f64),
    regions: &[RegionSpec],
) -> Result<Vec<RegionMetrics>> {
    if pred.dim() != gt.dim() {
        let p = pred.dim();
        let g = gt.dim();
        return Err(shape_err("volume metrics", &[p.0, p.1, p.2], &[g.0, g.1, g.2]));
    }
    let mut rows = Vec::new();
    for region in regions {
        let pm = region_mask_3d(&pred.view(), region);
        let gm = region_mask_3d(&gt.view(), region);
        let dsc = dice_3d(&pm, &gm)?;
        let (hd, asd_v) = match surface_distances_3d(&pm, &gm, spacing) {
            Ok((a, b)) => {
                let all = pooled(a, b);
                let n = all.len();
                (
                    Some(percentile(&all, 0.95)),
                    Some(all.iter().sum::<f64>() / n as f64),
                )
            }
            Err(BiglError::UndefinedDistance(_)) => (None, None),
            Err(e) => return Err(e),
        };
        rows.push(RegionMetrics {
            case_id: case_id.to_string(),
            region: region.name.clone(),
            dsc,
            hd95: hd,
            asd: asd_v,
        });
    }
    Ok(rows)
}
