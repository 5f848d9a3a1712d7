//! Volumetric evaluation of a trained segmentation backbone: per-slice
//! prediction, stacking into per-case volumes, metric aggregation across a
//! split, and qualitative overlay images.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::data::{load_eval_case, CaseRecord, EvalCase, Modality};
use crate::domain::LabelScheme;
use crate::error::{BiglError, Result};
use crate::metrics::{volume_metrics, MetricsReport, RegionSpec};
use crate::segnet::{forward_slice, SegNet};

/// Predict a class volume for one case by segmenting each retained slice
/// and stacking at its z index; dropped (near-empty) slices stay background.
pub fn predict_volume(net: &SegNet<f32>, case: &EvalCase) -> Result<Array3<u8>> {
    let mut pred = Array3::<u8>::zeros(case.gt_classes.dim());
    for (slice, &z) in case.slices.iter().zip(&case.slice_z) {
        let (logits, _, _) = forward_slice(net, slice)?;
        let (c, h, w) = logits.dim();
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[[0, i, j]];
                for k in 1..c {
                    let v = logits[[k, i, j]];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                pred[[z, i, j]] = best as u8;
            }
        }
    }
    Ok(pred)
}

/// Evaluate a backbone over every case of a split, aggregating per-case
/// region metrics into a report (cases sorted by id for deterministic
/// aggregation).
pub fn evaluate_split(
    net: &SegNet<f32>,
    cases: &[CaseRecord],
    modality: Modality,
    scheme: LabelScheme,
    regions: &[RegionSpec],
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(BiglError::InsufficientCases { needed: 1, found: 0 });
    }
    let mut rows = Vec::new();
    for case in cases {
        let ec = load_eval_case(case, modality, scheme, net.image_size)?;
        let pred = predict_volume(net, &ec)?;
        rows.extend(volume_metrics(&ec.case_id, &pred, &ec.gt_classes, ec.spacing_rcz, regions)?);
    }
    Ok(MetricsReport::from_rows(regions, rows))
}

/// Evaluation harness self-test: score the ground truth against itself.
/// Every dice lands at 100 and every defined distance at 0.
pub fn self_test_split(
    cases: &[CaseRecord],
    modality: Modality,
    scheme: LabelScheme,
    regions: &[RegionSpec],
    image_size: (usize, usize),
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(BiglError::InsufficientCases { needed: 1, found: 0 });
    }
    let mut rows = Vec::new();
    for case in cases {
        let ec = load_eval_case(case, modality, scheme, image_size)?;
        rows.extend(volume_metrics(
            &ec.case_id,
            &ec.gt_classes,
            &ec.gt_classes,
            ec.spacing_rcz,
            regions,
        )?);
    }
    Ok(MetricsReport::from_rows(regions, rows))
}

/// Fixed qualitative palette: class index -> RGB.
fn class_color(class: u8) -> [u8; 3] {
    match class {
        1 => [220, 60, 60],   // core
        2 => [70, 200, 90],   // surrounding
        3 => [250, 220, 60],  // enhancing
        4 => [80, 120, 240],
        _ => [200, 80, 220],
    }
}

/// Write one overlay PNG per case: the middle retained slice in grayscale
/// with the predicted classes alpha-blended on top. Returns the written
/// paths (cases with no retained slices are skipped).
pub fn write_overlays(
    net: &SegNet<f32>,
    cases: &[CaseRecord],
    modality: Modality,
    scheme: LabelScheme,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(BiglError::Io)?;
    let mut paths = Vec::new();
    for case in cases {
        let ec = load_eval_case(case, modality, scheme, net.image_size)?;
        if ec.slices.is_empty() {
            continue;
        }
        let mid = ec.slices.len() / 2;
        let slice = &ec.slices[mid];
        let z = ec.slice_z[mid];
        let pred = predict_volume(net, &ec)?;
        let (h, w) = (slice.unit.nrows(), slice.unit.ncols());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let g = (slice.unit[[i, j]].clamp(0.0, 1.0) * 255.0) as u8;
                let mut px = [g, g, g];
                let class = pred[[z, i, j]];
                if class > 0 {
                    let c = class_color(class);
                    for k in 0..3 {
                        px[k] = ((px[k] as u16 + c[k] as u16) / 2) as u8;
                    }
                }
                img.put_pixel(j as u32, i as u32, image::Rgb(px));
            }
        }
        let path = out_dir.join(format!("{}.png", ec.case_id));
        img.save(&path)
            .map_err(|e| BiglError::IngestError(format!("overlay {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cases;
    use crate::data::phantom::{generate_phantom, PhantomSpec};
    use crate::metrics::regions_for;

    fn tiny_phantom(dir: &Path, n_cases: usize, seed: u64) -> Vec<CaseRecord> {
        let spec = PhantomSpec {
            image_size: 32,
            depth: 4,
            n_cases,
            seed,
            lesion_radius: (3.0, 6.0),
            ..PhantomSpec::default()
        };
        generate_phantom(&spec, dir).unwrap();
        load_cases(dir).unwrap()
    }

    fn tiny_net(seed: u64) -> SegNet<f32> {
        SegNet::init(4, 2, (16, 16), &mut crate::rng::stream(seed, "init-segnet", 0))
    }

    #[test]
    fn self_test_scores_are_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let cases = tiny_phantom(dir.path(), 2, 41);
        let regions = regions_for(LabelScheme::Brats);
        let report =
            self_test_split(&cases, Modality::A, LabelScheme::Brats, &regions, (16, 16)).unwrap();
        assert_eq!(report.n_cases, 2);
        for region in &report.regions {
            assert_eq!(report.cell(region, "dsc"), "100.00$\\pm$0.00");
            assert_eq!(report.cell(region, "hd95"), "0.00$\\pm$0.00");
            assert_eq!(report.cell(region, "asd"), "0.00$\\pm$0.00");
        }
        assert!(report.undefined_cases.is_empty());
    }

    #[test]
    fn predict_volume_covers_retained_slices_only() {
        let dir = tempfile::tempdir().unwrap();
        let cases = tiny_phantom(dir.path(), 1, 42);
        let ec = load_eval_case(&cases[0], Modality::B, LabelScheme::Brats, (16, 16)).unwrap();
        let net = tiny_net(5);
        let pred = predict_volume(&net, &ec).unwrap();
        assert_eq!(pred.dim(), ec.gt_classes.dim());
        let retained: std::collections::BTreeSet<usize> = ec.slice_z.iter().copied().collect();
        for z in 0..pred.dim().0 {
            if !retained.contains(&z) {
                assert!(
                    pred.index_axis(ndarray::Axis(0), z).iter().all(|&c| c == 0),
                    "dropped slices must stay background"
                );
            }
        }
    }

    #[test]
    fn evaluate_split_aggregates_every_case_and_region() {
        let dir = tempfile::tempdir().unwrap();
        let cases = tiny_phantom(dir.path(), 3, 43);
        let net = tiny_net(6);
        let regions = regions_for(LabelScheme::Brats);
        let report =
            evaluate_split(&net, &cases, Modality::B, LabelScheme::Brats, &regions).unwrap();
        assert_eq!(report.n_cases, 3);
        assert_eq!(report.per_case.len(), 3 * regions.len());
        assert_eq!(report.regions, vec!["WT", "TC", "ET"]);
        assert!(matches!(
            evaluate_split(&net, &[], Modality::B, LabelScheme::Brats, &regions),
            Err(BiglError::InsufficientCases { .. })
        ));
    }

    #[test]
    fn overlays_are_written_and_decodable() {
        let dir = tempfile::tempdir().unwrap();
        let cases = tiny_phantom(dir.path(), 2, 44);
        let net = tiny_net(7);
        let out = dir.path().join("overlays");
        let paths = write_overlays(&net, &cases, Modality::B, LabelScheme::Brats, &out).unwrap();
        assert_eq!(paths.len(), 2);
        for p in &paths {
            let img = image::open(p).unwrap();
            assert_eq!(img.width(), 16);
            assert_eq!(img.height(), 16);
        }
    }
}
