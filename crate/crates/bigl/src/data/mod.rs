//! Dataset ingestion: case discovery, patient-level splitting, slice
//! extraction/normalization, and the synthetic two-domain phantom.

pub mod nifti;
pub mod phantom;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;

use crate::domain::{remap_labels, Domain, LabelMask, LabelScheme, Slice2D};
use crate::error::{BiglError, Result};
use crate::rng::stream;

/// Fraction of nonzero pixels below which a slice is dropped.
const EMPTY_SLICE_FRACTION: f64 = 0.01;

/// One discovered case directory with validated shape and spacing.
#[derive(Clone, Debug)]
pub struct CaseRecord {
    pub case_id: String,
    pub mod_a: PathBuf,
    pub mod_b: PathBuf,
    pub label: PathBuf,
    /// (x, y, z) mm
    pub spacing_xyz: (f64, f64, f64),
    /// (depth, height, width)
    pub shape: (usize, usize, usize),
}

/// Which modality of a case feeds a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn domain(&self) -> Domain {
        match self {
            Modality::A => Domain::Source,
            Modality::B => Domain::Target,
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            Modality::A => "modA.vol",
            Modality::B => "modB.vol",
        }
    }
}

/// Discover and validate cases under `root/<case>/{modA.vol, modB.vol,
/// label.vol}`, ordered by case id.
pub fn load_cases(root: &Path) -> Result<Vec<CaseRecord>> {
    if !root.is_dir() {
        return Err(BiglError::IngestError(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut ids: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(BiglError::Io)? {
        let entry = entry.map_err(BiglError::Io)?;
        if entry.file_type().map_err(BiglError::Io)?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    let mut cases = Vec::with_capacity(ids.len());
    for id in ids {
        let dir = root.join(&id);
        let mod_a = dir.join("modA.vol");
        let mod_b = dir.join("modB.vol");
        let label = dir.join("label.vol");
        for (path, what) in [(&mod_a, "modA"), (&mod_b, "modB"), (&label, "label")] {
            if !path.is_file() {
                return Err(BiglError::IncompleteCase { case: id.clone(), missing: what.into() });
            }
        }
        let (vol_a, spacing_a) = nifti::read_volume_f32(&mod_a)?;
        let (vol_b, spacing_b) = nifti::read_volume_f32(&mod_b)?;
        let (labels, spacing_l) = nifti::read_volume_labels(&label)?;
        if vol_a.dim() != vol_b.dim() || vol_a.dim() != labels.dim() {
            return Err(BiglError::IngestError(format!(
                "case {id}: volume shapes differ: modA {:?}, modB {:?}, label {:?}",
                vol_a.dim(),
                vol_b.dim(),
                labels.dim()
            )));
        }
        let close = |a: (f64, f64, f64), b: (f64, f64, f64)| {
            (a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6 && (a.2 - b.2).abs() < 1e-6
        };
        if !close(spacing_a, spacing_b) || !close(spacing_a, spacing_l) {
            return Err(BiglError::IngestError(format!(
                "case {id}: spacing differs across files: {spacing_a:?} vs {spacing_b:?} vs {spacing_l:?}"
            )));
        }
        cases.push(CaseRecord {
            case_id: id,
            mod_a,
            mod_b,
            label,
            spacing_xyz: spacing_a,
            shape: vol_a.dim(),
        });
    }
    Ok(cases)
}

/// Deterministic patient-level split. Sizes are floor(ratio·n) for validation
/// and test, with the remainder assigned to training.
pub fn split_cases(
    cases: &[CaseRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<CaseRecord>, Vec<CaseRecord>, Vec<CaseRecord>)> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(BiglError::IngestError(format!("split ratios sum to {sum}, expected 1")));
    }
    if ratios.0 <= 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(BiglError::IngestError("split ratios must be nonnegative".into()));
    }
    let n = cases.len();
    if n < 3 {
        return Err(BiglError::InsufficientCases { needed: 3, found: n });
    }
    let n_val = (ratios.1 * n as f64).floor() as usize;
    let n_test = (ratios.2 * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "split", 0));
    let pick = |idxs: &[usize]| -> Vec<CaseRecord> {
        let mut v: Vec<CaseRecord> = idxs.iter().map(|&i| cases[i].clone()).collect();
        v.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        v
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Area-weighted downsampling/upsampling of an intensity grid. Each output
/// pixel averages the input region it covers, weighted by overlap.
pub fn resize_area(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y0 = i as f64 * sy;
        let y1 = (i as f64 + 1.0) * sy;
        let x0 = j as f64 * sx;
        let x1 = (j as f64 + 1.0) * sx;
        let mut acc = 0.0f64;
        let mut area = 0.0f64;
        let iy0 = y0.floor() as usize;
        let iy1 = (y1.ceil() as usize).min(h);
        let ix0 = x0.floor() as usize;
        let ix1 = (x1.ceil() as usize).min(w);
        for yy in iy0..iy1 {
            let oy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
            for xx in ix0..ix1 {
                let ox = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
                acc += src[[yy, xx]] as f64 * oy * ox;
                area += oy * ox;
            }
        }
        (acc / area) as f32
    })
}

/// Nearest-neighbor resampling for label grids.
pub fn resize_nearest(src: &Array2<i64>, out_h: usize, out_w: usize) -> Array2<i64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let yy = (((i as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let xx = (((j as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        src[[yy, xx]]
    })
}

/// All retained slices of one modality, normalized and resized, with labels
/// attached only in the labeled role.
pub struct SliceBank {
    pub slices: Vec<(Slice2D, Option<LabelMask>)>,
}

impl SliceBank {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Seed-deterministic epoch ordering: same (seed, epoch) gives the same
    /// permutation; different epochs reshuffle the same index multiset.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.slices.len()).collect();
        order.shuffle(&mut stream(seed, "epoch-order", epoch));
        order
    }
}

/// Extract, filter, resize and normalize the axial slices of the given
/// modality across `cases`.
pub fn collect_slices(
    cases: &[CaseRecord],
    modality: Modality,
    labeled: bool,
    scheme: LabelScheme,
    target_size: (usize, usize),
) -> Result<SliceBank> {
    let mut slices = Vec::new();
    for case in cases {
        let path = match modality {
            Modality::A => &case.mod_a,
            Modality::B => &case.mod_b,
        };
        let (vol, spacing) = nifti::read_volume_f32(path)?;
        let labels = if labeled {
            let (lab, _) = nifti::read_volume_labels(&case.label)?;
            if lab.dim() != vol.dim() {
                return Err(BiglError::IngestError(format!(
                    "case {}: label shape {:?} differs from volume {:?}",
                    case.case_id,
                    lab.dim(),
                    vol.dim()
                )));
            }
            Some(lab)
        } else {
            None
        };
        let (d, h, w) = vol.dim();
        // in-plane spacing in (row, col) = (y, x) order, rescaled with the grid
        let row_mm = spacing.1 * h as f64 / target_size.0 as f64;
        let col_mm = spacing.0 * w as f64 / target_size.1 as f64;
        for z in 0..d {
            let plane = vol.index_axis(Axis(0), z).to_owned();
            let nonzero = plane.iter().filter(|&&v| v != 0.0).count();
            if (nonzero as f64) < EMPTY_SLICE_FRACTION * (h * w) as f64 {
                continue;
            }
            let resized = resize_area(&plane, target_size.0, target_size.1);
            let slice = Slice2D::from_unit(
                resized,
                (row_mm, col_mm),
                modality.domain(),
                case.case_id.clone(),
                z,
            )?;
            let mask = match &labels {
                Some(lab) => {
                    let lp = lab.index_axis(Axis(0), z).to_owned();
                    let lr = resize_nearest(&lp, target_size.0, target_size.1);
                    Some(remap_labels(&lr, scheme)?)
                }
                None => None,
            };
            slices.push((slice, mask));
        }
    }
    Ok(SliceBank { slices })
}

/// Ground-truth per-case class volumes for evaluation, resampled to the
/// in-plane target size with empty slices retained (metrics are volumetric).
pub struct EvalCase {
    pub case_id: String,
    /// [z, y, x] class indices
    pub gt_classes: Array3<u8>,
    /// images of the evaluated modality, one per retained z
    pub slices: Vec<Slice2D>,
    /// z indices of `slices` within the full volume
    pub slice_z: Vec<usize>,
    /// (row, col, z) mm at the resampled grid
    pub spacing_rcz: (f64, f64, f64),
}

/// Load one case's evaluation bundle for the given modality.
pub fn load_eval_case(
    case: &CaseRecord,
    modality: Modality,
    scheme: LabelScheme,
    target_size: (usize, usize),
) -> Result<EvalCase> {
    let path = match modality {
        Modality::A => &case.mod_a,
        Modality::B => &case.mod_b,
    };
    let (vol, spacing) = nifti::read_volume_f32(path)?;
    let (lab, _) = nifti::read_volume_labels(&case.label)?;
    if lab.dim() != vol.dim() {
        return Err(BiglError::IngestError(format!(
            "case {}: label shape {:?} differs from volume {:?}",
            case.case_id,
            lab.dim(),
            vol.dim()
        )));
    }
    let (d, h, w) = vol.dim();
    let row_mm = spacing.1 * h as f64 / target_size.0 as f64;
    let col_mm = spacing.0 * w as f64 / target_size.1 as f64;
    let mut gt = Array3::<u8>::zeros((d, target_size.0, target_size.1));
    let mut slices = Vec::new();
    let mut slice_z = Vec::new();
    for z in 0..d {
        let lp = lab.index_axis(Axis(0), z).to_owned();
        let lr = resize_nearest(&lp, target_size.0, target_size.1);
        let mask = remap_labels(&lr, scheme)?;
        gt.index_axis_mut(Axis(0), z).assign(&mask.classes);
        let plane = vol.index_axis(Axis(0), z).to_owned();
        let nonzero = plane.iter().filter(|&&v| v != 0.0).count();
        if (nonzero as f64) < EMPTY_SLICE_FRACTION * (h * w) as f64 {
            continue;
        }
        let resized = resize_area(&plane, target_size.0, target_size.1);
        slices.push(Slice2D::from_unit(
            resized,
            (row_mm, col_mm),
            modality.domain(),
            case.case_id.clone(),
            z,
        )?);
        slice_z.push(z);
    }
    Ok(EvalCase {
        case_id: case.case_id.clone(),
        gt_classes: gt,
        slices,
        slice_z,
        spacing_rcz: (row_mm, col_mm, spacing.2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use phantom::{generate_phantom, PhantomSpec};
    use proptest::prelude::*;

    fn tiny_dataset() -> (tempfile::TempDir, Vec<CaseRecord>) {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { n_cases: 3, ..PhantomSpec::default() };
        generate_phantom(&spec, dir.path()).unwrap();
        let cases = load_cases(dir.path()).unwrap();
        (dir, cases)
    }

    #[test]
    fn load_cases_sorted_and_validated() {
        let (_dir, cases) = tiny_dataset();
        assert_eq!(cases.len(), 3);
        assert_eq!(cases[0].case_id, "case_000");
        assert_eq!(cases[2].case_id, "case_002");
        assert_eq!(cases[0].shape, (10, 64, 64));
        assert_eq!(cases[0].spacing_xyz, (1.0, 1.0, 2.0));
    }

    #[test]
    fn missing_file_is_incomplete_case() {
        let (dir, _) = tiny_dataset();
        std::fs::remove_file(dir.path().join("case_001/label.vol")).unwrap();
        match load_cases(dir.path()) {
            Err(BiglError::IncompleteCase { case, missing }) => {
                assert_eq!(case, "case_001");
                assert_eq!(missing, "label");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_shapes_are_named() {
        let (dir, _) = tiny_dataset();
        let small = Array3::<f32>::zeros((2, 8, 8));
        nifti::write_volume_f32(&dir.path().join("case_000/modB.vol"), &small, (1.0, 1.0, 2.0))
            .unwrap();
        match load_cases(dir.path()) {
            Err(BiglError::IngestError(msg)) => {
                assert!(msg.contains("case_000"), "{msg}");
                assert!(msg.contains("(2, 8, 8)"), "{msg}");
                assert!(msg.contains("(10, 64, 64)"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn fake_cases(n: usize) -> Vec<CaseRecord> {
        (0..n)
            .map(|i| CaseRecord {
                case_id: format!("c{i:04}"),
                mod_a: PathBuf::new(),
                mod_b: PathBuf::new(),
                label: PathBuf::new(),
                spacing_xyz: (1.0, 1.0, 1.0),
                shape: (1, 1, 1),
            })
            .collect()
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let (a, b, c) = split_cases(&fake_cases(10), (0.7, 0.1, 0.2), 11).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        let (a, b, c) = split_cases(&fake_cases(335), (0.7, 0.1, 0.2), 11).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (235, 33, 67));
    }

    #[test]
    fn split_is_deterministic_and_validates() {
        let cases = fake_cases(20);
        let s1 = split_cases(&cases, (0.7, 0.1, 0.2), 5).unwrap();
        let s2 = split_cases(&cases, (0.7, 0.1, 0.2), 5).unwrap();
        let ids = |v: &[CaseRecord]| v.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&s1.0), ids(&s2.0));
        assert_eq!(ids(&s1.2), ids(&s2.2));
        assert!(split_cases(&cases, (0.5, 0.1, 0.2), 5).is_err());
        assert!(matches!(
            split_cases(&fake_cases(2), (0.7, 0.1, 0.2), 5),
            Err(BiglError::InsufficientCases { .. })
        ));
    }

    #[test]
    fn resize_area_identity_and_block_average() {
        let src = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f32);
        let same = resize_area(&src, 4, 4);
        assert!(src.iter().zip(same.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let half = resize_area(&src, 2, 2);
        assert_eq!(half[[0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(half[[1, 1]], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn resize_nearest_picks_center_sample() {
        let src = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as i64);
        let half = resize_nearest(&src, 2, 2);
        // centers at (1, 1), (1, 3), (3, 1), (3, 3)
        assert_eq!(half[[0, 0]], 5);
        assert_eq!(half[[0, 1]], 7);
        assert_eq!(half[[1, 0]], 13);
        assert_eq!(half[[1, 1]], 15);
    }

    #[test]
    fn slice_collection_filters_and_labels() {
        let (_dir, cases) = tiny_dataset();
        let labeled =
            collect_slices(&cases[..1], Modality::A, true, LabelScheme::Brats, (64, 64)).unwrap();
        assert!(!labeled.is_empty());
        assert!(labeled.len() < 10, "empty slices must be dropped");
        for (slice, mask) in &labeled.slices {
            assert_eq!(slice.domain, Domain::Source);
            assert_eq!(slice.pixels.dim(), (64, 64));
            assert!(mask.is_some());
        }
        let unlabeled =
            collect_slices(&cases[..1], Modality::B, false, LabelScheme::Brats, (64, 64)).unwrap();
        assert!(unlabeled.slices.iter().all(|(s, m)| s.domain == Domain::Target && m.is_none()));
    }

    #[test]
    fn epoch_order_contract() {
        let (_dir, cases) = tiny_dataset();
        let bank =
            collect_slices(&cases, Modality::A, false, LabelScheme::Brats, (64, 64)).unwrap();
        let e0a = bank.epoch_order(9, 0);
        let e0b = bank.epoch_order(9, 0);
        let e1 = bank.epoch_order(9, 1);
        assert_eq!(e0a, e0b);
        assert_ne!(e0a, e1);
        let mut s0 = e0a.clone();
        let mut s1 = e1.clone();
        s0.sort();
        s1.sort();
        assert_eq!(s0, s1, "different epochs are permutations of the same set");
    }

    #[test]
    fn eval_case_keeps_volume_geometry() {
        let (_dir, cases) = tiny_dataset();
        let ec = load_eval_case(&cases[0], Modality::B, LabelScheme::Brats, (64, 64)).unwrap();
        assert_eq!(ec.gt_classes.dim(), (10, 64, 64));
        assert_eq!(ec.slices.len(), ec.slice_z.len());
        assert!(ec.slice_z.iter().all(|&z| z < 10));
        assert!(ec.gt_classes.iter().any(|&c| c == 3), "enhancing core present");
        assert_eq!(ec.spacing_rcz, (1.0, 1.0, 2.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn split_partition_properties(n in 3usize..200, seed in 0u64..1000) {
            let cases = fake_cases(n);
            let (tr, va, te) = split_cases(&cases, (0.7, 0.1, 0.2), seed).unwrap();
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            let mut all: Vec<String> = tr.iter().chain(va.iter()).chain(te.iter())
                .map(|c| c.case_id.clone()).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n, "splits must be disjoint and exhaustive");
        }
    }
}
