//! Synthetic two-domain phantom: paired renderings of the same anatomy under
//! two contrast laws, written to disk as an unpaired two-modality dataset.
//!
//! Each case is a small head-like ellipsoid containing one to three lesions
//! built from concentric rings (enhancing core inside necrotic ring inside
//! edema), so the whole-lesion / core / enhancing region hierarchy of the
//! evaluation protocol holds by construction. Domain A renders lesions
//! brighter than tissue; domain B inverts the contrast and applies a gamma
//! curve, emulating a cross-modality shift. The pairing between the two
//! renderings is recorded in a sidecar manifest for test oracles only —
//! training code never reads it.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{BiglError, Result};
use crate::rng::stream;

/// Raw label values written to disk (brain-tumor style encoding).
const RAW_BG: u8 = 0;
const RAW_NCR: u8 = 1;
const RAW_ED: u8 = 2;
const RAW_ET: u8 = 4;

#[derive(Clone, Debug)]
pub struct PhantomSpec {
    /// In-plane side length in pixels (square slices).
    pub image_size: usize,
    /// Number of axial slices per case.
    pub depth: usize,
    pub n_cases: usize,
    pub lesion_count: (usize, usize),
    /// Lesion radius range in pixels.
    pub lesion_radius: (f64, f64),
    /// Gaussian intensity noise level inside the head.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 64,
            depth: 10,
            n_cases: 30,
            lesion_count: (1, 3),
            lesion_radius: (5.0, 9.0),
            noise: 0.03,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(BiglError::IngestError(format!("phantom spec: {msg}")));
        if self.n_cases == 0 {
            return fail("n_cases must be at least 1");
        }
        if self.image_size < 32 {
            return fail("image_size must be at least 32");
        }
        if self.depth < 3 {
            return fail("depth must be at least 3");
        }
        if self.lesion_count.0 == 0 || self.lesion_count.0 > self.lesion_count.1 {
            return fail("lesion count range is empty");
        }
        if self.lesion_radius.0 < 2.0 || self.lesion_radius.0 > self.lesion_radius.1 {
            return fail("lesion radius range is empty or too small");
        }
        if self.lesion_radius.1 > self.image_size as f64 / 4.0 {
            return fail("lesion radius too large for the image size");
        }
        if !(0.0..0.2).contains(&self.noise) {
            return fail("noise must be in [0, 0.2)");
        }
        Ok(())
    }

    /// Voxel spacing (x, y, z) in mm: unit in-plane, doubled through-plane.
    pub fn spacing_xyz(&self) -> (f64, f64, f64) {
        (1.0, 1.0, 2.0)
    }
}

struct Lesion {
    cz: f64,
    cy: f64,
    cx: f64,
    r: f64,
}

/// Paired rendering of one case: (domain A volume, domain B volume, raw
/// labels), each indexed [z, y, x].
pub fn render_case(spec: &PhantomSpec, case_index: usize) -> (Array3<f32>, Array3<f32>, Array3<u8>) {
    let s = spec.image_size;
    let d = spec.depth;
    let mut rng = stream(spec.seed, "phantom-case", case_index as u64);

    // head ellipsoid
    let cy = s as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let cx = s as f64 / 2.0 + rng.gen_range(-2.0..2.0);
    let cz = d as f64 / 2.0;
    let ry = s as f64 * rng.gen_range(0.36..0.42);
    let rx = s as f64 * rng.gen_range(0.33..0.39);
    let rz = d as f64 * rng.gen_range(0.38..0.46);
    let inside_head = |z: usize, y: usize, x: usize| {
        let dz = (z as f64 - cz) / rz;
        let dy = (y as f64 - cy) / ry;
        let dx = (x as f64 - cx) / rx;
        dz * dz + dy * dy + dx * dx <= 1.0
    };

    // lesions strictly inside the head
    let n_lesions = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let r = rng.gen_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        loop {
            let ly = cy + rng.gen_range(-0.6..0.6) * ry;
            let lx = cx + rng.gen_range(-0.6..0.6) * rx;
            let lz = cz + rng.gen_range(-0.5..0.5) * rz;
            let dy = (ly - cy) / ry;
            let dx = (lx - cx) / rx;
            let dz = (lz - cz) / rz;
            if (dz * dz + dy * dy + dx * dx) < 0.55 {
                lesions.push(Lesion { cz: lz, cy: ly, cx: lx, r });
                break;
            }
        }
    }

    let mut labels = Array3::<u8>::zeros((d, s, s));
    for z in 0..d {
        for y in 0..s {
            for x in 0..s {
                if !inside_head(z, y, x) {
                    continue;
                }
                let mut raw = RAW_BG;
                for l in &lesions {
                    // anisotropic distance: through-plane spacing is 2 mm
                    let dist = (((z as f64 - l.cz) * 2.0).powi(2)
                        + (y as f64 - l.cy).powi(2)
                        + (x as f64 - l.cx).powi(2))
                    .sqrt();
                    if dist <= l.r * 0.45 {
                        raw = RAW_ET;
                    } else if dist <= l.r * 0.75 && raw != RAW_ET {
                        raw = RAW_NCR;
                    } else if dist <= l.r && raw == RAW_BG {
                        raw = RAW_ED;
                    }
                }
                labels[[z, y, x]] = raw;
            }
        }
    }

    // per-case contrast jitter
    let gain_a = rng.gen_range(0.95..1.05);
    let gain_b = rng.gen_range(0.95..1.05);
    let law_a = |raw: u8| match raw {
        RAW_ED => 0.62,
        RAW_NCR => 0.78,
        RAW_ET => 0.92,
        _ => 0.35,
    };
    let law_b = |raw: u8| -> f64 {
        let base: f64 = match raw {
            RAW_ED => 0.48,
            RAW_NCR => 0.33,
            RAW_ET => 0.16,
            _ => 0.72,
        };
        base.powf(1.25)
    };

    let mut noise_a = stream(spec.seed, "phantom-noise-a", case_index as u64);
    let mut noise_b = stream(spec.seed, "phantom-noise-b", case_index as u64);
    let normal = Normal::new(0.0f64, spec.noise.max(1e-12)).unwrap();
    let mut vol_a = Array3::<f32>::zeros((d, s, s));
    let mut vol_b = Array3::<f32>::zeros((d, s, s));
    for z in 0..d {
        for y in 0..s {
            for x in 0..s {
                if !inside_head(z, y, x) {
                    continue;
                }
                let raw = labels[[z, y, x]];
                let a = law_a(raw) * gain_a + normal.sample(&mut noise_a);
                let b = law_b(raw) * gain_b + normal.sample(&mut noise_b);
                // keep head voxels strictly positive so support is preserved
                vol_a[[z, y, x]] = a.clamp(0.02, 1.0) as f32;
                vol_b[[z, y, x]] = b.clamp(0.02, 1.0) as f32;
            }
        }
    }
    (vol_a, vol_b, labels)
}

pub fn case_name(index: usize) -> String {
    format!("case_{index:03}")
}

/// Generate the on-disk dataset: `root/<case>/{modA.vol, modB.vol,
/// label.vol}` plus the oracle-only pairing manifest.
pub fn generate_phantom(spec: &PhantomSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(BiglError::Io)?;
    let spacing = spec.spacing_xyz();
    let mut manifest = String::new();
    for i in 0..spec.n_cases {
        let name = case_name(i);
        let dir = out.join(&name);
        std::fs::create_dir_all(&dir).map_err(BiglError::Io)?;
        let (a, b, labels) = render_case(spec, i);
        super::nifti::write_volume_f32(&dir.join("modA.vol"), &a, spacing)?;
        super::nifti::write_volume_f32(&dir.join("modB.vol"), &b, spacing)?;
        super::nifti::write_volume_u8(&dir.join("label.vol"), &labels, spacing)?;
        writeln!(manifest, "{name}\t{name}/modA.vol\t{name}/modB.vol").unwrap();
    }
    std::fs::write(out.join("pairing_manifest"), manifest).map_err(BiglError::Io)?;
    Ok(())
}

/// Parse a pairing manifest (oracle/test use only): rows of
/// (case_id, domain-A path, domain-B path).
pub fn parse_pairing_manifest(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(a), Some(b), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(BiglError::IngestError(format!(
                "pairing manifest line {}: expected 3 tab-separated fields",
                lineno + 1
            )));
        };
        if id.is_empty() || a.is_empty() || b.is_empty() {
            return Err(BiglError::IngestError(format!(
                "pairing manifest line {}: empty field",
                lineno + 1
            )));
        }
        if rows.len() >= 100_000 {
            return Err(BiglError::IngestError("pairing manifest too large".into()));
        }
        rows.push((id.to_string(), a.to_string(), b.to_string()));
    }
    Ok(rows)
}

/// Mean intensity of a volume restricted to voxels with the given raw label.
pub fn mean_where(vol: &Array3<f32>, labels: &Array3<u8>, raw: u8) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, l) in vol.iter().zip(labels.iter()) {
        if *l == raw {
            sum += *v as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Background (non-lesion head tissue) mean: raw label 0 restricted to
/// nonzero intensities.
pub fn head_tissue_mean(vol: &Array3<f32>, labels: &Array3<u8>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, l) in vol.iter().zip(labels.iter()) {
        if *l == 0 && *v != 0.0 {
            sum += *v as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let spec = PhantomSpec::default();
        let (a1, b1, l1) = render_case(&spec, 3);
        let (a2, b2, l2) = render_case(&spec, 3);
        assert!(a1.iter().zip(a2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(b2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(l1, l2);
    }

    #[test]
    fn labels_use_raw_scheme_and_nest() {
        let spec = PhantomSpec::default();
        for case in 0..4 {
            let (_, _, labels) = render_case(&spec, case);
            let mut seen = [false; 5];
            for &l in labels.iter() {
                assert!(matches!(l, 0 | 1 | 2 | 4), "unexpected raw label {l}");
                seen[l.min(4) as usize] = true;
            }
            assert!(seen[0] && seen[1] && seen[2] && seen[4], "all tissue types present");
        }
    }

    #[test]
    fn contrast_inverts_between_domains() {
        let spec = PhantomSpec::default();
        for case in 0..4 {
            let (a, b, labels) = render_case(&spec, case);
            let core_a = mean_where(&a, &labels, RAW_ET);
            let bg_a = head_tissue_mean(&a, &labels);
            let core_b = mean_where(&b, &labels, RAW_ET);
            let bg_b = head_tissue_mean(&b, &labels);
            assert!(core_a > bg_a + 0.2, "domain A core must be bright ({core_a} vs {bg_a})");
            assert!(core_b < bg_b - 0.2, "domain B core must be dark ({core_b} vs {bg_b})");
        }
    }

    #[test]
    fn some_slices_are_empty_and_most_are_not() {
        let spec = PhantomSpec::default();
        let (a, _, _) = render_case(&spec, 0);
        let nonzero_per_slice: Vec<usize> = (0..spec.depth)
            .map(|z| {
                a.index_axis(ndarray::Axis(0), z)
                    .iter()
                    .filter(|&&v| v != 0.0)
                    .count()
            })
            .collect();
        assert!(nonzero_per_slice.iter().filter(|&&n| n > 0).count() >= spec.depth / 2);
        let total = spec.image_size * spec.image_size;
        assert!(
            nonzero_per_slice.iter().any(|&n| n < total / 100),
            "expected at least one (near-)empty slice: {nonzero_per_slice:?}"
        );
    }

    #[test]
    fn dataset_on_disk_is_reproducible() {
        use sha2::{Digest, Sha256};
        let spec = PhantomSpec { n_cases: 2, ..PhantomSpec::default() };
        let hash_of = |dir: &Path| {
            let mut h = Sha256::new();
            let mut entries: Vec<_> = walk(dir);
            entries.sort();
            for e in entries {
                h.update(e.as_bytes());
                h.update(std::fs::read(dir.join(&e)).unwrap());
            }
            format!("{:x}", h.finalize())
        };
        fn walk(dir: &Path) -> Vec<String> {
            let mut out = Vec::new();
            for entry in std::fs::read_dir(dir).unwrap() {
                let entry = entry.unwrap();
                let name = entry.file_name().into_string().unwrap();
                if entry.file_type().unwrap().is_dir() {
                    for sub in walk(&entry.path()) {
                        out.push(format!("{name}/{sub}"));
                    }
                } else {
                    out.push(name);
                }
            }
            out
        }
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_phantom(&spec, d1.path()).unwrap();
        generate_phantom(&spec, d2.path()).unwrap();
        assert_eq!(hash_of(d1.path()), hash_of(d2.path()));
        assert!(d1.path().join("pairing_manifest").exists());
        assert!(d1.path().join("case_000/modA.vol").exists());
    }

    #[test]
    fn manifest_parses_and_rejects_malformed_rows() {
        let good = "case_000\tcase_000/modA.vol\tcase_000/modB.vol\n";
        let rows = parse_pairing_manifest(good).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, "case_000");
        assert!(parse_pairing_manifest("only_two\tfields\n").is_err());
        assert!(parse_pairing_manifest("a\tb\tc\td\n").is_err());
        assert!(parse_pairing_manifest("\t\t\n").is_err());
        assert!(parse_pairing_manifest("").unwrap().is_empty());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = PhantomSpec { n_cases: 0, ..PhantomSpec::default() };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec { image_size: 8, ..PhantomSpec::default() };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec { lesion_radius: (9.0, 5.0), ..PhantomSpec::default() };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec { noise: 0.5, ..PhantomSpec::default() };
        assert!(bad.validate().is_err());
        assert!(PhantomSpec::default().validate().is_ok());
    }
}
