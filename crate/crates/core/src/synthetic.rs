//! Small procedurally drawn corpora for smoke runs, tests and benchmarks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetManifest, LesionType, ManifestEntry};
use crate::error::Result;
use crate::image::{ImageTensor, ValueRange};
use crate::losses::DomainTag;

/// A dark blotch on a skin-toned background; covers well over a quarter of the frame.
pub fn lesion_image(size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    let skin = [
        rng.random_range(0.75..0.9),
        rng.random_range(0.55..0.7),
        rng.random_range(0.45..0.6),
    ];
    let lesion = [
        rng.random_range(0.2..0.35),
        rng.random_range(0.1..0.2),
        rng.random_range(0.05..0.15),
    ];
    let cx = size as f32 * rng.random_range(0.4..0.6);
    let cy = size as f32 * rng.random_range(0.4..0.6);
    let radius = size as f32 * rng.random_range(0.33..0.4);
    let wobble: f32 = rng.random_range(0.05..0.15);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let angle = dy.atan2(dx);
            let r = radius * (1.0 + wobble * (5.0 * angle + phase).sin());
            let inside = (dx * dx + dy * dy).sqrt() < r;
            let noise: f32 = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                let base = if inside { lesion[c] } else { skin[c] };
                data[c * size * size + y * size + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(3, size, size, data, ValueRange::Raw01)
}

/// Radial petals in a saturated colour over a green background.
pub fn flower_image(size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    let petal = [
        rng.random_range(0.7..1.0),
        rng.random_range(0.1..0.6),
        rng.random_range(0.3..0.9),
    ];
    let leaf = [
        rng.random_range(0.1..0.3),
        rng.random_range(0.4..0.6),
        rng.random_range(0.1..0.3),
    ];
    let petals = rng.random_range(5..9) as f32;
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let c = size as f32 / 2.0;
    let radius = size as f32 * 0.45;
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - c, y as f32 - c);
            let d = (dx * dx + dy * dy).sqrt() / radius;
            let shape = 0.5 + 0.5 * (petals * dy.atan2(dx) + phase).cos();
            let colour = if d < 0.15 {
                [0.95, 0.85, 0.2]
            } else if d < shape {
                petal
            } else {
                leaf
            };
            for ch in 0..3 {
                data[ch * size * size + y * size + x] = colour[ch];
            }
        }
    }
    ImageTensor::new(3, size, size, data, ValueRange::Raw01)
}

/// Writes `n_lesions` melanoma-like and `n_flowers` flower-like PNGs under
/// `dir/melanoma` and `dir/flower` and returns a manifest labelling every
/// lesion as `lesion_type`.
pub fn write_corpus(
    dir: &Path,
    n_lesions: usize,
    n_flowers: usize,
    size: usize,
    lesion_type: LesionType,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_lesions + n_flowers);
    let (mdir, fdir) = (dir.join("melanoma"), dir.join("flower"));
    std::fs::create_dir_all(&mdir)?;
    std::fs::create_dir_all(&fdir)?;
    for i in 0..n_lesions {
        let path = mdir.join(format!("lesion_{i:03}.png"));
        lesion_image(size, &mut rng)?.save_png(&path)?;
        entries.push(ManifestEntry {
            path,
            domain: DomainTag::Melanoma,
            lesion_type,
            coverage: None,
        });
    }
    for i in 0..n_flowers {
        let path = fdir.join(format!("flower_{i:03}.png"));
        flower_image(size, &mut rng)?.save_png(&path)?;
        entries.push(ManifestEntry {
            path,
            domain: DomainTag::Flower,
            lesion_type: LesionType::NotApplicable,
            coverage: None,
        });
    }
    DatasetManifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{classify_lesion_type, estimate_lesion_coverage};

    #[test]
    fn lesions_classify_as_type_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let img = lesion_image(64, &mut rng).unwrap();
            let cov = estimate_lesion_coverage(&img).unwrap();
            assert_eq!(classify_lesion_type(cov).unwrap(), LesionType::I, "coverage {cov}");
        }
    }

    #[test]
    fn corpus_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(dir.path(), 3, 2, 16, LesionType::I, 0).unwrap();
        assert_eq!(m.count(DomainTag::Melanoma, Some(LesionType::I)), 3);
        assert_eq!(m.count(DomainTag::Flower, None), 2);
        assert!(m.entries.iter().all(|e| e.path.is_file()));
    }
}
