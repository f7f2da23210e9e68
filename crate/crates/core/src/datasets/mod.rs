//! Data on disk: manifests, images, synthetic scenes and checkpoints.

mod checkpoint;
mod image_io;
mod manifest;
mod synthetic;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoredTensor, MAGIC, VERSION};
pub use image_io::{encode_pgm, encode_ppm, read_gray, read_rgb, write_pgm, write_ppm};
pub use manifest::{apportion, split_manifest, Manifest, SampleRecord, Split};
pub use synthetic::{
    generate_synthetic, rasterize_panels, render, sample_scene, synthesize, DistractorKind, Panel, RotRect, Scene,
    StructureKind, SyntheticSceneSpec, MANIFEST_NAME,
};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};

/// Sibling path used while a file is being written.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Write `bytes` to `<path>.partial`, then rename onto `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = partial_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Independent random stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Largest multiple of 32 not above `n` (rounding to nearest), at least 32.
pub fn divisible_extent(n: usize) -> usize {
    ((n + 15) / 32 * 32).max(32)
}

/// One loaded sample: image `[3, H, W]` in `[0, 1]` and optional binary
/// mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.data().iter().any(|&v| v > 0.5))
    }
}

/// Load a record, resampling to extents divisible by 32 when needed.
/// Images are resampled bilinearly, masks by nearest neighbour.
pub fn load_sample(manifest: &Manifest, record: &SampleRecord) -> Result<Sample> {
    let path = manifest.resolve(&record.image);
    let rgb = read_rgb(&path)?;
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let (oh, ow) = (divisible_extent(h), divisible_extent(w));
    let mut planes = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    if (oh, ow) != (h, w) {
        planes = kernels::bilinear_resize(&planes, 3, (h, w), (oh, ow));
    }
    let image = Tensor::new(vec![3, oh, ow], planes)?;
    let mask = match &record.mask {
        Some(m) => {
            let mpath = manifest.resolve(m);
            let gray = read_gray(&mpath)?;
            if (gray.width() as usize, gray.height() as usize) != (w, h) {
                return Err(Error::Data(format!(
                    "{}: mask is {}x{} but image is {w}x{h}",
                    mpath.display(),
                    gray.width(),
                    gray.height()
                )));
            }
            let bits: Vec<f32> = gray.as_raw().iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect();
            let bits = if (oh, ow) != (h, w) { kernels::nearest_resize(&bits, (h, w), (oh, ow)) } else { bits };
            Some(Tensor::new(vec![oh, ow], bits)?)
        }
        None => None,
    };
    Ok(Sample { image, mask })
}

/// Load every record of `split`, or all records when `split` is `None`.
pub fn load_fold(manifest: &Manifest, split: Option<Split>) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .filter(|r| split.is_none() || r.split == split)
        .map(|r| load_sample(manifest, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use image::{GrayImage, Luma, Rgb, RgbImage};

    use super::*;

    fn write_pair(dir: &Path, w: u32, h: u32, mask_value: u8) -> Manifest {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, 255]));
        let mask = GrayImage::from_fn(w, h, |x, _| Luma([if x < w / 2 { mask_value } else { 0 }]));
        write_ppm(&dir.join("a.ppm"), &img).unwrap();
        write_pgm(&dir.join("a.pgm"), &mask).unwrap();
        Manifest::parse("a.ppm\ta.pgm\ttrain\n", dir).unwrap()
    }

    #[test]
    fn extents_round_to_multiples_of_32() {
        assert_eq!(divisible_extent(64), 64);
        assert_eq!(divisible_extent(400), 384);
        assert_eq!(divisible_extent(410), 416);
        assert_eq!(divisible_extent(10), 32);
    }

    #[test]
    fn divisible_tile_loads_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_pair(dir.path(), 64, 64, 255);
        let s = load_sample(&m, &m.records[0]).unwrap();
        assert_eq!(s.image.shape(), &[3, 64, 64]);
        assert_eq!(s.image.data()[5], 5.0 / 255.0);
        assert_eq!(s.image.data()[2 * 4096], 1.0);
        let mask = s.mask.unwrap();
        assert_eq!(mask.shape(), &[64, 64]);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(mask.data().iter().sum::<f32>(), 32.0 * 64.0);
    }

    #[test]
    fn odd_tile_is_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_pair(dir.path(), 400, 72, 255);
        let s = load_sample(&m, &m.records[0]).unwrap();
        assert_eq!(s.image.shape(), &[3, 64, 384]);
        let mask = s.mask.unwrap();
        assert_eq!(mask.shape(), &[64, 384]);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn any_nonzero_mask_value_is_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_pair(dir.path(), 32, 32, 7);
        let s = load_sample(&m, &m.records[0]).unwrap();
        assert!(s.is_positive());
        assert_eq!(s.mask.unwrap().data().iter().sum::<f32>(), 16.0 * 32.0);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_ppm(&dir.path().join("a.ppm"), &RgbImage::new(32, 32)).unwrap();
        write_pgm(&dir.path().join("a.pgm"), &GrayImage::new(16, 32)).unwrap();
        let m = Manifest::parse("a.ppm\ta.pgm\ttrain\n", dir.path()).unwrap();
        assert!(matches!(load_sample(&m, &m.records[0]), Err(Error::Data(_))));
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        use rand::Rng;
        let a: u64 = sample_rng(1, 0).random();
        let b: u64 = sample_rng(1, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, sample_rng(1, 0).random::<u64>());
    }
}
