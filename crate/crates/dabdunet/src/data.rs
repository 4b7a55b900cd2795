//! Synthetic lesion images: smooth background, elliptical blobs at a
//! contrast offset, Gaussian noise, and the exact binary masks.
//!
//! Every sample is a pure function of `(master seed, split, index)`. The
//! background/noise stream and the lesion-placement stream are derived
//! independently, so degenerate specs (zero contrast, zero noise) produce
//! images that carry no trace of the mask.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dtf;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generation parameters of the synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    /// Square image extent; H = W = size.
    pub size: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Intensity offset added inside lesions.
    pub contrast: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 200,
            n_val: 40,
            size: 32,
            blobs_min: 1,
            blobs_max: 3,
            radius_min: 3.0,
            radius_max: 6.0,
            contrast: 0.35,
            noise_sigma: 0.03,
            master_seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        if self.blobs_min > self.blobs_max {
            return Err(Error::Config(format!(
                "blob range [{}, {}] is empty",
                self.blobs_min, self.blobs_max
            )));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config(format!(
                "radius range [{}, {}] invalid",
                self.radius_min, self.radius_max
            )));
        }
        let margin = self.radius_max.ceil() as usize + 1;
        if 2 * margin >= self.size {
            return Err(Error::Config(format!(
                "radius {} exceeds image: ellipses cannot fit inside {}x{}",
                self.radius_max, self.size, self.size
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x5452,
            Split::Val => 0x56414c,
        }
    }
}

/// Per-sample generation record.
#[derive(Clone, Debug, Default)]
pub struct SampleMeta {
    pub blob_count: usize,
    /// `(rx, ry)` of each ellipse.
    pub radii: Vec<(f64, f64)>,
}

/// One image/mask pair. `image: [1,H,W]` in `[0,1]`, `mask: [1,H,W]` with
/// values exactly 0 or 1.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub seed: u64,
    pub meta: Option<SampleMeta>,
}

/// splitmix64; spreads `(master, split, index)` into independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The seed of sample `index` in `split`. Distinct across splits by
/// construction, which keeps train and validation disjoint.
pub fn sample_seed(master: u64, split: Split, index: usize) -> u64 {
    mix(master ^ mix(split.tag()) ^ mix(index as u64))
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ purpose))
}

/// Deterministically generates one sample.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<Sample> {
    spec.validate()?;
    let size = spec.size;
    let seed = sample_seed(spec.master_seed, split, index);
    let mut bg_rng = stream(seed, 0xB6);
    let mut lesion_rng = stream(seed, 0x1E);
    let mut noise_rng = stream(seed, 0xA0);

    // Smooth background: a plateau plus two low-frequency waves.
    let mut image = vec![0.0f64; size * size];
    let wave = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(0.5..1.5) * std::f64::consts::TAU / size as f64,
            rng.gen_range(0.5..1.5) * std::f64::consts::TAU / size as f64,
            rng.gen_range(0.0..std::f64::consts::TAU),
        )
    };
    let (fx1, fy1, p1) = wave(&mut bg_rng);
    let (fx2, fy2, p2) = wave(&mut bg_rng);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            image[y * size + x] = 0.4
                + 0.05 * (fx1 * xf + fy1 * yf + p1).sin()
                + 0.03 * (fx2 * xf + fy2 * yf + p2).cos();
        }
    }

    // Elliptical lesions; centers keep every ellipse fully inside.
    let blob_count = lesion_rng.gen_range(spec.blobs_min..=spec.blobs_max);
    let margin = spec.radius_max.ceil() + 1.0;
    let mut mask = vec![0.0f64; size * size];
    let mut radii = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let rx = lesion_rng.gen_range(spec.radius_min..=spec.radius_max);
        let ry = lesion_rng.gen_range(spec.radius_min..=spec.radius_max);
        let cx = lesion_rng.gen_range(margin..(size as f64 - 1.0 - margin));
        let cy = lesion_rng.gen_range(margin..(size as f64 - 1.0 - margin));
        let theta = lesion_rng.gen_range(0.0..std::f64::consts::PI);
        let (sin_t, cos_t) = theta.sin_cos();
        radii.push((rx, ry));
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = dx * cos_t + dy * sin_t;
                let v = -dx * sin_t + dy * cos_t;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    mask[y * size + x] = 1.0;
                }
            }
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (i, pixel) in image.iter_mut().enumerate() {
        let noise =
            if spec.noise_sigma > 0.0 { spec.noise_sigma * normal.sample(&mut noise_rng) } else { 0.0 };
        *pixel = (*pixel + spec.contrast * mask[i] + noise).clamp(0.0, 1.0);
    }

    Ok(Sample {
        image: Tensor::from_vec(image, &[1, size, size])?,
        mask: Tensor::from_vec(mask, &[1, size, size])?,
        seed,
        meta: Some(SampleMeta { blob_count, radii }),
    })
}

/// An in-memory dataset with its generation spec.
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Generates the full train/val dataset for a spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = (0..spec.n_train)
        .map(|i| generate_sample(spec, Split::Train, i))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..spec.n_val)
        .map(|i| generate_sample(spec, Split::Val, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), train, val })
}

// ── File layout ─────────────────────────────────────────────────────────
//
// data/{train,val}/{index}.img.dtf and {index}.mask.dtf, plus optional
// 8-bit PGM mirrors for eyeballing.

fn sample_paths(dir: &Path, split: Split, index: usize) -> (PathBuf, PathBuf) {
    let base = dir.join(split.dir_name());
    (base.join(format!("{index}.img.dtf")), base.join(format!("{index}.mask.dtf")))
}

/// Writes one sample; with `emit_pgm`, writes `.img.pgm` / `.mask.pgm`
/// mirrors next to the tensors.
pub fn write_sample(dir: &Path, split: Split, index: usize, sample: &Sample, emit_pgm: bool) -> Result<()> {
    let (img_path, mask_path) = sample_paths(dir, split, index);
    fs::create_dir_all(img_path.parent().expect("split dir"))?;
    dtf::write_tensor(&img_path, &sample.image)?;
    dtf::write_tensor(&mask_path, &sample.mask)?;
    if emit_pgm {
        let size = sample.image.shape()[2];
        write_pgm(&img_path.with_extension("pgm"), sample.image.data(), size, sample.image.shape()[1])?;
        write_pgm(&mask_path.with_extension("pgm"), sample.mask.data(), size, sample.mask.shape()[1])?;
    }
    Ok(())
}

/// Writes a whole dataset under `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, emit_pgm: bool) -> Result<()> {
    for (i, s) in dataset.train.iter().enumerate() {
        write_sample(dir, Split::Train, i, s, emit_pgm)?;
    }
    for (i, s) in dataset.val.iter().enumerate() {
        write_sample(dir, Split::Val, i, s, emit_pgm)?;
    }
    Ok(())
}

/// Reads one split back by probing consecutive indices from 0. A sample
/// whose image exists but whose mask is missing is an error.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for index in 0.. {
        let (img_path, mask_path) = sample_paths(dir, split, index);
        if !img_path.exists() {
            break;
        }
        if !mask_path.exists() {
            return Err(Error::Config(format!("{} exists but {} is missing", img_path.display(), mask_path.display())));
        }
        let image = dtf::read_tensor(&img_path)?;
        let mask = dtf::read_tensor(&mask_path)?;
        if image.shape() != mask.shape() || image.shape().len() != 3 {
            return Err(Error::shape(
                "read_split",
                format!("sample {index}: image {:?} vs mask {:?}", image.shape(), mask.shape()),
            ));
        }
        out.push(Sample { image, mask, seed: 0, meta: None });
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no samples found under {}",
            dir.join(split.dir_name()).display()
        )));
    }
    Ok(out)
}

/// Writes an 8-bit binary PGM. Values are clamped to `[0,1]` and scaled to
/// 0..=255. The header is exactly `P5\n{W} {H}\n255\n`.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(values.len(), width * height, "pixel count mismatch");
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> =
        values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    file.write_all(&bytes)?;
    Ok(())
}

/// Renders the prediction boundary onto the image: mask pixels adjacent to
/// background (4-neighborhood, or touching the border) are painted white.
pub fn overlay(image: &Tensor, mask: &Tensor) -> Vec<f64> {
    let h = image.shape()[1];
    let w = image.shape()[2];
    let m = mask.data();
    let mut out = image.data().to_vec();
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            m[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] == 1.0 {
                let (xi, yi) = (x as isize, y as isize);
                let edge = at(xi - 1, yi) == 0.0
                    || at(xi + 1, yi) == 0.0
                    || at(xi, yi - 1) == 0.0
                    || at(xi, yi + 1) == 0.0;
                if edge {
                    out[y * w + x] = 1.0;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_circle_mask_area_within_analytic_bounds() {
        // radius fixed at 4: rasterized area must sit within 30% of pi*r^2
        let spec = DatasetSpec {
            blobs_min: 1,
            blobs_max: 1,
            radius_min: 4.0,
            radius_max: 4.0,
            ..DatasetSpec::default()
        };
        let expected = std::f64::consts::PI * 16.0;
        for i in 0..25 {
            let s = generate_sample(&spec, Split::Train, i).unwrap();
            let area: f64 = s.mask.data().iter().sum();
            assert!(
                area >= 0.7 * expected && area <= 1.3 * expected,
                "sample {i}: area {area}, expected about {expected}"
            );
            let meta = s.meta.unwrap();
            assert_eq!(meta.blob_count, 1);
            assert_eq!(meta.radii, vec![(4.0, 4.0)]);
        }
    }

    #[test]
    fn degenerate_spec_leaves_no_mask_signal_in_image() {
        // contrast 0, noise 0: the image is pure background, so changing
        // only the lesion geometry must not change a single pixel.
        let base = DatasetSpec {
            contrast: 0.0,
            noise_sigma: 0.0,
            blobs_min: 1,
            blobs_max: 1,
            ..DatasetSpec::default()
        };
        let wide = DatasetSpec { blobs_min: 3, blobs_max: 3, radius_min: 5.0, radius_max: 6.0, ..base.clone() };
        for i in 0..5 {
            let a = generate_sample(&base, Split::Train, i).unwrap();
            let b = generate_sample(&wide, Split::Train, i).unwrap();
            assert!(crate::tensor::bit_identical(&a.image, &b.image));
            assert!(!crate::tensor::bit_identical(&a.mask, &b.mask));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::default();
        let a = generate_sample(&spec, Split::Val, 3).unwrap();
        let b = generate_sample(&spec, Split::Val, 3).unwrap();
        assert!(crate::tensor::bit_identical(&a.image, &b.image));
        assert!(crate::tensor::bit_identical(&a.mask, &b.mask));
        assert_eq!(a.seed, b.seed);
    }

    #[test]
    fn splits_never_share_seeds() {
        let spec = DatasetSpec::default();
        let train: Vec<u64> =
            (0..spec.n_train).map(|i| sample_seed(spec.master_seed, Split::Train, i)).collect();
        let val: Vec<u64> =
            (0..spec.n_val).map(|i| sample_seed(spec.master_seed, Split::Val, i)).collect();
        for t in &train {
            assert!(!val.contains(t));
        }
    }

    #[test]
    fn oversized_radius_is_a_spec_error() {
        let spec = DatasetSpec { radius_min: 14.0, radius_max: 20.0, ..DatasetSpec::default() };
        assert!(generate_sample(&spec, Split::Train, 0).is_err());
    }

    #[test]
    fn masks_are_binary_and_images_bounded() {
        let spec = DatasetSpec::default();
        for i in 0..10 {
            let s = generate_sample(&spec, Split::Train, i).unwrap();
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { n_train: 3, n_val: 2, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec).unwrap();
        write_dataset(dir.path(), &ds, false).unwrap();
        let train = read_split(dir.path(), Split::Train).unwrap();
        let val = read_split(dir.path(), Split::Val).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(val.len(), 2);
        for (a, b) in ds.train.iter().zip(&train) {
            assert!(crate::tensor::bit_identical(&a.image, &b.image));
            assert!(crate::tensor::bit_identical(&a.mask, &b.mask));
        }
    }

    #[test]
    fn pgm_header_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n255\n".len() + 4);
        assert_eq!(&bytes[bytes.len() - 4..], &[0u8, 128, 255, 64]);
    }

    #[test]
    fn truncated_sample_file_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { n_train: 1, n_val: 1, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec).unwrap();
        write_dataset(dir.path(), &ds, false).unwrap();
        let img = dir.path().join("train/0.img.dtf");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_split(dir.path(), Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn overlay_marks_boundary_pixels() {
        // 4x4 with a 2x2 block: every block pixel borders background
        let image = Tensor::from_vec(vec![0.2; 16], &[1, 4, 4]).unwrap();
        let mut m = vec![0.0; 16];
        m[5] = 1.0;
        m[6] = 1.0;
        m[9] = 1.0;
        m[10] = 1.0;
        let mask = Tensor::from_vec(m, &[1, 4, 4]).unwrap();
        let o = overlay(&image, &mask);
        assert_eq!(o[5], 1.0);
        assert_eq!(o[0], 0.2);
    }
}
