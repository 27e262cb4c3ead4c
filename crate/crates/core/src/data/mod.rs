//! Samples, on-disk datasets, augmentation, subject-wise CV plans and synthetic phantoms.

mod augment;
pub mod image;
mod phantom;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub use augment::{augment_call_count, augment_sample, transform_sample, AugmentConfig};
pub use image::GrayImage;
pub use phantom::gen_phantom_subjects;

/// Side length every sample is resized to.
pub const SAMPLE_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub source: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: BinaryMask, source: impl Into<String>) -> Result<Self> {
        let [n, c, h, w] = image.dims();
        if n != 1 || c != 1 || (h, w) != mask.dims() {
            return Err(Error::shape(
                "Sample",
                format!("image {:?} vs mask {:?}", image.dims(), mask.dims()),
            ));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("sample image values must lie in [0, 1]".into()));
        }
        Ok(Sample {
            image,
            mask,
            source: source.into(),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSet {
    pub id: u32,
    pub samples: Vec<Sample>,
}

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Converts decoded files into a sample at `SAMPLE_SIZE`²: bilinear for the image,
/// nearest for the mask (pixel > 127 is foreground).
pub fn sample_from_images(image: &GrayImage, mask: &GrayImage, source: &str) -> Result<Sample> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::InvalidArgument(format!(
            "{source}: image {}x{} but mask {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let (w, h, s) = (image.width, image.height, SAMPLE_SIZE);
    let plane: Vec<f32> = image.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let bits: Vec<u8> = mask.pixels.iter().map(|&p| u8::from(p > 127)).collect();
    let (plane, bits) = if (w, h) == (s, s) {
        (plane, bits)
    } else {
        (
            image::resize_bilinear(&plane, w, h, s, s),
            image::resize_nearest(&bits, w, h, s, s),
        )
    };
    let plane = plane.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Sample::new(
        Tensor::from_vec([1, 1, s, s], plane)?,
        BinaryMask::new(s, s, bits)?,
        source,
    )
}

fn subject_id(dir: &Path) -> Option<u32> {
    dir.file_name()?.to_str()?.strip_prefix("subject_")?.parse().ok()
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads one `subject_<k>` directory: `images/*.{png,pgm}` paired with `masks/<same name>`.
pub fn load_subject(dir: &Path) -> Result<SubjectSet> {
    let id = subject_id(dir).ok_or_else(|| dataset_err(dir, "not a subject_<k> directory"))?;
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Err(dataset_err(dir, "missing images/ directory"));
    }
    let mut samples = Vec::new();
    for path in list_dir(&images_dir)? {
        if !matches!(image::extension(&path).as_deref(), Some("png" | "pgm")) {
            continue;
        }
        let name = path.file_name().expect("listed file").to_owned();
        let mask_path = dir.join("masks").join(&name);
        if !mask_path.is_file() {
            return Err(dataset_err(&path, "no mask with the same file name"));
        }
        let img = image::read_gray(&path)?;
        let mask = image::read_gray(&mask_path)?;
        let source = format!("subject_{id}/{}", name.to_string_lossy());
        samples.push(sample_from_images(&img, &mask, &source)?);
    }
    if samples.is_empty() {
        return Err(dataset_err(dir, "subject has no images"));
    }
    Ok(SubjectSet { id, samples })
}

/// Loads every `root/subject_<k>` directory, ordered by `k`.
pub fn load_dataset(root: &Path) -> Result<Vec<SubjectSet>> {
    let mut dirs: Vec<(u32, PathBuf)> = list_dir(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| subject_id(&p).map(|id| (id, p)))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(dataset_err(root, "no subject_<k> directories"));
    }
    dirs.iter().map(|(_, p)| load_subject(p)).collect()
}

fn to_gray(values: impl Iterator<Item = f32>, w: usize, h: usize) -> GrayImage {
    let pixels = values.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    GrayImage::new(w, h, pixels).expect("plane dims")
}

/// Writes subjects in the layout [`load_dataset`] reads, as PGM files.
pub fn export_dataset(subjects: &[SubjectSet], root: &Path) -> Result<()> {
    for s in subjects {
        let dir = root.join(format!("subject_{}", s.id));
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for (i, sample) in s.samples.iter().enumerate() {
            let (h, w) = sample.size();
            let name = format!("frame_{i:03}.pgm");
            let img = to_gray(sample.image.data().iter().copied(), w, h);
            let mask = to_gray(sample.mask.bits().iter().map(|&b| b as f32), w, h);
            image::write_pgm(&img, &dir.join("images").join(&name))?;
            image::write_pgm(&mask, &dir.join("masks").join(&name))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub test: u32,
    pub val: u32,
    pub train: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

/// One fold per ordered (test, val) pair of distinct subjects; the rest train.
/// Folds are ordered by test subject, then validation subject, in input order.
pub fn nested_cv_plan(ids: &[u32]) -> Result<SplitPlan> {
    if ids.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "nested CV needs at least 3 subjects, got {}",
            ids.len()
        )));
    }
    for (i, a) in ids.iter().enumerate() {
        if ids[..i].contains(a) {
            return Err(Error::InvalidArgument(format!("duplicate subject id {a}")));
        }
    }
    let mut folds = Vec::with_capacity(ids.len() * (ids.len() - 1));
    for &test in ids {
        for &val in ids.iter().filter(|&&v| v != test) {
            let train = ids.iter().copied().filter(|&i| i != test && i != val).collect();
            folds.push(Fold { test, val, train });
        }
    }
    Ok(SplitPlan { folds })
}
