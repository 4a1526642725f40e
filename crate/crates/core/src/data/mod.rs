//! Annotation ingestion, dataset statistics, image preprocessing and the
//! synthetic scene generator.

pub mod annotations;
pub mod image;
pub mod stats;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub use annotations::{
    default_classes, filter_categories, load_annotations, AnnotationSet, Category, FilterCounts,
    GroundTruthInstance, ImageInfo, FLIR_CLASSES,
};
pub use image::{
    decode_pgm, decode_raw, encode_pgm, encode_raw, hflip_box, letterbox, letterbox_geometry, read_image, GrayImage,
    LetterboxTransform, LETTERBOX_FILL,
};
pub use stats::{
    apportion, dataset_stats, random_split, DatasetStats, Split, SplitAssignment, SplitRow,
    DEFAULT_SPLIT_FRACTIONS, REFERENCE_COUNTS,
};
pub use synth::{gaussian_blur, synth_class_names, synth_dataset, write_synth, Shape, SynthConfig, SynthDataset};

use crate::error::{Error, Result};
use crate::loss::Target;
use crate::tensor::Tensor;

/// Reads one image file.
pub type ImageLoader = fn(&Path) -> Result<GrayImage>;

#[derive(Clone, Debug)]
enum Source {
    Memory(GrayImage),
    File(PathBuf),
}

/// One letterboxed training or evaluation image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: u64,
    /// `[1, 1, S, S]`.
    pub tensor: Tensor<f32>,
    /// Ground truth in letterboxed pixels.
    pub targets: Vec<Target>,
    pub transform: LetterboxTransform,
}

/// Images plus their ground truth, letterboxed on access.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub imgsz: usize,
    image_ids: Vec<u64>,
    sizes: Vec<(usize, usize)>,
    sources: Vec<Source>,
    /// Source-pixel ground truth per image.
    boxes: Vec<Vec<Target>>,
    loader: ImageLoader,
}

impl Dataset {
    fn build(set: &AnnotationSet, imgsz: usize, sources: Vec<Source>, loader: ImageLoader) -> Result<Self> {
        if imgsz == 0 || !imgsz.is_multiple_of(32) {
            return Err(Error::usage(format!(
                "image size {imgsz} is not divisible by 32; try {}",
                imgsz.div_ceil(32).max(1) * 32
            )));
        }
        let mut by_image = set.instances_by_image();
        let boxes = set
            .images
            .iter()
            .map(|info| {
                by_image
                    .remove(&info.id)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(class_id, bbox)| Target { bbox, class_id })
                    .collect()
            })
            .collect();
        Ok(Dataset {
            class_names: set.class_names.clone(),
            imgsz,
            image_ids: set.images.iter().map(|i| i.id).collect(),
            sizes: set.images.iter().map(|i| (i.width as usize, i.height as usize)).collect(),
            sources,
            boxes,
            loader,
        })
    }

    /// In-memory images aligned with `set.images`.
    pub fn from_images(set: &AnnotationSet, images: Vec<GrayImage>, imgsz: usize) -> Result<Self> {
        if images.len() != set.images.len() {
            return Err(Error::validation(format!(
                "{} images for {} annotation entries",
                images.len(),
                set.images.len()
            )));
        }
        for (info, img) in set.images.iter().zip(&images) {
            if (img.width, img.height) != (info.width as usize, info.height as usize) {
                return Err(Error::validation(format!(
                    "image {} is {}x{}, annotations say {}x{}",
                    info.id, img.width, img.height, info.width, info.height
                )));
            }
        }
        Self::build(set, imgsz, images.into_iter().map(Source::Memory).collect(), read_image)
    }

    pub fn from_synth(data: &SynthDataset, imgsz: usize) -> Result<Self> {
        Self::from_images(&data.annotations, data.images.clone(), imgsz)
    }

    /// Images referenced by `set`, resolved against `root` and read lazily
    /// with `loader`.
    pub fn from_files(set: &AnnotationSet, root: &Path, imgsz: usize, loader: ImageLoader) -> Result<Self> {
        let sources = set
            .images
            .iter()
            .map(|i| Source::File(root.join(&i.file_name)))
            .collect();
        Self::build(set, imgsz, sources, loader)
    }

    /// A directory holding `annotations.json`, or the annotation file itself;
    /// image paths are relative to the file's directory.
    pub fn open(path: &Path, imgsz: usize, classes: Option<&[String]>, loader: ImageLoader) -> Result<Self> {
        let file = if path.is_dir() {
            path.join("annotations.json")
        } else {
            path.to_path_buf()
        };
        let set = load_annotations(&file, classes)?;
        let root = file.parent().unwrap_or(Path::new("."));
        Self::from_files(&set, root, imgsz, loader)
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_id(&self, index: usize) -> u64 {
        self.image_ids[index]
    }

    /// Letterbox mapping of image `index`, from its annotated size.
    pub fn transform(&self, index: usize) -> LetterboxTransform {
        let (w, h) = self.sizes[index];
        letterbox_geometry(w, h, self.imgsz).0
    }

    /// Source image `index` at full resolution.
    pub fn image(&self, index: usize) -> Result<GrayImage> {
        match &self.sources[index] {
            Source::Memory(img) => Ok(img.clone()),
            Source::File(p) => (self.loader)(p),
        }
    }

    /// Source-pixel ground truth of image `index`.
    pub fn source_targets(&self, index: usize) -> &[Target] {
        &self.boxes[index]
    }

    /// Letterboxed image `index`, optionally mirrored.
    pub fn sample(&self, index: usize, flip: bool) -> Result<Sample> {
        let img = self.image(index)?;
        if (img.width, img.height) != self.sizes[index] {
            return Err(Error::validation(format!(
                "image {} is {}x{}, annotations say {}x{}",
                self.image_ids[index], img.width, img.height, self.sizes[index].0, self.sizes[index].1
            )));
        }
        let (mut boxed, tf) = letterbox(&img, self.imgsz)?;
        let s = self.imgsz as f32;
        let mut targets: Vec<Target> = self.boxes[index]
            .iter()
            .map(|t| Target {
                bbox: tf.forward(&t.bbox),
                class_id: t.class_id,
            })
            .collect();
        if flip {
            boxed = boxed.hflip();
            for t in targets.iter_mut() {
                t.bbox = hflip_box(&t.bbox, s);
            }
        }
        Ok(Sample {
            image_id: self.image_ids[index],
            tensor: boxed.to_tensor(),
            targets,
            transform: tf,
        })
    }

    /// Stacks samples into an `[N, 1, S, S]` batch.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Result<(Tensor<f32>, Vec<Vec<Target>>)> {
        let s = self.imgsz;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        let mut targets = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let sample = self.sample(i, flips.get(k).copied().unwrap_or(false))?;
            data.extend_from_slice(sample.tensor.data());
            targets.push(sample.targets);
        }
        Ok((Tensor::new(vec![indices.len(), 1, s, s], data)?, targets))
    }
}

/// Joins per-split annotation files into one set. Images are matched by file
/// name; a name present in two splits is an overlap error. Image and
/// annotation ids are renumbered from 0.
pub fn merge_splits(parts: &[(Split, AnnotationSet)]) -> Result<(AnnotationSet, SplitAssignment)> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("merge_splits needs at least one split"))?;
    let class_names = first.1.class_names.clone();
    let mut seen: HashMap<String, Split> = HashMap::new();
    let mut overlap = Vec::new();
    let mut images = Vec::new();
    let mut instances = Vec::new();
    let mut categories: Vec<Category> = Vec::new();
    let mut splits = SplitAssignment::default();
    for (split, set) in parts {
        if set.class_names != class_names {
            return Err(Error::validation(format!(
                "split {} uses classes {:?}, expected {:?}",
                split.name(),
                set.class_names,
                class_names
            )));
        }
        for c in &set.categories {
            if !categories.iter().any(|k| k.id == c.id) {
                categories.push(c.clone());
            }
        }
        let mut remap = HashMap::new();
        for info in &set.images {
            if let Some(prev) = seen.insert(info.file_name.clone(), *split) {
                overlap.push(format!("{} ({} and {})", info.file_name, prev.name(), split.name()));
                continue;
            }
            let id = images.len() as u64;
            remap.insert(info.id, id);
            splits.ids_mut(*split).push(id);
            images.push(ImageInfo { id, ..info.clone() });
        }
        for a in &set.instances {
            if let Some(&image_id) = remap.get(&a.image_id) {
                instances.push(GroundTruthInstance {
                    id: instances.len() as u64,
                    image_id,
                    ..a.clone()
                });
            }
        }
    }
    if !overlap.is_empty() {
        overlap.truncate(10);
        return Err(Error::validation(format!(
            "images present in more than one split: {}",
            overlap.join(", ")
        )));
    }
    Ok((
        AnnotationSet {
            images,
            instances,
            categories,
            class_names,
        },
        splits,
    ))
}
