//! COCO-style annotation files, as shipped with FLIR ADAS. The schema is
//! documented in `docs/annotations.md`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// The nine thermal categories used for training and evaluation.
pub const FLIR_CLASSES: [&str; 9] = [
    "person", "bike", "car", "motor", "bus", "truck", "light", "hydrant", "sign",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawFile {
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

/// One annotated object.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Index into the active class list; `None` flags a category outside it.
    pub class_id: Option<usize>,
    /// COCO `[x, y, width, height]` in source pixels, kept verbatim.
    pub xywh: [f32; 4],
}

impl GroundTruthInstance {
    pub fn bbox(&self) -> BBox {
        let [x, y, w, h] = self.xywh;
        BBox::from_xywh(x, y, w, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub instances: Vec<GroundTruthInstance>,
    pub categories: Vec<Category>,
    /// Active class list; `class_id` values index into it.
    pub class_names: Vec<String>,
}

/// Instance and image counts after [`filter_categories`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FilterCounts {
    pub images: usize,
    pub images_with_instances: usize,
    pub instances: usize,
    pub removed_instances: usize,
}

/// The nine thermal classes when the file defines them all, otherwise every
/// category in ascending id order.
pub fn default_classes(categories: &[Category]) -> Vec<String> {
    let names: HashSet<&str> = categories.iter().map(|c| c.name.as_str()).collect();
    if FLIR_CLASSES.iter().all(|c| names.contains(c)) {
        FLIR_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        let mut cats: Vec<&Category> = categories.iter().collect();
        cats.sort_by_key(|c| c.id);
        cats.iter().map(|c| c.name.clone()).collect()
    }
}

impl AnnotationSet {
    /// Parses COCO JSON. `classes` selects the active class list; `None`
    /// applies [`default_classes`].
    pub fn from_json(text: &str, path: &Path, classes: Option<&[String]>) -> Result<Self> {
        let raw: RawFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let class_names = match classes {
            Some(c) => c.to_vec(),
            None => default_classes(&raw.categories),
        };
        let by_id: HashMap<u64, &str> = raw.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        let instances = raw
            .annotations
            .iter()
            .map(|a| GroundTruthInstance {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                class_id: by_id
                    .get(&a.category_id)
                    .and_then(|name| class_names.iter().position(|c| c == name)),
                xywh: a.bbox,
            })
            .collect();
        let set = AnnotationSet {
            images: raw.images,
            instances,
            categories: raw.categories,
            class_names,
        };
        set.validate(path)?;
        Ok(set)
    }

    /// Checks references, ids and box extents.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let fail = |what: &str, ids: Vec<u64>| -> Result<()> {
            if ids.is_empty() {
                return Ok(());
            }
            let shown: Vec<String> = ids.iter().take(10).map(u64::to_string).collect();
            let more = if ids.len() > 10 {
                format!(" and {} more", ids.len() - 10)
            } else {
                String::new()
            };
            Err(Error::validation(format!(
                "{}: {what}: {}{more}",
                path.display(),
                shown.join(", ")
            )))
        };
        let mut seen = HashSet::new();
        fail(
            "duplicate image ids",
            self.images.iter().filter(|i| !seen.insert(i.id)).map(|i| i.id).collect(),
        )?;
        fail(
            "images with zero width or height",
            self.images
                .iter()
                .filter(|i| i.width == 0 || i.height == 0)
                .map(|i| i.id)
                .collect(),
        )?;
        let images: HashSet<u64> = self.images.iter().map(|i| i.id).collect();
        let cats: HashSet<u64> = self.categories.iter().map(|c| c.id).collect();
        fail(
            "annotations referencing missing images",
            self.instances
                .iter()
                .filter(|a| !images.contains(&a.image_id))
                .map(|a| a.id)
                .collect(),
        )?;
        fail(
            "annotations referencing missing categories",
            self.instances
                .iter()
                .filter(|a| !cats.contains(&a.category_id))
                .map(|a| a.id)
                .collect(),
        )?;
        fail(
            "annotations with non-positive width or height",
            self.instances
                .iter()
                .filter(|a| !(a.xywh[2] > 0.0 && a.xywh[3] > 0.0))
                .map(|a| a.id)
                .collect(),
        )?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let raw = RawFile {
            images: self.images.clone(),
            annotations: self
                .instances
                .iter()
                .map(|a| RawAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: a.xywh,
                    area: None,
                    iscrowd: None,
                })
                .collect(),
            categories: self.categories.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("annotation set serialises")
    }

    /// Instances of each image, in annotation order, clamped to the image and
    /// restricted to the active classes.
    pub fn instances_by_image(&self) -> HashMap<u64, Vec<(usize, BBox)>> {
        let sizes: HashMap<u64, (f32, f32)> = self
            .images
            .iter()
            .map(|i| (i.id, (i.width as f32, i.height as f32)))
            .collect();
        let mut out: HashMap<u64, Vec<(usize, BBox)>> = HashMap::new();
        for a in &self.instances {
            let (Some(c), Some(&(w, h))) = (a.class_id, sizes.get(&a.image_id)) else {
                continue;
            };
            let b = a.bbox().clamp(w, h);
            if b.is_valid() {
                out.entry(a.image_id).or_default().push((c, b));
            }
        }
        out
    }

    /// Number of instances outside the active classes.
    pub fn flagged(&self) -> usize {
        self.instances.iter().filter(|a| a.class_id.is_none()).count()
    }
}

pub fn load_annotations(path: &Path, classes: Option<&[String]>) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AnnotationSet::from_json(&text, path, classes)
}

/// Keeps only instances whose category is in `names`; `names` becomes the
/// active class list in the given order. Images left without instances stay.
pub fn filter_categories(set: &AnnotationSet, names: &[String]) -> Result<(AnnotationSet, FilterCounts)> {
    if names.is_empty() {
        return Err(Error::usage("filter_categories needs at least one class name"));
    }
    let known: Vec<&str> = set.categories.iter().map(|c| c.name.as_str()).collect();
    if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
        return Err(Error::validation(format!(
            "unknown category `{bad}`; known categories: {}",
            known.join(", ")
        )));
    }
    let class_of: HashMap<u64, usize> = set
        .categories
        .iter()
        .filter_map(|c| names.iter().position(|n| *n == c.name).map(|i| (c.id, i)))
        .collect();
    let instances: Vec<GroundTruthInstance> = set
        .instances
        .iter()
        .filter_map(|a| {
            class_of.get(&a.category_id).map(|&c| GroundTruthInstance {
                class_id: Some(c),
                ..a.clone()
            })
        })
        .collect();
    let with: HashSet<u64> = instances.iter().map(|a| a.image_id).collect();
    let counts = FilterCounts {
        images: set.images.len(),
        images_with_instances: with.len(),
        instances: instances.len(),
        removed_instances: set.instances.len() - instances.len(),
    };
    Ok((
        AnnotationSet {
            images: set.images.clone(),
            instances,
            categories: set.categories.clone(),
            class_names: names.to_vec(),
        },
        counts,
    ))
}
