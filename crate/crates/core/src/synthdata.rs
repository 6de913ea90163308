//! Synthetic multi-view image-text data.
//!
//! "Images" are feature vectors: each category owns a unit prototype, each
//! object perturbs its prototype, and each view perturbs its object. A fixed
//! fraction of views per object receive much heavier noise and play the role
//! of hard viewpoints.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::{dot, l2_normalize};
use crate::seeding::{self, Rng};

/// Category names whose hash buckets are distinct from each other and from
/// the fixed prompt tokens.
pub const CATEGORY_NAMES: [&str; 40] = [
    "hammer", "dog", "chair", "mug", "lamp", "shoe", "bottle", "guitar", "teapot", "bicycle", "clock", "kettle",
    "camera", "helmet", "backpack", "sofa", "table", "umbrella", "piano", "violin", "boat", "truck", "plane", "train",
    "tree", "flower", "cactus", "pear", "lemon", "pumpkin", "donut", "fork", "box", "pen", "pencil", "key", "fan",
    "bathtub", "sword", "ladder",
];

pub fn category_name(index: usize) -> String {
    CATEGORY_NAMES
        .get(index)
        .map_or_else(|| format!("category{index}"), |s| (*s).to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub num_categories: usize,
    pub objects_per_category: usize,
    pub views_per_object: usize,
    pub input_dim: usize,
    pub base_view_noise: f64,
    pub hard_view_fraction: f64,
    pub hard_view_noise: f64,
    pub object_noise: f64,
    pub min_angle_deg: f64,
    /// Single-view clean pairs per category, mixed into training batches.
    pub clean_objects_per_category: usize,
    /// Single-view clean pairs per category held out for zero-shot evaluation.
    pub holdout_objects_per_category: usize,
    pub seed: u64,
}

fn default_object_noise() -> f64 {
    0.1
}
fn default_min_angle() -> f64 {
    30.0
}
fn default_clean_objects() -> usize {
    10
}
fn default_holdout_objects() -> usize {
    10
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_categories: 10,
            objects_per_category: 5,
            views_per_object: 20,
            input_dim: 384,
            base_view_noise: 0.02,
            hard_view_fraction: 0.2,
            hard_view_noise: 0.1,
            object_noise: default_object_noise(),
            min_angle_deg: default_min_angle(),
            clean_objects_per_category: default_clean_objects(),
            holdout_objects_per_category: default_holdout_objects(),
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(OvtError::Config(m.to_string()));
        if self.num_categories == 0 {
            return fail("num_categories must be >= 1");
        }
        if self.objects_per_category == 0 || self.views_per_object == 0 {
            return fail("objects_per_category and views_per_object must be >= 1");
        }
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1");
        }
        if !(self.base_view_noise >= 0.0) || !(self.hard_view_noise > self.base_view_noise) {
            return fail("noise levels must satisfy hard_view_noise > base_view_noise >= 0");
        }
        if !(0.0..=1.0).contains(&self.hard_view_fraction) {
            return fail("hard_view_fraction must lie in [0, 1]");
        }
        if !(self.object_noise >= 0.0) || !(0.0..180.0).contains(&self.min_angle_deg) {
            return fail("object_noise must be >= 0 and min_angle_deg in [0, 180)");
        }
        Ok(())
    }

    /// `⌈p·M⌉`, guarded against representation error in `p·M`.
    pub fn hard_views_per_object(&self) -> usize {
        let raw = self.hard_view_fraction * self.views_per_object as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.views_per_object)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub object_id: usize,
    pub view_id: usize,
    pub category: String,
    pub caption: String,
    #[serde(rename = "hard")]
    pub is_hard_view: bool,
    #[serde(rename = "x")]
    pub raw: Vec<f64>,
}

/// Views grouped by object, in record order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiViewDataset {
    pub records: Vec<ViewRecord>,
}

/// Record indices of one object's views.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGroup {
    pub object_id: usize,
    pub category: String,
    pub indices: Vec<usize>,
}

impl MultiViewDataset {
    pub fn new(records: Vec<ViewRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.raw.len())
    }

    /// Distinct categories in order of first appearance.
    pub fn categories(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.category.as_str()))
            .map(|r| r.category.clone())
            .collect()
    }

    /// Objects in order of first appearance.
    pub fn objects(&self) -> Vec<ObjectGroup> {
        let mut groups: Vec<ObjectGroup> = Vec::new();
        let mut slot = std::collections::HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let g = *slot.entry(r.object_id).or_insert_with(|| {
                groups.push(ObjectGroup {
                    object_id: r.object_id,
                    category: r.category.clone(),
                    indices: Vec::new(),
                });
                groups.len() - 1
            });
            groups[g].indices.push(i);
        }
        groups
    }

    pub fn check_consistent(&self) -> Result<()> {
        let Some(dim) = self.input_dim() else {
            return Ok(());
        };
        for (i, r) in self.records.iter().enumerate() {
            if r.raw.len() != dim {
                return Err(OvtError::dims(
                    "dataset record",
                    dim,
                    format!("record {i} of dim {}", r.raw.len()),
                ));
            }
            if r.caption.trim().is_empty() {
                return Err(OvtError::Config(format!("record {i} has an empty caption")));
            }
        }
        Ok(())
    }
}

/// Anything that can describe a view given a prompt. Must be deterministic.
pub trait Captioner {
    fn caption(&self, view: &ViewRecord, prompt: &str) -> String;
}

/// Stand-in for an instruction-following captioner: always names the category.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockCaptioner;

impl Captioner for MockCaptioner {
    fn caption(&self, view: &ViewRecord, _prompt: &str) -> String {
        format!("a photo of a {}, detail view", view.category)
    }
}

const PROMPT_PREFIX: &str = "Write a short description for the image, noting that the main instance of the image is a ";

/// Category-guided captioning prompt.
pub fn prompt_for_category(category: &str) -> Result<String> {
    if category.is_empty() {
        return Err(OvtError::Empty("category"));
    }
    Ok(format!("{PROMPT_PREFIX}{category}."))
}

pub fn zero_shot_prompt(category: &str) -> String {
    format!("a photo of {category}")
}

pub fn mock_caption(view: &ViewRecord, captioner: &dyn Captioner) -> Result<String> {
    let prompt = prompt_for_category(&view.category)?;
    Ok(captioner.caption(view, &prompt))
}

/// The three splits produced from one spec: multi-view training views,
/// single-view clean training pairs, and single-view held-out pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub multiview: MultiViewDataset,
    pub clean: MultiViewDataset,
    pub holdout: MultiViewDataset,
}

fn gaussian(rng: &mut Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn prototypes(spec: &GenSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    const MAX_RETRIES: usize = 1000;
    let max_cos = spec.min_angle_deg.to_radians().cos();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.num_categories);
    for _ in 0..spec.num_categories {
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let Ok(v) = l2_normalize(&gaussian(rng, spec.input_dim, 1.0)) else {
                continue;
            };
            if protos.iter().all(|p| dot(p, &v) <= max_cos) {
                protos.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(OvtError::Separation {
                categories: spec.num_categories,
                min_angle_deg: spec.min_angle_deg,
            });
        }
    }
    Ok(protos)
}

struct ObjectBatch<'a> {
    spec: &'a GenSpec,
    protos: &'a [Vec<f64>],
    captioner: &'a dyn Captioner,
}

impl ObjectBatch<'_> {
    fn emit(
        &self,
        rng: &mut Rng,
        next_id: &mut usize,
        objects_per_category: usize,
        views: usize,
        hard: usize,
    ) -> Result<Vec<ViewRecord>> {
        let spec = self.spec;
        let mut out = Vec::new();
        for (c, proto) in self.protos.iter().enumerate() {
            let category = category_name(c);
            for _ in 0..objects_per_category {
                let offset = gaussian(rng, spec.input_dim, spec.object_noise);
                let center: Vec<f64> = proto.iter().zip(&offset).map(|(p, o)| p + o).collect();
                let hard_set: HashSet<usize> = sample(rng, views, hard).into_iter().collect();
                for view_id in 0..views {
                    let is_hard = hard_set.contains(&view_id);
                    let sigma = if is_hard {
                        spec.hard_view_noise
                    } else {
                        spec.base_view_noise
                    };
                    let noise = gaussian(rng, spec.input_dim, sigma);
                    let raw = center.iter().zip(&noise).map(|(a, n)| a + n).collect();
                    let mut rec = ViewRecord {
                        object_id: *next_id,
                        view_id,
                        category: category.clone(),
                        caption: String::new(),
                        is_hard_view: is_hard,
                        raw,
                    };
                    rec.caption = mock_caption(&rec, self.captioner)?;
                    out.push(rec);
                }
                *next_id += 1;
            }
        }
        Ok(out)
    }
}

/// Multi-view training set for `spec`.
pub fn generate(spec: &GenSpec) -> Result<MultiViewDataset> {
    Ok(generate_splits(spec)?.multiview)
}

pub fn generate_splits(spec: &GenSpec) -> Result<Splits> {
    generate_splits_with(spec, &MockCaptioner)
}

pub fn generate_splits_with(spec: &GenSpec, captioner: &dyn Captioner) -> Result<Splits> {
    spec.validate()?;
    let mut rng = seeding::stream(spec.seed, "synthdata");
    let protos = prototypes(spec, &mut rng)?;
    let batch = ObjectBatch {
        spec,
        protos: &protos,
        captioner,
    };
    let mut next_id = 0;
    let multiview = batch.emit(
        &mut rng,
        &mut next_id,
        spec.objects_per_category,
        spec.views_per_object,
        spec.hard_views_per_object(),
    )?;
    let clean = batch.emit(&mut rng, &mut next_id, spec.clean_objects_per_category, 1, 0)?;
    let holdout = batch.emit(&mut rng, &mut next_id, spec.holdout_objects_per_category, 1, 0)?;
    Ok(Splits {
        multiview: MultiViewDataset::new(multiview),
        clean: MultiViewDataset::new(clean),
        holdout: MultiViewDataset::new(holdout),
    })
}

pub fn write_jsonl(dataset: &MultiViewDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in &dataset.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<MultiViewDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ViewRecord = serde_json::from_str(&line).map_err(|e| OvtError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(MultiViewDataset::new(records))
}
