//! Exemplar bank: a class-indexed dictionary of degraded instance crops
//! harvested from the training split, shape-aware sampling, composite
//! assembly, and the trainable convolutional feature extractor feeding the
//! frequency split.

use crate::error::{FicgenError, Result};
use crate::imgutil;
use crate::layout::{BBox, LayoutSpec};
use crate::nn::{Conv2dLayer, Ctx, ParamGroup, ParamStore};
use crate::num::Real;
use crate::scenegen::Dataset;
use crate::tensor::Var;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// One stored crop with its provenance.
#[derive(Debug, Clone)]
pub struct Crop {
    pub data: Array3<f32>,
    pub source_scene: u64,
    pub source_bbox: BBox,
}

impl Crop {
    pub fn aspect(&self) -> f64 {
        self.source_bbox.aspect()
    }
}

/// Class-specific dictionary of degraded instance crops.
#[derive(Debug, Clone)]
pub struct ExemplarBank {
    /// Indexed by class id.
    pub entries: Vec<Vec<Crop>>,
    pub classes: Vec<String>,
    pub crop_size: usize,
    pub seed: u64,
}

/// Classes that ended up empty after a build.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DeficiencyReport {
    pub missing_classes: Vec<String>,
}

impl ExemplarBank {
    pub fn class_name(&self, class_id: usize) -> &str {
        self.classes
            .get(class_id)
            .map(|s| s.as_str())
            .unwrap_or("<unknown>")
    }

    pub fn total_crops(&self) -> usize {
        self.entries.iter().map(|e| e.len()).sum()
    }

    /// Classes appearing in a layout but absent from the bank.
    pub fn missing_for(&self, layout: &LayoutSpec) -> Vec<usize> {
        let mut missing: Vec<usize> = layout
            .instances
            .iter()
            .map(|i| i.class_id)
            .filter(|&c| c >= self.entries.len() || self.entries[c].is_empty())
            .collect();
        missing.sort_unstable();
        missing.dedup();
        missing
    }
}

/// Canonical crop side length stored in the bank.
pub const CANONICAL_CROP: usize = 32;

/// Harvest every annotated instance of the training split into the bank.
/// Deterministic for a fixed (dataset, seed).
pub fn build_bank(dataset: &Dataset, seed: u64) -> Result<(ExemplarBank, DeficiencyReport)> {
    let classes = dataset.manifest.classes.clone();
    let ids = dataset.split_ids("train")?;
    if ids.is_empty() {
        return Err(FicgenError::Dataset(
            "cannot build an exemplar bank from an empty training split".into(),
        ));
    }
    let mut entries: Vec<Vec<Crop>> = vec![Vec::new(); classes.len()];
    for &id in ids {
        let scene = dataset.scene::<f32>("train", id)?;
        for inst in &scene.layout.instances {
            let data = imgutil::crop_box_resized(&scene.image, &inst.bbox, CANONICAL_CROP);
            entries[inst.class_id].push(Crop {
                data,
                source_scene: id,
                source_bbox: inst.bbox,
            });
        }
    }
    let missing_classes: Vec<String> = classes
        .iter()
        .zip(entries.iter())
        .filter(|(_, e)| e.is_empty())
        .map(|(c, _)| c.clone())
        .collect();
    Ok((
        ExemplarBank {
            entries,
            classes,
            crop_size: CANONICAL_CROP,
            seed,
        },
        DeficiencyReport { missing_classes },
    ))
}

/// Shape-aware crop choice: nearest aspect ratio in log space, ties broken
/// uniformly by the caller's RNG state.
fn pick_crop_index(
    bank: &ExemplarBank,
    class_id: usize,
    target_aspect: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let crops = bank
        .entries
        .get(class_id)
        .filter(|e| !e.is_empty())
        .ok_or_else(|| FicgenError::UnknownClass(bank.class_name(class_id).to_string()))?;
    let dist = |a: f64| (a.max(1e-6).ln() - target_aspect.max(1e-6).ln()).abs();
    let best = crops
        .iter()
        .map(|c| dist(c.aspect()))
        .fold(f64::INFINITY, f64::min);
    let candidates: Vec<usize> = crops
        .iter()
        .enumerate()
        .filter(|(_, c)| dist(c.aspect()) <= best + 1e-12)
        .map(|(i, _)| i)
        .collect();
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

/// Sample a same-class crop for a box and resize it to the box's pixel
/// extent at the composite resolution.
pub fn sample_exemplar<F: Real>(
    bank: &ExemplarBank,
    class_id: usize,
    bbox: &BBox,
    canvas: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<F>> {
    let (_, _, rh, cw) = bbox.pixel_rect(canvas, canvas);
    let idx = pick_crop_index(bank, class_id, cw as f64 / rh as f64, rng)?;
    let crop = &bank.entries[class_id][idx];
    let as_f: Array3<F> = crop.data.mapv(|v| F::of(v as f64));
    Ok(imgutil::resize_bilinear(&as_f, rh, cw))
}

/// Foreground/background exemplar pair plus the sampled canonical crops.
#[derive(Debug, Clone)]
pub struct ExemplarComposite<F: Real> {
    /// Sampled crops pasted at their boxes; exactly zero elsewhere.
    pub foreground: Array3<F>,
    /// Supplied scene with instance boxes zeroed, or a blank canvas.
    pub background: Array3<F>,
    /// One canonical-size crop per instance, for prototype extraction.
    pub per_instance_crops: Vec<Array3<F>>,
}

/// Assemble the exemplar composite for a layout.
pub fn compose_exemplars<F: Real>(
    layout: &LayoutSpec,
    scene: Option<&Array3<F>>,
    bank: &ExemplarBank,
    canvas: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ExemplarComposite<F>> {
    let mut foreground = Array3::<F>::zeros((3, canvas, canvas));
    let mut background = match scene {
        Some(s) => s.clone(),
        None => Array3::<F>::zeros((3, canvas, canvas)),
    };
    let mut per_instance_crops = Vec::with_capacity(layout.n());
    for inst in &layout.instances {
        let (_, _, rh, cw) = inst.bbox.pixel_rect(canvas, canvas);
        let idx = pick_crop_index(bank, inst.class_id, cw as f64 / rh as f64, rng)?;
        let crop = &bank.entries[inst.class_id][idx];
        let canonical: Array3<F> = crop.data.mapv(|v| F::of(v as f64));
        let resized = imgutil::resize_bilinear(&canonical, rh, cw);
        imgutil::paste_box(&mut foreground, &resized, &inst.bbox);
        if scene.is_some() {
            imgutil::zero_box(&mut background, &inst.bbox);
        }
        per_instance_crops.push(canonical);
    }
    Ok(ExemplarComposite {
        foreground,
        background,
        per_instance_crops,
    })
}

/// Three-stage stride-2 convolutional encoder producing `C'`-channel maps at
/// 1/8 resolution. Trainable as part of the conditioning stack.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
    pub out_channels: usize,
}

impl FeatureExtractor {
    pub fn new(name: &str, mid: (usize, usize), out_channels: usize) -> Self {
        Self {
            c1: Conv2dLayer::new(format!("{name}.enc1"), 3, mid.0, 3, 2),
            c2: Conv2dLayer::new(format!("{name}.enc2"), mid.0, mid.1, 3, 2),
            c3: Conv2dLayer::new(format!("{name}.enc3"), mid.1, out_channels, 3, 2),
            out_channels,
        }
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        self.c1.register(store, group);
        self.c2.register(store, group);
        self.c3.register(store, group);
    }

    pub fn fwd<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let h = self.c1.fwd(ctx, x).silu();
        let h = self.c2.fwd(ctx, h).silu();
        self.c3.fwd(ctx, h)
    }
}

// --- persistence ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CropMeta {
    file: String,
    source_scene: u64,
    source_bbox: BBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassMeta {
    name: String,
    class_id: usize,
    count: usize,
    crops: Vec<CropMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankManifest {
    crop_size: usize,
    seed: u64,
    classes: Vec<ClassMeta>,
}

/// Persist a bank: a manifest plus one little-endian `f32` binary per crop.
pub fn save_bank(bank: &ExemplarBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut classes = Vec::with_capacity(bank.classes.len());
    for (class_id, name) in bank.classes.iter().enumerate() {
        let class_dir = dir.join("crops").join(name);
        fs::create_dir_all(&class_dir)?;
        let mut metas = Vec::new();
        for (i, crop) in bank.entries[class_id].iter().enumerate() {
            let rel = format!("crops/{name}/{i:05}.bin");
            let mut bytes = Vec::with_capacity(crop.data.len() * 4);
            for v in crop.data.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&rel), bytes)?;
            metas.push(CropMeta {
                file: rel,
                source_scene: crop.source_scene,
                source_bbox: crop.source_bbox,
            });
        }
        classes.push(ClassMeta {
            name: name.clone(),
            class_id,
            count: metas.len(),
            crops: metas,
        });
    }
    let manifest = BankManifest {
        crop_size: bank.crop_size,
        seed: bank.seed,
        classes,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_bank(dir: &Path) -> Result<ExemplarBank> {
    let manifest: BankManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let s = manifest.crop_size;
    let mut classes = vec![String::new(); manifest.classes.len()];
    let mut entries = vec![Vec::new(); manifest.classes.len()];
    for cm in &manifest.classes {
        classes[cm.class_id] = cm.name.clone();
        for meta in &cm.crops {
            let bytes = fs::read(dir.join(&meta.file))?;
            if bytes.len() != 3 * s * s * 4 {
                return Err(FicgenError::Dataset(format!(
                    "crop file {} has wrong size",
                    meta.file
                )));
            }
            let mut data = Array3::<f32>::zeros((3, s, s));
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                data.as_slice_mut().unwrap()[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            entries[cm.class_id].push(Crop {
                data,
                source_scene: meta.source_scene,
                source_bbox: meta.source_bbox,
            });
        }
    }
    Ok(ExemplarBank {
        entries,
        classes,
        crop_size: s,
        seed: manifest.seed,
    })
}
