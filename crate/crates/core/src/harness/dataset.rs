//! Versioned JSON dataset: vocabulary plus scenes with inline RGB pixels,
//! RLE instance masks and relation triples.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::rle;
use crate::backbone::{PanopticOutput, SyntheticImage};
use crate::error::{Error, Result};
use crate::mask_embed::BinaryMask;
use crate::sgeval::{GTSceneGraph, Relation};
use crate::synth::{synth_scene, Scene, SceneConfig, PREDICATE_NAMES};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
}

impl Vocabulary {
    pub fn synthetic(n_classes: usize, n_predicates: usize) -> Self {
        Self {
            classes: (0..n_classes).map(|c| format!("class{c}")).collect(),
            predicates: PREDICATE_NAMES[..n_predicates].iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class: usize,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    /// Base64 of `height·width·3` RGB bytes, row-major.
    pub pixels: String,
    pub instances: Vec<InstanceRecord>,
    /// `[subject, predicate, object]`.
    pub relations: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema: u32,
    pub vocabulary: Vocabulary,
    pub scenes: Vec<SceneRecord>,
}

impl SceneRecord {
    pub fn from_scene(id: u64, scene: &Scene) -> Self {
        Self {
            id,
            height: scene.image.height,
            width: scene.image.width,
            pixels: STANDARD.encode(&scene.image.pixels),
            instances: scene
                .graph
                .instances
                .iter()
                .map(|m| InstanceRecord {
                    class: m.class_label,
                    rle: rle::encode(&m.bits),
                })
                .collect(),
            relations: scene
                .graph
                .relations
                .iter()
                .map(|r| [r.subject, r.predicate, r.object])
                .collect(),
        }
    }

    pub fn to_scene(&self) -> Result<Scene> {
        let (h, w) = (self.height, self.width);
        let pixels = STANDARD
            .decode(&self.pixels)
            .map_err(|e| Error::Data(format!("scene {}: bad pixel data: {e}", self.id)))?;
        if pixels.len() != h * w * 3 {
            return Err(Error::Data(format!(
                "scene {}: {} pixel bytes for {h}x{w}",
                self.id,
                pixels.len()
            )));
        }
        let instances = self
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| BinaryMask::new(h, w, rle::decode(&inst.rle, h * w)?, i, inst.class))
            .collect::<Result<Vec<_>>>()?;
        let relations = self
            .relations
            .iter()
            .map(|&[subject, predicate, object]| Relation {
                subject,
                object,
                predicate,
            })
            .collect();
        Ok(Scene {
            image: SyntheticImage {
                height: h,
                width: w,
                pixels,
            },
            panoptic: PanopticOutput::from_masks(instances.clone())?,
            graph: GTSceneGraph { instances, relations },
        })
    }
}

impl DatasetFile {
    pub fn from_scenes(vocabulary: Vocabulary, scenes: &[Scene]) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            vocabulary,
            scenes: scenes
                .iter()
                .enumerate()
                .map(|(i, s)| SceneRecord::from_scene(i as u64, s))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                self.schema
            )));
        }
        let nc = self.vocabulary.classes.len();
        for s in &self.scenes {
            if let Some(i) = s.instances.iter().find(|i| i.class >= nc) {
                return Err(Error::Data(format!("scene {}: class {} outside vocabulary", s.id, i.class)));
            }
            let scene = s.to_scene()?;
            scene.graph.validate(self.vocabulary.predicates.len())?;
            if scene.graph.instances.iter().any(BinaryMask::is_empty) {
                return Err(Error::Data(format!("scene {}: empty instance mask", s.id)));
            }
            if !scene.panoptic.is_disjoint() {
                return Err(Error::Data(format!("scene {}: overlapping instance masks", s.id)));
            }
        }
        Ok(())
    }

    pub fn decode(&self) -> Result<Vec<Scene>> {
        self.scenes.iter().map(SceneRecord::to_scene).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        file.validate()?;
        Ok(file)
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x1000_0000_01b3).wrapping_add(index as u64)
}

/// Deterministic synthetic dataset.
pub fn generate(seed: u64, n_scenes: usize, cfg: &SceneConfig) -> Result<DatasetFile> {
    let scenes = (0..n_scenes)
        .map(|i| synth_scene(scene_seed(seed, i), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetFile::from_scenes(
        Vocabulary::synthetic(cfg.n_classes, cfg.n_predicates),
        &scenes,
    ))
}
