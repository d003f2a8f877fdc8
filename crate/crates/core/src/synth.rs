//! Synthetic data: labelled ambiguity maps, tabletop scenes with
//! duplicated objects, and dialog records built from those scenes.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AmbiguityMap;
use crate::dialog::DialogRecord;
use crate::loc::BoxNorm;
use crate::probe::LabeledMap;
use crate::rng::{derive_seed, seeded};

/// Smallest grid on which blobs can keep their separation.
pub const MIN_GRID: usize = 8;
pub const DEFAULT_CLASSES: &[&str] = &["apple", "mug", "banana", "bowl", "bottle", "sponge"];
pub const ATTRIBUTES: &[&str] = &["red", "green", "blue", "yellow", "white", "black"];
/// Scenes are laid out on this many cells per side.
pub const SCENE_GRID: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("requested an empty dataset")]
    Empty,
    #[error("grid side {0} is below the minimum of {MIN_GRID}")]
    GridTooSmall(usize),
    #[error("need at least two distinct object classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid generator config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapGenConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Amplitude of additive uniform noise; 0 disables it.
    pub noise: f64,
    /// Minimum centre distance between blobs, as a fraction of the grid side.
    pub separation_fraction: f64,
}

impl Default for MapGenConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1.5,
            sigma_max: 3.0,
            amplitude_min: 0.7,
            amplitude_max: 1.0,
            noise: 0.05,
            separation_fraction: 0.25,
        }
    }
}

impl MapGenConfig {
    pub fn noiseless() -> Self {
        Self {
            noise: 0.0,
            ..Self::default()
        }
    }
}

/// A blob's centre in (row, col) cell coordinates.
pub type BlobCenter = (f64, f64);

/// One map of class `label`: a single blob for 0, two or three well
/// separated blobs for 1. Returns the map and the blob centres.
pub fn gen_map(
    grid_side: usize,
    label: u8,
    seed: u64,
    cfg: &MapGenConfig,
) -> Result<(AmbiguityMap, Vec<BlobCenter>), SynthError> {
    if grid_side < MIN_GRID {
        return Err(SynthError::GridTooSmall(grid_side));
    }
    if !(cfg.sigma_min > 0.0
        && cfg.sigma_min <= cfg.sigma_max
        && cfg.amplitude_min <= cfg.amplitude_max
        && cfg.noise >= 0.0)
    {
        return Err(SynthError::Config(format!("{cfg:?}")));
    }
    let mut rng = seeded(seed);
    let count = if label == 0 { 1 } else { rng.gen_range(2..=3) };
    let centers = place_centers(&mut rng, grid_side, count, cfg.separation_fraction * grid_side as f64);

    let g = grid_side;
    let mut values = vec![0.0; g * g];
    for &(cr, cc) in &centers {
        let sigma = rng.gen_range(cfg.sigma_min..=cfg.sigma_max);
        let amp = rng.gen_range(cfg.amplitude_min..=cfg.amplitude_max);
        let denom = 2.0 * sigma * sigma;
        for r in 0..g {
            for c in 0..g {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                values[r * g + c] += amp * (-d2 / denom).exp();
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in values.iter_mut() {
            *v += rng.gen_range(0.0..cfg.noise);
        }
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = max - min;
    let values = values
        .iter()
        .map(|v| if range > 0.0 { (v - min) / range } else { 0.0 })
        .collect();
    let map = AmbiguityMap::from_values(g, values).expect("generated map has g² values");
    Ok((map, centers))
}

fn place_centers(rng: &mut ChaCha8Rng, g: usize, count: usize, min_dist: f64) -> Vec<BlobCenter> {
    let hi = (g - 2) as f64;
    loop {
        let mut centers: Vec<BlobCenter> = Vec::with_capacity(count);
        for _ in 0..100 {
            let cand = (rng.gen_range(1.0..=hi), rng.gen_range(1.0..=hi));
            if centers
                .iter()
                .all(|&(r, c)| ((r - cand.0).powi(2) + (c - cand.1).powi(2)).sqrt() >= min_dist)
            {
                centers.push(cand);
                if centers.len() == count {
                    return centers;
                }
            }
        }
    }
}

pub fn gen_map_dataset(n: usize, grid_side: usize, seed: u64) -> Result<Vec<LabeledMap>, SynthError> {
    gen_map_dataset_with(n, grid_side, seed, &MapGenConfig::default())
}

/// `n` maps alternating label 0 and 1, each drawn from its own derived seed.
pub fn gen_map_dataset_with(
    n: usize,
    grid_side: usize,
    seed: u64,
    cfg: &MapGenConfig,
) -> Result<Vec<LabeledMap>, SynthError> {
    if n == 0 {
        return Err(SynthError::Empty);
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let label = (i % 2) as u8;
            let (map, _) = gen_map(grid_side, label, derive_seed(seed, i as u64), cfg)?;
            Ok(LabeledMap::new(map, label).expect("label is 0 or 1"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: String,
    pub row: usize,
    pub col: usize,
    pub attribute: String,
}

impl SceneObject {
    /// The object's grid cell as a normalised box.
    pub fn bbox(&self) -> BoxNorm {
        let s = SCENE_GRID as f64;
        BoxNorm::new(
            self.row as f64 / s,
            self.col as f64 / s,
            (self.row + 1) as f64 / s,
            (self.col + 1) as f64 / s,
        )
        .expect("scene cells lie inside the unit square")
    }
}

/// One scene paired with one instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene_id: usize,
    pub objects: Vec<SceneObject>,
    pub instruction: String,
    pub target_class: String,
    pub label: u8,
}

impl SyntheticScene {
    pub fn matches(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(move |o| o.class == self.target_class)
    }

    /// Comma-separated `attribute class` list of the objects.
    pub fn inventory(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{} {}", o.attribute, o.class))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// 1 when the instruction's class names two or more objects.
pub fn recount_label(scene: &SyntheticScene) -> u8 {
    u8::from(scene.matches().count() >= 2)
}

pub fn instruction_for(class: &str) -> String {
    format!("Get the {class}")
}

/// `n` scenes of 3 to 5 objects, each with at least one duplicated class.
/// Every scene yields an ambiguous instruction for a duplicated class and,
/// if some class occurs once, an unambiguous one for it.
pub fn gen_scene_dataset(n: usize, seed: u64, classes: &[&str]) -> Result<Vec<SyntheticScene>, SynthError> {
    let mut distinct = classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(SynthError::TooFewClasses(distinct.len()));
    }
    Ok((0..n)
        .flat_map(|i| scene_instructions(i, &mut seeded(derive_seed(seed, i as u64)), classes))
        .collect())
}

fn scene_instructions(scene_id: usize, rng: &mut ChaCha8Rng, classes: &[&str]) -> Vec<SyntheticScene> {
    let m = rng.gen_range(3..=5);
    let duplicated = *classes.choose(rng).expect("classes is non-empty");
    let copies = rng.gen_range(2..=m.min(3));
    let mut names: Vec<&str> = vec![duplicated; copies];
    while names.len() < m {
        names.push(classes.choose(rng).expect("classes is non-empty"));
    }
    names.shuffle(rng);
    let cells = index::sample(rng, SCENE_GRID * SCENE_GRID, m);
    let attrs = index::sample(rng, ATTRIBUTES.len(), m);
    let objects: Vec<SceneObject> = names
        .iter()
        .zip(cells.iter().zip(attrs.iter()))
        .map(|(name, (cell, attr))| SceneObject {
            class: name.to_string(),
            row: cell / SCENE_GRID,
            col: cell % SCENE_GRID,
            attribute: ATTRIBUTES[attr].to_string(),
        })
        .collect();

    let count = |c: &str| objects.iter().filter(|o| o.class == c).count();
    let mut seen: Vec<&str> = Vec::new();
    for o in &objects {
        if !seen.contains(&o.class.as_str()) {
            seen.push(&o.class);
        }
    }
    let dup: Vec<&str> = seen.iter().copied().filter(|c| count(c) >= 2).collect();
    let unique: Vec<&str> = seen.iter().copied().filter(|c| count(c) == 1).collect();

    let mut out = Vec::with_capacity(2);
    let make = |class: &str| {
        let mut s = SyntheticScene {
            scene_id,
            objects: objects.clone(),
            instruction: instruction_for(class),
            target_class: class.to_string(),
            label: 0,
        };
        s.label = recount_label(&s);
        s
    };
    out.push(make(dup.choose(rng).expect("scene has a duplicated class")));
    if let Some(u) = unique.choose(rng) {
        out.push(make(u));
    }
    out
}

/// Dialog records for scene instructions: ambiguous requests get one
/// clarification turn naming the target's attribute, unambiguous ones none.
pub fn gen_dialog_dataset(n: usize, seed: u64) -> Result<Vec<DialogRecord>, SynthError> {
    let scenes = gen_scene_dataset(n, seed, DEFAULT_CLASSES)?;
    Ok(scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seeded(derive_seed(seed ^ 0xD1A1, i as u64));
            let candidates: Vec<&SceneObject> = s.matches().collect();
            let target = *candidates.choose(&mut rng).expect("instruction names an object");
            let dialog = if s.label == 1 {
                vec![(
                    format!("Which {} do you mean?", s.target_class),
                    format!("The {} one.", target.attribute),
                )]
            } else {
                Vec::new()
            };
            DialogRecord {
                image_id: format!("scene-{:06}", s.scene_id),
                user_request: s.instruction.clone(),
                dialog,
                gold_box: target.bbox().to_array(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balance_and_range() {
        let data = gen_map_dataset(100, 16, 42).unwrap();
        assert_eq!(data.iter().filter(|s| s.label == 1).count(), 50);
        for s in &data {
            let max = s.map.values.iter().cloned().fold(f64::MIN, f64::max);
            let min = s.map.values.iter().cloned().fold(f64::MAX, f64::min);
            assert_eq!((min, max), (0.0, 1.0));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = gen_map_dataset(10, 8, 1).unwrap();
        assert_eq!(a, gen_map_dataset(10, 8, 1).unwrap());
        assert_ne!(a, gen_map_dataset(10, 8, 2).unwrap());
    }

    #[test]
    fn errors() {
        assert_eq!(gen_map_dataset(0, 16, 0).unwrap_err(), SynthError::Empty);
        assert_eq!(gen_map_dataset(4, 7, 0).unwrap_err(), SynthError::GridTooSmall(7));
        assert_eq!(
            gen_scene_dataset(3, 0, &["apple", "apple"]).unwrap_err(),
            SynthError::TooFewClasses(1)
        );
    }

    #[test]
    fn ambiguous_centres_are_separated() {
        for i in 0..200 {
            let (_, centers) = gen_map(32, 1, i, &MapGenConfig::default()).unwrap();
            assert!((2..=3).contains(&centers.len()));
            for (a, b) in centers.iter().zip(centers.iter().skip(1)) {
                assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= 8.0);
            }
        }
    }

    #[test]
    fn fixed_scene_rule() {
        let objects = ["apple", "apple", "mug"]
            .iter()
            .enumerate()
            .map(|(i, c)| SceneObject {
                class: c.to_string(),
                row: 0,
                col: i,
                attribute: ATTRIBUTES[i].to_string(),
            })
            .collect::<Vec<_>>();
        let scene = |class: &str| SyntheticScene {
            scene_id: 0,
            objects: objects.clone(),
            instruction: instruction_for(class),
            target_class: class.to_string(),
            label: 0,
        };
        assert_eq!(recount_label(&scene("apple")), 1);
        assert_eq!(recount_label(&scene("mug")), 0);
        assert_eq!(scene("apple").instruction, "Get the apple");
    }

    #[test]
    fn scenes_follow_the_rule() {
        let scenes = gen_scene_dataset(200, 42, DEFAULT_CLASSES).unwrap();
        let first_per_scene = scenes.iter().filter(|s| s.label == 1).count();
        assert_eq!(first_per_scene, 200);
        for s in &scenes {
            assert_eq!(s.label, recount_label(s));
            let attrs: std::collections::HashSet<_> = s.objects.iter().map(|o| &o.attribute).collect();
            assert_eq!(attrs.len(), s.objects.len());
        }
    }

    #[test]
    fn all_duplicated_scene_emits_only_ambiguous() {
        let scenes = gen_scene_dataset(300, 9, &["apple", "mug"]).unwrap();
        let mut ids: Vec<usize> = scenes.iter().map(|s| s.scene_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 300);
        for id in 0..300 {
            let group: Vec<_> = scenes.iter().filter(|s| s.scene_id == id).collect();
            let has_unique = group[0]
                .objects
                .iter()
                .any(|o| group[0].objects.iter().filter(|p| p.class == o.class).count() == 1);
            assert_eq!(group.len(), 1 + usize::from(has_unique));
        }
    }

    #[test]
    fn dialog_records_point_at_a_matching_object() {
        let records = gen_dialog_dataset(20, 3).unwrap();
        assert!(records.iter().any(|r| r.dialog.len() == 1));
        assert!(records.iter().any(|r| r.dialog.is_empty()));
        for r in &records {
            assert!(BoxNorm::from_array(r.gold_box).unwrap().area() > 0.0);
        }
    }
}
