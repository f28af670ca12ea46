//! Planted-signal image pairs.
//!
//! Classes come in pairs sharing a pattern family. A sample of class `c`
//! stamps a pattern of family `c / 2` onto its class's planted grid cells in
//! both modalities, at a per-sample amplitude. Each family has two members;
//! in even classes the two modalities show the same member, in odd classes
//! different members, so half of the label is only visible by comparing the
//! modalities at the planted cells. Weaker patterns of other families are
//! scattered over free cells as distractors, in varying numbers, so that
//! summed whole-image evidence is ambiguous while the strongest cells are
//! not.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Content, Dataset, SamplePair, Split};
use crate::diff::{Prng, Tensor};
use crate::error::{Error, Result};
use crate::Modality;

pub const PLANTED_FILE: &str = "planted.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub planted_cells: usize,
    pub seed: u64,
    pub image_size: usize,
    pub grid: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Range of the per-sample planted amplitude.
    pub amplitude: (f64, f64),
    /// Distractor cells per modality are drawn from `0..=max_distractors`.
    pub max_distractors: usize,
    /// Distractor amplitude relative to the planted amplitude.
    pub distractor_ratio: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 50,
            test_per_class: 50,
            planted_cells: 2,
            seed: 0,
            image_size: 64,
            grid: 8,
            noise: 0.25,
            amplitude: (0.5, 1.5),
            max_distractors: 8,
            distractor_ratio: (0.3, 0.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCells {
    pub rgb: Vec<(usize, usize)>,
    pub depth: Vec<(usize, usize)>,
}

impl PlantedCells {
    pub fn get(&self, modality: Modality) -> &[(usize, usize)] {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
        }
    }
}

/// Ground truth: planted (row, col) grid cells per class and per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub grid: usize,
    pub class_cells: Vec<Vec<(usize, usize)>>,
    pub samples: BTreeMap<usize, PlantedCells>,
}

impl Planted {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PLANTED_FILE), serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(PLANTED_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }
}

const RGB_COLORS: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-0.577, -0.577, -0.577]];
const DEPTH_COLORS: [[f64; 3]; 4] = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [0.577, 0.577, 0.577], [-1.0, 0.0, 0.0]];
const WAVES: [(f64, f64); 6] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0), (2.0, 0.0), (0.0, 2.0)];

/// Colour and texture of pattern `j` (= 2 * family + member) in a modality.
fn pattern(modality: Modality, j: usize) -> ([f64; 3], (f64, f64)) {
    let (colors, shift) = match modality {
        Modality::Rgb => (&RGB_COLORS, 0),
        Modality::Depth => (&DEPTH_COLORS, 3),
    };
    let color = if j < 4 {
        colors[j]
    } else {
        // Extra families get fixed pseudo-random directions.
        let mut rng = Prng::derive(0x5eed, j as u64, modality as u64);
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    (color, WAVES[(j + shift) % WAVES.len()])
}

fn stamp(img: &mut [f64], size: usize, cell: usize, at: (usize, usize), modality: Modality, j: usize, amp: f64) {
    let (color, (fy, fx)) = pattern(modality, j);
    let plane = size * size;
    for y in 0..cell {
        for x in 0..cell {
            let tex = 1.0 + 0.5 * (2.0 * PI * (fy * y as f64 + fx * x as f64) / cell as f64).sin();
            let idx = (at.0 * cell + y) * size + at.1 * cell + x;
            for (ch, c) in color.iter().enumerate() {
                img[ch * plane + idx] += amp * c * tex;
            }
        }
    }
}

fn class_cells(cfg: &SynthConfig) -> Vec<Vec<(usize, usize)>> {
    let g = cfg.grid;
    let need = cfg.num_classes * cfg.planted_cells;
    let mut cells: Vec<(usize, usize)> = if (g.saturating_sub(2)).pow(2) >= need {
        (1..g - 1).flat_map(|r| (1..g - 1).map(move |c| (r, c))).collect()
    } else {
        (0..g).flat_map(|r| (0..g).map(move |c| (r, c))).collect()
    };
    Prng::derive(cfg.seed, u64::MAX, 0).shuffle(&mut cells);
    cells.chunks(cfg.planted_cells.max(1)).take(cfg.num_classes).map(<[_]>::to_vec).collect()
}

fn sample(cfg: &SynthConfig, id: usize, label: usize, cells: &[Vec<(usize, usize)>], free: &[(usize, usize)]) -> SamplePair {
    let mut rng = Prng::derive(cfg.seed, id as u64, 1);
    let size = cfg.image_size;
    let cell = size / cfg.grid;
    let families = cfg.num_classes.div_ceil(2);
    let family = label / 2;
    let member_rgb = rng.below(2);
    let member_depth = if label % 2 == 0 { member_rgb } else { 1 - member_rgb };
    let amp = rng.uniform(cfg.amplitude.0, cfg.amplitude.1);
    let mut arrays = Vec::with_capacity(2);
    for (modality, member) in [(Modality::Rgb, member_rgb), (Modality::Depth, member_depth)] {
        let mut img: Vec<f64> = (0..3 * size * size).map(|_| cfg.noise * rng.normal()).collect();
        for &at in &cells[label] {
            stamp(&mut img, size, cell, at, modality, 2 * family + member, amp);
        }
        if families > 1 {
            let count = rng.below(cfg.max_distractors + 1);
            let mut spots = free.to_vec();
            rng.shuffle(&mut spots);
            for &at in spots.iter().take(count) {
                let other = (family + 1 + rng.below(families - 1)) % families;
                let j = 2 * other + rng.below(2);
                let a = amp * rng.uniform(cfg.distractor_ratio.0, cfg.distractor_ratio.1);
                stamp(&mut img, size, cell, at, modality, j, a);
            }
        }
        // Stored as f32, so round now to make saved and in-memory data agree.
        let img = img.into_iter().map(|v| f64::from(v as f32)).collect();
        arrays.push(Tensor::new(vec![3, size, size], img).expect("image shape"));
    }
    let depth = arrays.pop().expect("two arrays");
    let rgb = arrays.pop().expect("two arrays");
    SamplePair { id, label, rgb, depth }
}

/// Generates the train and test splits plus planted-cell ground truth.
/// Sample ids run over the train split first, then the test split.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Planted)> {
    let cells_total = cfg.grid * cfg.grid;
    if cfg.num_classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if cfg.planted_cells == 0 || cfg.planted_cells * cfg.num_classes > cells_total {
        return Err(Error::Config(format!(
            "{} planted cells for each of {} classes do not fit in a {}x{} grid",
            cfg.planted_cells, cfg.num_classes, cfg.grid, cfg.grid
        )));
    }
    if cfg.grid == 0 || cfg.image_size % cfg.grid != 0 {
        return Err(Error::Config(format!("image size {} is not a multiple of grid {}", cfg.image_size, cfg.grid)));
    }
    let cells = class_cells(cfg);
    let used: Vec<(usize, usize)> = cells.iter().flatten().copied().collect();
    let free: Vec<(usize, usize)> =
        (0..cfg.grid).flat_map(|r| (0..cfg.grid).map(move |c| (r, c))).filter(|p| !used.contains(p)).collect();
    if cfg.max_distractors > free.len() {
        return Err(Error::Config(format!("{} distractors but only {} free cells", cfg.max_distractors, free.len())));
    }
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    let mut planted = BTreeMap::new();
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
        for i in 0..per_class * cfg.num_classes {
            let id = samples.len();
            let label = i % cfg.num_classes;
            samples.push(sample(cfg, id, label, &cells, &free));
            splits.push(split);
            planted.insert(id, PlantedCells { rgb: cells[label].clone(), depth: cells[label].clone() });
        }
    }
    let data = Dataset::new(Content::Images, cfg.num_classes, samples, splits)?;
    Ok((data, Planted { grid: cfg.grid, class_cells: cells, samples: planted }))
}
