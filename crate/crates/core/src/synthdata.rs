//! Procedural, task-structured dataset of rendered shapes.
//!
//! A task is one combination of background style, colour palette, and
//! object density. Each scene is a handful of coloured shapes over a
//! vertical gradient, annotated with ground-truth boxes and a spatial scene
//! graph built from those boxes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::image::RgbImage;
use crate::scenegraph::{
    infer_spatial_relations, AnnotatedScene, BoundingBox, SceneGraph, Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Day,
    Dusk,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    Warm,
    Cool,
    Mono,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Sparse,
    Dense,
}

impl BackgroundStyle {
    pub const ALL: [Self; 3] = [Self::Day, Self::Dusk, Self::Night];
    pub fn name(self) -> &'static str {
        match self {
            Self::Day => "day",
            Self::Dusk => "dusk",
            Self::Night => "night",
        }
    }
}

impl Palette {
    pub const ALL: [Self; 3] = [Self::Warm, Self::Cool, Self::Mono];
    pub fn name(self) -> &'static str {
        match self {
            Self::Warm => "warm",
            Self::Cool => "cool",
            Self::Mono => "mono",
        }
    }

    /// Base colour of each of the three tones.
    fn tones(self) -> [[f64; 3]; 3] {
        match self {
            Self::Warm => [[0.85, 0.15, 0.1], [0.95, 0.55, 0.1], [0.95, 0.85, 0.2]],
            Self::Cool => [[0.1, 0.3, 0.85], [0.1, 0.7, 0.65], [0.55, 0.25, 0.8]],
            Self::Mono => [[0.92, 0.92, 0.92], [0.55, 0.55, 0.55], [0.15, 0.15, 0.15]],
        }
    }
}

impl Density {
    pub const ALL: [Self; 2] = [Self::Sparse, Self::Dense];
    pub fn name(self) -> &'static str {
        match self {
            Self::Sparse => "sparse",
            Self::Dense => "dense",
        }
    }

    pub fn shape_count_range(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Self::Sparse => 2..=3,
            Self::Dense => 4..=6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskAttributes {
    pub background_style: BackgroundStyle,
    pub palette: Palette,
    pub density: Density,
}

impl TaskAttributes {
    /// All 18 attribute combinations in a fixed order.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::new();
        for background_style in BackgroundStyle::ALL {
            for palette in Palette::ALL {
                for density in Density::ALL {
                    out.push(Self {
                        background_style,
                        palette,
                        density,
                    });
                }
            }
        }
        out
    }

    pub fn to_map(self) -> BTreeMap<String, String> {
        BTreeMap::from([
            (
                "background_style".to_string(),
                self.background_style.name().to_string(),
            ),
            ("palette".to_string(), self.palette.name().to_string()),
            ("density".to_string(), self.density.name().to_string()),
        ])
    }
}

impl fmt::Display for TaskAttributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}",
            self.background_style.name(),
            self.palette.name(),
            self.density.name()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub attributes: TaskAttributes,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [Self; 3] = [Self::Circle, Self::Square, Self::Triangle];
    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }

    /// Point-in-shape for the shape inscribed in `b` (normalised coords).
    pub fn contains(self, b: &BoundingBox, px: f64, py: f64) -> bool {
        if px < b.x0 || px >= b.x1 || py < b.y0 || py >= b.y1 {
            return false;
        }
        let (cx, cy) = b.center();
        match self {
            Self::Square => true,
            Self::Circle => {
                let dx = (px - cx) / (0.5 * b.width());
                let dy = (py - cy) / (0.5 * b.height());
                dx * dx + dy * dy <= 1.0
            }
            // apex at top-centre, base along the bottom edge
            Self::Triangle => (px - cx).abs() <= (py - b.y0) / b.height() * 0.5 * b.width(),
        }
    }
}

pub const TONE_NAMES: [&str; 3] = ["primary", "secondary", "accent"];

/// Object category name for a shape drawn in a palette tone.
pub fn category_name(shape: ShapeKind, tone: usize) -> String {
    format!("{}-{}", shape.name(), TONE_NAMES[tone])
}

/// The nine shape-tone categories with the six spatial predicates.
pub fn default_vocabulary() -> Vocabulary {
    let mut cats = Vec::new();
    for shape in ShapeKind::ALL {
        for tone in 0..TONE_NAMES.len() {
            cats.push(category_name(shape, tone));
        }
    }
    Vocabulary::spatial(cats).expect("built-in vocabulary is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub shape: ShapeKind,
    /// Palette tone (colour group), part of the object category.
    pub tone: usize,
    pub color: [f64; 3],
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeInstance>,
    /// Gradient colours at the top and bottom edge.
    pub background: [[f64; 3]; 2],
}

/// Generator positioned at draw `index` of a task's stream.
pub fn scene_rng(task: &TaskSpec, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(index);
    rng
}

fn background_for(style: BackgroundStyle) -> [[f64; 3]; 2] {
    match style {
        BackgroundStyle::Day => [[0.55, 0.75, 0.95], [0.88, 0.92, 0.96]],
        BackgroundStyle::Dusk => [[0.95, 0.55, 0.25], [0.45, 0.22, 0.35]],
        BackgroundStyle::Night => [[0.02, 0.03, 0.12], [0.12, 0.12, 0.25]],
    }
}

pub fn sample_scene(task: &TaskSpec, rng: &mut impl Rng) -> SceneSpec {
    let attrs = task.attributes;
    let mut background = background_for(attrs.background_style);
    for row in &mut background {
        let j = rng.random_range(-0.03..0.03);
        for c in row.iter_mut() {
            *c = (*c + j).clamp(0.0, 1.0);
        }
    }
    let count = rng.random_range(attrs.density.shape_count_range());
    let (lo, hi) = match attrs.density {
        Density::Sparse => (0.22, 0.45),
        Density::Dense => (0.14, 0.32),
    };
    let tones = attrs.palette.tones();
    let shapes = (0..count)
        .map(|_| {
            let shape = ShapeKind::ALL[rng.random_range(0..3)];
            let tone = rng.random_range(0..3);
            let base = tones[tone];
            let color = if attrs.palette == Palette::Mono {
                let v = (base[0] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                [v, v, v]
            } else {
                let mut c = base;
                for v in c.iter_mut() {
                    *v = (*v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                }
                c
            };
            let w = rng.random_range(lo..hi);
            let h = rng.random_range(lo..hi);
            let x0 = rng.random_range(0.0..1.0 - w);
            let y0 = rng.random_range(0.0..1.0 - h);
            ShapeInstance {
                shape,
                tone,
                color,
                bbox: BoundingBox {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                },
            }
        })
        .collect();
    SceneSpec { shapes, background }
}

pub const MIN_RENDER_SIZE: usize = 16;

/// Rasterise: vertical background gradient, then shapes back-to-front
/// sampled at pixel centres.
pub fn render(scene: &SceneSpec, height: usize, width: usize) -> Result<RgbImage> {
    if height < MIN_RENDER_SIZE || width < MIN_RENDER_SIZE {
        return Err(MigsError::Contract(format!(
            "render size {height}x{width} below {MIN_RENDER_SIZE}"
        )));
    }
    let [top, bottom] = scene.background;
    let mut img = RgbImage::filled(height, width, [0.0; 3]);
    for y in 0..height {
        let t = (y as f64 + 0.5) / height as f64;
        let c = [0, 1, 2].map(|k| top[k] * (1.0 - t) + bottom[k] * t);
        for x in 0..width {
            img.set_pixel(y, x, c);
        }
    }
    for s in &scene.shapes {
        let b = &s.bbox;
        // only pixels whose centres can fall inside the box
        let xs = ((b.x0 * width as f64 - 0.5).floor().max(0.0) as usize)
            ..((b.x1 * width as f64 + 0.5).ceil().min(width as f64) as usize);
        let ys = ((b.y0 * height as f64 - 0.5).floor().max(0.0) as usize)
            ..((b.y1 * height as f64 + 0.5).ceil().min(height as f64) as usize);
        for y in ys {
            let py = (y as f64 + 0.5) / height as f64;
            for x in xs.clone() {
                let px = (x as f64 + 0.5) / width as f64;
                if s.shape.contains(b, px, py) {
                    img.set_pixel(y, x, s.color);
                }
            }
        }
    }
    Ok(img)
}

pub fn build_annotated(
    scene: &SceneSpec,
    task: &TaskSpec,
    vocab: &Vocabulary,
    height: usize,
    width: usize,
) -> Result<AnnotatedScene> {
    let objects = scene
        .shapes
        .iter()
        .map(|s| {
            let name = category_name(s.shape, s.tone);
            vocab
                .object_index(&name)
                .ok_or_else(|| MigsError::Config(format!("vocabulary has no category {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let boxes: Vec<BoundingBox> = scene.shapes.iter().map(|s| s.bbox).collect();
    let edges = infer_spatial_relations(&boxes, vocab)?;
    let image = render(scene, height, width)?;
    AnnotatedScene::new(
        image,
        SceneGraph { objects, edges },
        boxes,
        task.attributes.to_map(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_tasks: usize,
    pub num_test_tasks: usize,
    pub scenes_per_task: usize,
    /// Scenes per task reserved for evaluation (the tail of each task).
    pub test_scenes_per_task: usize,
    /// Largest fine-tuning shot count the dataset must support.
    pub max_shots: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_tasks: 16,
            num_test_tasks: 4,
            scenes_per_task: 64,
            test_scenes_per_task: 32,
            max_shots: 10,
            image_height: 64,
            image_width: 64,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let total = TaskAttributes::all().len();
        if self.num_tasks == 0 || self.num_tasks > total {
            return Err(MigsError::Config(format!(
                "num_tasks must be in 1..={total}"
            )));
        }
        if self.num_test_tasks >= self.num_tasks {
            return Err(MigsError::Config("need at least one training task".into()));
        }
        if self.scenes_per_task < self.max_shots + self.test_scenes_per_task {
            return Err(MigsError::Config(format!(
                "scenes_per_task {} < max_shots {} + test_scenes_per_task {}",
                self.scenes_per_task, self.max_shots, self.test_scenes_per_task
            )));
        }
        if self.image_height < MIN_RENDER_SIZE || self.image_width < MIN_RENDER_SIZE {
            return Err(MigsError::Config("image size below 16".into()));
        }
        Ok(())
    }

    /// Sample the task list and the train/test split.
    pub fn tasks(&self) -> Result<(Vec<TaskSpec>, Vec<String>, Vec<String>)> {
        self.validate()?;
        let mut combos = TaskAttributes::all();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        combos.shuffle(&mut rng);
        combos.truncate(self.num_tasks);
        let tasks: Vec<TaskSpec> = combos
            .into_iter()
            .enumerate()
            .map(|(i, attributes)| TaskSpec {
                task_id: attributes.to_string(),
                attributes,
                seed: splitmix64(self.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            })
            .collect();
        let split = self.num_tasks - self.num_test_tasks;
        let train = tasks[..split].iter().map(|t| t.task_id.clone()).collect();
        let test = tasks[split..].iter().map(|t| t.task_id.clone()).collect();
        Ok((tasks, train, test))
    }
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub vocabulary: Vocabulary,
    pub tasks: Vec<TaskSpec>,
    pub train_task_ids: Vec<String>,
    pub test_task_ids: Vec<String>,
    pub scene_counts: BTreeMap<String, usize>,
    pub image_size: [usize; 2],
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MigsError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| MigsError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(MigsError::Format {
                path: path.to_path_buf(),
                message: format!("unknown manifest version {}", m.format_version),
            });
        }
        Ok(m)
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == id)
    }
}

/// Scenes of one task, split into a fine-tuning pool and a held-out tail.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<AnnotatedScene>,
    pub test: Vec<AnnotatedScene>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tasks: Vec<TaskData>,
}

impl Dataset {
    pub fn task(&self, id: &str) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.spec.task_id == id)
    }

    pub fn train_tasks(&self) -> Vec<&TaskData> {
        self.manifest
            .train_task_ids
            .iter()
            .filter_map(|id| self.task(id))
            .collect()
    }

    pub fn test_tasks(&self) -> Vec<&TaskData> {
        self.manifest
            .test_task_ids
            .iter()
            .filter_map(|id| self.task(id))
            .collect()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }

    /// Build every scene in memory. Pixels are quantised to 8 bits so the
    /// result is identical to what [`Dataset::load`] reads back from disk.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        let (specs, train_ids, test_ids) = config.tasks()?;
        let vocab = default_vocabulary();
        let (h, w) = (config.image_height, config.image_width);
        let mut tasks = Vec::with_capacity(specs.len());
        for spec in &specs {
            let mut scenes = Vec::with_capacity(config.scenes_per_task);
            for k in 0..config.scenes_per_task {
                let scene = sample_scene(spec, &mut scene_rng(spec, k as u64));
                let mut a = build_annotated(&scene, spec, &vocab, h, w)?;
                a.image = RgbImage::from_rgb8(h, w, &a.image.to_rgb8())?;
                scenes.push(a);
            }
            let test = scenes.split_off(config.scenes_per_task - config.test_scenes_per_task);
            tasks.push(TaskData {
                spec: spec.clone(),
                train: scenes,
                test,
            });
        }
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            config: config.clone(),
            vocabulary: vocab,
            scene_counts: specs
                .iter()
                .map(|t| (t.task_id.clone(), config.scenes_per_task))
                .collect(),
            tasks: specs,
            train_task_ids: train_ids,
            test_task_ids: test_ids,
            image_size: [h, w],
        };
        Ok(Self { manifest, tasks })
    }

    /// Read a dataset written by [`generate_dataset`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join("manifest.json"))?;
        let test_n = manifest.config.test_scenes_per_task;
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for spec in &manifest.tasks {
            let n = manifest
                .scene_counts
                .get(&spec.task_id)
                .copied()
                .unwrap_or(0);
            let mut scenes = Vec::with_capacity(n);
            for k in 0..n {
                let p = dir.join(&spec.task_id).join(format!("scene_{k}.json"));
                let s = AnnotatedScene::load(&p)?;
                let violations = crate::scenegraph::validate(&s.graph, &manifest.vocabulary);
                if !violations.is_empty() {
                    return Err(MigsError::Format {
                        path: p,
                        message: format!("{:?}", violations),
                    });
                }
                scenes.push(s);
            }
            let test = scenes.split_off(n.saturating_sub(test_n));
            tasks.push(TaskData {
                spec: spec.clone(),
                train: scenes,
                test,
            });
        }
        Ok(Self { manifest, tasks })
    }
}

/// Write the dataset to `out_dir` (scene files first, manifest last).
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let data = Dataset::generate(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| MigsError::io(out_dir, e))?;
    for task in &data.tasks {
        let dir = out_dir.join(&task.spec.task_id);
        std::fs::create_dir_all(&dir).map_err(|e| MigsError::io(&dir, e))?;
        for (k, scene) in task.train.iter().chain(&task.test).enumerate() {
            scene.save(&dir, &format!("scene_{k}"))?;
        }
    }
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&data.manifest).expect("manifest serialises");
    std::fs::write(&path, text).map_err(|e| MigsError::io(&path, e))?;
    Ok(data.manifest)
}
