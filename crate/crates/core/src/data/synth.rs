//! Procedural RGB-D glass scenes.
//!
//! A scene is a gradient background with textured rectangles at coherent
//! depths, overlaid by one to four glass panes. Panes show an attenuated
//! view of the background with glare streaks and a faint frame; their depth
//! is a mix of missing readings, see-through background depth and noisy
//! returns from the pane itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::segnet::seeded_rng;
use crate::tensor::Tensor;
use crate::util::write_atomic;

use super::io::{normalize_depth, save_depth_mm, save_mask, save_rgb, DEPTH_MAX_MM, DEPTH_MIN_MM};
use super::manifest::DatasetManifest;
use super::RgbdSample;

/// Smallest height or width the generator accepts.
pub const MIN_SCENE_SIZE: usize = 16;
const MAX_SCENE_SIZE: usize = 2048;
const MAX_GLASS_FRACTION: f64 = 0.6;

const CORPUS_SEED_STREAM: u64 = 3;
const CORPUS_SHUFFLE_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Bright,
    Dark,
    Transparent,
    Cluttered,
}

impl Difficulty {
    pub const ALL: [Difficulty; 5] = [
        Difficulty::Easy,
        Difficulty::Bright,
        Difficulty::Dark,
        Difficulty::Transparent,
        Difficulty::Cluttered,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Bright => "bright",
            Difficulty::Dark => "dark",
            Difficulty::Transparent => "transparent",
            Difficulty::Cluttered => "cluttered",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown difficulty {s:?}")))
    }
}

/// Everything that determines a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecipe {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub pane_count: usize,
    pub difficulty: Difficulty,
    pub depth_dropout_rate: f64,
    pub glare_intensity: f64,
}

impl SceneRecipe {
    /// Draws pane count, dropout rate and glare from `seed` within the
    /// ranges of the difficulty preset.
    pub fn random(seed: u64, height: usize, width: usize, difficulty: Difficulty) -> Self {
        let mut rng = seeded_rng(seed, 0);
        let pane_count = rng.random_range(1..=4);
        let (depth_dropout_rate, glare_intensity) = match difficulty {
            Difficulty::Bright => (rng.random_range(0.7..=0.95), rng.random_range(0.6..=1.0)),
            _ => (rng.random_range(0.3..=0.6), rng.random_range(0.0..=0.3)),
        };
        SceneRecipe {
            seed,
            height,
            width,
            pane_count,
            difficulty,
            depth_dropout_rate,
            glare_intensity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(MIN_SCENE_SIZE..=MAX_SCENE_SIZE).contains(&self.height)
            || !(MIN_SCENE_SIZE..=MAX_SCENE_SIZE).contains(&self.width)
        {
            return bad(format!(
                "scene size {}x{} outside {MIN_SCENE_SIZE}..={MAX_SCENE_SIZE}",
                self.height, self.width
            ));
        }
        if !(1..=4).contains(&self.pane_count) {
            return bad(format!("pane_count {} outside 1..=4", self.pane_count));
        }
        if !(0.0..=1.0).contains(&self.depth_dropout_rate) {
            return bad(format!("depth_dropout_rate {} outside [0, 1]", self.depth_dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.glare_intensity) {
            return bad(format!("glare_intensity {} outside [0, 1]", self.glare_intensity));
        }
        if self.difficulty == Difficulty::Bright
            && (self.depth_dropout_rate < 0.7 || self.glare_intensity < 0.6)
        {
            return bad("bright scenes need dropout >= 0.7 and glare >= 0.6".into());
        }
        Ok(())
    }
}

/// A pane is a parallelogram: rows `y0..y0+h`, and in row `y` the columns
/// `x0 + shear*(y-y0) .. + w`.
#[derive(Clone, Copy, Debug)]
struct Pane {
    y0: usize,
    x0: f64,
    h: usize,
    w: usize,
    shear: f64,
}

impl Pane {
    fn columns(&self, y: usize) -> Option<(usize, usize)> {
        if y < self.y0 || y >= self.y0 + self.h {
            return None;
        }
        let start = (self.x0 + self.shear * (y - self.y0) as f64).round() as usize;
        Some((start, start + self.w))
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        self.columns(y).is_some_and(|(a, b)| x >= a && x < b)
    }

    fn on_edge(&self, y: usize, x: usize) -> bool {
        match self.columns(y) {
            Some((a, b)) => y == self.y0 || y + 1 == self.y0 + self.h || x == a || x + 1 == b,
            None => false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
    color: [f64; 3],
    depth: f64,
    period: usize,
    stripes: bool,
}

fn sample_panes(rng: &mut ChaCha8Rng, recipe: &SceneRecipe) -> Vec<Pane> {
    let (hh, ww) = (recipe.height as f64, recipe.width as f64);
    let mut panes = Vec::with_capacity(recipe.pane_count);
    for _ in 0..recipe.pane_count {
        let h = (rng.random_range(0.25..=0.5) * hh).ceil() as usize;
        let w = (rng.random_range(0.25..=0.5) * ww).ceil() as usize;
        let shear = if rng.random_bool(0.5) {
            rng.random_range(-0.15..=0.15)
        } else {
            0.0
        };
        let drift = shear * (h - 1) as f64;
        let extent = w as f64 + drift.abs();
        let y0 = rng.random_range(0..=recipe.height - h);
        let slack = (ww - extent).max(0.0).floor();
        let x0 = rng.random_range(0.0..=slack).floor() + (-drift).max(0.0);
        panes.push(Pane { y0, x0, h, w, shear });
    }
    panes
}

fn glass_mask(height: usize, width: usize, panes: &[Pane]) -> Mask {
    Mask::from_fn(height, width, |y, x| panes.iter().any(|p| p.contains(y, x)))
}

fn sample_rect(rng: &mut ChaCha8Rng, h: usize, w: usize, center: Option<(usize, usize)>) -> Rect {
    let rh = ((rng.random_range(0.1..=0.35) * h as f64).ceil() as usize).max(2);
    let rw = ((rng.random_range(0.1..=0.35) * w as f64).ceil() as usize).max(2);
    let (cy, cx) = match center {
        Some(c) => c,
        None => (rng.random_range(0..h), rng.random_range(0..w)),
    };
    let y0 = cy.saturating_sub(rh / 2);
    let x0 = cx.saturating_sub(rw / 2);
    Rect {
        y0,
        x0,
        y1: (y0 + rh).min(h),
        x1: (x0 + rw).min(w),
        color: [rng.random(), rng.random(), rng.random()],
        depth: rng.random_range(700.0..=1500.0),
        period: rng.random_range(2..=6),
        stripes: rng.random_bool(0.5),
    }
}

fn clamp_mm(v: f64) -> u16 {
    v.round().clamp(DEPTH_MIN_MM as f64, DEPTH_MAX_MM as f64) as u16
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Renders a scene. The result depends on nothing but the recipe.
///
/// The RGB values are multiples of 1/255 and the depth values are images of
/// whole millimetre readings, so saving and reloading the sample is exact.
pub fn synth_scene(recipe: &SceneRecipe) -> Result<RgbdSample> {
    recipe.validate()?;
    let (h, w) = (recipe.height, recipe.width);
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let normal = |sd: f64| Normal::new(0.0, sd).expect("positive deviation");

    let mut panes = sample_panes(&mut rng, recipe);
    let mut mask = glass_mask(h, w, &panes);
    while panes.len() > 1 && mask.count_ones() as f64 > MAX_GLASS_FRACTION * (h * w) as f64 {
        panes.pop();
        mask = glass_mask(h, w, &panes);
    }

    // Background: two-colour gradient, a tilted far plane and rectangles.
    let c0: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let c1: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let far = rng.random_range(1500.0..=2500.0);
    let tilt = rng.random_range(-200.0..=200.0);

    let mut rects: Vec<Rect> = (0..rng.random_range(2..=5))
        .map(|_| sample_rect(&mut rng, h, w, None))
        .collect();
    if recipe.difficulty == Difficulty::Cluttered {
        for _ in 0..rng.random_range(6..=9) {
            let pane = panes[rng.random_range(0..panes.len())];
            let cy = rng.random_range(pane.y0..pane.y0 + pane.h);
            let (a, b) = pane.columns(cy).expect("row inside pane");
            let cx = rng.random_range(a..b);
            rects.push(sample_rect(&mut rng, h, w, Some((cy, cx))));
        }
    }

    let mut bg_rgb = vec![[0.0f64; 3]; h * w];
    let mut bg_depth = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (y as f64 / h as f64 - 0.5) * dy + (x as f64 / w as f64 - 0.5) * dx + 0.5;
            let t = u.clamp(0.0, 1.0);
            let i = y * w + x;
            for c in 0..3 {
                bg_rgb[i][c] = c0[c] + t * (c1[c] - c0[c]);
            }
            bg_depth[i] = (far + tilt * (y as f64 / h as f64 - 0.5)).clamp(1500.0, 2500.0);
        }
    }
    for r in &rects {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let phase = if r.stripes { x } else { x + y };
                let texture = if (phase / r.period) % 2 == 0 { 0.15 } else { -0.15 };
                let i = y * w + x;
                for c in 0..3 {
                    bg_rgb[i][c] = r.color[c] + texture;
                }
                bg_depth[i] = r.depth;
            }
        }
    }

    // Glass appearance.
    let attenuation = match recipe.difficulty {
        Difficulty::Transparent => rng.random_range(0.95..=1.0),
        Difficulty::Easy => rng.random_range(0.6..=0.85),
        _ => rng.random_range(0.7..=0.9),
    };
    let tint = [0.75, 0.85, 0.9];
    let frame = recipe.difficulty != Difficulty::Transparent;
    let streak_slope = rng.random_range(0.5..=2.0);
    let streak_period = rng.random_range(8.0..=20.0);
    let streak_width = rng.random_range(1.0..=3.0);
    let pane_depths: Vec<f64> = panes.iter().map(|_| rng.random_range(600.0..=1300.0)).collect();

    let mut rgb = vec![0.0f32; 3 * h * w];
    let brightness = if recipe.difficulty == Difficulty::Dark { 0.25 } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut px = bg_rgb[i];
            if let Some(p) = panes.iter().find(|p| p.contains(y, x)) {
                let s = (x as f64 + streak_slope * y as f64).rem_euclid(streak_period);
                let glare = recipe.glare_intensity * (1.0 - (s - streak_period / 2.0).abs() / streak_width).max(0.0);
                let edge = frame && p.on_edge(y, x);
                for c in 0..3 {
                    let mut v = attenuation * px[c] + (1.0 - attenuation) * tint[c] + glare;
                    if edge {
                        v *= 0.8;
                    }
                    px[c] = v;
                }
            }
            for c in 0..3 {
                rgb[c * h * w + i] = quantize(px[c] * brightness);
            }
        }
    }

    // Depth readings in millimetres.
    // Strong light washes out the sensor everywhere, not only on glass.
    let sensor_dropout = if recipe.difficulty == Difficulty::Bright {
        0.5 * recipe.glare_intensity
    } else {
        0.01
    };
    let (quiet, seep, pane_noise) = (normal(8.0), normal(10.0), normal(250.0));
    let mut depth = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mm = match panes.iter().position(|p| p.contains(y, x)) {
                Some(k) => {
                    if rng.random_bool(recipe.depth_dropout_rate) {
                        0
                    } else if rng.random_bool(0.4) {
                        clamp_mm(bg_depth[i] + seep.sample(&mut rng))
                    } else {
                        clamp_mm(pane_depths[k] + pane_noise.sample(&mut rng))
                    }
                }
                None => {
                    if rng.random_bool(sensor_dropout) {
                        0
                    } else {
                        clamp_mm(bg_depth[i] + quiet.sample(&mut rng))
                    }
                }
            };
            depth[i] = normalize_depth(mm);
        }
    }

    let tags = ["synthetic", recipe.difficulty.name()]
        .into_iter()
        .map(String::from)
        .collect();
    Ok(RgbdSample {
        id: format!("synth-{:016x}", recipe.seed),
        rgb: Tensor::new([3, h, w], rgb)?,
        depth: Tensor::new([1, h, w], depth)?,
        mask,
        tags,
    })
}

/// Proportions of each difficulty in a corpus, parsed from
/// `"easy:0.5,bright:0.2"`. Weights are relative and need not sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyMix {
    weights: Vec<(Difficulty, f64)>,
}

impl DifficultyMix {
    pub fn single(d: Difficulty) -> Self {
        DifficultyMix {
            weights: vec![(d, 1.0)],
        }
    }

    /// Equal shares of every difficulty.
    pub fn uniform() -> Self {
        DifficultyMix {
            weights: Difficulty::ALL.iter().map(|&d| (d, 1.0)).collect(),
        }
    }

    /// Sample counts per difficulty summing to `n`, by largest remainder.
    pub fn counts(&self, n: usize) -> Vec<(Difficulty, usize)> {
        let total: f64 = self.weights.iter().map(|w| w.1).sum();
        let exact: Vec<f64> = self.weights.iter().map(|w| w.1 / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &k in order.iter().take(missing) {
            counts[k] += 1;
        }
        self.weights.iter().map(|w| w.0).zip(counts).collect()
    }
}

impl FromStr for DifficultyMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("difficulty mix {s:?}: {msg}"));
        let mut weights: Vec<(Difficulty, f64)> = Vec::new();
        for part in s.split(',').map(str::trim) {
            let (name, value) = part
                .split_once(':')
                .ok_or_else(|| bad(format!("expected name:weight, got {part:?}")))?;
            let d: Difficulty = name.trim().parse().map_err(|e: Error| bad(e.to_string()))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| bad(format!("weight {value:?} is not a number")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("weight {v} must be finite and non-negative")));
            }
            if weights.iter().any(|w| w.0 == d) {
                return Err(bad(format!("{d} listed twice")));
            }
            weights.push((d, v));
        }
        if weights.iter().map(|w| w.1).sum::<f64>() <= 0.0 {
            return Err(bad("weights sum to zero".into()));
        }
        Ok(DifficultyMix { weights })
    }
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub mix: DifficultyMix,
    /// Split names with relative sizes, filled in order by largest
    /// remainder.
    pub splits: Vec<(String, f64)>,
}

impl CorpusSpec {
    pub fn new(count: usize, seed: u64, height: usize, width: usize, mix: DifficultyMix) -> Self {
        CorpusSpec {
            count,
            seed,
            height,
            width,
            mix,
            splits: vec![("train".into(), 0.8), ("val".into(), 0.1), ("test".into(), 0.1)],
        }
    }

    /// The recipe, split and id of every sample, in id order.
    pub fn plan(&self) -> Vec<(String, String, SceneRecipe)> {
        let mut difficulties: Vec<Difficulty> = self
            .mix
            .counts(self.count)
            .into_iter()
            .flat_map(|(d, n)| std::iter::repeat_n(d, n))
            .collect();
        difficulties.shuffle(&mut seeded_rng(self.seed, CORPUS_SHUFFLE_STREAM));

        let split_mix = DifficultyMix {
            weights: self
                .splits
                .iter()
                .enumerate()
                .map(|(k, s)| (Difficulty::ALL[k % 5], s.1))
                .collect(),
        };
        let split_counts = split_mix.counts(self.count);
        let split_names = self
            .splits
            .iter()
            .zip(&split_counts)
            .flat_map(|((name, _), (_, n))| std::iter::repeat_n(name.clone(), *n));

        let mut seeds = seeded_rng(self.seed, CORPUS_SEED_STREAM);
        difficulties
            .into_iter()
            .zip(split_names)
            .enumerate()
            .map(|(k, (d, split))| {
                let recipe = SceneRecipe::random(seeds.next_u64(), self.height, self.width, d);
                (format!("s{k:05}"), split, recipe)
            })
            .collect()
    }

    /// Generates every sample in memory, grouped by split name.
    pub fn generate(&self) -> Result<BTreeMap<String, Vec<RgbdSample>>> {
        let mut out: BTreeMap<String, Vec<RgbdSample>> = BTreeMap::new();
        for (id, split, recipe) in self.plan() {
            let mut sample = synth_scene(&recipe)?;
            sample.id = id;
            out.entry(split).or_default().push(sample);
        }
        Ok(out)
    }
}

/// Writes a generated corpus to `out` in the dataset layout, with a
/// `recipe.json` per sample, `tags.json` and `manifest.json`.
///
/// The tree is assembled in a sibling temporary directory and renamed into
/// place. `out` must not exist or be an empty directory.
pub fn write_corpus(out: &Path, spec: &CorpusSpec) -> Result<DatasetManifest> {
    if spec.splits.len() > 5 || spec.splits.iter().any(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
        return Err(Error::Config("invalid split proportions".into()));
    }
    if spec.splits.iter().map(|s| s.1).sum::<f64>() <= 0.0 {
        return Err(Error::Config("split proportions sum to zero".into()));
    }
    if let Ok(mut entries) = std::fs::read_dir(out) {
        if entries.next().is_some() {
            return Err(Error::data(out, "output directory is not empty"));
        }
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".glassfuse-synth")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    let root = staging.path();

    let mut tags: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (id, split, recipe) in spec.plan() {
        let sample = synth_scene(&recipe)?;
        let dir = root.join(&split).join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_rgb(&dir.join("rgb.png"), &sample.rgb)?;
        let mm: Vec<u16> = sample.depth.data().iter().map(|&v| super::denormalize_depth(v)).collect();
        save_depth_mm(&dir.join("depth.png"), sample.height(), sample.width(), &mm)?;
        save_mask(&dir.join("mask.png"), &sample.mask)?;
        let mut recipe_json = serde_json::to_string_pretty(&recipe)?;
        recipe_json.push('\n');
        write_atomic(&dir.join("recipe.json"), recipe_json.as_bytes())?;
        tags.insert(id, sample.tags);
    }
    for (name, _) in &spec.splits {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut tags_json = serde_json::to_string_pretty(&tags)?;
    tags_json.push('\n');
    write_atomic(&root.join("tags.json"), tags_json.as_bytes())?;

    let manifest = super::build_manifest(root)?;
    write_atomic(&root.join("manifest.json"), manifest.to_json()?.as_bytes())?;

    if out.exists() {
        std::fs::remove_dir(out).map_err(|e| Error::io(out, e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, out).map_err(|e| Error::io(out, e))?;
    super::build_manifest(out)
}
