//! Synthetic scenes on a G×G grid, their raster renders, and captions from
//! a fixed template grammar.
//!
//! Captions list the objects in column-major order (by column, then row).
//! Between consecutive objects the grammar emits `left of` when the column
//! increases and `above` when the column is shared. The alternative caption
//! lists the same objects in reverse with `right of` / `below`. Because the
//! gold caption is a canonical function of the scene's objects and their
//! relative order, two scenes match the same gold caption iff their gold
//! strings are equal, which is what `unique_gold` enforces.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fnv1a64, write_atomic};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "bar"];
pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange",
];
pub const SIZES: [&str; 2] = ["small", "large"];

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
];

const FUNCTION_WORDS: [&str; 7] = ["a", "the", "left", "right", "of", "above", "below"];

pub const DATASET_FORMAT: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Cells per grid side (G).
    pub grid: usize,
    /// Raster side in pixels (G'); must be a multiple of `grid`.
    pub raster: usize,
    pub min_objects: usize,
    /// Grammar depth: the most objects one caption chains together.
    pub max_objects: usize,
    pub colors: usize,
    pub shapes: usize,
    pub sizes: usize,
    pub captions_per_scene: usize,
    /// Upper bound on caption content length L.
    pub max_caption_len: usize,
    pub unique_gold: bool,
    /// Probability that a multi-object scene is emitted together with a
    /// twin that swaps two objects' attributes (same bag of words).
    pub twin_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 500,
            val_scenes: 100,
            test_scenes: 200,
            grid: 4,
            raster: 32,
            min_objects: 2,
            max_objects: 2,
            colors: 6,
            shapes: 4,
            sizes: 2,
            captions_per_scene: 2,
            max_caption_len: 10,
            unique_gold: true,
            twin_fraction: 0.5,
        }
    }
}

impl DataConfig {
    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.val_scenes + self.test_scenes
    }

    /// Content length of a caption chaining `k` objects.
    pub fn caption_len(k: usize) -> usize {
        6 * k - 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || !self.raster.is_multiple_of(self.grid) || self.raster / self.grid < 4 {
            return bad(format!(
                "raster {} must be a multiple of grid {} with cells ≥ 4 px",
                self.raster, self.grid
            ));
        }
        if self.min_objects == 0
            || self.min_objects > self.max_objects
            || self.max_objects > self.grid * self.grid
        {
            return bad(format!(
                "object count range {}..={} invalid",
                self.min_objects, self.max_objects
            ));
        }
        if !(1..=COLORS.len()).contains(&self.colors)
            || !(1..=SHAPES.len()).contains(&self.shapes)
            || !(1..=SIZES.len()).contains(&self.sizes)
        {
            return bad("attribute counts out of range".into());
        }
        if !(1..=2).contains(&self.captions_per_scene) {
            return bad("captions_per_scene must be 1 or 2".into());
        }
        if Self::caption_len(self.max_objects) > self.max_caption_len
            || Self::caption_len(self.min_objects) < 3
        {
            return bad(format!(
                "captions of {} objects need {} tokens, max_caption_len is {}",
                self.max_objects,
                Self::caption_len(self.max_objects),
                self.max_caption_len
            ));
        }
        if !(0.0..=1.0).contains(&self.twin_fraction) {
            return bad("twin_fraction must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Number of attribute combinations per object.
    fn attribute_space(&self) -> u64 {
        (self.colors * self.shapes * self.sizes) as u64
    }

    /// How many distinct scenes the config admits: distinct gold captions
    /// when `unique_gold`, distinct grids otherwise.
    pub fn capacity(&self) -> u64 {
        let a = self.attribute_space() as u128;
        let cells = (self.grid * self.grid) as u128;
        let mut total: u128 = 0;
        for k in self.min_objects..=self.max_objects {
            let per_object = a.saturating_pow(k as u32);
            let arrangements = if self.unique_gold {
                relation_patterns(k, self.grid) as u128
            } else {
                binomial(cells, k as u128)
            };
            total = total.saturating_add(per_object.saturating_mul(arrangements));
        }
        total.min(u64::MAX as u128) as u64
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Relation sequences realizable for `k` objects on a `g`-sided grid: runs
/// of `above` fit in one column, the number of `left of` steps fits in g.
fn relation_patterns(k: usize, g: usize) -> u64 {
    if k == 0 {
        return 0;
    }
    (0u64..1 << (k - 1))
        .filter(|&bits| {
            let lefts = bits.count_ones() as usize;
            let mut run = 1;
            let mut max_run = 1;
            for i in 0..k - 1 {
                if bits >> i & 1 == 1 {
                    run = 1;
                } else {
                    run += 1;
                    max_run = max_run.max(run);
                }
            }
            lefts < g && max_run <= g
        })
        .count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: u8,
    pub color: u8,
    pub size: u8,
    pub row: u8,
    pub col: u8,
}

impl Object {
    pub fn phrase(&self) -> String {
        format!(
            "{} {} {}",
            SIZES[self.size as usize], COLORS[self.color as usize], SHAPES[self.shape as usize]
        )
    }

    fn attrs(&self) -> (u8, u8, u8) {
        (self.shape, self.color, self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub split: Split,
    /// Objects ordered by (col, row); at most one per cell.
    pub objects: Vec<Object>,
}

impl Scene {
    fn new(id: u64, split: Split, mut objects: Vec<Object>) -> Self {
        objects.sort_by_key(|o| (o.col, o.row));
        Scene { id, split, objects }
    }

    /// Grid view: cell `row * g + col` holds the object there, if any.
    pub fn grid(&self, g: usize) -> Vec<Option<Object>> {
        let mut cells = vec![None; g * g];
        for o in &self.objects {
            cells[o.row as usize * g + o.col as usize] = Some(*o);
        }
        cells
    }

    /// Caption text; variant 0 is the gold caption.
    pub fn caption_text(&self, variant: usize) -> String {
        let (order, horizontal, vertical): (Vec<&Object>, _, _) = if variant == 0 {
            (self.objects.iter().collect(), "left of", "above")
        } else {
            (self.objects.iter().rev().collect(), "right of", "below")
        };
        let mut text = format!("a {}", order[0].phrase());
        if order.len() == 1 && variant != 0 {
            text = format!("the {}", order[0].phrase());
        }
        for pair in order.windows(2) {
            let rel = if pair[0].col != pair[1].col {
                horizontal
            } else {
                vertical
            };
            text.push_str(&format!(" {rel} a {}", pair[1].phrase()));
        }
        text
    }

    /// Renders the scene as a `[raster, raster, 3]` image with values in [0, 1].
    pub fn render(&self, grid: usize, raster: usize) -> Tensor {
        let cell = raster / grid;
        let mut px = vec![0.0; raster * raster * 3];
        for o in &self.objects {
            let extent = if o.size == 1 { cell - 2 } else { cell / 2 };
            let y0 = o.row as usize * cell + (cell - extent) / 2;
            let x0 = o.col as usize * cell + (cell - extent) / 2;
            let rgb = PALETTE[o.color as usize];
            for dy in 0..extent {
                for dx in 0..extent {
                    if covers(o.shape, extent, dy, dx) {
                        let p = ((y0 + dy) * raster + x0 + dx) * 3;
                        px[p..p + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        Tensor::new(&[raster, raster, 3], px).expect("render is finite")
    }
}

fn covers(shape: u8, extent: usize, dy: usize, dx: usize) -> bool {
    let e = extent as f64;
    let (y, x) = (dy as f64 + 0.5, dx as f64 + 0.5);
    match shape {
        // circle
        0 => (y - e / 2.0).powi(2) + (x - e / 2.0).powi(2) <= (e / 2.0).powi(2),
        // square
        1 => true,
        // triangle, apex up
        2 => (x - e / 2.0).abs() <= y / 2.0,
        // bar: middle band
        _ => y >= e / 3.0 && y <= 2.0 * e / 3.0 + 0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub id: u64,
    pub scene: u64,
    /// BOS-prefixed, EOS-suffixed vocabulary ids.
    pub tokens: Vec<u32>,
    pub text: String,
}

impl Caption {
    /// Tokens strictly between BOS and EOS.
    pub fn content(&self) -> &[u32] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut all: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        all.extend(words.iter().map(|w| w.as_ref().to_string()));
        let mut index = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words: all, index })
    }

    pub fn for_config(cfg: &DataConfig) -> Self {
        let mut words: Vec<&str> = FUNCTION_WORDS.to_vec();
        words.extend(&SIZES[..cfg.sizes]);
        words.extend(&COLORS[..cfg.colors]);
        words.extend(&SHAPES[..cfg.shapes]);
        Self::from_words(&words).expect("grammar words are distinct")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Whitespace tokenization; unknown words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let mut tokens = vec![BOS];
    tokens.extend(text.split_whitespace().map(|w| vocab.id(w)));
    if tokens.len() == 1 {
        return Err(Error::Data("cannot tokenize empty caption".into()));
    }
    tokens.push(EOS);
    Ok(tokens)
}

pub fn detokenize(tokens: &[u32], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .filter(|&&t| t != BOS && t != EOS && t != PAD)
        .map(|&t| vocab.word(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub scenes: Vec<Scene>,
    /// `captions_per_scene` captions per scene, gold first; caption id
    /// `scene * captions_per_scene + variant`.
    pub captions: Vec<Caption>,
}

impl Dataset {
    pub fn scene(&self, id: u64) -> &Scene {
        &self.scenes[id as usize]
    }

    pub fn gold_caption(&self, scene: u64) -> &Caption {
        &self.captions[scene as usize * self.config.captions_per_scene]
    }

    pub fn captions_of(&self, scene: u64) -> &[Caption] {
        let k = self.config.captions_per_scene;
        &self.captions[scene as usize * k..(scene as usize + 1) * k]
    }

    pub fn split(&self, split: Split) -> Vec<&Scene> {
        self.scenes.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_ids(&self, split: Split) -> Vec<u64> {
        self.scenes
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id)
            .collect()
    }

    pub fn render(&self, scene: u64) -> Tensor {
        self.scene(scene)
            .render(self.config.grid, self.config.raster)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(
            out,
            "#fastslow-dataset {DATASET_FORMAT} seed={} config={:016x}",
            self.seed,
            self.config.hash()
        )?;
        writeln!(
            out,
            "{}",
            serde_json::to_string(&Record::Config(self.config.clone())).expect("serializes")
        )?;
        for s in &self.scenes {
            writeln!(
                out,
                "{}",
                serde_json::to_string(&Record::Scene(s.clone())).expect("serializes")
            )?;
        }
        for c in &self.captions {
            let rec = Record::Caption {
                id: c.id,
                scene: c.scene,
                text: c.text.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("serializes"))?;
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file".into()))?;
        let header = header?;
        let (seed, hash) = parse_header(&header).map_err(|m| match m {
            HeaderError::Version(v) => Error::Version {
                found: v,
                expected: DATASET_FORMAT.into(),
            },
            HeaderError::Malformed(m) => parse_err(1, m),
        })?;

        let mut config: Option<DataConfig> = None;
        let mut scenes = Vec::new();
        let mut captions = Vec::new();
        let mut vocab = None;
        let mut last_line = 1;
        for (no, line) in lines {
            let line = line?;
            last_line = no;
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| parse_err(no, e.to_string()))?;
            match rec {
                Record::Config(c) => {
                    if c.hash() != hash {
                        return Err(parse_err(
                            no,
                            format!(
                                "config hash {:016x} does not match header {:016x}",
                                c.hash(),
                                hash
                            ),
                        ));
                    }
                    vocab = Some(Vocabulary::for_config(&c));
                    config = Some(c);
                }
                Record::Scene(s) => {
                    if config.is_none() || s.id != scenes.len() as u64 {
                        return Err(parse_err(no, format!("unexpected scene record {}", s.id)));
                    }
                    scenes.push(s);
                }
                Record::Caption { id, scene, text } => {
                    let v = vocab
                        .as_ref()
                        .ok_or_else(|| parse_err(no, "caption before config".into()))?;
                    if id != captions.len() as u64 || scene >= scenes.len() as u64 {
                        return Err(parse_err(no, format!("unexpected caption record {id}")));
                    }
                    let tokens = tokenize(&text, v).map_err(|e| parse_err(no, e.to_string()))?;
                    captions.push(Caption {
                        id,
                        scene,
                        tokens,
                        text,
                    });
                }
            }
        }
        let config = config.ok_or_else(|| parse_err(last_line, "missing config record".into()))?;
        let expect_captions = config.total_scenes() * config.captions_per_scene;
        if scenes.len() != config.total_scenes() || captions.len() != expect_captions {
            return Err(parse_err(
                last_line,
                format!(
                    "truncated: {} scenes / {} captions, expected {} / {}",
                    scenes.len(),
                    captions.len(),
                    config.total_scenes(),
                    expect_captions
                ),
            ));
        }
        Ok(Dataset {
            vocab: Vocabulary::for_config(&config),
            config,
            seed,
            scenes,
            captions,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Config(DataConfig),
    Scene(Scene),
    Caption { id: u64, scene: u64, text: String },
}

enum HeaderError {
    Version(String),
    Malformed(String),
}

fn parse_header(line: &str) -> std::result::Result<(u64, u64), HeaderError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#fastslow-dataset") {
        return Err(HeaderError::Malformed(format!("bad header {line:?}")));
    }
    let version = parts.next().unwrap_or_default();
    if version != DATASET_FORMAT {
        return Err(HeaderError::Version(version.to_string()));
    }
    let mut seed = None;
    let mut hash = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("seed", v)) => seed = v.parse().ok(),
            Some(("config", v)) => hash = u64::from_str_radix(v, 16).ok(),
            _ => return Err(HeaderError::Malformed(format!("bad header field {kv:?}"))),
        }
    }
    match (seed, hash) {
        (Some(s), Some(h)) => Ok((s, h)),
        _ => Err(HeaderError::Malformed(
            "header needs seed= and config=".into(),
        )),
    }
}

/// Generates a dataset; a pure function of `(config, seed)`.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let requested = config.total_scenes() as u64;
    let available = config.capacity();
    if requested > available {
        return Err(Error::Capacity {
            requested,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<(u8, u8, u8, u8, u8)>> = HashSet::new();
    let mut gold_seen: HashSet<String> = HashSet::new();
    let mut scenes: Vec<Scene> = Vec::with_capacity(requested as usize);
    let g = config.grid;
    let budget = 1000 * requested.max(1) as usize;
    let mut attempts = 0;

    for (split, count) in [
        (Split::Train, config.train_scenes),
        (Split::Val, config.val_scenes),
        (Split::Test, config.test_scenes),
    ] {
        let mut made = 0;
        while made < count {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Capacity {
                    requested,
                    available: scenes.len() as u64,
                });
            }
            let k = rng.gen_range(config.min_objects..=config.max_objects);
            let mut cells: Vec<usize> = (0..g * g).collect();
            cells.shuffle(&mut rng);
            let objects: Vec<Object> = cells[..k]
                .iter()
                .map(|&c| Object {
                    shape: rng.gen_range(0..config.shapes) as u8,
                    color: rng.gen_range(0..config.colors) as u8,
                    size: rng.gen_range(0..config.sizes) as u8,
                    row: (c / g) as u8,
                    col: (c % g) as u8,
                })
                .collect();
            let twin_roll: f64 = rng.gen();
            let swap_colors_only: bool = rng.gen();
            let scene = Scene::new(scenes.len() as u64, split, objects);
            if !admit(config, &scene, &mut seen, &mut gold_seen) {
                continue;
            }
            scenes.push(scene.clone());
            made += 1;

            if k >= 2 && made < count && twin_roll < config.twin_fraction {
                let mut objs = scene.objects.clone();
                let (i, j) = (0, objs.len() - 1);
                if swap_colors_only && objs[i].color != objs[j].color {
                    let c = objs[i].color;
                    objs[i].color = objs[j].color;
                    objs[j].color = c;
                } else {
                    let (a, b) = (objs[i].attrs(), objs[j].attrs());
                    (objs[i].shape, objs[i].color, objs[i].size) = b;
                    (objs[j].shape, objs[j].color, objs[j].size) = a;
                }
                let twin = Scene::new(scenes.len() as u64, split, objs);
                if admit(config, &twin, &mut seen, &mut gold_seen) {
                    scenes.push(twin);
                    made += 1;
                }
            }
        }
    }

    let vocab = Vocabulary::for_config(config);
    let mut captions = Vec::with_capacity(scenes.len() * config.captions_per_scene);
    for s in &scenes {
        for v in 0..config.captions_per_scene {
            let text = s.caption_text(v);
            let tokens = tokenize(&text, &vocab)?;
            captions.push(Caption {
                id: captions.len() as u64,
                scene: s.id,
                tokens,
                text,
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        vocab,
        scenes,
        captions,
    })
}

fn admit(
    config: &DataConfig,
    scene: &Scene,
    seen: &mut HashSet<Vec<(u8, u8, u8, u8, u8)>>,
    gold_seen: &mut HashSet<String>,
) -> bool {
    let key: Vec<_> = scene
        .objects
        .iter()
        .map(|o| (o.shape, o.color, o.size, o.row, o.col))
        .collect();
    if seen.contains(&key) {
        return false;
    }
    if config.unique_gold {
        let gold = scene.caption_text(0);
        if !gold_seen.insert(gold) {
            return false;
        }
    }
    seen.insert(key);
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train_scenes: 30,
            val_scenes: 10,
            test_scenes: 10,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(), 7).unwrap();
        let b = generate_dataset(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(), 8).unwrap();
        assert_ne!(a.scenes, c.scenes);
    }

    #[test]
    fn single_distinct_scene_capacity() {
        let cfg = DataConfig {
            train_scenes: 1,
            val_scenes: 0,
            test_scenes: 0,
            grid: 1,
            raster: 8,
            min_objects: 1,
            max_objects: 1,
            colors: 1,
            shapes: 1,
            sizes: 1,
            captions_per_scene: 1,
            max_caption_len: 4,
            unique_gold: true,
            twin_fraction: 0.0,
        };
        assert_eq!(cfg.capacity(), 1);
        let d = generate_dataset(&cfg, 0).unwrap();
        assert_eq!(d.scenes.len(), 1);
        let two = DataConfig {
            train_scenes: 2,
            ..cfg
        };
        assert!(matches!(
            generate_dataset(&two, 0),
            Err(Error::Capacity {
                requested: 2,
                available: 1
            })
        ));
    }

    #[test]
    fn relation_pattern_counts() {
        // k = 2: {left, above} both fit on any grid with g >= 2.
        assert_eq!(relation_patterns(2, 4), 2);
        assert_eq!(relation_patterns(1, 1), 1);
        assert_eq!(relation_patterns(2, 1), 0);
        // k = 3 on 2×2: "above above" needs 3 rows, "left left" needs 3 columns.
        assert_eq!(relation_patterns(3, 2), 2);
    }

    #[test]
    fn captions_are_well_formed() {
        let d = generate_dataset(&small(), 1).unwrap();
        for c in &d.captions {
            assert_eq!(c.tokens[0], BOS);
            assert_eq!(*c.tokens.last().unwrap(), EOS);
            assert!(!c.content().contains(&PAD));
            let l = c.content().len();
            assert!((3..=d.config.max_caption_len).contains(&l));
        }
        assert_eq!(d.gold_caption(3).scene, 3);
    }

    #[test]
    fn tokenize_edge_cases() {
        let v = Vocabulary::for_config(&DataConfig::default());
        assert!(tokenize("", &v).is_err());
        assert!(tokenize("   ", &v).is_err());
        let t = tokenize("a purple circle", &v).unwrap();
        assert_eq!(t[2], UNK);
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn render_is_pure_and_colored() {
        let d = generate_dataset(&small(), 2).unwrap();
        let a = d.render(0);
        let b = d.render(0);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[32, 32, 3]);
        assert!(a.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let d = generate_dataset(&small(), 3).unwrap();
        assert_eq!(d.split(Split::Train).len(), 30);
        assert_eq!(d.split(Split::Val).len(), 10);
        assert_eq!(d.split(Split::Test).len(), 10);
    }
}
