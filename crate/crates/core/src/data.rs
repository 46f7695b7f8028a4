//! Synthetic shapes dataset for generalized zero-shot segmentation, the
//! frozen class-embedding table, and on-disk dataset I/O.
//!
//! Class 0 is background and counts as seen. Classes `1..seen_classes` are
//! seen shapes; the following `unseen_classes` ids are unseen shapes that
//! only appear in test images. Each unseen class is tied to two seen
//! "parent" classes: its embedding is a noisy blend of theirs and its colour
//! is the midpoint of theirs.

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::rng;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

const UNSEEN_EMBED_NOISE: f64 = 0.05;
const BACKGROUND: [f64; 3] = [0.15, 0.15, 0.15];
const SHAPE_COLORS: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.20, 0.90],
    [0.10, 0.80, 0.20],
    [0.95, 0.90, 0.10],
    [0.10, 0.85, 0.85],
    [1.00, 0.50, 0.00],
    [0.90, 0.90, 0.90],
    [0.55, 0.35, 0.15],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Stripes,
    Checker,
    Cross,
    Diamond,
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "circle" => ShapeKind::Circle,
            "square" => ShapeKind::Square,
            "triangle" => ShapeKind::Triangle,
            "ring" => ShapeKind::Ring,
            "stripes" => ShapeKind::Stripes,
            "checker" => ShapeKind::Checker,
            "cross" => ShapeKind::Cross,
            "diamond" => ShapeKind::Diamond,
            other => return Err(Error::Config(format!("[data] unknown shape generator `{other}`"))),
        })
    }
}

impl ShapeKind {
    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let d2 = dx * dx + dy * dy;
        match self {
            ShapeKind::Circle => d2 <= r * r,
            ShapeKind::Ring => d2 <= r * r && d2 >= 0.3 * r * r,
            ShapeKind::Square | ShapeKind::Stripes | ShapeKind::Checker => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }

    /// Colour multiplier for textured fills at pixel `(x, y)`.
    fn shade(self, x: usize, y: usize) -> f64 {
        match self {
            ShapeKind::Stripes if (y / 3) % 2 == 1 => 0.6,
            ShapeKind::Checker if (x / 4 + y / 4) % 2 == 1 => 0.6,
            _ => 1.0,
        }
    }
}

/// Seen and unseen class registry with frozen unit-norm class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GzlssSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
    embeddings: Tensor,
}

/// The two seen parents of unseen class number `j` (0-based among unseen).
pub fn unseen_parents(seen_classes: usize, j: usize) -> (usize, usize) {
    let shapes = seen_classes - 1;
    (1 + (2 * j) % shapes, 1 + (2 * j + 1) % shapes)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

impl GzlssSplit {
    pub fn new<R: Rng + ?Sized>(cfg: &DataConfig, width: usize, rng: &mut R) -> Self {
        let (s, u) = (cfg.seen_classes, cfg.unseen_classes);
        let mut emb = Tensor::randn(&[s + u, width], 1.0, rng);
        let noise = Normal::new(0.0, UNSEEN_EMBED_NOISE).expect("valid std");
        for c in 0..s {
            normalize(&mut emb.data_mut()[c * width..(c + 1) * width]);
        }
        for j in 0..u {
            let (a, b) = unseen_parents(s, j);
            let row: Vec<f64> = (0..width)
                .map(|i| emb.get(&[a, i]) + emb.get(&[b, i]) + noise.sample(rng))
                .collect();
            let dst = &mut emb.data_mut()[(s + j) * width..(s + j + 1) * width];
            dst.copy_from_slice(&row);
            normalize(dst);
        }
        GzlssSplit {
            seen: (0..s).collect(),
            unseen: (s..s + u).collect(),
            embeddings: emb,
        }
    }

    /// Rebuilds a registry from stored embeddings. Seen ids are
    /// `0..seen_classes`, unseen ids follow.
    pub fn from_embeddings(seen_classes: usize, embeddings: Tensor) -> Result<Self> {
        let c = match *embeddings.shape() {
            [c, _] if c >= seen_classes => c,
            ref s => return Err(Error::Dataset(format!("class embeddings of shape {s:?} do not cover {seen_classes} seen classes plus unseen"))),
        };
        Ok(GzlssSplit {
            seen: (0..seen_classes).collect(),
            unseen: (seen_classes..c).collect(),
            embeddings,
        })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    /// Every class id, seen first.
    pub fn all(&self) -> Vec<usize> {
        self.seen.iter().chain(&self.unseen).copied().collect()
    }

    /// `C × D`, one unit-norm row per class id.
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.contains(&class)
    }

    /// Per-pixel loss targets: the seen-set position of each label, and
    /// `None` for unseen labels so they never contribute to training.
    pub fn training_targets(&self, labels: &LabelMap) -> Result<Vec<Option<usize>>> {
        labels
            .labels()
            .iter()
            .map(|&l| {
                let l = l as usize;
                if let Some(i) = self.seen.iter().position(|&c| c == l) {
                    Ok(Some(i))
                } else if self.is_unseen(l) {
                    Ok(None)
                } else {
                    Err(Error::Dataset(format!("label {l} is not a registered class")))
                }
            })
            .collect()
    }
}

/// Colour of every class id. Unseen classes take the midpoint of their parents.
pub fn class_colors(cfg: &DataConfig) -> Vec<[f64; 3]> {
    let mut colors = vec![BACKGROUND];
    for c in 1..cfg.seen_classes {
        colors.push(SHAPE_COLORS.get(c - 1).copied().unwrap_or_else(|| hue_color(c)));
    }
    for j in 0..cfg.unseen_classes {
        let (a, b) = unseen_parents(cfg.seen_classes, j);
        colors.push([0, 1, 2].map(|k| (colors[a][k] + colors[b][k]) / 2.0));
    }
    colors
}

fn hue_color(c: usize) -> [f64; 3] {
    let h = (c as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

/// Shape generator for every shape class id `1..C`.
pub fn class_generators(cfg: &DataConfig) -> Result<Vec<ShapeKind>> {
    let needed = cfg.num_classes() - 1;
    if cfg.generators.len() < needed {
        return Err(Error::Config(format!(
            "[data] class {} has no registered shape generator ({} generators for {needed} shape classes)",
            cfg.generators.len() + 1,
            cfg.generators.len()
        )));
    }
    cfg.generators[..needed].iter().map(|s| s.parse()).collect()
}

/// One image, its dense labels and the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub seed: u64,
    /// `H × W × 3`, values are multiples of 1/255 in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

impl Sample {
    pub fn classes_present(&self) -> Vec<usize> {
        self.labels.classes_present()
    }
}

/// Draws one scene with shapes from `allowed` classes.
pub fn generate_scene(cfg: &DataConfig, side: usize, allowed: &[usize], seed: u64) -> Result<(Tensor, LabelMap)> {
    let gens = class_generators(cfg)?;
    let colors = class_colors(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = LabelMap::filled(side, side, 0);
    let mut shade = vec![1.0; side * side];
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    for _ in 0..count {
        let class = allowed[rng.random_range(0..allowed.len())];
        let kind = gens[class - 1];
        let r = rng.random_range(cfg.min_size..=cfg.max_size);
        let lo = r * 0.5;
        let hi = (side as f64 - r * 0.5).max(lo);
        let (cx, cy) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        for y in 0..side {
            for x in 0..side {
                if kind.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    labels.set(y, x, class as u8);
                    shade[y * side + x] = kind.shade(x, y);
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut px = Vec::with_capacity(side * side * 3);
    for (i, &l) in labels.labels().iter().enumerate() {
        for c in colors[l as usize] {
            let v = c * shade[i] + if cfg.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            px.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    Ok((Tensor::new(&[side, side, 3], px)?, labels))
}

/// A list of samples plus the class registry sizes they were drawn under.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixel count per class id over the whole set.
    pub fn label_histogram(&self) -> Vec<usize> {
        let classes = self.seen.len() + self.unseen.len();
        let mut h = vec![0; classes];
        for s in &self.samples {
            for (c, n) in s.labels.histogram(classes).into_iter().enumerate() {
                h[c] += n;
            }
        }
        h
    }
}

/// Train images use seen shape classes only; test images use every shape class.
pub fn generate_dataset(cfg: &DataConfig, side: usize, root_seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    class_generators(cfg)?;
    let seen: Vec<usize> = (0..cfg.seen_classes).collect();
    let unseen: Vec<usize> = (cfg.seen_classes..cfg.num_classes()).collect();
    let build = |label: &str, n: usize, allowed: Vec<usize>| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let seed = rng::derive_seed(root_seed, label, i as u64);
            let (image, labels) = generate_scene(cfg, side, &allowed, seed)?;
            samples.push(Sample {
                name: format!("{i:05}"),
                seed,
                image,
                labels,
            });
        }
        Ok(Dataset {
            seen: seen.clone(),
            unseen: unseen.clone(),
            samples,
        })
    };
    let train = build("data.train", cfg.n_train, (1..cfg.seen_classes).collect())?;
    let test = build("data.test", cfg.n_test, (1..cfg.num_classes()).collect())?;
    Ok((train, test))
}

// ------------------------------------------------------------------ disk I/O

const MANIFEST: &str = "manifest.txt";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn encode_pnm(magic: &str, w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

fn decode_pnm(path: &Path, bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit maps are supported"));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != w * h * channels {
        return Err(bad(&format!("payload holds {} bytes, expected {}", payload.len(), w * h * channels)));
    }
    Ok((w, h, payload.to_vec()))
}

/// Binary P6 image bytes.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let [h, w, 3] = *image.shape() else {
        panic!("encode_ppm expects H × W × 3");
    };
    let px: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_pnm("P6", w, h, &px)
}

/// Binary P5 label bytes.
pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    encode_pnm("P5", labels.width(), labels.height(), labels.labels())
}

fn list(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse().map_err(|_| Error::Dataset(format!("bad class id `{v}` in manifest"))))
        .collect()
}

/// Writes `dir/manifest.txt`, `dir/<name>.ppm` and `dir/<name>.pgm`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    writeln!(manifest, "seen {}", list(&ds.seen)).unwrap();
    writeln!(manifest, "unseen {}", list(&ds.unseen)).unwrap();
    for s in &ds.samples {
        write_file(&dir.join(format!("{}.ppm", s.name)), &encode_ppm(&s.image))?;
        write_file(&dir.join(format!("{}.pgm", s.name)), &encode_pgm(&s.labels))?;
        writeln!(manifest, "{} {} {}", s.name, s.seed, list(&s.classes_present())).unwrap();
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<Vec<usize>> {
        let line = lines.next().unwrap_or_default();
        let rest = line
            .strip_prefix(key)
            .ok_or_else(|| Error::Dataset(format!("{}: expected `{key}` line", mpath.display())))?;
        parse_list(rest.trim())
    };
    let seen = header("seen")?;
    let unseen = header("unseen")?;
    let classes = seen.len() + unseen.len();
    let mut samples = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, seed, ..] = parts[..] else {
            return Err(Error::Dataset(format!("{}: malformed line `{line}`", mpath.display())));
        };
        let seed = seed
            .parse()
            .map_err(|_| Error::Dataset(format!("{}: bad seed in `{line}`", mpath.display())))?;
        let ipath = dir.join(format!("{name}.ppm"));
        let bytes = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let (w, h, px) = decode_pnm(&ipath, &bytes, "P6", 3)?;
        let image = Tensor::new(&[h, w, 3], px.iter().map(|&b| b as f64 / 255.0).collect())?;
        let lpath = dir.join(format!("{name}.pgm"));
        let bytes = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
        let (lw, lh, lbl) = decode_pnm(&lpath, &bytes, "P5", 1)?;
        if (lw, lh) != (w, h) {
            return Err(Error::Dataset(format!("{}: label size differs from image", lpath.display())));
        }
        if let Some(&bad) = lbl.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Dataset(format!("{}: label {bad} is not a registered class", lpath.display())));
        }
        samples.push(Sample {
            name: name.to_string(),
            seed,
            image,
            labels: LabelMap::new(lh, lw, lbl),
        });
    }
    Ok(Dataset { seen, unseen, samples })
}
