//! Deterministic synthetic segmentation data: background plus one filled
//! ellipse, rectangle or triangle per foreground class, each class with its
//! own colour, under additive Gaussian pixel noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::grid_io::{Grid, GridData, GridElement};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent range, in pixels (radius for ellipses, half-size otherwise).
    pub min_extent: usize,
    pub max_extent: usize,
    /// Smallest visible area a shape may keep after later shapes overlap it.
    pub min_visible: usize,
    /// Per-class colour, one entry per channel.
    pub colors: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            height: 32,
            width: 32,
            classes: 4,
            min_shapes: 3,
            max_shapes: 3,
            min_extent: 5,
            max_extent: 9,
            min_visible: 12,
            colors: vec![
                vec![0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            noise_std: 0.8,
            train: 200,
            test: 50,
            seed: 2022,
        }
    }
}

impl ShapesConfig {
    pub fn channels(&self) -> usize {
        self.colors.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > 256 {
            return bad(format!("class count {} must be in [2, 256]", self.classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.train == 0 || self.test == 0 {
            return bad("train and test counts must be at least 1".into());
        }
        if self.min_shapes > self.max_shapes {
            return bad("min_shapes exceeds max_shapes".into());
        }
        if self.min_extent == 0 || self.min_extent > self.max_extent {
            return bad("shape extent range is empty".into());
        }
        if self.colors.len() != self.classes {
            return bad(format!(
                "{} colours for {} classes",
                self.colors.len(),
                self.classes
            ));
        }
        let ch = self.channels();
        if ch == 0 || self.colors.iter().any(|c| c.len() != ch) {
            return bad("colours must share a positive channel count".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// One image (`H x W x channels`, row-major) with its clean labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Vec<T>,
    pub channels: usize,
    pub label: LabelMap,
}

impl<T: Scalar> Sample<T> {
    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { r0: f64, c0: f64, r1: f64, c1: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, cfg: &ShapesConfig) -> Shape {
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let ext = |rng: &mut ChaCha8Rng| rng.random_range(cfg.min_extent as f64..=cfg.max_extent as f64);
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        match rng.random_range(0..3) {
            0 => Shape::Ellipse {
                cy,
                cx,
                ry: ext(rng),
                rx: ext(rng),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
            1 => {
                let (hy, hx) = (ext(rng), ext(rng));
                Shape::Rect {
                    r0: cy - hy,
                    c0: cx - hx,
                    r1: cy + hy,
                    c1: cx + hx,
                }
            }
            _ => {
                let base = rng.random_range(0.0..std::f64::consts::TAU);
                let mut v = [(0.0, 0.0); 3];
                for (i, p) in v.iter_mut().enumerate() {
                    let a = base + i as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.4..0.4);
                    let r = ext(rng) * 1.4;
                    *p = (cy + r * a.sin(), cx + r * a.cos());
                }
                Shape::Triangle { v }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dy * c + dx * s;
                let v = -dy * s + dx * c;
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::Rect { r0, c0, r1, c1 } => y >= r0 && y <= r1 && x >= c0 && x <= c1,
            Shape::Triangle { v } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d0 = edge(v[0], v[1]);
                let d1 = edge(v[1], v[2]);
                let d2 = edge(v[2], v[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

const MAX_ATTEMPTS: usize = 200;

fn gen_label(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let (h, w) = (cfg.height, cfg.width);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    // Cover every foreground class once before repeating any.
    let mut fg: Vec<u8> = (1..cfg.classes as u8).collect();
    fg.shuffle(rng);
    let classes: Vec<u8> = (0..count)
        .map(|i| {
            if i < fg.len() {
                fg[i]
            } else {
                rng.random_range(1..cfg.classes as u8)
            }
        })
        .collect();
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let mut owner = vec![usize::MAX; h * w];
        for (s, _) in classes.iter().enumerate() {
            let shape = Shape::random(rng, cfg);
            for r in 0..h {
                for c in 0..w {
                    if shape.contains(r as f64, c as f64) {
                        owner[r * w + c] = s;
                    }
                }
            }
        }
        let mut visible = vec![0usize; classes.len()];
        owner.iter().filter(|&&o| o != usize::MAX).for_each(|&o| visible[o] += 1);
        if visible.iter().any(|&v| v < cfg.min_visible) {
            continue 'attempt;
        }
        let data = owner
            .iter()
            .map(|&o| if o == usize::MAX { 0 } else { classes[o] })
            .collect();
        return LabelMap::new(h, w, data);
    }
    Err(Error::Config(format!(
        "could not place {count} shapes with {} visible pixels each in a {h}x{w} image",
        cfg.min_visible
    )))
}

fn gen_sample<T: Scalar>(cfg: &ShapesConfig, seed: u64) -> Result<Sample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = gen_label(cfg, &mut rng)?;
    let ch = cfg.channels();
    let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = Vec::with_capacity(label.len() * ch);
    for &l in label.data() {
        for &base in &cfg.colors[l as usize] {
            image.push(T::lit(base + normal.sample(&mut rng)));
        }
    }
    Ok(Sample {
        image,
        channels: ch,
        label,
    })
}

pub fn gen_shapes<T: Scalar>(cfg: &ShapesConfig) -> Result<Splits<T>> {
    cfg.validate()?;
    let train = (0..cfg.train)
        .map(|i| gen_sample(cfg, derive_seed(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test)
        .map(|i| gen_sample(cfg, derive_seed(cfg.seed, (cfg.train + i) as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Splits { train, test })
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: ShapesConfig,
    /// Relative path to SHA-256 hex digest, in write order.
    pub files: Vec<(String, String)>,
}

fn write_checked(dir: &Path, rel: String, grid: &Grid, files: &mut Vec<(String, String)>) -> Result<()> {
    let bytes = grid.encode()?;
    fs::write(dir.join(&rel), &bytes)?;
    files.push((rel, hex::encode(Sha256::digest(&bytes))));
    Ok(())
}

pub fn image_grid<T: GridElement>(s: &Sample<T>) -> Result<Grid> {
    Grid::new(
        vec![s.height(), s.width(), s.channels],
        T::wrap(s.image.clone()),
    )
}

/// Writes `train/` and `test/` GRID files plus `manifest.json`.
pub fn save_dataset<T: GridElement>(dir: &Path, cfg: &ShapesConfig, splits: &Splits<T>) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    for (name, samples) in [("train", &splits.train), ("test", &splits.test)] {
        fs::create_dir_all(dir.join(name))?;
        for (i, s) in samples.iter().enumerate() {
            write_checked(dir, format!("{name}/{i:05}_image.jgrd"), &image_grid(s)?, &mut files)?;
            write_checked(dir, format!("{name}/{i:05}_label.jgrd"), &Grid::from(&s.label), &mut files)?;
        }
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset<T: GridElement>(dir: &Path) -> Result<(ShapesConfig, Splits<T>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let load = |name: &str, count: usize| -> Result<Vec<Sample<T>>> {
        (0..count)
            .map(|i| {
                let img = crate::grid_io::read_grid(dir.join(format!("{name}/{i:05}_image.jgrd")))?;
                let lab = crate::grid_io::read_grid(dir.join(format!("{name}/{i:05}_label.jgrd")))?;
                if img.dims.len() != 3 {
                    return Err(Error::Format("image grids must be 3-dimensional".into()));
                }
                let channels = img.dims[2];
                let label = LabelMap::try_from(lab)?;
                if img.dims[0] != label.height() || img.dims[1] != label.width() {
                    return Err(Error::shape(format!("{name} sample {i}: image vs label")));
                }
                Ok(Sample {
                    image: T::unwrap(img.data)?,
                    channels,
                    label,
                })
            })
            .collect()
    };
    let train = load("train", manifest.config.train)?;
    let test = load("test", manifest.config.test)?;
    Ok((manifest.config, Splits { train, test }))
}

/// Label maps as a GRID stack `[count, H, W]`.
pub fn labels_grid(labels: &[LabelMap]) -> Result<Grid> {
    let first = labels
        .first()
        .ok_or_else(|| Error::Degenerate("no label maps".into()))?;
    let mut data = Vec::with_capacity(labels.len() * first.len());
    for l in labels {
        l.same_shape(first)?;
        data.extend_from_slice(l.data());
    }
    Grid::new(vec![labels.len(), first.height(), first.width()], GridData::U8(data))
}

pub fn labels_from_grid(grid: Grid) -> Result<Vec<LabelMap>> {
    if grid.dims.len() != 3 {
        return Err(Error::Format("label stack must be 3-dimensional".into()));
    }
    let (n, h, w) = (grid.dims[0], grid.dims[1], grid.dims[2]);
    match grid.data {
        GridData::U8(v) => v
            .chunks_exact(h * w)
            .take(n)
            .map(|c| LabelMap::new(h, w, c.to_vec()))
            .collect(),
        other => Err(Error::Format(format!("labels must be u8, found {:?}", other.dtype()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapesConfig {
        ShapesConfig {
            train: 6,
            test: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_shapes::<f64>(&small()).unwrap();
        let b = gen_shapes::<f64>(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train[0].label, a.test[0].label);
    }

    #[test]
    fn zero_shapes_is_all_background() {
        let cfg = ShapesConfig {
            min_shapes: 0,
            max_shapes: 0,
            ..small()
        };
        let s = gen_shapes::<f32>(&cfg).unwrap();
        assert!(s.train.iter().all(|x| x.label.data().iter().all(|&l| l == 0)));
    }

    #[test]
    fn unsatisfiable_layout_errors() {
        let cfg = ShapesConfig {
            height: 6,
            width: 6,
            min_visible: 30,
            ..small()
        };
        assert!(matches!(gen_shapes::<f64>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(ShapesConfig { classes: 1, colors: vec![vec![0.0]], ..small() }.validate().is_err());
        assert!(ShapesConfig { train: 0, ..small() }.validate().is_err());
        assert!(ShapesConfig { colors: vec![vec![0.0]; 4], ..small() }.validate().is_ok());
        assert!(ShapesConfig { colors: vec![vec![0.0]; 3], ..small() }.validate().is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let splits = gen_shapes::<f32>(&cfg).unwrap();
        let manifest = save_dataset(dir.path(), &cfg, &splits).unwrap();
        assert_eq!(manifest.files.len(), 2 * (6 + 3));
        let (cfg2, back) = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.train, splits.train);
        assert_eq!(back.test, splits.test);
    }
}
