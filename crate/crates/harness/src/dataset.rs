//! Synthetic segmentation data with biased class co-occurrence.
//!
//! Every image is one textured foreground shape on a textured background.
//! Backgrounds differ mostly by color; foregrounds share a color and differ
//! only in stripe orientation. Training images draw (background,
//! foreground) combinations from a restricted list, so background color is
//! a tempting shortcut for the foreground class. Half of the test images
//! use the held-out combinations, where that shortcut is wrong.

use std::f64::consts::PI;
use std::path::Path;

use card_core::centers::{LabelField, IGNORE};
use card_core::model::Sample;
use card_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{write_file, Error, Result};
use crate::pnm::{self, Image8};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disc,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(ShapeKind::Rect),
            "disc" => Ok(ShapeKind::Disc),
            other => Err(Error::config(format!("unknown shape `{other}` (rect, disc)"))),
        }
    }
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Rect => "rect",
            ShapeKind::Disc => "disc",
        }
    }
}

/// `(background, foreground)` class pair.
pub type Pair = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct BiasSpec {
    pub n_class: usize,
    pub backgrounds: Vec<usize>,
    pub train_pairs: Vec<Pair>,
    pub held_out_pairs: Vec<Pair>,
    pub shapes: Vec<ShapeKind>,
    pub noise_std: f64,
    /// Foreground stripe contrast and period in pixels: the local cue
    /// that separates foreground classes.
    pub stripe_amplitude: f64,
    pub stripe_period: f64,
    pub image_size: usize,
    /// Target share of foreground pixels per image.
    pub fg_fraction: f64,
    /// Mark pixels touching the shape boundary as ignored.
    pub ignore_border: bool,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            n_class: 4,
            backgrounds: vec![0, 1],
            train_pairs: vec![(0, 2), (1, 3)],
            held_out_pairs: vec![(0, 3), (1, 2)],
            shapes: vec![ShapeKind::Rect, ShapeKind::Disc],
            noise_std: 0.08,
            stripe_amplitude: 0.18,
            stripe_period: 4.0,
            image_size: 64,
            fg_fraction: 0.3,
            ignore_border: true,
            n_train: 64,
            n_test: 32,
        }
    }
}

const MAX_CLASSES: usize = 6;

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("dataset: {msg}")));
        if !(2..=MAX_CLASSES).contains(&self.n_class) {
            return bad(format!("n_class must be in 2..={MAX_CLASSES}, got {}", self.n_class));
        }
        if self.train_pairs.is_empty() || self.shapes.is_empty() || self.n_train == 0 {
            return bad("need at least one train pair, one shape and one train image".into());
        }
        for &(bg, fg) in self.train_pairs.iter().chain(&self.held_out_pairs) {
            if bg >= self.n_class || fg >= self.n_class {
                return bad(format!("pair ({bg},{fg}) outside {} classes", self.n_class));
            }
            if !self.backgrounds.contains(&bg) || self.backgrounds.contains(&fg) {
                return bad(format!("pair ({bg},{fg}) must be (background, foreground)"));
            }
        }
        if let Some(p) = self.held_out_pairs.iter().find(|p| self.train_pairs.contains(p)) {
            return bad(format!("pair {p:?} is both a train and a held-out pair"));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction <= 0.5) {
            return bad(format!("fg_fraction must be in (0, 0.5], got {}", self.fg_fraction));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.stripe_amplitude >= 0.0 && self.stripe_amplitude <= 0.45) {
            return bad(format!("stripe_amplitude must be in [0, 0.45], got {}", self.stripe_amplitude));
        }
        if !(self.stripe_period >= 2.0 && self.stripe_period.is_finite()) {
            return bad(format!("stripe_period must be finite and >= 2, got {}", self.stripe_period));
        }
        Ok(())
    }

    /// Pair used by test image `i`: held-out and train pairs alternate.
    fn test_pair(&self, i: usize) -> (Pair, bool) {
        if self.held_out_pairs.is_empty() || i % 2 == 1 {
            let k = if self.held_out_pairs.is_empty() { i } else { i / 2 };
            (self.train_pairs[k % self.train_pairs.len()], false)
        } else {
            (self.held_out_pairs[(i / 2) % self.held_out_pairs.len()], true)
        }
    }

    /// Expected per-class pixel share of the train split (ignore border
    /// off), from the pair rotation and the foreground fraction.
    pub fn expected_train_frequencies(&self) -> Vec<f64> {
        let mut freq = vec![0.0; self.n_class];
        for i in 0..self.n_train {
            let (bg, fg) = self.train_pairs[i % self.train_pairs.len()];
            freq[bg] += 1.0 - self.fg_fraction;
            freq[fg] += self.fg_fraction;
        }
        freq.iter().map(|f| f / self.n_train as f64).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Checker,
    HStripes,
    VStripes,
    Diagonal,
    AntiDiagonal,
}

struct Texture {
    color: [f64; 3],
    pattern: Pattern,
    period: f64,
    amplitude: f64,
}

fn texture(spec: &BiasSpec, class: usize, background: bool) -> Texture {
    const BG: [[f64; 3]; MAX_CLASSES] = [
        [0.25, 0.35, 0.65],
        [0.65, 0.45, 0.25],
        [0.30, 0.60, 0.35],
        [0.60, 0.30, 0.55],
        [0.55, 0.55, 0.30],
        [0.30, 0.55, 0.60],
    ];
    const FG: [Pattern; MAX_CLASSES] = [
        Pattern::VStripes,
        Pattern::Diagonal,
        Pattern::VStripes,
        Pattern::HStripes,
        Pattern::Diagonal,
        Pattern::AntiDiagonal,
    ];
    if background {
        Texture {
            color: BG[class],
            pattern: Pattern::Checker,
            period: 8.0,
            amplitude: 0.05,
        }
    } else {
        Texture {
            color: [0.55, 0.55, 0.55],
            pattern: FG[class],
            period: spec.stripe_period,
            amplitude: spec.stripe_amplitude,
        }
    }
}

impl Texture {
    fn sample(&self, y: f64, x: f64, phase: f64) -> [f64; 3] {
        let w = 2.0 * PI / self.period;
        let s = match self.pattern {
            Pattern::Checker => (w * y + phase).sin().signum() * (w * x + phase).sin().signum(),
            Pattern::HStripes => (w * y + phase).sin(),
            Pattern::VStripes => (w * x + phase).sin(),
            Pattern::Diagonal => (w * (x + y) / 2f64.sqrt() + phase).sin(),
            Pattern::AntiDiagonal => (w * (x - y) / 2f64.sqrt() + phase).sin(),
        };
        self.color.map(|c| c + self.amplitude * s)
    }
}

/// One generated image and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sample: Sample,
    pub pair: Pair,
    pub held_out: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: BiasSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Independent generator per image so splits can be produced in any order.
fn image_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ split.wrapping_mul(0xa076_1d64_78bd_642f));
    r.set_stream(index as u64);
    r
}

fn render(spec: &BiasSpec, pair: Pair, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = spec.image_size;
    let area = spec.fg_fraction * (n * n) as f64;
    let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
    // half extents of the shape's bounding box
    let (hy, hx) = match shape {
        ShapeKind::Rect => {
            let aspect: f64 = rng.random_range(0.7..1.4);
            let w = (area * aspect).sqrt();
            (area / w / 2.0, w / 2.0)
        }
        ShapeKind::Disc => {
            let r = (area / PI).sqrt();
            (r, r)
        }
    };
    let cy = rng.random_range(hy..=(n as f64 - hy));
    let cx = rng.random_range(hx..=(n as f64 - hx));
    let inside = |y: usize, x: usize| {
        let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        match shape {
            ShapeKind::Rect => py.abs() < hy && px.abs() < hx,
            ShapeKind::Disc => py * py + px * px < hy * hy,
        }
    };

    let (bg, fg) = pair;
    let (bt, ft) = (texture(spec, bg, true), texture(spec, fg, false));
    let (bphase, fphase) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(format!("noise: {e}")))?;
    let mut labels = vec![0u8; n * n];
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let is_fg = inside(y, x);
            labels[y * n + x] = if is_fg { fg } else { bg } as u8;
            let rgb = if is_fg {
                ft.sample(y as f64, x as f64, fphase)
            } else {
                bt.sample(y as f64, x as f64, bphase)
            };
            for c in rgb {
                // quantised so images survive an 8-bit round trip exactly
                let v = (c + noise.sample(rng)).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() / 255.0);
            }
        }
    }
    if spec.ignore_border {
        let fgmask: Vec<bool> = labels.iter().map(|&l| l as usize == fg).collect();
        for y in 0..n {
            for x in 0..n {
                let here = fgmask[y * n + x];
                let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                if neighbours.iter().any(|&(a, b)| a < n && b < n && fgmask[a * n + b] != here) {
                    labels[y * n + x] = IGNORE;
                }
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(&[n, n, 3], pixels)?,
        labels: LabelField::new(n, n, spec.n_class, labels)?,
    })
}

pub fn gen_dataset(spec: &BiasSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let train = (0..spec.n_train)
        .map(|i| {
            let pair = spec.train_pairs[i % spec.train_pairs.len()];
            let sample = render(spec, pair, &mut image_rng(seed, 0, i))?;
            Ok(Example {
                sample,
                pair,
                held_out: false,
            })
        })
        .collect::<Result<_>>()?;
    let test = (0..spec.n_test)
        .map(|i| {
            let (pair, held_out) = spec.test_pair(i);
            let sample = render(spec, pair, &mut image_rng(seed, 1, i))?;
            Ok(Example {
                sample,
                pair,
                held_out,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

pub fn to_image8(t: &Tensor) -> Image8 {
    let s = t.shape();
    Image8 {
        height: s[0],
        width: s[1],
        channels: s[2],
        data: t.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
    }
}

pub fn from_image8(img: &Image8) -> Result<Tensor> {
    Ok(Tensor::new(
        &[img.height, img.width, img.channels],
        img.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
    )?)
}

/// Writes `{dir}/{split}/NNNN.ppm` images, `NNNN.pgm` labels and an
/// `index.csv` per split.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    for (name, split) in [("train", &ds.train), ("test", &ds.test)] {
        let mut index = String::from("file,background,foreground,held_out\n");
        for (i, ex) in split.iter().enumerate() {
            let stem = format!("{i:04}");
            pnm::write(&dir.join(name).join(format!("{stem}.ppm")), &to_image8(&ex.sample.image))?;
            let lf = &ex.sample.labels;
            let labels = Image8 {
                width: lf.width(),
                height: lf.height(),
                channels: 1,
                data: lf.raw().to_vec(),
            };
            pnm::write(&dir.join(name).join(format!("{stem}.pgm")), &labels)?;
            index.push_str(&format!("{stem},{},{},{}\n", ex.pair.0, ex.pair.1, ex.held_out as u8));
        }
        write_file(&dir.join(name).join("index.csv"), index.as_bytes())?;
    }
    Ok(())
}

/// Reads a split written by [`save`].
pub fn load_split(dir: &Path, n_class: usize) -> Result<Vec<Example>> {
    let index_path = dir.join("index.csv");
    let text = String::from_utf8(crate::error::read_file(&index_path)?).map_err(|_| Error::Format {
        path: index_path.clone(),
        msg: "not UTF-8".into(),
    })?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| fields.get(i).and_then(|f| f.trim().parse::<usize>().ok());
        let (Some(bg), Some(fg), Some(held)) = (parse(1), parse(2), parse(3)) else {
            return Err(Error::Format {
                path: index_path.clone(),
                msg: format!("bad row `{line}`"),
            });
        };
        let image = from_image8(&pnm::read(&dir.join(format!("{}.ppm", fields[0])))?)?;
        let lab_path = dir.join(format!("{}.pgm", fields[0]));
        let lab = pnm::read(&lab_path)?;
        let labels = LabelField::new(lab.height, lab.width, n_class, lab.data).map_err(|e| Error::Format {
            path: lab_path,
            msg: e.to_string(),
        })?;
        out.push(Example {
            sample: Sample { image, labels },
            pair: (bg, fg),
            held_out: held != 0,
        });
    }
    Ok(out)
}
