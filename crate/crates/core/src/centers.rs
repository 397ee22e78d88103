//! Ground-truth class centers.
//!
//! Labels are flattened next to their feature map into a one-hot matrix
//! `Y_flat` (`HW × N_class`, all-zero rows for ignored pixels) and an ignore
//! mask `sigma`. A class center is the mean feature of every pixel carrying
//! that label across the whole batch: `mu = (Y_flatᵀ · X_flat) / counts`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{one_hot, Tensor};

/// Label value marking pixels excluded from every loss and center.
pub const IGNORE: u8 = 255;

/// Per-pixel class labels of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField {
    height: usize,
    width: usize,
    n_class: usize,
    labels: Vec<u8>,
}

impl LabelField {
    pub fn new(height: usize, width: usize, n_class: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid(
                "label_field",
                format!("{}x{} field needs {} labels, got {}", height, width, height * width, labels.len()),
            ));
        }
        if n_class == 0 || n_class > IGNORE as usize {
            return Err(Error::invalid("label_field", format!("unsupported class count {n_class}")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= n_class) {
            return Err(Error::invalid("label_field", format!("label {bad} >= n_class {n_class}")));
        }
        Ok(LabelField {
            height,
            width,
            n_class,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_class(&self) -> usize {
        self.n_class
    }

    pub fn raw(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        match self.labels[row * self.width + col] {
            IGNORE => None,
            l => Some(l as usize),
        }
    }

    pub fn class_indices(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l != IGNORE).then_some(l as usize))
            .collect()
    }

    /// Nearest-neighbour resampling; each target pixel takes the label under
    /// its centre in source coordinates.
    pub fn downsample_nearest(&self, height: usize, width: usize) -> Result<LabelField> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(Error::invalid(
                "downsample_nearest",
                format!("cannot resample {}x{} labels to {height}x{width}", self.height, self.width),
            ));
        }
        let pick = |dst: usize, src: usize, i: usize| ((2 * i + 1) * src / (2 * dst)).min(src - 1);
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = pick(height, self.height, r);
            for c in 0..width {
                labels.push(self.labels[sr * self.width + pick(width, self.width, c)]);
            }
        }
        LabelField::new(height, width, self.n_class, labels)
    }
}

/// Flattened features and masks of one or more images.
#[derive(Clone, Debug)]
pub struct FlatPair {
    /// `P × C` pixel features.
    pub x: Var,
    /// `P × N_class` one-hot rows (zero where ignored); a graph constant.
    pub y: Var,
    /// `P` entries, 1 where the pixel is ignored.
    pub sigma: Tensor,
    pub labels: Vec<Option<usize>>,
    pub n_class: usize,
}

impl FlatPair {
    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    /// Row indices of non-ignored pixels.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|_| i))
            .collect()
    }
}

/// Flattens an `[H, W, C]` feature map with labels already at the same
/// resolution.
pub fn flatten_pair(g: &mut Graph, x: Var, labels: &LabelField) -> Result<FlatPair> {
    let shape = g.shape(x).to_vec();
    let [h, w, c] = shape[..] else {
        return Err(Error::invalid("flatten_pair", format!("expected [H,W,C] features, got {shape:?}")));
    };
    if (h, w) != (labels.height, labels.width) {
        return Err(Error::shape("flatten_pair", &[h, w], &[labels.height, labels.width]));
    }
    let x = g.reshape(x, &[h * w, c])?;
    flat_from_labels(g, x, labels.class_indices(), labels.n_class)
}

fn flat_from_labels(g: &mut Graph, x: Var, labels: Vec<Option<usize>>, n_class: usize) -> Result<FlatPair> {
    let y = g.constant(one_hot(&labels, n_class)?);
    let sigma = Tensor::new(
        &[labels.len()],
        labels.iter().map(|l| if l.is_some() { 0.0 } else { 1.0 }).collect(),
    )?;
    Ok(FlatPair {
        x,
        y,
        sigma,
        labels,
        n_class,
    })
}

/// Flattens a batched `[N, h, w, C]` feature map, downsampling each label
/// field to `h × w` first. All pixels of the batch end up in one pair.
pub fn flatten_batch(g: &mut Graph, x: Var, labels: &[LabelField]) -> Result<FlatPair> {
    let shape = g.shape(x).to_vec();
    let [n, h, w, c] = shape[..] else {
        return Err(Error::invalid("flatten_batch", format!("expected [N,H,W,C] features, got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::invalid("flatten_batch", format!("{n} feature maps but {} label fields", labels.len())));
    }
    let n_class = labels.first().map_or(0, |l| l.n_class);
    let mut flat = Vec::with_capacity(n * h * w);
    for field in labels {
        if field.n_class != n_class {
            return Err(Error::invalid("flatten_batch", "inconsistent class counts"));
        }
        let field = if (field.height, field.width) == (h, w) {
            field.clone()
        } else {
            field.downsample_nearest(h, w)?
        };
        flat.extend(field.class_indices());
    }
    let x = g.reshape(x, &[n * h * w, c])?;
    flat_from_labels(g, x, flat, n_class)
}

/// Per-class mean features of a batch.
#[derive(Clone, Debug)]
pub struct ClassCenters {
    /// `N_class × C`; rows of absent classes are zero.
    pub mu: Var,
    pub present: Vec<bool>,
    pub counts: Vec<usize>,
}

impl ClassCenters {
    pub fn n_class(&self) -> usize {
        self.present.len()
    }

    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&k| self.present[k]).collect()
    }
}

/// Centers over every pixel of every pair. With `detach`, no gradient flows
/// from the centers back into the features.
pub fn batch_centers(g: &mut Graph, batch: &[FlatPair], detach: bool) -> Result<ClassCenters> {
    let first = batch.first().ok_or_else(|| Error::invalid("batch_centers", "empty batch"))?;
    let n_class = first.n_class;
    let channels = g.shape(first.x)[1];
    for p in batch {
        if p.n_class != n_class || g.shape(p.x)[1] != channels {
            return Err(Error::invalid("batch_centers", "inconsistent channel or class counts"));
        }
    }
    let mut counts = vec![0usize; n_class];
    for k in batch.iter().flat_map(|p| p.labels.iter().flatten()) {
        counts[*k] += 1;
    }
    let xs: Vec<Var> = batch.iter().map(|p| p.x).collect();
    let ys: Vec<Var> = batch.iter().map(|p| p.y).collect();
    let (x, y) = if batch.len() == 1 {
        (xs[0], ys[0])
    } else {
        (g.concat(&xs, 0)?, g.concat(&ys, 0)?)
    };
    let yt = g.transpose(y)?;
    let sums = g.matmul(yt, x)?;
    let inv = Tensor::new(
        &[n_class, 1],
        counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect(),
    )?;
    let inv = g.constant(inv);
    let mut mu = g.mul(sums, inv)?;
    if detach {
        mu = g.stop_gradient(mu);
    }
    Ok(ClassCenters {
        mu,
        present: counts.iter().map(|&c| c > 0).collect(),
        counts,
    })
}

/// Row `i` is the center of pixel `i`'s class, zero where ignored.
pub fn distribute_centers(g: &mut Graph, pair: &FlatPair, centers: &ClassCenters) -> Result<Var> {
    g.matmul(pair.y, centers.mu)
}
