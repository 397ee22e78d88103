//! Class dependency and pixel relation maps on the mixer features.

use card_core::centers::{batch_centers, flatten_batch, LabelField};
use card_core::model::Model;
use card_core::{Graph, Tensor};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::pnm::{self, Image8};

/// Softmax-normalised center similarities over a split.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyMap {
    /// `N_class × N_class`; rows and columns of absent classes are zero.
    pub matrix: Vec<Vec<f64>>,
    /// Class centers the matrix was computed from.
    pub centers: Vec<Vec<f64>>,
    pub present: Vec<bool>,
}

impl DependencyMap {
    /// Mean of the off-diagonal entries between present classes.
    pub fn off_diagonal_mean(&self) -> f64 {
        let idx: Vec<usize> = (0..self.present.len()).filter(|&k| self.present[k]).collect();
        let mut sum = 0.0;
        let mut n = 0;
        for &i in &idx {
            for &j in &idx {
                if i != j {
                    sum += self.matrix[i][j];
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let n = self.matrix.len();
        let mut s = String::from("class");
        for j in 0..n {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Heatmap with each matrix cell drawn as a `cell × cell` block.
    pub fn to_pgm(&self, cell: usize) -> Image8 {
        let flat: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        upscale(&flat, self.matrix.len(), self.matrix.len(), cell)
    }
}

fn upscale(values: &[f64], h: usize, w: usize, k: usize) -> Image8 {
    let mut big = Vec::with_capacity(h * w * k * k);
    for y in 0..h * k {
        for x in 0..w * k {
            big.push(values[(y / k) * w + x / k]);
        }
    }
    pnm::heatmap(&big, w * k, h * k)
}

/// Centers from ground truth over all of `split` (labels downsampled to
/// the feature grid), then `softmax(μ μᵀ / √C)` over present classes.
pub fn class_dependency_map(model: &Model, split: &[Example]) -> Result<DependencyMap> {
    if split.is_empty() {
        return Err(Error::config("dependency map of an empty split"));
    }
    let n_class = model.cfg.n_class;
    let mut g = Graph::new();
    let mut pairs = Vec::new();
    for chunk in split.chunks(8) {
        let images: Vec<Tensor> = chunk.iter().map(|e| e.sample.image.clone()).collect();
        let labels: Vec<LabelField> = chunk.iter().map(|e| e.sample.labels.clone()).collect();
        let feats = g.constant(model.infer(&images)?.features);
        pairs.push(flatten_batch(&mut g, feats, &labels)?);
    }
    let centers = batch_centers(&mut g, &pairs, true)?;
    let present = centers.present_indices();
    let c = g.shape(centers.mu)[1];
    let mu = g.index_select(centers.mu, 0, &present)?;
    let mu_t = g.transpose(mu)?;
    let dots = g.matmul(mu, mu_t)?;
    let logits = g.scale(dots, 1.0 / (c as f64).sqrt());
    let sim = g.softmax(logits, 1)?;
    let sim = g.value(sim);

    let mut matrix = vec![vec![0.0; n_class]; n_class];
    for (a, &i) in present.iter().enumerate() {
        for (b, &j) in present.iter().enumerate() {
            matrix[i][j] = sim.at(&[a, b]);
        }
    }
    let mu = g.value(centers.mu);
    Ok(DependencyMap {
        matrix,
        centers: mu.data().chunks(c).map(<[f64]>::to_vec).collect(),
        present: centers.present,
    })
}

/// Dot-product similarity of every feature-grid pixel with one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMap {
    pub height: usize,
    pub width: usize,
    /// Anchor position on the feature grid.
    pub anchor: (usize, usize),
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to [0, 1]; all zeros for a constant field.
    pub normalized: Vec<f64>,
}

impl RelationMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.raw.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Heatmap scaled up by `k` per feature pixel.
    pub fn to_pgm(&self, k: usize) -> Image8 {
        upscale(&self.raw, self.height, self.width, k)
    }
}

/// Relation field of the feature-grid pixel covering image pixel `pixel`.
pub fn pixel_relation_map(model: &Model, image: &Tensor, pixel: (usize, usize)) -> Result<RelationMap> {
    let (ih, iw) = (image.shape()[0], image.shape()[1]);
    if pixel.0 >= ih || pixel.1 >= iw {
        return Err(Error::config(format!("pixel {pixel:?} outside {ih}x{iw} image")));
    }
    let feats = model.infer(std::slice::from_ref(image))?.features;
    let [_, h, w, c] = feats.shape()[..] else {
        unreachable!("features are rank 4")
    };
    let anchor = (pixel.0 * h / ih, pixel.1 * w / iw);
    relation_field(&feats.reshape(&[h, w, c])?, anchor)
}

/// Relation field of a `[H, W, C]` feature map around grid position
/// `anchor`.
pub fn relation_field(feats: &Tensor, anchor: (usize, usize)) -> Result<RelationMap> {
    let [h, w, c] = feats.shape()[..] else {
        return Err(Error::config(format!("expected [H,W,C] features, got {:?}", feats.shape())));
    };
    if anchor.0 >= h || anchor.1 >= w {
        return Err(Error::config(format!("anchor {anchor:?} outside {h}x{w} grid")));
    }
    let mut g = Graph::new();
    let x = g.constant(feats.clone().reshape(&[h * w, c])?);
    let a = g.index_select(x, 0, &[anchor.0 * w + anchor.1])?;
    let a_t = g.transpose(a)?;
    let dots = g.matmul(x, a_t)?;
    let raw = g.value(dots).data().to_vec();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = raw
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect();
    Ok(RelationMap {
        height: h,
        width: w,
        anchor,
        raw,
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_is_maximal_for_equal_norm_features() {
        // unit vectors: self similarity 1 dominates
        let t = Tensor::new(&[1, 3, 2], vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0]).unwrap();
        let m = relation_field(&t, (0, 1)).unwrap();
        assert_eq!(m.normalized[1], 1.0);
        assert!(m.raw.iter().all(|&v| v <= m.raw[1]));
    }

    #[test]
    fn constant_features_give_constant_field() {
        let t = Tensor::full(&[2, 2, 3], 0.5);
        let m = relation_field(&t, (1, 0)).unwrap();
        assert!(m.raw.iter().all(|&v| v == 0.75));
        assert!(m.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_bounds_anchor_is_error() {
        assert!(relation_field(&Tensor::zeros(&[2, 2, 1]), (2, 0)).is_err());
    }

    #[test]
    fn off_diagonal_mean_skips_absent() {
        let m = DependencyMap {
            matrix: vec![vec![0.6, 0.4, 0.0], vec![0.2, 0.8, 0.0], vec![0.0; 3]],
            centers: vec![],
            present: vec![true, true, false],
        };
        assert!((m.off_diagonal_mean() - 0.3).abs() < 1e-15);
    }
}
