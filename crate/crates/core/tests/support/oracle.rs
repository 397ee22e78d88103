//! Loop-based reference implementations. Plain slices and nested loops
//! only, nothing from the crate under test, so they can serve as
//! independent oracles. Row-major layouts throughout: features are `p × c`,
//! images `h × w × c`.
#![allow(dead_code)]

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Class means of the rows of `x` and per-class pixel counts.
pub fn centers(x: &[f64], c: usize, labels: &[Option<usize>], n_class: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut mu = vec![vec![0.0; c]; n_class];
    let mut counts = vec![0; n_class];
    for (p, l) in labels.iter().enumerate() {
        if let Some(k) = *l {
            counts[k] += 1;
            for ch in 0..c {
                mu[k][ch] += x[p * c + ch];
            }
        }
    }
    for k in 0..n_class {
        if counts[k] > 0 {
            for ch in 0..c {
                mu[k][ch] /= counts[k] as f64;
            }
        }
    }
    (mu, counts)
}

pub fn intra_loss(x: &[f64], c: usize, labels: &[Option<usize>], n_class: usize) -> f64 {
    let (mu, _) = centers(x, c, labels, n_class);
    let mut acc = 0.0;
    let mut valid = 0;
    for (p, l) in labels.iter().enumerate() {
        if let Some(k) = *l {
            valid += 1;
            for ch in 0..c {
                let d = (mu[k][ch] - x[p * c + ch]).abs();
                acc += d * d;
            }
        }
    }
    if valid == 0 {
        0.0
    } else {
        acc / (valid * c) as f64
    }
}

pub fn c2c_loss(x: &[f64], c: usize, labels: &[Option<usize>], n_class: usize, eps0: f64) -> f64 {
    let (mu, counts) = centers(x, c, labels, n_class);
    let present: Vec<usize> = (0..n_class).filter(|&k| counts[k] > 0).collect();
    if present.len() < 2 {
        return 0.0;
    }
    let margin = eps0 / (n_class - 1) as f64;
    let mut acc = 0.0;
    for &i in &present {
        let logits: Vec<f64> = present.iter().map(|&j| dot(&mu[i], &mu[j]) / (c as f64).sqrt()).collect();
        let s = softmax(&logits);
        let mut excess = 0.0;
        for (idx, &j) in present.iter().enumerate() {
            if j != i {
                excess += (s[idx] - margin).max(0.0);
            }
        }
        acc += excess * excess;
    }
    acc / present.len() as f64
}

pub fn c2p_loss(x: &[f64], c: usize, labels: &[Option<usize>], n_class: usize, eps1: f64) -> f64 {
    let (mu, counts) = centers(x, c, labels, n_class);
    let present: Vec<usize> = (0..n_class).filter(|&k| counts[k] > 0).collect();
    let margin = eps1 / (n_class - 1) as f64;
    let mut acc = 0.0;
    let mut valid = 0;
    for (p, l) in labels.iter().enumerate() {
        let Some(own) = *l else { continue };
        valid += 1;
        let xp = &x[p * c..(p + 1) * c];
        let scores: Vec<f64> = present
            .iter()
            .map(|&j| if j == own { dot(&mu[j], &mu[j]) } else { dot(xp, &mu[j]) })
            .collect();
        let s = softmax(&scores);
        let mut excess = 0.0;
        for (idx, &j) in present.iter().enumerate() {
            if j != own {
                excess += (s[idx] - margin).max(0.0);
            }
        }
        acc += excess * excess;
    }
    if valid == 0 {
        0.0
    } else {
        acc / valid as f64
    }
}

/// Mean negative log-likelihood over labelled pixels of `p × k` logits.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[Option<usize>]) -> f64 {
    let mut acc = 0.0;
    let mut valid = 0;
    for (p, l) in labels.iter().enumerate() {
        if let Some(y) = *l {
            let s = softmax(&logits[p * k..(p + 1) * k]);
            acc -= s[y].ln();
            valid += 1;
        }
    }
    acc / valid as f64
}

/// Multi-head scaled dot-product attention over a `len × (heads·d)`
/// sequence.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], len: usize, heads: usize, d: usize) -> Vec<f64> {
    let c = heads * d;
    let mut out = vec![0.0; len * c];
    for h in 0..heads {
        for i in 0..len {
            let qi = &q[i * c + h * d..i * c + (h + 1) * d];
            let scores: Vec<f64> = (0..len)
                .map(|j| dot(qi, &k[j * c + h * d..j * c + (h + 1) * d]) / (d as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for j in 0..len {
                for e in 0..d {
                    out[i * c + h * d + e] += a[j] * v[j * c + h * d + e];
                }
            }
        }
    }
    out
}

/// Same-padded grouped convolution of one `h × w × cin` image with a
/// `k × k × (cin/groups) × cout` kernel. Returns the output and its extent.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    k: usize,
    cout: usize,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let pad = (dilation * (k - 1) / 2) as isize;
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for oc in 0..cout {
                let grp = oc / cout_g;
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride) as isize + (ky * dilation) as isize - pad;
                        let ix = (ox * stride) as isize + (kx * dilation) as isize - pad;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ic in 0..cin_g {
                            let xv = x[(iy as usize * w + ix as usize) * cin + grp * cin_g + ic];
                            let kv = kernel[((ky * k + kx) * cin_g + ic) * cout + oc];
                            acc += xv * kv;
                        }
                    }
                }
                out[(oy * wo + ox) * cout + oc] = acc;
            }
        }
    }
    (out, ho, wo)
}

/// Half-pixel-center bilinear resize of `h × w × c` to `ho × wo × c`.
pub fn bilinear(x: &[f64], h: usize, w: usize, c: usize, ho: usize, wo: usize) -> Vec<f64> {
    fn taps(dst: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
        let scale = in_len as f64 / out_len as f64;
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, src - lo as f64)
    }
    let mut out = vec![0.0; ho * wo * c];
    for oy in 0..ho {
        let (y0, y1, fy) = taps(oy, ho, h);
        for ox in 0..wo {
            let (x0, x1, fx) = taps(ox, wo, w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| x[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * wo + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Row-softmaxed `μ μᵀ / √C` over all classes.
pub fn dependency_matrix(mu: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = mu.first().map_or(1, Vec::len) as f64;
    mu.iter()
        .map(|a| softmax(&mu.iter().map(|b| dot(a, b) / c.sqrt()).collect::<Vec<_>>()))
        .collect()
}

/// Dot product of every pixel of an `h × w × c` map with pixel `(r, q)`.
pub fn relation_field(x: &[f64], h: usize, w: usize, c: usize, r: usize, q: usize) -> Vec<f64> {
    let anchor = &x[(r * w + q) * c..(r * w + q + 1) * c];
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(dot(&x[(i * w + j) * c..(i * w + j + 1) * c], anchor));
        }
    }
    out
}

/// Per-class IOU from paired label streams (`None` = ignored ground truth),
/// and the mean over classes seen in either stream.
pub fn miou(pred: &[usize], gt: &[Option<usize>], n_class: usize) -> (Vec<Option<f64>>, f64) {
    let mut tp = vec![0usize; n_class];
    let mut fp = vec![0usize; n_class];
    let mut fneg = vec![0usize; n_class];
    for (&p, &g) in pred.iter().zip(gt) {
        let Some(g) = g else { continue };
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let ious: Vec<Option<f64>> = (0..n_class)
        .map(|k| {
            let denom = tp[k] + fp[k] + fneg[k];
            (denom > 0).then(|| tp[k] as f64 / denom as f64)
        })
        .collect();
    let seen: Vec<f64> = ious.iter().flatten().copied().collect();
    (ious, seen.iter().sum::<f64>() / seen.len() as f64)
}
