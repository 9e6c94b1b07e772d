//! Speech-text similarity maps and 2-D projections of hidden states.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::compute::Tensor;
use crate::encoder::{EncoderInput, Modality, Model, ModelError};
use crate::masking::Mask;
use crate::paired::{frame_phonemes, Alignment};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("projection needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("{0} labels for {1} rows")]
    Labels(usize, usize),
    #[error("no heat maps to aggregate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Cosine similarity between every speech row and every text row. Rows of
/// zero norm have similarity 0 with everything.
pub fn similarity_heatmap(speech: &Tensor, text: &Tensor) -> Result<Tensor, DiagError> {
    if speech.cols() != text.cols() {
        return Err(DiagError::Dim(speech.cols(), text.cols()));
    }
    let norms = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect::<Vec<_>>();
    let (ns, nt) = (norms(speech), norms(text));
    let mut data = Vec::with_capacity(speech.rows() * text.rows());
    for i in 0..speech.rows() {
        for j in 0..text.rows() {
            let denom = ns[i] * nt[j];
            let dot: f64 = speech.row(i).iter().zip(text.row(j)).map(|(a, b)| a * b).sum();
            data.push(if denom > 0.0 { dot / denom } else { 0.0 });
        }
    }
    Ok(Tensor::matrix(speech.rows(), text.rows(), data).expect("shape"))
}

/// Bilinear resize with corner alignment.
pub fn bilinear_resize(map: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (r0, c0) = (map.rows(), map.cols());
    let coord = |i: usize, out: usize, src: usize| {
        if out <= 1 || src <= 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (out - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let y = coord(i, rows, r0);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(r0 - 1);
        for j in 0..cols {
            let x = coord(j, cols, c0);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(c0 - 1);
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Min-max normalization to [0, 1]; a constant map becomes all 0.5.
pub fn min_max(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return map.map(|_| 0.5);
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Resizes each map, normalizes it on its own, then averages.
pub fn aggregate_heatmaps(maps: &[Tensor], rows: usize, cols: usize) -> Result<Tensor, DiagError> {
    if maps.is_empty() {
        return Err(DiagError::Empty);
    }
    let mut acc = vec![0.0; rows * cols];
    for m in maps {
        let norm = min_max(&bilinear_resize(m, rows, cols));
        for (a, v) in acc.iter_mut().zip(norm.data()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    Ok(Tensor::matrix(rows, cols, acc.into_iter().map(|v| v / n).collect()).expect("shape"))
}

/// Mean of entries near the main diagonal minus the mean of the rest.
/// Entry `(i, j)` is near when `|i/rows - j/cols| < band`.
pub fn diagonal_dominance(map: &Tensor, band: f64) -> f64 {
    let (r, c) = (map.rows() as f64, map.cols() as f64);
    let (mut near, mut far) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..map.rows() {
        for j in 0..map.cols() {
            let v = map.get(i, j);
            if (i as f64 / r - j as f64 / c).abs() < band {
                near = (near.0 + v, near.1 + 1);
            } else {
                far = (far.0 + v, far.1 + 1);
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    mean(near) - mean(far)
}

/// Matrix as comma-separated rows.
pub fn to_csv(map: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..map.rows() {
        let row: Vec<String> = map.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Plain grayscale PGM; values are clamped to [0, 1].
pub fn to_pgm(map: &Tensor) -> String {
    let mut out = format!("P2\n{} {}\n255\n", map.cols(), map.rows());
    for i in 0..map.rows() {
        let row: Vec<String> = map.row(i).iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

/// Top two principal components of the mean-centred rows. Each component's
/// sign is fixed so its largest-magnitude loading is positive.
pub fn project_2d(states: &Tensor, labels: &[String]) -> Result<Vec<Projected>, DiagError> {
    let (n, d) = (states.rows(), states.cols());
    if n < 3 {
        return Err(DiagError::TooFewRows(n));
    }
    if labels.len() != n {
        return Err(DiagError::Labels(labels.len(), n));
    }
    let x = DMatrix::from_row_slice(n, d, states.data());
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |k: usize| {
        let mut v = eig.eigenvectors.column(order[k]).clone_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        v
    };
    let (c1, c2) = (component(0), if d > 1 { component(1) } else { component(0) * 0.0 });
    let p1 = &centred * c1;
    let p2 = &centred * c2;
    Ok((0..n)
        .map(|i| Projected {
            x: p1[i],
            y: p2[i],
            label: labels[i].clone(),
        })
        .collect())
}

pub fn projection_csv(points: &[Projected]) -> String {
    let mut out = String::from("x,y,modality\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.x, p.y, p.label);
    }
    out
}

/// Which hidden layer to inspect, resolved per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    PrivateOut,
    SharedMid,
    SharedOut,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::PrivateOut, Tap::SharedMid, Tap::SharedOut];

    /// Index into the per-layer states of [`Model::hidden_states`].
    pub fn index(self, model: &Model, modality: Modality) -> usize {
        let private = model.config.private_layers(modality);
        match self {
            Tap::PrivateOut => private,
            Tap::SharedMid => private + model.config.layers_shared.div_ceil(2),
            Tap::SharedOut => private + model.config.layers_shared,
        }
    }
}

/// One aligned utterance: speech features and the phoneme alignment that
/// provides its frame-rate text.
pub struct AlignedPair<'a> {
    pub features: &'a Tensor,
    pub alignment: &'a Alignment,
}

/// Per-utterance heat maps at `tap`, speech rows against text columns.
pub fn pair_heatmaps(model: &Model, pairs: &[AlignedPair], tap: Tap) -> Result<Vec<Tensor>, DiagError> {
    let mut maps = Vec::with_capacity(pairs.len());
    for p in pairs {
        let frames = p.features.rows();
        let hs = model.hidden_states(&EncoderInput::Speech(p.features), &Mask::empty(frames))?;
        let phones = frame_phonemes(p.alignment);
        let ht = model.hidden_states(&EncoderInput::Text(&phones), &Mask::empty(phones.len()))?;
        let s = hs.layer(tap.index(model, Modality::Speech))?;
        let t = ht.layer(tap.index(model, Modality::Text))?;
        maps.push(similarity_heatmap(s, t)?);
    }
    Ok(maps)
}

/// Diagonal dominance of the aggregated map at `tap`.
pub fn alignment_score(model: &Model, pairs: &[AlignedPair], tap: Tap, size: usize, band: f64) -> Result<f64, DiagError> {
    let maps = pair_heatmaps(model, pairs, tap)?;
    Ok(diagonal_dominance(&aggregate_heatmaps(&maps, size, size)?, band))
}

/// Speech and text states at `tap` stacked for projection, tagged by modality.
pub fn modality_states(model: &Model, pairs: &[AlignedPair], tap: Tap) -> Result<(Tensor, Vec<String>), DiagError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for p in pairs {
        let hs = model.hidden_states(&EncoderInput::Speech(p.features), &Mask::empty(p.features.rows()))?;
        let phones = frame_phonemes(p.alignment);
        let ht = model.hidden_states(&EncoderInput::Text(&phones), &Mask::empty(phones.len()))?;
        for (states, modality) in [(&hs, Modality::Speech), (&ht, Modality::Text)] {
            let layer = states.layer(tap.index(model, modality))?;
            rows.extend(layer.to_rows());
            labels.extend(std::iter::repeat_n(modality.as_str().to_string(), layer.rows()));
        }
    }
    let t = Tensor::from_rows(&rows).map_err(|_| DiagError::TooFewRows(0))?;
    Ok((t, labels))
}
