//! Permutation-invariant point network with a per-point segmentation branch
//! and a global keypoint-regression branch, trained with hand-derived
//! gradients.
//!
//! ```text
//! x_i (N x d) --encoder MLP (ReLU)--> f_i (N x F) --max over i--> g (F)
//! [f_i | g] --seg MLP (ReLU)--> logits (N x 13) --sigmoid--> p_ik
//! g --reg MLP (ReLU)--> 39 outputs (identity) = 13 x (x, y, z)
//! ```
//!
//! Parameters live in one flat vector. Layers are stored in the order
//! encoder, segmentation head, regression head; each layer is its weight
//! matrix row-major `[out][in]` followed by its bias `[out]`. The first
//! segmentation layer's input columns are the per-point feature followed by
//! the pooled feature.

mod data;
mod train;

pub use data::{augment_rotation, network_input, subsample_cloud, subsample_indices, Example};
pub use train::{
    examples_from_labels, fused_features, learning_rate, predict_keypoints, prepare_examples,
    train, train_on_examples, RunLog, StepRecord, TrainConfig,
};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::io::{read_param_blob, write_param_blob};
use crate::keypoints::NUM_KEYPOINTS;
use crate::rng;

/// Regression outputs: 13 keypoints x 3 coordinates.
pub const REG_OUTPUTS: usize = 3 * NUM_KEYPOINTS;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the shared per-point layers; the last is the pooled width.
    pub encoder: Vec<usize>,
    /// Hidden widths of the segmentation head (before the 13 logits).
    pub seg_hidden: Vec<usize>,
    /// Hidden widths of the regression head (before the 39 outputs).
    pub reg_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: crate::fusion::FUSED_WIDTH,
            encoder: vec![64, 128],
            seg_hidden: vec![64],
            reg_hidden: vec![128],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder.is_empty() {
            return Err(Error::config(
                "network needs a non-empty input and at least one encoder layer",
            ));
        }
        if self
            .encoder
            .iter()
            .chain(&self.seg_hidden)
            .chain(&self.reg_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder.last().expect("validated")
    }

    /// `(out, in)` of every layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &w in &self.encoder {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        let f = self.feature_dim();
        let mut fan_in = 2 * f;
        for &w in self
            .seg_hidden
            .iter()
            .chain(std::iter::once(&NUM_KEYPOINTS))
        {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        let mut fan_in = f;
        for &w in self.reg_hidden.iter().chain(std::iter::once(&REG_OUTPUTS)) {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn n_seg_layers(&self) -> usize {
        self.seg_hidden.len() + 1
    }

    fn n_reg_layers(&self) -> usize {
        self.reg_hidden.len() + 1
    }

    /// Header stored with saved parameters:
    /// `[input_dim, n_enc, enc.., n_seg, seg.., n_reg, reg..]`.
    pub fn to_dims(&self) -> Vec<u32> {
        let mut dims = vec![self.input_dim as u32];
        for widths in [&self.encoder, &self.seg_hidden, &self.reg_hidden] {
            dims.push(widths.len() as u32);
            dims.extend(widths.iter().map(|&w| w as u32));
        }
        dims
    }

    pub fn from_dims(dims: &[u32]) -> Result<Self> {
        let bad = || Error::Format("malformed architecture header".into());
        let mut it = dims.iter().map(|&d| d as usize);
        let input_dim = it.next().ok_or_else(bad)?;
        let mut group = || -> Result<Vec<usize>> {
            let n = it.next().ok_or_else(bad)?;
            (0..n).map(|_| it.next().ok_or_else(bad)).collect()
        };
        let arch = Architecture {
            input_dim,
            encoder: group()?,
            seg_hidden: group()?,
            reg_hidden: group()?,
        };
        if it.next().is_some() {
            return Err(bad());
        }
        arch.validate().map_err(|_| bad())?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointNetParams {
    arch: Architecture,
    values: Vec<f64>,
    /// Start offset of each layer in `values`.
    offsets: Vec<usize>,
}

impl PointNetParams {
    pub fn new(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "architecture needs {} parameters, got {}",
                arch.n_params(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Format("parameters must be finite".into()));
        }
        let mut offsets = Vec::new();
        let mut at = 0;
        for (o, i) in arch.layer_shapes() {
            offsets.push(at);
            at += o * i + o;
        }
        Ok(PointNetParams {
            arch,
            values,
            offsets,
        })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let n = arch.n_params();
        Self::new(arch, vec![0.0; n])
    }

    /// Uniform `[-a, a]` weights with `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn glorot(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = rng::stream(seed, "init", 0);
        for (layer, (o, i)) in p.arch.layer_shapes().into_iter().enumerate() {
            let a = (6.0 / (i + o) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            let start = p.offsets[layer];
            for w in &mut p.values[start..start + o * i] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.values.len());
        for (p, g) in self.values.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    fn layer(&self, index: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (o, i) = self.arch.layer_shapes()[index];
        let start = self.offsets[index];
        let w = ArrayView2::from_shape((o, i), &self.values[start..start + o * i])
            .expect("layer shape");
        let b = ArrayView1::from(&self.values[start + o * i..start + o * i + o]);
        (w, b)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_param_blob(path, &self.arch.to_dims(), &self.values)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (dims, values) = read_param_blob(path)?;
        Self::new(Architecture::from_dims(&dims)?, values)
    }

    fn fingerprint(&self, input: ArrayView2<'_, f64>) -> u64 {
        let mut h = rng::fnv1a(&(input.nrows() as u64).to_le_bytes());
        for v in self.values.iter().chain(input.iter()) {
            h = (h ^ v.to_bits()).wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Activations kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Input followed by every encoder layer's output.
    encoder: Vec<Array2<f64>>,
    /// Row achieving the max for each pooled feature (first on ties).
    argmax: Vec<usize>,
    global: Array1<f64>,
    /// Outputs of the hidden segmentation layers.
    seg_hidden: Vec<Array2<f64>>,
    scores: Array2<f64>,
    /// Pooled feature followed by every hidden regression layer's output.
    reg: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub keypoints: [Point3; NUM_KEYPOINTS],
    /// `N x 13` probabilities.
    pub seg_scores: Array2<f64>,
    pub cache: ForwardCache,
}

fn relu_in_place<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn forward(params: &PointNetParams, input: ArrayView2<'_, f64>) -> Result<ForwardOutput> {
    let arch = &params.arch;
    if input.nrows() == 0 {
        return Err(Error::EmptyCloud);
    }
    if input.ncols() != arch.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, network expects {}",
            input.ncols(),
            arch.input_dim
        )));
    }
    let n_enc = arch.encoder.len();
    let mut encoder = Vec::with_capacity(n_enc + 1);
    encoder.push(input.to_owned());
    for l in 0..n_enc {
        let (w, b) = params.layer(l);
        let mut z = encoder[l].dot(&w.t());
        z += &b;
        relu_in_place(&mut z);
        encoder.push(z);
    }
    let feat = &encoder[n_enc];
    let f = arch.feature_dim();
    let mut argmax = vec![0usize; f];
    let mut global = feat.row(0).to_owned();
    for (i, row) in feat.outer_iter().enumerate().skip(1) {
        for j in 0..f {
            if row[j] > global[j] {
                global[j] = row[j];
                argmax[j] = i;
            }
        }
    }

    let mut seg_hidden = Vec::with_capacity(arch.seg_hidden.len());
    let mut seg_in: Option<Array2<f64>> = None;
    for s in 0..arch.n_seg_layers() {
        let (w, b) = params.layer(n_enc + s);
        let mut z = if s == 0 {
            let mut z = feat.dot(&w.slice(s![.., ..f]).t());
            let shared = w.slice(s![.., f..]).dot(&global) + b;
            z += &shared;
            z
        } else {
            let mut z = seg_in.as_ref().expect("previous layer").dot(&w.t());
            z += &b;
            z
        };
        if s + 1 < arch.n_seg_layers() {
            relu_in_place(&mut z);
            seg_hidden.push(z.clone());
            seg_in = Some(z);
        } else {
            z.mapv_inplace(sigmoid);
            seg_in = Some(z);
        }
    }
    let scores = seg_in.expect("at least one seg layer");

    let mut reg = Vec::with_capacity(arch.n_reg_layers());
    reg.push(global.clone());
    let mut out = Array1::zeros(0);
    for r in 0..arch.n_reg_layers() {
        let (w, b) = params.layer(n_enc + arch.n_seg_layers() + r);
        let mut z = w.dot(&reg[r]) + b;
        if r + 1 < arch.n_reg_layers() {
            relu_in_place(&mut z);
            reg.push(z);
        } else {
            out = z;
        }
    }
    let mut keypoints = [Point3::ZERO; NUM_KEYPOINTS];
    for (k, kp) in keypoints.iter_mut().enumerate() {
        *kp = Point3::new(out[3 * k], out[3 * k + 1], out[3 * k + 2]);
    }

    let cache = ForwardCache {
        fingerprint: params.fingerprint(input),
        encoder,
        argmax,
        global,
        seg_hidden,
        scores: scores.clone(),
        reg,
    };
    Ok(ForwardOutput {
        keypoints,
        seg_scores: scores,
        cache,
    })
}

/// Writes `dW = dZ^T A` and `db = Σ_rows dZ` into the layer's gradient slot.
fn accumulate_layer(
    grad: &mut [f64],
    offset: usize,
    dz: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
) {
    let (o, i) = (dz.ncols(), a.ncols());
    let dw = dz.t().dot(&a);
    let db = dz.sum_axis(Axis(0));
    grad[offset..offset + o * i].copy_from_slice(dw.as_slice().expect("standard layout"));
    grad[offset + o * i..offset + o * i + o]
        .copy_from_slice(db.as_slice().expect("standard layout"));
}

/// Exact gradient of `Σ grad_keypoints · keypoints + Σ grad_seg · seg_scores`
/// with respect to the flat parameter vector.
pub fn backward(
    params: &PointNetParams,
    input: ArrayView2<'_, f64>,
    cache: &ForwardCache,
    grad_keypoints: &[[f64; 3]; NUM_KEYPOINTS],
    grad_seg: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    if params.fingerprint(input) != cache.fingerprint {
        return Err(Error::CacheMismatch(
            "cache was produced by a different forward call".into(),
        ));
    }
    let arch = &params.arch;
    let n = input.nrows();
    if grad_seg.dim() != (n, NUM_KEYPOINTS) {
        return Err(Error::ShapeMismatch(format!(
            "grad_seg is {:?}, expected ({n}, {NUM_KEYPOINTS})",
            grad_seg.dim()
        )));
    }
    let n_enc = arch.encoder.len();
    let n_seg = arch.n_seg_layers();
    let f = arch.feature_dim();
    let feat = &cache.encoder[n_enc];
    let mut grad = vec![0.0; params.len()];

    // Segmentation head, output layer first.
    let p = &cache.scores;
    let mut dz: Array2<f64> = Array2::from_shape_fn((n, NUM_KEYPOINTS), |(i, k)| {
        let pk = p[[i, k]];
        grad_seg[[i, k]] * pk * (1.0 - pk)
    });
    let mut d_feat: Array2<f64>;
    let mut d_global: Array1<f64>;
    let mut s = n_seg - 1;
    loop {
        let layer = n_enc + s;
        let (w, _) = params.layer(layer);
        if s == 0 {
            // Input is [feat | broadcast global].
            let dz_sum = dz.sum_axis(Axis(0));
            let (o, i) = (dz.ncols(), 2 * f);
            let off = params.offsets[layer];
            let dw_local = dz.t().dot(feat);
            for r in 0..o {
                for c in 0..f {
                    grad[off + r * i + c] = dw_local[[r, c]];
                    grad[off + r * i + f + c] = dz_sum[r] * cache.global[c];
                }
                grad[off + o * i + r] = dz_sum[r];
            }
            d_feat = dz.dot(&w.slice(s![.., ..f]));
            d_global = dz_sum.dot(&w.slice(s![.., f..]));
            break;
        }
        let a = &cache.seg_hidden[s - 1];
        accumulate_layer(&mut grad, params.offsets[layer], dz.view(), a.view());
        let mut da = dz.dot(&w);
        da.zip_mut_with(a, |d, &act| {
            if act <= 0.0 {
                *d = 0.0;
            }
        });
        dz = da;
        s -= 1;
    }

    // Regression head.
    let mut dr: Array1<f64> = grad_keypoints.iter().flatten().copied().collect();
    for r in (0..arch.n_reg_layers()).rev() {
        let layer = n_enc + n_seg + r;
        let (w, _) = params.layer(layer);
        let a = &cache.reg[r];
        let off = params.offsets[layer];
        let (o, i) = w.dim();
        for row in 0..o {
            for c in 0..i {
                grad[off + row * i + c] = dr[row] * a[c];
            }
            grad[off + o * i + row] = dr[row];
        }
        let mut da = dr.dot(&w);
        if r > 0 {
            da.zip_mut_with(a, |d, &act| {
                if act <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        dr = da;
    }
    d_global += &dr;

    // Max-pool routes each pooled gradient to its argmax row.
    for (j, &row) in cache.argmax.iter().enumerate() {
        d_feat[[row, j]] += d_global[j];
    }

    // Encoder, last layer first.
    for l in (0..n_enc).rev() {
        let out = &cache.encoder[l + 1];
        d_feat.zip_mut_with(out, |d, &act| {
            if act <= 0.0 {
                *d = 0.0;
            }
        });
        accumulate_layer(
            &mut grad,
            params.offsets[l],
            d_feat.view(),
            cache.encoder[l].view(),
        );
        if l > 0 {
            let (w, _) = params.layer(l);
            d_feat = d_feat.dot(&w);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, STEP};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 16,
            encoder: vec![5, 6],
            seg_hidden: vec![4],
            reg_hidden: vec![3],
        }
    }

    fn random_input(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn layout_and_header_round_trip() {
        let arch = small_arch();
        let shapes = arch.layer_shapes();
        assert_eq!(
            shapes,
            vec![(5, 16), (6, 5), (4, 12), (13, 4), (3, 6), (39, 3)]
        );
        assert_eq!(
            arch.n_params(),
            shapes.iter().map(|(o, i)| o * i + o).sum::<usize>()
        );
        assert_eq!(Architecture::from_dims(&arch.to_dims()).unwrap(), arch);
        assert!(Architecture::from_dims(&[16, 0, 0, 0]).is_err());
        assert!(PointNetParams::new(arch.clone(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn save_load_is_byte_exact() {
        let p = PointNetParams::glorot(small_arch(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        p.save(&path).unwrap();
        let q = PointNetParams::load(&path).unwrap();
        assert_eq!(p, q);
        let bytes_a = std::fs::read(&path).unwrap();
        q.save(&path).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path).unwrap());
        let again = PointNetParams::new(q.architecture().clone(), q.clone().into_values()).unwrap();
        assert!(again
            .values()
            .iter()
            .zip(p.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let arch = Architecture::default();
        let p = PointNetParams::glorot(arch.clone(), 7).unwrap();
        assert_eq!(p, PointNetParams::glorot(arch.clone(), 7).unwrap());
        assert_ne!(p, PointNetParams::glorot(arch.clone(), 8).unwrap());
        for (l, (o, i)) in arch.layer_shapes().into_iter().enumerate() {
            let a = (6.0 / (i + o) as f64).sqrt();
            let (w, b) = p.layer(l);
            assert!(w.iter().all(|v| v.abs() <= a));
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_network() {
        let p = PointNetParams::zeros(small_arch()).unwrap();
        let mut rng = rng::from_seed(1);
        let x = random_input(&mut rng, 7, 16);
        let out = forward(&p, x.view()).unwrap();
        assert!(out.keypoints.iter().all(|k| *k == Point3::ZERO));
        assert!(out.seg_scores.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PointNetParams::zeros(small_arch()).unwrap();
        assert!(matches!(
            forward(&p, Array2::zeros((0, 16)).view()),
            Err(Error::EmptyCloud)
        ));
        assert!(matches!(
            forward(&p, Array2::zeros((3, 15)).view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Unvectorized forward pass written directly from the layer equations.
    fn straight_line_forward(p: &PointNetParams, x: &Array2<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let arch = p.architecture();
        let shapes = arch.layer_shapes();
        let vals = p.values();
        let mut off = 0;
        let mut layers = Vec::new();
        for &(o, i) in &shapes {
            let w: Vec<Vec<f64>> = (0..o)
                .map(|r| vals[off + r * i..off + (r + 1) * i].to_vec())
                .collect();
            let b = vals[off + o * i..off + o * i + o].to_vec();
            layers.push((w, b));
            off += o * i + o;
        }
        let dense = |(w, b): &(Vec<Vec<f64>>, Vec<f64>), v: &[f64], relu: bool| -> Vec<f64> {
            w.iter()
                .zip(b)
                .map(|(row, bias)| {
                    let mut acc = *bias;
                    for c in 0..v.len() {
                        acc += row[c] * v[c];
                    }
                    if relu {
                        acc.max(0.0)
                    } else {
                        acc
                    }
                })
                .collect()
        };
        let n_enc = arch.encoder.len();
        let n_seg = arch.seg_hidden.len() + 1;
        let feats: Vec<Vec<f64>> = x
            .outer_iter()
            .map(|row| {
                let mut v = row.to_vec();
                for l in 0..n_enc {
                    v = dense(&layers[l], &v, true);
                }
                v
            })
            .collect();
        let f = arch.feature_dim();
        let global: Vec<f64> = (0..f)
            .map(|j| feats.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let scores = feats
            .iter()
            .map(|fi| {
                let mut v: Vec<f64> = fi.iter().chain(&global).copied().collect();
                for s in 0..n_seg {
                    v = dense(&layers[n_enc + s], &v, s + 1 < n_seg);
                }
                v.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
            })
            .collect();
        let mut v = global;
        let n_reg = arch.reg_hidden.len() + 1;
        for r in 0..n_reg {
            v = dense(&layers[n_enc + n_seg + r], &v, r + 1 < n_reg);
        }
        (v, scores)
    }

    #[test]
    fn matches_straight_line_reference() {
        let mut rng = rng::from_seed(2);
        for seed in 0..5 {
            let p = PointNetParams::glorot(small_arch(), seed).unwrap();
            let x = random_input(&mut rng, 4, 16);
            let out = forward(&p, x.view()).unwrap();
            let (reg, seg) = straight_line_forward(&p, &x);
            for k in 0..NUM_KEYPOINTS {
                let got = out.keypoints[k].to_array();
                for c in 0..3 {
                    assert!((got[c] - reg[3 * k + c]).abs() < 1e-12);
                }
            }
            for i in 0..4 {
                for k in 0..NUM_KEYPOINTS {
                    assert!((out.seg_scores[[i, k]] - seg[i][k]).abs() < 1e-12);
                }
            }
        }
    }

    fn random_upstream(rng: &mut impl Rng, n: usize) -> ([[f64; 3]; NUM_KEYPOINTS], Array2<f64>) {
        let mut gk = [[0.0; 3]; NUM_KEYPOINTS];
        for g in gk.iter_mut().flatten() {
            *g = rng.random_range(-1.0..1.0);
        }
        (
            gk,
            Array2::from_shape_fn((n, NUM_KEYPOINTS), |_| rng.random_range(-1.0..1.0)),
        )
    }

    /// Scalar whose gradient `backward` computes for the given upstream terms.
    fn probe(
        params: &PointNetParams,
        x: &Array2<f64>,
        gk: &[[f64; 3]; NUM_KEYPOINTS],
        gs: &Array2<f64>,
    ) -> f64 {
        let out = forward(params, x.view()).unwrap();
        let reg: f64 = (0..NUM_KEYPOINTS)
            .map(|k| Point3::from_array(gk[k]).dot(out.keypoints[k]))
            .sum();
        reg + (&out.seg_scores * gs).sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::from_seed(11);
        let archs = [
            small_arch(),
            Architecture {
                input_dim: 16,
                encoder: vec![4],
                seg_hidden: vec![],
                reg_hidden: vec![],
            },
            Architecture {
                input_dim: 16,
                encoder: vec![6, 5, 4],
                seg_hidden: vec![5, 3],
                reg_hidden: vec![4, 3],
            },
        ];
        for trial in 0..20 {
            let arch = archs[trial % archs.len()].clone();
            assert!(arch.n_params() <= 2000);
            // Random biases keep pre-activations away from the ReLU kink.
            let mut values = PointNetParams::glorot(arch.clone(), trial as u64)
                .unwrap()
                .into_values();
            for v in values.iter_mut().filter(|v| **v == 0.0) {
                *v = rng.random_range(-0.5..0.5);
            }
            let p = PointNetParams::new(arch.clone(), values).unwrap();
            let n = rng.random_range(2..7);
            let x = random_input(&mut rng, n, 16);
            let (gk, gs) = random_upstream(&mut rng, n);
            let out = forward(&p, x.view()).unwrap();
            let analytic = backward(&p, x.view(), &out.cache, &gk, gs.view()).unwrap();
            let numeric = central_difference(p.values(), STEP, |v| {
                probe(
                    &PointNetParams::new(arch.clone(), v.to_vec()).unwrap(),
                    &x,
                    &gk,
                    &gs,
                )
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn zero_upstream_and_unused_heads() {
        let p = PointNetParams::glorot(small_arch(), 4).unwrap();
        let mut rng = rng::from_seed(4);
        let x = random_input(&mut rng, 5, 16);
        let out = forward(&p, x.view()).unwrap();
        let zero_seg = Array2::zeros((5, NUM_KEYPOINTS));
        let g = backward(
            &p,
            x.view(),
            &out.cache,
            &[[0.0; 3]; NUM_KEYPOINTS],
            zero_seg.view(),
        )
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let (gk, _) = random_upstream(&mut rng, 5);
        let g = backward(&p, x.view(), &out.cache, &gk, zero_seg.view()).unwrap();
        let arch = p.architecture();
        let seg_start = p.offsets[arch.encoder.len()];
        let reg_start = p.offsets[arch.encoder.len() + arch.n_seg_layers()];
        assert!(g[seg_start..reg_start].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p = PointNetParams::glorot(small_arch(), 5).unwrap();
        let mut rng = rng::from_seed(5);
        let x = random_input(&mut rng, 5, 16);
        let out = forward(&p, x.view()).unwrap();
        let y = random_input(&mut rng, 5, 16);
        let gs = Array2::zeros((5, NUM_KEYPOINTS));
        let gk = [[0.0; 3]; NUM_KEYPOINTS];
        assert!(matches!(
            backward(&p, y.view(), &out.cache, &gk, gs.view()),
            Err(Error::CacheMismatch(_))
        ));
        let q = PointNetParams::glorot(small_arch(), 6).unwrap();
        assert!(matches!(
            backward(&q, x.view(), &out.cache, &gk, gs.view()),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn pooling_ties_route_to_first_row() {
        let p = PointNetParams::glorot(small_arch(), 9).unwrap();
        let row = Array2::from_shape_fn((1, 16), |(_, j)| j as f64 * 0.1 - 0.7);
        let x = ndarray::concatenate(Axis(0), &[row.view(), row.view(), row.view()]).unwrap();
        let out = forward(&p, x.view()).unwrap();
        assert!(out.cache.argmax.iter().all(|&i| i == 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn permutation_invariance_and_equivariance(seed in any::<u64>(), n in 1usize..24) {
            let p = PointNetParams::glorot(Architecture::default(), seed).unwrap();
            let mut rng = rng::from_seed(seed ^ 0x5eed);
            let x = random_input(&mut rng, n, 16);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let xp = x.select(Axis(0), &perm);
            let a = forward(&p, x.view()).unwrap();
            let b = forward(&p, xp.view()).unwrap();
            for k in 0..NUM_KEYPOINTS {
                prop_assert!(a.keypoints[k].distance(b.keypoints[k]) <= 1e-12);
            }
            for (row, &src) in perm.iter().enumerate() {
                for k in 0..NUM_KEYPOINTS {
                    prop_assert!((b.seg_scores[[row, k]] - a.seg_scores[[src, k]]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn flatten_unflatten_is_identity(seed in any::<u64>()) {
            let p = PointNetParams::glorot(small_arch(), seed).unwrap();
            let q = PointNetParams::new(p.architecture().clone(), p.values().to_vec()).unwrap();
            prop_assert!(q.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
