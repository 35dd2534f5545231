//! MLP prediction heads mapping sampled voxel features to per-anchor
//! Gaussian parameters: sigmoid color, clamped sigmoid opacity, normalized
//! quaternion rotation, softplus scale.
//!
//! The backward pass recomputes per-anchor forward traces instead of
//! storing them, so memory stays flat in the anchor count.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_backward, Quaternion};
use crate::rays::AnchorSet;
use crate::voxel::{trilinear_backward, trilinear_sample, VoxelGrid};

/// Opacity clamp: keeps 1/(1−α) bounded in compositing gradients.
pub const OPACITY_EPS: f64 = 1e-6;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d/dx sigmoid(x) = s(1−s).
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// ln(1 + eˣ) in the overflow-free form max(x, 0) + ln1p(e^{−|x|}).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d/dx softplus(x) = sigmoid(x).
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

/// Fully-connected network with rectified-linear hidden layers and a
/// linear output layer. Weights are row-major per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    /// Layer widths: input, hidden..., output.
    pub sizes: Vec<usize>,
    /// weights[l] has sizes[l+1] × sizes[l] entries, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpHead {
    pub fn zeros(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("zero-width MLP layer".into()));
        }
        let weights = sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
        Ok(Self {
            sizes,
            weights,
            biases,
        })
    }

    /// Uniform ±√(6/fan_in) weights, zero biases.
    pub fn init(sizes: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut head = Self::zeros(sizes)?;
        for (l, w) in head.weights.iter_mut().enumerate() {
            let bound = (6.0 / head.sizes[l] as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(head)
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Weights then biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in 0..self.layer_count() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Config(format!(
                "expected {} flat parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in 0..self.layer_count() {
            let (wn, bn) = (self.weights[l].len(), self.biases[l].len());
            self.weights[l].copy_from_slice(&flat[at..at + wn]);
            at += wn;
            self.biases[l].copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
        Ok(())
    }
}

/// One affine layer with optional rectification on the output.
fn layer_forward(head: &MlpHead, l: usize, x: &[f64], rectify: bool) -> Vec<f64> {
    let nin = head.sizes[l];
    let w = &head.weights[l];
    let mut out = head.biases[l].clone();
    for (o, out_o) in out.iter_mut().enumerate() {
        let row = &w[o * nin..(o + 1) * nin];
        for (wi, xi) in row.iter().zip(x) {
            *out_o += wi * xi;
        }
        if rectify && *out_o < 0.0 {
            *out_o = 0.0;
        }
    }
    out
}

/// Raw (pre-activation) head output.
pub fn mlp_forward(head: &MlpHead, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != head.input_size() {
        return Err(Error::Config(format!(
            "MLP expects input size {}, got {}",
            head.input_size(),
            f.len()
        )));
    }
    let nl = head.layer_count();
    let mut x = f.to_vec();
    for l in 0..nl {
        x = layer_forward(head, l, &x, l + 1 < nl);
    }
    Ok(x)
}

/// Forward pass that also returns the input to every layer (the trace the
/// backward pass needs; inputs[l] for l ≥ 1 are post-rectification).
fn mlp_forward_trace(head: &MlpHead, f: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let nl = head.layer_count();
    let mut inputs = Vec::with_capacity(nl);
    let mut x = f.to_vec();
    for l in 0..nl {
        let next = layer_forward(head, l, &x, l + 1 < nl);
        inputs.push(x);
        x = next;
    }
    (x, inputs)
}

/// Gradient buffers shaped like an [`MlpHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(head: &MlpHead) -> Self {
        Self {
            weights: head.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: head.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Same layout as [`MlpHead::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }
}

/// Accumulate parameter gradients for one input and return the gradient on
/// the input feature. Rectified units pass gradient only where their
/// output was positive (ties get 0).
fn mlp_backward(
    head: &MlpHead,
    inputs: &[Vec<f64>],
    upstream: &[f64],
    grads: &mut MlpGrads,
) -> Vec<f64> {
    let mut up = upstream.to_vec();
    for l in (0..head.layer_count()).rev() {
        let x = &inputs[l];
        let (nin, nout) = (head.sizes[l], head.sizes[l + 1]);
        let w = &head.weights[l];
        let gw = &mut grads.weights[l];
        for o in 0..nout {
            grads.biases[l][o] += up[o];
            let row = &mut gw[o * nin..(o + 1) * nin];
            for (gi, xi) in row.iter_mut().zip(x) {
                *gi += up[o] * xi;
            }
        }
        let mut dx = vec![0.0; nin];
        for o in 0..nout {
            let row = &w[o * nin..(o + 1) * nin];
            for (di, wi) in dx.iter_mut().zip(row) {
                *di += up[o] * wi;
            }
        }
        if l > 0 {
            for (di, xi) in dx.iter_mut().zip(x) {
                if *xi <= 0.0 {
                    *di = 0.0;
                }
            }
        }
        up = dx;
    }
    up
}

/// The four prediction heads of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHeads {
    pub color: MlpHead,
    pub opacity: MlpHead,
    pub rotation: MlpHead,
    pub scale: MlpHead,
}

/// Default feature dimension C.
pub const DEFAULT_CHANNELS: usize = 32;
/// Default hidden widths.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

impl DecoderHeads {
    /// Seeded initialization; the rotation head's output bias starts at the
    /// identity quaternion so zero features decode to a valid rotation.
    pub fn init(channels: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let sizes = |out: usize| {
            let mut s = vec![channels];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color = MlpHead::init(sizes(3), &mut rng)?;
        let opacity = MlpHead::init(sizes(1), &mut rng)?;
        let mut rotation = MlpHead::init(sizes(4), &mut rng)?;
        let last = rotation.layer_count() - 1;
        rotation.biases[last].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let scale = MlpHead::init(sizes(3), &mut rng)?;
        Ok(Self {
            color,
            opacity,
            rotation,
            scale,
        })
    }

    pub fn check_input(&self, channels: usize) -> Result<()> {
        for (name, head) in self.iter() {
            if head.input_size() != channels {
                return Err(Error::Config(format!(
                    "{name} head expects {} input channels, grid has {channels}",
                    head.input_size()
                )));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> [(&'static str, &MlpHead); 4] {
        [
            ("color", &self.color),
            ("opacity", &self.opacity),
            ("rotation", &self.rotation),
            ("scale", &self.scale),
        ]
    }
}

/// Gradients for all four heads.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub color: MlpGrads,
    pub opacity: MlpGrads,
    pub rotation: MlpGrads,
    pub scale: MlpGrads,
}

impl DecoderGrads {
    pub fn zeros_like(heads: &DecoderHeads) -> Self {
        Self {
            color: MlpGrads::zeros_like(&heads.color),
            opacity: MlpGrads::zeros_like(&heads.opacity),
            rotation: MlpGrads::zeros_like(&heads.rotation),
            scale: MlpGrads::zeros_like(&heads.scale),
        }
    }
}

/// Decoded splat parameters per anchor (structure of arrays, anchor-major
/// in the order of the [`AnchorSet`]).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub rotations: Vec<Quaternion>,
    pub scales: Vec<Vector3<f64>>,
}

impl GaussianParams {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }
}

/// Counters produced alongside decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Rotations that fell back to identity because the raw norm vanished.
    pub degenerate_rotations: usize,
    /// Anchors outside the grid (decoded from the zero feature).
    pub out_of_bounds_anchors: usize,
}

pub fn decode_color(raw: &[f64]) -> [f64; 3] {
    [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])]
}

pub fn decode_opacity(raw: &[f64]) -> f64 {
    sigmoid(raw[0]).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS)
}

/// Normalized rotation; a vanishing raw norm falls back to the identity
/// quaternion and reports the degeneracy.
pub fn decode_rotation(raw: &[f64]) -> (Quaternion, bool) {
    let q = Quaternion::new(raw[0], raw[1], raw[2], raw[3]);
    match q.normalized() {
        Ok(unit) => (unit, false),
        Err(_) => (Quaternion::IDENTITY, true),
    }
}

pub fn decode_scale(raw: &[f64]) -> Vector3<f64> {
    Vector3::new(
        softplus(raw[0]).max(f64::MIN_POSITIVE),
        softplus(raw[1]).max(f64::MIN_POSITIVE),
        softplus(raw[2]).max(f64::MIN_POSITIVE),
    )
}

/// Sample the grid at every anchor and run all four heads.
pub fn decode_all(
    grid: &VoxelGrid,
    heads: &DecoderHeads,
    anchors: &AnchorSet,
) -> Result<(GaussianParams, DecodeStats)> {
    heads.check_input(grid.channels)?;
    let n = anchors.positions.len();
    let mut params = GaussianParams {
        colors: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
    };
    let mut stats = DecodeStats::default();
    for pos in &anchors.positions {
        let sample = trilinear_sample(grid, pos);
        if !sample.in_bounds {
            stats.out_of_bounds_anchors += 1;
        }
        let f = &sample.features;
        params.colors.push(decode_color(&mlp_forward(&heads.color, f)?));
        params
            .opacities
            .push(decode_opacity(&mlp_forward(&heads.opacity, f)?));
        let (rot, degenerate) = decode_rotation(&mlp_forward(&heads.rotation, f)?);
        if degenerate {
            stats.degenerate_rotations += 1;
        }
        params.rotations.push(rot);
        params.scales.push(decode_scale(&mlp_forward(&heads.scale, f)?));
    }
    Ok((params, stats))
}

/// Upstream gradients on decoded parameters, anchor-major.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    /// Gradient on the unit quaternion, (w, x, y, z).
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vector3<f64>>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            colors: vec![[0.0; 3]; n],
            opacities: vec![0.0; n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }
}

/// All gradients flowing out of the decoder.
#[derive(Debug, Clone)]
pub struct DecoderBackward {
    pub heads: DecoderGrads,
    /// Same layout as `grid.features`.
    pub grid_features: Vec<f64>,
    /// Gradient on each anchor position (informational; positions are
    /// derived from fixed ray geometry and not trained).
    pub positions: Vec<Vector3<f64>>,
}

/// Pull upstream parameter gradients back onto head parameters, grid
/// features, and anchor positions. Recomputes per-anchor forward traces.
pub fn decoder_backward(
    grid: &VoxelGrid,
    heads: &DecoderHeads,
    anchors: &AnchorSet,
    upstream: &ParamGrads,
) -> Result<DecoderBackward> {
    heads.check_input(grid.channels)?;
    let n = anchors.positions.len();
    if upstream.len() != n {
        return Err(Error::Config(format!(
            "upstream gradients cover {} anchors, set has {n}",
            upstream.len()
        )));
    }
    let mut out = DecoderBackward {
        heads: DecoderGrads::zeros_like(heads),
        grid_features: vec![0.0; grid.features.len()],
        positions: vec![Vector3::zeros(); n],
    };
    let mut d_feature = vec![0.0; grid.channels];
    for (a, pos) in anchors.positions.iter().enumerate() {
        let sample = trilinear_sample(grid, pos);
        let f = &sample.features;
        d_feature.fill(0.0);

        // Color: sigmoid per channel.
        let (raw, inputs) = mlp_forward_trace(&heads.color, f);
        let d_raw: Vec<f64> = (0..3)
            .map(|k| upstream.colors[a][k] * sigmoid_grad(raw[k]))
            .collect();
        let df = mlp_backward(&heads.color, &inputs, &d_raw, &mut out.heads.color);
        for (acc, d) in d_feature.iter_mut().zip(&df) {
            *acc += d;
        }

        // Opacity: sigmoid, zero gradient in the clamped tails.
        let (raw, inputs) = mlp_forward_trace(&heads.opacity, f);
        let s = sigmoid(raw[0]);
        let d_raw = if (OPACITY_EPS..=1.0 - OPACITY_EPS).contains(&s) {
            vec![upstream.opacities[a] * s * (1.0 - s)]
        } else {
            vec![0.0]
        };
        let df = mlp_backward(&heads.opacity, &inputs, &d_raw, &mut out.heads.opacity);
        for (acc, d) in d_feature.iter_mut().zip(&df) {
            *acc += d;
        }

        // Rotation: gradient through L2 normalization; the identity
        // fallback is constant, so degenerate raws get zero gradient.
        let (raw, inputs) = mlp_forward_trace(&heads.rotation, f);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d_raw = if norm > 1e-12 {
            normalize_backward(
                &[raw[0], raw[1], raw[2], raw[3]],
                &upstream.rotations[a],
            )
            .to_vec()
        } else {
            vec![0.0; 4]
        };
        let df = mlp_backward(&heads.rotation, &inputs, &d_raw, &mut out.heads.rotation);
        for (acc, d) in d_feature.iter_mut().zip(&df) {
            *acc += d;
        }

        // Scale: softplus.
        let (raw, inputs) = mlp_forward_trace(&heads.scale, f);
        let d_raw: Vec<f64> = (0..3)
            .map(|k| upstream.scales[a][k] * softplus_grad(raw[k]))
            .collect();
        let df = mlp_backward(&heads.scale, &inputs, &d_raw, &mut out.heads.scale);
        for (acc, d) in d_feature.iter_mut().zip(&df) {
            *acc += d;
        }

        out.positions[a] = trilinear_backward(grid, pos, &d_feature, &mut out.grid_features);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridGeometry;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let head = MlpHead::zeros(vec![4, 8, 3]).unwrap();
        let out = mlp_forward(&head, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn identity_single_layer_reproduces_input() {
        let mut head = MlpHead::zeros(vec![3, 3]).unwrap();
        for i in 0..3 {
            head.weights[0][i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 7.0];
        assert_eq!(mlp_forward(&head, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_explicit_matrix_oracle() {
        let mut r = rng(1);
        let mut head = MlpHead::init(vec![5, 7, 4], &mut r).unwrap();
        for b in &mut head.biases {
            for v in b.iter_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
        let x: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        // Oracle: explicit loops with independent index arithmetic.
        let mut hidden = [0.0f64; 7];
        for (o, h) in hidden.iter_mut().enumerate() {
            let mut acc = head.biases[0][o];
            for (i, xi) in x.iter().enumerate() {
                acc += head.weights[0][o * 5 + i] * xi;
            }
            *h = acc.max(0.0);
        }
        let mut expect = [0.0f64; 4];
        for (o, e) in expect.iter_mut().enumerate() {
            let mut acc = head.biases[1][o];
            for (i, hi) in hidden.iter().enumerate() {
                acc += head.weights[1][o * 7 + i] * hi;
            }
            *e = acc;
        }
        let got = mlp_forward(&head, &x).unwrap();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert_relative_eq!(g, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn flatten_round_trips() {
        let mut r = rng(2);
        let head = MlpHead::init(vec![3, 6, 2], &mut r).unwrap();
        let flat = head.flatten();
        assert_eq!(flat.len(), head.parameter_count());
        let mut copy = MlpHead::zeros(vec![3, 6, 2]).unwrap();
        copy.set_from_flat(&flat).unwrap();
        assert_eq!(copy, head);
        assert!(copy.set_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn activation_fixed_points_and_asymptotes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) > 1.0 - 1e-15);
        assert!(sigmoid(-40.0) < 1e-15);
        assert_relative_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(softplus(30.0), 30.0, epsilon = 1e-9);
        // Stable far into both tails.
        assert!(softplus(800.0) == 800.0 && softplus(-800.0) >= 0.0);
        assert!(decode_scale(&[-800.0, 0.0, 800.0]).x > 0.0);
    }

    #[test]
    fn activations_are_strictly_monotone() {
        let mut r = rng(3);
        for _ in 0..1000 {
            let x = r.gen_range(-20.0..20.0);
            let dx = r.gen_range(1e-6..0.5);
            assert!(sigmoid(x + dx) > sigmoid(x));
            assert!(softplus(x + dx) > softplus(x));
        }
    }

    #[test]
    fn decode_ops_match_scalar_oracles() {
        assert_eq!(decode_color(&[0.0, 0.0, 0.0]), [0.5, 0.5, 0.5]);
        let mut r = rng(4);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..4).map(|_| r.gen_range(-5.0..5.0)).collect();
            let c = decode_color(&raw[..3]);
            for k in 0..3 {
                assert_relative_eq!(c[k], 1.0 / (1.0 + (-raw[k]).exp()), epsilon = 1e-12);
            }
            let s = decode_scale(&raw[..3]);
            for k in 0..3 {
                assert_relative_eq!(s[k], (1.0 + raw[k].exp()).ln(), epsilon = 1e-12);
            }
            let (q, degenerate) = decode_rotation(&raw);
            assert!(!degenerate);
            assert_relative_eq!(q.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn opacity_clamps_in_the_tails() {
        assert_eq!(decode_opacity(&[0.0]), 0.5);
        assert_eq!(decode_opacity(&[-20.0]), OPACITY_EPS);
        assert_eq!(decode_opacity(&[20.0]), 1.0 - OPACITY_EPS);
    }

    #[test]
    fn rotation_decode_normalizes_and_falls_back() {
        let (q, degenerate) = decode_rotation(&[2.0, 0.0, 0.0, 0.0]);
        assert!(!degenerate);
        assert_eq!(q, Quaternion::IDENTITY);
        let (q, degenerate) = decode_rotation(&[0.0, 0.0, 0.0, 0.0]);
        assert!(degenerate);
        assert_eq!(q, Quaternion::IDENTITY);
    }

    fn small_grid(seed: u64, channels: usize) -> VoxelGrid {
        let geometry = GridGeometry::new(
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            [3, 3, 3],
        )
        .unwrap();
        let mut grid = VoxelGrid::zeros(geometry, channels);
        let mut r = rng(seed);
        for f in &mut grid.features {
            *f = r.gen_range(-1.0..1.0);
        }
        grid
    }

    fn small_anchors(rng_seed: u64, n: usize) -> AnchorSet {
        let mut r = rng(rng_seed);
        let positions: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    r.gen_range(-0.9..0.9),
                    r.gen_range(-0.9..0.9),
                    r.gen_range(-0.9..0.9),
                )
            })
            .collect();
        let depths = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        AnchorSet {
            anchors_per_ray: n,
            positions,
            depths,
        }
    }

    #[test]
    fn constant_grid_decodes_identical_params() {
        let mut grid = small_grid(5, 4);
        grid.features.fill(0.25);
        let heads = DecoderHeads::init(4, &[8], 7).unwrap();
        let anchors = small_anchors(6, 10);
        let (params, stats) = decode_all(&grid, &heads, &anchors).unwrap();
        assert_eq!(stats, DecodeStats::default());
        // Interpolating a constant field reproduces it only to rounding, so
        // params agree across anchors to the last few ulps, not bitwise.
        for a in 1..10 {
            for k in 0..3 {
                assert_relative_eq!(params.colors[a][k], params.colors[0][k], epsilon = 1e-12);
                assert_relative_eq!(params.scales[a][k], params.scales[0][k], epsilon = 1e-12);
            }
            assert_relative_eq!(params.opacities[a], params.opacities[0], epsilon = 1e-12);
            assert_relative_eq!(params.rotations[a].w, params.rotations[0].w, epsilon = 1e-12);
            assert_relative_eq!(params.rotations[a].x, params.rotations[0].x, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_anchor_decodes_the_zero_feature() {
        let grid = small_grid(8, 4);
        let heads = DecoderHeads::init(4, &[8], 9).unwrap();
        let anchors = AnchorSet {
            anchors_per_ray: 1,
            positions: vec![Vector3::new(5.0, 0.0, 0.0)],
            depths: vec![1.0],
        };
        let (params, stats) = decode_all(&grid, &heads, &anchors).unwrap();
        assert_eq!(stats.out_of_bounds_anchors, 1);
        let zf = vec![0.0; 4];
        assert_eq!(
            params.colors[0],
            decode_color(&mlp_forward(&heads.color, &zf).unwrap())
        );
        // Zero feature + identity rotation bias → identity quaternion.
        assert_relative_eq!(params.rotations[0].w.abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn decode_all_composes_the_individual_ops() {
        let grid = small_grid(10, 3);
        let heads = DecoderHeads::init(3, &[8, 8], 11).unwrap();
        let anchors = small_anchors(12, 5);
        let (params, _) = decode_all(&grid, &heads, &anchors).unwrap();
        for (a, pos) in anchors.positions.iter().enumerate() {
            let f = trilinear_sample(&grid, pos).features;
            assert_eq!(
                params.colors[a],
                decode_color(&mlp_forward(&heads.color, &f).unwrap())
            );
            assert_eq!(
                params.opacities[a],
                decode_opacity(&mlp_forward(&heads.opacity, &f).unwrap())
            );
            assert_eq!(
                params.scales[a],
                decode_scale(&mlp_forward(&heads.scale, &f).unwrap())
            );
        }
    }

    #[test]
    fn decoded_ranges_hold_for_random_inputs() {
        let mut r = rng(13);
        for trial in 0..50 {
            let grid = small_grid(100 + trial, 4);
            let heads = DecoderHeads::init(4, &[8], 200 + trial).unwrap();
            let anchors = small_anchors(300 + trial, 8);
            let (params, _) = decode_all(&grid, &heads, &anchors).unwrap();
            for a in 0..8 {
                for k in 0..3 {
                    assert!((0.0..=1.0).contains(&params.colors[a][k]));
                    assert!(params.scales[a][k] > 0.0);
                }
                assert!((0.0..=1.0).contains(&params.opacities[a]));
                assert!((params.rotations[a].norm() - 1.0).abs() < 1e-6);
            }
            let _ = r.gen::<u64>();
        }
    }

    /// Scalar objective: dot every decoded parameter with fixed upstream
    /// weights. Its analytic gradient is exactly what decoder_backward
    /// computes.
    fn objective(
        grid: &VoxelGrid,
        heads: &DecoderHeads,
        anchors: &AnchorSet,
        upstream: &ParamGrads,
    ) -> f64 {
        let (params, _) = decode_all(grid, heads, anchors).unwrap();
        let mut total = 0.0;
        for a in 0..params.len() {
            for k in 0..3 {
                total += upstream.colors[a][k] * params.colors[a][k];
                total += upstream.scales[a][k] * params.scales[a][k];
            }
            total += upstream.opacities[a] * params.opacities[a];
            let q = params.rotations[a].as_array();
            for k in 0..4 {
                total += upstream.rotations[a][k] * q[k];
            }
        }
        total
    }

    fn random_upstream(n: usize, seed: u64) -> ParamGrads {
        let mut r = rng(seed);
        let mut up = ParamGrads::zeros(n);
        for a in 0..n {
            up.colors[a] = [
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ];
            up.opacities[a] = r.gen_range(-1.0..1.0);
            up.rotations[a] = [
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ];
            up.scales[a] = Vector3::new(
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            );
        }
        up
    }

    fn assert_fd(analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            ((analytic - numeric) / denom).abs() < 1e-4,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    /// Signs of every rectified unit over all anchors and heads. A central
    /// difference whose two sides disagree here straddles a ReLU kink and
    /// cannot be compared against the (one-sided) analytic derivative.
    fn hidden_pattern(grid: &VoxelGrid, heads: &DecoderHeads, anchors: &AnchorSet) -> Vec<bool> {
        let mut pattern = Vec::new();
        for pos in &anchors.positions {
            let f = trilinear_sample(grid, pos).features;
            for (_, head) in heads.iter() {
                let (_, inputs) = mlp_forward_trace(head, &f);
                for layer in inputs.iter().skip(1) {
                    pattern.extend(layer.iter().map(|&v| v > 0.0));
                }
            }
        }
        pattern
    }

    #[test]
    fn backward_matches_finite_differences() {
        let eps = 1e-5;
        let grid = small_grid(20, 3);
        let heads = DecoderHeads::init(3, &[6, 6], 21).unwrap();
        let anchors = small_anchors(22, 6);
        let upstream = random_upstream(6, 23);
        let back = decoder_backward(&grid, &heads, &anchors, &upstream).unwrap();
        let mut r = rng(24);
        let mut checked = 0usize;

        // Grid features (random subset).
        for _ in 0..20 {
            let i = r.gen_range(0..grid.features.len());
            let mut hi = grid.clone();
            hi.features[i] += eps;
            let mut lo = grid.clone();
            lo.features[i] -= eps;
            if hidden_pattern(&hi, &heads, &anchors) != hidden_pattern(&lo, &heads, &anchors) {
                continue;
            }
            let fd = (objective(&hi, &heads, &anchors, &upstream)
                - objective(&lo, &heads, &anchors, &upstream))
                / (2.0 * eps);
            assert_fd(back.grid_features[i], fd);
            checked += 1;
        }

        // Head weights and biases (random subset per head).
        let perturb = |heads: &DecoderHeads, which: usize, l: usize, i: usize, bias: bool, d: f64| {
            let mut h = heads.clone();
            let head = match which {
                0 => &mut h.color,
                1 => &mut h.opacity,
                2 => &mut h.rotation,
                _ => &mut h.scale,
            };
            if bias {
                head.biases[l][i] += d;
            } else {
                head.weights[l][i] += d;
            }
            h
        };
        for which in 0..4 {
            let g = match which {
                0 => &back.heads.color,
                1 => &back.heads.opacity,
                2 => &back.heads.rotation,
                _ => &back.heads.scale,
            };
            for _ in 0..10 {
                let l = r.gen_range(0..g.weights.len());
                let bias = r.gen_bool(0.3);
                let n = if bias { g.biases[l].len() } else { g.weights[l].len() };
                let i = r.gen_range(0..n);
                let hi = perturb(&heads, which, l, i, bias, eps);
                let lo = perturb(&heads, which, l, i, bias, -eps);
                if hidden_pattern(&grid, &hi, &anchors) != hidden_pattern(&grid, &lo, &anchors) {
                    continue;
                }
                let fd = (objective(&grid, &hi, &anchors, &upstream)
                    - objective(&grid, &lo, &anchors, &upstream))
                    / (2.0 * eps);
                let analytic = if bias { g.biases[l][i] } else { g.weights[l][i] };
                assert_fd(analytic, fd);
                checked += 1;
            }
        }

        // Anchor positions (also guard against interpolation-cell changes).
        for a in 0..3 {
            for axis in 0..3 {
                let mut hi = anchors.clone();
                hi.positions[a][axis] += eps;
                let mut lo = anchors.clone();
                lo.positions[a][axis] -= eps;
                let cell = |set: &AnchorSet| {
                    trilinear_sample(&grid, &set.positions[a])
                        .corners
                        .iter()
                        .map(|(idx, _)| *idx)
                        .collect::<Vec<_>>()
                };
                if cell(&hi) != cell(&lo)
                    || hidden_pattern(&grid, &heads, &hi) != hidden_pattern(&grid, &heads, &lo)
                {
                    continue;
                }
                let fd = (objective(&grid, &heads, &hi, &upstream)
                    - objective(&grid, &heads, &lo, &upstream))
                    / (2.0 * eps);
                assert_fd(back.positions[a][axis], fd);
                checked += 1;
            }
        }
        assert!(checked >= 40, "too many kink skips: only {checked} comparisons ran");
    }

    #[test]
    fn backward_is_linear_in_upstream_and_zero_on_zero() {
        let grid = small_grid(30, 3);
        let heads = DecoderHeads::init(3, &[6], 31).unwrap();
        let anchors = small_anchors(32, 4);
        let zero = ParamGrads::zeros(4);
        let back = decoder_backward(&grid, &heads, &anchors, &zero).unwrap();
        assert!(back.grid_features.iter().all(|&g| g == 0.0));
        assert!(back.heads.color.flatten().iter().all(|&g| g == 0.0));

        let up = random_upstream(4, 33);
        let mut doubled = up.clone();
        for a in 0..4 {
            for k in 0..3 {
                doubled.colors[a][k] *= 2.0;
                doubled.scales[a][k] *= 2.0;
            }
            doubled.opacities[a] *= 2.0;
            for k in 0..4 {
                doubled.rotations[a][k] *= 2.0;
            }
        }
        let b1 = decoder_backward(&grid, &heads, &anchors, &up).unwrap();
        let b2 = decoder_backward(&grid, &heads, &anchors, &doubled).unwrap();
        for (g1, g2) in b1.grid_features.iter().zip(&b2.grid_features) {
            assert_relative_eq!(2.0 * g1, *g2, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let grid = small_grid(40, 3);
        let heads = DecoderHeads::init(5, &[6], 41).unwrap();
        let anchors = small_anchors(42, 2);
        assert!(matches!(
            decode_all(&grid, &heads, &anchors),
            Err(Error::Config(_))
        ));
        let heads = DecoderHeads::init(3, &[6], 41).unwrap();
        let upstream = ParamGrads::zeros(5);
        assert!(decoder_backward(&grid, &heads, &anchors, &upstream).is_err());
    }
}
