//! Synthetic feature maps: exact affine nulls, smooth tanh MLPs and a pair of
//! small convnets that differ only in padding and pooling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{HolonomyError, Result};
use crate::gauge::FeaturePool;
use crate::linalg::{gaussian_matrix, gaussian_vector};
use crate::loops::{circular_shift, flatten_image};

/// Anything that maps input vectors to feature vectors deterministically.
pub trait Featurizer: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Row-wise evaluation of an `M×d` input matrix.
    fn eval_rows(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xs.ncols() != self.input_dim() {
            return Err(HolonomyError::DimensionMismatch {
                context: "feature map input",
                expected: self.input_dim(),
                found: xs.ncols(),
            });
        }
        let rows: Vec<DVector<f64>> = (0..xs.nrows())
            .into_par_iter()
            .map(|i| self.eval(&xs.row(i).transpose()))
            .collect::<Result<_>>()?;
        let p = self.output_dim();
        Ok(DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer `h = W a + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub seed: u64,
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut a = x.clone();
        for layer in &self.layers {
            let h = &layer.weight * &a + &layer.bias;
            a = h.map(|v| self.activation.apply(v));
        }
        a
    }

    /// Forward value and the Jacobian-vector product `J(x) v`.
    pub fn jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_len("mlp input", self.input_dim(), x.len())?;
        check_len("mlp tangent", self.input_dim(), v.len())?;
        let mut a = x.clone();
        let mut da = v.clone();
        for layer in &self.layers {
            let h = &layer.weight * &a + &layer.bias;
            let dh = &layer.weight * &da;
            da = DVector::from_fn(h.len(), |i, _| self.activation.derivative(h[i]) * dh[i]);
            a = h.map(|t| self.activation.apply(t));
        }
        Ok((a, da))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Circular,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    None,
    Max2,
    Avg2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Flattened final feature map, channel-major.
    Flatten,
    /// Per-channel spatial mean.
    GlobalAvg,
}

/// 3×3, stride-1, same-size convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3 {
    /// `weights[o][i]` is the 3×3 kernel from input channel `i` to output `o`.
    pub weights: Vec<Vec<[[f64; 3]; 3]>>,
    pub bias: Vec<f64>,
}

impl Conv3 {
    fn seeded<R: Rng>(rng: &mut R, c_in: usize, c_out: usize) -> Self {
        let scale = 1.0 / ((9 * c_in) as f64).sqrt();
        let mut weights = Vec::with_capacity(c_out);
        for _ in 0..c_out {
            let mut per_in = Vec::with_capacity(c_in);
            for _ in 0..c_in {
                let g = gaussian_matrix(rng, 3, 3);
                let mut k = [[0.0; 3]; 3];
                for (dy, row) in k.iter_mut().enumerate() {
                    for (dx, v) in row.iter_mut().enumerate() {
                        *v = g[(dy, dx)] * scale;
                    }
                }
                per_in.push(k);
            }
            weights.push(per_in);
        }
        let bias = gaussian_vector(rng, c_out).iter().map(|b| 0.1 * b).collect();
        Self { weights, bias }
    }

    fn apply(&self, input: &[DMatrix<f64>], padding: Padding) -> Vec<DMatrix<f64>> {
        let (h, w) = input[0].shape();
        let fetch = |ch: &DMatrix<f64>, y: i64, x: i64| -> f64 {
            match padding {
                Padding::Circular => ch[((y.rem_euclid(h as i64)) as usize, (x.rem_euclid(w as i64)) as usize)],
                Padding::Zero => {
                    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        0.0
                    } else {
                        ch[(y as usize, x as usize)]
                    }
                }
            }
        };
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(kernels, &b)| {
                DMatrix::from_fn(h, w, |y, x| {
                    let mut acc = b;
                    for (ch, k) in input.iter().zip(kernels) {
                        for (dy, row) in k.iter().enumerate() {
                            for (dx, kv) in row.iter().enumerate() {
                                acc += kv * fetch(ch, y as i64 + dy as i64 - 1, x as i64 + dx as i64 - 1);
                            }
                        }
                    }
                    acc
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub conv1: Conv3,
    pub conv2: Conv3,
    pub padding: Padding,
    pub pooling: Pooling,
    pub activation: Activation,
    pub readout: Readout,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

fn pool2(ch: &DMatrix<f64>, mode: Pooling) -> DMatrix<f64> {
    let (h, w) = ch.shape();
    match mode {
        Pooling::None => ch.clone(),
        Pooling::Max2 => DMatrix::from_fn(h / 2, w / 2, |y, x| {
            let v = [
                ch[(2 * y, 2 * x)],
                ch[(2 * y, 2 * x + 1)],
                ch[(2 * y + 1, 2 * x)],
                ch[(2 * y + 1, 2 * x + 1)],
            ];
            v.into_iter().fold(f64::NEG_INFINITY, f64::max)
        }),
        Pooling::Avg2 => DMatrix::from_fn(h / 2, w / 2, |y, x| {
            0.25 * (ch[(2 * y, 2 * x)] + ch[(2 * y, 2 * x + 1)] + ch[(2 * y + 1, 2 * x)] + ch[(2 * y + 1, 2 * x + 1)])
        }),
    }
}

impl ConvNet {
    pub fn channels(&self) -> usize {
        self.conv2.bias.len()
    }

    fn final_shape(&self) -> (usize, usize) {
        match self.pooling {
            Pooling::None => (self.height, self.width),
            _ => (self.height / 2, self.width / 2),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn output_dim(&self) -> usize {
        match self.readout {
            Readout::Flatten => {
                let (h, w) = self.final_shape();
                self.channels() * h * w
            }
            Readout::GlobalAvg => self.channels(),
        }
    }

    /// Second-layer activations, one matrix per channel.
    pub fn feature_maps(&self, image: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let act = |m: DMatrix<f64>| m.map(|v| self.activation.apply(v));
        let first: Vec<_> = self
            .conv1
            .apply(std::slice::from_ref(image), self.padding)
            .into_iter()
            .map(|m| pool2(&act(m), self.pooling))
            .collect();
        self.conv2.apply(&first, self.padding).into_iter().map(act).collect()
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let image = DMatrix::from_fn(self.height, self.width, |y, c| x[y * self.width + c]);
        let maps = self.feature_maps(&image);
        match self.readout {
            Readout::GlobalAvg => DVector::from_iterator(maps.len(), maps.iter().map(|m| m.mean())),
            Readout::Flatten => {
                let mut out = Vec::with_capacity(self.output_dim());
                for m in &maps {
                    out.extend(flatten_image(m).iter().copied());
                }
                DVector::from_vec(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Identity,
    Affine,
    Mlp,
    EquivConv,
    AliasConv,
    Reparameterized,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Identity => "identity_null",
            MapKind::Affine => "affine",
            MapKind::Mlp => "mlp",
            MapKind::EquivConv => "equiv_conv",
            MapKind::AliasConv => "alias_conv",
            MapKind::Reparameterized => "reparameterized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Identity {
        dim: usize,
    },
    /// `z(x) = B x + c`.
    Affine {
        b: DMatrix<f64>,
        c: DVector<f64>,
    },
    Mlp(Mlp),
    Conv(ConvNet),
    /// `z(x) = A · inner(x) + b`, a fixed re-gauging of another map.
    Reparameterized {
        inner: Box<FeatureMap>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    },
}

fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(HolonomyError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

impl FeatureMap {
    pub fn kind(&self) -> MapKind {
        match self {
            FeatureMap::Identity { .. } => MapKind::Identity,
            FeatureMap::Affine { .. } => MapKind::Affine,
            FeatureMap::Mlp(_) => MapKind::Mlp,
            FeatureMap::Conv(net) => match net.padding {
                Padding::Circular => MapKind::EquivConv,
                Padding::Zero => MapKind::AliasConv,
            },
            FeatureMap::Reparameterized { .. } => MapKind::Reparameterized,
        }
    }

    /// Same weights with every nonlinearity replaced by the identity and
    /// max-pooling by average pooling, giving an affine end-to-end map.
    pub fn linearize(&self) -> FeatureMap {
        match self {
            FeatureMap::Identity { .. } | FeatureMap::Affine { .. } => self.clone(),
            FeatureMap::Mlp(m) => FeatureMap::Mlp(Mlp {
                activation: Activation::Identity,
                ..m.clone()
            }),
            FeatureMap::Conv(net) => FeatureMap::Conv(ConvNet {
                activation: Activation::Identity,
                pooling: match net.pooling {
                    Pooling::None => Pooling::None,
                    _ => Pooling::Avg2,
                },
                ..net.clone()
            }),
            FeatureMap::Reparameterized { inner, a, b } => FeatureMap::Reparameterized {
                inner: Box::new(inner.linearize()),
                a: a.clone(),
                b: b.clone(),
            },
        }
    }

    /// Post-compose with `z ↦ A z + b`.
    pub fn reparameterized(self, a: DMatrix<f64>, b: DVector<f64>) -> Result<FeatureMap> {
        check_len("reparameterization matrix", self.output_dim(), a.ncols())?;
        check_len("reparameterization offset", a.nrows(), b.len())?;
        Ok(FeatureMap::Reparameterized {
            inner: Box::new(self),
            a,
            b,
        })
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            FeatureMap::Identity { .. } => x.clone(),
            FeatureMap::Affine { b, c } => b * x + c,
            FeatureMap::Mlp(m) => m.forward(x),
            FeatureMap::Conv(net) => net.forward(x),
            FeatureMap::Reparameterized { inner, a, b } => a * inner.forward(x) + b,
        }
    }
}

impl Featurizer for FeatureMap {
    fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Affine { b, .. } => b.ncols(),
            FeatureMap::Mlp(m) => m.input_dim(),
            FeatureMap::Conv(net) => net.input_dim(),
            FeatureMap::Reparameterized { inner, .. } => inner.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Affine { b, .. } => b.nrows(),
            FeatureMap::Mlp(m) => m.output_dim(),
            FeatureMap::Conv(net) => net.output_dim(),
            FeatureMap::Reparameterized { a, .. } => a.nrows(),
        }
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("feature map input", self.input_dim(), x.len())?;
        Ok(self.forward(x))
    }
}

/// Random affine map `x ↦ B x + c` with `B` entries `N(0, 1/d)`.
pub fn make_affine(input_dim: usize, output_dim: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = gaussian_matrix(&mut rng, output_dim, input_dim) / (input_dim as f64).sqrt();
    let c = gaussian_vector(&mut rng, output_dim);
    FeatureMap::Affine { b, c }
}

/// Seeded tanh MLP: weights `N(0, 1)/√fan_in` (first layer times `gain`),
/// biases `0.1·N(0, 1)`. `sizes` lists the layer output widths.
pub fn make_mlp(input_dim: usize, sizes: &[usize], gain: f64, seed: u64) -> Result<FeatureMap> {
    if input_dim == 0 || sizes.is_empty() || sizes.contains(&0) {
        return Err(HolonomyError::InvalidArgument(
            "mlp needs a positive input dimension and at least one non-empty layer".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = input_dim;
    let mut layers = Vec::with_capacity(sizes.len());
    for (i, &out) in sizes.iter().enumerate() {
        let scale = if i == 0 { gain } else { 1.0 } / (fan_in as f64).sqrt();
        let weight = gaussian_matrix(&mut rng, out, fan_in) * scale;
        let bias = gaussian_vector(&mut rng, out) * 0.1;
        layers.push(Dense { weight, bias });
        fan_in = out;
    }
    Ok(FeatureMap::Mlp(Mlp {
        layers,
        activation: Activation::Tanh,
        seed,
    }))
}

pub const CONV_CHANNELS: usize = 2;
pub const IMAGE_SIDE: usize = 16;

fn make_conv(seed: u64, padding: Padding, pooling: Pooling) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv1 = Conv3::seeded(&mut rng, 1, CONV_CHANNELS);
    let conv2 = Conv3::seeded(&mut rng, CONV_CHANNELS, CONV_CHANNELS);
    FeatureMap::Conv(ConvNet {
        conv1,
        conv2,
        padding,
        pooling,
        activation: Activation::Tanh,
        readout: Readout::Flatten,
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
        seed,
    })
}

/// Circular padding, stride 1, no pooling; exactly shift-equivariant.
pub fn make_equiv_conv(seed: u64) -> FeatureMap {
    make_conv(seed, Padding::Circular, Pooling::None)
}

/// Same filters as [`make_equiv_conv`] with zero padding and 2×2 max-pooling
/// after the first layer.
pub fn make_alias_conv(seed: u64) -> FeatureMap {
    make_conv(seed, Padding::Zero, Pooling::Max2)
}

/// Swap the readout of a conv map (no-op for other kinds).
pub fn with_readout(map: FeatureMap, readout: Readout) -> FeatureMap {
    match map {
        FeatureMap::Conv(net) => FeatureMap::Conv(ConvNet { readout, ..net }),
        other => other,
    }
}

/// Sum of two isotropic Gaussian blobs with seeded centers and widths.
pub fn blob_image(height: usize, width: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let cy = rng.random_range(0.0..height as f64);
            let cx = rng.random_range(0.0..width as f64);
            let s = rng.random_range(1.2..2.8);
            let a = rng.random_range(0.5..1.0);
            (cy, cx, s, a)
        })
        .collect();
    DMatrix::from_fn(height, width, |y, x| {
        blobs
            .iter()
            .map(|&(cy, cx, s, a)| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    })
}

/// Every circular shift of every base image, flattened, one per row:
/// base-major, then `dy`, then `dx`.
pub fn shift_orbit_inputs(bases: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (h, w) = bases[0].shape();
    let mut rows = Vec::with_capacity(bases.len() * h * w);
    for img in bases {
        for dy in 0..h as i64 {
            for dx in 0..w as i64 {
                rows.push(flatten_image(&circular_shift(img, dy, dx)));
            }
        }
    }
    DMatrix::from_fn(rows.len(), h * w, |r, c| rows[r][c])
}

/// `N × d` standard Gaussian inputs.
pub fn gaussian_inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_matrix(&mut rng, n, d)
}

/// Evaluate `map` on `inputs` and keep the inputs alongside the features.
pub fn build_pool<F: Featurizer + ?Sized>(map: &F, inputs: DMatrix<f64>) -> Result<FeaturePool> {
    let features = map.eval_rows(&inputs)?;
    FeaturePool::new(features)?.with_inputs(inputs)
}
