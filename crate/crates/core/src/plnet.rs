//! Piecewise-linear networks, exact local Jacobians and two-stage linearization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `x ↦ W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl AffineMap {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weights.nrows() {
            return Err(Error::dims("AffineMap bias", weights.nrows(), bias.len()));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidNetwork("non-finite weight or bias".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: DMatrix::identity(n, n),
            bias: DVector::zeros(n),
        }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("AffineMap::apply", self.input_dim(), x.len()));
        }
        Ok(&self.weights * x + &self.bias)
    }

    /// `self ∘ inner`, i.e. `x ↦ self(inner(x))`.
    pub fn compose(&self, inner: &AffineMap) -> Result<AffineMap> {
        if inner.output_dim() != self.input_dim() {
            return Err(Error::dims("AffineMap::compose", self.input_dim(), inner.output_dim()));
        }
        Ok(AffineMap {
            weights: &self.weights * &inner.weights,
            bias: &self.weights * &inner.bias + &self.bias,
        })
    }

    /// Multiplies weights and bias by `t`.
    pub fn scaled(&self, t: f64) -> AffineMap {
        AffineMap {
            weights: &self.weights * t,
            bias: &self.bias * t,
        }
    }
}

/// ReLU with `relu(0) = 0`.
pub fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|z| z.max(0.0))
}

/// Affine layers, each optionally followed by a ReLU. The final layer never is.
#[derive(Debug, Clone, PartialEq)]
pub struct PlNetwork {
    layers: Vec<AffineMap>,
    relu_after: Vec<bool>,
}

impl PlNetwork {
    pub fn new(layers: Vec<AffineMap>, relu_after: Vec<bool>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        if relu_after.len() != layers.len() {
            return Err(Error::dims("PlNetwork relu flags", layers.len(), relu_after.len()));
        }
        if relu_after[layers.len() - 1] {
            return Err(Error::InvalidNetwork(
                "the last layer must not be followed by a ReLU".into(),
            ));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, relu_after })
    }

    /// Dense network with the given widths (`widths[0]` is the input size) and
    /// a ReLU after every layer but the last. Weights are `N(0, scale²/fan_in)`,
    /// biases `N(0, bias_scale²)`.
    pub fn random<R: Rng + ?Sized>(
        widths: &[usize],
        scale: f64,
        bias_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidNetwork(format!("bad layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = scale / (fan_in as f64).sqrt();
                let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                    s * rng.sample::<f64, _>(StandardNormal)
                });
                let bias =
                    DVector::from_fn(fan_out, |_, _| bias_scale * rng.sample::<f64, _>(StandardNormal));
                AffineMap::new(weights, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut relu_after = vec![true; layers.len()];
        relu_after[layers.len() - 1] = false;
        Self::new(layers, relu_after)
    }

    pub fn layers(&self) -> &[AffineMap] {
        &self.layers
    }

    pub fn relu_after(&self) -> &[bool] {
        &self.relu_after
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("PlNetwork::forward", self.input_dim(), x.len()));
        }
        let mut h = x.clone();
        for (layer, &r) in self.layers.iter().zip(&self.relu_after) {
            h = &layer.weights * &h + &layer.bias;
            if r {
                h.apply(|z| *z = z.max(0.0));
            }
        }
        Ok(h)
    }

    /// Activation pattern at `x`: one mask per ReLU layer, `true` when the
    /// pre-activation is strictly positive.
    pub fn activation_pattern(&self, x: &DVector<f64>) -> Result<Vec<Vec<bool>>> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("activation_pattern", self.input_dim(), x.len()));
        }
        let mut h = x.clone();
        let mut masks = Vec::new();
        for (layer, &r) in self.layers.iter().zip(&self.relu_after) {
            h = &layer.weights * &h + &layer.bias;
            if r {
                masks.push(h.iter().map(|z| *z > 0.0).collect());
                h.apply(|z| *z = z.max(0.0));
            }
        }
        Ok(masks)
    }

    /// Local affine map of layers `from..to` around `x` (an input of layer `from`).
    ///
    /// Inside the segment each flagged ReLU is replaced by its 0/1 mask at `x`
    /// (pre-activation exactly 0 counts as inactive). The segment output is the
    /// pre-activation of layer `to − 1`, so no ReLU is applied after it.
    pub fn segment_jacobian(&self, from: usize, to: usize, x: &DVector<f64>) -> Result<AffineMap> {
        if from >= to || to > self.depth() {
            return Err(Error::Precondition(format!(
                "segment {from}..{to} is not a nonempty range of the {} layers",
                self.depth()
            )));
        }
        let first = &self.layers[from];
        if x.len() != first.input_dim() {
            return Err(Error::dims("segment_jacobian", first.input_dim(), x.len()));
        }
        let mut jac = first.weights.clone();
        let mut offset = first.bias.clone();
        let mut pre = &first.weights * x + &first.bias;
        for k in from + 1..to {
            if self.relu_after[k - 1] {
                for (r, z) in pre.iter().enumerate() {
                    if *z <= 0.0 {
                        jac.row_mut(r).fill(0.0);
                        offset[r] = 0.0;
                    }
                }
                pre.apply(|z| *z = z.max(0.0));
            }
            let layer = &self.layers[k];
            jac = &layer.weights * jac;
            offset = &layer.weights * offset + &layer.bias;
            pre = &layer.weights * pre + &layer.bias;
        }
        AffineMap::new(jac, offset)
    }

    /// Replaces the layers before and after ReLU layer `l` by their exact
    /// local affine maps at `x`, giving `B relu(A x + c₁) + c₂`.
    pub fn two_stage_linearize(&self, l: usize, x: &DVector<f64>) -> Result<TruncatedNet> {
        if l >= self.depth() || !self.relu_after[l] {
            return Err(Error::Precondition(format!(
                "layer {l} is not followed by a ReLU in a network of depth {}",
                self.depth()
            )));
        }
        let a = self.segment_jacobian(0, l + 1, x)?;
        let y = relu(&a.apply(x)?);
        let b = self.segment_jacobian(l + 1, self.depth(), &y)?;
        TruncatedNet::new(a, b, x.clone(), l)
    }
}

/// `x ↦ B relu(A x + c₁) + c₂` with the point it was linearized at.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedNet {
    a: AffineMap,
    b: AffineMap,
    source_point: DVector<f64>,
    layer_index: usize,
}

impl TruncatedNet {
    pub fn new(a: AffineMap, b: AffineMap, source_point: DVector<f64>, layer_index: usize) -> Result<Self> {
        if a.output_dim() != b.input_dim() {
            return Err(Error::dims("TruncatedNet hidden width", a.output_dim(), b.input_dim()));
        }
        if source_point.len() != a.input_dim() {
            return Err(Error::dims("TruncatedNet source point", a.input_dim(), source_point.len()));
        }
        Ok(Self {
            a,
            b,
            source_point,
            layer_index,
        })
    }

    /// An exact (Affine, ReLU, Affine) network given directly by its two maps.
    pub fn from_maps(a: AffineMap, b: AffineMap) -> Result<Self> {
        let n = a.input_dim();
        Self::new(a, b, DVector::zeros(n), 0)
    }

    pub fn a(&self) -> &AffineMap {
        &self.a
    }

    pub fn b(&self) -> &AffineMap {
        &self.b
    }

    pub fn source_point(&self) -> &DVector<f64> {
        &self.source_point
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn input_dim(&self) -> usize {
        self.a.input_dim()
    }

    /// `p`, the width of the ReLU layer.
    pub fn hidden_width(&self) -> usize {
        self.a.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.b.output_dim()
    }

    /// Floats needed to store `A, c₁, B, c₂`.
    pub fn storage(&self) -> usize {
        let (n, p, d) = (self.input_dim(), self.hidden_width(), self.output_dim());
        p * n + p + d * p + d
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.b.apply(&relu(&self.a.apply(x)?))
    }

    /// Same network with `B` and `c₂` multiplied by `t`.
    pub fn with_scaled_output(&self, t: f64) -> TruncatedNet {
        TruncatedNet {
            b: self.b.scaled(t),
            ..self.clone()
        }
    }

    /// Viewed as a plain two-layer network.
    pub fn to_network(&self) -> PlNetwork {
        PlNetwork {
            layers: vec![self.a.clone(), self.b.clone()],
            relu_after: vec![true, false],
        }
    }
}

/// The entry whose source point is closest to `x` in Euclidean distance;
/// ties go to the earliest entry.
pub fn nearest_linearization<'a>(points: &'a [TruncatedNet], x: &DVector<f64>) -> Result<&'a TruncatedNet> {
    let mut best: Option<(f64, &TruncatedNet)> = None;
    for tn in points {
        if tn.source_point.len() != x.len() {
            return Err(Error::dims("nearest_linearization", tn.source_point.len(), x.len()));
        }
        let d = (&tn.source_point - x).norm_squared();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, tn));
        }
    }
    best.map(|(_, tn)| tn)
        .ok_or(Error::Empty("no linearization points"))
}
