//! A one-hidden-layer value network with two physical output heads and exact
//! backpropagation. The third value function is always a signed combination
//! of the two heads, fixed by the parameterization.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Forward,
    Backward,
    Bidirectional,
}

/// Which value function is the composite of the other two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parameterization {
    /// Heads are v⃗ and v⃖; v↔ = v⃗ + v⃖.
    #[serde(rename = "FR")]
    Fr,
    /// Heads are v↔ and v⃖; v⃗ = v↔ - v⃖.
    #[serde(rename = "BiR")]
    BiR,
    /// Heads are v⃗ and v↔; v⃖ = v↔ - v⃗.
    #[serde(rename = "FBi")]
    FBi,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [
        Parameterization::Fr,
        Parameterization::BiR,
        Parameterization::FBi,
    ];

    /// Coefficients `(a, b)` such that `head = a·A + b·B`, where A is the
    /// `w2` head and B the `w3` head.
    pub fn coefficients(self, head: Head) -> (f64, f64) {
        use Head::*;
        use Parameterization::*;
        match (self, head) {
            (Fr, Forward) => (1.0, 0.0),
            (Fr, Backward) => (0.0, 1.0),
            (Fr, Bidirectional) => (1.0, 1.0),
            (BiR, Bidirectional) => (1.0, 0.0),
            (BiR, Backward) => (0.0, 1.0),
            (BiR, Forward) => (1.0, -1.0),
            (FBi, Forward) => (1.0, 0.0),
            (FBi, Bidirectional) => (0.0, 1.0),
            (FBi, Backward) => (-1.0, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Parameterization::Fr => "FR",
            Parameterization::BiR => "BiR",
            Parameterization::FBi => "FBi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    /// `None` passes features straight to the heads (linear values).
    pub hidden: Option<usize>,
    pub bias: bool,
}

impl NetShape {
    pub fn linear(input: usize) -> Self {
        Self {
            input,
            hidden: None,
            bias: false,
        }
    }

    pub fn relu(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden: Some(hidden),
            bias: true,
        }
    }

    fn width(&self) -> usize {
        self.hidden.unwrap_or(self.input)
    }

    fn layout(&self) -> Layout {
        let torso = self.hidden.map_or(0, |h| h * self.input);
        let b1 = self.hidden.unwrap_or(0);
        let w = self.width();
        let w1 = 0..torso;
        let b1 = torso..torso + b1;
        let w2 = b1.end..b1.end + w;
        let b2 = w2.end;
        let w3 = b2 + 1..b2 + 1 + w;
        let b3 = w3.end;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: usize,
    w3: Range<usize>,
    b3: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadValues {
    pub forward: f64,
    pub backward: f64,
    pub bidirectional: f64,
}

impl HeadValues {
    pub fn get(&self, head: Head) -> f64 {
        match head {
            Head::Forward => self.forward,
            Head::Backward => self.backward,
            Head::Bidirectional => self.bidirectional,
        }
    }
}

/// Flat parameter-aligned derivative of one head's value.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub head: Head,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(head: Head, len: usize) -> Self {
        Self {
            head,
            values: vec![0.0; len],
        }
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadNet {
    shape: NetShape,
    parameterization: Parameterization,
    params: Vec<f64>,
    layout: Layout,
}

struct Hidden {
    /// Post-activation torso output (the features themselves when linear).
    h: Vec<f64>,
    /// Whether each hidden unit is active.
    active: Vec<bool>,
}

impl MultiHeadNet {
    pub fn zeros(shape: NetShape, parameterization: Parameterization) -> Result<Self> {
        if shape.input == 0 || shape.hidden == Some(0) {
            return Err(Error::InvalidArgument(
                "network layers must be non-empty".into(),
            ));
        }
        let layout = shape.layout();
        Ok(Self {
            shape,
            parameterization,
            params: vec![0.0; layout.len],
            layout,
        })
    }

    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn random<R: Rng + ?Sized>(
        shape: NetShape,
        parameterization: Parameterization,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(shape, parameterization)?;
        let l = net.layout.clone();
        for range in [l.w1, l.w2, l.w3] {
            for p in &mut net.params[range] {
                *p = rng.gen_range(-scale..=scale);
            }
        }
        Ok(net)
    }

    pub fn from_params(
        shape: NetShape,
        parameterization: Parameterization,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(shape, parameterization)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                actual: params.len(),
            });
        }
        net.params = params;
        if !shape.bias && net.bias_indices().any(|i| net.params[i] != 0.0) {
            return Err(Error::InvalidArgument(
                "bias-free network has nonzero bias entries".into(),
            ));
        }
        Ok(net)
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn bias_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.layout
            .b1
            .clone()
            .chain([self.layout.b2, self.layout.b3])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.input {
            return Err(Error::DimensionMismatch {
                expected: self.shape.input,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn torso(&self, x: &[f64]) -> Hidden {
        match self.shape.hidden {
            None => Hidden {
                h: x.to_vec(),
                active: vec![true; x.len()],
            },
            Some(width) => {
                let w1 = &self.params[self.layout.w1.clone()];
                let b1 = &self.params[self.layout.b1.clone()];
                let mut h = Vec::with_capacity(width);
                let mut active = Vec::with_capacity(width);
                for j in 0..width {
                    let z: f64 = w1[j * x.len()..(j + 1) * x.len()]
                        .iter()
                        .zip(x)
                        .map(|(w, xi)| w * xi)
                        .sum::<f64>()
                        + b1[j];
                    let on = z > 0.0;
                    active.push(on);
                    h.push(if on { z } else { 0.0 });
                }
                Hidden { h, active }
            }
        }
    }

    fn physical_heads(&self, hidden: &Hidden) -> (f64, f64) {
        let dot = |r: Range<usize>| {
            self.params[r]
                .iter()
                .zip(&hidden.h)
                .map(|(w, h)| w * h)
                .sum::<f64>()
        };
        (
            dot(self.layout.w2.clone()) + self.params[self.layout.b2],
            dot(self.layout.w3.clone()) + self.params[self.layout.b3],
        )
    }

    /// All three value estimates from a single pass.
    pub fn forward_all(&self, x: &[f64]) -> Result<HeadValues> {
        self.check_input(x)?;
        let (a, b) = self.physical_heads(&self.torso(x));
        let combine = |head| {
            let (ca, cb) = self.parameterization.coefficients(head);
            ca * a + cb * b
        };
        Ok(HeadValues {
            forward: combine(Head::Forward),
            backward: combine(Head::Backward),
            bidirectional: combine(Head::Bidirectional),
        })
    }

    pub fn value(&self, x: &[f64], head: Head) -> Result<f64> {
        Ok(self.forward_all(x)?.get(head))
    }

    pub fn gradient(&self, x: &[f64], head: Head) -> Result<GradientVector> {
        let mut g = GradientVector::zeros(head, self.params.len());
        self.accumulate_gradient(x, head, 1.0, &mut g.values)?;
        Ok(g)
    }

    /// Adds `coeff · ∂v_head(x)/∂params` into `out`.
    pub fn accumulate_gradient(
        &self,
        x: &[f64],
        head: Head,
        coeff: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_input(x)?;
        if out.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: out.len(),
            });
        }
        let hidden = self.torso(x);
        let (ca, cb) = self.parameterization.coefficients(head);
        let (ca, cb) = (ca * coeff, cb * coeff);
        let l = &self.layout;
        for (j, &h) in hidden.h.iter().enumerate() {
            out[l.w2.start + j] += ca * h;
            out[l.w3.start + j] += cb * h;
        }
        if self.shape.bias {
            out[l.b2] += ca;
            out[l.b3] += cb;
        }
        if let Some(width) = self.shape.hidden {
            let n_in = x.len();
            for j in 0..width {
                if !hidden.active[j] {
                    continue;
                }
                let dz = ca * self.params[l.w2.start + j] + cb * self.params[l.w3.start + j];
                if dz == 0.0 {
                    continue;
                }
                for (o, &xi) in out[l.w1.start + j * n_in..l.w1.start + (j + 1) * n_in]
                    .iter_mut()
                    .zip(x)
                {
                    *o += dz * xi;
                }
                if self.shape.bias {
                    out[l.b1.start + j] += dz;
                }
            }
        }
        Ok(())
    }

    /// Whether parameter `i` belongs to the subset that `head` depends on.
    pub fn in_subset(&self, head: Head, i: usize) -> bool {
        let (ca, cb) = self.parameterization.coefficients(head);
        let l = &self.layout;
        if !self.shape.bias && (l.b1.contains(&i) || i == l.b2 || i == l.b3) {
            return false;
        }
        if i < l.w2.start {
            return true;
        }
        if l.w2.contains(&i) || i == l.b2 {
            return ca != 0.0;
        }
        cb != 0.0
    }

    /// `params += coeff · grad`, restricted to the gradient's head subset.
    pub fn sgd_step(&mut self, grad: &GradientVector, coeff: f64) -> Result<()> {
        self.apply_direction(grad.head, &grad.values, coeff)
    }

    /// `params += coeff · direction`, restricted to `head`'s subset.
    pub fn apply_direction(&mut self, head: Head, direction: &[f64], coeff: f64) -> Result<()> {
        if direction.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: direction.len(),
            });
        }
        if coeff == 0.0 {
            return Ok(());
        }
        for (i, &d) in direction.iter().enumerate() {
            if d != 0.0 && self.in_subset(head, i) {
                self.params[i] += coeff * d;
            }
        }
        Ok(())
    }

    /// `params += coeff · direction` without masking.
    pub fn add_scaled(&mut self, direction: &[f64], coeff: f64) -> Result<()> {
        if direction.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: direction.len(),
            });
        }
        for (p, &d) in self.params.iter_mut().zip(direction) {
            *p += coeff * d;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> NetSnapshot {
        NetSnapshot {
            input: self.shape.input,
            hidden: self.shape.hidden,
            bias: self.shape.bias,
            parameterization: self.parameterization,
            params: self.params.clone(),
        }
    }

    pub fn from_snapshot(snapshot: &NetSnapshot) -> Result<Self> {
        let shape = NetShape {
            input: snapshot.input,
            hidden: snapshot.hidden,
            bias: snapshot.bias,
        };
        Self::from_params(shape, snapshot.parameterization, snapshot.params.clone())
    }
}

/// Serialisable network state: shape header plus the flat parameter array
/// in the order `W1, b1, w2, b2, w3, b3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub input: usize,
    pub hidden: Option<usize>,
    pub bias: bool,
    pub parameterization: Parameterization,
    pub params: Vec<f64>,
}
