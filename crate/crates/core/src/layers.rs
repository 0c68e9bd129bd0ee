//! Parameterized layers shared by every network.

use rand::Rng;
use tubuda_tensor::{BnParams, Init, ParamId, ParamStore, Scalar, Session, Var};

use crate::error::Result;

/// Square convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[cout, cin, k, k], Init::He { fan_in: cin * k * k }, rng)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[cout], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias, k })
    }

    /// Like [`Conv::new`] but with every weight zero.
    pub fn zeros<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[cout, cin, 1, 1], Init::Zeros, rng)?;
        let bias = Some(store.add(&format!("{name}.bias"), &[cout], Init::Zeros, rng)?);
        Ok(Self { weight, bias, k: 1 })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        Ok(s.conv2d(x, w, b, 1, self.k / 2)?)
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BnParams,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, k, false, rng)?,
            bn: store.add_batchnorm(&format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = s.batchnorm(y, &self.bn)?;
        Ok(s.relu(y))
    }
}

/// Fully connected layer over all trailing dimensions.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), &[fan_out, fan_in], Init::Uniform(bound), rng)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        Ok(s.linear(x, w, b)?)
    }
}
