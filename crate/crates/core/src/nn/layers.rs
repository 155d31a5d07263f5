use super::params::{Bound, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Square-kernel 2-D convolution with bias over a `C×H×W` feature map.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, geom: ConvGeometry) -> Self {
        Self {
            prefix: prefix.into(),
            c_in,
            c_out,
            kernel,
            geom,
        }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same3x3(prefix: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::new(prefix, c_in, c_out, 3, ConvGeometry::new(1, 1, 1))
    }

    pub fn pointwise(prefix: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self::new(prefix, c_in, c_out, 1, ConvGeometry::default())
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel * kernel + c_out
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let k2 = self.kernel * self.kernel;
        vec![
            ParamDecl::weight(
                format!("{}.weight", self.prefix),
                &[self.c_out, self.c_in, self.kernel, self.kernel],
                self.c_in * k2,
                self.c_out * k2,
            ),
            ParamDecl::bias(format!("{}.bias", self.prefix), self.c_out),
        ]
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let w = params.get(&format!("{}.weight", self.prefix))?;
        let b = params.get(&format!("{}.bias", self.prefix))?;
        let y = tape.conv2d(x, w, self.geom)?;
        let b = tape.reshape(b, &[self.c_out, 1, 1])?;
        tape.add(y, b)
    }
}

/// Affine map with weight `d_out × d_in` and bias `d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d_in,
            d_out,
        }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_out * d_in + d_out
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::weight(
                format!("{}.weight", self.prefix),
                &[self.d_out, self.d_in],
                self.d_in,
                self.d_out,
            ),
            ParamDecl::bias(format!("{}.bias", self.prefix), self.d_out),
        ]
    }

    fn vars(&self, params: &Bound) -> Result<(Var, Var)> {
        Ok((
            params.get(&format!("{}.weight", self.prefix))?,
            params.get(&format!("{}.bias", self.prefix))?,
        ))
    }

    /// `x[n×d_in] · Wᵀ + b`, one sample per row.
    pub fn forward_rows(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        match tape.shape(x) {
            [_, d] if *d == self.d_in => {}
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("{}: expected n×{}, got {s:?}", self.prefix, self.d_in),
                ))
            }
        }
        let (w, b) = self.vars(params)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        let b = tape.reshape(b, &[1, self.d_out])?;
        tape.add(y, b)
    }

    /// `W · x[d_in×n] + b`, one sample per column.
    pub fn forward_cols(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        match tape.shape(x) {
            [d, _] if *d == self.d_in => {}
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("{}: expected {}×n, got {s:?}", self.prefix, self.d_in),
                ))
            }
        }
        let (w, b) = self.vars(params)?;
        let y = tape.matmul(w, x)?;
        let b = tape.reshape(b, &[self.d_out, 1])?;
        tape.add(y, b)
    }
}
