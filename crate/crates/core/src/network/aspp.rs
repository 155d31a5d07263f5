use crate::error::Result;
use crate::nn::{Bound, Conv2d, ParamDecl};
use crate::tensor::{ConvGeometry, Tape, Var};

/// Atrous spatial pyramid pooling: a 1×1 branch plus one dilated 3×3 branch
/// per rate, concatenated and fused back to the input width by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub channels: usize,
    pub rates: Vec<usize>,
    pointwise: Conv2d,
    dilated: Vec<Conv2d>,
    fuse: Conv2d,
}

impl Aspp {
    pub fn new(prefix: &str, channels: usize, rates: &[usize]) -> Self {
        let c = channels;
        let dilated = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv2d::new(format!("{prefix}.rate{i}"), c, c, 3, ConvGeometry::new(1, r, r)))
            .collect();
        Self {
            channels,
            rates: rates.to_vec(),
            pointwise: Conv2d::pointwise(format!("{prefix}.pointwise"), c, c),
            dilated,
            fuse: Conv2d::pointwise(format!("{prefix}.fuse"), c * (rates.len() + 1), c),
        }
    }

    pub fn param_count(channels: usize, rates: usize) -> usize {
        let c = channels;
        Conv2d::param_count(c, c, 1) + rates * Conv2d::param_count(c, c, 3)
            + Conv2d::param_count(c * (rates + 1), c, 1)
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut d = self.pointwise.decls();
        d.extend(self.dilated.iter().flat_map(Conv2d::decls));
        d.extend(self.fuse.decls());
        d
    }

    /// Dilation actually used for a branch on an `h×w` map. Rates that reach
    /// past the map fall back to 1.
    pub fn effective_rate(rate: usize, h: usize, w: usize) -> usize {
        if rate >= h.min(w) && rate > 1 {
            1
        } else {
            rate
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let (_, h, w) = tape.value(x).dims3("aspp")?;
        let p = self.pointwise.forward(tape, params, x)?;
        let mut branches = vec![tape.relu(p)?];
        for conv in &self.dilated {
            let rate = conv.geom.dilation;
            let eff = Self::effective_rate(rate, h, w);
            let conv = if eff != rate {
                crate::warn::warn_once(format!(
                    "ASPP branch `{}`: dilation {rate} too large for {h}×{w}, using 1",
                    conv.prefix
                ));
                let mut c = conv.clone();
                c.geom = ConvGeometry::new(1, 1, 1);
                c
            } else {
                conv.clone()
            };
            let y = conv.forward(tape, params, x)?;
            branches.push(tape.relu(y)?);
        }
        let cat = tape.concat(&branches, 0)?;
        self.fuse.forward(tape, params, cat)
    }
}
