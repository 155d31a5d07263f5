use super::{Aspp, NetworkConfig, STAGES};
use crate::agcm::Agcm;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamDecl, ParameterStore};
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

struct EncoderStage {
    conv1: Conv2d,
    conv2: Conv2d,
    down: Conv2d,
}

/// The full saliency model: encoder, skips (with AGCMs where configured), ASPP, decoder.
pub struct SaliencyNet {
    pub config: NetworkConfig,
    encoder: Vec<EncoderStage>,
    skips: Vec<Conv2d>,
    agcms: Vec<Option<Agcm>>,
    aspp: Aspp,
    decoder: Vec<Conv2d>,
    head_conv: Conv2d,
    head_out: Conv2d,
}

fn in_stage<T>(stage: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("stage {stage}: {detail}"),
        },
        other => other,
    })
}

impl SaliencyNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut prev = 3;
        for (i, &c) in w.iter().enumerate() {
            let s = i + 1;
            encoder.push(EncoderStage {
                conv1: Conv2d::same3x3(format!("enc{s}.conv1"), prev, c),
                conv2: Conv2d::same3x3(format!("enc{s}.conv2"), c, c),
                down: Conv2d::new(format!("enc{s}.down"), c, c, 3, ConvGeometry::new(2, 1, 1)),
            });
            prev = c;
        }
        let skips = (1..=STAGES)
            .map(|s| Conv2d::pointwise(format!("skip{s}"), w[s - 1], w[s - 1]))
            .collect();
        let agcms = (1..=STAGES)
            .map(|s| {
                config
                    .has_agcm(s)
                    .then(|| Agcm::new(&format!("agcm{s}"), config.agcm.with_channels(w[s - 1])))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let w5 = config.skip_width(STAGES);
        let aspp = Aspp::new("aspp", w5, &config.aspp_rates);
        let mut decoder = Vec::new();
        let mut d = w5;
        for s in (1..STAGES).rev() {
            let c = w[s - 1];
            decoder.push(Conv2d::same3x3(format!("dec{s}"), d + config.skip_width(s), c));
            d = c;
        }
        Ok(Self {
            head_conv: Conv2d::same3x3("head.conv", d + 3, w[0]),
            head_out: Conv2d::pointwise("head.out", w[0], 1),
            config,
            encoder,
            skips,
            agcms,
            aspp,
            decoder,
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut d = Vec::new();
        for st in &self.encoder {
            d.extend(st.conv1.decls());
            d.extend(st.conv2.decls());
            d.extend(st.down.decls());
        }
        d.extend(self.skips.iter().flat_map(Conv2d::decls));
        d.extend(self.agcms.iter().flatten().flat_map(Agcm::decls));
        d.extend(self.aspp.decls());
        d.extend(self.decoder.iter().flat_map(Conv2d::decls));
        d.extend(self.head_conv.decls());
        d.extend(self.head_out.decls());
        d
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        ParameterStore::from_decls(&self.decls(), seed)
    }

    pub fn agcm(&self, stage: usize) -> Option<&Agcm> {
        self.agcms.get(stage - 1).and_then(Option::as_ref)
    }

    /// The five stage outputs, stage `i` at `H₀/2^i × W₀/2^i`.
    pub fn encoder_forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Vec<Var>> {
        let [h, w] = self.config.input_size;
        if tape.shape(image) != [3, h, w] {
            return Err(Error::Config(format!(
                "expected a 3×{h}×{w} image, got {:?}",
                tape.shape(image)
            )));
        }
        let mut x = image;
        let mut feats = Vec::with_capacity(STAGES);
        for (i, st) in self.encoder.iter().enumerate() {
            x = in_stage(i + 1, (|| {
                let y = st.conv1.forward(tape, params, x)?;
                let y = tape.relu(y)?;
                let y = st.conv2.forward(tape, params, y)?;
                let y = tape.relu(y)?;
                let y = st.down.forward(tape, params, y)?;
                tape.relu(y)
            })())?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Skip tensors handed to the decoder, after AGCM (and ASPP on stage 5).
    pub fn skip_forward(&self, tape: &mut Tape, params: &Bound, feats: &[Var]) -> Result<Vec<Var>> {
        let mut skips = Vec::with_capacity(STAGES);
        for s in 1..=STAGES {
            let y = in_stage(s, (|| {
                let mut y = self.skips[s - 1].forward(tape, params, feats[s - 1])?;
                if let Some(agcm) = &self.agcms[s - 1] {
                    y = agcm.forward(tape, params, y)?;
                }
                if s == STAGES {
                    y = self.aspp.forward(tape, params, y)?;
                }
                Ok(y)
            })())?;
            skips.push(y);
        }
        Ok(skips)
    }

    /// `image: 3×H₀×W₀ → mask: 1×H₀×W₀` in (0, 1).
    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Var> {
        let feats = self.encoder_forward(tape, params, image)?;
        let skips = self.skip_forward(tape, params, &feats)?;
        let mut d = skips[STAGES - 1];
        for (conv, s) in self.decoder.iter().zip((1..STAGES).rev()) {
            d = in_stage(s, (|| {
                let up = tape.upsample2x(d)?;
                let cat = tape.concat(&[up, skips[s - 1]], 0)?;
                let y = conv.forward(tape, params, cat)?;
                tape.relu(y)
            })())?;
        }
        let up = tape.upsample2x(d)?;
        let cat = tape.concat(&[up, image], 0)?;
        let y = self.head_conv.forward(tape, params, cat)?;
        let y = tape.relu(y)?;
        let logits = self.head_out.forward(tape, params, y)?;
        tape.sigmoid(logits)
    }

    /// Gradient-free prediction for one image.
    pub fn predict(&self, store: &ParameterStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }
}
