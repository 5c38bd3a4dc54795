//! The encoder/decoder skip network and its parameter layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvCache, ConvShape, Feat, NormCache};
use crate::error::{Error, Result};

/// Squashing applied after the head convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Logistic,
    Linear,
}

/// Shape of the skip network.
///
/// Each of the `scales` levels has a strided encoder pair, a pointwise skip
/// branch taken before downsampling, and a decoder pair that sees the
/// upsampled deeper features concatenated with the skip. With `scales == 0`
/// the network is only its head convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipNetConfig {
    pub input_channels: usize,
    pub scales: usize,
    pub down_channels: Vec<usize>,
    pub skip_channels: usize,
    pub use_norm: bool,
    pub out_channels: usize,
    /// Negative-side slope of the leaky ReLU.
    pub activation: f64,
    pub head_kernel: usize,
    pub output: OutputActivation,
}

impl Default for SkipNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 16,
            scales: 4,
            down_channels: vec![32, 64, 128, 128],
            skip_channels: 4,
            use_norm: true,
            out_channels: 13,
            activation: 0.2,
            head_kernel: 1,
            output: OutputActivation::Logistic,
        }
    }
}

impl SkipNetConfig {
    /// A reduced network that trains a 64x64 cube in well under a minute on one core.
    pub fn desk_scale(out_channels: usize) -> Self {
        Self {
            input_channels: 8,
            scales: 3,
            down_channels: vec![16, 16, 16],
            skip_channels: 16,
            out_channels,
            ..Self::default()
        }
    }

    /// A two-scale network of a few hundred weights for gradient checks.
    pub fn tiny(use_norm: bool) -> Self {
        Self {
            input_channels: 2,
            scales: 2,
            down_channels: vec![3, 4],
            skip_channels: 2,
            use_norm,
            out_channels: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales != self.down_channels.len() {
            return Err(Error::Config(format!(
                "scales ({}) must equal the number of down_channels ({})",
                self.scales,
                self.down_channels.len()
            )));
        }
        let counts = [self.input_channels, self.skip_channels, self.out_channels];
        if counts.iter().chain(&self.down_channels).any(|&c| c == 0) {
            return Err(Error::Config("all channel counts must be at least 1".into()));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::Config("head_kernel must be odd".into()));
        }
        if !(self.activation.is_finite() && self.activation > 0.0) {
            return Err(Error::Config("leaky slope must be positive".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.scales
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
}

/// One named parameter tensor inside [`NetworkState::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    shape: ConvShape,
    weight: usize,
    bias: Option<usize>,
}

/// conv -> (norm) -> leaky ReLU
#[derive(Debug, Clone, Copy)]
struct Block {
    conv: ConvSpec,
    norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Architecture {
    encoder: Vec<[Block; 2]>,
    skip: Vec<Block>,
    decoder: Vec<[Block; 2]>,
    head: ConvSpec,
}

struct LayoutBuilder {
    params: Vec<ParamInfo>,
    offset: usize,
    use_norm: bool,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> usize {
        let info = ParamInfo {
            name,
            kind,
            shape,
            offset: self.offset,
            fan_in,
        };
        self.offset += info.len();
        self.params.push(info);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, shape: ConvShape, with_bias: bool) -> ConvSpec {
        let fan_in = shape.fan_in();
        let weight = self.push(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            vec![shape.cout, shape.cin, shape.k, shape.k],
            fan_in,
        );
        let bias = with_bias
            .then(|| self.push(format!("{name}.bias"), ParamKind::ConvBias, vec![shape.cout], fan_in));
        ConvSpec {
            shape,
            weight,
            bias,
        }
    }

    /// A bias in front of instance norm is cancelled by the mean subtraction, so it is omitted.
    fn block(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Block {
        let shape = ConvShape {
            cin,
            cout,
            k,
            stride,
        };
        let conv = self.conv(name, shape, !self.use_norm);
        let norm = self.use_norm.then(|| {
            (
                self.push(format!("{name}.norm.scale"), ParamKind::NormScale, vec![cout], 0),
                self.push(format!("{name}.norm.shift"), ParamKind::NormShift, vec![cout], 0),
            )
        });
        Block { conv, norm }
    }
}

impl Architecture {
    fn build(config: &SkipNetConfig) -> (Self, Vec<ParamInfo>, usize) {
        let mut b = LayoutBuilder {
            params: Vec::new(),
            offset: 0,
            use_norm: config.use_norm,
        };
        let down = &config.down_channels;
        let s = config.scales;
        let level_in = |i: usize| if i == 0 { config.input_channels } else { down[i - 1] };

        let mut encoder = Vec::with_capacity(s);
        let mut skip = Vec::with_capacity(s);
        for i in 0..s {
            encoder.push([
                b.block(&format!("enc{i}.0"), level_in(i), down[i], 3, 2),
                b.block(&format!("enc{i}.1"), down[i], down[i], 3, 1),
            ]);
            skip.push(b.block(&format!("skip{i}"), level_in(i), config.skip_channels, 1, 1));
        }
        let mut decoder = Vec::with_capacity(s);
        for i in 0..s {
            let deeper = down[(i + 1).min(s - 1)];
            decoder.push([
                b.block(&format!("dec{i}.0"), deeper + config.skip_channels, down[i], 3, 1),
                b.block(&format!("dec{i}.1"), down[i], down[i], 3, 1),
            ]);
        }
        let head_in = if s == 0 { config.input_channels } else { down[0] };
        let head = b.conv(
            "head",
            ConvShape {
                cin: head_in,
                cout: config.out_channels,
                k: config.head_kernel,
                stride: 1,
            },
            true,
        );
        let total = b.offset;
        (
            Self {
                encoder,
                skip,
                decoder,
                head,
            },
            b.params,
            total,
        )
    }
}

/// Weights of a skip network, flattened into one buffer.
#[derive(Debug, Clone)]
pub struct NetworkState {
    config: SkipNetConfig,
    arch: Architecture,
    params: Vec<ParamInfo>,
    values: Vec<f64>,
    seed: u64,
}

impl PartialEq for NetworkState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values && self.seed == other.seed
    }
}

/// Conv kernels and biases ~ U(-b, b) with `b = sqrt(1 / fan_in)`; norm scale 1, shift 0.
pub fn init_network(config: &SkipNetConfig, seed: u64) -> Result<NetworkState> {
    config.validate()?;
    let (arch, params, total) = Architecture::build(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; total];
    for p in &params {
        let slot = &mut values[p.range()];
        match p.kind {
            ParamKind::ConvWeight | ParamKind::ConvBias => {
                let bound = (1.0 / p.fan_in as f64).sqrt();
                for v in slot {
                    *v = rng.random_range(-bound..bound);
                }
            }
            ParamKind::NormScale => slot.fill(1.0),
            ParamKind::NormShift => slot.fill(0.0),
        }
    }
    Ok(NetworkState {
        config: config.clone(),
        arch,
        params,
        values,
        seed,
    })
}

struct BlockTape {
    conv: ConvCache,
    norm: Option<NormCache>,
    /// Block output (after the activation), needed by the activation backward.
    output: Vec<f64>,
}

struct LevelTape {
    enc: [BlockTape; 2],
    skip: BlockTape,
    dec: [BlockTape; 2],
    /// Spatial size of the features entering the upsampler.
    up_from: (usize, usize),
    up_channels: usize,
}

pub(crate) struct Tape {
    levels: Vec<LevelTape>,
    head: ConvCache,
    output: Vec<f64>,
}

impl Tape {
    /// Which leaky-ReLU inputs were negative, over every block in a fixed order.
    pub(crate) fn activation_signs(&self) -> Vec<bool> {
        self.levels
            .iter()
            .flat_map(|l| l.enc.iter().chain(std::iter::once(&l.skip)).chain(l.dec.iter()))
            .flat_map(|b| b.output.iter().map(|&v| v < 0.0))
            .collect()
    }
}

impl NetworkState {
    pub fn config(&self) -> &SkipNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_parameters(&self) -> usize {
        self.values.len()
    }

    fn slice(&self, idx: usize) -> &[f64] {
        &self.values[self.params[idx].range()]
    }

    pub(crate) fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.input_channels, h, w],
                got: vec![c, h, w],
            });
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Precondition(format!(
                "spatial size {h}x{w} is not divisible by {m}"
            )));
        }
        Ok(())
    }

    fn block_forward(&self, x: &Feat, block: &Block) -> (Feat, BlockTape) {
        let bias = block.conv.bias.map(|i| self.slice(i));
        let (mut y, conv) =
            layers::conv_forward(x, block.conv.shape, self.slice(block.conv.weight), bias);
        let norm = block.norm.map(|(sc, sh)| {
            let (z, cache) = layers::norm_forward(&y, self.slice(sc), self.slice(sh));
            y = z;
            cache
        });
        layers::leaky_relu_inplace(&mut y, self.config.activation);
        let output = y.data.clone();
        (y, BlockTape { conv, norm, output })
    }

    fn block_backward(&self, mut dy: Feat, block: &Block, tape: &BlockTape, grad: &mut [f64]) -> Feat {
        layers::leaky_relu_backward_inplace(&mut dy, &tape.output, self.config.activation);
        if let (Some((sc, sh)), Some(cache)) = (block.norm, &tape.norm) {
            let (rs, rh) = (self.params[sc].range(), self.params[sh].range());
            let mut dscale = vec![0.0; rs.len()];
            let mut dshift = vec![0.0; rh.len()];
            dy = layers::norm_backward(&dy, self.slice(sc), cache, &mut dscale, &mut dshift);
            add_into(&mut grad[rs], &dscale);
            add_into(&mut grad[rh], &dshift);
        }
        self.conv_backward(&dy, &block.conv, &tape.conv, grad)
    }

    fn conv_backward(&self, dy: &Feat, spec: &ConvSpec, cache: &ConvCache, grad: &mut [f64]) -> Feat {
        let wr = self.params[spec.weight].range();
        let mut dw = vec![0.0; wr.len()];
        let mut db = spec.bias.map(|b| vec![0.0; self.params[b].len()]);
        let dx = layers::conv_backward(
            dy,
            spec.shape,
            self.slice(spec.weight),
            cache,
            &mut dw,
            db.as_deref_mut(),
        );
        add_into(&mut grad[wr], &dw);
        if let (Some(b), Some(db)) = (spec.bias, db) {
            add_into(&mut grad[self.params[b].range()], &db);
        }
        dx
    }

    pub(crate) fn forward_tape(&self, input: &Feat) -> (Feat, Tape) {
        let arch = &self.arch;
        let s = self.config.scales;
        let mut x = input.clone();
        let mut partial = Vec::with_capacity(s);
        for i in 0..s {
            let (sk, skip_tape) = self.block_forward(&x, &arch.skip[i]);
            let (e0, t0) = self.block_forward(&x, &arch.encoder[i][0]);
            let (e1, t1) = self.block_forward(&e0, &arch.encoder[i][1]);
            partial.push((sk, skip_tape, [t0, t1]));
            x = e1;
        }
        let mut dec_tapes: Vec<Option<([BlockTape; 2], (usize, usize), usize)>> =
            (0..s).map(|_| None).collect();
        for i in (0..s).rev() {
            let up_from = (x.h, x.w);
            let up_channels = x.c;
            let up = layers::upsample2_forward(&x);
            let cat = layers::concat_channels(&up, &partial[i].0);
            let (d0, t0) = self.block_forward(&cat, &arch.decoder[i][0]);
            let (d1, t1) = self.block_forward(&d0, &arch.decoder[i][1]);
            dec_tapes[i] = Some(([t0, t1], up_from, up_channels));
            x = d1;
        }
        let head = &arch.head;
        let (mut out, head_cache) = layers::conv_forward(
            &x,
            head.shape,
            self.slice(head.weight),
            head.bias.map(|b| self.slice(b)),
        );
        if self.config.output == OutputActivation::Logistic {
            for v in &mut out.data {
                *v = layers::sigmoid(*v);
            }
        }
        let levels = partial
            .into_iter()
            .zip(dec_tapes)
            .map(|((_, skip, enc), dec)| {
                let (dec, up_from, up_channels) = dec.expect("every level decoded");
                LevelTape {
                    enc,
                    skip,
                    dec,
                    up_from,
                    up_channels,
                }
            })
            .collect();
        let output = out.data.clone();
        (
            out,
            Tape {
                levels,
                head: head_cache,
                output,
            },
        )
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given `dloss/doutput`.
    pub(crate) fn backward(&self, tape: &Tape, mut dout: Feat) -> Vec<f64> {
        let mut grad = vec![0.0; self.values.len()];
        let arch = &self.arch;
        let s = self.config.scales;
        if self.config.output == OutputActivation::Logistic {
            for (g, &y) in dout.data.iter_mut().zip(&tape.output) {
                *g *= y * (1.0 - y);
            }
        }
        let mut dy = self.conv_backward(&dout, &arch.head, &tape.head, &mut grad);

        let mut dskips = Vec::with_capacity(s);
        for i in 0..s {
            let lt = &tape.levels[i];
            let d = self.block_backward(dy, &arch.decoder[i][1], &lt.dec[1], &mut grad);
            let d = self.block_backward(d, &arch.decoder[i][0], &lt.dec[0], &mut grad);
            let (dup, dskip) = layers::split_channels(d, lt.up_channels);
            dskips.push(dskip);
            dy = layers::upsample2_backward(&dup, lt.up_from.0, lt.up_from.1);
        }
        for i in (0..s).rev() {
            let lt = &tape.levels[i];
            let d = self.block_backward(dy, &arch.encoder[i][1], &lt.enc[1], &mut grad);
            let mut d = self.block_backward(d, &arch.encoder[i][0], &lt.enc[0], &mut grad);
            let ds = self.block_backward(
                std::mem::replace(&mut dskips[i], Feat::zeros(0, 0, 0)),
                &arch.skip[i],
                &lt.skip,
                &mut grad,
            );
            add_into(&mut d.data, &ds.data);
            dy = d;
        }
        grad
    }

    pub(crate) fn forward_feat(&self, input: &Feat) -> Feat {
        self.forward_tape(input).0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
