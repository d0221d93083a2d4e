//! Dense layers, the norm-capped weight-normalized layer, and construction
//! of encoders/decoders from architecture strings like `d300-d300-z64`.
//!
//! Layers own plain [`Tensor`] parameters.  Each training or evaluation pass
//! binds them once onto a fresh tape (`bind`), so a parameter has exactly one
//! leaf per tape no matter how many forward passes share it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dist::GaussianVars;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor added after the softplus head; keeps the KL away from the
/// singularity at vanishing variance.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Softplus,
    Identity,
}

impl Activation {
    fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Elu => x.elu(),
            Activation::Softplus => x.softplus(),
            Activation::Identity => Ok(x),
        }
    }
}

/// Fan-balanced uniform init, limit `±sqrt(6 / (fan_in + fan_out))`.
fn init_weight(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::rand_uniform(&[rows, cols], -limit, limit, rng)
}

/// Plain dense layer.  `weight[(r, c)]` connects input unit `r` to output
/// unit `c`, so the forward map is `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
    pub activation: Activation,
}

impl DenseLayer {
    pub fn init(inp: usize, out: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer { weight: init_weight(inp, out, rng), bias: Tensor::zeros(&[out]), activation }
    }
}

/// Weight-normalized dense layer with norm cap `H`.
///
/// Column `i` of `v` is the direction of output unit `i`'s weight vector; the
/// effective column is `w_i = v_i/‖v_i‖ · s_i` with
/// `s_i = min{‖v_i‖, H·sigmoid(u_i)}`, so `‖w_i‖ ≤ H` for every parameter
/// value by construction.
#[derive(Debug, Clone)]
pub struct WeightNormDense {
    pub v: Tensor,    // [in, out] direction columns
    pub u: Tensor,    // [out] cap pre-activations
    pub bias: Tensor, // [out]
    pub h: f64,
    pub activation: Activation,
}

impl WeightNormDense {
    pub fn init(inp: usize, out: usize, h: f64, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        // u starts at +3 so the cap opens at sigmoid(3) ≈ 0.95·H.
        WeightNormDense {
            v: init_weight(inp, out, rng),
            u: Tensor::full(&[out], 3.0),
            bias: Tensor::zeros(&[out]),
            h,
            activation,
        }
    }

    /// Effective weight matrix `[in, out]` computed from current parameters.
    pub fn effective_weight(&self) -> Tensor {
        let (inp, out) = (self.v.shape()[0], self.v.shape()[1]);
        let mut w = self.v.clone();
        for c in 0..out {
            let mut norm = 0.0;
            for r in 0..inp {
                let x = self.v.data()[r * out + c];
                norm += x * x;
            }
            let norm = norm.sqrt();
            let cap = self.h * crate::autodiff::sigmoid_scalar(self.u.data()[c]);
            let scale = norm.min(cap) / norm;
            for r in 0..inp {
                w.data_mut()[r * out + c] *= scale;
            }
        }
        w
    }

    /// Norms of the effective columns; each is ≤ `H` by construction.
    pub fn effective_column_norms(&self) -> Vec<f64> {
        let w = self.effective_weight();
        let (inp, out) = (w.shape()[0], w.shape()[1]);
        (0..out)
            .map(|c| (0..inp).map(|r| w.data()[r * out + c].powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    WeightNorm(WeightNormDense),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weight.shape()[0],
            Layer::WeightNorm(l) => l.v.shape()[0],
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weight.shape()[1],
            Layer::WeightNorm(l) => l.v.shape()[1],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::WeightNorm(l) => vec![&l.v, &l.u, &l.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::WeightNorm(l) => vec![&mut l.v, &mut l.u, &mut l.bias],
        }
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        match self {
            Layer::Dense(_) => vec![format!("{prefix}.weight"), format!("{prefix}.bias")],
            Layer::WeightNorm(_) => {
                vec![format!("{prefix}.v"), format!("{prefix}.u"), format!("{prefix}.bias")]
            }
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLayer<'t> {
        match self {
            Layer::Dense(l) => BoundLayer::Dense {
                weight: tape.leaf(&l.weight),
                bias: tape.leaf(&l.bias),
                activation: l.activation,
            },
            Layer::WeightNorm(l) => BoundLayer::WeightNorm {
                v: tape.leaf(&l.v),
                u: tape.leaf(&l.u),
                bias: tape.leaf(&l.bias),
                h: l.h,
                activation: l.activation,
            },
        }
    }

    /// Bind against externally supplied parameter leaves (in [`Layer::params`]
    /// order), consuming them from the iterator.  Used by gradient checks
    /// that need the loss expressed in terms of specific tape vars.
    pub fn bind_from_vars<'t>(&self, vars: &mut std::slice::Iter<'_, Var<'t>>) -> BoundLayer<'t> {
        let mut next = || *vars.next().expect("not enough parameter vars");
        match self {
            Layer::Dense(l) => BoundLayer::Dense {
                weight: next(),
                bias: next(),
                activation: l.activation,
            },
            Layer::WeightNorm(l) => BoundLayer::WeightNorm {
                v: next(),
                u: next(),
                bias: next(),
                h: l.h,
                activation: l.activation,
            },
        }
    }
}

pub enum BoundLayer<'t> {
    Dense { weight: Var<'t>, bias: Var<'t>, activation: Activation },
    WeightNorm { v: Var<'t>, u: Var<'t>, bias: Var<'t>, h: f64, activation: Activation },
}

impl<'t> BoundLayer<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            BoundLayer::Dense { weight, bias, activation } => {
                activation.apply(x.matmul(*weight)?.add(*bias)?)
            }
            BoundLayer::WeightNorm { v, u, bias, h, activation } => {
                let out = weight_norm_forward(x, *v, *u, *bias, *h)?;
                activation.apply(out)
            }
        }
    }

    pub fn param_vars(&self) -> Vec<Var<'t>> {
        match self {
            BoundLayer::Dense { weight, bias, .. } => vec![*weight, *bias],
            BoundLayer::WeightNorm { v, u, bias, .. } => vec![*v, *u, *bias],
        }
    }
}

/// `x·W_eff + bias` with `W_eff` columns rescaled to `s_i = min{‖v_i‖,
/// H·sigmoid(u_i)}`.  Ties in the min route gradient to the cap branch;
/// a direction column with norm under 1e-12 is rejected as degenerate.
pub fn weight_norm_forward<'t>(
    x: Var<'t>,
    v: Var<'t>,
    u: Var<'t>,
    bias: Var<'t>,
    h: f64,
) -> Result<Var<'t>> {
    let norms = v.column_l2_norm()?;
    let caps = u.sigmoid()?.mul_scalar(h)?;
    let s = norms.min_bcast(caps)?;
    let scale = s.div(norms)?;
    let w_eff = v.mul(scale)?;
    x.matmul(w_eff)?.add(bias)
}

// ── architecture strings ─────────────────────────────────────────────

/// Terminal head of an architecture string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    /// `z<width>`: Gaussian head (mean + variance) of the given latent width.
    Gaussian(usize),
    /// `x<width>`: Bernoulli logits head of the given observation width.
    Bernoulli(usize),
}

/// Parsed architecture: hidden ELU widths plus exactly one terminal head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub terminal: Terminal,
}

impl ArchSpec {
    pub fn terminal_width(&self) -> usize {
        match self.terminal {
            Terminal::Gaussian(w) | Terminal::Bernoulli(w) => w,
        }
    }
}

impl std::fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for w in &self.hidden {
            write!(f, "d{w}-")?;
        }
        match self.terminal {
            Terminal::Gaussian(w) => write!(f, "z{w}"),
            Terminal::Bernoulli(w) => write!(f, "x{w}"),
        }
    }
}

/// Parse strings of the grammar `(d<width>-)*(z|x)<width>`.
pub fn parse_arch(spec: &str) -> Result<ArchSpec> {
    let mut hidden = Vec::new();
    let mut terminal = None;
    let mut pos = 0usize;
    let parts: Vec<&str> = spec.split('-').collect();
    let last = parts.len() - 1;
    for (i, part) in parts.iter().enumerate() {
        let err = |msg: String| Error::ArchParse { pos, msg };
        let mut chars = part.chars();
        let kind = chars.next().ok_or_else(|| err("empty layer token".into()))?;
        let width_str = chars.as_str();
        let width: usize = width_str
            .parse()
            .map_err(|_| err(format!("expected integer width after `{kind}`, got `{width_str}`")))?;
        if width == 0 {
            return Err(err("layer width must be positive".into()));
        }
        match (kind, i == last) {
            ('d', false) => hidden.push(width),
            ('d', true) => return Err(err("architecture must end in a z- or x- layer".into())),
            ('z', true) => terminal = Some(Terminal::Gaussian(width)),
            ('x', true) => terminal = Some(Terminal::Bernoulli(width)),
            ('z', false) | ('x', false) => {
                return Err(err(format!("terminal layer `{kind}{width}` must come last")))
            }
            _ => return Err(err(format!("unknown layer kind `{kind}`"))),
        }
        pos += part.len() + 1; // the '-'
    }
    Ok(ArchSpec { hidden, terminal: terminal.expect("terminal set or error returned") })
}

// ── encoder / decoder ────────────────────────────────────────────────

/// Weight-normalization settings for an encoder build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightNormCfg {
    pub h: f64,
    /// Whether the two Gaussian head layers are capped as well (default).
    pub cap_heads: bool,
}

impl WeightNormCfg {
    pub fn new(h: f64) -> Self {
        WeightNormCfg { h, cap_heads: true }
    }
}

/// Inference network `x → (mean, variance)`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub input_dim: usize,
    pub latent_dim: usize,
    hidden: Vec<Layer>,
    mean_head: Layer,
    var_head: Layer,
}

fn make_layer(
    inp: usize,
    out: usize,
    activation: Activation,
    wn: Option<WeightNormCfg>,
    rng: &mut ChaCha8Rng,
) -> Layer {
    match wn {
        Some(cfg) => Layer::WeightNorm(WeightNormDense::init(inp, out, cfg.h, activation, rng)),
        None => Layer::Dense(DenseLayer::init(inp, out, activation, rng)),
    }
}

impl Encoder {
    /// Build from a z-terminal architecture.  With `weight_norm` set, every
    /// dense layer (hidden and, unless `cap_heads` is cleared, both heads)
    /// becomes a capped weight-normalized layer.
    pub fn build(
        input_dim: usize,
        arch: &ArchSpec,
        weight_norm: Option<WeightNormCfg>,
        seed: u64,
    ) -> Result<Encoder> {
        let latent_dim = match arch.terminal {
            Terminal::Gaussian(w) => w,
            Terminal::Bernoulli(_) => {
                return Err(Error::WrongTerminal { expected: "z", found: "x" })
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::new();
        let mut inp = input_dim;
        for &w in &arch.hidden {
            hidden.push(make_layer(inp, w, Activation::Elu, weight_norm, &mut rng));
            inp = w;
        }
        let head_wn = weight_norm.filter(|c| c.cap_heads);
        let mean_head = make_layer(inp, latent_dim, Activation::Identity, head_wn, &mut rng);
        let var_head = make_layer(inp, latent_dim, Activation::Identity, head_wn, &mut rng);
        Ok(Encoder { input_dim, latent_dim, hidden, mean_head, var_head })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            hidden: self.hidden.iter().map(|l| l.bind(tape)).collect(),
            mean_head: self.mean_head.bind(tape),
            var_head: self.var_head.bind(tape),
        }
    }

    pub fn bind_from_vars<'t>(&self, vars: &mut std::slice::Iter<'_, Var<'t>>) -> BoundEncoder<'t> {
        BoundEncoder {
            hidden: self.hidden.iter().map(|l| l.bind_from_vars(vars)).collect(),
            mean_head: self.mean_head.bind_from_vars(vars),
            var_head: self.var_head.bind_from_vars(vars),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(l.params());
        }
        out.extend(self.mean_head.params());
        out.extend(self.var_head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.extend(l.params_mut());
        }
        out.extend(self.mean_head.params_mut());
        out.extend(self.var_head.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.extend(l.param_names(&format!("encoder.hidden{i}")));
        }
        out.extend(self.mean_head.param_names("encoder.mean_head"));
        out.extend(self.var_head.param_names("encoder.var_head"));
        out
    }

    /// All layers, hidden first, then mean head, then variance head.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut out: Vec<&Layer> = self.hidden.iter().collect();
        out.push(&self.mean_head);
        out.push(&self.var_head);
        out
    }

    /// Encoder output (mean, variance) for a batch, on a throwaway tape.
    pub fn encode_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let q = bound.forward(tape.leaf(x))?;
        Ok((q.mean.value(), q.var.value()))
    }

    /// Like [`Encoder::encode_values`] but returning the variance head's
    /// pre-activation instead of the variance.
    pub fn encode_value_parts(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let (mean, var_pre) = bound.forward_parts(tape.leaf(x))?;
        Ok((mean.value(), var_pre.value()))
    }
}

pub struct BoundEncoder<'t> {
    hidden: Vec<BoundLayer<'t>>,
    mean_head: BoundLayer<'t>,
    var_head: BoundLayer<'t>,
}

impl<'t> BoundEncoder<'t> {
    /// `(mean, variance pre-activation)`, both `[batch, latent]`.
    pub fn forward_parts(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mut h = x;
        for l in &self.hidden {
            h = l.forward(h)?;
        }
        Ok((self.mean_head.forward(h)?, self.var_head.forward(h)?))
    }

    /// Batch of proposal Gaussians with `var = softplus(pre) + VAR_FLOOR`.
    pub fn forward(&self, x: Var<'t>) -> Result<GaussianVars<'t>> {
        let (mean, var_pre) = self.forward_parts(x)?;
        let var = var_pre.softplus()?.add_scalar(VAR_FLOOR)?;
        Ok(GaussianVars { mean, var })
    }

    pub fn param_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(l.param_vars());
        }
        out.extend(self.mean_head.param_vars());
        out.extend(self.var_head.param_vars());
        out
    }
}

/// Generative network `z → Bernoulli logits`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub latent_dim: usize,
    pub output_dim: usize,
    hidden: Vec<Layer>,
    head: Layer,
}

impl Decoder {
    pub fn build(latent_dim: usize, arch: &ArchSpec, seed: u64) -> Result<Decoder> {
        let output_dim = match arch.terminal {
            Terminal::Bernoulli(w) => w,
            Terminal::Gaussian(_) => {
                return Err(Error::WrongTerminal { expected: "x", found: "z" })
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::new();
        let mut inp = latent_dim;
        for &w in &arch.hidden {
            hidden.push(Layer::Dense(DenseLayer::init(inp, w, Activation::Elu, &mut rng)));
            inp = w;
        }
        let head = Layer::Dense(DenseLayer::init(inp, output_dim, Activation::Identity, &mut rng));
        Ok(Decoder { latent_dim, output_dim, hidden, head })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundDecoder<'t> {
        BoundDecoder {
            hidden: self.hidden.iter().map(|l| l.bind(tape)).collect(),
            head: self.head.bind(tape),
        }
    }

    pub fn bind_from_vars<'t>(&self, vars: &mut std::slice::Iter<'_, Var<'t>>) -> BoundDecoder<'t> {
        BoundDecoder {
            hidden: self.hidden.iter().map(|l| l.bind_from_vars(vars)).collect(),
            head: self.head.bind_from_vars(vars),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(l.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.extend(l.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.extend(l.param_names(&format!("decoder.hidden{i}")));
        }
        out.extend(self.head.param_names("decoder.head"));
        out
    }
}

pub struct BoundDecoder<'t> {
    hidden: Vec<BoundLayer<'t>>,
    head: BoundLayer<'t>,
}

impl<'t> BoundDecoder<'t> {
    /// Bernoulli logits `[batch, output]` for a batch of latents.
    pub fn forward(&self, z: Var<'t>) -> Result<Var<'t>> {
        let mut h = z;
        for l in &self.hidden {
            h = l.forward(h)?;
        }
        self.head.forward(h)
    }

    pub fn param_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend(l.param_vars());
        }
        out.extend(self.head.param_vars());
        out
    }
}
