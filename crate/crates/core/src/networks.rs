//! Classifier `q(S|X)`, recognizer `q(Z|X)` and generator `p(X|S,Z)`.
//!
//! Each network is a stack of bidirectional gated recurrent layers, every
//! layer followed by layer normalization, topped by a dense output head. The
//! encoder sits behind [`SequenceEncoder`] so other cells can be swapped in.

use serde::{Deserialize, Serialize};

use crate::diffmath::{DiffError, Graph, ParamId, ParamStore, RngState, Tensor, Var, EPS_CLAMP, EPS_VAR};
use crate::scalar::Scalar;
use crate::vocab::{CHROMA_DIM, NUM_LABELS};

/// Bounds on the recognizer's log-variance output.
pub const LOG_VAR_BOUND: f64 = 10.0;

/// Scale applied to the Glorot range of the output heads, so that a fresh
/// classifier starts close to uniform.
pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    pub latent: usize,
    pub labels: usize,
    pub chroma: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            hidden: 32,
            bidirectional: true,
            latent: 64,
            labels: NUM_LABELS,
            chroma: CHROMA_DIM,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.layers == 0 || self.hidden == 0 || self.latent == 0 || self.labels < 2 || self.chroma == 0 {
            return Err(NetworkError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    /// Width of the encoder output per frame.
    pub fn output_width(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid encoder config {0}")]
    Config(String),
    #[error("{what}: expected {expected} columns, got {found}")]
    Input {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Maps an `N x in` sequence to an `N x out` sequence on a graph.
pub trait SequenceEncoder<T: Scalar> {
    fn output_width(&self) -> usize;
    fn encode(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, DiffError>;
}

fn glorot<T: Scalar>(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Tensor<T> {
    let limit = scale * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng.uniform(-limit, limit)))
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        scale: f64,
        rng: &mut RngState,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            w: store.insert(format!("{name}.w"), glorot(inputs, outputs, scale, rng))?,
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[1, outputs]))?,
        })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, DiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// One direction of a gated recurrent layer. Gate columns are ordered
/// reset, update, candidate.
#[derive(Debug, Clone)]
struct GruCell {
    w_in: ParamId,
    b_in: ParamId,
    w_hid: ParamId,
    b_hid: ParamId,
    hidden: usize,
}

impl GruCell {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self, DiffError> {
        let gates = 3 * hidden;
        Ok(Self {
            w_in: store.insert(format!("{name}.w_in"), glorot(inputs, gates, 1.0, rng))?,
            b_in: store.insert(format!("{name}.b_in"), Tensor::zeros(&[1, gates]))?,
            w_hid: store.insert(format!("{name}.w_hid"), glorot(hidden, gates, 1.0, rng))?,
            b_hid: store.insert(format!("{name}.b_hid"), Tensor::zeros(&[1, gates]))?,
            hidden,
        })
    }

    /// Runs over the rows of `x` forward, or backward when `reverse`; the
    /// result is in frame order either way.
    fn run<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, reverse: bool) -> Result<Var, DiffError> {
        let n = g.value(x).rows();
        let w_in = g.param(store, self.w_in);
        let b_in = g.param(store, self.b_in);
        let w_hid = g.param(store, self.w_hid);
        let b_hid = g.param(store, self.b_hid);
        let xw = g.matmul(x, w_in)?;
        let xw = g.add_row(xw, b_in)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = vec![h; n];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            h = g.gru_step(xw, t, h, w_hid, b_hid)?;
            states[t] = h;
        }
        g.concat_rows(&states)
    }
}

#[derive(Debug, Clone)]
struct GruLayer {
    fwd: GruCell,
    bwd: Option<GruCell>,
    gain: ParamId,
    bias: ParamId,
}

/// Stacked (bi)directional gated recurrent encoder with layer normalization.
#[derive(Debug, Clone)]
pub struct GruEncoder {
    layers: Vec<GruLayer>,
    width: usize,
}

impl GruEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: usize,
        cfg: &EncoderConfig,
        rng: &mut RngState,
    ) -> Result<Self, DiffError> {
        let width = cfg.output_width();
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut fan_in = inputs;
        for l in 0..cfg.layers {
            let name = format!("{prefix}.enc{l}");
            let fwd = GruCell::new(store, &format!("{name}.fwd"), fan_in, cfg.hidden, rng)?;
            let bwd = if cfg.bidirectional {
                Some(GruCell::new(store, &format!("{name}.bwd"), fan_in, cfg.hidden, rng)?)
            } else {
                None
            };
            let gain = store.insert(format!("{name}.ln_gain"), Tensor::full(&[1, width], T::one()))?;
            let bias = store.insert(format!("{name}.ln_bias"), Tensor::zeros(&[1, width]))?;
            layers.push(GruLayer { fwd, bwd, gain, bias });
            fan_in = width;
        }
        Ok(Self { layers, width })
    }
}

impl<T: Scalar> SequenceEncoder<T> for GruEncoder {
    fn output_width(&self) -> usize {
        self.width
    }

    fn encode(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for layer in &self.layers {
            let f = layer.fwd.run(g, store, h, false)?;
            let out = match &layer.bwd {
                Some(cell) => {
                    let b = cell.run(g, store, h, true)?;
                    g.concat_cols(&[f, b])?
                }
                None => f,
            };
            let gain = g.param(store, layer.gain);
            let bias = g.param(store, layer.bias);
            h = g.layer_norm(out, gain, bias, T::lit(EPS_VAR))?;
        }
        Ok(h)
    }
}

/// The three networks and their shared parameter store.
#[derive(Debug, Clone)]
pub struct ChordVae<T> {
    cfg: EncoderConfig,
    pub store: ParamStore<T>,
    cls_enc: GruEncoder,
    cls_head: Dense,
    rec_enc: GruEncoder,
    rec_mean: Dense,
    rec_logvar: Dense,
    gen_enc: GruEncoder,
    gen_head: Dense,
}

/// Which sub-network a parameter belongs to, by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subnet {
    Classifier,
    Recognizer,
    Generator,
}

impl Subnet {
    pub fn prefix(self) -> &'static str {
        match self {
            Subnet::Classifier => "classifier.",
            Subnet::Recognizer => "recognizer.",
            Subnet::Generator => "generator.",
        }
    }

    pub fn of(name: &str) -> Option<Subnet> {
        [Subnet::Classifier, Subnet::Recognizer, Subnet::Generator]
            .into_iter()
            .find(|s| name.starts_with(s.prefix()))
    }
}

impl<T: Scalar> ChordVae<T> {
    /// Builds all three networks with weights drawn from `seed`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let root = RngState::new(seed);
        let mut store = ParamStore::new();
        let w = cfg.output_width();

        let mut rng = root.substream(0);
        let cls_enc = GruEncoder::new(&mut store, "classifier", cfg.chroma, &cfg, &mut rng)?;
        let cls_head = Dense::new(&mut store, "classifier.head", w, cfg.labels, HEAD_INIT_SCALE, &mut rng)?;

        let mut rng = root.substream(1);
        let rec_enc = GruEncoder::new(&mut store, "recognizer", cfg.chroma, &cfg, &mut rng)?;
        let rec_mean = Dense::new(&mut store, "recognizer.mean", w, cfg.latent, HEAD_INIT_SCALE, &mut rng)?;
        let rec_logvar = Dense::new(&mut store, "recognizer.logvar", w, cfg.latent, HEAD_INIT_SCALE, &mut rng)?;

        let mut rng = root.substream(2);
        let gen_enc = GruEncoder::new(&mut store, "generator", cfg.labels + cfg.latent, &cfg, &mut rng)?;
        let gen_head = Dense::new(&mut store, "generator.head", w, cfg.chroma, HEAD_INIT_SCALE, &mut rng)?;

        Ok(Self {
            cfg,
            store,
            cls_enc,
            cls_head,
            rec_enc,
            rec_mean,
            rec_logvar,
            gen_enc,
            gen_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_cols(&self, g: &Graph<T>, v: Var, what: &'static str, expected: usize) -> Result<(), NetworkError> {
        let t = g.value(v);
        if !t.is_matrix() || t.cols() != expected || t.rows() == 0 {
            return Err(NetworkError::Input {
                what,
                expected,
                found: if t.is_matrix() { t.cols() } else { 0 },
            });
        }
        Ok(())
    }

    /// Frame posteriors `Pi`, `N x K`, rows on the simplex.
    pub fn classify(&self, g: &mut Graph<T>, x: Var) -> Result<Var, NetworkError> {
        self.check_cols(g, x, "classifier input", self.cfg.chroma)?;
        let h = self.cls_enc.encode(g, &self.store, x)?;
        let logits = self.cls_head.apply(g, &self.store, h)?;
        Ok(g.softmax(logits)?)
    }

    /// Posterior means and clamped log-variances, each `N x L`.
    pub fn recognize(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var), NetworkError> {
        self.check_cols(g, x, "recognizer input", self.cfg.chroma)?;
        let h = self.rec_enc.encode(g, &self.store, x)?;
        let mean = self.rec_mean.apply(g, &self.store, h)?;
        let lv = self.rec_logvar.apply(g, &self.store, h)?;
        let bound = T::lit(LOG_VAR_BOUND);
        Ok((mean, g.clamp(lv, -bound, bound)))
    }

    /// Bernoulli parameters `N x D`, strictly inside (0, 1).
    pub fn generate(&self, g: &mut Graph<T>, s: Var, z: Var) -> Result<Var, NetworkError> {
        self.check_cols(g, s, "generator labels", self.cfg.labels)?;
        self.check_cols(g, z, "generator latents", self.cfg.latent)?;
        let input = g.concat_cols(&[s, z])?;
        let h = self.gen_enc.encode(g, &self.store, input)?;
        let logits = self.gen_head.apply(g, &self.store, h)?;
        let omega = g.sigmoid(logits);
        let eps = T::lit(EPS_CLAMP);
        Ok(g.clamp(omega, eps, T::one() - eps))
    }

    /// Gradient-free classification of one chroma matrix.
    pub fn posteriors(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pi = self.classify(&mut g, xv)?;
        Ok(g.value(pi).clone())
    }

    /// Gradient-free generation from given labels and latents.
    pub fn reconstruct(&self, s: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let zv = g.constant(z.clone());
        let omega = self.generate(&mut g, sv, zv)?;
        Ok(g.value(omega).clone())
    }

    /// Gradient-free recognizer outputs `(mean, log_var)`.
    pub fn latents(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NetworkError> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (m, v) = self.recognize(&mut g, xv)?;
        Ok((g.value(m).clone(), g.value(v).clone()))
    }
}
