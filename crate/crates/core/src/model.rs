//! The learnable blocks: bidirectional LSTM encoder, projector, decoder and
//! regression head, plus the two loss-weighting log-variances.
//!
//! Every series is encoded on its own: a snippet with `C` channels becomes
//! `C` univariate series sharing one encoder. Point-wise representations of a
//! batch of `n` series are kept as an `n × (T·d_f)` matrix whose row is the
//! row-major flattening of that series' `T × d_f` representation, each step
//! laid out as `[forward state, backward state]`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::array::{Array, DenseArray};
use crate::error::{dim_err, Error, Result};
use crate::gradcheck::ParamVars;
use crate::real::Real;
use crate::rng;
use crate::tape::{Tape, Var};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Time steps per series (T).
    pub steps: usize,
    /// Channels per snippet (C).
    pub channels: usize,
    /// Point-wise width, both directions concatenated (d_f).
    pub d_f: usize,
    /// Snippet-wise width (d_h).
    pub d_h: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { steps: 128, channels: 7, d_f: 32, d_h: 128 }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks.
    pub fn toy() -> Self {
        Self { steps: 8, channels: 2, d_f: 8, d_h: 16 }
    }

    pub fn hidden(&self) -> usize {
        self.d_f / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.channels == 0 || self.d_h == 0 || self.d_f == 0 || self.d_f % 2 != 0 {
            return Err(Error::Config(alloc::format!("invalid model dimensions {self:?}")));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden();
        let mut out = Vec::new();
        for dir in ["fwd", "bwd"] {
            out.push((alloc::format!("enc.{dir}.w_ih"), vec![1, 4 * h]));
            out.push((alloc::format!("enc.{dir}.w_hh"), vec![h, 4 * h]));
            out.push((alloc::format!("enc.{dir}.b"), vec![1, 4 * h]));
        }
        out.push(("proj.w".into(), vec![self.steps * self.d_f, self.d_h]));
        out.push(("proj.b".into(), vec![1, self.d_h]));
        out.push(("dec.w".into(), vec![self.d_f, self.channels]));
        out.push(("dec.b".into(), vec![1, self.channels]));
        out.push(("head.w".into(), vec![self.channels * self.d_f, 1]));
        out.push(("head.b".into(), vec![1, 1]));
        out.push((LOGVAR_R.into(), vec![1, 1]));
        out.push((LOGVAR_C.into(), vec![1, 1]));
        out
    }
}

pub const LOGVAR_R: &str = "loss.logvar_r";
pub const LOGVAR_C: &str = "loss.logvar_c";
pub const HEAD_PARAMS: [&str; 2] = ["head.w", "head.b"];

/// All learnable arrays by name, plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F = f32> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Array<F>>,
}

impl ModelParams<f32> {
    /// Uniform(−k, k) with k = 1/sqrt(fan_in) per matrix; forget-gate biases
    /// start at +1; log-variances start at 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::ids::INIT);
        let h = config.hidden();
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.shapes() {
            let arr = if name.starts_with("loss.") {
                DenseArray::zeros(&shape)
            } else {
                let fan_in = match name.as_str() {
                    "proj.b" => config.steps * config.d_f,
                    "dec.b" => config.d_f,
                    "head.b" => config.channels * config.d_f,
                    n if n.starts_with("enc.") && n.ends_with(".b") => h,
                    _ => shape[0],
                };
                uniform(&shape, 1.0 / libm::sqrt(fan_in as f64), &mut rng)
            };
            tensors.insert(name, arr);
        }
        for dir in ["fwd", "bwd"] {
            let b = tensors.get_mut(&alloc::format!("enc.{dir}.b")).expect("bias exists");
            for v in &mut b.values_mut()[h..2 * h] {
                *v += 1.0;
            }
        }
        Ok(Self { config, tensors })
    }

    /// Fresh regression head drawn from its own substream.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, rng::ids::HEAD_INIT);
        let k = 1.0 / libm::sqrt((self.config.channels * self.config.d_f) as f64);
        for name in HEAD_PARAMS {
            let shape = self.tensors[name].shape().to_vec();
            self.tensors.insert(name.to_string(), uniform(&shape, k, &mut rng));
        }
    }
}

impl<F: Real> ModelParams<F> {
    pub fn get(&self, name: &str) -> Result<&Array<F>> {
        self.tensors.get(name).ok_or_else(|| Error::Config(alloc::format!("missing parameter {name}")))
    }

    /// Checks names and shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.config.shapes();
        if shapes.len() != self.tensors.len() {
            return Err(dim_err!("expected {} parameters, found {}", shapes.len(), self.tensors.len()));
        }
        for (name, shape) in shapes {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(dim_err!("parameter {name} has shape {:?}, expected {:?}", t.shape(), shape));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(alloc::format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams { config: self.config, tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers every parameter on the tape.
    pub fn register(&self, tape: &mut Tape<F>) -> ParamVars {
        self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(k, v.clone()))).collect()
    }

    /// Registers every parameter as a constant (inference only).
    pub fn register_frozen(&self, tape: &mut Tape<F>) -> ParamVars {
        self.tensors.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

fn uniform<R: Rng>(shape: &[usize], k: f64, rng: &mut R) -> DenseArray {
    let n = shape.iter().product();
    let vals = (0..n).map(|_| rng.random_range(-k..=k) as f32).collect();
    DenseArray::new(shape.to_vec(), vals).expect("shape matches count")
}

fn var(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| Error::Config(alloc::format!("parameter {name} not registered")))
}

/// Bidirectional encoder over `n` univariate series given as `x (n × T)`.
/// Returns point-wise representations `n × (T·d_f)`.
pub fn encode_series<F: Real>(tape: &mut Tape<F>, vars: &ParamVars, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    if xv.shape().len() != 2 || xv.cols() != cfg.steps {
        return Err(dim_err!("encoder expects n × {} series, got {:?}", cfg.steps, xv.shape()));
    }
    let dir = |d: &str| -> Result<[Var; 3]> {
        Ok([
            var(vars, &alloc::format!("enc.{d}.w_ih"))?,
            var(vars, &alloc::format!("enc.{d}.w_hh"))?,
            var(vars, &alloc::format!("enc.{d}.b"))?,
        ])
    };
    let (fwd, bwd) = (dir("fwd")?, dir("bwd")?);
    tape.bilstm(x, fwd, bwd)
}

/// Snippet-wise representations: flatten → affine → tanh, `n × d_h`.
pub fn project<F: Real>(tape: &mut Tape<F>, vars: &ParamVars, cfg: &ModelConfig, pointwise: Var) -> Result<Var> {
    let pv = tape.value(pointwise);
    if pv.cols() != cfg.steps * cfg.d_f {
        return Err(dim_err!("projector expects {} columns, got {}", cfg.steps * cfg.d_f, pv.cols()));
    }
    let z = tape.matmul(pointwise, var(vars, "proj.w")?)?;
    let z = tape.add_bias(z, var(vars, "proj.b")?)?;
    Ok(tape.tanh(z))
}

/// Shared affine map `d_f → C` applied at every step: `n × (T·d_f)` to
/// `(n·T) × C`.
pub fn decode<F: Real>(tape: &mut Tape<F>, vars: &ParamVars, cfg: &ModelConfig, pointwise: Var) -> Result<Var> {
    let pv = tape.value(pointwise);
    if pv.cols() != cfg.steps * cfg.d_f {
        return Err(dim_err!("decoder expects {} columns, got {}", cfg.steps * cfg.d_f, pv.cols()));
    }
    let n = pv.rows();
    let flat = tape.reshape(pointwise, &[n * cfg.steps, cfg.d_f])?;
    let z = tape.matmul(flat, var(vars, "dec.w")?)?;
    tape.add_bias(z, var(vars, "dec.b")?)
}

/// Capacity regression for `b` snippets whose `b·C` series are encoded as
/// `(b·C) × (T·d_f)` in snippet-major order: mean over time, concatenate the
/// channels, affine to a scalar. Returns `b × 1`.
pub fn regress<F: Real>(tape: &mut Tape<F>, vars: &ParamVars, cfg: &ModelConfig, pointwise: Var) -> Result<Var> {
    let rows = tape.value(pointwise).rows();
    if rows % cfg.channels != 0 {
        return Err(dim_err!("{rows} series do not group into snippets of {} channels", cfg.channels));
    }
    let pooled = tape.pool_time(pointwise, cfg.steps)?;
    let per_snippet = tape.reshape(pooled, &[rows / cfg.channels, cfg.channels * cfg.d_f])?;
    let z = tape.matmul(per_snippet, var(vars, "head.w")?)?;
    tape.add_bias(z, var(vars, "head.b")?)
}

/// Stacks the channels of `T × C` snippets into `(b·C) × T` univariate rows,
/// snippet-major.
pub fn series_rows<F: Real>(snippets: &[&Array<F>], cfg: &ModelConfig) -> Result<Array<F>> {
    let mut vals = Vec::with_capacity(snippets.len() * cfg.channels * cfg.steps);
    for s in snippets {
        if s.shape() != [cfg.steps, cfg.channels] {
            return Err(dim_err!("snippet shape {:?}, expected [{}, {}]", s.shape(), cfg.steps, cfg.channels));
        }
        for ch in 0..cfg.channels {
            for t in 0..cfg.steps {
                vals.push(s.get(t, ch));
            }
        }
    }
    Array::new(vec![snippets.len() * cfg.channels, cfg.steps], vals)
}

/// Point-wise representations of one `T × C` snippet, shape `[C, T, d_f]`.
pub fn encode(series: &DenseArray, params: &ModelParams) -> Result<DenseArray> {
    let cfg = params.config;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let x = tape.constant(series_rows(&[series], &cfg)?);
    let p = encode_series(&mut tape, &vars, &cfg, x)?;
    tape.value(p).clone().reshape(&[cfg.channels, cfg.steps, cfg.d_f])
}

/// Snippet-wise representation of one point-wise `T × d_f` array.
pub fn project_one(pointwise: &DenseArray, params: &ModelParams) -> Result<DenseArray> {
    let cfg = params.config;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let p = tape.constant(pointwise.clone().reshape(&[1, pointwise.len()])?);
    let s = project(&mut tape, &vars, &cfg, p)?;
    Ok(tape.value(s).clone())
}

/// Decoded `T × C` series from one point-wise `T × d_f` array.
pub fn decode_one(pointwise: &DenseArray, params: &ModelParams) -> Result<DenseArray> {
    let cfg = params.config;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let p = tape.constant(pointwise.clone().reshape(&[1, pointwise.len()])?);
    let x = decode(&mut tape, &vars, &cfg, p)?;
    Ok(tape.value(x).clone())
}

/// Head output (normalized units) for one snippet's `[C, T, d_f]` encoding.
pub fn regress_one(pointwise: &DenseArray, params: &ModelParams) -> Result<f32> {
    let cfg = params.config;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let p = tape.constant(pointwise.clone().reshape(&[cfg.channels, cfg.steps * cfg.d_f])?);
    let y = regress(&mut tape, &vars, &cfg, p)?;
    Ok(tape.scalar(y))
}
