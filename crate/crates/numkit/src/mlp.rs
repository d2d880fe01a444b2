use rand::Rng;

use crate::{NumError, ParamId, ParamStore, Result, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    /// tanh approximation of GELU.
    Gelu,
    Sigmoid,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x))),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Value and derivative at `x` in one evaluation.
    pub fn apply_with_slope(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            _ => (self.apply(x), self.derivative(x)),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = fast_tanh(u);
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

/// tanh through a single `exp`; about twice as fast as `f64::tanh` and
/// within a few ulps of it.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Layer widths plus activations. `widths = [in, h1, ..., out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let spec = Self { widths, hidden, output };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(NumError::Config("an MLP needs at least an input and an output width".into()));
        }
        if self.widths.contains(&0) {
            return Err(NumError::Config(format!("zero layer width in {:?}", self.widths)));
        }
        if matches!(self.hidden, Activation::Identity | Activation::Sigmoid) && self.widths.len() > 2 {
            return Err(NumError::Config("hidden activation must be tanh, relu or gelu".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Multiply-add FLOPs for one sample, counting a dense r×c layer as 2·r·c.
    pub fn flops_per_sample(&self) -> u64 {
        self.widths.windows(2).map(|w| 2 * (w[0] * w[1]) as u64).sum()
    }
}

/// An MLP bound to parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Register fresh weights named `{prefix}.l{i}.w` / `{prefix}.l{i}.b`.
    /// Weights are uniform in ±sqrt(6 / (fan_in + fan_out)); biases zero.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
            let wid = store.insert(format!("{prefix}.l{i}.w"), Tensor2::new(fan_in, fan_out, data)?)?;
            let bid = store.insert(format!("{prefix}.l{i}.b"), Tensor2::zeros(1, fan_out))?;
            layers.push((wid, bid));
        }
        Ok(Self { spec, layers })
    }

    /// Register with every weight and bias set to zero.
    pub fn register_zeroed(store: &mut ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.widths.windows(2).enumerate() {
            let wid = store.insert(format!("{prefix}.l{i}.w"), Tensor2::zeros(w[0], w[1]))?;
            let bid = store.insert(format!("{prefix}.l{i}.b"), Tensor2::zeros(1, w[1]))?;
            layers.push((wid, bid));
        }
        Ok(Self { spec, layers })
    }

    /// Bind to parameters already present in `store` (e.g. after loading).
    pub fn bind(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, w) in spec.widths.windows(2).enumerate() {
            let find = |suffix: &str, shape: (usize, usize)| -> Result<ParamId> {
                let name = format!("{prefix}.l{i}.{suffix}");
                let id = store
                    .lookup(&name)
                    .ok_or_else(|| NumError::Config(format!("missing parameter {name}")))?;
                if store.value(id).shape() != shape {
                    return Err(NumError::Dimension(format!(
                        "{name}: stored {:?}, spec wants {shape:?}",
                        store.value(id).shape()
                    )));
                }
                Ok(id)
            };
            layers.push((find("w", (w[0], w[1]))?, find("b", (1, w[1]))?));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Zero the last layer (weights and bias).
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let &(w, b) = self.layers.last().expect("validated");
        store.value_mut(w).fill(0.0);
        store.value_mut(b).fill(0.0);
    }

    /// Zero every layer.
    pub fn zero_all(&self, store: &mut ParamStore) {
        for &(w, b) in &self.layers {
            store.value_mut(w).fill(0.0);
            store.value_mut(b).fill(0.0);
        }
    }

    /// Forward without keeping a tape.
    pub fn infer(&self, store: &ParamStore, input: &Tensor2) -> Result<Tensor2> {
        self.check_input(input)?;
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mut z = x.matmul(store.value(w))?;
            add_bias(&mut z, store.value(b));
            let act = if i == last { self.spec.output } else { self.spec.hidden };
            if act != Activation::Identity {
                z.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            x = z;
        }
        if !x.is_finite() {
            return Err(NumError::NonFinite("mlp output".into()));
        }
        Ok(x)
    }

    fn check_input(&self, input: &Tensor2) -> Result<()> {
        if input.cols() != self.spec.input_width() {
            return Err(NumError::Dimension(format!(
                "mlp expects {} input columns, got {}",
                self.spec.input_width(),
                input.cols()
            )));
        }
        Ok(())
    }
}

fn add_bias(z: &mut Tensor2, b: &Tensor2) {
    let cols = z.cols();
    for r in 0..z.rows() {
        for (v, bi) in z.row_mut(r).iter_mut().zip(b.data()) {
            *v += bi;
        }
    }
    debug_assert_eq!(cols, b.cols());
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct MlpTape {
    store_id: u64,
    store_version: u64,
    layers: Vec<(ParamId, ParamId)>,
    /// Input to each layer.
    inputs: Vec<Tensor2>,
    /// Activation derivative at each layer's pre-activation; `None` for identity.
    slopes: Vec<Option<Tensor2>>,
    out_shape: (usize, usize),
}

impl MlpTape {
    pub fn batch(&self) -> usize {
        self.out_shape.0
    }
}

/// Batched forward pass (`input` is batch × in). Records a tape.
pub fn mlp_forward(mlp: &Mlp, store: &ParamStore, input: &Tensor2) -> Result<(Tensor2, MlpTape)> {
    mlp.check_input(input)?;
    if !input.is_finite() {
        return Err(NumError::NonFinite("mlp input".into()));
    }
    let n = mlp.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut slopes = Vec::with_capacity(n);
    let mut x = input.clone();
    for (i, &(w, b)) in mlp.layers.iter().enumerate() {
        let mut z = x.matmul(store.value(w))?;
        add_bias(&mut z, store.value(b));
        let act = if i == n - 1 { mlp.spec.output } else { mlp.spec.hidden };
        if act == Activation::Identity {
            slopes.push(None);
        } else {
            let mut slope = Tensor2::zeros(z.rows(), z.cols());
            for (v, s) in z.data_mut().iter_mut().zip(slope.data_mut()) {
                (*v, *s) = act.apply_with_slope(*v);
            }
            slopes.push(Some(slope));
        }
        inputs.push(x);
        x = z;
    }
    if !x.is_finite() {
        return Err(NumError::NonFinite("mlp output".into()));
    }
    let tape = MlpTape {
        store_id: store.id(),
        store_version: store.version(),
        layers: mlp.layers.clone(),
        inputs,
        slopes,
        out_shape: x.shape(),
    };
    Ok((x, tape))
}

/// Backpropagate `upstream` (dLoss/dOutput, same shape as the forward
/// output). Parameter gradients are added into `store`; the gradient with
/// respect to the forward input is returned.
pub fn mlp_backward(tape: &MlpTape, store: &mut ParamStore, upstream: &Tensor2) -> Result<Tensor2> {
    if tape.store_id != store.id() {
        return Err(NumError::Tape("tape was recorded against a different parameter store".into()));
    }
    if tape.store_version != store.version() {
        return Err(NumError::Tape("parameters changed since the forward pass (stale tape)".into()));
    }
    if upstream.shape() != tape.out_shape {
        return Err(NumError::Tape(format!(
            "upstream gradient {:?} does not match forward output {:?}",
            upstream.shape(),
            tape.out_shape
        )));
    }
    let n = tape.layers.len();
    let mut g = upstream.clone();
    for i in (0..n).rev() {
        if let Some(slope) = &tape.slopes[i] {
            for (gv, s) in g.data_mut().iter_mut().zip(slope.data()) {
                *gv *= s;
            }
        }
        let (w, b) = tape.layers[i];
        tape.inputs[i].matmul_tn_acc(&g, store.grad_mut(w))?;
        {
            let bg = store.grad_mut(b).data_mut();
            for r in 0..g.rows() {
                for (acc, v) in bg.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
        }
        g = g.matmul_nt(store.value(w))?;
    }
    Ok(g)
}
