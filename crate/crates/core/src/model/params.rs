use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Aggregation, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Array, Real, Tape, Var};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    Fan(usize),
    Zeros,
    /// `ln(j+1)` for lane j.
    LogRamp,
    /// Inverse softplus of a uniform draw from [0.001, 0.1].
    DtBias,
}

/// Name, shape and initialiser of every parameter implied by a config, in
/// registration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let n = cfg.n_rx;
    let tw = cfg.token_width();
    let k = cfg.d_conv;
    let hw = cfg.h0 * cfg.w0;
    let c = cfg.c_dec;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, init: Init| v.push((name.to_string(), shape, init));

    add("embed.w1", vec![2 * n, 2 * n], Init::Fan(2 * n));
    add("embed.b1", vec![2 * n], Init::Zeros);
    add("embed.w2", vec![n, 2 * n], Init::Fan(2 * n));
    add("embed.b2", vec![n], Init::Zeros);
    ssm_layout(&mut add, "sample", n, cfg.d_state, k);
    if cfg.chirp_aggregation == Aggregation::Conv1d {
        add("aggregate.conv_w", vec![n, 3], Init::Fan(3));
        add("aggregate.conv_b", vec![n], Init::Zeros);
    }
    add("expand.w1", vec![2 * n, n], Init::Fan(n));
    add("expand.b1", vec![2 * n], Init::Zeros);
    add("expand.w2", vec![tw, 2 * n], Init::Fan(2 * n));
    add("expand.b2", vec![tw], Init::Zeros);
    ssm_layout(&mut add, "chirp", tw, cfg.chirp_d_state, k);
    add("decoder.conv1d_w", vec![hw, tw, 3], Init::Fan(3 * tw));
    add("decoder.conv1d_b", vec![hw], Init::Zeros);
    add("decoder.conv2d_1_w", vec![c, 1, 3, 3], Init::Fan(9));
    add("decoder.conv2d_1_b", vec![c], Init::Zeros);
    add("decoder.conv2d_2_w", vec![c, c, 3, 3], Init::Fan(9 * c));
    add("decoder.conv2d_2_b", vec![c], Init::Zeros);
    if cfg.heads.segmentation {
        add("head.seg_w", vec![1, c, 1, 1], Init::Fan(c));
        add("head.seg_b", vec![1], Init::Zeros);
    }
    if cfg.heads.detection {
        add("head.det_w", vec![3, c, 1, 1], Init::Fan(c));
        add("head.det_b", vec![3], Init::Zeros);
    }
    v
}

fn ssm_layout(add: &mut impl FnMut(&str, Vec<usize>, Init), prefix: &str, width: usize, d: usize, k: usize) {
    add(&format!("{prefix}.conv_w"), vec![width, k], Init::Fan(k));
    add(&format!("{prefix}.conv_b"), vec![width], Init::Zeros);
    add(&format!("{prefix}.w_p"), vec![3 * d, width], Init::Fan(width));
    add(&format!("{prefix}.dt_bias"), vec![d], Init::DtBias);
    add(&format!("{prefix}.a_log"), vec![d], Init::LogRamp);
    add(&format!("{prefix}.d"), vec![d, width], Init::Fan(d));
}

/// Expected `(name, shape)` list for a config.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Named trainable arrays; each is registered exactly once.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Seeded initialisation for `cfg` (draws happen in f64, so the f32 and
    /// f64 stores of one seed hold the same values up to rounding).
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = Self::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Fan(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::LogRamp => (0..n).map(|j| ((j + 1) as f64).ln()).collect(),
                Init::DtBias => (0..n)
                    .map(|_| {
                        let dt: f64 = rng.random_range(0.001..0.1);
                        dt.exp_m1().ln()
                    })
                    .collect(),
            };
            store
                .insert(&name, Array::from_f64(&shape, &data).expect("layout shape").with_grad())
                .expect("layout names are unique");
        }
        store
    }

    pub fn insert(&mut self, name: &str, array: Array<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("parameter '{name}' registered twice")));
        }
        self.index.insert(name.to_string(), self.arrays.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Array<T>> {
        self.arrays.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.index.get(name).map(|&i| &mut self.arrays[i])
    }

    /// Looks up a parameter the model requires.
    pub fn expect(&self, name: &str) -> &[T] {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from store"))
            .data()
    }

    /// Position of `name`, for hot loops that read by index.
    pub fn index_of(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from store"))
    }

    pub fn at(&self, i: usize) -> &[T] {
        self.arrays[i].data()
    }

    /// Total scalar count.
    pub fn element_count(&self) -> usize {
        self.arrays.iter().map(Array::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.arrays.iter_mut().for_each(Array::zero_grad);
    }

    /// Records every parameter on `tape` (trainable iff `trainable`).
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .arrays
            .iter()
            .map(|a| {
                if trainable {
                    tape.param(a.shape(), a.data())
                } else {
                    tape.constant(Array::new(a.shape().to_vec(), a.data().to_vec()).expect("valid"))
                }
            })
            .collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds `scale ×` the tape gradients of `vars` into the parameter grads.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &ParamVars, scale: T) {
        for (a, v) in self.arrays.iter_mut().zip(&vars.vars) {
            if let (Some(acc), Some(g)) = (a.grad_mut(), tape.grad(*v)) {
                acc.iter_mut().zip(g).for_each(|(d, &x)| *d += x * scale);
            }
        }
    }

    /// Verifies names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_shapes(cfg);
        if want.len() != self.len() {
            return Err(Error::config(format!(
                "expected {} parameters for this config, found {}",
                want.len(),
                self.len()
            )));
        }
        for (name, shape) in want {
            match self.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::Shape {
                        op: "checkpoint entry",
                        lhs: a.shape().to_vec(),
                        rhs: shape,
                    })
                }
                None => return Err(Error::config(format!("parameter '{name}' missing"))),
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(Array::cast).collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles of a registered [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not registered"))]
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}
