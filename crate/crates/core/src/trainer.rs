//! Likelihood training of the adapter and flow in N, P and N+P modes.
//!
//! The minimized objective is
//!
//! ```text
//! L = 1/(2·N_o) Σ_n (‖u_n‖² − 2·logdet_n)/C  −  1/(2·N_p) Σ_m (‖u'_m‖² − 2·logdet_m)/C
//! ```
//!
//! which raises the likelihood of naturals and lowers that of proxies. The
//! `(C/2)·ln(2π)` constant of the log-density is left out: it has no gradient.
//! Setting `paper_eq7_signs` negates both terms for comparison runs.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterParams};
use crate::feature_store::{self, DatasetManifest, FeatureMatrix, Label, Role, StoreError};
use crate::flow::{BlockGrad, FlowConfig, FlowError, FlowParams};
use crate::model::{FeatureAdapter, Model, ModelMeta, TrainingMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mode {mode} requires {what} features, but none were supplied")]
    MissingClass { mode: TrainingMode, what: &'static str },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("parameter/gradient shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Sign convention and term selection of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub mode: TrainingMode,
    pub paper_eq7_signs: bool,
}

impl Objective {
    pub fn new(mode: TrainingMode) -> Self {
        Self {
            mode,
            paper_eq7_signs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Reduced dimension C. Ignored (taken from the data) without an adapter.
    pub dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
    /// `false` feeds raw features straight into the flow.
    pub use_adapter: bool,
    pub freeze_adapter: bool,
    pub paper_eq7_signs: bool,
    /// Standard deviation of Gaussian noise added to adapted features; 0 disables.
    pub dequant_sigma: f64,
}

impl TrainConfig {
    /// Defaults for `mode`: lr 1e-4, batch 128, C = 128, 30 epochs (10 for N+P).
    pub fn new(mode: TrainingMode) -> Self {
        Self {
            mode,
            adam: AdamConfig::default(),
            batch_size: 128,
            epochs: match mode {
                TrainingMode::NaturalProxy => 10,
                TrainingMode::Natural | TrainingMode::Proxy => 30,
            },
            seed: 0,
            dim: 128,
            blocks: crate::flow::DEFAULT_BLOCKS,
            hidden: crate::flow::DEFAULT_HIDDEN,
            clamp: crate::flow::DEFAULT_CLAMP,
            use_adapter: true,
            freeze_adapter: false,
            paper_eq7_signs: false,
            dequant_sigma: 0.0,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            mode: self.mode,
            paper_eq7_signs: self.paper_eq7_signs,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.dequant_sigma >= 0.0 && self.dequant_sigma.is_finite()) {
            return Err(TrainError::Config("dequantization sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Absent when the model has no adapter or the adapter is frozen.
    pub adapter: Option<Array2<f64>>,
    pub blocks: Vec<BlockGrad>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(a) = &self.adapter {
            out.push(a.as_slice().expect("standard layout"));
        }
        for b in &self.blocks {
            out.push(b.w1.as_slice().expect("standard layout"));
            out.push(b.b1.as_slice().expect("standard layout"));
            out.push(b.w2.as_slice().expect("standard layout"));
            out.push(b.b2.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn all_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Mutable views of the trainable tensors, in the same order as
/// [`Gradients::tensors`].
pub fn trainable_tensors(model: &mut Model, include_adapter: bool) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    if include_adapter {
        if let FeatureAdapter::Reduce(p) = &mut model.adapter {
            out.push(p.weight.as_slice_mut().expect("standard layout"));
        }
    }
    for b in &mut model.flow.blocks {
        out.push(b.w1.as_slice_mut().expect("standard layout"));
        out.push(b.b1.as_slice_mut().expect("standard layout"));
        out.push(b.w2.as_slice_mut().expect("standard layout"));
        out.push(b.b2.as_slice_mut().expect("standard layout"));
    }
    out
}

fn check_batches(
    objective: Objective,
    natural: ArrayView2<f64>,
    proxy: ArrayView2<f64>,
) -> Result<(), TrainError> {
    if objective.mode.uses_natural() && natural.nrows() == 0 {
        return Err(TrainError::MissingClass {
            mode: objective.mode,
            what: "natural",
        });
    }
    if objective.mode.uses_proxy() && proxy.nrows() == 0 {
        return Err(TrainError::MissingClass {
            mode: objective.mode,
            what: "proxy",
        });
    }
    Ok(())
}

/// Per-sample weights `w` such that `L = Σ w · (‖u‖² − 2·logdet)`.
fn term_weights(objective: Objective, n_nat: usize, n_proxy: usize, dim: usize) -> (f64, f64) {
    let c = dim as f64;
    let sign = if objective.paper_eq7_signs { -1.0 } else { 1.0 };
    let wn = if objective.mode.uses_natural() {
        sign / (2.0 * n_nat as f64 * c)
    } else {
        0.0
    };
    let wp = if objective.mode.uses_proxy() {
        -sign / (2.0 * n_proxy as f64 * c)
    } else {
        0.0
    };
    (wn, wp)
}

fn weighted_sum(u: &Array2<f64>, logdet: &Array1<f64>, w: f64) -> f64 {
    u.axis_iter(Axis(0))
        .zip(logdet.iter())
        .map(|(row, ld)| w * (row.dot(&row) - 2.0 * ld))
        .sum()
}

/// Loss on already-adapted batches. Rows of an unused class are ignored.
pub fn loss_adapted(
    natural: ArrayView2<f64>,
    proxy: ArrayView2<f64>,
    flow: &FlowParams,
    objective: Objective,
) -> Result<f64, TrainError> {
    check_batches(objective, natural, proxy)?;
    let (wn, wp) = term_weights(objective, natural.nrows(), proxy.nrows(), flow.dim);
    let mut total = 0.0;
    if objective.mode.uses_natural() {
        let (u, ld) = flow.forward_batch(natural)?;
        total += weighted_sum(&u, &ld, wn);
    }
    if objective.mode.uses_proxy() {
        let (u, ld) = flow.forward_batch(proxy)?;
        total += weighted_sum(&u, &ld, wp);
    }
    Ok(total)
}

/// Loss on raw batches, adapting them through the model's adapter first.
pub fn loss(
    natural: ArrayView2<f64>,
    proxy: ArrayView2<f64>,
    model: &Model,
    objective: Objective,
) -> Result<f64, TrainError> {
    check_batches(objective, natural, proxy)?;
    let zn = adapt_or_empty(model, natural, objective.mode.uses_natural())?;
    let zp = adapt_or_empty(model, proxy, objective.mode.uses_proxy())?;
    loss_adapted(zn.view(), zp.view(), &model.flow, objective)
}

fn adapt_or_empty(model: &Model, raw: ArrayView2<f64>, used: bool) -> Result<Array2<f64>, TrainError> {
    if used {
        Ok(model.adapter.adapt_batch(raw)?)
    } else {
        Ok(Array2::zeros((0, model.dim())))
    }
}

struct TermGrad {
    loss: f64,
    adapter: Option<Array2<f64>>,
    blocks: Vec<BlockGrad>,
}

fn term_gradient(
    model: &Model,
    raw: ArrayView2<f64>,
    weight: f64,
    noise: Option<&Array2<f64>>,
    adapter_grad: bool,
) -> Result<TermGrad, TrainError> {
    let (mut z, adapted) = match &model.adapter {
        FeatureAdapter::Reduce(p) => {
            let a = p.adapt_batch(raw)?;
            (a.z.clone(), Some((p, a)))
        }
        FeatureAdapter::Passthrough { .. } => (model.adapter.adapt_batch(raw)?, None),
    };
    if let Some(n) = noise {
        z += n;
    }
    let (u, ld, cache) = model.flow.forward_with_cache(z.view())?;
    let loss = weighted_sum(&u, &ld, weight);
    let grad_u = &u * (2.0 * weight);
    let grad_ld = Array1::from_elem(ld.len(), -2.0 * weight);
    let (grad_z, blocks) = model.flow.backward(&cache, grad_u.view(), grad_ld.view());
    let adapter = match adapted {
        Some((p, a)) if adapter_grad => Some(p.backward(raw, &a, grad_z.view())),
        _ => None,
    };
    Ok(TermGrad {
        loss,
        adapter,
        blocks,
    })
}

/// Loss and exact gradients. `freeze_adapter` drops the adapter block.
pub fn gradients(
    natural: ArrayView2<f64>,
    proxy: ArrayView2<f64>,
    model: &Model,
    objective: Objective,
    freeze_adapter: bool,
) -> Result<(f64, Gradients), TrainError> {
    gradients_with_noise(natural, proxy, model, objective, freeze_adapter, None)
}

fn gradients_with_noise(
    natural: ArrayView2<f64>,
    proxy: ArrayView2<f64>,
    model: &Model,
    objective: Objective,
    freeze_adapter: bool,
    noise: Option<(&Array2<f64>, &Array2<f64>)>,
) -> Result<(f64, Gradients), TrainError> {
    check_batches(objective, natural, proxy)?;
    let (wn, wp) = term_weights(objective, natural.nrows(), proxy.nrows(), model.dim());
    let adapter_grad = !freeze_adapter && model.adapter.params().is_some();
    let mut terms = Vec::with_capacity(2);
    if objective.mode.uses_natural() {
        terms.push(term_gradient(model, natural, wn, noise.map(|n| n.0), adapter_grad)?);
    }
    if objective.mode.uses_proxy() {
        terms.push(term_gradient(model, proxy, wp, noise.map(|n| n.1), adapter_grad)?);
    }
    let mut iter = terms.into_iter();
    let first = iter.next().expect("every mode uses at least one term");
    let mut total = first.loss;
    let mut adapter = first.adapter;
    let mut blocks = first.blocks;
    for t in iter {
        total += t.loss;
        if let (Some(a), Some(b)) = (adapter.as_mut(), t.adapter) {
            *a += &b;
        }
        for (acc, g) in blocks.iter_mut().zip(t.blocks) {
            acc.w1 += &g.w1;
            acc.b1 += &g.b1;
            acc.w2 += &g.w2;
            acc.b2 += &g.b2;
        }
    }
    Ok((total, Gradients { adapter, blocks }))
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_shapes(lens: &[usize]) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(TrainError::Shape(format!("tensor {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Training features as `f64` rows. Either side may be empty.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub natural: Array2<f64>,
    pub proxy: Array2<f64>,
}

impl TrainingData {
    pub fn new(natural: Array2<f64>, proxy: Array2<f64>) -> Self {
        Self { natural, proxy }
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self, TrainError> {
        let nat = feature_store::load_stacked(
            manifest
                .with_role(Role::Train)
                .filter(|e| e.label == Label::Natural),
        )?;
        let prox = feature_store::load_stacked(
            manifest
                .with_role(Role::Train)
                .filter(|e| e.label == Label::Generated),
        )?;
        let dim = nat.as_ref().or(prox.as_ref()).map(|m| m.dim()).unwrap_or(0);
        if let (Some(a), Some(b)) = (&nat, &prox) {
            if a.dim() != b.dim() {
                return Err(TrainError::Config(format!(
                    "natural features have dimension {}, proxies {}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(Self {
            natural: nat.map(|m| to_array(&m)).unwrap_or_else(|| Array2::zeros((0, dim))),
            proxy: prox.map(|m| to_array(&m)).unwrap_or_else(|| Array2::zeros((0, dim))),
        })
    }

    fn dim(&self) -> usize {
        self.natural.ncols().max(self.proxy.ncols())
    }
}

pub fn to_array(m: &FeatureMatrix) -> Array2<f64> {
    Array2::from_shape_vec(
        (m.rows(), m.dim()),
        m.as_slice().iter().map(|&v| v as f64).collect(),
    )
    .expect("shape checked by FeatureMatrix")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLoss>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the untrained model for `config` and input dimension `in_dim`.
pub fn init_model(config: &TrainConfig, in_dim: usize) -> Result<Model, TrainError> {
    let (adapter, dim) = if config.use_adapter {
        let mut rng = stream_rng(config.seed, 0);
        let p = AdapterParams::init_with_rng(in_dim, config.dim, &mut rng)?;
        (FeatureAdapter::Reduce(p), config.dim)
    } else {
        (FeatureAdapter::Passthrough { dim: in_dim }, in_dim)
    };
    let flow_cfg = FlowConfig {
        dim,
        blocks: config.blocks,
        hidden: config.hidden,
        clamp: config.clamp,
    };
    let flow = FlowParams::init_with_rng(&flow_cfg, &mut stream_rng(config.seed, 1))?;
    Model::new(
        adapter,
        flow,
        ModelMeta {
            mode: config.mode,
            seed: config.seed,
            adapter_frozen: config.freeze_adapter,
            threshold: None,
        },
    )
    .map_err(|e| TrainError::Config(e.to_string()))
}

fn gather(data: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    data.select(Axis(0), idx)
}

/// Runs `config.epochs` epochs of Adam over seeded shuffles of `data`.
///
/// In N+P mode each step pairs a natural batch with an equally sized proxy
/// batch. When both sets have the same length, row `i` of the proxies is taken
/// to be the proxy of natural `i` and both batches use the same indices.
pub fn train(data: &TrainingData, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let objective = config.objective();
    let n_nat = if config.mode.uses_natural() { data.natural.nrows() } else { 0 };
    let n_proxy = if config.mode.uses_proxy() { data.proxy.nrows() } else { 0 };
    check_batches(
        objective,
        data.natural.slice(ndarray::s![..n_nat, ..]),
        data.proxy.slice(ndarray::s![..n_proxy, ..]),
    )?;
    let mut model = init_model(config, data.dim())?;
    let adapter_trainable = !config.freeze_adapter && model.adapter.params().is_some();
    let lens: Vec<usize> = trainable_tensors(&mut model, adapter_trainable)
        .iter()
        .map(|t| t.len())
        .collect();
    let mut state = OptimizerState::for_shapes(&lens);
    let mut shuffle_rng = stream_rng(config.seed, 2);
    let mut noise_rng = stream_rng(config.seed, 3);
    let noise_dist = (config.dequant_sigma > 0.0)
        .then(|| Normal::new(0.0, config.dequant_sigma).expect("sigma validated"));
    let paired = config.mode == TrainingMode::NaturalProxy && n_nat == n_proxy;
    let steps_over = n_nat.max(n_proxy);
    let b = config.batch_size;
    let mut history = Vec::with_capacity(config.epochs);
    let empty = Array2::<f64>::zeros((0, data.dim()));

    for epoch in 0..config.epochs {
        let mut nat_order: Vec<usize> = (0..n_nat).collect();
        let mut proxy_order: Vec<usize> = (0..n_proxy).collect();
        nat_order.shuffle(&mut shuffle_rng);
        if paired {
            proxy_order.clone_from(&nat_order);
        } else {
            proxy_order.shuffle(&mut shuffle_rng);
        }
        let steps = steps_over.div_ceil(b);
        let mut sum = 0.0;
        for step in 0..steps {
            let len = b.min(steps_over - step * b);
            let pick = |order: &[usize]| -> Vec<usize> {
                (0..len).map(|j| order[(step * b + j) % order.len()]).collect()
            };
            let nat = if n_nat > 0 { gather(&data.natural, &pick(&nat_order)) } else { empty.clone() };
            let prox = if n_proxy > 0 { gather(&data.proxy, &pick(&proxy_order)) } else { empty.clone() };
            let noise = noise_dist.map(|d| {
                let c = model.dim();
                let mut draw = |rows| Array2::from_shape_simple_fn((rows, c), || d.sample(&mut noise_rng));
                (draw(nat.nrows()), draw(prox.nrows()))
            });
            let (loss, grads) = gradients_with_noise(
                nat.view(),
                prox.view(),
                &model,
                objective,
                config.freeze_adapter,
                noise.as_ref().map(|(a, b)| (a, b)),
            )?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: step });
            }
            sum += loss;
            let g = grads.tensors();
            let mut p = trainable_tensors(&mut model, adapter_trainable);
            adam_step(&mut p, &g, &mut state, &config.adam)?;
        }
        history.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: sum / steps as f64,
        });
    }
    model.flow.validate()?;
    Ok(TrainOutcome { model, history })
}

pub fn write_loss_csv(history: &[EpochLoss], path: &Path) -> Result<(), TrainError> {
    let mut s = String::from("epoch,mean_loss\n");
    for e in history {
        s.push_str(&format!("{},{:e}\n", e.epoch, e.mean_loss));
    }
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(s.as_bytes()).map_err(io)
}
