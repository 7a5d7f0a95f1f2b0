//! Parameter store, desk-scale architectures and LoRA adapters.

mod store;

pub use store::{GroupKind, LayerGroup, Param, ParamStore};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Batch, Graph, GraphBuilder, NodeId};
use crate::error::{argument, Result};
use crate::rng::{tag, CounterRng};
use crate::tensor::Tensor;

/// Standard deviation of the LoRA `A` initialisation.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

/// Everything needed to rebuild a model bit-for-bit.
///
/// `widths[0]` is the input dimension; for an MLP the remaining entries are
/// hidden widths, each produced by one hidden linear layer. The classifier
/// maps the last width to `num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub lora: Option<LoraSpec>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn logreg(d: usize, num_classes: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Logreg,
            widths: vec![d],
            activation: Activation::Tanh,
            lora: None,
            num_classes,
            init_seed,
        }
    }

    pub fn mlp(widths: &[usize], num_classes: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Mlp,
            widths: widths.to_vec(),
            activation: Activation::Tanh,
            lora: None,
            num_classes,
            init_seed,
        }
    }

    pub fn with_lora(mut self, rank: usize, alpha: f64) -> Self {
        self.lora = Some(LoraSpec { rank, alpha });
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.widths.first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(argument!("model widths must be nonempty and positive: {:?}", self.widths));
        }
        if self.architecture == Architecture::Logreg && self.widths.len() != 1 {
            return Err(argument!("logreg takes exactly one width (the input dimension)"));
        }
        if self.architecture == Architecture::Mlp && self.widths.len() < 2 {
            return Err(argument!("mlp needs an input width and at least one hidden width"));
        }
        if self.num_classes < 2 {
            return Err(argument!("num_classes must be at least 2"));
        }
        if let Some(l) = self.lora {
            if l.rank == 0 || !(l.alpha > 0.0) {
                return Err(argument!("lora rank and alpha must be positive"));
            }
            for (d_in, d_out) in self.adapted_layers() {
                if l.rank > d_in.min(d_out) {
                    return Err(argument!(
                        "lora rank {} exceeds min({}, {})",
                        l.rank,
                        d_in,
                        d_out
                    ));
                }
            }
        }
        Ok(())
    }

    /// Input width of every linear layer, in order: the activations a
    /// backward sweep has to keep per sample.
    pub fn layer_inputs(&self) -> Vec<usize> {
        self.widths.clone()
    }

    /// `(d_in, d_out)` of the matrices that receive LoRA adapters.
    fn adapted_layers(&self) -> Vec<(usize, usize)> {
        match self.architecture {
            Architecture::Logreg => vec![(self.widths[0], self.num_classes)],
            Architecture::Mlp => self.widths.windows(2).map(|w| (w[0], w[1])).collect(),
        }
    }
}

/// A built model: its loss program and the parameter layout it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    /// Mean cross-entropy over a batch.
    pub loss: Graph,
    /// Logits `B×C`.
    pub logits: Graph,
}

impl Model {
    pub fn predict(&self, params: &ParamStore, features: &Tensor) -> Result<Vec<usize>> {
        let batch = Batch {
            labels: vec![0; features.dims2()?.0],
            features: features.clone(),
        };
        let logits = logits_of(&self.logits, params, &batch)?;
        let (rows, cols) = logits.dims2()?;
        Ok((0..rows)
            .map(|i| {
                let row = &logits.data()[i * cols..(i + 1) * cols];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of correctly classified rows.
    pub fn accuracy(&self, params: &ParamStore, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(params, &batch.features)?;
        let hits = pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / batch.len() as f64)
    }
}

fn logits_of(graph: &Graph, params: &ParamStore, batch: &Batch) -> Result<Tensor> {
    crate::autodiff::evaluate(graph, params, batch)
}

fn uniform_tensor(rng: &mut CounterRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.uniform(-bound, bound);
    }
    t
}

fn normal_tensor(rng: &mut CounterRng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    for x in t.data_mut() {
        *x *= std;
    }
    t
}

struct Linear {
    weight: String,
    bias: String,
    d_in: usize,
    d_out: usize,
    lora: Option<Adapter>,
}

struct Adapter {
    a: String,
    b: String,
    rank: usize,
    scale: f64,
}

impl Adapter {
    fn new(index: usize, spec: LoraSpec) -> Self {
        Self {
            a: format!("lora{}.A", index),
            b: format!("lora{}.B", index),
            rank: spec.rank,
            scale: spec.alpha / spec.rank as f64,
        }
    }
}

fn emit_linear(g: &mut GraphBuilder, x: NodeId, l: &Linear) -> NodeId {
    let w = g.param(&l.weight, &[l.d_out, l.d_in]);
    let b = g.param(&l.bias, &[l.d_out]);
    let h = g.matmul_t(x, w);
    let mut y = g.add_bias(h, b);
    if let Some(ad) = &l.lora {
        let a = g.param(&ad.a, &[ad.rank, l.d_in]);
        let bb = g.param(&ad.b, &[l.d_out, ad.rank]);
        let xa = g.matmul_t(x, a);
        let xab = g.matmul_t(xa, bb);
        let scaled = g.scale(xab, ad.scale);
        y = g.add(y, scaled);
    }
    y
}

/// Builds the loss program and a deterministically initialised store.
///
/// Base weights and biases are `U(−1/√fan_in, 1/√fan_in)`; LoRA `A` is
/// `N(0, 0.02²)` and `B` is zero, so a fresh adapter is an exact identity.
/// With LoRA enabled every base tensor is frozen and the trainable groups are
/// the adapters plus the classifier head (its bias only for `logreg`, whose
/// single weight matrix is the adapted one).
pub fn build_model(spec: &ModelSpec) -> Result<(Model, ParamStore)> {
    spec.validate()?;
    let mut rng = CounterRng::from_parts(&[spec.init_seed, tag::INIT]);
    let mut store = ParamStore::new();
    let lora = spec.lora;
    let frozen_base = lora.is_some();

    let mut layers: Vec<Linear> = Vec::new();
    if spec.architecture == Architecture::Mlp {
        for (i, w) in spec.widths.windows(2).enumerate() {
            layers.push(Linear {
                weight: format!("layer{}.weight", i),
                bias: format!("layer{}.bias", i),
                d_in: w[0],
                d_out: w[1],
                lora: lora.map(|l| Adapter::new(i, l)),
            });
        }
    }
    let last = *spec.widths.last().expect("validated");
    let classifier = Linear {
        weight: "classifier.weight".into(),
        bias: "classifier.bias".into(),
        d_in: last,
        d_out: spec.num_classes,
        lora: match (spec.architecture, lora) {
            (Architecture::Logreg, Some(l)) => Some(Adapter::new(0, l)),
            _ => None,
        },
    };

    let mut groups: Vec<(String, GroupKind, Vec<String>)> = Vec::new();
    for (i, l) in layers.iter().chain(std::iter::once(&classifier)).enumerate() {
        let is_classifier = i == layers.len();
        let w = uniform_tensor(&mut rng, &[l.d_out, l.d_in], l.d_in);
        let b = uniform_tensor(&mut rng, &[l.d_out], l.d_in);
        let (w_trainable, b_trainable) = match (is_classifier, frozen_base, spec.architecture) {
            (_, false, _) => (true, true),
            (true, true, Architecture::Mlp) => (true, true),
            (true, true, Architecture::Logreg) => (false, true),
            (false, true, _) => (false, false),
        };
        store.insert(&l.weight, w, w_trainable)?;
        store.insert(&l.bias, b, b_trainable)?;
        if let Some(ad) = &l.lora {
            let a = normal_tensor(&mut rng, &[ad.rank, l.d_in], LORA_INIT_STD);
            store.insert(&ad.a, a, true)?;
            store.insert(&ad.b, Tensor::zeros(&[l.d_out, ad.rank]), true)?;
            let idx = if is_classifier { 0 } else { i };
            groups.push((format!("lora.{}", idx), GroupKind::Lora, vec![ad.a.clone(), ad.b.clone()]));
        }
        if is_classifier {
            let members = match (frozen_base, spec.architecture) {
                (true, Architecture::Logreg) => vec![l.bias.clone()],
                _ => vec![l.weight.clone(), l.bias.clone()],
            };
            groups.push(("classifier".into(), GroupKind::Classifier, members));
        } else if !frozen_base {
            groups.push((format!("layer.{}", i), GroupKind::Dense, vec![l.weight.clone(), l.bias.clone()]));
        }
    }
    for (name, kind, members) in groups {
        let refs: Vec<&str> = members.iter().map(String::as_str).collect();
        store.add_group(name, kind, &refs)?;
    }
    store.validate()?;

    let build = |with_loss: bool| -> Result<Graph> {
        let mut g = GraphBuilder::new();
        let mut h = g.input();
        for l in &layers {
            let z = emit_linear(&mut g, h, l);
            h = g.act(z, spec.activation);
        }
        let logits = emit_linear(&mut g, h, &classifier);
        let out = if with_loss { g.softmax_cross_entropy(logits) } else { logits };
        g.finish(out)
    };
    let loss = build(true);
    let logits = build(false);

    Ok((
        Model {
            spec: spec.clone(),
            loss: loss?,
            logits: logits?,
        },
        store,
    ))
}
