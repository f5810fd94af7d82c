use alnk_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{JumpingKnowledge, LinkDecoder, RankerConfig, RankerError};
use crate::checkpoint::{CheckpointError, Container};

/// Edge-kind rows in the per-layer kind embedding: the four graph kinds
/// plus the self loop.
pub(crate) const KIND_ROWS: usize = 5;
pub(crate) const SELF_KIND: usize = 4;

#[derive(Clone, Copy, Debug)]
enum Init {
    Glorot,
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct LayerSlots {
    pub ws: usize,
    pub wt: usize,
    pub att: usize,
    pub kind_emb: usize,
    pub kind_proj: usize,
    pub bias: usize,
    pub gn_alpha: usize,
    pub gn_gamma: usize,
    pub gn_beta: usize,
    pub prelu: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub width_in: usize,
}

impl LayerSlots {
    pub fn width_out(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum LinkSlots {
    Bilinear { b: usize },
    Dot,
    Cosine { scale: usize },
    ConcatMlp(Mlp),
    Ncn(Mlp),
}

/// Parameter positions for a config. Derived deterministically, so a
/// checkpoint only needs to store the config and the named tensors.
#[derive(Clone, Debug)]
pub struct Layout {
    pub(crate) layers: Vec<LayerSlots>,
    /// JK projection (or the bare input projection with zero layers).
    pub(crate) proj: Option<(usize, usize)>,
    pub(crate) link: LinkSlots,
    pub(crate) attr: Mlp,
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    pub fn new(cfg: &RankerConfig) -> Self {
        let e = &cfg.encoder;
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        fn push(specs: &mut Vec<(String, Vec<usize>, Init)>, name: String, shape: Vec<usize>, init: Init) -> usize {
            specs.push((name, shape, init));
            specs.len() - 1
        }
        let mut add = |name: String, shape: Vec<usize>, init: Init| push(&mut specs, name, shape, init);
        let mut layers = Vec::with_capacity(e.layers);
        let mut width = e.input_dim;
        for l in 0..e.layers {
            let last = l + 1 == e.layers;
            let heads = if last { 1 } else { e.heads };
            let out = heads * e.hidden;
            let p = |s: &str| format!("enc.{l}.{s}");
            layers.push(LayerSlots {
                ws: add(p("ws"), vec![width, out], Init::Glorot),
                wt: add(p("wt"), vec![width, out], Init::Glorot),
                att: add(p("att"), vec![1, out], Init::Glorot),
                kind_emb: add(p("kind_emb"), vec![KIND_ROWS, e.edge_kind_embed_dim], Init::Glorot),
                kind_proj: add(p("kind_proj"), vec![e.edge_kind_embed_dim, out], Init::Glorot),
                bias: add(p("bias"), vec![1, out], Init::Zeros),
                gn_alpha: add(p("gn_alpha"), vec![1, out], Init::Ones),
                gn_gamma: add(p("gn_gamma"), vec![1, out], Init::Ones),
                gn_beta: add(p("gn_beta"), vec![1, out], Init::Zeros),
                prelu: add(p("prelu"), vec![1, 1], Init::Const(0.25)),
                heads,
                head_dim: e.hidden,
                width_in: width,
            });
            width = out;
        }
        let proj = match (e.layers, e.jumping_knowledge) {
            (0, _) => Some((
                add("enc.input.w".into(), vec![e.input_dim, e.hidden], Init::Glorot),
                add("enc.input.b".into(), vec![1, e.hidden], Init::Zeros),
            )),
            (_, JumpingKnowledge::ConcatProject) => {
                let cat: usize = layers.iter().map(LayerSlots::width_out).sum();
                Some((
                    add("enc.jk.w".into(), vec![cat, e.hidden], Init::Glorot),
                    add("enc.jk.b".into(), vec![1, e.hidden], Init::Zeros),
                ))
            }
            (_, JumpingKnowledge::Last) => None,
        };
        let h = e.hidden;
        let mlp = |specs: &mut Vec<_>, prefix: &str, input: usize| Mlp {
            w1: push(specs, format!("{prefix}.w1"), vec![input, h], Init::Glorot),
            b1: push(specs, format!("{prefix}.b1"), vec![1, h], Init::Zeros),
            w2: push(specs, format!("{prefix}.w2"), vec![h, 1], Init::Glorot),
            b2: push(specs, format!("{prefix}.b2"), vec![1, 1], Init::Zeros),
        };
        let link = match cfg.train.link_decoder {
            LinkDecoder::Bilinear => LinkSlots::Bilinear { b: push(&mut specs, "link.b".into(), vec![h, h], Init::Glorot) },
            LinkDecoder::Dot => LinkSlots::Dot,
            LinkDecoder::Cosine => {
                LinkSlots::Cosine { scale: push(&mut specs, "link.scale".into(), vec![1, 1], Init::Const(5.0)) }
            }
            LinkDecoder::ConcatMlp => LinkSlots::ConcatMlp(mlp(&mut specs, "link.mlp", 2 * h)),
            LinkDecoder::Ncn => LinkSlots::Ncn(mlp(&mut specs, "link.mlp", 3 * h)),
        };
        let attr = mlp(&mut specs, "attr.mlp", 3 * h + 1);
        Self { layers, proj, link, attr, specs }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.0.as_str())
    }
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankerParams {
    pub config: RankerConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: RankerConfig,
}

impl RankerParams {
    /// Glorot-uniform weights, zero biases, unit GraphNorm scales.
    pub fn init(cfg: &RankerConfig, seed: u64) -> Self {
        let layout = Layout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape, init) in &layout.specs {
            let t = match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Const(c) => Tensor::full(shape, c),
                Init::Glorot => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
                    Tensor::new(shape.clone(), data).expect("shape matches")
                }
            };
            names.push(name.clone());
            tensors.push(t);
        }
        Self { config: cfg.clone(), names, tensors }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_container(&self) -> Container {
        let header = Header { kind: "ranker".into(), config: self.config.clone() };
        let mut c = Container::new(serde_json::to_vec(&header).expect("config serialises"));
        for (n, t) in self.names.iter().zip(&self.tensors) {
            c.push(n.clone(), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, RankerError> {
        let h: Header = serde_json::from_slice(&c.config).map_err(CheckpointError::from)?;
        if h.kind != "ranker" {
            return Err(CheckpointError::Corrupt(format!("expected a ranker checkpoint, found {:?}", h.kind)).into());
        }
        h.config.validate()?;
        let layout = Layout::new(&h.config);
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape, _) in &layout.specs {
            tensors.push(c.expect(name, shape)?.clone());
            names.push(name.clone());
        }
        if c.tensors.len() != names.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} tensors stored, config implies {}",
                c.tensors.len(),
                names.len()
            ))
            .into());
        }
        let p = Self { config: h.config, names, tensors };
        if !p.is_finite() {
            return Err(CheckpointError::Corrupt("non-finite parameter".into()).into());
        }
        Ok(p)
    }
}
