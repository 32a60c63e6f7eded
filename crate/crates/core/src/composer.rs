//! Cross-modal composition: inject text token embeddings into a query
//! image's feature map at one level.
//!
//! One block is a pre-norm cross-attention layer (visual positions attend to
//! projected text tokens) followed by a pre-norm position-wise feed-forward
//! layer, each wrapped in a residual connection. No positional terms are
//! added, so the block is invariant to token order.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Level, MultiLevelFeatures, TokenEmbeddings};
use crate::params::{BoundParams, Init, ParamId, ParamStore};

/// Hidden width of the feed-forward layer relative to the level width.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalBlock {
    level: Level,
    dim: usize,
    text_dim: usize,
    text_proj_w: ParamId,
    text_proj_b: ParamId,
    w_q: ParamId,
    b_q: ParamId,
    w_k: ParamId,
    b_k: ParamId,
    w_v: ParamId,
    b_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    norm1_gamma: ParamId,
    norm1_beta: ParamId,
    norm2_gamma: ParamId,
    norm2_beta: ParamId,
}

/// `(suffix, shape, init)` for every tensor of a block.
fn layout(dim: usize, text_dim: usize, std: f64) -> Vec<(&'static str, Vec<usize>, Init)> {
    let normal = Init::Normal { std };
    let hidden = FFN_MULT * dim;
    vec![
        ("text_proj.weight", vec![text_dim, dim], normal),
        ("text_proj.bias", vec![dim], Init::Zeros),
        ("attn.q.weight", vec![dim, dim], normal),
        ("attn.q.bias", vec![dim], Init::Zeros),
        ("attn.k.weight", vec![dim, dim], normal),
        ("attn.k.bias", vec![dim], Init::Zeros),
        ("attn.v.weight", vec![dim, dim], normal),
        ("attn.v.bias", vec![dim], Init::Zeros),
        ("attn.out.weight", vec![dim, dim], normal),
        ("attn.out.bias", vec![dim], Init::Zeros),
        ("ffn.fc1.weight", vec![dim, hidden], normal),
        ("ffn.fc1.bias", vec![hidden], Init::Zeros),
        ("ffn.fc2.weight", vec![hidden, dim], normal),
        ("ffn.fc2.bias", vec![dim], Init::Zeros),
        ("norm1.gamma", vec![dim], Init::Ones),
        ("norm1.beta", vec![dim], Init::Zeros),
        ("norm2.gamma", vec![dim], Init::Ones),
        ("norm2.beta", vec![dim], Init::Zeros),
    ]
}

pub fn param_prefix(level: Level) -> String {
    format!("composer.{level}.")
}

impl CrossModalBlock {
    /// Allocate and initialize a block's parameters in `store`.
    pub fn init(
        level: Level,
        dim: usize,
        text_dim: usize,
        init_std: f64,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 || text_dim == 0 {
            return Err(Error::config("block widths must be positive"));
        }
        let prefix = param_prefix(level);
        for (suffix, shape, init) in layout(dim, text_dim, init_std) {
            store.insert(format!("{prefix}{suffix}"), init.tensor(shape, rng))?;
        }
        Self::attach(level, dim, text_dim, store)
    }

    /// Resolve a block whose tensors already live in `store`, checking shapes.
    pub fn attach(level: Level, dim: usize, text_dim: usize, store: &ParamStore) -> Result<Self> {
        let prefix = param_prefix(level);
        let mut ids = Vec::new();
        for (suffix, shape, _) in layout(dim, text_dim, 0.0) {
            let name = format!("{prefix}{suffix}");
            let id = store
                .id(&name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            ids.push(id);
        }
        Ok(Self {
            level,
            dim,
            text_dim,
            text_proj_w: ids[0],
            text_proj_b: ids[1],
            w_q: ids[2],
            b_q: ids[3],
            w_k: ids[4],
            b_k: ids[5],
            w_v: ids[6],
            b_v: ids[7],
            w_o: ids[8],
            b_o: ids[9],
            ffn_w1: ids[10],
            ffn_b1: ids[11],
            ffn_w2: ids[12],
            ffn_b2: ids[13],
            norm1_gamma: ids[14],
            norm1_beta: ids[15],
            norm2_gamma: ids[16],
            norm2_beta: ids[17],
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    /// Parameters that carry text into the visual stream.
    pub fn text_path_params(&self) -> [ParamId; 4] {
        [self.text_proj_w, self.text_proj_b, self.w_o, self.b_o]
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// Block forward on tape values: `x` is `(h·w)×d`, `z` is `n×d_T`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, z: Var) -> Result<Var> {
        let (_, d) = tape.value(x).matrix_dims()?;
        if d != self.dim {
            return Err(Error::dim(format!(
                "level {} block expects width {}, got {d}",
                self.level, self.dim
            )));
        }
        let (n, dt) = tape.value(z).matrix_dims()?;
        if dt != self.text_dim {
            return Err(Error::dim(format!(
                "text width {dt} does not match projection input {}",
                self.text_dim
            )));
        }
        if n == 0 {
            return Err(Error::dim("no text tokens"));
        }

        let tokens = Self::linear(tape, z, p[self.text_proj_w], p[self.text_proj_b])?;

        let h = tape.layer_norm(x, p[self.norm1_gamma], p[self.norm1_beta])?;
        let q = Self::linear(tape, h, p[self.w_q], p[self.b_q])?;
        let k = Self::linear(tape, tokens, p[self.w_k], p[self.b_k])?;
        let v = Self::linear(tape, tokens, p[self.w_v], p[self.b_v])?;
        let attended = tape.scaled_dot_attention(q, k, v)?;
        let attn_out = Self::linear(tape, attended, p[self.w_o], p[self.b_o])?;
        let x = tape.add(x, attn_out)?;

        let h = tape.layer_norm(x, p[self.norm2_gamma], p[self.norm2_beta])?;
        let hidden = Self::linear(tape, h, p[self.ffn_w1], p[self.ffn_b1])?;
        let hidden = tape.gelu(hidden);
        let ffn_out = Self::linear(tape, hidden, p[self.ffn_w2], p[self.ffn_b2])?;
        tape.add(x, ffn_out)
    }

    /// Compose one level without recording gradients.
    pub fn compose(
        &self,
        store: &ParamStore,
        x_q: &FeatureMap,
        z: &TokenEmbeddings,
    ) -> Result<FeatureMap> {
        if x_q.level() != self.level {
            return Err(Error::config(format!(
                "block for level {} applied to a level {} map",
                self.level,
                x_q.level()
            )));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(x_q.positions());
        let z = tape.constant(z.tensor().clone());
        let out = self.forward(&mut tape, &p, x, z)?;
        FeatureMap::new(self.level, x_q.dims(), tape.value(out).data().to_vec())
    }
}

/// Compose every level of a query image with its text.
pub fn compose_all(
    store: &ParamStore,
    blocks: &[CrossModalBlock],
    x: &MultiLevelFeatures,
    z: &TokenEmbeddings,
) -> Result<MultiLevelFeatures> {
    let block_for = |level: Level| -> Result<&CrossModalBlock> {
        let mut found = blocks.iter().filter(|b| b.level() == level);
        match (found.next(), found.next()) {
            (Some(b), None) => Ok(b),
            (None, _) => Err(Error::config(format!("no composer block for level {level}"))),
            (Some(_), Some(_)) => Err(Error::config(format!(
                "more than one composer block for level {level}"
            ))),
        }
    };
    let maps = Level::ALL
        .iter()
        .map(|&l| block_for(l)?.compose(store, x.get(l), z))
        .collect::<Result<Vec<_>>>()?;
    let [l, m, h]: [FeatureMap; 3] = maps.try_into().expect("three levels");
    MultiLevelFeatures::new(l, m, h)
}
