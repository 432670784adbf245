//! The unit scorer: token + segment + position embeddings concatenated with
//! a bidirectional-GRU encoding of each token's spine, projected into a
//! sliding-window self-attention encoder, scored at every unit's CLS slot.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossOutput;
use super::matrix::Matrix;
use super::params::{init_uniform, Grads, ParamStore};
use super::tape::{sigmoid, AttentionPattern, Tape, Var};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::segmenter::{Chapter, Unit};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
/// Label id of the empty spine carried by CLS and SEP.
pub const NO_SPINE: usize = 0;
pub const UNK_LABEL: usize = 1;

/// String ↔ id table; serialized as its item list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub tokens: Vocab,
    pub labels: Vocab,
}

impl Vocabularies {
    /// Lowercased tokens and spine labels seen in `chapters`, sorted, after
    /// the reserved entries.
    pub fn build<'a>(chapters: impl IntoIterator<Item = &'a Chapter>) -> Self {
        let mut tokens = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for chapter in chapters {
            for unit in &chapter.units {
                tokens.extend(unit.tokens.iter().map(|t| t.to_lowercase()));
                for spine in &unit.spines {
                    labels.extend(spine.labels.iter().cloned());
                }
            }
        }
        let token_items = ["<pad>", "<unk>", "[CLS]", "[SEP]"]
            .iter()
            .map(|s| s.to_string())
            .chain(tokens)
            .collect::<Vec<_>>();
        let label_items = ["<none>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .chain(labels)
            .collect::<Vec<_>>();
        Vocabularies {
            tokens: token_items.into(),
            labels: label_items.into(),
        }
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.id(&token.to_lowercase()).unwrap_or(UNK)
    }

    pub fn label_id(&self, label: &str) -> usize {
        self.labels.id(label).unwrap_or(UNK_LABEL)
    }

    pub fn unit_ids(&self, unit: &Unit) -> UnitIds {
        UnitIds {
            tokens: unit.tokens.iter().map(|t| self.token_id(t)).collect(),
            spines: unit
                .spines
                .iter()
                .map(|s| s.labels.iter().map(|l| self.label_id(l)).collect())
                .collect(),
        }
    }
}

/// One unit already mapped to ids.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitIds {
    pub tokens: Vec<usize>,
    pub spines: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequenceInput {
    pub token_ids: Vec<usize>,
    pub spine_ids: Vec<Vec<usize>>,
    pub segment_ids: Vec<usize>,
    pub cls_positions: Vec<usize>,
}

impl UnitSequenceInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_units(&self) -> usize {
        self.cls_positions.len()
    }
}

/// Lays units out as `[CLS] tokens [SEP]` blocks with alternating segments.
pub fn build_input_ids(units: &[UnitIds], max_position: usize) -> Result<UnitSequenceInput> {
    if units.is_empty() {
        return Err(Error::data("cannot build model input from zero units"));
    }
    let total: usize = units.iter().map(|u| u.tokens.len() + 2).sum();
    if total > max_position {
        return Err(Error::data(format!(
            "input of {total} positions exceeds max_position {max_position}; truncate the chapter first"
        )));
    }
    let mut input = UnitSequenceInput {
        token_ids: Vec::with_capacity(total),
        spine_ids: Vec::with_capacity(total),
        segment_ids: Vec::with_capacity(total),
        cls_positions: Vec::with_capacity(units.len()),
    };
    for (u, unit) in units.iter().enumerate() {
        if unit.tokens.len() != unit.spines.len() {
            return Err(Error::Shape(format!(
                "unit {u}: {} tokens but {} spines",
                unit.tokens.len(),
                unit.spines.len()
            )));
        }
        let segment = u % 2;
        input.cls_positions.push(input.token_ids.len());
        input.token_ids.push(CLS);
        input.spine_ids.push(vec![NO_SPINE]);
        for (tok, spine) in unit.tokens.iter().zip(&unit.spines) {
            input.token_ids.push(*tok);
            input.spine_ids.push(if spine.is_empty() { vec![NO_SPINE] } else { spine.clone() });
        }
        input.token_ids.push(SEP);
        input.spine_ids.push(vec![NO_SPINE]);
        input
            .segment_ids
            .extend(std::iter::repeat_n(segment, unit.tokens.len() + 2));
    }
    Ok(input)
}

pub fn build_input(units: &[Unit], vocab: &Vocabularies, max_position: usize) -> Result<UnitSequenceInput> {
    let ids: Vec<UnitIds> = units.iter().map(|u| vocab.unit_ids(u)).collect();
    build_input_ids(&ids, max_position)
}

/// Sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(len, dim, |pos, c| {
        let pair = (c / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Parameter names and shapes for a configuration and vocabulary sizes.
pub fn param_shapes(config: &ModelConfig, token_vocab: usize, label_vocab: usize) -> Vec<(String, (usize, usize))> {
    let e = config.token_emb_dim;
    let s = config.spine_label_emb_dim;
    let h = config.spine_gru_hidden;
    let d = config.model_dim;
    let f = config.ffn_dim;
    let mut shapes = vec![
        ("tok_emb".to_string(), (token_vocab, e)),
        ("seg_emb".to_string(), (2, e)),
    ];
    let mut input_dim = e;
    if config.use_spines {
        shapes.push(("spine_emb".to_string(), (label_vocab, s)));
        for dir in ["fwd", "bwd"] {
            shapes.push((format!("gru.{dir}.w"), (s, 3 * h)));
            shapes.push((format!("gru.{dir}.u_zr"), (h, 2 * h)));
            shapes.push((format!("gru.{dir}.u_n"), (h, h)));
            shapes.push((format!("gru.{dir}.b"), (1, 3 * h)));
        }
        input_dim += 2 * h;
    }
    shapes.push(("proj.w".to_string(), (input_dim, d)));
    shapes.push(("proj.b".to_string(), (1, d)));
    for l in 0..config.num_layers {
        for m in ["q", "k", "v", "o"] {
            shapes.push((format!("layer{l}.attn.{m}.w"), (d, d)));
            shapes.push((format!("layer{l}.attn.{m}.b"), (1, d)));
        }
        shapes.push((format!("layer{l}.ln1.g"), (1, d)));
        shapes.push((format!("layer{l}.ln1.b"), (1, d)));
        shapes.push((format!("layer{l}.ffn.w1"), (d, f)));
        shapes.push((format!("layer{l}.ffn.b1"), (1, f)));
        shapes.push((format!("layer{l}.ffn.w2"), (f, d)));
        shapes.push((format!("layer{l}.ffn.b2"), (1, d)));
        shapes.push((format!("layer{l}.ln2.g"), (1, d)));
        shapes.push((format!("layer{l}.ln2.b"), (1, d)));
    }
    shapes.push(("head.w".to_string(), (d, 1)));
    shapes.push(("head.b".to_string(), (1, 1)));
    shapes
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Scorer {
    /// Fresh parameters drawn from `config.seed`: weights uniform in
    /// `±1/sqrt(fan_in)`, biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, token_vocab: usize, label_vocab: usize) -> Result<Scorer> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, (rows, cols)) in param_shapes(&config, token_vocab, label_vocab) {
            let value = if name.ends_with(".g") {
                Matrix::filled(rows, cols, 1.0)
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Matrix::zeros(rows, cols)
            } else if name.ends_with("_emb") {
                init_uniform(&mut rng, rows, cols, cols)
            } else {
                init_uniform(&mut rng, rows, cols, rows)
            };
            params.insert(name, value);
        }
        Ok(Scorer { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Scorer> {
        config.validate()?;
        let scorer = Scorer { config, params };
        scorer.check_shapes()?;
        Ok(scorer)
    }

    pub fn token_vocab(&self) -> usize {
        self.params.get("tok_emb").map_or(0, Matrix::rows)
    }

    pub fn label_vocab(&self) -> usize {
        self.params.get("spine_emb").map_or(0, Matrix::rows)
    }

    /// Every expected tensor is present with the expected shape, and no
    /// extra tensors exist.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = param_shapes(&self.config, self.token_vocab(), self.label_vocab().max(2));
        for (name, shape) in &expected {
            let got = self.params.get(name)?.shape();
            if got != *shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` is {}x{}, expected {}x{}",
                    got.0, got.1, shape.0, shape.1
                )));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.iter().any(|(e, _)| e == n)) {
            return Err(Error::Shape(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    fn check_input(&self, input: &UnitSequenceInput) -> Result<()> {
        let n = input.len();
        if input.spine_ids.len() != n || input.segment_ids.len() != n {
            return Err(Error::Shape(format!(
                "input has {n} tokens, {} spines, {} segment ids",
                input.spine_ids.len(),
                input.segment_ids.len()
            )));
        }
        if input.cls_positions.is_empty() || input.cls_positions.iter().any(|&p| p >= n) {
            return Err(Error::Shape("CLS positions missing or out of range".into()));
        }
        if n > self.config.max_position {
            return Err(Error::data(format!(
                "input of {n} positions exceeds max_position {}",
                self.config.max_position
            )));
        }
        let tv = self.token_vocab();
        if let Some(t) = input.token_ids.iter().find(|&&t| t >= tv) {
            return Err(Error::data(format!("token id {t} outside vocabulary of {tv}")));
        }
        if input.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::data("segment ids must be 0 or 1"));
        }
        if self.config.use_spines {
            let lv = self.label_vocab();
            for spine in &input.spine_ids {
                if spine.is_empty() {
                    return Err(Error::data("empty spine; use the NO_SPINE sentinel"));
                }
                if let Some(l) = spine.iter().find(|&&l| l >= lv) {
                    return Err(Error::data(format!("unknown spine label id {l} (vocabulary of {lv})")));
                }
            }
        }
        Ok(())
    }

    /// Unit probabilities, one per CLS position.
    pub fn forward(&self, input: &UnitSequenceInput) -> Result<Vec<f64>> {
        Ok(self.logits(input)?.into_iter().map(sigmoid).collect())
    }

    pub fn logits(&self, input: &UnitSequenceInput) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut g = Graph::new(&self.params);
        let logits = self.build(&mut g, input)?;
        Ok(g.tape.value(logits).data().to_vec())
    }

    /// Runs the model, evaluates `loss` on the logits, and back-propagates
    /// the loss gradient to every parameter.
    pub fn loss_and_grads(
        &self,
        input: &UnitSequenceInput,
        loss: impl FnOnce(&[f64]) -> Result<LossOutput>,
    ) -> Result<(LossOutput, Grads)> {
        self.check_input(input)?;
        let mut g = Graph::new(&self.params);
        let logits = self.build(&mut g, input)?;
        let out = loss(g.tape.value(logits).data())?;
        if out.grad.len() != input.num_units() {
            return Err(Error::Shape(format!(
                "loss gradient has {} entries for {} units",
                out.grad.len(),
                input.num_units()
            )));
        }
        let seed = Matrix::from_vec(out.grad.len(), 1, out.grad.clone());
        let grads = g.gradients(logits, seed);
        Ok((out, grads))
    }

    /// Final forward and backward GRU states over one spine, concatenated.
    pub fn encode_spine(&self, spine: &[usize]) -> Result<Vec<f64>> {
        if !self.config.use_spines {
            return Err(Error::config("model.use_spines", "spine encoder is disabled"));
        }
        let lv = self.label_vocab();
        if spine.is_empty() {
            return Err(Error::data("empty spine; use the NO_SPINE sentinel"));
        }
        if let Some(l) = spine.iter().find(|&&l| l >= lv) {
            return Err(Error::data(format!("unknown spine label id {l} (vocabulary of {lv})")));
        }
        let mut g = Graph::new(&self.params);
        let enc = self.encode_spines(&mut g, &[spine.to_vec()])?;
        Ok(g.tape.value(enc).data().to_vec())
    }

    /// Encoder input after projection, `n × model_dim`.
    pub fn embed(&self, input: &UnitSequenceInput) -> Result<Matrix> {
        self.check_input(input)?;
        let mut g = Graph::new(&self.params);
        let x = self.embed_graph(&mut g, input)?;
        Ok(g.tape.value(x).clone())
    }

    /// One encoder layer applied to a hidden-state matrix with an explicit
    /// attention pattern.
    pub fn encoder_layer(&self, layer: usize, hidden: &Matrix, pattern: AttentionPattern) -> Result<Matrix> {
        if layer >= self.config.num_layers {
            return Err(Error::Shape(format!("no encoder layer {layer}")));
        }
        if hidden.cols() != self.config.model_dim || hidden.rows() != pattern.len() {
            return Err(Error::Shape(format!(
                "hidden is {}x{}, pattern covers {} positions, model_dim is {}",
                hidden.rows(),
                hidden.cols(),
                pattern.len(),
                self.config.model_dim
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.tape.constant(hidden.clone());
        let out = self.layer_graph(&mut g, layer, x, &Arc::new(pattern))?;
        Ok(g.tape.value(out).clone())
    }

    pub fn attention_pattern(&self, input: &UnitSequenceInput) -> AttentionPattern {
        let global: &[usize] = if self.config.global_cls { &input.cls_positions } else { &[] };
        AttentionPattern::sliding(input.len(), self.config.attention_window, global)
    }

    fn build(&self, g: &mut Graph, input: &UnitSequenceInput) -> Result<Var> {
        let mut h = self.embed_graph(g, input)?;
        let pattern = Arc::new(self.attention_pattern(input));
        for layer in 0..self.config.num_layers {
            h = self.layer_graph(g, layer, h, &pattern)?;
        }
        let cls = g.tape.gather_rows(h, input.cls_positions.clone());
        g.linear(cls, "head.w", "head.b")
    }

    fn embed_graph(&self, g: &mut Graph, input: &UnitSequenceInput) -> Result<Var> {
        let tok_table = g.param("tok_emb")?;
        let tok = g.tape.gather_rows(tok_table, input.token_ids.clone());
        let seg_table = g.param("seg_emb")?;
        let seg = g.tape.gather_rows(seg_table, input.segment_ids.clone());
        let mut x = g.tape.add(tok, seg);
        if self.config.use_positions {
            let pos = g
                .tape
                .constant(sinusoidal_positions(input.len(), self.config.token_emb_dim));
            x = g.tape.add(x, pos);
        }
        if self.config.use_spines {
            let mut unique: Vec<Vec<usize>> = Vec::new();
            let mut seen: HashMap<&[usize], usize> = HashMap::new();
            let mut per_token = Vec::with_capacity(input.len());
            for spine in &input.spine_ids {
                let idx = *seen.entry(spine.as_slice()).or_insert_with(|| {
                    unique.push(spine.clone());
                    unique.len() - 1
                });
                per_token.push(idx);
            }
            let enc = self.encode_spines(g, &unique)?;
            let spines = g.tape.gather_rows(enc, per_token);
            x = g.tape.concat_cols(&[x, spines]);
        }
        g.linear(x, "proj.w", "proj.b")
    }

    fn encode_spines(&self, g: &mut Graph, spines: &[Vec<usize>]) -> Result<Var> {
        let fwd = self.run_gru(g, "gru.fwd", spines, false)?;
        let bwd = self.run_gru(g, "gru.bwd", spines, true)?;
        Ok(g.tape.concat_cols(&[fwd, bwd]))
    }

    /// Batched GRU over right-padded spines. Padded steps leave the state
    /// untouched, so each row ends on its own last (or first) label.
    fn run_gru(&self, g: &mut Graph, prefix: &str, spines: &[Vec<usize>], reverse: bool) -> Result<Var> {
        let h_dim = self.config.spine_gru_hidden;
        let batch = spines.len();
        let steps = spines.iter().map(Vec::len).max().unwrap_or(0);
        let emb = g.param("spine_emb")?;
        let w = g.param(&format!("{prefix}.w"))?;
        let b = g.param(&format!("{prefix}.b"))?;
        let u_zr = g.param(&format!("{prefix}.u_zr"))?;
        let u_n = g.param(&format!("{prefix}.u_n"))?;
        let mut h = g.tape.constant(Matrix::zeros(batch, h_dim));
        for step in 0..steps {
            let pos = if reverse { steps - 1 - step } else { step };
            let ids: Vec<usize> = spines.iter().map(|s| s.get(pos).copied().unwrap_or(NO_SPINE)).collect();
            let active: Vec<bool> = spines.iter().map(|s| pos < s.len()).collect();
            let x = g.tape.gather_rows(emb, ids);
            let xw = g.tape.matmul(x, w);
            let xw = g.tape.add_bias(xw, b);
            let hu = g.tape.matmul(h, u_zr);
            let xw_zr = g.tape.slice_cols(xw, 0, 2 * h_dim);
            let pre_zr = g.tape.add(xw_zr, hu);
            let zr = g.tape.sigmoid(pre_zr);
            let z = g.tape.slice_cols(zr, 0, h_dim);
            let r = g.tape.slice_cols(zr, h_dim, 2 * h_dim);
            let rh = g.tape.mul(r, h);
            let rhu = g.tape.matmul(rh, u_n);
            let xw_n = g.tape.slice_cols(xw, 2 * h_dim, 3 * h_dim);
            let pre_n = g.tape.add(xw_n, rhu);
            let n = g.tape.tanh(pre_n);
            // h' = z ⊙ h + (1 − z) ⊙ n
            let h_minus_n = g.tape.sub(h, n);
            let keep = g.tape.mul(z, h_minus_n);
            let h_new = g.tape.add(n, keep);
            h = if active.iter().all(|&a| a) {
                h_new
            } else {
                let mask = g.tape.constant(Matrix::from_fn(batch, h_dim, |r, _| {
                    if active[r] {
                        1.0
                    } else {
                        0.0
                    }
                }));
                let delta = g.tape.sub(h_new, h);
                let masked = g.tape.mul(mask, delta);
                g.tape.add(h, masked)
            };
        }
        Ok(h)
    }

    fn layer_graph(&self, g: &mut Graph, layer: usize, x: Var, pattern: &Arc<AttentionPattern>) -> Result<Var> {
        let p = |s: &str| format!("layer{layer}.{s}");
        let q = g.linear(x, &p("attn.q.w"), &p("attn.q.b"))?;
        let k = g.linear(x, &p("attn.k.w"), &p("attn.k.b"))?;
        let v = g.linear(x, &p("attn.v.w"), &p("attn.v.b"))?;
        let att = g.tape.attention(q, k, v, self.config.num_heads, pattern.clone());
        let o = g.linear(att, &p("attn.o.w"), &p("attn.o.b"))?;
        let res1 = g.tape.add(x, o);
        let (g1, b1) = (g.param(&p("ln1.g"))?, g.param(&p("ln1.b"))?);
        let h1 = g.tape.layer_norm(res1, g1, b1);
        let f1 = g.linear(h1, &p("ffn.w1"), &p("ffn.b1"))?;
        let act = g.tape.gelu(f1);
        let f2 = g.linear(act, &p("ffn.w2"), &p("ffn.b2"))?;
        let res2 = g.tape.add(h1, f2);
        let (g2, b2) = (g.param(&p("ln2.g"))?, g.param(&p("ln2.b"))?);
        Ok(g.tape.layer_norm(res2, g2, b2))
    }
}

/// A tape plus the parameter leaves registered on it.
struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    vars: Vec<(String, Var)>,
}

impl<'p> Graph<'p> {
    fn new(store: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            vars: Vec::new(),
        }
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.vars.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.param(value);
        self.vars.push((name.to_string(), v));
        Ok(v)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (wv, bv) = (self.param(w)?, self.param(b)?);
        let xw = self.tape.matmul(x, wv);
        Ok(self.tape.add_bias(xw, bv))
    }

    fn gradients(self, output: Var, seed: Matrix) -> Grads {
        let mut grads = self.tape.backward(output, seed);
        let mut out = ParamStore::new();
        for (name, var) in self.vars {
            let value = self.store.get(&name).expect("registered from store");
            let g = grads
                .take(var)
                .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
            out.insert(name, g);
        }
        out
    }
}
