//! Parameter storage and the transformer building blocks shared by both
//! model modes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeral::Token;
use crate::numerics::{Tape, Tensor, Var};

use super::config::{AttentionKind, InputEncoding, ModelConfig, ModelMode};
use super::ModelError;

#[derive(Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Uniform(f64),
    Zeros,
    Ones,
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.dim;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| v.push((name, shape, init));
    let mat = |a: usize, b: usize| Init::Xavier { fan_in: a, fan_out: b };

    match c.input_encoding() {
        InputEncoding::Binary => push("embed.bits".into(), vec![c.width as usize + 1, d], Init::Uniform(1.0)),
        InputEncoding::OneHot => push("embed.table".into(), vec![(1 << c.width) + 1, d], Init::Uniform(1.0)),
        InputEncoding::RawBits => {}
    }

    let attention = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        if c.toggles.shared_projection {
            push(format!("{p}.w"), vec![d, d], mat(d, d));
        } else {
            for m in ["q", "k", "v"] {
                push(format!("{p}.{m}"), vec![d, d], mat(d, d));
            }
        }
        push(format!("{p}.o"), vec![d, d], mat(d, d));
        if c.attention() == AttentionKind::Mlp {
            push(format!("{p}.score"), vec![d], Init::Uniform(1.0 / (d as f64).sqrt()));
        }
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, n: usize| {
        push(format!("{p}.g"), vec![n], Init::Ones);
        push(format!("{p}.b"), vec![n], Init::Zeros);
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![d, c.ffn_hidden], mat(d, c.ffn_hidden));
        push(format!("{p}.b1"), vec![c.ffn_hidden], Init::Zeros);
        push(format!("{p}.w2"), vec![c.ffn_hidden, d], mat(c.ffn_hidden, d));
        push(format!("{p}.b2"), vec![d], Init::Zeros);
    };

    for l in 0..c.encoder_layers {
        norm(&mut push, &format!("enc.{l}.ln1"), d);
        attention(&mut push, &format!("enc.{l}.attn"));
        norm(&mut push, &format!("enc.{l}.ln2"), d);
        ffn(&mut push, &format!("enc.{l}.ffn"));
    }
    norm(&mut push, "enc.ln", d);
    if c.mode == ModelMode::Nee {
        push("dec.start".into(), vec![d], Init::Uniform(1.0));
    }
    for l in 0..c.decoder_layers {
        norm(&mut push, &format!("dec.{l}.ln1"), d);
        attention(&mut push, &format!("dec.{l}.self"));
        norm(&mut push, &format!("dec.{l}.ln2"), d);
        attention(&mut push, &format!("dec.{l}.cross"));
        norm(&mut push, &format!("dec.{l}.ln3"), d);
        ffn(&mut push, &format!("dec.{l}.ffn"));
    }
    norm(&mut push, "dec.ln", d);
    let out = c.output_size();
    push("head.w".into(), vec![d, out], mat(d, out));
    push("head.b".into(), vec![out], Init::Zeros);

    if c.mode == ModelMode::Nee {
        let (k, f) = (c.mask_kernel, c.mask_filters);
        norm(&mut push, "mask.norm", 2);
        push("mask.conv.w".into(), vec![k, 2, f], mat(k * 2, k * f));
        push("mask.conv.b".into(), vec![f], Init::Zeros);
        push("mask.ff1.w".into(), vec![f, f], mat(f, f));
        push("mask.ff1.b".into(), vec![f], Init::Zeros);
        push("mask.ff2.w".into(), vec![f, 1], mat(f, 1));
        push("mask.ff2.b".into(), vec![1], Init::Zeros);
    }
    v
}

impl ParamStore {
    /// Seeded initialization; parameters are drawn in a fixed order.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in param_specs(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            tensors.insert(name, Tensor::new(shape, data).expect("spec shapes are consistent"));
        }
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against what `config` requires.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(config);
        if specs.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in specs {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Checkpoint(format!("{name}: shape {:?} != {shape:?}", t.shape())))
                }
                None => return Err(ModelError::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }
}

/// Features of a token: bits (LSB first) then the end flag.
pub(crate) fn token_features(t: Token, width: u32) -> Result<Vec<f64>, ModelError> {
    let mut f = vec![0.0; width as usize + 1];
    match t {
        Token::End => f[width as usize] = 1.0,
        Token::Num(v) => {
            if v >= 1 << width {
                return Err(ModelError::Input(format!("{v} does not fit in {width} bits")));
            }
            for (i, slot) in f.iter_mut().take(width as usize).enumerate() {
                *slot = ((v >> i) & 1) as f64;
            }
        }
    }
    Ok(f)
}

/// Key mask for attention from `lq` queries onto keys flagged in
/// `key_ignored` (`[B, lk]`), expanded to `[B, lq, lk]`.
pub(crate) fn expand_mask(key_ignored: &[bool], batch: usize, lq: usize) -> Vec<bool> {
    let lk = key_ignored.len() / batch.max(1);
    let mut out = Vec::with_capacity(batch * lq * lk);
    for b in 0..batch {
        for _ in 0..lq {
            out.extend_from_slice(&key_ignored[b * lk..(b + 1) * lk]);
        }
    }
    out
}

/// Forward-graph builder: binds parameters to tape variables on first use.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub config: &'a ModelConfig,
    params: &'a ParamStore,
    pub vars: BTreeMap<String, Var>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn new(
        tape: &'a mut Tape,
        config: &'a ModelConfig,
        params: &'a ParamStore,
        rng: Option<&'a mut ChaCha8Rng>,
    ) -> Self {
        Self { tape, config, params, vars: BTreeMap::new(), rng }
    }

    /// Uses caller-created variables for some or all parameters.
    pub fn with_vars(mut self, vars: BTreeMap<String, Var>) -> Self {
        self.vars = vars;
        self
    }

    pub fn p(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?
            .clone();
        let v = self.tape.variable(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    fn drop(&mut self, x: Var) -> Result<Var, ModelError> {
        let rate = self.config.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => Ok(self.tape.dropout(x, rate, rng)?),
            _ => Ok(x),
        }
    }

    /// `r * x + dropout(y)` with `r` the configured residual scale.
    pub fn residual(&mut self, x: Var, y: Var) -> Result<Var, ModelError> {
        let y = self.drop(y)?;
        let r = self.config.residual_scale();
        let x = if r == 1.0 { x } else { self.tape.scale(x, r)? };
        Ok(self.tape.add(x, y)?)
    }

    pub fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w1 = self.p(&format!("{prefix}.w1"))?;
        let b1 = self.p(&format!("{prefix}.b1"))?;
        let w2 = self.p(&format!("{prefix}.w2"))?;
        let b2 = self.p(&format!("{prefix}.b2"))?;
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_bias(h, b1)?;
        let h = self.tape.relu(h)?;
        let y = self.tape.matmul(h, w2)?;
        Ok(self.tape.add_bias(y, b2)?)
    }

    /// Single-head attention of `q_src[B, Lq, d]` over `kv_src[B, Lk, d]`.
    /// Returns `(scores, weights, output)`, scores and weights `[B, Lq, Lk]`.
    pub fn attention(
        &mut self,
        q_src: Var,
        kv_src: Var,
        ignored: &[bool],
        prefix: &str,
    ) -> Result<(Var, Var, Var), ModelError> {
        let c = self.config;
        let shared = c.toggles.shared_projection;
        let (wq, wk, wv) = if shared {
            let w = self.p(&format!("{prefix}.w"))?;
            (w, w, w)
        } else {
            (self.p(&format!("{prefix}.q"))?, self.p(&format!("{prefix}.k"))?, self.p(&format!("{prefix}.v"))?)
        };
        let qq = self.tape.matmul(q_src, wq)?;
        let kk = self.tape.matmul(kv_src, wk)?;
        let v = if shared { kk } else { self.tape.matmul(kv_src, wv)? };
        // With a shared projection the score is already symmetric.
        let swapped = if c.toggles.symmetric && !shared {
            Some((self.tape.matmul(q_src, wk)?, self.tape.matmul(kv_src, wq)?))
        } else {
            None
        };
        let scores = match c.attention() {
            AttentionKind::DotProduct => {
                let mut s = self.tape.bmm(qq, kk, true)?;
                if let Some((kq, qk)) = swapped {
                    let s2 = self.tape.bmm(kq, qk, true)?;
                    let sum = self.tape.add(s, s2)?;
                    s = self.tape.scale(sum, 0.5)?;
                }
                self.tape.scale(s, 1.0 / (c.dim as f64).sqrt())?
            }
            AttentionKind::Mlp => {
                let w = self.p(&format!("{prefix}.score"))?;
                let mut s = self.tape.additive_scores(qq, kk, w)?;
                if let Some((kq, qk)) = swapped {
                    let s2 = self.tape.additive_scores(kq, qk, w)?;
                    let sum = self.tape.add(s, s2)?;
                    s = self.tape.scale(sum, 0.5)?;
                }
                s
            }
        };
        let weights = self.tape.masked_softmax(scores, ignored)?;
        let mixed = self.tape.bmm(weights, v, false)?;
        let wo = self.p(&format!("{prefix}.o"))?;
        let out = self.tape.matmul(mixed, wo)?;
        Ok((scores, weights, out))
    }

    /// Embeds `tokens` laid out as `[B, L]`.
    pub fn embed(&mut self, tokens: &[Token], batch: usize, len: usize) -> Result<Var, ModelError> {
        let c = self.config;
        let (n, d) = (c.width as usize, c.dim);
        match c.input_encoding() {
            InputEncoding::Binary | InputEncoding::RawBits => {
                let raw = c.input_encoding() == InputEncoding::RawBits;
                let cols = if raw { d } else { n + 1 };
                let mut data = Vec::with_capacity(tokens.len() * cols);
                for &t in tokens {
                    let f = token_features(t, c.width)?;
                    data.extend_from_slice(&f);
                    data.extend(std::iter::repeat_n(0.0, cols - f.len()));
                }
                let x = self.tape.constant(Tensor::new(vec![batch, len, cols], data)?);
                if raw {
                    Ok(x)
                } else {
                    let e = self.p("embed.bits")?;
                    Ok(self.tape.matmul(x, e)?)
                }
            }
            InputEncoding::OneHot => {
                let rows = tokens
                    .iter()
                    .map(|&t| {
                        token_features(t, c.width)?;
                        Ok(t.alphabet_index(c.width))
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let table = self.p("embed.table")?;
                let g = self.tape.gather_rows(table, &rows)?;
                Ok(self.tape.reshape(g, vec![batch, len, d])?)
            }
        }
    }

    /// Encoder stack over `x[B, L, d]`; `key_ignored` is `[B, L]`.
    pub fn encode(&mut self, mut x: Var, key_ignored: &[bool], batch: usize) -> Result<Var, ModelError> {
        let len = key_ignored.len() / batch;
        let mask = expand_mask(key_ignored, batch, len);
        for l in 0..self.config.encoder_layers {
            let h = self.norm(x, &format!("enc.{l}.ln1"))?;
            let (_, _, a) = self.attention(h, h, &mask, &format!("enc.{l}.attn"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("enc.{l}.ln2"))?;
            let f = self.ffn(h, &format!("enc.{l}.ffn"))?;
            x = self.residual(x, f)?;
        }
        self.norm(x, "enc.ln")
    }

    /// Decoder stack. `self_mask` is `[B, Lq, Lq]`, `cross_mask` is
    /// `[B, Lq, Lk]`. Returns the normalized output and the last block's
    /// cross-attention `(scores, weights)`.
    pub fn decode(
        &mut self,
        mut y: Var,
        memory: Var,
        self_mask: &[bool],
        cross_mask: &[bool],
    ) -> Result<(Var, Var, Var), ModelError> {
        let mut last = None;
        for l in 0..self.config.decoder_layers {
            let h = self.norm(y, &format!("dec.{l}.ln1"))?;
            let (_, _, a) = self.attention(h, h, self_mask, &format!("dec.{l}.self"))?;
            y = self.residual(y, a)?;
            let h = self.norm(y, &format!("dec.{l}.ln2"))?;
            let (s, w, a) = self.attention(h, memory, cross_mask, &format!("dec.{l}.cross"))?;
            last = Some((s, w));
            y = self.residual(y, a)?;
            let h = self.norm(y, &format!("dec.{l}.ln3"))?;
            let f = self.ffn(h, &format!("dec.{l}.ffn"))?;
            y = self.residual(y, f)?;
        }
        let (s, w) = last.expect("at least one decoder layer");
        Ok((self.norm(y, "dec.ln")?, s, w))
    }

    /// Constant with the given shape.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, ModelError> {
        Ok(self.tape.constant(Tensor::new(shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Toggles;

    fn self_scores(toggles: Toggles, seed: u64) -> (usize, Vec<f64>) {
        let c = ModelConfig::sort_nee().with_toggles(toggles);
        let params = ParamStore::init(&c, seed);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &c, &params, None);
        let tokens: Vec<Token> = [9, 200, 3, 3, 71].iter().map(|&v| Token::Num(v)).chain([Token::End]).collect();
        let x = ctx.embed(&tokens, 1, 6).unwrap();
        let (s, _, _) = ctx.attention(x, x, &[false; 36], "enc.0.attn").unwrap();
        (6, ctx.tape.value(s).data().to_vec())
    }

    fn max_asymmetry((n, s): (usize, Vec<f64>)) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((s[i * n + j] - s[j * n + i]).abs());
            }
        }
        worst
    }

    #[test]
    fn symmetric_toggle_makes_self_scores_symmetric() {
        for mlp in [false, true] {
            for shared in [false, true] {
                let mut t = Toggles::all_mod();
                t.mlp_attention = mlp;
                t.shared_projection = shared;
                assert!(max_asymmetry(self_scores(t, 4)) < 1e-12, "mlp {mlp} shared {shared}");
            }
        }
    }

    #[test]
    fn unshared_unsymmetrized_scores_are_not_symmetric() {
        for mlp in [false, true] {
            let t = Toggles { symmetric: false, shared_projection: false, mlp_attention: mlp, ..Toggles::all_mod() };
            assert!(max_asymmetry(self_scores(t, 4)) > 1e-6);
        }
    }

    #[test]
    fn shared_projection_replaces_three_matrices_with_one() {
        let names = |t: Toggles| -> Vec<String> {
            ParamStore::init(&ModelConfig::sort_nee().with_toggles(t), 0).names().cloned().collect()
        };
        let shared = names(Toggles::all_mod());
        let split = names(Toggles { shared_projection: false, ..Toggles::all_mod() });
        assert!(shared.contains(&"enc.0.attn.w".to_string()) && !shared.contains(&"enc.0.attn.q".to_string()));
        assert!(split.contains(&"enc.0.attn.q".to_string()) && !split.contains(&"enc.0.attn.w".to_string()));
    }

    #[test]
    fn residual_scale_is_applied_to_the_skip_path() {
        for (on, r) in [(true, 1.5), (false, 1.0)] {
            let c = ModelConfig { dropout: 0.0, ..ModelConfig::sort_nee() }
                .with_toggles(Toggles { residual: on, ..Toggles::all_mod() });
            let params = ParamStore::init(&c, 0);
            let mut tape = Tape::inference();
            let mut ctx = Ctx::new(&mut tape, &c, &params, None);
            let x = ctx.constant(vec![1, 2], vec![2.0, -4.0]).unwrap();
            let y = ctx.constant(vec![1, 2], vec![0.5, 0.25]).unwrap();
            let out = ctx.residual(x, y).unwrap();
            assert_eq!(ctx.tape.value(out).data(), &[2.0 * r + 0.5, -4.0 * r + 0.25]);
        }
    }
}
