//! Autoregressive encoder-decoder baseline: reads the unsorted input,
//! emits the sorted output one token at a time.

use crate::numeral::Token;
use crate::numerics::{Tape, Tensor, Var};

use super::config::{ModelMode, OutputEncoding};
use super::nee::{decode_value, value_targets};
use super::network::{expand_mask, token_features, Ctx};
use super::{Model, ModelError};

/// Padded teacher-forcing batch. Decoder inputs are the targets shifted
/// right behind the start token 0.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub batch: usize,
    in_len: usize,
    inputs: Vec<Token>,
    in_ignored: Vec<bool>,
    dec_inputs: Vec<Token>,
    dec_pad: Vec<bool>,
    targets: Vec<Token>,
}

impl SeqBatch {
    /// `(input tokens, target tokens)` pairs; both end with `e`.
    pub fn from_pairs(pairs: &[(Vec<Token>, Vec<Token>)]) -> Result<Self, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let batch = pairs.len();
        let in_len = pairs.iter().map(|p| p.0.len()).max().unwrap();
        let out_len = pairs.iter().map(|p| p.1.len()).max().unwrap();
        let mut b = Self {
            batch,
            in_len,
            inputs: Vec::new(),
            in_ignored: Vec::new(),
            dec_inputs: Vec::new(),
            dec_pad: Vec::new(),
            targets: Vec::new(),
        };
        for (inp, out) in pairs {
            if inp.is_empty() || out.is_empty() {
                return Err(ModelError::Input("empty sequence".into()));
            }
            let (pi, po) = (in_len - inp.len(), out_len - out.len());
            b.inputs.extend(inp.iter().copied().chain(std::iter::repeat_n(Token::End, pi)));
            b.in_ignored.extend(std::iter::repeat_n(false, inp.len()).chain(std::iter::repeat_n(true, pi)));
            b.dec_inputs.push(Token::Num(0));
            b.dec_inputs.extend(out[..out.len() - 1].iter().copied().chain(std::iter::repeat_n(Token::End, po)));
            b.dec_pad.extend(std::iter::repeat_n(false, out.len()).chain(std::iter::repeat_n(true, po)));
            b.targets.extend(out.iter().copied().chain(std::iter::repeat_n(Token::End, po)));
        }
        Ok(b)
    }

    /// Sorting pairs: input `seq ++ [e]`, target `sorted(seq) ++ [e]`.
    pub fn sorting(seqs: &[Vec<u64>]) -> Result<Self, ModelError> {
        let pairs: Vec<_> = seqs
            .iter()
            .map(|s| {
                let mut sorted = s.clone();
                sorted.sort_unstable();
                let wrap = |v: &[u64]| v.iter().map(|&x| Token::Num(x)).chain([Token::End]).collect::<Vec<_>>();
                (wrap(s), wrap(&sorted))
            })
            .collect();
        Self::from_pairs(&pairs)
    }
}

fn causal_mask(pad: &[bool], batch: usize) -> Vec<bool> {
    let t = pad.len() / batch;
    let mut m = Vec::with_capacity(batch * t * t);
    for b in 0..batch {
        for i in 0..t {
            for j in 0..t {
                m.push(j > i || pad[b * t + j]);
            }
        }
    }
    m
}

/// Decoder over `dec_inputs[B, T]` against a computed memory. Returns
/// logits `[B, T, out]` and last-block cross-attention weights `[B, T, L]`.
fn decode_with_memory(
    ctx: &mut Ctx,
    memory: Var,
    in_ignored: &[bool],
    dec_inputs: &[Token],
    dec_pad: &[bool],
    batch: usize,
) -> Result<(Var, Var), ModelError> {
    let t = dec_inputs.len() / batch;
    let y = ctx.embed(dec_inputs, batch, t)?;
    let self_mask = causal_mask(dec_pad, batch);
    let cross_mask = expand_mask(in_ignored, batch, t);
    let (h, _, weights) = ctx.decode(y, memory, &self_mask, &cross_mask)?;
    Ok((ctx.linear(h, "head")?, weights))
}

/// Per-token mean loss over non-padding target positions.
pub(crate) fn loss(ctx: &mut Ctx, b: &SeqBatch) -> Result<Var, ModelError> {
    let c = ctx.config.clone();
    let x = ctx.embed(&b.inputs, b.batch, b.in_len)?;
    let memory = ctx.encode(x, &b.in_ignored, b.batch)?;
    let (logits, _) = decode_with_memory(ctx, memory, &b.in_ignored, &b.dec_inputs, &b.dec_pad, b.batch)?;
    let count = b.dec_pad.iter().filter(|&&p| !p).count() as f64;
    let inv = 1.0 / count;
    match c.output {
        OutputEncoding::Binary => {
            let (mut t, mut w) = (Vec::new(), Vec::new());
            for (i, &target) in b.targets.iter().enumerate() {
                let s = if b.dec_pad[i] { 0.0 } else { inv };
                value_targets(c.output, c.output_width, target, s, &mut t, &mut w)?;
            }
            Ok(ctx.tape.bce_with_logits(logits, t.into(), w.into())?)
        }
        OutputEncoding::OneHot => {
            let idx = b
                .targets
                .iter()
                .map(|&t| {
                    token_features(t, c.output_width)?;
                    Ok(t.alphabet_index(c.output_width))
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            let w: Vec<f64> = b.dec_pad.iter().map(|&p| if p { 0.0 } else { inv }).collect();
            Ok(ctx.tape.softmax_xent(logits, None, &idx, &w)?)
        }
    }
}

/// Greedy decoding result with the last decoder block's cross-attention
/// row for every emitted token.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub output: Vec<Token>,
    pub attention: Vec<Vec<f64>>,
    /// False when the step budget ran out before `e`.
    pub terminated: bool,
}

/// Greedy decoding of equal-length inputs in lockstep, up to `2 L` tokens
/// each.
pub fn seq2seq_decode_batch(model: &Model, inputs: &[Vec<Token>]) -> Result<Vec<Decoded>, ModelError> {
    if model.config.mode != ModelMode::Seq2seq {
        return Err(ModelError::Mode("greedy decoding needs a baseline-mode model"));
    }
    let batch = inputs.len();
    if batch == 0 {
        return Ok(Vec::new());
    }
    let len = inputs[0].len();
    if len == 0 || inputs.iter().any(|i| i.len() != len) {
        return Err(ModelError::Input("batched decoding needs equal non-zero lengths".into()));
    }
    let tokens: Vec<Token> = inputs.concat();
    let ignored = vec![false; batch * len];
    let memory: Tensor = {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &model.config, &model.params, None);
        let x = ctx.embed(&tokens, batch, len)?;
        let m = ctx.encode(x, &ignored, batch)?;
        ctx.tape.value(m).clone()
    };
    let out_size = model.config.output_size();
    let mut results: Vec<Decoded> =
        (0..batch).map(|_| Decoded { output: Vec::new(), attention: Vec::new(), terminated: false }).collect();
    let mut prefix: Vec<Vec<Token>> = vec![vec![Token::Num(0)]; batch];
    for _ in 0..2 * len {
        let active: Vec<usize> = (0..batch).filter(|&i| !results[i].terminated).collect();
        if active.is_empty() {
            break;
        }
        let na = active.len();
        let t = prefix[active[0]].len();
        let mut mem = Vec::with_capacity(na * len * model.config.dim);
        let step = len * model.config.dim;
        for &i in &active {
            mem.extend_from_slice(&memory.data()[i * step..(i + 1) * step]);
        }
        let dec: Vec<Token> = active.iter().flat_map(|&i| prefix[i].iter().copied()).collect();
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &model.config, &model.params, None);
        let memory_var = ctx.constant(vec![na, len, model.config.dim], mem)?;
        let (logits, weights) =
            decode_with_memory(&mut ctx, memory_var, &vec![false; na * len], &dec, &vec![false; na * t], na)?;
        let (logits, weights) = (ctx.tape.value(logits).data(), ctx.tape.value(weights).data());
        for (k, &i) in active.iter().enumerate() {
            let row = (k * t + t - 1) * out_size;
            let tok = decode_value(model, &logits[row..row + out_size]);
            let a = (k * t + t - 1) * len;
            results[i].attention.push(weights[a..a + len].to_vec());
            results[i].output.push(tok);
            if tok.is_end() {
                results[i].terminated = true;
            }
            prefix[i].push(tok);
        }
    }
    for r in &mut results {
        if r.terminated {
            r.output.pop();
        }
    }
    Ok(results)
}

/// Greedy decoding of one input; fails when `2 L` tokens pass without `e`.
pub fn seq2seq_decode(model: &Model, tokens: &[Token]) -> Result<Decoded, ModelError> {
    let d = seq2seq_decode_batch(model, &[tokens.to_vec()])?.remove(0);
    if d.terminated {
        Ok(d)
    } else {
        Err(ModelError::Budget { steps: 2 * tokens.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        let mut c = ModelConfig::seq2seq_baseline();
        c.encoder_layers = 1;
        c.decoder_layers = 1;
        c.ffn_hidden = 16;
        Model::new(c, 5).unwrap()
    }

    #[test]
    fn untrained_decoding_is_deterministic_with_valid_rows() {
        let m = tiny();
        let input: Vec<Token> = [7, 3, 9].iter().map(|&v| Token::Num(v)).chain([Token::End]).collect();
        let a = seq2seq_decode_batch(&m, &[input.clone()]).unwrap();
        let b = seq2seq_decode_batch(&Model::new(m.config.clone(), 5).unwrap(), &[input]).unwrap();
        assert_eq!(a, b);
        for row in &a[0].attention {
            assert_eq!(row.len(), 4);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let m = causal_mask(&[false, false, true], 1);
        assert_eq!(m, vec![false, true, true, false, false, true, false, false, true]);
    }

    #[test]
    fn batched_decoding_matches_single() {
        let m = tiny();
        let a: Vec<Token> = [1, 200, 3].iter().map(|&v| Token::Num(v)).chain([Token::End]).collect();
        let b: Vec<Token> = [50, 50, 4].iter().map(|&v| Token::Num(v)).chain([Token::End]).collect();
        let both = seq2seq_decode_batch(&m, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(both[0].output, seq2seq_decode_batch(&m, &[a]).unwrap()[0].output);
        assert_eq!(both[1].output, seq2seq_decode_batch(&m, &[b]).unwrap()[0].output);
    }
}
