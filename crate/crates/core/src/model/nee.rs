//! The execution engine: masked encoder, single-query decoder, value and
//! pointer heads, and the convolutional mask update.

use std::rc::Rc;

use crate::numeral::Token;
use crate::numerics::{Tape, Var};
use crate::traces::TraceStep;

use super::config::{ModelMode, OutputEncoding};
use super::network::{expand_mask, token_features, Ctx};
use super::{MaskVector, Model, ModelError};

/// Padded batch of trace steps laid out `[B, L]`.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub batch: usize,
    pub len: usize,
    tokens: Vec<Token>,
    /// Ignored or padding.
    ignored: Vec<bool>,
    valid: Vec<bool>,
    targets: Vec<Token>,
    pointers: Vec<Option<usize>>,
    next_masks: Vec<Option<Vec<bool>>>,
}

impl StepBatch {
    pub fn from_steps(steps: &[&TraceStep]) -> Result<Self, ModelError> {
        if steps.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let batch = steps.len();
        let len = steps.iter().map(|s| s.tokens.len()).max().unwrap();
        let mut out = Self {
            batch,
            len,
            tokens: Vec::with_capacity(batch * len),
            ignored: Vec::with_capacity(batch * len),
            valid: Vec::with_capacity(batch * len),
            targets: Vec::with_capacity(batch),
            pointers: Vec::with_capacity(batch),
            next_masks: Vec::with_capacity(batch),
        };
        for s in steps {
            let n = s.tokens.len();
            if s.mask.len() != n {
                return Err(ModelError::Input(format!("mask length {} for {n} tokens", s.mask.len())));
            }
            if s.mask.considered_count() == 0 {
                return Err(ModelError::EmptyMask);
            }
            if let Some(p) = s.pointer {
                if p >= n || s.mask.is_ignored(p) {
                    return Err(ModelError::Input(format!("target pointer {p} is not a considered position")));
                }
            }
            out.tokens.extend(s.tokens.iter().copied().chain(std::iter::repeat_n(Token::End, len - n)));
            out.ignored.extend(s.mask.flags().iter().copied().chain(std::iter::repeat_n(true, len - n)));
            out.valid.extend(std::iter::repeat_n(true, n).chain(std::iter::repeat_n(false, len - n)));
            out.targets.push(s.target);
            out.pointers.push(s.pointer);
            out.next_masks.push(s.next_mask.as_ref().map(|m| m.flags().to_vec()));
        }
        Ok(out)
    }
}

/// Result of one engine invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub value: Token,
    pub pointer: usize,
    /// Pointer distribution over input positions.
    pub pointer_weights: Vec<f64>,
    pub next_mask: MaskVector,
    pub mask_probs: Vec<f64>,
}

pub(crate) struct NeeGraph {
    pub value_logits: Var,
    pub scores: Var,
    pub weights: Var,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Encoder, decoder and both heads over `[B, L]` tokens.
pub(crate) fn forward(
    ctx: &mut Ctx,
    tokens: &[Token],
    ignored: &[bool],
    batch: usize,
) -> Result<NeeGraph, ModelError> {
    let len = tokens.len() / batch;
    let d = ctx.config.dim;
    let x = ctx.embed(tokens, batch, len)?;
    let memory = ctx.encode(x, ignored, batch)?;
    let start = ctx.p("dec.start")?;
    let start = ctx.tape.reshape(start, vec![1, d])?;
    let y = ctx.tape.tile(start, batch)?;
    let self_mask = vec![false; batch];
    let cross_mask = expand_mask(ignored, batch, 1);
    let (h, scores, weights) = ctx.decode(y, memory, &self_mask, &cross_mask)?;
    let logits = ctx.linear(h, "head")?;
    let out = ctx.config.output_size();
    Ok(NeeGraph {
        value_logits: ctx.tape.reshape(logits, vec![batch, out])?,
        scores: ctx.tape.reshape(scores, vec![batch, len])?,
        weights: ctx.tape.reshape(weights, vec![batch, len])?,
    })
}

/// Pre-sigmoid next-mask logits `[B, L]` from the current mask and a
/// one-hot pointer, both `[B, L]`. Padding positions are zeroed after the
/// normalization so they act as the convolution's zero padding.
pub(crate) fn mask_head(
    ctx: &mut Ctx,
    b_in: &[f64],
    b_ptr: &[f64],
    valid: &[bool],
    batch: usize,
) -> Result<Var, ModelError> {
    let len = b_in.len() / batch;
    let mut x = Vec::with_capacity(2 * b_in.len());
    let mut keep = Vec::with_capacity(2 * b_in.len());
    for i in 0..b_in.len() {
        x.extend([b_in[i], b_ptr[i]]);
        let v = if valid[i] { 1.0 } else { 0.0 };
        keep.extend([v, v]);
    }
    let x = ctx.constant(vec![batch, len, 2], x)?;
    let n = ctx.norm(x, "mask.norm")?;
    let n = ctx.tape.mul_const(n, Rc::from(keep))?;
    let w = ctx.p("mask.conv.w")?;
    let b = ctx.p("mask.conv.b")?;
    let c = ctx.tape.conv1d(n, w, b)?;
    let h = ctx.linear(c, "mask.ff1")?;
    let h = ctx.tape.relu(h)?;
    let o = ctx.linear(h, "mask.ff2")?;
    Ok(ctx.tape.reshape(o, vec![batch, len])?)
}

/// Value targets and weights for one sample, scaled by `w`.
pub(crate) fn value_targets(
    model_out: OutputEncoding,
    output_width: u32,
    target: Token,
    w: f64,
    targets: &mut Vec<f64>,
    weights: &mut Vec<f64>,
) -> Result<(), ModelError> {
    debug_assert_eq!(model_out, OutputEncoding::Binary);
    let f = token_features(target, output_width)?;
    let is_num = !target.is_end();
    for (i, v) in f.iter().enumerate() {
        targets.push(*v);
        let bit = i < output_width as usize;
        weights.push(if !bit || is_num { w } else { 0.0 });
    }
    Ok(())
}

/// Summed value, pointer and mask losses, each averaged over the batch.
pub(crate) fn loss(ctx: &mut Ctx, b: &StepBatch) -> Result<Var, ModelError> {
    let c = ctx.config.clone();
    let g = forward(ctx, &b.tokens, &b.ignored, b.batch)?;
    let inv = 1.0 / b.batch as f64;

    let value = match c.output {
        OutputEncoding::Binary => {
            let (mut t, mut w) = (Vec::new(), Vec::new());
            for &target in &b.targets {
                value_targets(c.output, c.output_width, target, inv, &mut t, &mut w)?;
            }
            ctx.tape.bce_with_logits(g.value_logits, t.into(), w.into())?
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
            ctx.tape.softmax_xent(g.value_logits, None, &idx, &vec![inv; b.batch])?
        }
    };
    let mut total = value;

    if b.pointers.iter().any(Option::is_some) {
        let idx: Vec<usize> = b.pointers.iter().map(|p| p.unwrap_or(0)).collect();
        let w: Vec<f64> = b.pointers.iter().map(|p| if p.is_some() { inv } else { 0.0 }).collect();
        let ptr = ctx.tape.softmax_xent(g.scores, Some(&b.ignored), &idx, &w)?;
        total = ctx.tape.add(total, ptr)?;
    }

    if b.next_masks.iter().any(Option::is_some) {
        let len = b.len;
        let b_in: Vec<f64> = (0..b.batch * len)
            .map(|i| if b.valid[i] && b.ignored[i] { 1.0 } else { 0.0 })
            .collect();
        let mut b_ptr = vec![0.0; b.batch * len];
        let (mut t, mut w) = (vec![0.0; b.batch * len], vec![0.0; b.batch * len]);
        for (s, (p, next)) in b.pointers.iter().zip(&b.next_masks).enumerate() {
            let (Some(p), Some(next)) = (p, next) else { continue };
            b_ptr[s * len + p] = 1.0;
            let per = inv / next.len() as f64;
            for (j, &flag) in next.iter().enumerate() {
                t[s * len + j] = if flag { 1.0 } else { 0.0 };
                w[s * len + j] = per;
            }
        }
        let logits = mask_head(ctx, &b_in, &b_ptr, &b.valid, b.batch)?;
        let m = ctx.tape.bce_with_logits(logits, t.into(), w.into())?;
        total = ctx.tape.add(total, m)?;
    }
    Ok(total)
}

/// Reads a token from value logits.
pub(crate) fn decode_value(model: &Model, logits: &[f64]) -> Token {
    let c = &model.config;
    match c.output {
        OutputEncoding::Binary => {
            let n = c.output_width as usize;
            if sigmoid(logits[n]) > c.bit_threshold {
                return Token::End;
            }
            let v = (0..n).filter(|&i| sigmoid(logits[i]) > c.bit_threshold).fold(0u64, |a, i| a | 1 << i);
            Token::Num(v)
        }
        OutputEncoding::OneHot => {
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            Token::from_alphabet_index(best, c.output_width)
        }
    }
}

/// One engine step for each `(tokens, mask)` pair, batched. Pairs must
/// have equal lengths.
pub fn nee_step_batch(model: &Model, items: &[(&[Token], &MaskVector)]) -> Result<Vec<StepOutput>, ModelError> {
    if model.config.mode != ModelMode::Nee {
        return Err(ModelError::Mode("engine step needs an engine-mode model"));
    }
    let batch = items.len();
    if batch == 0 {
        return Ok(Vec::new());
    }
    let len = items[0].0.len();
    let mut tokens = Vec::with_capacity(batch * len);
    let mut ignored = Vec::with_capacity(batch * len);
    for (t, m) in items {
        if t.len() != len || m.len() != len {
            return Err(ModelError::Input("batched steps need equal lengths".into()));
        }
        if m.considered_count() == 0 {
            return Err(ModelError::EmptyMask);
        }
        tokens.extend_from_slice(t);
        ignored.extend_from_slice(m.flags());
    }
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &model.config, &model.params, None);
    let g = forward(&mut ctx, &tokens, &ignored, batch)?;
    let weights = ctx.tape.value(g.weights).data().to_vec();
    let logits = ctx.tape.value(g.value_logits).data().to_vec();
    let out_size = model.config.output_size();

    let mut pointers = Vec::with_capacity(batch);
    let mut b_ptr = vec![0.0; batch * len];
    for s in 0..batch {
        let row = &weights[s * len..(s + 1) * len];
        let mut best = None;
        for j in (0..len).filter(|&j| !ignored[s * len + j]) {
            if best.is_none_or(|b: usize| row[j] > row[b]) {
                best = Some(j);
            }
        }
        let p = best.expect("mask has a considered position");
        b_ptr[s * len + p] = 1.0;
        pointers.push(p);
    }
    let b_in: Vec<f64> = ignored.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let mlog = mask_head(&mut ctx, &b_in, &b_ptr, &vec![true; batch * len], batch)?;
    let mlog = ctx.tape.value(mlog).data().to_vec();

    Ok((0..batch)
        .map(|s| {
            let probs: Vec<f64> = mlog[s * len..(s + 1) * len].iter().map(|&z| sigmoid(z)).collect();
            let next = MaskVector::from_flags(probs.iter().map(|&p| p > model.config.mask_threshold).collect());
            StepOutput {
                value: decode_value(model, &logits[s * out_size..(s + 1) * out_size]),
                pointer: pointers[s],
                pointer_weights: weights[s * len..(s + 1) * len].to_vec(),
                next_mask: next,
                mask_probs: probs,
            }
        })
        .collect())
}

/// Value, pointer (argmax, first maximum wins) and binarized next mask.
pub fn nee_step(model: &Model, tokens: &[Token], mask: &MaskVector) -> Result<StepOutput, ModelError> {
    if tokens.len() != mask.len() {
        return Err(ModelError::Input(format!("mask length {} for {} tokens", mask.len(), tokens.len())));
    }
    Ok(nee_step_batch(model, &[(tokens, mask)])?.remove(0))
}

/// Next-mask probabilities for a current mask and a pointer position.
pub fn mask_update(model: &Model, mask: &MaskVector, pointer: usize) -> Result<Vec<f64>, ModelError> {
    if model.config.mode != ModelMode::Nee {
        return Err(ModelError::Mode("mask update needs an engine-mode model"));
    }
    let len = mask.len();
    if pointer >= len {
        return Err(ModelError::Input(format!("pointer {pointer} outside length {len}")));
    }
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &model.config, &model.params, None);
    let b_in: Vec<f64> = mask.flags().iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let mut b_ptr = vec![0.0; len];
    b_ptr[pointer] = 1.0;
    let z = mask_head(&mut ctx, &b_in, &b_ptr, &vec![true; len], 1)?;
    Ok(ctx.tape.value(z).data().iter().map(|&z| sigmoid(z)).collect())
}

/// Full rollout trace of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub values: Vec<Token>,
    pub steps: Vec<StepOutput>,
}

/// Repeats engine steps from `mask` until the value head emits `e`. Fails
/// when `2 L` steps pass without termination.
pub fn nee_run_from(model: &Model, tokens: &[Token], mask: MaskVector) -> Result<Rollout, ModelError> {
    let mut r = nee_run_batch(model, &[(tokens.to_vec(), mask)])?;
    r.remove(0)
}

/// Rollout with every position initially considered.
pub fn nee_run(model: &Model, tokens: &[Token]) -> Result<Vec<Token>, ModelError> {
    Ok(nee_run_from(model, tokens, MaskVector::considering_all(tokens.len()))?.values)
}

/// Lockstep rollouts of equal-length inputs. Each rollout fails on its own
/// (budget, empty mask) without affecting the others.
pub fn nee_run_batch(
    model: &Model,
    inputs: &[(Vec<Token>, MaskVector)],
) -> Result<Vec<Result<Rollout, ModelError>>, ModelError> {
    let mut state: Vec<(MaskVector, Rollout, Option<Result<(), ModelError>>)> = inputs
        .iter()
        .map(|(_, m)| (m.clone(), Rollout { values: Vec::new(), steps: Vec::new() }, None))
        .collect();
    for (i, (t, _)) in inputs.iter().enumerate() {
        if t.is_empty() {
            state[i].2 = Some(Err(ModelError::Input("empty input".into())));
        }
    }
    let budget = inputs.iter().map(|(t, _)| 2 * t.len()).max().unwrap_or(0);
    for _ in 0..budget {
        let active: Vec<usize> = (0..inputs.len())
            .filter(|&i| state[i].2.is_none() && state[i].1.steps.len() < 2 * inputs[i].0.len())
            .collect();
        if active.is_empty() {
            break;
        }
        for &i in &active {
            if state[i].0.considered_count() == 0 {
                state[i].2 = Some(Err(ModelError::EmptyMask));
            }
        }
        let active: Vec<usize> = active.into_iter().filter(|&i| state[i].2.is_none()).collect();
        // Group by length so each forward pass is unpadded.
        let mut lens: Vec<usize> = active.iter().map(|&i| inputs[i].0.len()).collect();
        lens.sort_unstable();
        lens.dedup();
        for len in lens {
            let group: Vec<usize> = active.iter().copied().filter(|&i| inputs[i].0.len() == len).collect();
            let outs = {
                let items: Vec<(&[Token], &MaskVector)> =
                    group.iter().map(|&i| (inputs[i].0.as_slice(), &state[i].0)).collect();
                nee_step_batch(model, &items)?
            };
            for (i, out) in group.into_iter().zip(outs) {
                let st = &mut state[i];
                if out.value.is_end() {
                    st.2 = Some(Ok(()));
                } else {
                    st.1.values.push(out.value);
                    st.0 = out.next_mask.clone();
                }
                st.1.steps.push(out);
            }
        }
    }
    Ok(state
        .into_iter()
        .zip(inputs)
        .map(|((_, rollout, done), (t, _))| match done {
            Some(Ok(())) => Ok(rollout),
            Some(Err(e)) => Err(e),
            None => Err(ModelError::Budget { steps: 2 * t.len() }),
        })
        .collect())
}
