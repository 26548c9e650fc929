use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{expect_shape, ActivationBundle, BoundParams, NetError, ParamSet};
use crate::autograd::{Tape, Var};
use crate::diagnostics::{GroupId, ParamKind};
use crate::tensor::Tensor;

/// Pre-norm decoder-only transformer.
///
/// Each block computes `h = x + Attn(LN(x))`, `y = h + MLP(LN(h))` with a
/// 4× GELU MLP; the block output `y` is that layer's representation. Token
/// and learned absolute position embeddings feed block 1, and a final layer
/// norm feeds an untied output projection.
///
/// With `unet_skips`, the output of block `l ≤ L/2` is multiplied by the
/// learned scalar `skip.l` (initialized to 0) and added to the input of
/// block `L + 1 − l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub unet_skips: bool,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 64,
            heads: 4,
            vocab_size: 256,
            context_length: 128,
            unet_skips: true,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 {
            return bad("layers, model_dim and heads must be positive");
        }
        if self.vocab_size == 0 || self.context_length == 0 {
            return bad("vocab_size and context_length must be positive");
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be divisible by heads");
        }
        if self.unet_skips && !self.layers.is_multiple_of(2) {
            return bad("skip connections need an even number of layers");
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        4 * self.model_dim
    }

    fn layer_shapes(&self, l: usize) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.model_dim, self.hidden());
        let p = |s: &str| format!("layers.{l}.{s}");
        vec![
            (p("attn.wq"), vec![d, d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.wo"), vec![d, d]),
            (p("mlp.w1"), vec![d, h]),
            (p("mlp.b1"), vec![1, h]),
            (p("mlp.w2"), vec![h, d]),
            (p("mlp.b2"), vec![1, d]),
        ]
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.model_dim;
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_length, d]),
        ];
        for l in 1..=self.layers {
            out.extend(self.layer_shapes(l));
        }
        out.push(("head".to_string(), vec![d, self.vocab_size]));
        if self.unet_skips {
            for l in 1..=self.layers / 2 {
                out.push((format!("skip.{l}"), vec![1, 1]));
            }
        }
        out
    }

    /// Gaussian weights with standard deviation `1/√fan_in`, embeddings with
    /// `1/√model_dim`, zero biases and zero skip gains.
    pub fn init(&self) -> Result<ParamSet, NetError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut p = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.starts_with("skip.") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name.ends_with("_emb") {
                Tensor::randn(&shape, 1.0 / (self.model_dim as f64).sqrt(), &mut rng)
            } else {
                Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            };
            p.insert(name, t);
        }
        Ok(p)
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<(), NetError> {
        for (name, shape) in self.param_shapes() {
            expect_shape(params, &name, &shape)?;
        }
        Ok(())
    }

    /// Diagnostic group of a parameter: `(l, attention)` / `(l, mlp)` for
    /// block `l`, `(0, embedding)` for embeddings, `(L+1, other)` for the
    /// head and `(0, other)` for skip gains.
    pub fn group_of(&self, name: &str) -> GroupId {
        if let Some(rest) = name.strip_prefix("layers.") {
            let mut parts = rest.splitn(3, '.');
            let layer = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
            let kind = match parts.next() {
                Some("attn") => ParamKind::Attention,
                Some("mlp") => ParamKind::Mlp,
                _ => ParamKind::Other,
            };
            return GroupId::new(layer, kind);
        }
        if name.ends_with("_emb") {
            GroupId::new(0, ParamKind::Embedding)
        } else if name == "head" {
            GroupId::new(self.layers + 1, ParamKind::Other)
        } else {
            GroupId::new(0, ParamKind::Other)
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, NetError> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

/// Forward pass on `batch` sequences of length `seq`, `tokens` laid out
/// row-major (`tokens[b·seq + t]`).
pub fn transformer_forward(
    tape: &mut Tape,
    config: &TransformerConfig,
    params: &BoundParams,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<ActivationBundle, NetError> {
    if seq > config.context_length {
        return Err(NetError::SequenceTooLong {
            len: seq,
            context: config.context_length,
        });
    }
    if tokens.len() != batch * seq || seq == 0 {
        return Err(NetError::InvalidConfig(format!(
            "{} tokens cannot form {batch} sequences of length {seq}",
            tokens.len()
        )));
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t >= config.vocab_size) {
        return Err(NetError::TokenOutOfRange {
            id,
            position,
            vocab: config.vocab_size,
        });
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.embedding(params.var("tok_emb")?, tokens)?;
    let pos = tape.embedding(params.var("pos_emb")?, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let depth = config.layers;
    let mut outputs: Vec<Var> = Vec::with_capacity(depth);
    for l in 1..=depth {
        if config.unet_skips && l > depth / 2 {
            let src = depth + 1 - l;
            let gain = params.var(&format!("skip.{src}"))?;
            let scaled = tape.mul(outputs[src - 1], gain)?;
            x = tape.add(x, scaled)?;
        }
        let p = |s: &str| params.var(&format!("layers.{l}.{s}"));
        let a_in = tape.layer_norm(x)?;
        let q = linear(tape, a_in, p("attn.wq")?, None)?;
        let k = linear(tape, a_in, p("attn.wk")?, None)?;
        let v = linear(tape, a_in, p("attn.wv")?, None)?;
        let att = tape.causal_attention(q, k, v, batch, seq, config.heads)?;
        let att = linear(tape, att, p("attn.wo")?, None)?;
        let h = tape.add(x, att)?;
        let m_in = tape.layer_norm(h)?;
        let m = linear(tape, m_in, p("mlp.w1")?, Some(p("mlp.b1")?))?;
        let m = tape.gelu(m);
        let m = linear(tape, m, p("mlp.w2")?, Some(p("mlp.b2")?))?;
        x = tape.add(h, m)?;
        outputs.push(x);
    }
    let final_norm = tape.layer_norm(x)?;
    let logits = tape.matmul(final_norm, params.var("head")?)?;
    Ok(ActivationBundle {
        layers: outputs,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(skips: bool) -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            vocab_size: 11,
            context_length: 6,
            unet_skips: skips,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig {
            model_dim: 10,
            heads: 4,
            ..small(false)
        }
        .validate()
        .is_err());
        assert!(TransformerConfig {
            layers: 3,
            ..small(true)
        }
        .validate()
        .is_err());
        assert!(TransformerConfig {
            layers: 3,
            ..small(false)
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn rejects_bad_tokens() {
        let c = small(false);
        let p = c.init().unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        assert!(matches!(
            transformer_forward(&mut t, &c, &b, &[1, 2, 11], 1, 3),
            Err(NetError::TokenOutOfRange {
                id: 11,
                position: 2,
                ..
            })
        ));
        assert!(matches!(
            transformer_forward(&mut t, &c, &b, &[0; 7], 1, 7),
            Err(NetError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn groups() {
        let c = small(true);
        assert_eq!(
            c.group_of("layers.2.attn.wq"),
            GroupId::new(2, ParamKind::Attention)
        );
        assert_eq!(c.group_of("layers.1.mlp.b2"), GroupId::new(1, ParamKind::Mlp));
        assert_eq!(c.group_of("tok_emb"), GroupId::new(0, ParamKind::Embedding));
        assert_eq!(c.group_of("head"), GroupId::new(3, ParamKind::Other));
        assert_eq!(c.group_of("skip.1"), GroupId::new(0, ParamKind::Other));
    }
}
