//! Pre-norm ViT forward pass recorded on an autodiff tape.

use super::config::ViTConfig;
use super::weights::WeightStore;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ops, Element, Tensor};

#[derive(Debug, Clone)]
struct BlockParams<F: Element> {
    norm1: (Tensor<F>, Tensor<F>),
    qkv: (Tensor<F>, Tensor<F>),
    proj: (Tensor<F>, Tensor<F>),
    norm2: (Tensor<F>, Tensor<F>),
    fc1: (Tensor<F>, Tensor<F>),
    fc2: (Tensor<F>, Tensor<F>),
}

/// A ViT ready for inference. Linear weights are stored pre-transposed to
/// `[in, out]` so that the forward pass is `x * W + b`.
#[derive(Debug, Clone)]
pub struct Vit<F: Element = f32> {
    config: ViTConfig,
    patch: (Tensor<F>, Tensor<F>),
    cls_token: Tensor<F>,
    pos_embed: Tensor<F>,
    blocks: Vec<BlockParams<F>>,
    norm: (Tensor<F>, Tensor<F>),
    head: (Tensor<F>, Tensor<F>),
}

/// Additive probe on one captured attention entry, for finite differences.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOffset<F> {
    pub layer: usize,
    /// Row-major index into the layer's `[heads, T, T]` attention.
    pub index: usize,
    pub delta: F,
}

impl<F: Element> Vit<F> {
    pub fn new(config: ViTConfig, weights: &WeightStore<F>) -> Result<Self> {
        let extras = weights.validate(&config)?;
        if !extras.is_empty() {
            log::warn!(
                "ignoring {} unused weight tensors: {extras:?}",
                extras.len()
            );
        }
        let get = |name: &str| weights.get(name).cloned();
        let linear = |prefix: &str| -> Result<(Tensor<F>, Tensor<F>)> {
            Ok((
                ops::transpose(weights.get(&format!("{prefix}.weight"))?)?,
                get(&format!("{prefix}.bias"))?,
            ))
        };
        let norm = |prefix: &str| -> Result<(Tensor<F>, Tensor<F>)> {
            Ok((
                get(&format!("{prefix}.weight"))?,
                get(&format!("{prefix}.bias"))?,
            ))
        };
        let d = config.embed_dim;
        let patch_w = ops::reshape(
            weights.get("patch_embed.proj.weight")?,
            &[d, config.patch_len()],
        )?;
        let blocks = (0..config.depth)
            .map(|l| {
                let p = format!("blocks.{l}");
                Ok(BlockParams {
                    norm1: norm(&format!("{p}.norm1"))?,
                    qkv: linear(&format!("{p}.attn.qkv"))?,
                    proj: linear(&format!("{p}.attn.proj"))?,
                    norm2: norm(&format!("{p}.norm2"))?,
                    fc1: linear(&format!("{p}.mlp.fc1"))?,
                    fc2: linear(&format!("{p}.mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch: (ops::transpose(&patch_w)?, get("patch_embed.proj.bias")?),
            cls_token: ops::reshape(weights.get("cls_token")?, &[1, d])?,
            pos_embed: ops::reshape(weights.get("pos_embed")?, &[config.num_tokens(), d])?,
            blocks,
            norm: norm("norm")?,
            head: linear("head")?,
            config,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Runs the model on a preprocessed `[3, S, S]` image, recording every
    /// post-softmax attention matrix and the final block's token features.
    pub fn forward_with_capture(&self, x: &Tensor<F>) -> Result<(Tensor<F>, CaptureSet<F>)> {
        let rec = self.record(x, None)?;
        let captures = CaptureSet {
            attention: rec
                .attention
                .iter()
                .map(|&v| rec.tape.value(v).clone())
                .collect(),
            attention_grad: None,
            features: rec.tape.value(rec.features).clone(),
            features_grad: None,
            input_grad: None,
            logits: rec.tape.value(rec.logits).clone(),
            class_index: None,
            recording: Some(rec),
        };
        Ok((captures.logits.clone(), captures))
    }

    /// Logits with `offset.delta` added to one entry of one layer's
    /// attention after the softmax. Used to probe `d logit / d A`.
    pub fn forward_with_attention_offset(
        &self,
        x: &Tensor<F>,
        offset: AttentionOffset<F>,
    ) -> Result<Tensor<F>> {
        if offset.layer >= self.config.depth {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range for depth {}",
                offset.layer, self.config.depth
            )));
        }
        let rec = self.record(x, Some(offset))?;
        Ok(rec.tape.value(rec.logits).clone())
    }

    fn linear(tape: &mut Tape<F>, x: Var, (w, b): &(Tensor<F>, Tensor<F>)) -> Result<Var> {
        let w = tape.constant(w.clone());
        let b = tape.constant(b.clone());
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn layernorm(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        (g, b): &(Tensor<F>, Tensor<F>),
    ) -> Result<Var> {
        let g = tape.constant(g.clone());
        let b = tape.constant(b.clone());
        tape.layernorm(x, g, b, F::from_f64(self.config.norm_eps))
    }

    fn record(&self, x: &Tensor<F>, offset: Option<AttentionOffset<F>>) -> Result<Recording<F>> {
        let c = &self.config;
        let (s, p, g, d) = (c.image_size, c.patch_size, c.grid_size(), c.embed_dim);
        let (t, h, dh) = (c.num_tokens(), c.heads, c.head_dim());
        x.check_shape("forward", &[3, s, s])?;

        let mut tape = Tape::new();
        let input = tape.input(x.clone());

        // [3, S, S] -> [P, 3*p*p] with each patch flattened channel-major,
        // matching a strided convolution kernel laid out [D, 3, p, p].
        let v = tape.reshape(input, &[3, g, p, g, p])?;
        let v = tape.permute(v, &[1, 3, 0, 2, 4])?;
        let patches = tape.reshape(v, &[g * g, c.patch_len()])?;
        let emb = Self::linear(&mut tape, patches, &self.patch)?;
        let cls = tape.constant(self.cls_token.clone());
        let tokens = tape.concat(&[cls, emb], 0)?;
        let pos = tape.constant(self.pos_embed.clone());
        let mut x = tape.add(tokens, pos)?;

        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut attention = Vec::with_capacity(c.depth);
        for (l, block) in self.blocks.iter().enumerate() {
            let hn = self.layernorm(&mut tape, x, &block.norm1)?;
            let qkv = Self::linear(&mut tape, hn, &block.qkv)?;
            let qkv = tape.reshape(qkv, &[t, 3, h, dh])?;
            let qkv = tape.permute(qkv, &[1, 2, 0, 3])?;
            let mut split = [qkv; 3];
            for (i, part) in split.iter_mut().enumerate() {
                let sl = tape.slice(qkv, 0, i, i + 1)?;
                *part = tape.reshape(sl, &[h, t, dh])?;
            }
            let [q, k, v] = split;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax(scores)?;
            attention.push(a);
            let a_used = match offset {
                Some(o) if o.layer == l => {
                    let bump =
                        Tensor::from_fn(
                            [h, t, t],
                            |i| if i == o.index { o.delta } else { F::zero() },
                        );
                    let bump = tape.constant(bump);
                    tape.add(a, bump)?
                }
                _ => a,
            };
            let o = tape.matmul(a_used, v)?;
            let o = tape.permute(o, &[1, 0, 2])?;
            let o = tape.reshape(o, &[t, d])?;
            let o = Self::linear(&mut tape, o, &block.proj)?;
            x = tape.add(x, o)?;

            let hn = self.layernorm(&mut tape, x, &block.norm2)?;
            let m = Self::linear(&mut tape, hn, &block.fc1)?;
            let m = tape.gelu(m)?;
            let m = Self::linear(&mut tape, m, &block.fc2)?;
            x = tape.add(x, m)?;
        }
        let features = x;
        let y = self.layernorm(&mut tape, x, &self.norm)?;
        let cls_out = tape.slice(y, 0, 0, 1)?;
        let logits = Self::linear(&mut tape, cls_out, &self.head)?;
        let logits = tape.reshape(logits, &[c.num_classes])?;
        Ok(Recording {
            tape,
            input,
            attention,
            features,
            logits,
        })
    }
}

#[derive(Debug)]
struct Recording<F: Element> {
    tape: Tape<F>,
    input: Var,
    attention: Vec<Var>,
    features: Var,
    logits: Var,
}

/// Tensors captured from one forward pass, and optionally the gradients of
/// one class logit with respect to them.
#[derive(Debug)]
pub struct CaptureSet<F: Element = f32> {
    attention: Vec<Tensor<F>>,
    attention_grad: Option<Vec<Tensor<F>>>,
    features: Tensor<F>,
    features_grad: Option<Tensor<F>>,
    input_grad: Option<Tensor<F>>,
    logits: Tensor<F>,
    class_index: Option<usize>,
    recording: Option<Recording<F>>,
}

impl<F: Element> CaptureSet<F> {
    /// Assembles captures by hand, without a recorded graph. `attention` is
    /// one `[heads, T, T]` tensor per layer; `features` is `[T, D]`.
    pub fn from_parts(
        attention: Vec<Tensor<F>>,
        features: Tensor<F>,
        logits: Tensor<F>,
    ) -> Result<Self> {
        let first = attention.first().ok_or_else(|| {
            Error::InvalidArgument("at least one attention layer is required".into())
        })?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] || shape[0] == 0 {
            return Err(Error::invalid(
                "captures",
                format!("attention must be [heads, T, T], got {shape:?}"),
            ));
        }
        if let Some(bad) = attention.iter().find(|a| a.shape() != shape.as_slice()) {
            return Err(Error::shape("captures", bad.shape(), &shape));
        }
        if features.rank() != 2 || features.shape()[0] != shape[1] {
            return Err(Error::shape("captures", features.shape(), &shape));
        }
        Ok(Self {
            attention,
            attention_grad: None,
            features,
            features_grad: None,
            input_grad: None,
            logits,
            class_index: None,
            recording: None,
        })
    }

    /// Attaches gradients for `class_index` by hand. Shapes must mirror the
    /// captured tensors.
    pub fn with_gradients(
        mut self,
        class_index: usize,
        attention_grad: Vec<Tensor<F>>,
        features_grad: Tensor<F>,
    ) -> Result<Self> {
        if attention_grad.len() != self.attention.len() {
            return Err(Error::InvalidArgument(format!(
                "{} attention gradients for {} layers",
                attention_grad.len(),
                self.attention.len()
            )));
        }
        for (g, a) in attention_grad.iter().zip(&self.attention) {
            g.check_shape("captures", a.shape())?;
        }
        features_grad.check_shape("captures", self.features.shape())?;
        self.attention_grad = Some(attention_grad);
        self.features_grad = Some(features_grad);
        self.class_index = Some(class_index);
        Ok(self)
    }

    /// Back-propagates `logits[class_index]`, filling the attention,
    /// feature and input gradients. Can be called again for another class.
    pub fn backward_class(&mut self, class_index: usize) -> Result<()> {
        let rec = self.recording.as_ref().ok_or_else(|| {
            Error::State("backward requires captures from a recorded forward pass".into())
        })?;
        let classes = self.logits.numel();
        if class_index >= classes {
            return Err(Error::InvalidArgument(format!(
                "class index {class_index} out of range for {classes} classes"
            )));
        }
        let seed = Tensor::from_fn([classes], |i| {
            if i == class_index {
                F::one()
            } else {
                F::zero()
            }
        });
        let grads = rec.tape.backward(rec.logits, seed)?;
        self.attention_grad = Some(
            rec.attention
                .iter()
                .zip(&self.attention)
                .map(|(&v, a)| grads.get_or_zeros(v, a.shape()))
                .collect(),
        );
        self.features_grad = Some(grads.get_or_zeros(rec.features, self.features.shape()));
        self.input_grad = Some(grads.get_or_zeros(rec.input, rec.tape.value(rec.input).shape()));
        self.class_index = Some(class_index);
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.attention.len()
    }

    pub fn heads(&self) -> usize {
        self.attention[0].shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.attention[0].shape()[1]
    }

    pub fn logits(&self) -> &Tensor<F> {
        &self.logits
    }

    /// Post-softmax attention per layer, each `[heads, T, T]`.
    pub fn attention(&self) -> &[Tensor<F>] {
        &self.attention
    }

    /// Final block output tokens, `[T, D]`.
    pub fn features(&self) -> &Tensor<F> {
        &self.features
    }

    pub fn class_index(&self) -> Option<usize> {
        self.class_index
    }

    fn require_backward(&self, class_index: usize) -> Result<()> {
        match self.class_index {
            None => Err(Error::State("backward_class has not been run".into())),
            Some(c) if c != class_index => Err(Error::State(format!(
                "gradients are for class {c}, not {class_index}"
            ))),
            Some(_) => Ok(()),
        }
    }

    /// `d logit / d A` per layer for the class passed to
    /// [`backward_class`](Self::backward_class).
    pub fn attention_grad(&self, class_index: usize) -> Result<&[Tensor<F>]> {
        self.require_backward(class_index)?;
        self.attention_grad
            .as_deref()
            .ok_or_else(|| Error::State("attention gradients missing".into()))
    }

    pub fn features_grad(&self, class_index: usize) -> Result<&Tensor<F>> {
        self.require_backward(class_index)?;
        self.features_grad
            .as_ref()
            .ok_or_else(|| Error::State("feature gradients missing".into()))
    }

    /// Gradient with respect to the preprocessed input image. Only present
    /// for captures produced by a forward pass.
    pub fn input_grad(&self, class_index: usize) -> Result<&Tensor<F>> {
        self.require_backward(class_index)?;
        self.input_grad.as_ref().ok_or_else(|| {
            Error::State("input gradient is not available for hand-built captures".into())
        })
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predicted_class<F: Element>(logits: &Tensor<F>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}
