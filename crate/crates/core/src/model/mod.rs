//! Assembly of the dual-channel network and its ablation baselines behind
//! one model interface.
//!
//! Every variant shares the same skeleton: token embedding (plus segment and
//! position embeddings summed in front of the encoder variants), optional
//! contextual encoder, one or two feature channels, then a single affine
//! classifier over the concatenated channel outputs. Each example is sliced
//! to its real [CLS]…[SEP] prefix before entering the network; padded
//! positions carry no signal.

mod config;

pub use config::{ModelConfig, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::layers::{
    attention_pool, bilstm, bilstm_full, dpcnn_forward, encoder_forward, init, lstm_forward,
    text_cnn_forward, AttnPoolParams, ConvStackParams, EncoderBlockParams, LstmParams,
    TextCnnParams,
};
use crate::tensor::{kernels, IdFeeder, Mode, Registrar, Tape, Tensor, TensorId};
use crate::{CoreError, Result};

/// Embedding tables. Non-encoder variants carry only the token table.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub token: Tensor,
    pub segment: Option<Tensor>,
    pub position: Option<Tensor>,
}

/// The recurrent channel: stacked unidirectional or bidirectional layers.
#[derive(Clone, Debug)]
pub enum Recurrent {
    Uni(Vec<LstmParams<Tensor>>),
    Bi(Vec<(LstmParams<Tensor>, LstmParams<Tensor>)>),
}

/// Instantiated parameter set of one variant.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    embedding: EmbeddingParams,
    encoder: Option<Vec<EncoderBlockParams<Tensor>>>,
    recurrent: Option<Recurrent>,
    attn_pool: Option<AttnPoolParams<Tensor>>,
    dpcnn: Option<ConvStackParams<Tensor>>,
    text_cnn: Option<TextCnnParams<Tensor>>,
    classifier_w: Tensor,
    classifier_b: Tensor,
}

/// Deterministically instantiate the variant's parameters from the config
/// seed. Only the components the variant needs are allocated.
pub fn build(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let variant = config.variant;
    let d = config.d_model;

    let embedding = EmbeddingParams {
        token: init::normal(&[config.vocab_size, d], 0.02, &mut rng),
        segment: variant.uses_encoder().then(|| init::normal(&[1, d], 0.02, &mut rng)),
        position: variant.uses_encoder().then(|| init::normal(&[config.text_size, d], 0.02, &mut rng)),
    };

    let encoder = if variant.uses_encoder() {
        let blocks = config.encoder_blocks.expect("validated");
        let heads = config.encoder_heads.expect("validated");
        Some(
            (0..blocks)
                .map(|_| EncoderBlockParams::init(d, heads, config.d_ff(), &mut rng))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let recurrent = if variant.uses_recurrent() {
        let r = config.r_hidden;
        if variant.bidirectional() {
            let mut layers = Vec::with_capacity(config.num_layers);
            for layer in 0..config.num_layers {
                let input = if layer == 0 { d } else { 2 * r };
                let fwd = LstmParams::init(r, input, &mut rng);
                let bwd = LstmParams::init(r, input, &mut rng);
                layers.push((fwd, bwd));
            }
            Some(Recurrent::Bi(layers))
        } else {
            let mut layers = Vec::with_capacity(config.num_layers);
            for layer in 0..config.num_layers {
                let input = if layer == 0 { d } else { r };
                layers.push(LstmParams::init(r, input, &mut rng));
            }
            Some(Recurrent::Uni(layers))
        }
    } else {
        None
    };

    let attn_pool = variant
        .uses_attention_pool()
        .then(|| AttnPoolParams::init(2 * config.r_hidden, 2 * config.r_hidden, &mut rng));

    let dpcnn = variant.uses_dpcnn().then(|| {
        ConvStackParams::init(config.num_filters, config.kernel_size, d, config.text_size, &mut rng)
    });

    let text_cnn = variant.uses_text_cnn().then(|| TextCnnParams::init(d, &mut rng));

    let feat = config.feature_width();
    let classifier_w = init::xavier_uniform(&[feat, config.num_classes], feat, config.num_classes, &mut rng);
    let classifier_b = init::zeros(&[config.num_classes]);

    Ok(Model {
        config: config.clone(),
        embedding,
        encoder,
        recurrent,
        attn_pool,
        dpcnn,
        text_cnn,
        classifier_w,
        classifier_b,
    })
}

impl Model {
    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embed.token".into(), &self.embedding.token));
        if let Some(seg) = &self.embedding.segment {
            out.push(("embed.segment".into(), seg));
        }
        if let Some(pos) = &self.embedding.position {
            out.push(("embed.position".into(), pos));
        }
        if let Some(blocks) = &self.encoder {
            for (i, b) in blocks.iter().enumerate() {
                out.extend(b.tensors().into_iter().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
            }
        }
        match &self.recurrent {
            Some(Recurrent::Uni(layers)) => {
                for (l, p) in layers.iter().enumerate() {
                    out.extend(
                        p.tensors().into_iter().map(|(n, t)| (format!("rnn.{l}.fwd.{n}"), t)),
                    );
                }
            }
            Some(Recurrent::Bi(layers)) => {
                for (l, (fwd, bwd)) in layers.iter().enumerate() {
                    out.extend(
                        fwd.tensors().into_iter().map(|(n, t)| (format!("rnn.{l}.fwd.{n}"), t)),
                    );
                    out.extend(
                        bwd.tensors().into_iter().map(|(n, t)| (format!("rnn.{l}.bwd.{n}"), t)),
                    );
                }
            }
            None => {}
        }
        if let Some(p) = &self.attn_pool {
            out.extend(p.tensors().into_iter().map(|(n, t)| (format!("attn_pool.{n}"), t)));
        }
        if let Some(p) = &self.dpcnn {
            out.extend(p.tensors().into_iter().map(|(n, t)| (format!("dpcnn.{n}"), t)));
        }
        if let Some(p) = &self.text_cnn {
            out.extend(p.tensors().into_iter().map(|(n, t)| (format!("cnn.{n}"), t)));
        }
        out.push(("classifier.w".into(), &self.classifier_w));
        out.push(("classifier.b".into(), &self.classifier_b));
        out
    }

    /// Mutable view in exactly the [`Model::named_params`] order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embed.token".into(), &mut self.embedding.token));
        if let Some(seg) = &mut self.embedding.segment {
            out.push(("embed.segment".into(), seg));
        }
        if let Some(pos) = &mut self.embedding.position {
            out.push(("embed.position".into(), pos));
        }
        if let Some(blocks) = &mut self.encoder {
            for (i, b) in blocks.iter_mut().enumerate() {
                out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
            }
        }
        match &mut self.recurrent {
            Some(Recurrent::Uni(layers)) => {
                for (l, p) in layers.iter_mut().enumerate() {
                    out.extend(
                        p.tensors_mut().into_iter().map(|(n, t)| (format!("rnn.{l}.fwd.{n}"), t)),
                    );
                }
            }
            Some(Recurrent::Bi(layers)) => {
                for (l, (fwd, bwd)) in layers.iter_mut().enumerate() {
                    out.extend(
                        fwd.tensors_mut().into_iter().map(|(n, t)| (format!("rnn.{l}.fwd.{n}"), t)),
                    );
                    out.extend(
                        bwd.tensors_mut().into_iter().map(|(n, t)| (format!("rnn.{l}.bwd.{n}"), t)),
                    );
                }
            }
            None => {}
        }
        if let Some(p) = &mut self.attn_pool {
            out.extend(p.tensors_mut().into_iter().map(|(n, t)| (format!("attn_pool.{n}"), t)));
        }
        if let Some(p) = &mut self.dpcnn {
            out.extend(p.tensors_mut().into_iter().map(|(n, t)| (format!("dpcnn.{n}"), t)));
        }
        if let Some(p) = &mut self.text_cnn {
            out.extend(p.tensors_mut().into_iter().map(|(n, t)| (format!("cnn.{n}"), t)));
        }
        out.push(("classifier.w".into(), &mut self.classifier_w));
        out.push(("classifier.b".into(), &mut self.classifier_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().len()
    }

    pub fn scalar_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace the token-embedding table, e.g. with pretrained vectors.
    pub fn set_token_embeddings(&mut self, matrix: &[f64], dim: usize) -> Result<()> {
        if dim != self.config.d_model {
            return Err(CoreError::config(format!(
                "embedding dim {dim} does not match d_model {}",
                self.config.d_model
            )));
        }
        if matrix.len() != self.config.vocab_size * dim {
            return Err(CoreError::config(format!(
                "embedding matrix has {} values, model wants {}",
                matrix.len(),
                self.config.vocab_size * dim
            )));
        }
        self.embedding.token = Tensor::param(&[self.config.vocab_size, dim], matrix.to_vec())?;
        Ok(())
    }

    /// Overwrite every parameter from (name, shape, values) entries. The
    /// entries must cover the model exactly.
    pub fn load_named(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use std::collections::HashMap;
        let mut by_name: HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
            entries.iter().map(|e| (e.0.as_str(), e)).collect();
        if by_name.len() != entries.len() {
            return Err(CoreError::contract("duplicate tensor name in checkpoint".to_string()));
        }
        let mut params = self.named_params_mut();
        for (name, tensor) in params.iter_mut() {
            let Some((_, shape, values)) = by_name.remove(name.as_str()) else {
                return Err(CoreError::contract(format!("checkpoint is missing tensor {name}")));
            };
            if shape != tensor.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "load_named",
                    lhs: tensor.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            tensor.values_mut().copy_from_slice(values);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(CoreError::contract(format!("checkpoint has unknown tensor {extra}")));
        }
        Ok(())
    }

    /// Structured ids from any registrar, walked in named_params order.
    fn assemble(&self, reg: &mut impl Registrar) -> BoundParams {
        BoundParams {
            token: reg.reg_param(&self.embedding.token),
            segment: self.embedding.segment.as_ref().map(|t| reg.reg_param(t)),
            position: self.embedding.position.as_ref().map(|t| reg.reg_param(t)),
            encoder: self
                .encoder
                .as_ref()
                .map(|blocks| blocks.iter().map(|b| b.register(reg)).collect()),
            recurrent: self.recurrent.as_ref().map(|r| match r {
                Recurrent::Uni(layers) => {
                    BoundRecurrent::Uni(layers.iter().map(|p| p.register(reg)).collect())
                }
                Recurrent::Bi(layers) => BoundRecurrent::Bi(
                    layers.iter().map(|(f, b)| (f.register(reg), b.register(reg))).collect(),
                ),
            }),
            attn_pool: self.attn_pool.as_ref().map(|p| p.register(reg)),
            dpcnn: self.dpcnn.as_ref().map(|p| p.register(reg)),
            text_cnn: self.text_cnn.as_ref().map(|p| p.register(reg)),
            classifier_w: reg.reg_param(&self.classifier_w),
            classifier_b: reg.reg_param(&self.classifier_b),
        }
    }

    /// Snapshot parameters onto a tape for one forward/backward pass.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Bound<'m> {
        let first = tape.len();
        let params = self.assemble(tape);
        // registration is one contiguous run of leaves in named_params order
        let ordered = (first..tape.len()).map(TensorId::new).collect();
        Bound { model: self, params, ordered }
    }

    /// Wire the forward pass onto ids that are already on a tape (in
    /// [`Model::named_params`] order), e.g. inside a gradient check.
    pub fn bind_ids<'m>(&'m self, ids: &[TensorId]) -> Result<Bound<'m>> {
        if ids.len() != self.param_count() {
            return Err(CoreError::contract(format!(
                "bind_ids: {} ids for a model with {} parameters",
                ids.len(),
                self.param_count()
            )));
        }
        let mut feeder = IdFeeder::new(ids);
        let params = self.assemble(&mut feeder);
        Ok(Bound { model: self, params, ordered: ids.to_vec() })
    }

    /// Eval-mode logits for a batch (dropout off).
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new(Mode::Eval);
        let bound = self.bind(&mut tape);
        let id = bound.forward(&mut tape, batch)?;
        Ok(tape.tensor(id).clone())
    }

    /// Label id (ties break to the lowest index) and softmax probabilities
    /// for one encoded row.
    pub fn predict(&self, ids: &[usize], mask: &[bool]) -> Result<(usize, Vec<f64>)> {
        let batch = Batch {
            token_ids: vec![ids.to_vec()],
            mask: vec![mask.to_vec()],
            labels: vec![0],
        };
        let logits = self.logits(&batch)?;
        let probs = kernels::softmax_rows(logits.values(), 1, self.config.num_classes);
        Ok((argmax(logits.values()), probs))
    }
}

/// First index of the maximum; exact ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

enum BoundRecurrent {
    Uni(Vec<LstmParams<TensorId>>),
    Bi(Vec<(LstmParams<TensorId>, LstmParams<TensorId>)>),
}

struct BoundParams {
    token: TensorId,
    segment: Option<TensorId>,
    position: Option<TensorId>,
    encoder: Option<Vec<EncoderBlockParams<TensorId>>>,
    recurrent: Option<BoundRecurrent>,
    attn_pool: Option<AttnPoolParams<TensorId>>,
    dpcnn: Option<ConvStackParams<TensorId>>,
    text_cnn: Option<TextCnnParams<TensorId>>,
    classifier_w: TensorId,
    classifier_b: TensorId,
}

/// A model registered on one tape.
pub struct Bound<'m> {
    model: &'m Model,
    params: BoundParams,
    ordered: Vec<TensorId>,
}

/// Sum of token, whole-sentence and position embeddings for the given ids.
/// Non-encoder tables degrade to the plain token lookup.
pub fn input_embedding(
    tape: &mut Tape,
    token_ids: &[usize],
    pad_mask: &[bool],
    token: TensorId,
    segment: Option<TensorId>,
    position: Option<TensorId>,
) -> Result<TensorId> {
    if pad_mask.len() != token_ids.len() {
        return Err(CoreError::contract(format!(
            "input_embedding: mask length {} != {} ids",
            pad_mask.len(),
            token_ids.len()
        )));
    }
    let tok = tape.embed_rows(token, token_ids)?;
    let (Some(segment), Some(position)) = (segment, position) else {
        return Ok(tok);
    };
    let n = token_ids.len();
    let seg = tape.embed_rows(segment, &vec![0; n])?; // single-sentence task
    let pos_ids: Vec<usize> = (0..n).collect();
    let pos = tape.embed_rows(position, &pos_ids)?;
    let sum = tape.add(tok, seg)?;
    tape.add(sum, pos)
}

impl<'m> Bound<'m> {
    /// Tape ids of every parameter, aligned with [`Model::named_params`].
    pub fn param_ids(&self) -> &[TensorId] {
        &self.ordered
    }

    /// Logits for the whole batch, B×num_classes.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(CoreError::contract("forward: empty batch".to_string()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (ids, mask, _) = batch.row(i);
            rows.push(self.forward_row(tape, ids, mask)?);
        }
        tape.stack_rows(&rows)
    }

    /// Logits for one encoded row, 1×num_classes.
    pub fn forward_row(&self, tape: &mut Tape, ids: &[usize], mask: &[bool]) -> Result<TensorId> {
        let cfg = &self.model.config;
        if ids.len() != cfg.text_size || mask.len() != cfg.text_size {
            return Err(CoreError::contract(format!(
                "forward: row has {} ids and {} mask bits, model wants text_size {}",
                ids.len(),
                mask.len(),
                cfg.text_size
            )));
        }
        let n_real = mask.iter().filter(|&&m| m).count();
        if n_real == 0 || !mask.iter().take(n_real).all(|&m| m) {
            return Err(CoreError::contract(
                "forward: mask must be a non-empty prefix of real tokens".to_string(),
            ));
        }

        // real [CLS]…[SEP] prefix only; padding carries no signal
        let ids = &ids[..n_real];
        let ones = vec![true; n_real];
        let mut x = input_embedding(
            tape,
            ids,
            &ones,
            self.params.token,
            self.params.segment,
            self.params.position,
        )?;
        if let Some(blocks) = &self.params.encoder {
            x = encoder_forward(tape, x, blocks, &ones)?;
        }

        let mut feature: Option<TensorId> = None;
        let mut push = |tape: &mut Tape, part: TensorId| -> Result<()> {
            feature = Some(match feature {
                None => part,
                Some(acc) => tape.concat_last(acc, part)?,
            });
            Ok(())
        };

        match &self.params.recurrent {
            Some(BoundRecurrent::Uni(layers)) => {
                let mut cur = x;
                let mut last = None;
                for p in layers {
                    let states = lstm_forward(tape, cur, p)?;
                    last = states.last().copied();
                    cur = tape.stack_rows(&states)?;
                }
                push(tape, last.expect("num_layers ≥ 1"))?;
            }
            Some(BoundRecurrent::Bi(layers)) => {
                let mut cur = x;
                for (fwd, bwd) in &layers[..layers.len() - 1] {
                    cur = bilstm(tape, cur, fwd, bwd)?;
                }
                let (fwd, bwd) = layers.last().expect("num_layers ≥ 1");
                let top = bilstm_full(tape, cur, fwd, bwd)?;
                let pooled = match &self.params.attn_pool {
                    Some(p) => attention_pool(tape, top.sequence, p)?.pooled,
                    None => top.final_states,
                };
                push(tape, pooled)?;
            }
            None => {}
        }
        if let Some(p) = &self.params.dpcnn {
            let out = dpcnn_forward(tape, x, p)?;
            push(tape, out.features)?;
        }
        if let Some(p) = &self.params.text_cnn {
            let out = text_cnn_forward(tape, x, p)?;
            push(tape, out)?;
        }

        let feature = feature.expect("every variant has at least one channel");
        let feature = tape.dropout(feature, cfg.dropout)?;
        let scores = tape.matmul(feature, self.params.classifier_w)?;
        tape.add(scores, self.params.classifier_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode, Vocab};

    fn desk(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            d_model: 8,
            r_hidden: 4,
            num_layers: 2,
            num_filters: 6,
            kernel_size: 3,
            encoder_blocks: variant.uses_encoder().then_some(2),
            encoder_heads: variant.uses_encoder().then_some(2),
            num_classes: 4,
            vocab_size: 12,
            text_size: 10,
            dropout: 0.5,
            seed: 9,
        }
    }

    fn full_batch(cfg: &ModelConfig, rows: usize) -> Batch {
        // every position real, ids cycling over the non-reserved range
        let ids: Vec<Vec<usize>> = (0..rows)
            .map(|r| {
                (0..cfg.text_size)
                    .map(|i| {
                        if i == 0 {
                            Vocab::CLS
                        } else if i == cfg.text_size - 1 {
                            Vocab::SEP
                        } else {
                            4 + (r + i) % (cfg.vocab_size - 4)
                        }
                    })
                    .collect()
            })
            .collect();
        Batch {
            mask: vec![vec![true; cfg.text_size]; rows],
            labels: (0..rows).map(|r| r % cfg.num_classes).collect(),
            token_ids: ids,
        }
    }

    #[test]
    fn dc_ebad_defaults_classifier_width() {
        let mut cfg = ModelConfig::paper_defaults(Variant::DcEbad);
        cfg.vocab_size = 50;
        assert_eq!(cfg.feature_width(), 762);
    }

    #[test]
    fn variant_composition_allocates_only_what_is_needed() {
        let m = build(&desk(Variant::BilstmAt)).unwrap();
        assert!(m.dpcnn.is_none() && m.text_cnn.is_none() && m.encoder.is_none());
        assert!(m.attn_pool.is_some());
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.starts_with("dpcnn") && !n.starts_with("cnn")));
        assert!(names.contains(&"rnn.0.bwd.w_i".to_string()));

        let m = build(&desk(Variant::Cnn)).unwrap();
        assert!(m.recurrent.is_none() && m.attn_pool.is_none() && m.dpcnn.is_none());
        assert!(m.text_cnn.is_some());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = desk(Variant::DcEbad);
        let a = build(&cfg).unwrap();
        let b = build(&cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values(), "tensor {na}");
        }
    }

    #[test]
    fn logits_shape_is_batch_by_classes() {
        for variant in Variant::ALL {
            let cfg = desk(variant);
            let m = build(&cfg).unwrap();
            let logits = m.logits(&full_batch(&cfg, 4)).unwrap();
            assert_eq!(logits.shape(), &[4, cfg.num_classes], "variant {}", variant.name());
        }
    }

    #[test]
    fn shapes_hold_across_batch_and_text_sizes() {
        for &text_size in &[3usize, 32] {
            for &b in &[1usize, 2, 128] {
                let mut cfg = desk(Variant::DcEbad);
                cfg.text_size = text_size;
                cfg.d_model = 4;
                cfg.encoder_blocks = Some(1);
                cfg.num_filters = 3;
                let m = build(&cfg).unwrap();
                let logits = m.logits(&full_batch(&cfg, b)).unwrap();
                assert_eq!(logits.shape(), &[b, cfg.num_classes]);
            }
        }
    }

    #[test]
    fn degenerate_cls_sep_row_stays_finite() {
        for variant in Variant::ALL {
            let cfg = desk(variant);
            let m = build(&cfg).unwrap();
            let vocab_text: Vec<String> = (0..cfg.vocab_size - 4).map(|i| format!("{i}")).collect();
            let _ = vocab_text;
            let row = {
                // [CLS][SEP] then pads
                let mut ids = vec![Vocab::PAD; cfg.text_size];
                ids[0] = Vocab::CLS;
                ids[1] = Vocab::SEP;
                let mask: Vec<bool> = (0..cfg.text_size).map(|i| i < 2).collect();
                (ids, mask)
            };
            let batch = Batch {
                token_ids: vec![row.0],
                mask: vec![row.1],
                labels: vec![0],
            };
            let logits = m.logits(&batch).unwrap();
            assert!(logits.values().iter().all(|v| v.is_finite()), "{}", variant.name());
        }
    }

    #[test]
    fn replayed_forward_is_bitwise_identical() {
        let cfg = desk(Variant::DcEbad);
        let m = build(&cfg).unwrap();
        let batch = full_batch(&cfg, 3);
        let a = m.logits(&batch).unwrap();
        let b = m.logits(&batch).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn every_allocated_parameter_receives_gradient() {
        for variant in Variant::ALL {
            let cfg = desk(variant);
            let m = build(&cfg).unwrap();
            let batch = full_batch(&cfg, 3);
            let mut tape = Tape::new(Mode::Eval); // dropout off: full feature flow
            let bound = m.bind(&mut tape);
            let logits = bound.forward(&mut tape, &batch).unwrap();
            let loss = tape.cross_entropy(logits, &batch.labels).unwrap();
            tape.backward(loss).unwrap();
            let names = m.named_params();
            assert_eq!(names.len(), bound.param_ids().len());
            for ((name, _), &id) in names.iter().zip(bound.param_ids()) {
                let grad = tape.grad(id).unwrap_or_else(|| panic!("{name}: no grad"));
                assert!(
                    grad.iter().any(|&g| g != 0.0),
                    "variant {} param {name} has an all-zero gradient",
                    variant.name()
                );
            }
        }
    }

    #[test]
    fn predict_probabilities_sum_to_one_and_match_argmax() {
        let cfg = desk(Variant::BilstmAtDpcnn);
        let m = build(&cfg).unwrap();
        let batch = full_batch(&cfg, 1);
        let (label, probs) = m.predict(&batch.token_ids[0], &batch.mask[0]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let logits = m.logits(&batch).unwrap();
        assert_eq!(label, argmax(logits.values()));
        assert_eq!(argmax(&probs), argmax(logits.values()));
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0]), 0);
    }

    #[test]
    fn argmax_invariant_under_positive_rescaling() {
        let logits = [0.3, -1.2, 2.5, 0.9, 2.4999];
        for &scale in &[0.1, 1.0, 7.5, 1e6] {
            let scaled: Vec<f64> = logits.iter().map(|v| v * scale).collect();
            assert_eq!(argmax(&scaled), argmax(&logits));
        }
    }

    #[test]
    fn inconsistent_config_is_rejected_by_build() {
        let mut cfg = desk(Variant::Cnn);
        cfg.encoder_blocks = Some(2);
        assert!(build(&cfg).is_err());
    }

    #[test]
    fn out_of_range_token_id_is_an_error() {
        let cfg = desk(Variant::Lstm);
        let m = build(&cfg).unwrap();
        let mut batch = full_batch(&cfg, 1);
        batch.token_ids[0][1] = cfg.vocab_size; // one past the table
        assert!(m.logits(&batch).is_err());
    }

    #[test]
    fn input_embedding_is_sum_of_three_lookups() {
        let cfg = desk(Variant::DcEbad);
        let m = build(&cfg).unwrap();
        let ids = [Vocab::CLS, 4, 5, Vocab::SEP];
        let mask = [true; 4];

        let mut tape = Tape::new(Mode::Eval);
        let bound = m.bind(&mut tape);
        let e = input_embedding(
            &mut tape,
            &ids,
            &mask,
            bound.params.token,
            bound.params.segment,
            bound.params.position,
        )
        .unwrap();
        let got = tape.values(e);

        let tok = m.embedding.token.values();
        let seg = m.embedding.segment.as_ref().unwrap().values();
        let pos = m.embedding.position.as_ref().unwrap().values();
        let d = cfg.d_model;
        for (t, &id) in ids.iter().enumerate() {
            for j in 0..d {
                let want = tok[id * d + j] + seg[j] + pos[t * d + j];
                assert!((got[t * d + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn token_rows_shift_logits_linearly_in_the_embedding() {
        // two different tokens at the same position differ exactly by their
        // token-embedding rows at the embedding layer
        let cfg = desk(Variant::DcEbad);
        let m = build(&cfg).unwrap();
        let mask = [true; 3];
        let mut tape = Tape::new(Mode::Eval);
        let bound = m.bind(&mut tape);
        let a = input_embedding(&mut tape, &[Vocab::CLS, 4, Vocab::SEP], &mask, bound.params.token, bound.params.segment, bound.params.position).unwrap();
        let b = input_embedding(&mut tape, &[Vocab::CLS, 5, Vocab::SEP], &mask, bound.params.token, bound.params.segment, bound.params.position).unwrap();
        let d = cfg.d_model;
        let tok = m.embedding.token.values();
        for j in 0..d {
            let diff = tape.values(a)[d + j] - tape.values(b)[d + j];
            let want = tok[4 * d + j] - tok[5 * d + j];
            assert!((diff - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroed_tables_embed_to_zero() {
        let cfg = desk(Variant::DcEbad);
        let mut m = build(&cfg).unwrap();
        let d = cfg.d_model;
        m.embedding.token = Tensor::zeros(&[cfg.vocab_size, d]);
        m.embedding.segment = Some(Tensor::zeros(&[1, d]));
        m.embedding.position = Some(Tensor::zeros(&[cfg.text_size, d]));
        let mut tape = Tape::new(Mode::Eval);
        let bound = m.bind(&mut tape);
        let e = input_embedding(&mut tape, &[Vocab::CLS, 4, Vocab::SEP], &[true; 3], bound.params.token, bound.params.segment, bound.params.position).unwrap();
        assert!(tape.values(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dpcnn_channel_zeroed_matches_single_channel_twin() {
        // dc_ebad with the conv channel's classifier rows zeroed must equal
        // enc_bilstm_at sharing the same remaining parameters
        let dc_cfg = desk(Variant::DcEbad);
        let dual = build(&dc_cfg).unwrap();
        let mut single_cfg = dc_cfg.clone();
        single_cfg.variant = Variant::EncBilstmAt;
        let mut single = build(&single_cfg).unwrap();

        let r2 = 2 * dc_cfg.r_hidden;
        let k = dc_cfg.num_classes;
        {
            let dual_params: std::collections::HashMap<String, Tensor> = dual
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            for (name, tensor) in single.named_params_mut() {
                if name == "classifier.w" {
                    let src = &dual_params["classifier.w"];
                    tensor.values_mut().copy_from_slice(&src.values()[..r2 * k]);
                } else {
                    tensor.values_mut().copy_from_slice(dual_params[&name].values());
                }
            }
        }
        let mut dual = dual;
        {
            let mut params = dual.named_params_mut();
            let w = params.iter_mut().find(|(n, _)| n == "classifier.w").unwrap();
            for v in &mut w.1.values_mut()[r2 * k..] {
                *v = 0.0;
            }
        }

        let batch = full_batch(&dc_cfg, 3);
        let a = dual.logits(&batch).unwrap();
        let b = single.logits(&batch).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn encode_integrates_with_forward() {
        let examples = vec![
            crate::data::Example { text: "abcde".into(), label: 0 },
            crate::data::Example { text: "fffff".into(), label: 1 },
        ];
        let vocab = crate::data::build_vocab(&examples, 1).unwrap();
        let mut cfg = desk(Variant::DcEbad);
        cfg.vocab_size = vocab.len();
        cfg.num_classes = 2;
        let m = build(&cfg).unwrap();
        let row = encode("abf", &vocab, cfg.text_size).unwrap();
        let (label, probs) = m.predict(&row.ids, &row.mask).unwrap();
        assert!(label < 2);
        assert_eq!(probs.len(), 2);
    }
}
