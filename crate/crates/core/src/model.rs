//! The full network: encoder, stacked blocks and the two decoders.
//!
//! Parameters are registered in a fixed order (encoder, blocks, embedding
//! decoder, label decoder), so the first `backbone_len` entries of the store
//! are exactly the part shared with the EMA teacher.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, TaskKind};
use crate::encoder::{encode, EncoderParams};
pub use crate::mart::Mode;
use crate::mart::{
    batch_bias, dropout, key_weights, mart_forward, BlockInputs, KeyPooling, LinearParams, MartBlockParams, NormParams,
};
use crate::rng::{self, SmartRng};
use crate::{Error, ParamId, ParamStore, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vars: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub key_pooling: KeyPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vars: 8,
            dim: 32,
            heads: 4,
            layers: 2,
            ff_mult: 4,
            dropout: 0.1,
            key_pooling: KeyPooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vars == 0 || self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::invalid("vars, layers and ff_mult must be positive"));
        }
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "dim must be even and positive, got {}",
                self.dim
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Reduced model variants. All false is the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Drops the mask channel, the temporal bias and the observed-only keys.
    pub no_mask: bool,
    pub no_mask_encoder: bool,
    pub no_mask_temporal: bool,
    pub no_mask_variable: bool,
    pub no_temporal_attention: bool,
    pub no_variable_attention: bool,
    /// No summary row; the last valid step is the query and prediction input.
    pub no_cls: bool,
    pub no_pretrain: bool,
    /// Pre-training reconstructs removed raw values instead of teacher states.
    pub impute_input_space: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_pretrain && self.impute_input_space {
            return Err(Error::invalid(
                "impute_input_space changes pre-training, which no_pretrain disables",
            ));
        }
        if self.no_temporal_attention && self.no_variable_attention {
            return Err(Error::invalid("at least one attention sublayer must remain"));
        }
        Ok(())
    }

    pub fn mask_channel(&self) -> bool {
        !self.no_mask && !self.no_mask_encoder
    }

    pub fn temporal_bias(&self) -> bool {
        !self.no_mask && !self.no_mask_temporal
    }

    pub fn observed_keys(&self) -> bool {
        !self.no_mask && !self.no_mask_variable
    }

    /// Short label used in result tables.
    pub fn variant_name(&self) -> &'static str {
        let set = [
            (self.no_mask, "w/o mask"),
            (self.no_mask_encoder, "w/o mask in encoder"),
            (self.no_mask_temporal, "w/o mask in temporal attention"),
            (self.no_mask_variable, "w/o mask in variable attention"),
            (self.no_temporal_attention, "w/o temporal attention"),
            (self.no_variable_attention, "w/o variable attention"),
            (self.no_cls, "w/o CLS vector"),
            (self.no_pretrain, "w/o pre-training"),
            (self.impute_input_space, "w/ imputation"),
        ];
        let mut on = set.iter().filter(|(f, _)| *f);
        match (on.next(), on.next()) {
            (None, _) => "full",
            (Some((_, name)), None) => name,
            _ => "custom",
        }
    }
}

/// Two-layer MLP applied to every hidden cell during pre-training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingDecoder {
    pub hidden: LinearParams,
    pub out: LinearParams,
    pub out_dim: usize,
}

impl EmbeddingDecoder {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.hidden.weight, self.hidden.bias, self.out.weight, self.out.bias]
    }
}

/// `LN -> Linear(vars*dim -> dim) -> LN -> GELU -> Dropout -> Linear(dim -> outputs)`
/// on the flattened summary row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelDecoder {
    pub norm_in: NormParams,
    pub proj: LinearParams,
    pub norm_hidden: NormParams,
    pub out: LinearParams,
}

#[derive(Debug, Clone)]
pub struct MartModel {
    pub config: ModelConfig,
    pub ablation: AblationFlags,
    pub task: TaskKind,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub blocks: Vec<MartBlockParams>,
    pub backbone_len: usize,
    pub embedding_decoder: EmbeddingDecoder,
    pub label_decoder: LabelDecoder,
}

/// Backbone output for a batch.
#[derive(Debug)]
pub struct Representation {
    /// `[batch, rows, vars, dim]`
    pub s: Var,
    /// `[batch, rows, vars]`, 1 where observed (summary row included).
    pub mask: Tensor,
    /// 1 when the summary row is present.
    pub row_offset: usize,
    /// Row read by the variable-attention query and the label decoder.
    pub query_rows: Vec<usize>,
}

impl MartModel {
    pub fn new(config: ModelConfig, ablation: AblationFlags, task: TaskKind, seed: u64) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        if task.outputs() == 0 {
            return Err(Error::invalid("task has no outputs"));
        }
        let mut rng = rng::stream(seed, &[rng::tags::INIT]);
        let mut store = ParamStore::new();
        let (n, d) = (config.vars, config.dim);
        let encoder = EncoderParams::init(&mut store, n, d, !ablation.no_cls, &mut rng)?;
        let blocks = (0..config.layers)
            .map(|l| MartBlockParams::init(&mut store, &format!("block.{l}"), d, config.ff_mult, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let backbone_len = store.len();
        let out_dim = if ablation.impute_input_space { 1 } else { d };
        let embedding_decoder = EmbeddingDecoder {
            hidden: LinearParams::init(&mut store, "embedding_decoder.hidden", d, d, &mut rng)?,
            out: LinearParams::init(&mut store, "embedding_decoder.out", d, out_dim, &mut rng)?,
            out_dim,
        };
        let label_decoder = LabelDecoder {
            norm_in: NormParams::init(&mut store, "label_decoder.norm_in", n * d)?,
            proj: LinearParams::init(&mut store, "label_decoder.proj", n * d, d, &mut rng)?,
            norm_hidden: NormParams::init(&mut store, "label_decoder.norm_hidden", d)?,
            // zero output layer: an untrained model scores every record alike
            out: LinearParams::zeros(&mut store, "label_decoder.out", d, task.outputs())?,
        };
        Ok(MartModel {
            config,
            ablation,
            task,
            store,
            encoder,
            blocks,
            backbone_len,
            embedding_decoder,
            label_decoder,
        })
    }

    /// Ids of the encoder and block parameters.
    pub fn backbone_ids(&self) -> impl Iterator<Item = ParamId> {
        self.store.ids().take(self.backbone_len)
    }

    /// A frozen copy of the backbone, the initial EMA teacher.
    pub fn teacher(&self) -> ParamStore {
        let mut t = self.store.prefix(self.backbone_len);
        let ids: Vec<ParamId> = t.ids().collect();
        t.set_trainable(ids, false);
        t
    }

    /// Run encoder and blocks with parameters from `params`, which is either
    /// `self.store` or a teacher holding the same backbone layout.
    pub fn backbone(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        values: &Tensor,
        mask: &Tensor,
        lengths: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Representation> {
        if params.len() < self.backbone_len {
            return Err(Error::TreeMismatch(format!(
                "backbone needs {} parameters, got {}",
                self.backbone_len,
                params.len()
            )));
        }
        if lengths.len() != values.shape().first().copied().unwrap_or(0) || lengths.contains(&0) {
            return Err(Error::invalid("one positive length per batch element is required"));
        }
        let hidden = encode(tape, params, &self.encoder, values, mask, self.ablation.mask_channel())?;
        let valid: Vec<usize> = lengths.iter().map(|l| l + hidden.row_offset).collect();
        let query_rows: Vec<usize> = if hidden.row_offset == 1 {
            alloc::vec![0; lengths.len()]
        } else {
            lengths.iter().map(|l| l - 1).collect()
        };
        let bias = batch_bias(&hidden.mask, &valid, self.ablation.temporal_bias())?;
        let kw = key_weights(
            &hidden.mask,
            &valid,
            self.ablation.observed_keys(),
            self.config.key_pooling,
        )?;
        let inputs = BlockInputs {
            bias: &bias,
            key_weights: &kw,
            query_rows: &query_rows,
            heads: self.config.heads,
            dropout: self.config.dropout,
            temporal: !self.ablation.no_temporal_attention,
            variable: !self.ablation.no_variable_attention,
        };
        let s = mart_forward(tape, params, &self.blocks, hidden.h, &inputs, mode)?;
        Ok(Representation {
            s,
            mask: hidden.mask,
            row_offset: hidden.row_offset,
            query_rows,
        })
    }

    /// Pre-training head: per-cell reconstruction `[batch, rows, vars, out_dim]`.
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        values: &Tensor,
        mask: &Tensor,
        lengths: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Representation)> {
        let rep = self.backbone(tape, &self.store, values, mask, lengths, mode)?;
        let dec = &self.embedding_decoder;
        let a = dec.hidden.forward(tape, &self.store, rep.s)?;
        let a = tape.gelu(a)?;
        let out = dec.out.forward(tape, &self.store, a)?;
        Ok((out, rep))
    }

    /// Task logits `[batch, outputs]`.
    pub fn classify(
        &self,
        tape: &mut Tape,
        values: &Tensor,
        mask: &Tensor,
        lengths: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let rep = self.backbone(tape, &self.store, values, mask, lengths, mode)?;
        let (n, d) = (self.config.vars, self.config.dim);
        let pooled = tape.gather_rows(rep.s, &rep.query_rows)?;
        let flat = tape.reshape(pooled, &[lengths.len(), n * d])?;
        let dec = &self.label_decoder;
        let x = dec.norm_in.forward(tape, &self.store, flat)?;
        let x = dec.proj.forward(tape, &self.store, x)?;
        let x = dec.norm_hidden.forward(tape, &self.store, x)?;
        let x = tape.gelu(x)?;
        let x = dropout(tape, x, self.config.dropout, mode)?;
        dec.out.forward(tape, &self.store, x)
    }

    pub fn classify_batch(&self, tape: &mut Tape, batch: &Batch, mode: &mut Mode<'_>) -> Result<Var> {
        self.check_batch(batch)?;
        self.classify(tape, &batch.values, &batch.mask, &batch.lengths, mode)
    }

    /// Class probabilities in eval mode, one row per record.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let logits = self.classify_batch(&mut tape, batch, &mut Mode::Eval)?;
        let width = self.task.outputs();
        let rows = tape.value(logits).data().chunks_exact(width);
        Ok(match self.task {
            TaskKind::MultiClass { .. } => rows
                .map(|r| {
                    let mut p = r.to_vec();
                    crate::tape::softmax_in_place(&mut p);
                    p
                })
                .collect(),
            _ => rows
                .map(|r| r.iter().map(|&z| crate::math::sigmoid(z)).collect())
                .collect(),
        })
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.vars() != self.config.vars {
            return Err(Error::shape("batch", batch.values.shape(), &[self.config.vars]));
        }
        if let Some(bad) = batch.labels.iter().find(|l| !self.task.accepts(l)) {
            return Err(Error::invalid(format!(
                "label {bad:?} does not fit task {:?}",
                self.task
            )));
        }
        Ok(())
    }
}

/// Dropout stream for one micro-batch.
pub fn dropout_rng(seed: u64, stage: u64, epoch: usize, step: usize, chunk: usize) -> SmartRng {
    rng::stream(
        seed,
        &[rng::tags::DROPOUT, stage, epoch as u64, step as u64, chunk as u64],
    )
}
