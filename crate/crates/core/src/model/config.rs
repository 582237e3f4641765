//! Declarative architecture description for the nine model variants.

use serde::{Deserialize, Serialize};

use crate::layers::{TEXT_CNN_FILTERS, TEXT_CNN_WIDTHS};
use crate::{CoreError, Result};

/// The model zoo: the dual-channel network and its ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lstm,
    Cnn,
    Dpcnn,
    Bilstm,
    BilstmAt,
    BilstmAtDpcnn,
    EncBilstmAt,
    EncDpcnn,
    DcEbad,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Lstm,
        Variant::Cnn,
        Variant::Dpcnn,
        Variant::Bilstm,
        Variant::BilstmAt,
        Variant::BilstmAtDpcnn,
        Variant::EncBilstmAt,
        Variant::EncDpcnn,
        Variant::DcEbad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Cnn => "cnn",
            Variant::Dpcnn => "dpcnn",
            Variant::Bilstm => "bilstm",
            Variant::BilstmAt => "bilstm_at",
            Variant::BilstmAtDpcnn => "bilstm_at_dpcnn",
            Variant::EncBilstmAt => "enc_bilstm_at",
            Variant::EncDpcnn => "enc_dpcnn",
            Variant::DcEbad => "dc_ebad",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.name() == name)
    }

    /// Whether the contextual encoder front-end is part of this variant.
    pub fn uses_encoder(self) -> bool {
        matches!(self, Variant::EncBilstmAt | Variant::EncDpcnn | Variant::DcEbad)
    }

    pub fn uses_recurrent(self) -> bool {
        !matches!(self, Variant::Cnn | Variant::Dpcnn | Variant::EncDpcnn)
    }

    pub fn bidirectional(self) -> bool {
        self.uses_recurrent() && self != Variant::Lstm
    }

    pub fn uses_attention_pool(self) -> bool {
        matches!(
            self,
            Variant::BilstmAt | Variant::BilstmAtDpcnn | Variant::EncBilstmAt | Variant::DcEbad
        )
    }

    pub fn uses_dpcnn(self) -> bool {
        matches!(
            self,
            Variant::Dpcnn | Variant::BilstmAtDpcnn | Variant::EncDpcnn | Variant::DcEbad
        )
    }

    pub fn uses_text_cnn(self) -> bool {
        self == Variant::Cnn
    }
}

/// Fully resolved architecture parameters.
///
/// `encoder_blocks`/`encoder_heads` must be present exactly when the variant
/// uses the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub r_hidden: usize,
    pub num_layers: usize,
    pub num_filters: usize,
    pub kernel_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_heads: Option<usize>,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub text_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Published defaults: hidden 768, r_hidden 256, 2 layers, 250 filters of
    /// width 3, text_size 32, dropout 0.5; encoder stand-in of 2 blocks with
    /// 12 heads. `vocab_size` and `num_classes` come from the data.
    pub fn paper_defaults(variant: Variant) -> Self {
        ModelConfig {
            variant,
            d_model: 768,
            r_hidden: 256,
            num_layers: 2,
            num_filters: 250,
            kernel_size: 3,
            encoder_blocks: variant.uses_encoder().then_some(2),
            encoder_heads: variant.uses_encoder().then_some(12),
            num_classes: 10,
            vocab_size: 0,
            text_size: 32,
            dropout: 0.5,
            seed: 1,
        }
    }

    /// Feed-forward inner width of the encoder stand-in.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Classifier input width: the concatenation of every channel output.
    pub fn feature_width(&self) -> usize {
        let mut width = 0;
        if self.variant.uses_recurrent() {
            width += if self.variant.bidirectional() { 2 * self.r_hidden } else { self.r_hidden };
        }
        if self.variant.uses_dpcnn() {
            width += self.num_filters;
        }
        if self.variant.uses_text_cnn() {
            width += TEXT_CNN_FILTERS * TEXT_CNN_WIDTHS.len();
        }
        width
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if self.text_size < 3 {
            return fail(format!("text_size {} < 3", self.text_size));
        }
        if self.d_model == 0 || self.r_hidden == 0 || self.num_layers == 0 {
            return fail("d_model, r_hidden and num_layers must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} < 2", self.num_classes));
        }
        if self.vocab_size < 5 {
            return fail(format!(
                "vocab_size {} leaves no real tokens beyond the 4 reserved ids",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.variant.uses_encoder() {
            let (Some(blocks), Some(heads)) = (self.encoder_blocks, self.encoder_heads) else {
                return fail(format!(
                    "variant {} needs encoder_blocks and encoder_heads",
                    self.variant.name()
                ));
            };
            if blocks == 0 {
                return fail("encoder_blocks must be ≥ 1".into());
            }
            if heads == 0 || self.d_model % heads != 0 {
                return fail(format!("{heads} heads do not divide d_model {}", self.d_model));
            }
        } else if self.encoder_blocks.is_some() || self.encoder_heads.is_some() {
            return fail(format!(
                "variant {} takes no encoder fields",
                self.variant.name()
            ));
        }
        if self.variant.uses_dpcnn() {
            if self.num_filters == 0 {
                return fail("num_filters must be ≥ 1".into());
            }
            if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
                return fail(format!(
                    "kernel_size {} must be odd for equal-width convolution",
                    self.kernel_size
                ));
            }
        }
        Ok(())
    }
}
