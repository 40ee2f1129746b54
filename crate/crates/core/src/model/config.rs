use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Single-step decoder with value, pointer and mask-update heads.
    Nee,
    /// Autoregressive encoder-decoder baseline.
    Seq2seq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// `q . k / sqrt(d)`
    DotProduct,
    /// `w . tanh(q + k)` over projected queries and keys.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputEncoding {
    /// One logit per output bit plus an end logit.
    Binary,
    /// One class per number plus the end token.
    OneHot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// Independent learned vector per number.
    OneHot,
    /// Learned bitwise embedding `sum_i x_i v_i`.
    Binary,
    /// Bits and end flag fed directly, zero-padded to the model width.
    RawBits,
}

/// The six architectural modifications that can be switched independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Toggles {
    /// C1: residual skip scaled by 1.5 instead of 1.
    pub residual: bool,
    /// C2: MLP attention scores instead of scaled dot product.
    pub mlp_attention: bool,
    /// C3: average the score with its argument-swapped counterpart.
    pub symmetric: bool,
    /// C4: one projection shared by queries, keys and values.
    pub shared_projection: bool,
    /// C5: binary input embedding instead of one-hot.
    pub binary_input: bool,
    /// C6: binary input without any embedding matrix.
    pub raw_bits: bool,
}

impl Toggles {
    pub const NAMES: [&'static str; 6] = ["C1", "C2", "C3", "C4", "C5", "C6"];

    /// C1 to C5 on.
    pub fn all_mod() -> Self {
        Self {
            residual: true,
            mlp_attention: true,
            symmetric: true,
            shared_projection: true,
            binary_input: true,
            raw_bits: false,
        }
    }

    pub fn vanilla() -> Self {
        Self::default()
    }

    pub fn get(&self, index: usize) -> bool {
        self.as_array()[index]
    }

    pub fn set(&mut self, index: usize, on: bool) {
        let slot = match index {
            0 => &mut self.residual,
            1 => &mut self.mlp_attention,
            2 => &mut self.symmetric,
            3 => &mut self.shared_projection,
            4 => &mut self.binary_input,
            5 => &mut self.raw_bits,
            _ => panic!("toggle index {index} out of range"),
        };
        *slot = on;
    }

    pub fn with(mut self, index: usize, on: bool) -> Self {
        self.set(index, on);
        self
    }

    pub fn as_array(&self) -> [bool; 6] {
        [
            self.residual,
            self.mlp_attention,
            self.symmetric,
            self.shared_projection,
            self.binary_input,
            self.raw_bits,
        ]
    }

    /// Parses names like `all_mod`, `vanilla`, `all_mod-C5`, `vanilla+C6`.
    pub fn from_variant(name: &str) -> Result<Self, String> {
        let (base, rest) = if let Some(r) = name.strip_prefix("all_mod") {
            (Self::all_mod(), r)
        } else if let Some(r) = name.strip_prefix("vanilla") {
            (Self::vanilla(), r)
        } else {
            return Err(format!("unknown variant {name:?}"));
        };
        let mut t = base;
        let mut chars = rest;
        while !chars.is_empty() {
            let on = match chars.as_bytes()[0] {
                b'+' => true,
                b'-' => false,
                _ => return Err(format!("bad variant modifier in {name:?}")),
            };
            let idx = Self::NAMES
                .iter()
                .position(|n| chars[1..].starts_with(n))
                .ok_or_else(|| format!("bad toggle in {name:?}"))?;
            t.set(idx, on);
            chars = &chars[3..];
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModelMode,
    /// Input bit width.
    pub width: u32,
    /// Output bit width (twice the input width for multiplication).
    pub output_width: u32,
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub mask_kernel: usize,
    pub mask_filters: usize,
    pub toggles: Toggles,
    pub output: OutputEncoding,
    pub bit_threshold: f64,
    pub mask_threshold: f64,
}

impl ModelConfig {
    /// Layer counts and widths used for the full-size experiments.
    pub fn paper(mode: ModelMode, width: u32, dim: usize) -> Self {
        Self {
            mode,
            width,
            output_width: width,
            dim,
            encoder_layers: 6,
            decoder_layers: 6,
            ffn_hidden: 128,
            dropout: 0.1,
            mask_kernel: 3,
            mask_filters: 16,
            toggles: Toggles::all_mod(),
            output: OutputEncoding::Binary,
            bit_threshold: 0.5,
            mask_threshold: 0.5,
        }
    }

    /// Same architecture with 3 + 3 layers.
    pub fn desk(mode: ModelMode, width: u32, dim: usize) -> Self {
        Self { encoder_layers: 3, decoder_layers: 3, ..Self::paper(mode, width, dim) }
    }

    pub fn sort_nee() -> Self {
        Self::desk(ModelMode::Nee, 8, 16)
    }

    pub fn add_nee() -> Self {
        Self::desk(ModelMode::Nee, 8, 24)
    }

    pub fn multiply_nee() -> Self {
        Self { output_width: 24, ..Self::desk(ModelMode::Nee, 12, 28) }
    }

    pub fn seq2seq_baseline() -> Self {
        Self { output: OutputEncoding::OneHot, ..Self::desk(ModelMode::Seq2seq, 8, 16) }
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn residual_scale(&self) -> f64 {
        if self.toggles.residual {
            1.5
        } else {
            1.0
        }
    }

    pub fn attention(&self) -> AttentionKind {
        if self.toggles.mlp_attention {
            AttentionKind::Mlp
        } else {
            AttentionKind::DotProduct
        }
    }

    pub fn input_encoding(&self) -> InputEncoding {
        match (self.toggles.raw_bits, self.toggles.binary_input) {
            (true, _) => InputEncoding::RawBits,
            (false, true) => InputEncoding::Binary,
            (false, false) => InputEncoding::OneHot,
        }
    }

    /// Number of output classes (one-hot) or logits (binary, bits + end).
    pub fn output_size(&self) -> usize {
        match self.output {
            OutputEncoding::Binary => self.output_width as usize + 1,
            OutputEncoding::OneHot => (1usize << self.output_width) + 1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.width > 16 || self.output_width < self.width || self.output_width > 32 {
            return Err(format!("unsupported widths {} -> {}", self.width, self.output_width));
        }
        if self.output == OutputEncoding::OneHot && self.output_width > 12 {
            return Err("one-hot outputs are limited to 12 bits".into());
        }
        if self.input_encoding() == InputEncoding::OneHot && self.width > 12 {
            return Err("one-hot inputs are limited to 12 bits".into());
        }
        if self.input_encoding() == InputEncoding::RawBits && self.dim < self.width as usize + 1 {
            return Err(format!("raw bits need dim >= {}", self.width + 1));
        }
        if self.dim == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn_hidden == 0 {
            return Err("zero-sized model".into());
        }
        if self.mask_kernel % 2 == 0 || self.mask_filters == 0 {
            return Err("mask kernel must be odd with at least one filter".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
