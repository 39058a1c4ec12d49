use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::layer_table;
use crate::{Error, Result};

/// Weight storage precision of one layer. Integer variants are grouped
/// symmetric codes; `Fp16`/`Fp32` are full-precision passthrough.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    W3,
    W4,
    W6,
    W8,
    Fp16,
    Fp32,
}

impl Precision {
    pub const ALL: [Precision; 6] = [
        Precision::W3,
        Precision::W4,
        Precision::W6,
        Precision::W8,
        Precision::Fp16,
        Precision::Fp32,
    ];

    pub fn bits(self) -> u32 {
        match self {
            Precision::W3 => 3,
            Precision::W4 => 4,
            Precision::W6 => 6,
            Precision::W8 => 8,
            Precision::Fp16 => 16,
            Precision::Fp32 => 32,
        }
    }

    pub fn is_int(self) -> bool {
        !matches!(self, Precision::Fp16 | Precision::Fp32)
    }

    /// Integer bit width, `None` for passthrough.
    pub fn int_bits(self) -> Option<u8> {
        self.is_int().then(|| self.bits() as u8)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Precision::W3 => "w3",
            Precision::W4 => "w4",
            Precision::W6 => "w6",
            Precision::W8 => "w8",
            Precision::Fp16 => "fp16",
            Precision::Fp32 => "fp32",
        };
        f.write_str(s)
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Precision::ALL
            .into_iter()
            .find(|p| p.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown precision `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer_id: String,
    pub precision: Precision,
    pub group_size: usize,
    /// Frozen layers are never mutated or downgraded by any search.
    #[serde(default)]
    pub frozen: bool,
}

/// Per-layer weight precision and group size, in model layer order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitPlan {
    pub layers: Vec<LayerAssignment>,
}

impl BitPlan {
    /// Same precision and group for every layer, nothing frozen.
    pub fn uniform(precision: Precision, group_size: usize) -> Self {
        Self {
            layers: layer_table()
                .into_iter()
                .map(|l| LayerAssignment {
                    layer_id: l.id,
                    precision,
                    group_size,
                    frozen: false,
                })
                .collect(),
        }
    }

    pub fn get(&self, layer_id: &str) -> Option<&LayerAssignment> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Checks that the plan covers every model layer exactly once, in order.
    pub fn validate(&self) -> Result<()> {
        let table = layer_table();
        let expected: Vec<&str> = table.iter().map(|l| l.id.as_str()).collect();
        let found: Vec<&str> = self.layers.iter().map(|l| l.layer_id.as_str()).collect();
        if expected != found {
            let missing: Vec<_> = expected.iter().filter(|e| !found.contains(e)).collect();
            let extra: Vec<_> = found.iter().filter(|f| !expected.contains(f)).collect();
            return Err(Error::invalid(format!(
                "plan/model layer mismatch: missing {missing:?}, unexpected {extra:?}, \
                 {} entries for {} layers",
                found.len(),
                expected.len()
            )));
        }
        if let Some(l) = self.layers.iter().find(|l| l.group_size == 0) {
            return Err(Error::invalid(format!("layer `{}` has group size 0", l.layer_id)));
        }
        Ok(())
    }

    pub fn count(&self, precision: Precision) -> usize {
        self.layers.iter().filter(|l| l.precision == precision).count()
    }
}
