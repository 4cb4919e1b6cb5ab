use std::fmt;

use serde::Serialize;

use super::config::Variant;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub block: String,
    pub layer: String,
    /// Per-sample output shape.
    pub output: Vec<usize>,
    /// All parameters owned by the layer, moving statistics included.
    pub params: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerReport {
    pub variant: Variant,
    pub rows: Vec<LayerRow>,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl LayerReport {
    pub fn new(variant: Variant, rows: Vec<LayerRow>) -> Self {
        let trainable = rows.iter().map(|r| r.trainable).sum();
        let total: usize = rows.iter().map(|r| r.params).sum();
        LayerReport {
            variant,
            rows,
            trainable,
            non_trainable: total - trainable,
        }
    }

    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }

    pub fn row(&self, layer: &str) -> Option<&LayerRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    /// Cell-by-cell comparison with the reference architecture table.
    /// Returns one message per differing cell; empty means an exact match.
    pub fn compare_reference(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rows.len() != REFERENCE.len() {
            out.push(format!(
                "row count: expected {}, got {}",
                REFERENCE.len(),
                self.rows.len()
            ));
        }
        for (i, (row, &(block, layer, shape, params))) in self.rows.iter().zip(REFERENCE).enumerate() {
            let label = format!("row {i} ({block} / {layer})");
            if row.block != block || row.layer != layer {
                out.push(format!("{label}: got layer {} / {}", row.block, row.layer));
            }
            if row.output != shape {
                out.push(format!("{label}: output expected {shape:?}, got {:?}", row.output));
            }
            if row.params != params {
                out.push(format!("{label}: params expected {params}, got {}", row.params));
            }
        }
        if self.trainable != REFERENCE_TRAINABLE {
            out.push(format!(
                "trainable total: expected {REFERENCE_TRAINABLE}, got {}",
                self.trainable
            ));
        }
        if self.total() != REFERENCE_TOTAL {
            out.push(format!("total: expected {REFERENCE_TOTAL}, got {}", self.total()));
        }
        out
    }
}

/// Reference layer table: block, layer, per-sample output shape, params.
pub const REFERENCE: &[(&str, &str, &[usize], usize)] = &[
    ("Input", "Concatenated HbO2 + HbR", &[28, 150, 1], 0),
    ("Spatial-Temporal", "Spatial Conv2D", &[1, 150, 40], 1120),
    ("Spatial-Temporal", "Layer Normalization", &[1, 150, 40], 80),
    ("Spatial-Temporal", "Squared Activation", &[1, 150, 40], 0),
    ("Spatial-Temporal", "Temporal Conv2D", &[1, 146, 60], 12000),
    ("Spatial-Temporal", "Layer Normalization", &[1, 146, 60], 120),
    ("Spatial-Temporal", "Absolute Activation", &[1, 146, 60], 0),
    ("Temporal-Spatial", "Temporal Conv2D", &[28, 146, 20], 100),
    ("Temporal-Spatial", "Layer Normalization", &[28, 146, 20], 40),
    ("Temporal-Spatial", "Squared Activation", &[28, 146, 20], 0),
    ("Temporal-Spatial", "Spatial Conv2D", &[1, 146, 60], 33600),
    ("Temporal-Spatial", "Layer Normalization", &[1, 146, 60], 120),
    ("Temporal-Spatial", "Absolute Activation", &[1, 146, 60], 0),
    ("Concatenation", "Concatenation", &[1, 146, 120], 0),
    ("Concatenation", "Batch Normalization", &[1, 146, 120], 480),
    ("Fusion Block 1", "Separable Conv2D", &[1, 146, 10], 1560),
    ("Fusion Block 1", "Layer Normalization", &[1, 146, 10], 20),
    ("Fusion Block 1", "Absolute Activation", &[1, 146, 10], 0),
    ("Fusion Block 2", "Average Pooling 2D", &[1, 16, 10], 0),
    ("Fusion Block 2", "Logarithmic Activation", &[1, 16, 10], 0),
    ("Fusion Block 2", "Dropout", &[1, 16, 10], 0),
    ("Classification Head", "Dense (Absolute Activation)", &[1, 16, 2], 22),
    ("Classification Head", "Flatten", &[32], 0),
    ("Classification Head", "Dense (Softmax)", &[2], 66),
];

pub const REFERENCE_TRAINABLE: usize = 49_088;
pub const REFERENCE_TOTAL: usize = 49_328;

fn shape(s: &[usize]) -> String {
    let inner: Vec<String> = s.iter().map(|d| d.to_string()).collect();
    if s.len() == 1 {
        format!("({},)", inner[0])
    } else {
        format!("({})", inner.join(", "))
    }
}

impl fmt::Display for LayerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant: {}", self.variant.name())?;
        writeln!(f, "{:<20} {:<28} {:<16} {:>8}", "block", "layer", "output", "params")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<20} {:<28} {:<16} {:>8}",
                r.block,
                r.layer,
                shape(&r.output),
                r.params
            )?;
        }
        writeln!(f, "trainable params: {}", self.trainable)?;
        writeln!(f, "non-trainable params: {}", self.non_trainable)?;
        write!(f, "total params: {}", self.total())
    }
}
