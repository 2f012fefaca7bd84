use std::fmt::Write;

use dqrm_core::model::{histogram_edges, weight_histogram, FrozenDlrm, StoredTensor};

use crate::error::{Error, Result};
use crate::format::export_size;

/// `bin_low bin_high count` per line.
pub fn histogram_text(counts: &[u64], lo: f64, hi: f64) -> String {
    let edges = histogram_edges(counts.len(), lo, hi);
    let mut out = String::new();
    for (i, c) in counts.iter().enumerate() {
        let high = if i + 1 < edges.len() { edges[i + 1] } else { hi };
        writeln!(out, "{} {} {}", edges[i], high, c).unwrap();
    }
    out
}

/// Symmetric range covering every value, never empty.
pub fn symmetric_range(values: &[f32]) -> (f64, f64) {
    let m = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let m = if m > 0.0 { f64::from(m) } else { 1.0 };
    (-m, m)
}

/// Histogram of the stored (dequantized) weights of one table.
pub fn table_histogram(model: &FrozenDlrm, table: usize, bins: usize, range: Option<(f64, f64)>) -> Result<String> {
    let t = model
        .tables
        .get(table)
        .ok_or_else(|| Error::Config(format!("no table {table} (model has {})", model.tables.len())))?;
    let values = t.data.decode(t.rows, t.dim);
    let (lo, hi) = range.unwrap_or_else(|| symmetric_range(&values));
    let counts = weight_histogram(&values, bins, lo, hi)?;
    Ok(histogram_text(&counts, lo, hi))
}

fn tensor_kind(t: &StoredTensor) -> String {
    match t {
        StoredTensor::Float(_) => "fp32".into(),
        StoredTensor::Quantized { bits, scales, .. } => format!("int{} ({} scales)", bits.get(), scales.len()),
    }
}

pub fn summary_text(model: &FrozenDlrm) -> String {
    let c = &model.config;
    let mut out = String::new();
    writeln!(out, "dense_in {}", c.dense_in).unwrap();
    writeln!(out, "embed_dim {}", c.embed_dim).unwrap();
    writeln!(out, "bottom_mlp {:?}", c.bottom_arch).unwrap();
    writeln!(out, "top_mlp {:?}", c.top_arch).unwrap();
    writeln!(out, "mlp_parameters {}", c.mlp_parameter_count()).unwrap();
    writeln!(out, "embedding_parameters {}", c.embedding_parameter_count()).unwrap();
    writeln!(out, "file_bytes {}", export_size(c)).unwrap();
    for (i, t) in model.tables.iter().enumerate() {
        writeln!(out, "table {i} rows {} {}", t.rows, tensor_kind(&t.data)).unwrap();
    }
    for (name, layers) in [("bottom", &model.bottom), ("top", &model.top)] {
        for (i, l) in layers.iter().enumerate() {
            writeln!(out, "{name} {i} {}x{} {}", l.out_dim, l.in_dim, tensor_kind(&l.weight)).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_lines() {
        let text = histogram_text(&[1, 0, 3, 2], -1.0, 1.0);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["-1 -0.5 1", "-0.5 0 0", "0 0.5 3", "0.5 1 2"]);
    }

    #[test]
    fn range_of_zeros() {
        assert_eq!(symmetric_range(&[0.0, 0.0]), (-1.0, 1.0));
        assert_eq!(symmetric_range(&[0.5, -2.0]), (-2.0, 2.0));
    }
}
