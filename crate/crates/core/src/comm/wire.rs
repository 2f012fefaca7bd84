use alloc::vec::Vec;
use core::ops::AddAssign;

use crate::error::{Error, Result};
use crate::quantizer::Bits;
use crate::real::Real;

pub const SCALE_BYTES: usize = 4;

/// Bytes sent during one iteration, summed over all nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommRecord {
    pub dense_grad_bytes: u64,
    pub sparse_index_bytes: u64,
    pub sparse_value_bytes: u64,
    pub scale_bytes: u64,
}

impl CommRecord {
    pub fn total(&self) -> u64 {
        self.dense_grad_bytes + self.sparse_index_bytes + self.sparse_value_bytes + self.scale_bytes
    }

    /// Average per node, rounded down.
    pub fn per_node(&self, nodes: usize) -> CommRecord {
        let n = nodes.max(1) as u64;
        CommRecord {
            dense_grad_bytes: self.dense_grad_bytes / n,
            sparse_index_bytes: self.sparse_index_bytes / n,
            sparse_value_bytes: self.sparse_value_bytes / n,
            scale_bytes: self.scale_bytes / n,
        }
    }
}

impl AddAssign for CommRecord {
    fn add_assign(&mut self, o: CommRecord) {
        self.dense_grad_bytes += o.dense_grad_bytes;
        self.sparse_index_bytes += o.sparse_index_bytes;
        self.sparse_value_bytes += o.sparse_value_bytes;
        self.scale_bytes += o.scale_bytes;
    }
}

/// Shape of one message a node puts on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Message {
    Scale,
    Dense { elements: usize },
    Sparse { rows: usize, dim: usize },
}

/// Bytes per gradient value: 4 for FP32, otherwise the smallest integer
/// width holding a code.
pub fn code_bytes(bits: Option<Bits>) -> usize {
    match bits {
        None => 4,
        Some(b) if b.get() <= 8 => 1,
        Some(_) => 2,
    }
}

/// Byte totals for a list of messages, without serializing them.
pub fn account_bytes(messages: &[Message], bits: Option<Bits>, index_bytes: usize) -> CommRecord {
    let v = code_bytes(bits) as u64;
    let mut rec = CommRecord::default();
    for m in messages {
        match *m {
            Message::Scale => rec.scale_bytes += SCALE_BYTES as u64,
            Message::Dense { elements } => rec.dense_grad_bytes += elements as u64 * v,
            Message::Sparse { rows, dim } => {
                rec.sparse_index_bytes += (rows * index_bytes) as u64;
                rec.sparse_value_bytes += (rows * dim) as u64 * v;
            }
        }
    }
    rec
}

pub fn encode_scale<T: Real>(scale: T) -> [u8; SCALE_BYTES] {
    scale.to_f32_lossy().to_le_bytes()
}

pub fn encode_dense_f32<T: Real>(values: &[T]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_f32_lossy().to_le_bytes()).collect()
}

/// Little-endian codes, one or two bytes each per [`code_bytes`].
pub fn encode_codes(codes: &[i32], bits: Bits) -> Result<Vec<u8>> {
    let qmax = bits.qmax();
    if let Some(&q) = codes.iter().find(|q| q.abs() > qmax) {
        return Err(Error::CodeOutOfRange(q));
    }
    Ok(match code_bytes(Some(bits)) {
        1 => codes.iter().map(|&q| q as i8 as u8).collect(),
        _ => codes.iter().flat_map(|&q| (q as i16).to_le_bytes()).collect(),
    })
}

/// Values of a sparse message.
#[derive(Debug, Clone, Copy)]
pub enum SparsePayload<'a, T> {
    Float(&'a [T]),
    Codes(&'a [i32], Bits),
}

/// Row indices (little-endian, `index_bytes` wide) followed by the values.
pub fn encode_sparse<T: Real>(indices: &[u32], payload: SparsePayload<'_, T>, index_bytes: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for &i in indices {
        match index_bytes {
            4 => out.extend_from_slice(&i.to_le_bytes()),
            8 => out.extend_from_slice(&u64::from(i).to_le_bytes()),
            other => return Err(Error::Config(alloc::format!("index wire size {other}"))),
        }
    }
    match payload {
        SparsePayload::Float(v) => out.extend(encode_dense_f32(v)),
        SparsePayload::Codes(c, bits) => out.extend(encode_codes(c, bits)?),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn code_widths() {
        assert_eq!(code_bytes(None), 4);
        assert_eq!(code_bytes(Some(Bits::INT8)), 1);
        assert_eq!(code_bytes(Some(Bits::INT4)), 1);
        assert_eq!(code_bytes(Some(Bits::INT16)), 2);
    }

    #[test]
    fn encodings() {
        assert_eq!(encode_codes(&[-1, 127], Bits::INT8).unwrap(), vec![0xFF, 0x7F]);
        assert_eq!(encode_codes(&[-2], Bits::INT16).unwrap(), vec![0xFE, 0xFF]);
        assert_eq!(encode_codes(&[128], Bits::INT8), Err(Error::CodeOutOfRange(128)));
        assert_eq!(encode_scale(1.0f32), [0, 0, 0x80, 0x3F]);
        let msg = encode_sparse::<f32>(&[3], SparsePayload::Codes(&[1, -1], Bits::INT8), 4).unwrap();
        assert_eq!(msg, vec![3, 0, 0, 0, 1, 0xFF]);
    }

    proptest! {
        #[test]
        fn accounting_matches_serialized_length(
            rows in 0usize..20,
            dim in 1usize..8,
            dense in 0usize..50,
            wide in any::<bool>(),
            bits in prop::sample::select(vec![8u32, 16, 32]),
        ) {
            let index_bytes = if wide { 8 } else { 4 };
            let bits = Bits::from_config(bits).unwrap();
            let indices: Vec<u32> = (0..rows as u32).collect();
            let vals = vec![0.5f32; rows * dim];
            let codes = vec![-1i32; rows * dim];
            let dcodes = vec![3i32; dense];
            let dvals = vec![1.0f32; dense];
            let (sparse, dense_msg) = match bits {
                None => (
                    encode_sparse(&indices, SparsePayload::Float(&vals), index_bytes).unwrap(),
                    encode_dense_f32(&dvals),
                ),
                Some(b) => (
                    encode_sparse::<f32>(&indices, SparsePayload::Codes(&codes, b), index_bytes).unwrap(),
                    encode_codes(&dcodes, b).unwrap(),
                ),
            };
            let mut serialized = sparse.len() + dense_msg.len();
            let mut msgs = vec![Message::Sparse { rows, dim }, Message::Dense { elements: dense }];
            if bits.is_some() {
                serialized += encode_scale(0.1f32).len() * 2;
                msgs.extend([Message::Scale, Message::Scale]);
            }
            prop_assert_eq!(account_bytes(&msgs, bits, index_bytes).total(), serialized as u64);
        }
    }
}
