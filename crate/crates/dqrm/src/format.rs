//! Binary model file.
//!
//! Little-endian throughout:
//!
//! ```text
//! "DQRM"  u32 version
//! header  u32 dense_in, u32 embed_dim,
//!         u32 tables, u64 rows[tables],
//!         u32 n, u32 bottom_arch[n], u32 m, u32 top_arch[m],
//!         u32 emb_bits, u32 mlp_bits, u8 granularity, u32 update_period,
//!         f32 learning_rate, u8 quantize_activations, u32 pretrain_epochs
//! tables  per table: f32 scale (omitted at 32 bits), codes
//! layers  bottom then top: f32 scales (one per output row, or one per
//!         matrix), codes, f32 biases
//! ```
//!
//! Codes are packed by width: 2 and 4 bits as nibbles (`q + 8`, element
//! `2i` in the low nibble), 8 bits as `i8`, 16 bits as `i16`, and 32 bits
//! as raw `f32` weights with no scale.

use std::fs;
use std::path::Path;

use dqrm_core::model::{FrozenDlrm, FrozenLayer, FrozenTable, ModelConfig, StoredTensor, FLOAT_BITS};
use dqrm_core::quantizer::{self, Bits, Granularity, Scale};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"DQRM";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len_u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit the header")))?;
        self.u32(v);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, FormatError> {
        Ok(self.u32()? as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated(self.buf.len()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn granularity_tag(g: Granularity) -> u8 {
    match g {
        Granularity::PerTable => 0,
        Granularity::PerChannel => 1,
        Granularity::PerTensor => 2,
    }
}

fn granularity_from_tag(t: u8) -> Result<Granularity, FormatError> {
    match t {
        0 => Ok(Granularity::PerTable),
        1 => Ok(Granularity::PerChannel),
        2 => Ok(Granularity::PerTensor),
        t => Err(FormatError::InvalidHeader(format!("granularity tag {t}"))),
    }
}

/// Bytes taken by `count` values stored at `bits`.
pub fn code_payload_len(count: u64, bits: u32) -> u64 {
    match bits {
        2 | 4 => count.div_ceil(2),
        8 => count,
        16 => 2 * count,
        _ => 4 * count,
    }
}

fn write_codes(w: &mut Writer, t: &StoredTensor) -> Result<()> {
    match t {
        StoredTensor::Float(v) => v.iter().for_each(|&x| w.f32(x)),
        StoredTensor::Quantized { bits, codes, .. } => match bits.get() {
            2 | 4 => w.0.extend(quantizer::pack_int4(codes)?),
            8 => w.0.extend(codes.iter().map(|&q| q as i8 as u8)),
            _ => codes
                .iter()
                .for_each(|&q| w.0.extend_from_slice(&(q as i16).to_le_bytes())),
        },
    }
    Ok(())
}

fn read_tensor(r: &mut Reader<'_>, bits: u32, scales: usize, count: usize) -> Result<StoredTensor> {
    let Some(b) = Bits::from_config(bits)? else {
        return Ok(StoredTensor::Float(r.f32s(count)?));
    };
    let scales = r.f32s(scales)?;
    for &s in &scales {
        Scale::new(s)?;
    }
    let payload = r.take(code_payload_len(count as u64, bits) as usize)?;
    let codes = match bits {
        2 | 4 => quantizer::unpack_int4(payload, count)?,
        8 => payload.iter().map(|&b| i32::from(b as i8)).collect(),
        _ => payload
            .chunks_exact(2)
            .map(|c| i32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
    };
    Ok(StoredTensor::Quantized { bits: b, scales, codes })
}

fn layer_scale_count(cfg: &ModelConfig, out_dim: usize) -> usize {
    match cfg.mlp_granularity {
        Granularity::PerChannel => out_dim,
        _ => 1,
    }
}

pub fn encode_model(model: &FrozenDlrm) -> Result<Vec<u8>> {
    model.validate()?;
    let c = &model.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.len_u32(c.dense_in)?;
    w.len_u32(c.embed_dim)?;
    w.len_u32(c.table_rows.len())?;
    c.table_rows.iter().for_each(|&r| w.u64(r as u64));
    for arch in [&c.bottom_arch, &c.top_arch] {
        w.len_u32(arch.len())?;
        for &a in arch.iter() {
            w.len_u32(a)?;
        }
    }
    w.u32(c.emb_bits);
    w.u32(c.mlp_bits);
    w.u8(granularity_tag(c.mlp_granularity));
    w.u32(c.update_period);
    w.f32(c.learning_rate);
    w.u8(u8::from(c.quantize_activations));
    w.u32(c.pretrain_epochs);

    let width = |t: &StoredTensor| t.bits().map_or(FLOAT_BITS, Bits::get);
    if model.tables.iter().any(|t| width(&t.data) != c.emb_bits)
        || model
            .bottom
            .iter()
            .chain(&model.top)
            .any(|l| width(&l.weight) != c.mlp_bits)
    {
        return Err(Error::Config("tensor widths do not match the header".into()));
    }
    for t in &model.tables {
        if let StoredTensor::Quantized { scales, .. } = &t.data {
            w.f32(scales[0]);
        }
        write_codes(&mut w, &t.data)?;
    }
    for l in model.bottom.iter().chain(&model.top) {
        if let StoredTensor::Quantized { scales, .. } = &l.weight {
            if scales.len() != layer_scale_count(c, l.out_dim) {
                return Err(Error::Config("layer scales do not match the granularity".into()));
            }
            scales.iter().for_each(|&s| w.f32(s));
        }
        write_codes(&mut w, &l.weight)?;
        l.bias.iter().for_each(|&b| w.f32(b));
    }
    Ok(w.0)
}

pub fn decode_model(bytes: &[u8]) -> Result<FrozenDlrm> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let dense_in = r.usize()?;
    let embed_dim = r.usize()?;
    let tables = r.usize()?;
    let mut table_rows = Vec::new();
    for _ in 0..tables {
        let rows = r.u64()?;
        table_rows.push(usize::try_from(rows).map_err(|_| FormatError::InvalidHeader(format!("{rows} rows")))?);
    }
    let mut arch = || -> Result<Vec<usize>, FormatError> {
        let n = r.usize()?;
        (0..n).map(|_| r.usize()).collect()
    };
    let bottom_arch = arch()?;
    let top_arch = arch()?;
    let config = ModelConfig {
        dense_in,
        table_rows,
        embed_dim,
        bottom_arch,
        top_arch,
        emb_bits: r.u32()?,
        mlp_bits: r.u32()?,
        mlp_granularity: granularity_from_tag(r.u8()?)?,
        update_period: r.u32()?,
        learning_rate: r.f32()?,
        quantize_activations: r.u8()? != 0,
        pretrain_epochs: r.u32()?,
    };
    config
        .validate()
        .map_err(|e| FormatError::InvalidHeader(e.to_string()))?;

    let mut frozen_tables = Vec::with_capacity(tables);
    for &rows in &config.table_rows {
        let count = rows
            .checked_mul(embed_dim)
            .filter(|&n| code_payload_len(n as u64, config.emb_bits) <= bytes.len() as u64)
            .ok_or(FormatError::Truncated(bytes.len()))?;
        frozen_tables.push(FrozenTable {
            rows,
            dim: embed_dim,
            data: read_tensor(&mut r, config.emb_bits, 1, count)?,
        });
    }
    let mut stack = |shapes: Vec<(usize, usize)>, last_relu: bool| -> Result<Vec<FrozenLayer>> {
        let n = shapes.len();
        shapes
            .into_iter()
            .enumerate()
            .map(|(k, (i, o))| {
                let weight = read_tensor(&mut r, config.mlp_bits, layer_scale_count(&config, o), i * o)?;
                Ok(FrozenLayer {
                    in_dim: i,
                    out_dim: o,
                    relu: k + 1 < n || last_relu,
                    weight,
                    bias: r.f32s(o)?,
                })
            })
            .collect()
    };
    let bottom = stack(config.bottom_shapes(), true)?;
    let top = stack(config.top_shapes(), false)?;
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
    }
    let model = FrozenDlrm {
        config,
        tables: frozen_tables,
        bottom,
        top,
    };
    model.validate()?;
    Ok(model)
}

pub fn export_model(model: &FrozenDlrm, path: &Path) -> Result<u64> {
    let bytes = encode_model(model)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn import_model(path: &Path) -> Result<FrozenDlrm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Closed-form file size for `cfg` exported at its configured widths.
pub fn export_size(cfg: &ModelConfig) -> u64 {
    let mut n = 8u64;
    n += 4 + 4 + 4 + 8 * cfg.table_rows.len() as u64;
    n += 4 + 4 * cfg.bottom_arch.len() as u64 + 4 + 4 * cfg.top_arch.len() as u64;
    n += 4 + 4 + 1 + 4 + 4 + 1 + 4;
    let emb_scale = if cfg.emb_bits == FLOAT_BITS { 0 } else { 4 };
    for &rows in &cfg.table_rows {
        n += emb_scale + code_payload_len((rows * cfg.embed_dim) as u64, cfg.emb_bits);
    }
    for (i, o) in cfg.bottom_shapes().into_iter().chain(cfg.top_shapes()) {
        if cfg.mlp_bits != FLOAT_BITS {
            n += 4 * layer_scale_count(cfg, o) as u64;
        }
        n += code_payload_len((i * o) as u64, cfg.mlp_bits) + 4 * o as u64;
    }
    n
}

/// Re-encodes every tensor at new widths with freshly computed scales
/// (per table, and per output row or per matrix for MLP weights).
pub fn requantize(model: &FrozenDlrm, emb_bits: u32, mlp_bits: u32, granularity: Granularity) -> Result<FrozenDlrm> {
    let emb = Bits::from_config(emb_bits)?;
    let mlp = Bits::from_config(mlp_bits)?;
    let mut config = model.config.clone();
    config.emb_bits = emb_bits;
    config.mlp_bits = mlp_bits;
    config.mlp_granularity = granularity;
    let tables = model
        .tables
        .iter()
        .map(|t| {
            let values = t.data.decode(t.rows, t.dim);
            let data = match emb {
                None => StoredTensor::Float(values),
                Some(bits) => {
                    let s = quantizer::compute_scale(&values, bits)?;
                    StoredTensor::Quantized {
                        bits,
                        scales: vec![s.get()],
                        codes: quantizer::quantize(&values, s, bits),
                    }
                }
            };
            Ok(FrozenTable {
                rows: t.rows,
                dim: t.dim,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let layer = |l: &FrozenLayer| -> Result<FrozenLayer> {
        let values = l.weight.decode(l.out_dim, l.in_dim);
        let weight = match mlp {
            None => StoredTensor::Float(values),
            Some(bits) => {
                let scales = match granularity {
                    Granularity::PerChannel => quantizer::per_channel_scales(&values, l.out_dim, l.in_dim, bits)?,
                    _ => vec![quantizer::compute_scale(&values, bits)?],
                };
                let codes = values
                    .chunks_exact(l.in_dim.max(1))
                    .enumerate()
                    .flat_map(|(row, chunk)| {
                        let s = scales[if scales.len() == 1 { 0 } else { row }];
                        quantizer::quantize(chunk, s, bits)
                    })
                    .collect();
                StoredTensor::Quantized {
                    bits,
                    scales: scales.iter().map(|s| s.get()).collect(),
                    codes,
                }
            }
        };
        Ok(FrozenLayer { weight, ..l.clone() })
    };
    let out = FrozenDlrm {
        config,
        tables,
        bottom: model.bottom.iter().map(layer).collect::<Result<_>>()?,
        top: model.top.iter().map(layer).collect::<Result<_>>()?,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dqrm_core::data::{make_batches, Batch};
    use dqrm_core::model::Dlrm;

    use crate::config::RunConfig;
    use crate::train::load_dataset;

    fn small(bits: u32, granularity: Granularity) -> (FrozenDlrm, Batch) {
        let mut cfg = RunConfig::default();
        cfg.apply_text("table_rows = 40,7,30\nembed_dim = 4\nbottom_mlp = 13-8-4\ntop_mlp = 6-1\nsamples = 64")
            .unwrap();
        cfg.emb_bits = bits;
        cfg.mlp_bits = bits;
        cfg.mlp_granularity = granularity;
        let model = Dlrm::<f32>::new(cfg.model_config(), 3).unwrap();
        let data = load_dataset(&cfg).unwrap();
        let batch = make_batches(data.train, 32, false).next().unwrap();
        (FrozenDlrm::from_model(&model).unwrap(), batch)
    }

    #[test]
    fn round_trip_all_widths() {
        for bits in [2, 4, 8, 16, 32] {
            for g in [Granularity::PerChannel, Granularity::PerTensor] {
                let (model, batch) = small(bits, g);
                let bytes = encode_model(&model).unwrap();
                assert_eq!(bytes.len() as u64, export_size(&model.config), "{bits} bits");
                let back = decode_model(&bytes).unwrap();
                assert_eq!(back, model);
                let a = model.forward(&batch).unwrap();
                let b = back.forward(&batch).unwrap();
                assert_eq!(
                    a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn int4_is_an_eighth_of_fp32_tables() {
        let (m4, _) = small(4, Granularity::PerChannel);
        let (m32, _) = small(32, Granularity::PerChannel);
        let emb_weights = m4.config.embedding_parameter_count();
        assert_eq!(code_payload_len(emb_weights, 4), emb_weights.div_ceil(2));
        assert!(export_size(&m4.config) < export_size(&m32.config));
    }

    #[test]
    fn corrupt_files() {
        let (model, _) = small(4, Granularity::PerChannel);
        let bytes = encode_model(&model).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(FormatError::BadMagic))));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_model(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion(7)))
        ));

        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_model(&long),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn requantize_to_eight_bits() {
        let (model, batch) = small(32, Granularity::PerChannel);
        let q = requantize(&model, 8, 8, Granularity::PerTensor).unwrap();
        assert_eq!(q.config.emb_bits, 8);
        let bytes = encode_model(&q).unwrap();
        assert_eq!(bytes.len() as u64, export_size(&q.config));
        let a = model.forward(&batch).unwrap();
        let b = q.forward(&batch).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 0.05, "{x} vs {y}");
        }
        assert!(requantize(&model, 3, 8, Granularity::PerTensor).is_err());
    }

    #[test]
    fn file_round_trip() {
        let (model, _) = small(4, Granularity::PerChannel);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dqrm");
        let n = export_model(&model, &path).unwrap();
        assert_eq!(n, export_size(&model.config));
        assert_eq!(import_model(&path).unwrap(), model);
        assert!(matches!(
            import_model(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
