//! Model serialization, binary16 quantization, and raw/zipped size
//! measurement.
//!
//! # File layout (version 1)
//!
//! ```text
//! magic "PKMD" | version u16 | precision u8 (0 = f32, 1 = f16)
//! input_dim u32 | n_hidden u32
//! per hidden layer: width u32, activation u8, batchnorm u8, dropout f32
//! output_width u32 | header crc32 (over every preceding byte)
//! payload: per layer (hidden in order, then output):
//!     weights row-major, bias, [gamma, beta, running_mean, running_var]
//! ```
//!
//! All integers and floats are little-endian; payload values are stored in
//! the declared precision. Masks are not serialized: masked entries are
//! plain 0.0 in the dense payload, which is exactly what makes the DEFLATE
//! size shrink under parameter pruning. A masked model therefore
//! round-trips to an unmasked model with the same evaluation behavior.
//!
//! Zipped size is the length of a single-entry zip container around the
//! serialized stream, DEFLATE at fixed level 6 with zeroed timestamps, so
//! the number is reproducible byte for byte.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use half::f16;

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsRecord};
use crate::nn::activation::Activation;
use crate::nn::model::{Batch, BatchNorm, DenseLayer, LayerSpec, Model, ModelSpec};
use crate::scalar::Precision;

/// On-disk storage width for parameter payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePrecision {
    F32,
    F16,
}

const MAGIC: &[u8; 4] = b"PKMD";
const VERSION: u16 = 1;
/// DEFLATE level used for every zipped-size figure.
pub const ZIP_LEVEL: u32 = 6;

/// Size accounting for one serialized model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeReport {
    pub raw_bytes: usize,
    pub zip_bytes: usize,
    pub precision: StoragePrecision,
    /// Trainable parameters (weights, biases, batch-norm gamma/beta).
    pub param_count: usize,
    pub nonzero_param_count: usize,
}

/// A serialized model plus quantization diagnostics.
#[derive(Debug, Clone)]
pub struct EncodedModel {
    pub bytes: Vec<u8>,
    /// Finite f32 values that overflowed to signed infinity in f16.
    pub f16_overflows: usize,
}

impl StoragePrecision {
    pub fn name(self) -> &'static str {
        match self {
            StoragePrecision::F32 => "f32",
            StoragePrecision::F16 => "f16",
        }
    }

    pub fn from_name(s: &str) -> Option<StoragePrecision> {
        match s {
            "f32" => Some(StoragePrecision::F32),
            "f16" => Some(StoragePrecision::F16),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            StoragePrecision::F32 => 0,
            StoragePrecision::F16 => 1,
        }
    }

    fn from_code(c: u8) -> Option<StoragePrecision> {
        match c {
            0 => Some(StoragePrecision::F32),
            1 => Some(StoragePrecision::F16),
            _ => None,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            StoragePrecision::F32 => 4,
            StoragePrecision::F16 => 2,
        }
    }
}

struct PayloadWriter {
    out: Vec<u8>,
    precision: StoragePrecision,
    overflows: usize,
}

impl PayloadWriter {
    fn push(&mut self, v: f32) {
        match self.precision {
            StoragePrecision::F32 => self.out.extend_from_slice(&v.to_le_bytes()),
            StoragePrecision::F16 => {
                let h = f16::from_f32(v); // IEEE 754 round-to-nearest-even
                if v.is_finite() && h.is_infinite() {
                    self.overflows += 1;
                }
                self.out.extend_from_slice(&h.to_le_bytes());
            }
        }
    }
}

fn header_bytes(model: &Model, precision: StoragePrecision) -> Vec<u8> {
    let mut h = Vec::new();
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.push(precision.code());
    h.extend_from_slice(&(model.spec.input_dim as u32).to_le_bytes());
    h.extend_from_slice(&(model.spec.hidden.len() as u32).to_le_bytes());
    for l in &model.spec.hidden {
        h.extend_from_slice(&(l.width as u32).to_le_bytes());
        h.push(l.activation.code());
        h.push(u8::from(l.batchnorm));
        h.extend_from_slice(&l.dropout.to_le_bytes());
    }
    h.extend_from_slice(&(model.spec.output_width as u32).to_le_bytes());
    let crc = crc32fast::hash(&h);
    h.extend_from_slice(&crc.to_le_bytes());
    h
}

/// Serializes a model. Deterministic byte stream; f16 uses
/// round-to-nearest-even and records overflow-to-infinity counts.
pub fn serialize(model: &Model, precision: StoragePrecision) -> EncodedModel {
    let mut w = PayloadWriter {
        out: header_bytes(model, precision),
        precision,
        overflows: 0,
    };
    for l in &model.layers {
        for &v in &l.weights {
            w.push(v);
        }
        for &v in &l.bias {
            w.push(v);
        }
        if let Some(bn) = &l.batchnorm {
            for arr in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                for &v in arr.iter() {
                    w.push(v);
                }
            }
        }
    }
    EncodedModel {
        bytes: w.out,
        f16_overflows: w.overflows,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadModelFile("truncated stream".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn value(&mut self, precision: StoragePrecision) -> Result<f32> {
        match precision {
            StoragePrecision::F32 => self.f32(),
            StoragePrecision::F16 => Ok(f16::from_le_bytes(self.take(2)?.try_into().unwrap()).to_f32()),
        }
    }
}

/// Parses a serialized model. f16 payloads are widened to f32 for
/// evaluation; a second f16 serialization of the result is byte-identical.
pub fn deserialize(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadModelFile("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::BadModelFile(format!("unsupported version {version}")));
    }
    let precision = StoragePrecision::from_code(r.u8()?)
        .ok_or_else(|| Error::BadModelFile("unknown precision code".into()))?;
    let input_dim = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if n_hidden > 1024 {
        return Err(Error::BadModelFile(format!(
            "implausible hidden layer count {n_hidden}"
        )));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        let width = r.u32()? as usize;
        let activation = Activation::from_code(r.u8()?)
            .ok_or_else(|| Error::BadModelFile("unknown activation code".into()))?;
        let batchnorm = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::BadModelFile(format!(
                    "bad batchnorm flag {other}"
                )))
            }
        };
        let dropout = r.f32()?;
        hidden.push(LayerSpec {
            width,
            activation,
            batchnorm,
            dropout,
        });
    }
    let output_width = r.u32()? as usize;
    let declared_crc = u32::from_le_bytes(bytes[r.pos..r.pos + 4].try_into().unwrap());
    let actual_crc = crc32fast::hash(&bytes[..r.pos]);
    if declared_crc != actual_crc {
        return Err(Error::BadModelFile("header checksum mismatch".into()));
    }
    r.pos += 4;

    let spec = ModelSpec {
        input_dim,
        hidden,
        output_width,
    };
    spec.validate()
        .map_err(|e| Error::BadModelFile(format!("invalid spec in header: {e}")))?;

    // Exact payload length check before reading a single array.
    let mut value_count = 0usize;
    let mut in_dim = input_dim;
    for l in &spec.hidden {
        value_count += l.width * in_dim + l.width;
        if l.batchnorm {
            value_count += 4 * l.width;
        }
        in_dim = l.width;
    }
    value_count += output_width * in_dim + output_width;
    let expect = r.pos + value_count * precision.bytes_per_value();
    if bytes.len() != expect {
        return Err(Error::BadModelFile(format!(
            "payload length {} != expected {}",
            bytes.len() - r.pos,
            expect - r.pos
        )));
    }

    let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
    let mut in_dim = input_dim;
    for (li, l) in spec.hidden.iter().enumerate() {
        layers.push(read_layer(&mut r, precision, in_dim, l.width, l.batchnorm, l.activation, l.dropout)?);
        in_dim = l.width;
        let _ = li;
    }
    layers.push(read_layer(
        &mut r,
        precision,
        in_dim,
        output_width,
        false,
        Activation::Identity,
        0.0,
    )?);
    let model = Model { spec, layers };
    model.check_shapes()?;
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn read_layer(
    r: &mut Reader<'_>,
    precision: StoragePrecision,
    in_dim: usize,
    out_dim: usize,
    batchnorm: bool,
    activation: Activation,
    dropout: f32,
) -> Result<DenseLayer> {
    let mut weights = Vec::with_capacity(out_dim * in_dim);
    for _ in 0..out_dim * in_dim {
        weights.push(r.value(precision)?);
    }
    let mut bias = Vec::with_capacity(out_dim);
    for _ in 0..out_dim {
        bias.push(r.value(precision)?);
    }
    let bn = if batchnorm {
        let mut arrays = Vec::new();
        for _ in 0..4 {
            let mut a = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                a.push(r.value(precision)?);
            }
            arrays.push(a);
        }
        let running_var = arrays.pop().unwrap();
        let running_mean = arrays.pop().unwrap();
        let beta = arrays.pop().unwrap();
        let gamma = arrays.pop().unwrap();
        Some(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    } else {
        None
    };
    Ok(DenseLayer {
        in_dim,
        out_dim,
        weights,
        bias,
        batchnorm: bn,
        mask: None,
        activation,
        dropout,
    })
}

/// Length in bytes of the payload alone (no header) at a given precision.
pub fn payload_bytes(model: &Model, precision: StoragePrecision) -> usize {
    let mut count = 0usize;
    for l in &model.layers {
        count += l.weights.len() + l.bias.len();
        if l.batchnorm.is_some() {
            count += 4 * l.out_dim;
        }
    }
    count * precision.bytes_per_value()
}

/// Wraps `data` as the single entry of a zip archive, DEFLATE at
/// [`ZIP_LEVEL`], with all timestamps fixed at the DOS epoch.
pub fn zip_container(name: &str, data: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(ZIP_LEVEL));
    enc.write_all(data).expect("in-memory write");
    let compressed = enc.finish().expect("in-memory finish");
    let crc = crc32fast::hash(data);
    let name_bytes = name.as_bytes();
    let (csize, usize_) = (compressed.len() as u32, data.len() as u32);
    let dos_time: u16 = 0;
    let dos_date: u16 = 0x0021; // 1980-01-01

    let mut out = Vec::with_capacity(compressed.len() + 128);
    // local file header
    out.extend_from_slice(&0x04034b50u32.to_le_bytes());
    out.extend_from_slice(&20u16.to_le_bytes()); // version needed
    out.extend_from_slice(&0u16.to_le_bytes()); // flags
    out.extend_from_slice(&8u16.to_le_bytes()); // method: deflate
    out.extend_from_slice(&dos_time.to_le_bytes());
    out.extend_from_slice(&dos_date.to_le_bytes());
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&csize.to_le_bytes());
    out.extend_from_slice(&usize_.to_le_bytes());
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes()); // extra len
    out.extend_from_slice(name_bytes);
    out.extend_from_slice(&compressed);

    let cd_offset = out.len() as u32;
    // central directory entry
    out.extend_from_slice(&0x02014b50u32.to_le_bytes());
    out.extend_from_slice(&20u16.to_le_bytes()); // version made by
    out.extend_from_slice(&20u16.to_le_bytes()); // version needed
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&8u16.to_le_bytes());
    out.extend_from_slice(&dos_time.to_le_bytes());
    out.extend_from_slice(&dos_date.to_le_bytes());
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&csize.to_le_bytes());
    out.extend_from_slice(&usize_.to_le_bytes());
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes()); // extra
    out.extend_from_slice(&0u16.to_le_bytes()); // comment
    out.extend_from_slice(&0u16.to_le_bytes()); // disk
    out.extend_from_slice(&0u16.to_le_bytes()); // internal attrs
    out.extend_from_slice(&0u32.to_le_bytes()); // external attrs
    out.extend_from_slice(&0u32.to_le_bytes()); // local header offset
    out.extend_from_slice(name_bytes);
    let cd_size = out.len() as u32 - cd_offset;
    // end of central directory
    out.extend_from_slice(&0x06054b50u32.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&cd_size.to_le_bytes());
    out.extend_from_slice(&cd_offset.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out
}

fn trainable_counts(model: &Model) -> (usize, usize) {
    let mut total = 0usize;
    let mut nonzero = 0usize;
    for l in &model.layers {
        for &v in l.weights.iter().chain(&l.bias) {
            total += 1;
            if v != 0.0 {
                nonzero += 1;
            }
        }
        if let Some(bn) = &l.batchnorm {
            for &v in bn.gamma.iter().chain(&bn.beta) {
                total += 1;
                if v != 0.0 {
                    nonzero += 1;
                }
            }
        }
    }
    (total, nonzero)
}

/// Serializes at the given precision and measures raw and zipped sizes.
pub fn measure_sizes(model: &Model, precision: StoragePrecision) -> SizeReport {
    let enc = serialize(model, precision);
    let zipped = zip_container("model.pkm", &enc.bytes);
    let (param_count, nonzero_param_count) = trainable_counts(model);
    SizeReport {
        raw_bytes: enc.bytes.len(),
        zip_bytes: zipped.len(),
        precision,
        param_count,
        nonzero_param_count,
    }
}

/// Passes every serialized value through the f16 round trip, keeping any
/// masks. Returns the quantized model and the overflow count.
pub fn quantize_roundtrip(model: &Model) -> Result<(Model, usize)> {
    let enc = serialize(model, StoragePrecision::F16);
    let mut q = deserialize(&enc.bytes)?;
    for (ql, ol) in q.layers.iter_mut().zip(&model.layers) {
        ql.mask = ol.mask.clone();
    }
    Ok((q, enc.f16_overflows))
}

/// Evaluates the model after an in-memory f16 round trip of all its
/// parameters. The overflow count doubles as the warning signal for
/// parameters that left the representable f16 range.
pub fn evaluate_quantized(
    model: &Model,
    batch: &Batch<'_>,
    target_fpr: f64,
    eval_precision: Precision,
) -> Result<(MetricsRecord, usize)> {
    let (q, overflows) = quantize_roundtrip(model)?;
    let record = evaluate(&q, batch, target_fpr, eval_precision)?;
    Ok((record, overflows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{init_random, LayerMask};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 5,
            hidden: vec![
                LayerSpec {
                    width: 6,
                    activation: Activation::Elu,
                    batchnorm: true,
                    dropout: 0.1,
                },
                LayerSpec {
                    width: 4,
                    activation: Activation::Relu,
                    batchnorm: false,
                    dropout: 0.0,
                },
            ],
            output_width: 1,
        }
    }

    #[test]
    fn f32_roundtrip_is_bitwise() {
        let m = init_random(&spec(), 1).unwrap();
        let enc = serialize(&m, StoragePrecision::F32);
        assert_eq!(enc.f16_overflows, 0);
        let back = deserialize(&enc.bytes).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn f16_second_serialization_is_idempotent() {
        let m = init_random(&spec(), 2).unwrap();
        let first = serialize(&m, StoragePrecision::F16);
        let once = deserialize(&first.bytes).unwrap();
        let second = serialize(&once, StoragePrecision::F16);
        assert_eq!(first.bytes, second.bytes);
    }

    #[test]
    fn f16_payload_is_exactly_half() {
        let m = init_random(&spec(), 3).unwrap();
        assert_eq!(
            payload_bytes(&m, StoragePrecision::F32),
            2 * payload_bytes(&m, StoragePrecision::F16)
        );
        let e32 = serialize(&m, StoragePrecision::F32);
        let e16 = serialize(&m, StoragePrecision::F16);
        let header = header_bytes(&m, StoragePrecision::F32).len();
        assert_eq!(e32.bytes.len() - header, payload_bytes(&m, StoragePrecision::F32));
        assert_eq!(e16.bytes.len() - header, payload_bytes(&m, StoragePrecision::F16));
    }

    #[test]
    fn f16_known_conversions() {
        // 1.0 is exactly representable; 0.1 rounds to the nearest binary16,
        // whose bit pattern is 0x2E66 (0.0999755859375).
        assert_eq!(f16::from_f32(1.0).to_f32(), 1.0);
        let h = f16::from_f32(0.1);
        assert_eq!(h.to_bits(), 0x2E66);
        assert!((h.to_f32() - 0.099_975_586).abs() < 1e-9);
        // out-of-range values saturate to signed infinity
        assert!(f16::from_f32(1e30).is_infinite());
        assert!(f16::from_f32(-1e30).is_infinite() && f16::from_f32(-1e30) < f16::from_f32(0.0));
    }

    #[test]
    fn overflow_counting() {
        let mut m = init_random(&spec(), 4).unwrap();
        m.layers[0].weights[0] = 1e30;
        m.layers[1].weights[1] = -1e30;
        let enc = serialize(&m, StoragePrecision::F16);
        assert_eq!(enc.f16_overflows, 2);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let m = init_random(&spec(), 5).unwrap();
        let mut bytes = serialize(&m, StoragePrecision::F32).bytes;
        bytes[0] ^= 0xFF;
        assert!(matches!(deserialize(&bytes), Err(Error::BadModelFile(_))));
    }

    #[test]
    fn any_single_byte_header_corruption_is_detected() {
        let m = init_random(&spec(), 6).unwrap();
        let clean = serialize(&m, StoragePrecision::F32).bytes;
        let header_len = header_bytes(&m, StoragePrecision::F32).len();
        for i in 0..header_len {
            let mut bad = clean.clone();
            bad[i] ^= 0x5A;
            assert!(
                deserialize(&bad).is_err(),
                "corruption at header byte {i} went undetected"
            );
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = init_random(&spec(), 7).unwrap();
        let bytes = serialize(&m, StoragePrecision::F32).bytes;
        assert!(deserialize(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn masked_zeros_shrink_zip_but_not_raw() {
        let m = init_random(&spec(), 8).unwrap();
        let mut masked = m.clone();
        for l in masked.layers.iter_mut().take(2) {
            let mut mask = LayerMask::all_kept(l.out_dim, l.in_dim);
            for (i, keep) in mask.weights.iter_mut().enumerate() {
                if i % 2 == 0 {
                    *keep = false;
                }
            }
            l.mask = Some(mask);
        }
        masked.apply_masks();
        let base = measure_sizes(&m, StoragePrecision::F32);
        let pruned = measure_sizes(&masked, StoragePrecision::F32);
        assert_eq!(base.raw_bytes, pruned.raw_bytes);
        assert!(pruned.zip_bytes < base.zip_bytes);
        assert!(pruned.nonzero_param_count < base.nonzero_param_count);
        assert!(base.zip_bytes <= base.raw_bytes + 200);
    }

    #[test]
    fn all_zero_model_has_identical_quantized_metrics() {
        let mut m = init_random(&spec(), 9).unwrap();
        for l in &mut m.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let feats: Vec<f32> = (0..10 * 5).map(|i| (i as f32 * 0.3).sin()).collect();
        let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let batch = Batch::new(&feats, &labels, 10, 5).unwrap();
        let full = evaluate(&m, &batch, 0.1, Precision::F32).unwrap();
        let (quant, overflows) = evaluate_quantized(&m, &batch, 0.1, Precision::F32).unwrap();
        assert_eq!(overflows, 0);
        assert_eq!(full, quant);
        assert_eq!(full.auc, 0.5);
    }

    #[test]
    fn exactly_representable_parameters_quantize_to_identical_scores() {
        let mut m = init_random(&spec(), 10).unwrap();
        // snap everything onto small power-of-two grids, exact in binary16
        for l in &mut m.layers {
            for w in &mut l.weights {
                *w = (*w * 8.0).round() / 8.0;
            }
            for b in &mut l.bias {
                *b = (*b * 8.0).round() / 8.0;
            }
            if let Some(bn) = &mut l.batchnorm {
                for v in bn
                    .gamma
                    .iter_mut()
                    .chain(&mut bn.beta)
                    .chain(&mut bn.running_mean)
                {
                    *v = (*v * 8.0).round() / 8.0;
                }
                bn.running_var.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let (q, overflows) = quantize_roundtrip(&m).unwrap();
        assert_eq!(overflows, 0);
        assert_eq!(m, q);
        let feats: Vec<f32> = (0..6 * 5).map(|i| (i as f32 * 0.17).cos()).collect();
        let a = crate::nn::forward(&m, &feats, 6, 5, crate::nn::Mode::Eval, 0, Precision::F32)
            .unwrap();
        let b = crate::nn::forward(&q, &feats, 6, 5, crate::nn::Mode::Eval, 0, Precision::F32)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zip_container_is_deterministic() {
        let data = vec![7u8; 4096];
        let a = zip_container("model.pkm", &data);
        let b = zip_container("model.pkm", &data);
        assert_eq!(a, b);
        assert!(a.len() < data.len());
    }
}
