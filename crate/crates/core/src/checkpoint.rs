//! Binary adapter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "ALR2" | version u32 | layer_count u32
//! per layer:
//!   name_len u32 | name (UTF-8) | m u32 | n u32 | D u32 | ν f64
//!   B active slice, m·D f32, row-major
//!   A active slice, D·n f32, row-major
//! ```
//!
//! The importance diagonal is not stored; it is recomputed from `ν`.

use std::path::Path;

use crate::adapter::AdaptiveLoraLayer;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rank::effective_rank;
use crate::toy::ToyModel;

pub const MAGIC: [u8; 4] = *b"ALR2";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_BYTES: usize = 12;
const LAYER_HEADER_BYTES: usize = 24;

/// Size in bytes of one layer record.
pub fn layer_record_size(name_len: usize, m: usize, n: usize, d: usize) -> usize {
    LAYER_HEADER_BYTES + name_len + 4 * d * (m + n)
}

/// `12 + Σ_ℓ (24 + name_len_ℓ + 4·D_ℓ·(m_ℓ + n_ℓ))`.
pub fn checkpoint_size(layers: &[AdaptiveLoraLayer]) -> usize {
    HEADER_BYTES
        + layers
            .iter()
            .map(|l| layer_record_size(l.name().len(), l.out_features(), l.in_features(), l.d()))
            .sum::<usize>()
}

/// One decoded layer record.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub nu: f64,
    pub b: Vec<f32>,
    pub a: Vec<f32>,
}

impl LayerRecord {
    pub fn b_tensor(&self) -> Tensor {
        Tensor::from_vec(self.m, self.d, self.b.iter().map(|&v| f64::from(v)).collect()).expect("record shape")
    }

    pub fn a_tensor(&self) -> Tensor {
        Tensor::from_vec(self.d, self.n, self.a.iter().map(|&v| f64::from(v)).collect()).expect("record shape")
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit in u32")))
}

/// Serializes the active state of `layers`.
pub fn encode(layers: &[AdaptiveLoraLayer]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(checkpoint_size(layers));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(layers.len(), "layer count")?.to_le_bytes());
    for l in layers {
        let name = l.name().as_bytes();
        out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&to_u32(l.out_features(), "m")?.to_le_bytes());
        out.extend_from_slice(&to_u32(l.in_features(), "n")?.to_le_bytes());
        out.extend_from_slice(&to_u32(l.d(), "D")?.to_le_bytes());
        out.extend_from_slice(&l.nu().to_le_bytes());
        for v in l.b_active().data().iter().chain(l.a_active().data()) {
            if !v.is_finite() {
                return Err(Error::NonFiniteWeight(l.name().to_string()));
            }
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), checkpoint_size(layers));
    Ok(out)
}

/// Writes a checkpoint and returns the number of bytes written.
pub fn save_checkpoint(layers: &[AdaptiveLoraLayer], path: &Path) -> Result<usize> {
    let bytes = encode(layers)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.pos, needed: n, len: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Contract("payload too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Parses checkpoint bytes into layer records.
pub fn decode(bytes: &[u8]) -> Result<Vec<LayerRecord>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::MagicMismatch { found: magic });
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::ShapeMismatch(format!("layer name is not UTF-8: {e}")))?
            .to_string();
        let (m, n, d) = (r.u32()?, r.u32()?, r.u32()?);
        let nu = r.f64()?;
        let b = r.f32s(m * d)?;
        let a = r.f32s(d * n)?;
        records.push(LayerRecord { name, m, n, d, nu, b, a });
    }
    if r.pos != bytes.len() {
        return Err(Error::ShapeMismatch(format!("{} trailing bytes after last layer", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<LayerRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Restores `records` into `layers`, matched by position and checked by
/// name and shape. Returns warnings for layers whose stored `D` disagrees
/// with the rank implied by the stored `ν` (the stored `D` is kept).
pub fn restore_layers(records: &[LayerRecord], layers: &mut [AdaptiveLoraLayer]) -> Result<Vec<String>> {
    if records.len() != layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} layers, model has {}",
            records.len(),
            layers.len()
        )));
    }
    let mut warnings = Vec::new();
    for (rec, layer) in records.iter().zip(layers.iter_mut()) {
        if rec.name != layer.name() || rec.m != layer.out_features() || rec.n != layer.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint layer {} ({}x{}) does not match model layer {} ({}x{})",
                rec.name,
                rec.m,
                rec.n,
                layer.name(),
                layer.out_features(),
                layer.in_features()
            )));
        }
        if let Ok(implied) = effective_rank(rec.nu, layer.rank().q(), layer.rank().r_max()) {
            if implied != rec.d && layer.mode() == crate::adapter::AdapterMode::Adaptive {
                warnings.push(format!(
                    "layer {}: stored D={} but nu={} implies D={}; keeping stored D",
                    rec.name, rec.d, rec.nu, implied
                ));
            }
        }
        layer.restore(rec.nu, rec.d, &rec.b_tensor(), &rec.a_tensor())?;
    }
    Ok(warnings)
}

/// Loads a checkpoint onto a copy of `base`.
pub fn load_checkpoint(path: &Path, base: &ToyModel) -> Result<(ToyModel, Vec<String>)> {
    let records = read_checkpoint(path)?;
    let mut model = base.clone();
    let warnings = restore_layers(&records, model.layers_mut())?;
    Ok((model, warnings))
}

/// Copy of `layers` with active `B`, `A` rounded through `f32`, i.e. the
/// state a checkpoint round trip reproduces.
pub fn quantize_to_payload(layers: &[AdaptiveLoraLayer]) -> Vec<AdaptiveLoraLayer> {
    layers
        .iter()
        .map(|l| {
            let mut q = l.clone();
            let b = l.b_active().map(|v| f64::from(v as f32));
            let a = l.a_active().map(|v| f64::from(v as f32));
            q.set_active(&b, &a).expect("same shapes");
            q
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{FrozenLinear, LayerKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(name: &str, m: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> AdaptiveLoraLayer {
        let w = Tensor::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let base = FrozenLinear::new(name, LayerKind::SelfAttnQ, w).unwrap();
        let mut l = AdaptiveLoraLayer::init_adapter(base, d, 0.9, 16, rng).unwrap();
        let b = Tensor::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let a = l.a_active();
        l.set_active(&b, &a).unwrap();
        l
    }

    #[test]
    fn worked_example_is_165_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![layer("q", 8, 8, 2, &mut rng)];
        assert_eq!(checkpoint_size(&layers), 165);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.alr2");
        let written = save_checkpoint(&layers, &path).unwrap();
        assert_eq!(written, 165);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 165);
    }

    #[test]
    fn empty_model_is_header_only() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"ALR2");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![layer("q", 5, 7, 3, &mut rng), layer("mlp", 4, 4, 1, &mut rng)];
        let first = encode(&layers).unwrap();
        let mut restored = layers.clone();
        restore_layers(&decode(&first).unwrap(), &mut restored).unwrap();
        assert_eq!(encode(&restored).unwrap(), first);
        for (r, l) in restored.iter().zip(&layers) {
            assert_eq!(r.nu(), l.nu());
            assert_eq!(r.d(), l.d());
        }
    }

    #[test]
    fn corruptions_are_distinct_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = vec![layer("q", 3, 3, 2, &mut rng)];
        let good = encode(&layers).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::MagicMismatch { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::VersionMismatch(9))));

        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Truncated { .. })));

        let other = vec![layer("k", 3, 3, 2, &mut rng)];
        let mut target = other.clone();
        assert!(matches!(restore_layers(&decode(&good).unwrap(), &mut target), Err(Error::ShapeMismatch(_))));
        let mut wide = vec![layer("q", 3, 4, 2, &mut rng)];
        assert!(matches!(restore_layers(&decode(&good).unwrap(), &mut wide), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_weights_are_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = layer("q", 2, 2, 1, &mut rng);
        l.set_active(&Tensor::column(&[f64::NAN, 0.0]), &Tensor::from_rows(&[[1.0, 1.0]])).unwrap();
        assert!(matches!(encode(&[l]), Err(Error::NonFiniteWeight(_))));
    }

    #[test]
    fn inconsistent_rank_warns_and_keeps_stored_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = layer("q", 3, 3, 2, &mut rng);
        l.rank_mut().set_nu(0.01).unwrap();
        let records = decode(&encode(std::slice::from_ref(&l)).unwrap()).unwrap();
        let mut target = vec![l.clone()];
        let warnings = restore_layers(&records, &mut target).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(target[0].d(), 2);
    }
}
