//! Versioned binary model container.
//!
//! Layout, little endian throughout: magic `PFM1`, u32 format version, a
//! fixed header (backbone id, lineage, input channels, input side), a
//! manifest of named f64 tensors (name, dtype tag, dims), the parameter blobs
//! in manifest order, and a trailing CRC-32 over everything before it.
//! Round-trips are bit-exact, including the loss parameters and any captured
//! normalization constants.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::util::crc32;

use super::layers::{Conv2d, Dense};
use super::model::{Backbone, BackboneId, Lineage, ModelNorm, PoseNetModel, RegressorHead};

pub const MODEL_MAGIC: &[u8; 4] = b"PFM1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ModelIoError {
    Io(std::io::Error),
    Corrupt { reason: String },
}

impl fmt::Display for ModelIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelIoError::Io(e) => write!(f, "model file i/o: {e}"),
            ModelIoError::Corrupt { reason } => write!(f, "corrupt model file: {reason}"),
        }
    }
}

impl std::error::Error for ModelIoError {}

impl From<std::io::Error> for ModelIoError {
    fn from(e: std::io::Error) -> Self {
        ModelIoError::Io(e)
    }
}

fn corrupt(reason: impl Into<String>) -> ModelIoError {
    ModelIoError::Corrupt { reason: reason.into() }
}

struct Entry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn conv_entries(ci: usize, c: &Conv2d, out: &mut Vec<Entry>) {
    out.push(Entry {
        name: format!("backbone.conv{ci}.weight"),
        dims: vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
        data: c.weight.clone(),
    });
    out.push(Entry {
        name: format!("backbone.conv{ci}.bias"),
        dims: vec![c.out_ch],
        data: c.bias.clone(),
    });
}

fn dense_entries(prefix: &str, d: &Dense, out: &mut Vec<Entry>) {
    out.push(Entry {
        name: format!("{prefix}.weight"),
        dims: vec![d.out_features, d.in_features],
        data: d.weight.clone(),
    });
    out.push(Entry { name: format!("{prefix}.bias"), dims: vec![d.out_features], data: d.bias.clone() });
}

fn scalar_entry(name: &str, v: f64) -> Entry {
    Entry { name: name.into(), dims: vec![], data: vec![v] }
}

fn collect_entries(model: &PoseNetModel) -> Vec<Entry> {
    let mut entries = Vec::new();
    for (ci, c) in model.backbone.convs.iter().enumerate() {
        conv_entries(ci, c, &mut entries);
    }
    dense_entries("backbone.top_dense", &model.backbone.top_dense, &mut entries);
    dense_entries("head.output_dense", &model.head.output_dense, &mut entries);
    entries.push(scalar_entry("loss.s_x", model.s_x));
    entries.push(scalar_entry("loss.s_q", model.s_q));
    entries.push(scalar_entry("head.dropout_rate", model.head.dropout_rate));
    entries.push(scalar_entry("head.pool_window", model.head.pool_window as f64));
    if let Some(n) = &model.norm {
        let vecs: [(&str, &[f64]); 6] = [
            ("norm.pose_mean", &n.pose_mean),
            ("norm.pose_std", &n.pose_std),
            ("norm.pose_min", &n.pose_min),
            ("norm.pose_max", &n.pose_max),
            ("norm.image_mean", &n.image_mean),
            ("norm.image_std", &n.image_std),
        ];
        for (name, v) in vecs {
            entries.push(Entry { name: name.into(), dims: vec![v.len()], data: v.to_vec() });
        }
    }
    entries
}

/// Serializes the model into the container byte layout.
pub fn model_to_bytes(model: &PoseNetModel) -> Vec<u8> {
    let entries = collect_entries(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.push(model.backbone.id.name().as_bytes()[0]);
    buf.push(model.lineage.tag());
    buf.extend_from_slice(&(model.backbone.in_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(model.backbone.input_hw as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(0); // dtype: f64
        buf.push(e.dims.len() as u8);
        for d in &e.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for e in &entries {
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf
}

pub fn save_model(model: &PoseNetModel, path: &Path) -> Result<(), ModelIoError> {
    let bytes = model_to_bytes(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuilds a model from container bytes, verifying the trailing checksum.
pub fn model_from_bytes(bytes: &[u8]) -> Result<PoseNetModel, ModelIoError> {
    if bytes.len() < MODEL_MAGIC.len() + 4 + 4 {
        return Err(corrupt("file shorter than header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(corrupt(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let id = match r.u8()? {
        b'A' => BackboneId::A,
        b'B' => BackboneId::B,
        other => return Err(corrupt(format!("unknown backbone id byte {other}"))),
    };
    let lineage = Lineage::from_tag(r.u8()?).ok_or_else(|| corrupt("unknown lineage tag"))?;
    let in_channels = r.u32()? as usize;
    let input_hw = r.u32()? as usize;
    let n_entries = r.u32()? as usize;

    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| corrupt("entry name is not utf-8"))?;
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(corrupt(format!("unsupported dtype tag {dtype} for {name}")));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        manifest.push((name, dims));
    }
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (name, dims) in manifest {
        let count: usize = dims.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64()?);
        }
        entries.insert(name, (dims, data));
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after parameter blobs"));
    }

    fn take(
        entries: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
        name: &str,
    ) -> Result<(Vec<usize>, Vec<f64>), ModelIoError> {
        entries.remove(name).ok_or_else(|| corrupt(format!("missing entry {name}")))
    }

    let mut convs = Vec::new();
    for ci in 0.. {
        let wname = format!("backbone.conv{ci}.weight");
        if !entries.contains_key(&wname) {
            break;
        }
        let (wdims, weight) = take(&mut entries, &wname)?;
        let (bdims, bias) = take(&mut entries, &format!("backbone.conv{ci}.bias"))?;
        if wdims.len() != 4 || bdims.len() != 1 || bdims[0] != wdims[0] || wdims[2] != wdims[3] {
            return Err(corrupt(format!("inconsistent dims for conv{ci}")));
        }
        convs.push(Conv2d {
            weight,
            bias,
            in_ch: wdims[1],
            out_ch: wdims[0],
            kernel: wdims[2],
            stride: 2,
            padding: 1,
        });
    }
    if convs.is_empty() {
        return Err(corrupt("model has no convolution entries"));
    }
    if convs[0].in_ch != in_channels {
        return Err(corrupt("header channels disagree with conv0"));
    }

    let read_dense = |name: &str,
                      entries: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>|
     -> Result<Dense, ModelIoError> {
        let (wdims, weight) = entries
            .remove(&format!("{name}.weight"))
            .ok_or_else(|| corrupt(format!("missing entry {name}.weight")))?;
        let (bdims, bias) = entries
            .remove(&format!("{name}.bias"))
            .ok_or_else(|| corrupt(format!("missing entry {name}.bias")))?;
        if wdims.len() != 2 || bdims.len() != 1 || bdims[0] != wdims[0] {
            return Err(corrupt(format!("inconsistent dims for {name}")));
        }
        Ok(Dense { weight, bias, in_features: wdims[1], out_features: wdims[0] })
    };
    let top_dense = read_dense("backbone.top_dense", &mut entries)?;
    let output_dense = read_dense("head.output_dense", &mut entries)?;

    let scalar = |name: &str,
                  entries: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>|
     -> Result<f64, ModelIoError> {
        let (_, data) =
            entries.remove(name).ok_or_else(|| corrupt(format!("missing entry {name}")))?;
        data.first().copied().ok_or_else(|| corrupt(format!("empty entry {name}")))
    };
    let s_x = scalar("loss.s_x", &mut entries)?;
    let s_q = scalar("loss.s_q", &mut entries)?;
    let dropout_rate = scalar("head.dropout_rate", &mut entries)?;
    let pool_window = scalar("head.pool_window", &mut entries)? as usize;

    let feature_dim = top_dense.out_features;
    if convs.last().unwrap().out_ch != top_dense.in_features {
        return Err(corrupt("top dense input does not match conv stack"));
    }
    if pool_window == 0
        || feature_dim % pool_window != 0
        || output_dense.in_features != feature_dim / pool_window
        || output_dense.out_features != 7
    {
        return Err(corrupt("head dims are inconsistent"));
    }

    let norm = if entries.contains_key("norm.pose_mean") {
        let fixed3 = |name: &str,
                      entries: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>|
         -> Result<[f64; 3], ModelIoError> {
            let (_, v) =
                entries.remove(name).ok_or_else(|| corrupt(format!("missing entry {name}")))?;
            v.as_slice().try_into().map_err(|_| corrupt(format!("{name} must have 3 values")))
        };
        let pose_mean = fixed3("norm.pose_mean", &mut entries)?;
        let pose_std = fixed3("norm.pose_std", &mut entries)?;
        let pose_min = fixed3("norm.pose_min", &mut entries)?;
        let pose_max = fixed3("norm.pose_max", &mut entries)?;
        let (_, image_mean) = take(&mut entries, "norm.image_mean")?;
        let (_, image_std) = take(&mut entries, "norm.image_std")?;
        Some(ModelNorm { pose_mean, pose_std, pose_min, pose_max, image_mean, image_std })
    } else {
        None
    };

    Ok(PoseNetModel {
        backbone: Backbone { id, convs, top_dense, in_channels, input_hw, feature_dim },
        head: RegressorHead { dropout_rate, pool_window, output_dense },
        s_x,
        s_q,
        lineage,
        norm,
    })
}

pub fn load_model(path: &Path) -> Result<PoseNetModel, ModelIoError> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> PoseNetModel {
        let mut m = PoseNetModel::init(BackboneId::B, 3, 16, 41);
        m.lineage = Lineage::AddSewn;
        m.s_x = -0.37;
        m.s_q = -2.51;
        m.norm = Some(ModelNorm {
            pose_mean: [1.0, 2.0, 3.0],
            pose_std: [0.5, 0.25, 2.0],
            pose_min: [-4.0, -2.0, 0.0],
            pose_max: [4.0, 2.0, 6.0],
            image_mean: vec![0.4, 0.5, 0.6],
            image_std: vec![0.1, 0.2, 0.3],
        });
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = sample_model();
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.lineage, Lineage::AddSewn);
        assert_eq!(back.norm, model.norm);
        assert_eq!(back.s_x.to_bits(), model.s_x.to_bits());
        assert_eq!(back.s_q.to_bits(), model.s_q.to_bits());
        for (a, b) in model.param_slices().iter().zip(back.param_slices().iter()) {
            assert_eq!(a.len(), b.len());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Serialization itself is deterministic.
        assert_eq!(bytes, model_to_bytes(&back));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = model_to_bytes(&sample_model());
        for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                model_from_bytes(&bytes[..cut]),
                Err(ModelIoError::Corrupt { .. })
            ));
        }
    }

    #[test]
    fn bit_flip_fails_checksum() {
        let mut bytes = model_to_bytes(&sample_model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, ModelIoError::Corrupt { .. }));
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = model_to_bytes(&sample_model());
        bytes[0] = b'X';
        // Fix up the checksum so the magic check itself is exercised.
        let n = bytes.len();
        let crc = crate::util::crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn save_and_load_through_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfm");
        let model = sample_model();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn prior_release_fixture_loads() {
        // Written by the first released format version; guards against
        // accidental layout drift.
        let bytes: &[u8] = include_bytes!("../../tests/fixtures/model_v1.pfm");
        let model = model_from_bytes(bytes).unwrap();
        assert_eq!(model.backbone.id, BackboneId::A);
        assert_eq!(model.lineage, Lineage::Unimodal);
        assert_eq!(model.backbone.feature_dim, 64);
        assert_eq!(model.s_x, 0.0);
        assert_eq!(model.s_q, -3.0);
    }
}
