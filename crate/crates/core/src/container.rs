//! Versioned binary container for checkpoints and datasets.
//!
//! Layout (little-endian): `b"HYPR"`, format version `u32`, a 4-byte kind
//! tag, header length `u32`, JSON header, payload length `u64`, payload,
//! CRC-32 of every preceding byte. Checkpoint payloads are `f64`; an `f32`
//! network widens exactly on save and narrows on an `f32` load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{HyprError, Result};
use crate::network::{Layer, Network};
use crate::neuron::{ModelConstants, ModelKind};
use crate::scalar::{Precision, Scalar};
use crate::training::loss::Target;
use crate::training::optim::{Adam, AdamConfig};

pub const MAGIC: &[u8; 4] = b"HYPR";
pub const VERSION: u32 = 1;
pub const TAG_CHECKPOINT: &[u8; 4] = b"CKPT";
pub const TAG_DATASET: &[u8; 4] = b"DATA";

/// Wraps `header` and `payload` in the container framing.
pub fn encode(tag: &[u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(tag);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks framing and checksum; returns `(header, payload)`.
pub fn decode<'a>(bytes: &'a [u8], tag: &[u8; 4]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(HyprError::Parse {
            offset: 0,
            msg: "not a HYPR container".into(),
        });
    }
    if bytes.len() < 28 {
        return Err(HyprError::Checksum(format!(
            "container of {} bytes is truncated",
            bytes.len()
        )));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(HyprError::Checksum("container body".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(HyprError::Version {
            found: version,
            expected: VERSION,
        });
    }
    if &body[8..12] != tag {
        return Err(HyprError::Parse {
            offset: 8,
            msg: format!(
                "container holds {:?}, expected {:?}",
                String::from_utf8_lossy(&body[8..12]),
                String::from_utf8_lossy(tag)
            ),
        });
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let short = |offset| HyprError::Parse {
        offset,
        msg: "section lengths exceed the container".into(),
    };
    let header = body.get(16..16 + hlen).ok_or_else(|| short(12))?;
    let p0 = 16 + hlen;
    let plen = body
        .get(p0..p0 + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| short(p0))?;
    let payload = body.get(p0 + 8..p0 + 8 + plen).ok_or_else(|| short(p0))?;
    if p0 + 8 + plen != body.len() {
        return Err(short(p0));
    }
    Ok((header, payload))
}

fn json_header<H: for<'de> Deserialize<'de>>(h: &[u8]) -> Result<H> {
    serde_json::from_slice(h).map_err(|e| HyprError::Parse {
        offset: 16 + e.column().saturating_sub(1),
        msg: format!("header: {e}"),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HyprError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HyprError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HyprError::io(path, e))
}

struct F64Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F64Reader<'_> {
    fn take<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let end = self.pos + 8 * n;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| HyprError::Parse {
                offset: self.pos,
                msg: "payload shorter than the header describes".into(),
            })?;
        self.pos = end;
        Ok(chunk
            .chunks_exact(8)
            .map(|b| T::c(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect())
    }
}

fn put<T: Scalar>(out: &mut Vec<u8>, vals: &[T]) {
    for v in vals {
        out.extend_from_slice(&v.f64().to_le_bytes());
    }
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    kind: ModelKind,
    m: usize,
    d: usize,
    recurrent: bool,
    constants: ModelConstants,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    cfg: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    precision: Precision,
    layers: Vec<LayerHeader>,
    adam: Option<AdamHeader>,
}

/// Network parameters with optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub net: Network<T>,
    pub adam: Option<Adam<T>>,
    /// Precision of the run that wrote the checkpoint.
    pub precision: Precision,
}

pub fn encode_checkpoint<T: Scalar>(net: &Network<T>, adam: Option<&Adam<T>>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        precision: T::PRECISION,
        layers: net
            .layers
            .iter()
            .map(|l| LayerHeader {
                kind: l.kind,
                m: l.m,
                d: l.d,
                recurrent: l.recurrent,
                constants: l.mc.clone(),
            })
            .collect(),
        adam: adam.map(|a| AdamHeader {
            cfg: a.cfg,
            step: a.step,
        }),
    };
    let mut payload = Vec::new();
    for l in &net.layers {
        put(&mut payload, &l.w);
        for f in &l.fixed {
            put(&mut payload, f);
        }
    }
    if let Some(a) = adam {
        for (m, v) in a.m.iter().zip(&a.v) {
            put(&mut payload, m);
            put(&mut payload, v);
        }
    }
    let h = serde_json::to_vec(&header).map_err(|e| HyprError::config(e.to_string()))?;
    Ok(encode(TAG_CHECKPOINT, &h, &payload))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (h, payload) = decode(bytes, TAG_CHECKPOINT)?;
    let header: CheckpointHeader = json_header(h)?;
    let mut r = F64Reader {
        bytes: payload,
        pos: 0,
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let mut l = Layer::zeros(lh.kind, lh.m, lh.d, lh.recurrent, lh.constants.clone());
        l.w = r.take(l.w.len())?;
        let fixed: Vec<T> = r.take(2 * lh.m)?;
        l.fixed = fixed.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        layers.push(l);
    }
    let net = Network::from_layers(layers)?;
    let adam = match header.adam {
        Some(ah) => {
            let mut a = Adam::new(&net, ah.cfg);
            a.step = ah.step;
            for (l, layer) in net.layers.iter().enumerate() {
                a.m[l] = r.take(layer.w.len())?;
                a.v[l] = r.take(layer.w.len())?;
            }
            Some(a)
        }
        None => None,
    };
    if r.pos != payload.len() {
        return Err(HyprError::Parse {
            offset: r.pos,
            msg: "payload longer than the header describes".into(),
        });
    }
    Ok(Checkpoint {
        net,
        adam,
        precision: header.precision,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    net: &Network<T>,
    adam: Option<&Adam<T>>,
) -> Result<()> {
    write(path, &encode_checkpoint(net, adam)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&read(path)?)
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    t_len: usize,
    target: Target,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    name: String,
    d: usize,
    n_classes: usize,
    t0: Option<usize>,
    /// `true` when every input value is 0 or 1 and is stored as one byte.
    binary: bool,
    samples: Vec<SampleHeader>,
}

pub fn encode_dataset(ds: &Dataset<f64>) -> Result<Vec<u8>> {
    let binary = ds
        .samples
        .iter()
        .all(|s| s.x.iter().all(|&v| v == 0.0 || v == 1.0));
    let header = DatasetHeader {
        name: ds.name.clone(),
        d: ds.d,
        n_classes: ds.n_classes,
        t0: ds.t0,
        binary,
        samples: ds
            .samples
            .iter()
            .map(|s| SampleHeader {
                t_len: s.t_len,
                target: s.target.clone(),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for s in &ds.samples {
        if binary {
            payload.extend(s.x.iter().map(|&v| v as u8));
        } else {
            put(&mut payload, &s.x);
        }
    }
    let h = serde_json::to_vec(&header).map_err(|e| HyprError::config(e.to_string()))?;
    Ok(encode(TAG_DATASET, &h, &payload))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset<f64>> {
    let (h, payload) = decode(bytes, TAG_DATASET)?;
    let header: DatasetHeader = json_header(h)?;
    let mut samples = Vec::with_capacity(header.samples.len());
    let mut pos = 0;
    let width = if header.binary { 1 } else { 8 };
    for sh in header.samples {
        let n = sh.t_len * header.d;
        let chunk = payload
            .get(pos..pos + n * width)
            .ok_or_else(|| HyprError::Parse {
                offset: pos,
                msg: "payload shorter than the header describes".into(),
            })?;
        pos += n * width;
        let x = if header.binary {
            chunk.iter().map(|&b| b as f64).collect()
        } else {
            chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        };
        samples.push(Sample {
            x,
            t_len: sh.t_len,
            target: sh.target,
        });
    }
    Ok(Dataset {
        name: header.name,
        d: header.d,
        n_classes: header.n_classes,
        t0: header.t0,
        samples,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset<f64>) -> Result<()> {
    write(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset<f64>> {
    decode_dataset(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cue::{generate_cue_dataset, CueTaskSpec};
    use crate::testutil::random_net;

    fn trained() -> (Network<f64>, Adam<f64>) {
        let net = random_net(&[ModelKind::Seadlif, ModelKind::Brf], 4, 3, true, 2, 1.0, 3);
        let mut adam = Adam::new(&net, AdamConfig::default());
        adam.step = 5;
        adam.m[0][1] = 0.25;
        adam.v[1][2] = 1e-300;
        (net, adam)
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (net, adam) = trained();
        let bytes = encode_checkpoint(&net, Some(&adam)).unwrap();
        let ck: Checkpoint<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.net, net);
        assert_eq!(ck.adam.as_ref(), Some(&adam));
        assert_eq!(ck.precision, Precision::F64);
        for (a, b) in ck.net.layers.iter().zip(&net.layers) {
            assert!(a
                .w
                .iter()
                .zip(&b.w)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn cross_precision() {
        let (net, _) = trained();
        let n32: Network<f32> = net.cast();
        let bytes = encode_checkpoint(&n32, None).unwrap();
        let wide: Checkpoint<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(wide.precision, Precision::F32);
        assert_eq!(wide.net, n32.cast::<f64>());
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.net, n32);
    }

    #[test]
    fn corruption_is_detected() {
        let (net, adam) = trained();
        let bytes = encode_checkpoint(&net, Some(&adam)).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            decode_checkpoint::<f64>(cut),
            Err(HyprError::Checksum(_))
        ));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            decode_checkpoint::<f64>(&flipped),
            Err(HyprError::Checksum(_))
        ));
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_checkpoint::<f64>(&v2),
            Err(HyprError::Version {
                found: 2,
                expected: 1
            })
        ));
        assert!(matches!(
            decode_checkpoint::<f64>(b"nope"),
            Err(HyprError::Parse { offset: 0, .. })
        ));
        let ds = encode_dataset(
            &generate_cue_dataset(&CueTaskSpec {
                n_samples: 2,
                t_delay: 1,
                ..Default::default()
            })
            .unwrap(),
        )
        .unwrap();
        assert!(matches!(
            decode_checkpoint::<f64>(&ds),
            Err(HyprError::Parse { offset: 8, .. })
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let ds = generate_cue_dataset(&CueTaskSpec {
            n_samples: 6,
            t_delay: 3,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/cue.hypr");
        save_dataset(&p, &ds).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
        let mut real = ds.clone();
        real.samples[0].x[0] = 0.2;
        assert_eq!(
            decode_dataset(&encode_dataset(&real).unwrap()).unwrap(),
            real
        );
    }
}
