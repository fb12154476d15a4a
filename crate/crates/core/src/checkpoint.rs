//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic `MRTLCKPT`, `u32` version, `u64` manifest length,
//! the manifest as JSON, then every parameter block as raw little-endian
//! `f64` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{AnyModel, FactoredModel, FullTensorModel};
use crate::tensor::{CpFactors, DenseTensor3, Mat};

const MAGIC: &[u8; 8] = b"MRTLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    /// Training segment the model belongs to.
    pub segment: usize,
    /// Resolution stage of that segment.
    pub stage: usize,
    /// Whether the segment's training had finished when this was written.
    pub trained: bool,
    /// Examples drawn from the batch stream so far.
    pub examples_consumed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    n_tasks: usize,
    grid_b: Grid,
    grid_c: Grid,
    rank_dense: usize,
    rank_sparse: usize,
    segment: usize,
    stage: usize,
    trained: bool,
    examples_consumed: u64,
    blocks: Vec<BlockInfo>,
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = ck.model.as_dyn();
    let (kind, kd, ks) = match &ck.model {
        AnyModel::Full(_) => ("full", 0, 0),
        AnyModel::Factored(f) => ("factored", f.dense.rank(), f.sparse.rank()),
    };
    let blocks = m.blocks();
    let manifest = Manifest {
        kind: kind.into(),
        n_tasks: m.n_tasks(),
        grid_b: m.grid_b(),
        grid_c: m.grid_c(),
        rank_dense: kd,
        rank_sparse: ks,
        segment: ck.segment,
        stage: ck.stage,
        trained: ck.trained,
        examples_consumed: ck.examples_consumed,
        blocks: m
            .block_names()
            .iter()
            .zip(&blocks)
            .map(|(n, b)| BlockInfo { name: (*n).into(), len: b.len() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * m.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blocks {
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing MRTLCKPT header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < mlen {
        return Err(corrupt("truncated manifest"));
    }
    let man: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let mut data = &body[mlen..];
    let total: usize = man.blocks.iter().map(|b| b.len).sum();
    if data.len() != total * 8 {
        return Err(corrupt(format!("expected {} payload bytes, found {}", total * 8, data.len())));
    }
    let mut blocks = Vec::with_capacity(man.blocks.len());
    for b in &man.blocks {
        let (head, rest) = data.split_at(b.len * 8);
        blocks.push(
            head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect::<Vec<f64>>(),
        );
        data = rest;
    }
    let (na, mb, mc) = (man.n_tasks, man.grid_b.cell_count(), man.grid_c.cell_count());
    let names: Vec<&str> = man.blocks.iter().map(|b| b.name.as_str()).collect();
    let bad = |e: Error| corrupt(e.to_string());
    let model = match man.kind.as_str() {
        "full" => {
            if names != ["W", "bias"] {
                return Err(corrupt(format!("unexpected blocks {names:?}")));
            }
            let mut it = blocks.into_iter();
            let w = DenseTensor3::from_vec((na, mb, mc), it.next().expect("W")).map_err(bad)?;
            let bias = it.next().expect("bias");
            AnyModel::Full(FullTensorModel::new(w, bias, man.grid_b, man.grid_c).map_err(bad)?)
        }
        "factored" => {
            if names != ["A", "B", "C", "Us", "Vs", "Ws", "bias"] {
                return Err(corrupt(format!("unexpected blocks {names:?}")));
            }
            let (kd, ks) = (man.rank_dense, man.rank_sparse);
            let mut it = blocks.into_iter();
            let mut mat = |rows, cols| Mat::from_vec(rows, cols, it.next().expect("block")).map_err(bad);
            let dense = CpFactors::new(mat(na, kd)?, mat(mb, kd)?, mat(mc, kd)?).map_err(bad)?;
            let sparse = CpFactors::new(mat(na, ks)?, mat(mb, ks)?, mat(mc, ks)?).map_err(bad)?;
            let bias = it.next().expect("bias");
            AnyModel::Factored(FactoredModel::new(dense, sparse, bias, man.grid_b, man.grid_c).map_err(bad)?)
        }
        other => return Err(corrupt(format!("unknown model kind {other:?}"))),
    };
    Ok(Checkpoint {
        model,
        segment: man.segment,
        stage: man.stage,
        trained: man.trained,
        examples_consumed: man.examples_consumed,
    })
}

pub fn save(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(ck)?)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(r: usize, c: usize) -> Grid {
        Grid::new(r, c, 1.0, [0.0, 0.0]).unwrap()
    }

    fn factored() -> FactoredModel {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = (3, 6, 4);
        FactoredModel::new(
            CpFactors::random_uniform(dims, 2, 1.0, &mut rng),
            CpFactors::random_uniform(dims, 1, 1.0, &mut rng),
            vec![0.1, -0.2, 1.0 / 3.0],
            grid(2, 3),
            grid(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let full = FullTensorModel::new(
            DenseTensor3::from_fn((2, 4, 1), |a, b, _| (a as f64 + 0.1) / (b as f64 + 7.0)),
            vec![f64::MIN_POSITIVE, -0.0],
            grid(2, 2),
            grid(1, 1),
        )
        .unwrap();
        for model in [AnyModel::Full(full), AnyModel::Factored(factored())] {
            let ck = Checkpoint { model, segment: 3, stage: 2, trained: true, examples_consumed: 1234 };
            let back = from_bytes(&to_bytes(&ck).unwrap()).unwrap();
            assert_eq!(back, ck);
            for (x, y) in back.model.as_dyn().blocks().iter().zip(ck.model.as_dyn().blocks()) {
                assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ck = Checkpoint {
            model: AnyModel::Factored(factored()),
            segment: 0,
            stage: 0,
            trained: false,
            examples_consumed: 0,
        };
        let bytes = to_bytes(&ck).unwrap();
        assert!(matches!(from_bytes(b"not a checkpoint at all"), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(from_bytes(&v), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..30]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint {
            model: AnyModel::Factored(factored()),
            segment: 1,
            stage: 1,
            trained: false,
            examples_consumed: 7,
        };
        save(&p, &ck).unwrap();
        assert_eq!(load(&p).unwrap(), ck);
        assert!(matches!(load(dir.path().join("none")), Err(Error::Io(_))));
    }
}
