//! Binary checkpoint: magic tag, JSON config record, named parameter
//! blobs, codebook blobs, and the docid table. Round-trips are bitwise.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codebook::Codebook;
use crate::model::ModelConfig;
use crate::numeric::{Matrix, ParameterStore};
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"GENRET1";

pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parameters: ParameterStore,
    pub codebook: Codebook,
    pub docid_table: BTreeMap<String, Vec<String>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ConfigRecord {
    model: ModelConfig,
    train: TrainConfig,
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint("length exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
}

/// Name-tagged matrix blob: name, rows, cols, then row-major f64 LE.
fn write_matrix(w: &mut impl Write, name: &str, m: &Matrix) -> Result<()> {
    write_str(w, name)?;
    write_u32(w, m.rows)?;
    write_u32(w, m.cols)?;
    for &v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<(String, Matrix)> {
    let name = read_str(r)?;
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((name, Matrix::from_vec(rows, cols, data)?))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;

    let config = ConfigRecord { model: ckpt.model.clone(), train: ckpt.train.clone() };
    let config_json = serde_json::to_string(&config)
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    write_str(&mut w, &config_json)?;

    write_u32(&mut w, ckpt.parameters.iter().count())?;
    for (name, param) in ckpt.parameters.iter() {
        write_matrix(&mut w, name, &param.value)?;
        w.write_all(&[u8::from(param.frozen)])?;
    }

    write_u32(&mut w, ckpt.codebook.steps.len())?;
    for (t, step) in ckpt.codebook.steps.iter().enumerate() {
        write_matrix(&mut w, &format!("codebook.step{}", t + 1), step)?;
    }

    let pairs: usize = ckpt.docid_table.values().map(|v| v.len()).sum();
    write_u32(&mut w, pairs)?;
    for (key, members) in &ckpt.docid_table {
        for doc_id in members {
            write_str(&mut w, key)?;
            write_str(&mut w, doc_id)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}: not a checkpoint or wrong version",
            String::from_utf8_lossy(&magic)
        )));
    }
    let config: ConfigRecord = serde_json::from_str(&read_str(&mut r)?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;

    let mut parameters = ParameterStore::new();
    let n_params = read_u32(&mut r)?;
    for _ in 0..n_params {
        let (name, value) = read_matrix(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        parameters.insert(&name, value);
        parameters.set_frozen(&name, flag[0] != 0)?;
    }

    let m = read_u32(&mut r)?;
    let mut steps = Vec::with_capacity(m);
    for _ in 0..m {
        steps.push(read_matrix(&mut r)?.1);
    }
    let codebook = Codebook::new(steps, config.model.k, config.model.m)?;

    let mut docid_table: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let pairs = read_u32(&mut r)?;
    for _ in 0..pairs {
        let key = read_str(&mut r)?;
        let doc_id = read_str(&mut r)?;
        docid_table.entry(key).or_default().push(doc_id);
    }

    Ok(Checkpoint {
        model: config.model,
        train: config.train,
        parameters,
        codebook,
        docid_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_checkpoint() -> Checkpoint {
        let model = ModelConfig { d: 4, v: 10, m: 2, k: 3, share_qp: true };
        let train = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut parameters = crate::model::init_parameters(&model, 40);
        let steps: Vec<Matrix> = (0..2)
            .map(|_| {
                let data = (0..3 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                Matrix::from_vec(3, 4, data).unwrap()
            })
            .collect();
        for (t, s) in steps.iter().enumerate() {
            parameters.insert(&format!("codebook.step{}", t + 1), s.clone());
        }
        parameters.set_frozen("codebook.step1", true).unwrap();
        let codebook = Codebook::new(steps, 3, 2).unwrap();
        let mut docid_table = BTreeMap::new();
        docid_table.insert("0-1".to_string(), vec!["a".to_string(), "b".to_string()]);
        docid_table.insert("2-2".to_string(), vec!["c".to_string()]);
        Checkpoint { model, train, parameters, codebook, docid_table }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.docid_table, ckpt.docid_table);
        assert_eq!(loaded.model.d, ckpt.model.d);
        assert_eq!(loaded.parameters.iter().count(), ckpt.parameters.iter().count());
        for (name, p) in ckpt.parameters.iter() {
            let q = loaded.parameters.get(name).unwrap();
            assert_eq!(q.frozen, p.frozen, "{name}");
            assert_eq!(q.value.rows, p.value.rows);
            for (a, b) in p.value.data.iter().zip(&q.value.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        for (a, b) in ckpt.codebook.steps.iter().zip(&loaded.codebook.steps) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Byte-identical re-save.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPTxxxxxxx").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic")),
            Err(e) => panic!("expected checkpoint error, got {e}"),
            Ok(_) => panic!("expected checkpoint error, got success"),
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("cut.ckpt");
        std::fs::write(&path2, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path2).is_err());
    }
}
