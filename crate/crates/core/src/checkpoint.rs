//! Binary checkpoint format for parameter sets.
//!
//! Little-endian layout: magic "MSFW", version u32 = 1, then one record
//! per parameter in registration order: name length u32, UTF-8 name,
//! rank u32, dims u32 * rank, f64 payload. Loading demands an exact
//! name-for-name, shape-for-shape match with the target model and
//! reports every discrepancy at once.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MsfError, Result};
use crate::tape::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSFW";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> MsfError {
    MsfError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(set: &ParamSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| out.write_all(bytes).map_err(|e| io_err(path, e));
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    for p in set.iter() {
        let name = p.name.as_bytes();
        emit(&(name.len() as u32).to_le_bytes())?;
        emit(name)?;
        emit(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &dim in p.value.shape() {
            emit(&(dim as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            emit(&v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Read every record of a checkpoint file as (name, tensor) pairs.
pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |detail: String| MsfError::Format {
        path: path.display().to_string(),
        detail,
    };

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not an MSFW checkpoint".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }

    let mut records = Vec::new();
    loop {
        match input.read_exact(&mut u32buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io_err(path, e)),
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        input.read_exact(&mut name_buf).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| bad("parameter name is not UTF-8".into()))?;
        input.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 8];
        input.read_exact(&mut payload).map_err(|e| io_err(path, e))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Load a checkpoint into an existing parameter set. Any missing, extra,
/// or misshapen record fails the whole load with a per-field report.
pub fn load_into(set: &mut ParamSet, path: &Path) -> Result<()> {
    let records = read_records(path)?;
    let mut report = String::new();
    let mut matched: Vec<Option<Tensor>> = vec![None; set.len()];
    for (name, tensor) in records {
        match set.id_of(&name) {
            None => report.push_str(&format!("  extra record '{name}' not in model\n")),
            Some(id) => {
                let want = set.get(id).value.shape();
                if want != tensor.shape() {
                    report.push_str(&format!(
                        "  '{name}': checkpoint shape {:?}, model expects {:?}\n",
                        tensor.shape(),
                        want
                    ));
                } else if matched[id.0].is_some() {
                    report.push_str(&format!("  duplicate record '{name}'\n"));
                } else {
                    matched[id.0] = Some(tensor);
                }
            }
        }
    }
    for (i, slot) in matched.iter().enumerate() {
        if slot.is_none() {
            let name = &set.iter().nth(i).unwrap().name;
            report.push_str(&format!("  model parameter '{name}' missing from checkpoint\n"));
        }
    }
    if !report.is_empty() {
        return Err(MsfError::CheckpointMismatch { report });
    }
    for (i, slot) in matched.into_iter().enumerate() {
        set.get_mut(crate::tape::ParamId(i)).value = slot.unwrap();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut set = ParamSet::new();
        set.add("w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.25]).unwrap(), true);
        set.add("b", Tensor::new(vec![3], vec![-0.0, 0.5, f64::MIN_POSITIVE]).unwrap(), false);
        set
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("msf_ckpt_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let set = sample_set();
        let path = tmp("rt.msfw");
        save(&set, &path).unwrap();
        let mut loaded = sample_set();
        for p in loaded.iter_mut() {
            for v in p.value.data_mut() {
                *v = 99.0;
            }
        }
        load_into(&mut loaded, &path).unwrap();
        for (a, b) in set.iter().zip(loaded.iter()) {
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "parameter {} not bitwise equal", a.name);
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn save_is_byte_deterministic() {
        let set = sample_set();
        let pa = tmp("det_a.msfw");
        let pb = tmp("det_b.msfw");
        save(&set, &pa).unwrap();
        save(&set, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        std::fs::remove_file(&pa).unwrap();
        std::fs::remove_file(&pb).unwrap();
    }

    #[test]
    fn mismatch_report_names_every_problem() {
        let set = sample_set();
        let path = tmp("mismatch.msfw");
        save(&set, &path).unwrap();
        let mut other = ParamSet::new();
        other.add("w", Tensor::zeros(&[2, 4]), true);
        other.add("extra_param", Tensor::zeros(&[1]), false);
        let err = load_into(&mut other, &path).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("'w'"), "shape clash not reported: {text}");
        assert!(text.contains("extra record 'b'"), "extra not reported: {text}");
        assert!(
            text.contains("'extra_param' missing"),
            "missing not reported: {text}"
        );
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_is_format_error() {
        let path = tmp("magic.msfw");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            read_records(&path),
            Err(MsfError::Format { .. })
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_payload_is_error() {
        let set = sample_set();
        let path = tmp("trunc.msfw");
        save(&set, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_records(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
