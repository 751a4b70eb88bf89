//! ScoreSet files: a little-endian `u32` header length, a JSON header, then
//! the verb, noun and action score matrices as TNS1 blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anticipation_core::evalkit::{ScoreSet, Task};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tns;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model_id: String,
    pub modality: String,
    /// Verb, noun and action class counts.
    pub sizes: [usize; 3],
    pub ids: Vec<String>,
}

pub fn write(path: &Path, set: &ScoreSet) -> Result<()> {
    let header = Header {
        model_id: set.model_id.clone(),
        modality: set.modality.clone(),
        sizes: Task::ALL.map(|t| set.task(t).shape()[1]),
        ids: set.ids.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(Error::json(path))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format {
        path: path.into(),
        reason: "header larger than 4 GiB".into(),
    })?;
    let f = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(f);
    let mut go = || -> std::io::Result<()> {
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&json)?;
        for t in Task::ALL {
            tns::encode(&mut w, set.task(t))?;
        }
        w.flush()
    };
    go().map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<ScoreSet> {
    let f = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(f);
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(Error::io(path))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(Error::io(path))?;
    let header: Header = serde_json::from_slice(&json).map_err(Error::json(path))?;
    let mut blocks = Vec::with_capacity(3);
    for (t, &c) in Task::ALL.iter().zip(&header.sizes) {
        let block = tns::decode(&mut r).map_err(|e| tns::format_error(path, e))?;
        if block.shape() != [header.ids.len(), c] {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("{} block has shape {:?}", t.name(), block.shape()),
            });
        }
        blocks.push(block);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(Error::io(path))? != 0 {
        return Err(Error::Format {
            path: path.into(),
            reason: "trailing bytes after score blocks".into(),
        });
    }
    let action = blocks.pop().expect("three blocks");
    let noun = blocks.pop().expect("three blocks");
    let verb = blocks.pop().expect("three blocks");
    Ok(ScoreSet::new(header.model_id, header.modality, header.ids, verb, noun, action)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use anticipation_core::Tensor;

    fn uniform(n: usize, c: usize) -> Tensor<f32> {
        Tensor::full(&[n, c], 1.0 / c as f32)
    }

    fn sample_set() -> ScoreSet {
        let action = Tensor::new(&[2, 3], vec![0.2, 0.3, 0.5, 0.7, 0.1, 0.2]).unwrap();
        ScoreSet::new("m", "rgb", vec!["a".into(), "b".into()], uniform(2, 2), uniform(2, 4), action).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.scores");
        let set = sample_set();
        write(&p, &set).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(back, set);
        write(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn layout_starts_with_header_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.scores");
        write(&p, &sample_set()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let h: Header = serde_json::from_slice(&bytes[4..4 + n]).unwrap();
        assert_eq!(h.sizes, [2, 4, 3]);
        assert_eq!(&bytes[4 + n..8 + n], b"TNS1");
    }

    #[test]
    fn truncated_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.scores");
        write(&p, &sample_set()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read(&p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&p, extra).unwrap();
        assert!(matches!(read(&p), Err(Error::Format { .. })));
    }
}
