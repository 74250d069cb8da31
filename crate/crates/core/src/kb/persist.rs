//! Binary persistence for the knowledge base.
//!
//! Single little-endian file:
//! magic `CGKB` | format version u32 | entry count u64 | embedding dim u32 |
//! serialized entries | raw f32 embedding matrix.
//!
//! Each entry: id u64, then length-prefixed (u32) UTF-8 question, answer,
//! source, then tag count u8 and one code byte per tag.

use super::{EmbeddingMatrix, KbError, KnowledgeBase, QAEntry, Tag};
use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CGKB";
const VERSION: u32 = 1;
/// Upper bound on any length-prefixed field, to fail fast on corrupt files.
const MAX_FIELD_BYTES: u32 = 64 << 20;

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<(), KbError> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), KbError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            KbError::Truncated
        } else {
            KbError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, KbError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, KbError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read) -> Result<String, KbError> {
    let len = read_u32(r)?;
    if len > MAX_FIELD_BYTES {
        return Err(KbError::Corrupt(format!("field length {len} exceeds limit")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| KbError::Corrupt(format!("invalid utf-8: {e}")))
}

impl KnowledgeBase {
    /// Persist the base, including embedding bytes, to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&(self.embeddings.dim() as u32).to_le_bytes())?;
        for entry in &self.entries {
            w.write_all(&entry.id.to_le_bytes())?;
            write_bytes(&mut w, entry.question.as_bytes())?;
            write_bytes(&mut w, entry.answer.as_bytes())?;
            write_bytes(&mut w, entry.source.as_bytes())?;
            w.write_all(&[entry.tags.len() as u8])?;
            for &tag in &entry.tags {
                w.write_all(&[tag.to_byte()])?;
            }
        }
        for value in self.embeddings.raw() {
            w.write_all(&value.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a base written by [`KnowledgeBase::save`]. Round-trips are
    /// field-for-field identical, including embedding bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(KbError::VersionMismatch);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(KbError::VersionMismatch);
        }
        let count = read_u64(&mut r)?;
        let dim = read_u32(&mut r)? as usize;

        let mut entries = Vec::with_capacity(count.min(1 << 24) as usize);
        for _ in 0..count {
            let id = read_u64(&mut r)?;
            let question = read_string(&mut r)?;
            let answer = read_string(&mut r)?;
            let source = read_string(&mut r)?;
            let mut ntags = [0u8; 1];
            read_exact(&mut r, &mut ntags)?;
            let mut tags = BTreeSet::new();
            for _ in 0..ntags[0] {
                let mut code = [0u8; 1];
                read_exact(&mut r, &mut code)?;
                let tag = Tag::from_byte(code[0])
                    .ok_or_else(|| KbError::Corrupt(format!("invalid tag code {}", code[0])))?;
                tags.insert(tag);
            }
            entries.push(QAEntry {
                id,
                question,
                answer,
                source,
                tags,
            });
        }

        let mut data = vec![0u8; count as usize * dim * 4];
        read_exact(&mut r, &mut data)?;
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(KbError::Corrupt("trailing bytes after matrix".into()));
        }

        let mut kb = KnowledgeBase::from_entries(entries)?;
        kb.set_embeddings(EmbeddingMatrix::from_raw(dim, floats));
        Ok(kb)
    }
}
