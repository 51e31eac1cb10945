//! Flat binary policy checkpoints.
//!
//! Layout, all little-endian: four u64 header words
//! `family_tag, vocab_size, order, param_count`, then `param_count` f64
//! values in canonical order. For the linear family `order` holds the number
//! of length buckets. The eos id is not stored; readers supply it.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{Family, PolicyParams, TokenId, Vocabulary};

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut w: W) -> Result<()> {
    let family = params.family();
    for word in [
        family.tag(),
        params.vocab().size() as u64,
        family.order() as u64,
        params.dim() as u64,
    ] {
        w.write_all(&word.to_le_bytes())?;
    }
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, eos_id: TokenId) -> Result<PolicyParams> {
    let mut word = [0u8; 8];
    let mut header = [0u64; 4];
    for h in header.iter_mut() {
        r.read_exact(&mut word)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        *h = u64::from_le_bytes(word);
    }
    let [tag, vocab_size, order, count] = header;
    let vocab = Vocabulary::new(vocab_size as usize, eos_id)?;
    let family = Family::from_tag(tag, order as usize)?;
    let dim = family.dimension(&vocab)?;
    if count as usize != dim {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, family expects {dim}"
        )));
    }
    let mut values = Vec::with_capacity(dim);
    for i in 0..dim {
        r.read_exact(&mut word)
            .map_err(|e| Error::Checkpoint(format!("truncated at parameter {i}: {e}")))?;
        values.push(f64::from_le_bytes(word));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    PolicyParams::new(family, vocab, values)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path, eos_id: TokenId) -> Result<PolicyParams> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f), eos_id)
}
