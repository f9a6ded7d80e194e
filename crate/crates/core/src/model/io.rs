//! Weight file: the magic `OSPDW1`, then the seven config fields as
//! little-endian `u32` in the order n_layers, n_heads, d_model, head_dim,
//! vocab_size, max_seq, seed, then every matrix in declaration order as
//! row-major little-endian `f64`. Matrix shapes are implied by the config.

use std::io::{Read, Write};

use super::{init_model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const WEIGHTS_MAGIC: &[u8; 6] = b"OSPDW1";

pub fn write_weights<W: Write>(weights: &Weights, mut out: W) -> Result<()> {
    let c = weights.config();
    out.write_all(WEIGHTS_MAGIC)?;
    for field in [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.head_dim,
        c.vocab_size,
        c.max_seq,
    ] {
        let v = u32::try_from(field).map_err(|_| Error::WeightFile("config field exceeds u32".into()))?;
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&c.seed.to_le_bytes())?;
    for m in weights.matrices() {
        for v in m.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<Weights> {
    let mut magic = [0u8; 6];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::WeightFile("truncated header".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::WeightFile("bad magic".into()));
    }
    let mut fields = [0u32; 7];
    for f in &mut fields {
        let mut b = [0u8; 4];
        input
            .read_exact(&mut b)
            .map_err(|_| Error::WeightFile("truncated config".into()))?;
        *f = u32::from_le_bytes(b);
    }
    let config = ModelConfig {
        n_layers: fields[0] as usize,
        n_heads: fields[1] as usize,
        d_model: fields[2] as usize,
        head_dim: fields[3] as usize,
        vocab_size: fields[4] as usize,
        max_seq: fields[5] as usize,
        seed: fields[6],
    };
    // Shapes come from a freshly built model; every entry is then overwritten.
    let mut weights = init_model(config)?;
    let mut read_into = |m: &mut Matrix| -> Result<()> {
        let mut b = [0u8; 8];
        for v in m.data_mut() {
            input
                .read_exact(&mut b)
                .map_err(|_| Error::WeightFile("truncated matrix data".into()))?;
            *v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::WeightFile("non-finite weight".into()));
            }
        }
        Ok(())
    };
    read_into(&mut weights.embedding)?;
    for l in &mut weights.layers {
        for m in [
            &mut l.attn_norm,
            &mut l.wq,
            &mut l.wk,
            &mut l.wv,
            &mut l.wo,
            &mut l.mlp_norm,
            &mut l.w_up,
            &mut l.w_down,
        ] {
            read_into(m)?;
        }
    }
    read_into(&mut weights.final_norm)?;
    read_into(&mut weights.unembed)?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::WeightFile("trailing bytes".into()));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            head_dim: 4,
            vocab_size: 10,
            max_seq: 16,
            seed: 3,
        }
    }

    #[test]
    fn layout_and_round_trip() {
        let w = init_model(cfg()).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        assert_eq!(&buf[..6], b"OSPDW1");
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[30..34], &3u32.to_le_bytes());
        // first matrix entry is embedding[0][0]
        assert_eq!(&buf[34..42], &w.embedding.get(0, 0).to_le_bytes());
        let entries: usize = w.matrices().iter().map(|m| m.data().len()).sum();
        assert_eq!(buf.len(), 6 + 7 * 4 + 8 * entries);
        assert_eq!(read_weights(buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn rejects_corruption() {
        let w = init_model(cfg()).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        assert!(read_weights(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_weights(extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_weights(bad.as_slice()).is_err());
    }
}
