//! Flat binary weights file.
//!
//! ```text
//! magic        8 bytes  "PLORAW01"
//! layers       u32 LE
//! hidden       u32 LE
//! embed_dim    u32 LE
//! tensors      u32 LE   number of tensors that follow
//! per tensor:  u32 LE ndim, then ndim × u64 LE dims
//! data         f64 LE, tensors concatenated in header order, row-major
//! ```
//!
//! Tensor order is embedding, then `w`, `b` for each layer, then the head
//! weight and bias.

use std::io::{Read, Write};

use super::lstm::{LayerParams, LstmModel, LstmParams, ModelShape};
use super::PredictorError;

pub const MAGIC: &[u8; 8] = b"PLORAW01";

fn shapes(shape: ModelShape, rows: usize) -> Vec<Vec<u64>> {
    let h = shape.hidden as u64;
    let mut out = vec![vec![rows as u64, shape.embedding_dim as u64]];
    for l in 0..shape.layers {
        out.push(vec![4 * h, shape.input_dim(l) as u64 + h]);
        out.push(vec![4 * h]);
    }
    out.push(vec![h]);
    out.push(vec![1]);
    out
}

pub fn write_weights<W: Write>(model: &LstmModel, mut w: W) -> Result<(), PredictorError> {
    let shape = model.shape();
    w.write_all(MAGIC)?;
    for v in [shape.layers, shape.hidden, shape.embedding_dim] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let dims = shapes(shape, model.embedding_rows());
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        w.write_all(&(d.len() as u32).to_le_bytes())?;
        for x in d {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for t in model.params().tensors() {
        for x in t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PredictorError> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, PredictorError> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R, len: u64) -> Result<Vec<f64>, PredictorError> {
    (0..len).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

pub fn read_weights<R: Read>(mut r: R, seed: u64) -> Result<LstmModel, PredictorError> {
    let bad = |m: &str| PredictorError::Weights(m.to_string());
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a weights file"));
    }
    let shape = ModelShape {
        layers: read_u32(&mut r)? as usize,
        hidden: read_u32(&mut r)? as usize,
        embedding_dim: read_u32(&mut r)? as usize,
    };
    if shape.layers == 0 || shape.hidden == 0 {
        return Err(bad("empty model"));
    }
    let n = read_u32(&mut r)? as usize;
    let mut dims = Vec::with_capacity(n);
    for _ in 0..n {
        let nd = read_u32(&mut r)? as usize;
        if nd > 4 {
            return Err(bad("tensor rank too large"));
        }
        dims.push(
            (0..nd)
                .map(|_| read_u64(&mut r))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    let rows = dims.first().and_then(|d| d.first()).copied().unwrap_or(0) as usize;
    if dims != shapes(shape, rows) {
        return Err(bad("tensor shapes do not match the model header"));
    }
    let len = |d: &Vec<u64>| d.iter().product::<u64>();
    let embedding = read_tensor(&mut r, len(&dims[0]))?;
    let mut layers = Vec::with_capacity(shape.layers);
    for l in 0..shape.layers {
        let w = read_tensor(&mut r, len(&dims[1 + 2 * l]))?;
        let b = read_tensor(&mut r, len(&dims[2 + 2 * l]))?;
        layers.push(LayerParams { w, b });
    }
    let head_w = read_tensor(&mut r, shape.hidden as u64)?;
    let head_b = read_tensor(&mut r, 1)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(LstmModel::from_params(
        shape,
        LstmParams {
            embedding,
            layers,
            head_w,
            head_b,
        },
        seed,
    ))
}
