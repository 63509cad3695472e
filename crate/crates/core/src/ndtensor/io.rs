//! NDT1 tensor files: magic `NDT1`, rank as u32 LE, dims as u32 LE each,
//! then the raw little-endian f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const NDT1_MAGIC: &[u8; 4] = b"NDT1";

pub fn write_ndt1_to<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(NDT1_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_ndt1(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ndt1_to(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_ndt1_from<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NDT1_MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}, expected NDT1", magic)));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn read_ndt1(path: &Path) -> Result<Tensor<f32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_ndt1_from(&mut f)
}
