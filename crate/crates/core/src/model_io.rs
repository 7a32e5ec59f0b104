//! `EMOD` model files.
//!
//! Layout (little-endian): magic `"EMOD"`, `u16` version (1), `u32` layer
//! count, then per layer `u32` in, `u32` out, `u8` activation (0 identity,
//! 1 relu), `in·out` `f32` weights row-major, `out` `f32` biases.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::Result;
use crate::nn::{Activation, Dense, LayerStack};
use crate::tensor::Tensor;

const EMOD_MAGIC: &[u8; 4] = b"EMOD";
const EMOD_VERSION: u16 = 1;

pub fn model_to_bytes(model: &LayerStack) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(EMOD_MAGIC);
    w.u16(EMOD_VERSION);
    w.u32(binio::to_u32(model.len(), "layer count")?);
    for l in model.layers() {
        w.u32(binio::to_u32(l.in_dim(), "input width")?);
        w.u32(binio::to_u32(l.out_dim(), "output width")?);
        w.u8(match l.activation() {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
        w.f32s(l.weight().data());
        w.f32s(l.bias().data());
    }
    Ok(w.buf)
}

pub fn model_from_bytes(buf: &[u8], path: &Path) -> Result<LayerStack> {
    let mut r = Reader::new(buf, path);
    r.magic(EMOD_MAGIC)?;
    let version = r.u16("version")?;
    if version != EMOD_VERSION {
        return Err(r.corrupt_at(4, format!("unsupported version {version}")));
    }
    let count_pos = r.position();
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(r.corrupt_at(count_pos, "model has no layers"));
    }
    let mut layers = Vec::with_capacity(count.min(1024));
    for k in 0..count {
        let start = r.position();
        let in_dim = r.u32("input width")? as usize;
        let out_dim = r.u32("output width")? as usize;
        if in_dim == 0 || out_dim == 0 {
            return Err(r.corrupt_at(start, format!("layer {k} has shape {in_dim}x{out_dim}")));
        }
        let act_pos = r.position();
        let activation = match r.u8("activation")? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            a => return Err(r.corrupt_at(act_pos, format!("unknown activation {a}"))),
        };
        let n = in_dim
            .checked_mul(out_dim)
            .ok_or_else(|| r.corrupt("weight count overflows"))?;
        let weight = Tensor::matrix(in_dim, out_dim, r.f32s(n, "weights")?)?;
        let bias = Tensor::new(vec![out_dim], r.f32s(out_dim, "biases")?)?;
        if let Some(prev) = layers.last().map(Dense::out_dim) {
            if prev != in_dim {
                return Err(r.corrupt_at(
                    start,
                    format!("layer {k} takes {in_dim} inputs after a {prev}-wide layer"),
                ));
            }
        }
        layers.push(Dense::new(weight, bias, activation)?);
    }
    r.finish()?;
    LayerStack::new(layers)
}

pub fn save_model(path: &Path, model: &LayerStack) -> Result<()> {
    binio::write_file(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<LayerStack> {
    model_from_bytes(&binio::read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut r = rng::stream(8, "emod", &[]);
        let m = LayerStack::mlp(&[3, 5, 2], &mut r).unwrap();
        let bytes = model_to_bytes(&m).unwrap();
        assert_eq!(bytes.len(), 10 + 2 * 9 + 4 * (15 + 5 + 10 + 2));
        let back = model_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert!(back.param_values().zip(m.param_values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corruption_detected() {
        let mut r = rng::stream(8, "emod", &[]);
        let m = LayerStack::mlp(&[3, 5, 2], &mut r).unwrap();
        let bytes = model_to_bytes(&m).unwrap();
        let mut bad = bytes.clone();
        bad[18] = 7;
        assert!(matches!(model_from_bytes(&bad, Path::new("m")), Err(Error::Corrupt { offset: 18, .. })));
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 2], Path::new("m")),
            Err(Error::Corrupt { .. })
        ));
    }
}
