//! Checkpoint format `AMC1`: the spec header followed by every named
//! parameter as little-endian f32 with explicit shape.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelSpec, ModelState, NamedTensor, Variant};
use crate::binio::{len_u32, Reader, Writer};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AMC1";

pub fn write_checkpoint<T: Scalar, W: Write>(state: &ModelState<T>, out: W) -> Result<W> {
    let mut w = Writer::new(out, "<checkpoint>");
    write_into(state, &mut w)?;
    w.finish()
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let mut w = Writer::create(path)?;
    write_into(state, &mut w)?;
    w.finish().map(drop)
}

fn write_into<T: Scalar, W: Write>(state: &ModelState<T>, w: &mut Writer<W>) -> Result<()> {
    let spec = state.spec();
    w.bytes(MAGIC)?;
    w.u32(spec.variant.code())?;
    w.u32(len_u32(spec.base_channels, "base_channels")?)?;
    w.u32(len_u32(spec.dilation_rates.len(), "rate count")?)?;
    for &d in &spec.dilation_rates {
        w.u32(len_u32(d, "dilation rate")?)?;
    }
    w.u32(len_u32(spec.input_size.0, "input height")?)?;
    w.u32(len_u32(spec.input_size.1, "input width")?)?;
    w.u64(spec.init_seed)?;
    w.f64(spec.dropout_p)?;
    w.u32(len_u32(state.params().len(), "parameter count")?)?;
    for p in state.params() {
        w.u32(len_u32(p.name.len(), "name length")?)?;
        w.bytes(p.name.as_bytes())?;
        w.u32(len_u32(p.tensor.shape().len(), "rank")?)?;
        for &d in p.tensor.shape() {
            w.u32(len_u32(d, "extent")?)?;
        }
        w.f32s(p.tensor.data().iter().map(|v| v.to_f64_lossy() as f32))?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<ModelState<f32>> {
    read_from(Reader::new(input, "<checkpoint>"))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    read_from(Reader::open(path)?)
}

fn read_from<R: Read>(mut r: Reader<R>) -> Result<ModelState<f32>> {
    r.magic(MAGIC)?;
    let code = r.u32()?;
    let variant = Variant::from_code(code).ok_or_else(|| r.fail(format!("unknown variant code {code}")))?;
    let base_channels = r.u32()? as usize;
    let n_rates = r.u32()? as usize;
    if n_rates > 64 {
        return Err(r.fail(format!("implausible dilation rate count {n_rates}")));
    }
    let dilation_rates = (0..n_rates).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let input_size = (r.u32()? as usize, r.u32()? as usize);
    let init_seed = r.u64()?;
    let dropout_p = r.f64()?;
    let spec = ModelSpec { variant, base_channels, dilation_rates, input_size, init_seed, dropout_p };
    spec.validate().map_err(|e| r.fail(format!("invalid spec: {e}")))?;

    let mut expected = Vec::new();
    for layer in spec.layer_plan() {
        expected.push((format!("{}.weight", layer.name), layer.weight_shape().to_vec()));
        expected.push((format!("{}.bias", layer.name), vec![layer.out_channels]));
    }
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(r.fail(format!("expected {} parameter tensors, found {count}", expected.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in expected {
        let len = r.u32()? as usize;
        if len > 256 {
            return Err(r.fail(format!("implausible parameter name length {len}")));
        }
        let got = String::from_utf8(r.bytes(len)?).map_err(|_| r.fail("parameter name is not UTF-8"))?;
        if got != name {
            return Err(r.fail(format!("expected parameter `{name}`, found `{got}`")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank.min(8)).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(r.fail(format!("parameter `{name}` has shape {dims:?}, expected {shape:?}")));
        }
        let data = r.f32s(shape.iter().product())?;
        params.push(NamedTensor { name, tensor: Tensor::new(shape, data)? });
    }
    r.finish()?;
    Ok(ModelState::from_parts(spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = ModelSpec::new(Variant::AmcNet).with_base_channels(2).with_input_size(32, 32).with_seed(11);
        let state = ModelState::<f32>::build(&spec).unwrap();
        let bytes = write_checkpoint(&state, Vec::new()).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, state);
        assert_eq!(write_checkpoint(&back, Vec::new()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let spec = ModelSpec::new(Variant::UNet).with_base_channels(1).with_input_size(16, 16);
        let bytes = write_checkpoint(&ModelState::<f32>::build(&spec).unwrap(), Vec::new()).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }
}
