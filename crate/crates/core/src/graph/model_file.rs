//! `BFCN` model files.
//!
//! ```text
//! "BFCN" | version u8 | num_classes u16 | layer count u16
//! per layer: kind u8 | in,out,kh,kw,stride,pad u16 | k_w u8 | k_a u8 | name | inputs (u8 count + names)
//! scale count u8 | per scale: stride u16 | name
//! params, buffers, velocity: u32 count | per tensor: name | float BTSR block
//! ```
//! Names are u16 length-prefixed UTF-8; all integers little-endian. A plain
//! model has an empty velocity section; checkpoints fill it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerKind, LayerSpec, SegNet};
use crate::bitconv::ConvGeom;
use crate::bitpack::{read_btsr, write_btsr_float, BtsrBlock};
use crate::error::{Error, Result};
use crate::quantize::QuantSpec;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BFCN";
const VERSION: u8 = 1;

/// A decoded model file; `velocity` is empty unless it is a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub net: SegNet,
    pub velocity: BTreeMap<String, Tensor>,
}

fn put_u16(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u16")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_name(out: &mut impl Write, name: &str) -> Result<()> {
    put_u16(out, name.len())?;
    out.write_all(name.as_bytes())?;
    Ok(())
}

fn get<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input.read_exact(&mut b)?;
    Ok(b)
}

fn get_u8(input: &mut impl Read) -> Result<u8> {
    Ok(get::<1>(input)?[0])
}

fn get_u16(input: &mut impl Read) -> Result<usize> {
    Ok(u16::from_le_bytes(get(input)?) as usize)
}

fn get_name(input: &mut impl Read) -> Result<String> {
    let len = get_u16(input)?;
    let mut b = vec![0u8; len];
    input.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("layer name: {e}")))
}

fn put_tensors(out: &mut impl Write, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        put_name(out, name)?;
        write_btsr_float(out, t)?;
    }
    Ok(())
}

fn get_tensors(input: &mut impl Read) -> Result<BTreeMap<String, Tensor>> {
    let count = u32::from_le_bytes(get(input)?);
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name = get_name(input)?;
        let t = match read_btsr(input)? {
            BtsrBlock::Float { shape, values } => Tensor::from_vec(shape, values.into_iter().map(f64::from).collect())?,
            BtsrBlock::Planes(_) => return Err(Error::Format(format!("tensor {name} is not a float block"))),
        };
        map.insert(name, t);
    }
    Ok(map)
}

pub fn write_model(out: &mut impl Write, net: &SegNet, velocity: Option<&BTreeMap<String, Tensor>>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    put_u16(out, net.num_classes)?;
    put_u16(out, net.layers.len())?;
    for layer in &net.layers {
        out.write_all(&[layer.kind.code()])?;
        let g = layer.geom.map_or([0; 6], |g| [g.in_ch, g.out_ch, g.kh, g.kw, g.stride, g.pad]);
        for v in g {
            put_u16(out, v)?;
        }
        out.write_all(&[layer.quant.k_w as u8, layer.quant.k_a as u8])?;
        put_name(out, &layer.name)?;
        out.write_all(&[layer.inputs.len() as u8])?;
        for input in &layer.inputs {
            put_name(out, input)?;
        }
    }
    out.write_all(&[net.scales.len() as u8])?;
    for (stride, name) in &net.scales {
        put_u16(out, *stride)?;
        put_name(out, name)?;
    }
    put_tensors(out, &net.params)?;
    put_tensors(out, &net.buffers)?;
    put_tensors(out, velocity.unwrap_or(&BTreeMap::new()))?;
    Ok(())
}

pub fn read_model(input: &mut impl Read) -> Result<ModelFile> {
    let magic: [u8; 4] = get(input)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad model magic {magic:?}")));
    }
    let version = get_u8(input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let num_classes = get_u16(input)?;
    let n_layers = get_u16(input)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = LayerKind::from_code(get_u8(input)?)?;
        let mut g = [0usize; 6];
        for v in &mut g {
            *v = get_u16(input)?;
        }
        let geom =
            (g[0] != 0).then_some(ConvGeom { in_ch: g[0], out_ch: g[1], kh: g[2], kw: g[3], stride: g[4], pad: g[5] });
        let [k_w, k_a] = get::<2>(input)?;
        let quant = QuantSpec::new(k_w as u32, k_a as u32)?;
        let name = get_name(input)?;
        let n_inputs = get_u8(input)?;
        let inputs = (0..n_inputs).map(|_| get_name(input)).collect::<Result<_>>()?;
        layers.push(LayerSpec { name, kind, geom, quant, inputs });
    }
    let n_scales = get_u8(input)?;
    let mut scales = Vec::with_capacity(n_scales as usize);
    for _ in 0..n_scales {
        let stride = get_u16(input)?;
        scales.push((stride, get_name(input)?));
    }
    let params = get_tensors(input)?;
    let buffers = get_tensors(input)?;
    let velocity = get_tensors(input)?;
    let net = SegNet { layers, num_classes, scales, params, buffers };
    net.validate()?;
    for layer in &net.layers {
        for (prefix, g) in layer.convs() {
            let w = net
                .params
                .get(&format!("{prefix}.w"))
                .ok_or_else(|| Error::Format(format!("missing weights for {prefix}")))?;
            if w.shape != g.weight_shape() {
                return Err(Error::Format(format!("weights of {prefix} have shape {:?}", w.shape)));
            }
        }
    }
    Ok(ModelFile { net, velocity })
}

pub fn save_model(path: &Path, net: &SegNet, velocity: Option<&BTreeMap<String, Tensor>>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(&mut out, net, velocity)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    read_model(&mut BufReader::new(File::open(path)?))
}
