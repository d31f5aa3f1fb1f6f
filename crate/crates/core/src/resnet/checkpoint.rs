//! Checkpoint container ("PMCK"): the network configuration plus every
//! layer's arrays, keyed by layer path, as little-endian 32-bit floats with
//! a trailing checksum. Reading validates the configuration, requires the
//! stored layer sequence to be exactly the one the configuration implies,
//! and checks every shape, so a loaded parameter set is structurally sound
//! by construction.

use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{ByteReader, ByteWriter};
use crate::resnet::network::NetworkConfig;
use crate::resnet::params::{LayerParams, LayerPath, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_CONV: u8 = 0;
const KIND_NORM: u8 = 1;
const KIND_DENSE: u8 = 2;

fn put_tensor<S: Scalar>(w: &mut ByteWriter, t: &Tensor<S>) {
    w.put_u8(t.ndim() as u8);
    for &d in t.shape() {
        w.put_u32(d as u32);
    }
    for &v in t.data() {
        w.put_f32(v.as_f64() as f32);
    }
}

fn read_tensor<S: Scalar>(r: &mut ByteReader, expect_shape: &[usize]) -> Result<Tensor<S>> {
    let ndim = r.u8()? as usize;
    if ndim != expect_shape.len() {
        return Err(r.invalid(format!(
            "array has {ndim} axes, layer calls for {}",
            expect_shape.len()
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    if shape != expect_shape {
        return Err(r.invalid(format!(
            "array shape {shape:?} does not match the configuration's {expect_shape:?}"
        )));
    }
    let len = shape.iter().product();
    let values = r.f32_vec(len)?;
    let mut t = Tensor::zeros(shape)?;
    for (dst, v) in t.data_mut().iter_mut().zip(values) {
        *dst = S::from_f64(v as f64);
    }
    Ok(t)
}

/// Serializes a parameter set. Values are narrowed to 32 bits; with the
/// default `f32` scalar the roundtrip is bit-exact.
pub fn write_checkpoint<S: Scalar>(params: &ParameterSet<S>) -> Vec<u8> {
    let mut w = ByteWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    let c = params.config();
    w.put_u32(c.depth_param_n as u32);
    for &width in &c.stage_widths {
        w.put_u32(width as u32);
    }
    w.put_u32(c.input_channels as u32);
    w.put_u32(c.input_extent as u32);
    w.put_u32(c.num_classes as u32);
    w.put_f64(c.dropout_keep);

    w.put_u32(params.entries().len() as u32);
    for (path, layer) in params.entries() {
        w.put_str(&path.to_string());
        match layer {
            LayerParams::Conv { weights, stride } => {
                w.put_u8(KIND_CONV);
                w.put_u8(*stride as u8);
                put_tensor(&mut w, weights);
            }
            LayerParams::Norm {
                scale,
                shift,
                running_mean,
                running_var,
                momentum,
            } => {
                w.put_u8(KIND_NORM);
                w.put_f64(*momentum);
                put_tensor(&mut w, scale);
                put_tensor(&mut w, shift);
                put_tensor(&mut w, running_mean);
                put_tensor(&mut w, running_var);
            }
            LayerParams::Dense { weights, bias } => {
                w.put_u8(KIND_DENSE);
                put_tensor(&mut w, weights);
                put_tensor(&mut w, bias);
            }
        }
    }
    w.finish()
}

/// Expected shape of each array of the layer at `path`, derived from the
/// configuration alone.
struct LayerShape {
    kind: u8,
    weights: Vec<usize>,
    channels: usize,
}

fn expected_shape(config: &NetworkConfig, path: LayerPath) -> LayerShape {
    let widths = config.stage_widths;
    let width_of = |stage: u8| widths[stage as usize - 1];
    let input_of = |stage: u8, block: u8| {
        if block > 0 {
            width_of(stage)
        } else if stage == 1 {
            widths[0]
        } else {
            width_of(stage - 1)
        }
    };
    match path {
        LayerPath::StemConv => LayerShape {
            kind: KIND_CONV,
            weights: vec![widths[0], config.input_channels, 3, 3],
            channels: 0,
        },
        LayerPath::StemNorm => LayerShape {
            kind: KIND_NORM,
            weights: vec![],
            channels: widths[0],
        },
        LayerPath::BlockConv {
            stage,
            block,
            which,
        } => {
            let w = width_of(stage);
            let cin = if which == 0 { input_of(stage, block) } else { w };
            LayerShape {
                kind: KIND_CONV,
                weights: vec![w, cin, 3, 3],
                channels: 0,
            }
        }
        LayerPath::BlockNorm { stage, .. } | LayerPath::ProjNorm { stage, .. } => LayerShape {
            kind: KIND_NORM,
            weights: vec![],
            channels: width_of(stage),
        },
        LayerPath::ProjConv { stage, block } => LayerShape {
            kind: KIND_CONV,
            weights: vec![width_of(stage), input_of(stage, block), 1, 1],
            channels: 0,
        },
        LayerPath::Fc => LayerShape {
            kind: KIND_DENSE,
            weights: vec![config.num_classes, widths[2]],
            channels: 0,
        },
    }
}

/// Parses and validates a checkpoint. The checksum is verified before the
/// parameter set is handed out.
pub fn read_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<ParameterSet<S>> {
    let mut r = ByteReader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config = NetworkConfig {
        depth_param_n: r.u32()? as usize,
        stage_widths: [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize],
        input_channels: r.u32()? as usize,
        input_extent: r.u32()? as usize,
        num_classes: r.u32()? as usize,
        dropout_keep: r.f64()?,
    };
    if let Err(e) = config.validate() {
        return Err(r.invalid(format!("stored configuration is invalid: {e}")));
    }
    let expected_paths = config.layer_paths();
    let count = r.u32()? as usize;
    if count != expected_paths.len() {
        return Err(r.invalid(format!(
            "checkpoint stores {count} layers, configuration implies {}",
            expected_paths.len()
        )));
    }

    let mut entries = Vec::with_capacity(count);
    for &expect in &expected_paths {
        let name = r.str()?;
        let path = LayerPath::parse(&name)
            .ok_or_else(|| r.invalid(format!("unknown layer path {name:?}")))?;
        if path != expect {
            return Err(r.invalid(format!(
                "layer {name} out of order; expected {expect}"
            )));
        }
        let shape = expected_shape(&config, path);
        let kind = r.u8()?;
        if kind != shape.kind {
            return Err(r.invalid(format!("layer {name} has kind tag {kind}")));
        }
        let layer = match kind {
            KIND_CONV => {
                let stride = r.u8()? as usize;
                if !(1..=2).contains(&stride) {
                    return Err(r.invalid(format!("layer {name} stride {stride}")));
                }
                LayerParams::Conv {
                    weights: read_tensor(&mut r, &shape.weights)?,
                    stride,
                }
            }
            KIND_NORM => {
                let momentum = r.f64()?;
                if !(0.0..1.0).contains(&momentum) {
                    return Err(r.invalid(format!("layer {name} momentum {momentum}")));
                }
                let c = [shape.channels];
                LayerParams::Norm {
                    momentum,
                    scale: read_tensor(&mut r, &c)?,
                    shift: read_tensor(&mut r, &c)?,
                    running_mean: read_tensor(&mut r, &c)?,
                    running_var: read_tensor(&mut r, &c)?,
                }
            }
            KIND_DENSE => LayerParams::Dense {
                weights: read_tensor(&mut r, &shape.weights)?,
                bias: read_tensor(&mut r, &[config.num_classes])?,
            },
            _ => return Err(r.invalid(format!("layer {name} has kind tag {kind}"))),
        };
        entries.push((path, layer));
    }
    r.finish()?;
    Ok(ParameterSet::from_entries(config, entries))
}

pub fn save_checkpoint<S: Scalar>(path: &Path, params: &ParameterSet<S>) -> Result<()> {
    std::fs::write(path, write_checkpoint(params))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParameterSet<S>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    read_checkpoint(&bytes)
}
