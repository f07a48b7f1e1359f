//! Binary parameter checkpoints.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "RSTCKPT1" | id_len | id bytes | layer_count
//! per layer: tensor_count | has_running (u8)
//!   per tensor: ndim | dims... | f32 payload | has_mask (u8) | mask bytes (0/1)
//!   if has_running: features | f32 mean | f32 var
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Element, RunningStats};

use super::{Model, ModelSpec};

const MAGIC: &[u8; 8] = b"RSTCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub tensors: Vec<TensorRecord>,
    pub running: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_id: String,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &Model<T>, masks: &[(usize, &[bool])]) -> Self {
        let layers = (0..model.spec().layers.len())
            .map(|li| LayerRecord {
                tensors: model
                    .layer_params(li)
                    .map(|pi| {
                        let p = &model.params()[pi];
                        TensorRecord {
                            shape: p.shape().to_vec(),
                            data: p.data().iter().map(|v| v.as_f64() as f32).collect(),
                            mask: masks.iter().find(|(i, _)| *i == pi).map(|(_, m)| m.to_vec()),
                        }
                    })
                    .collect(),
                running: model.running_stats()[li].as_ref().map(|r| {
                    (
                        r.mean.iter().map(|v| v.as_f64() as f32).collect(),
                        r.var.iter().map(|v| v.as_f64() as f32).collect(),
                    )
                }),
            })
            .collect();
        Self { model_id: model.spec().id.clone(), layers }
    }

    /// Rebuilds the model this checkpoint was written from.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let spec = ModelSpec::from_id(&self.model_id)?;
        let mut model = Model::zeroed(spec);
        load_checkpoint(&mut model, self)?;
        Ok(model)
    }
}

impl ModelSpec {
    /// Inverse of the `id` field for the built-in architectures.
    pub fn from_id(id: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown model id {id:?}"));
        let parts: Vec<&str> = id.split(':').collect();
        match parts.as_slice() {
            ["simple_cnn", width, classes] => {
                Self::simple_cnn_with_width(width.parse().map_err(|_| bad())?, classes.parse().map_err(|_| bad())?)
            }
            ["mlp", widths] => {
                let widths: Vec<usize> = widths.split('-').map(|w| w.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                Self::mlp(&widths)
            }
            _ => Err(bad()),
        }
    }
}

/// Copies checkpoint values into a model with a matching architecture.
pub fn load_checkpoint<T: Element>(model: &mut Model<T>, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.model_id != model.spec().id || ckpt.layers.len() != model.spec().layers.len() {
        return Err(Error::invalid(format!(
            "checkpoint for {} does not fit model {}",
            ckpt.model_id,
            model.spec().id
        )));
    }
    for (li, rec) in ckpt.layers.iter().enumerate() {
        let range = model.layer_params(li);
        if rec.tensors.len() != range.len() {
            return Err(Error::invalid(format!("layer {li}: tensor count mismatch")));
        }
        for (pi, t) in range.zip(&rec.tensors) {
            let p = &mut model.params_mut()[pi];
            if p.shape() != t.shape.as_slice() {
                return Err(Error::shape(format!("checkpoint layer {li}"), format!("{:?}", p.shape()), &t.shape));
            }
            for (dst, &src) in p.data_mut().iter_mut().zip(&t.data) {
                *dst = T::from_f64(src as f64);
            }
        }
        match (&mut model.running_stats_mut()[li], &rec.running) {
            (Some(stats), Some((mean, var))) if mean.len() == stats.mean.len() => {
                *stats = RunningStats {
                    mean: mean.iter().map(|&v| T::from_f64(v as f64)).collect(),
                    var: var.iter().map(|&v| T::from_f64(v as f64)).collect(),
                };
            }
            (None, None) => {}
            _ => return Err(Error::invalid(format!("layer {li}: running statistics mismatch"))),
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, ckpt.model_id.len());
    out.extend_from_slice(ckpt.model_id.as_bytes());
    put_u32(&mut out, ckpt.layers.len());
    for layer in &ckpt.layers {
        put_u32(&mut out, layer.tensors.len());
        out.push(layer.running.is_some() as u8);
        for t in &layer.tensors {
            put_u32(&mut out, t.shape.len());
            t.shape.iter().for_each(|&d| put_u32(&mut out, d));
            put_f32s(&mut out, &t.data);
            match &t.mask {
                Some(m) => {
                    out.push(1);
                    out.extend(m.iter().map(|&b| b as u8));
                }
                None => out.push(0),
            }
        }
        if let Some((mean, var)) = &layer.running {
            put_u32(&mut out, mean.len());
            put_f32s(&mut out, mean);
            put_f32s(&mut out, var);
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                what: "checkpoint",
                offset: self.pos,
                message: format!("truncated: need {n} more bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::invalid("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format { what: "checkpoint", offset: at, message: format!("expected 0/1 flag, got {b}") }),
        }
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format { what: "checkpoint", offset: 0, message: "bad magic".into() });
    }
    let id_len = c.u32()?;
    let model_id = String::from_utf8(c.take(id_len)?.to_vec())
        .map_err(|_| Error::Format { what: "checkpoint", offset: 12, message: "model id is not UTF-8".into() })?;
    let layer_count = c.u32()?;
    let mut layers = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        let tensor_count = c.u32()?;
        let has_running = c.flag()?;
        let mut tensors = Vec::new();
        for _ in 0..tensor_count {
            let ndim = c.u32()?;
            let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = c.f32s(n)?;
            let mask = if c.flag()? { Some(c.take(n)?.iter().map(|&b| b != 0).collect()) } else { None };
            tensors.push(TensorRecord { shape, data, mask });
        }
        let running = if has_running {
            let n = c.u32()?;
            Some((c.f32s(n)?, c.f32s(n)?))
        } else {
            None
        };
        layers.push(LayerRecord { tensors, running });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format { what: "checkpoint", offset: c.pos, message: "trailing bytes".into() });
    }
    Ok(Checkpoint { model_id, layers })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, ckpt)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_parameters_masks_and_stats() {
        let mut model = Model::init(ModelSpec::simple_cnn_with_width(2, 10).unwrap(), 5).unwrap();
        model.running_stats_mut()[1].as_mut().unwrap().mean[0] = 0.25;
        let mask: Vec<bool> = (0..model.params()[0].numel()).map(|i| i % 3 == 0).collect();
        let ckpt = Checkpoint::from_model(&model, &[(0, &mask)]);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.layers[0].tensors[0].mask.as_deref(), Some(mask.as_slice()));
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn truncation_reports_offset() {
        let model = Model::init(ModelSpec::mlp(&[3, 2]).unwrap(), 0).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &Checkpoint::from_model(&model, &[])).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_checkpoint(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { what: "checkpoint", .. }), "{err}");
    }
}
