use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocationMethod {
    Uniform,
    /// Erdős–Rényi: scale `(n_in + n_out) / (n_in * n_out)`.
    Er,
    /// Erdős–Rényi-Kernel: adds the kernel extents for conv weights.
    Erk,
}

impl FromStr for AllocationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "er" => Ok(Self::Er),
            "erk" => Ok(Self::Erk),
            _ => Err(Error::invalid(format!("unknown allocation method {s:?} (uniform|er|erk)"))),
        }
    }
}

impl fmt::Display for AllocationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Er => "er",
            Self::Erk => "erk",
        })
    }
}

/// A sparsifiable weight tensor: `[out, in]` or `[out, in, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightShape {
    pub id: usize,
    pub shape: Vec<usize>,
}

impl WeightShape {
    pub fn new(id: usize, shape: impl Into<Vec<usize>>) -> Self {
        Self { id, shape: shape.into() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Relative density scale before the global constant is applied.
    pub fn scale(&self, method: AllocationMethod) -> f64 {
        let (n_out, n_in) = (self.shape[0] as f64, self.shape[1] as f64);
        let kernel = &self.shape[2..];
        match method {
            AllocationMethod::Uniform => 1.0,
            AllocationMethod::Er => (n_in + n_out) / (n_in * n_out),
            AllocationMethod::Erk if kernel.is_empty() => (n_in + n_out) / (n_in * n_out),
            AllocationMethod::Erk => {
                let ksum: f64 = kernel.iter().map(|&k| k as f64).sum();
                let kprod: f64 = kernel.iter().map(|&k| k as f64).product();
                (n_in + n_out + ksum) / (n_in * n_out * kprod)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityAllocation {
    pub method: AllocationMethod,
    pub global_density: f64,
    /// `(weight id, density)` in input order.
    pub per_layer: Vec<(usize, f64)>,
}

impl DensityAllocation {
    pub fn density_of(&self, id: usize) -> Option<f64> {
        self.per_layer.iter().find(|(i, _)| *i == id).map(|(_, d)| *d)
    }

    /// Layers forced to density 1 because their scaled share exceeded it.
    pub fn saturated(&self) -> Vec<usize> {
        self.per_layer.iter().filter(|(_, d)| *d >= 1.0).map(|(i, _)| *i).collect()
    }
}

/// Per-layer densities whose parameter-weighted mean equals `global_density`.
///
/// For ER/ERK each layer gets `min(1, c * scale)`; `c` is re-solved over the
/// unsaturated layers until no layer exceeds 1.
pub fn allocate_density(shapes: &[WeightShape], method: AllocationMethod, global_density: f64) -> Result<DensityAllocation> {
    if !(global_density > 0.0 && global_density <= 1.0) {
        return Err(Error::Allocation(format!("global density {global_density} outside (0, 1]")));
    }
    if shapes.is_empty() {
        return Err(Error::Allocation("no sparsifiable layers".into()));
    }
    if let Some(bad) = shapes.iter().find(|s| s.shape.len() < 2 || s.shape.contains(&0)) {
        return Err(Error::Allocation(format!("weight {} has unusable shape {:?}", bad.id, bad.shape)));
    }
    let densities = if method == AllocationMethod::Uniform || global_density == 1.0 {
        vec![global_density; shapes.len()]
    } else {
        let numel: Vec<f64> = shapes.iter().map(|s| s.numel() as f64).collect();
        let scale: Vec<f64> = shapes.iter().map(|s| s.scale(method)).collect();
        let budget = global_density * numel.iter().sum::<f64>();
        let mut dense = vec![false; shapes.len()];
        loop {
            let dense_params: f64 = (0..shapes.len()).filter(|&i| dense[i]).map(|i| numel[i]).sum();
            let weighted: f64 = (0..shapes.len()).filter(|&i| !dense[i]).map(|i| scale[i] * numel[i]).sum();
            if weighted == 0.0 {
                if dense_params + 1e-9 * budget < budget {
                    return Err(Error::Allocation(format!(
                        "density {global_density} cannot be met even with every layer dense"
                    )));
                }
                break vec![1.0; shapes.len()];
            }
            let c = (budget - dense_params) / weighted;
            let newly: Vec<usize> = (0..shapes.len()).filter(|&i| !dense[i] && c * scale[i] > 1.0).collect();
            if newly.is_empty() {
                break (0..shapes.len()).map(|i| if dense[i] { 1.0 } else { c * scale[i] }).collect();
            }
            newly.into_iter().for_each(|i| dense[i] = true);
        }
    };
    Ok(DensityAllocation {
        method,
        global_density,
        per_layer: shapes.iter().zip(densities).map(|(s, d)| (s.id, d)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_dense_limits() {
        let shapes = [WeightShape::new(0, [64, 3, 3, 3]), WeightShape::new(1, [10, 64])];
        let a = allocate_density(&shapes, AllocationMethod::Uniform, 0.05).unwrap();
        assert!(a.per_layer.iter().all(|&(_, d)| d == 0.05));
        for m in [AllocationMethod::Er, AllocationMethod::Erk] {
            let a = allocate_density(&shapes, m, 1.0).unwrap();
            assert!(a.per_layer.iter().all(|&(_, d)| d == 1.0));
        }
    }

    #[test]
    fn rejects_out_of_domain_density() {
        let shapes = [WeightShape::new(0, [4, 4])];
        assert!(allocate_density(&shapes, AllocationMethod::Erk, 0.0).is_err());
        assert!(allocate_density(&shapes, AllocationMethod::Erk, 1.5).is_err());
        assert!(allocate_density(&[], AllocationMethod::Erk, 0.5).is_err());
    }

    #[test]
    fn erk_saturates_small_layers() {
        let shapes = [WeightShape::new(0, [16, 3, 3, 3]), WeightShape::new(1, [256, 256, 3, 3])];
        let a = allocate_density(&shapes, AllocationMethod::Erk, 0.3).unwrap();
        assert_eq!(a.saturated(), vec![0]);
        let total = 16.0 * 27.0 + 256.0 * 256.0 * 9.0;
        let realized = a.per_layer[0].1 * 432.0 + a.per_layer[1].1 * 589_824.0;
        assert!((realized / total - 0.3).abs() < 1e-12);
    }
}
