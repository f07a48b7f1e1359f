//! Binary masks over dense weights: per-layer density allocation, random
//! initialization, and the magnitude-prune / gradient-or-random-grow cycle.

mod allocation;
mod mask;
mod snapshot;
mod topology;

pub use allocation::{allocate_density, AllocationMethod, DensityAllocation, WeightShape};
pub use mask::{init_mask, Growth, Grown, Pruned, SparseLayerState};
pub use snapshot::{read_mask_snapshot, write_mask_snapshot, MaskRecord};
pub use topology::{topology_update, weight_shapes, GrowthCriterion, LayerUpdate, SparseNet, TopologySchedule, UpdateReport};
