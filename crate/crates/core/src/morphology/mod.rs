//! Connected components, region growing, lung and trachea masks, thinning.

mod components;
mod lungs;
mod skeleton;

pub use components::{connected_components, largest_component, region_grow, Connectivity, LabelVolume};
pub use lungs::{closing, extract_central_airways, fill_holes, find_trachea_seed, segment_lungs, SegmentationParams};
pub use skeleton::skeletonize;
