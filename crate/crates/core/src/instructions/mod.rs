//! Instruction generation: simple, attribute, spatial and multi-instance.

pub mod generate;
pub mod multi;
pub mod spatial;
pub mod templates;

pub use generate::{generate, GenConfig, GenSummary};
pub use multi::{multi_instance_plan, plan_with, InstanceGroup, Layout};
pub use spatial::{
    assign_predicate, caption_to_label, nearest_adjacent, project_to_pointcloud, Intrinsics, SceneObject3D,
    SpatialPredicate,
};
pub use templates::{
    attribute_instruction, multi_instance_instruction, simple_instruction, spatial_instruction, Direction, Predicate,
};
