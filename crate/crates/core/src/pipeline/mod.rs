//! Stages 1 to 3 of dataset construction: object discovery, filtering,
//! mask dilation, inpainting and add/remove pair assembly.

pub mod canny;
pub mod filters;
pub mod morphology;
pub mod quality;
pub mod run;
pub mod types;
pub mod validate;
