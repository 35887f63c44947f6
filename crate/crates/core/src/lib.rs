pub mod conditioning;
pub mod dataio;
pub mod diffmath;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod radiance;
pub mod renderer;
pub mod training;
pub mod warpfield;
