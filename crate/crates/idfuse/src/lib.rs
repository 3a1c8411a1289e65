pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod faces;
pub mod imageio;
pub mod metrics;
pub mod raster;
pub mod seeding;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;
