//! Data model: cubes, images, masks, file formats, and phantom generation.

mod cube;
mod io;
mod normalize;
mod patch;
mod phantom;
mod sample;

pub use cube::HsiCube;
pub use io::{load_cube, load_mask_png, load_reduced_png, save_cube, save_mask_png, save_reduced_png, CubeHeader};
pub use normalize::{normalize, NormalizeMode};
pub(crate) use normalize::minmax_2d;
pub use patch::extract_patches;
pub use phantom::{make_source_phantom, make_target_phantom, PhantomSpec, ABSORPTION_DEPTH};
pub use sample::{ChannelMeaning, Domain, Mask, ReducedImage, SampleImage, SamplePair, UnlabeledSample};
