//! Reconstructors mapping the image-space field `Hz/N` back to an estimate
//! of `x`: a trainable U-Net and the TV-W regularized least-squares baseline.

mod haar;
mod tvw;
mod unet;

pub use haar::{haar_dwt, haar_idwt};
pub use tvw::{grid_search_tvw, total_variation, tvw_reconstruct, TvwConfig, TvwInstance, TvwResult};
pub use unet::{UNet, UNetConfig};
