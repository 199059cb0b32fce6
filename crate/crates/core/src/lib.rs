//! Computational core for spherical-mesh panorama depth estimation.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`] builds icosahedral meshes by loop subdivision, computes the
//!   face-adjacent-face (FAF) table and caches it per resolution.
//! * [`projection`] converts between equirectangular images, per-face values
//!   and point clouds.
//! * [`tensor`] is a small dense tensor with a reverse-mode tape and Adam.
//! * [`mesh_ops`] holds the differentiable mesh convolution, pooling and
//!   unpooling built on top of the tape.
//! * [`net`] contains the fusion modules and the toy end-to-end network.
//! * [`loss`] implements the BerHu loss, multi-scale aggregation and the
//!   depth evaluation metrics.
//! * [`formats`], [`synth`] and [`bench`] back the command line tool.

pub mod bench;
pub mod error;
pub mod formats;
pub mod loss;
pub mod mesh;
pub mod mesh_ops;
pub mod net;
pub mod projection;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
