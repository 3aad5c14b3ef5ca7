//! PCA-reduced Gaussian mixture models and patch-based superresolution.
//!
//! A PCA-GMM component is a `d`-dimensional Gaussian on an affine subspace
//! of `R^n` with isotropic residual noise. [`pcagmm::fit_pcagmm`] fits one
//! by EM, [`superres::reconstruct`] uses a fitted mixture as a patch prior.
//! The guide in `book/` walks through each stage.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod degrade;
pub mod em;
pub mod error;
pub mod gmm;
pub mod image;
pub mod io;
pub mod linalg;
pub mod palm;
pub mod patches;
pub mod pcagmm;
pub mod protocol;
pub mod superres;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/mixtures.md")]
mod book_mixtures {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/m-step.md")]
mod book_m_step {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/degradation.md")]
mod book_degradation {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/superresolution.md")]
mod book_superresolution {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/formats.md")]
mod book_formats {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
