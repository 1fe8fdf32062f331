//! Minimal CPU tensor graph with reverse-mode differentiation.
//!
//! Networks build a fresh [`Graph`] per step (define-by-run), attach
//! parameters from a [`ParamStore`] through a [`Bind`], run
//! [`Graph::backward`] once, and hand the collected gradients to [`Adam`].
//! Everything is `f32`, single-threaded, and deterministic.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod graph;
pub mod init;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use params::{Bind, ParamStore};

pub type Arr = ndarray::ArrayD<f32>;

/// Gradient check helper: central finite differences on a scalar-valued
/// closure. Used by unit tests for the graph ops.
#[cfg(test)]
pub(crate) fn finite_diff(f: &mut dyn FnMut(&Arr) -> f32, at: &Arr, h: f32) -> Arr {
    let mut g = Arr::zeros(at.raw_dim());
    let mut x = at.clone();
    for i in 0..at.len() {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    g
}
