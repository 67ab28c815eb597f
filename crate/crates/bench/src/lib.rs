//! Shared fixtures for the criterion benches: a seeded single-head layer and
//! matching input.

use dsa_core::numerics::seeded_gaussian_stream;
use dsa_core::{DilationConfig, HeadDilationParams, HeadParams, Matrix, Mechanism, MhaParams, RestrictionWindow};

pub const D_MODEL: usize = 64;
pub const WINDOW: usize = 25;
pub const CHUNK: usize = 20;

pub struct Fixture {
    pub x: Matrix,
    pub params: MhaParams,
    pub window: RestrictionWindow,
    pub dilation: DilationConfig,
    pub dilation_params: Vec<HeadDilationParams>,
}

/// A one-head layer of width [`D_MODEL`] with mean-pooled dilation over
/// chunks of [`CHUNK`] frames and a symmetric window of [`WINDOW`] frames.
pub fn fixture(n: usize, seed: u64) -> Fixture {
    let std = 1.0 / (D_MODEL as f64).sqrt();
    let w = |stream: u64| seeded_gaussian_stream(D_MODEL, D_MODEL, seed, stream, std);
    Fixture {
        x: seeded_gaussian_stream(n, D_MODEL, seed, 0, 1.0),
        params: MhaParams {
            heads: vec![HeadParams {
                w_q: w(1),
                w_k: w(2),
                w_v: w(3),
            }],
            w_out: w(4),
        },
        window: RestrictionWindow::symmetric(WINDOW).expect("odd window"),
        dilation: DilationConfig::new(Mechanism::MeanPool, CHUNK),
        dilation_params: vec![HeadDilationParams {
            attn_pool: None,
            post: None,
        }],
    }
}
