//! Benchmarks and applications built on the runtime: latency and bandwidth
//! sweeps, Cannon matrix multiplication and a finite-difference wave
//! stencil with one-sided halo exchange.

pub mod bench;
pub mod halo_one_sided;
pub mod halo_two_sided;
pub mod loc;
pub mod matmul;
pub mod stencil;

pub use bench::{bench_collective, bench_p2p, BenchKind, BenchRow, BenchSpec};
pub use matmul::{cannon_matmul, MatmulReport, MatmulSpec, MatrixInit};
pub use stencil::{rank_xmin_xmax, stencil_minimod, HaloMode, StencilReport, StencilSpec};
