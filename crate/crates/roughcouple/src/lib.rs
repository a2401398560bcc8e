//! Numerics for differential equations driven by fractional Brownian motion
//! with Hurst index in (1/3, 1/2): dyadic grids and Hölder norms, level-2
//! rough paths, Mandelbrot–Van Ness sampling, Davie-type schemes including the
//! functional hitting system, the fractional drift calculus linking Wiener and
//! fBm drifts, and a three-step (hit, glue, wait) coupling whose coalescence
//! time bounds the distance to equilibrium.

pub mod grid;
pub mod roughpath;
pub mod fbm;
pub mod rde;
pub mod fraccalc;
pub mod lyapunov;
pub mod coupling;
pub mod verify;
pub mod cli;
