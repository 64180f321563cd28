pub mod fd;
pub mod diagnostics;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod limit_lab;
pub mod particles;
pub mod solver;
pub mod spectral;
pub mod system;
