//! Free-boundary p-harmonic maps on half-balls and bubble-tree extraction.

pub mod geometry;
pub mod maps;
pub mod analytic;
pub mod solver;
pub mod reflection;
pub mod bubbletree;
