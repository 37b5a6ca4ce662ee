pub mod config;
pub mod dynamics;
pub mod model;
pub mod observables;
pub mod params;
pub mod rng;
pub mod runner;
pub mod statistics;
