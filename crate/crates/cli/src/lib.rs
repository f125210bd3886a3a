//! Command-line tools and the HTTP inference service.

pub mod api;
pub mod commands;
pub mod imaging;
pub mod service;
