//! Placeholder until the Python bindings land.
