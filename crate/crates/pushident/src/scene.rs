//! Scene IO types (stub).
