//! Command-line front end (stub).
