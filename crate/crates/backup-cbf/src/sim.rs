//! Scenario execution (stub).
