//! Brute-force enumeration oracles. Filled in alongside the objectives.
