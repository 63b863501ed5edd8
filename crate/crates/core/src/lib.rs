//! Zero-shot object navigation with label-wise meta-correlation on a
//! deterministic grid world.

pub mod evalharness;
pub mod gridworld;
pub mod mcfm;
pub mod metatrain;
pub mod mogl;
pub mod numerics;
pub mod perception;
pub mod policy;
pub mod seeding;
pub mod uoi;
