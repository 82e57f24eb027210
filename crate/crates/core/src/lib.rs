//! Leader-follower teleoperation with adjustable workspace scaling on
//! simulated arms and toy manipulation tasks. Operator takeovers are kept as
//! clips that trigger fine-tuning of a behavior-cloning policy.

pub mod kinematics;
pub mod arm_sim;
pub mod copilot;
pub mod tasks;
pub mod policy;
pub mod recorder;
pub mod session;
pub mod expert;
pub mod par;
pub mod hil;
pub mod metrics;
pub mod config;
