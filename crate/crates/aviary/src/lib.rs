//! Vectorized multi-quadrotor simulation and decentralized DQN training.
//!
//! The crate hosts a complete desk-scale stack for parallel visual
//! reinforcement learning: an axis-aligned arena with an exact raycaster, a
//! non-interactive multi-agent quadrotor simulator with batched depth-state
//! rendering and per-agent resets, from-scratch neural-network kernels with
//! Adam and gradient checking, a DQN with target network and linear epsilon
//! decay, a FIFO experience-replay service, a length-prefixed binary RPC
//! layer, and an orchestrator that wires actors, replay and trainer into a
//! single-machine or networked topology.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example render_depth     # arena + depth camera
//! cargo run --release --example sim_world        # vectorized stepping, resets
//! cargo run --release --example latency_demo     # batched vs non-batched states
//! cargo run --release --example grad_check       # network gradient verification
//! cargo run --release --example train_local      # end-to-end single-machine run
//! cargo run --release --example replay_server    # standalone replay service
//! cargo run --release --example sim_server       # standalone simulator service
//! cargo run --release --example trainer_server   # standalone trainer service
//! cargo run --release --example actor_client     # actor against remote services
//! ```
//!
//! The `bench` binary reproduces the two experiment families (state-collection
//! latency and agent-count training speedup); see the README.

pub mod arena;
pub mod bench;
pub mod dqn;
pub mod math;
pub mod nn;
pub mod orchestrator;
pub mod replay;
pub mod simcore;
pub mod util;
pub mod wire;

pub use arena::{load_arena, ArenaSpec, Pose};
pub use simcore::{DepthImage, SimConfig, World};
