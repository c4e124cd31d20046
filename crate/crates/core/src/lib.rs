//! Couplet: a component-based coupling library and runtime for time-driven
//! multiscale simulations.
//!
//! Independent submodel instances exchange time-stamped typed messages
//! through configured conduits, locally within one process or across
//! machines via framed TCP and an optional forwarding relay. The crate is
//! organized by layer:
//!
//! * [`topology`] — the in-memory model of instances and conduits, with
//!   validation and coupling classification,
//! * [`config`] — the declarative text format that describes a coupled
//!   model,
//! * [`codec`] — the bit-exact payload and frame encoding used on the wire,
//! * [`transport`] — in-process channels and the socket plumbing,
//! * [`kernel`] — the submodel execution loop, phase-checked port I/O,
//!   mappers, terminals and conduit filters,
//! * [`runtime`] — the simulation manager (registry), local managers,
//!   external instance attachment, and fail-fast shutdown,
//! * [`relay`] — the cross-cluster forwarding daemon with port-range
//!   routing and prefer-send backpressure,
//! * [`bench`] — startup-overhead and ping-pong speed measurements with
//!   least-squares fits,
//! * [`canal`] — a 1-D stencil model run monolithically and as two coupled
//!   sections, with efficiency reporting.

pub mod bench;
pub mod canal;
pub mod codec;
pub mod config;
pub mod kernel;
pub mod relay;
pub mod runtime;
pub mod topology;
pub mod transport;
