//! Remote steering and measurement collection for a networked instrument.
//!
//! Two separate channels connect the instrument side of the ecosystem with
//! remote compute:
//!
//! * the **control channel**: a [`registry`] resolves object names to
//!   endpoints, a [`control`] server exposes instrument [`Adapter`]s such as
//!   the simulated [`Microscope`], and remote code drives them through a
//!   [`client::Proxy`] or a declarative [`workflow`];
//! * the **data channel**: a [`datachannel`] store server publishes a
//!   manifest of measurement files that remote sync clients mirror.
//!
//! Both channels share one framed JSON codec ([`wire`]) and are gated by a
//! first-match, default-deny [`policy`]. The [`bridge`] exposes status and
//! steering over HTTP for an operator console.
//!
//! [`Adapter`]: instrument::Adapter
//! [`Microscope`]: instrument::Microscope

pub mod bridge;
pub mod client;
pub mod control;
pub mod datachannel;
pub mod instrument;
pub mod policy;
pub mod registry;
pub mod rpc;
pub mod wire;
pub mod workflow;
