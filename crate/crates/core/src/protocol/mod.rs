//! Two-party partitioned decoding. The user party keeps the prompt's KV rows
//! and answers attention queries against them; the model party keeps the
//! weights and the KV rows of generated tokens. A controller checks every
//! token on its way back to the user.

pub mod accounting;
mod controller;
mod model_party;
mod session;
pub mod transport;
mod user;
pub mod wire;

pub use accounting::{comm_accounting, CommReport, Direction, Entry, RoundStats, Transcript};
pub use controller::{Controller, GateMode, Verdict};
pub use model_party::ModelParty;
pub use session::{run_decode_session, run_sessions, RunOptions, RunReport, UserOutcome, UserRequest};
pub use transport::TransportKind;
pub use user::{stream_id, Outbound, Tamper, UserParty, WeightsHandle};
pub use wire::{ControlOp, Message, Tag};
