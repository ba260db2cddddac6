//! Context-driven binding of users to remote services through cached
//! virtual stubs.
//!
//! The crate is organised bottom-up:
//!
//! * [`wire`]: length-prefixed JSON framing.
//! * [`registry`]: the service registry server and client.
//! * [`service_host`]: hosts device services and answers invocations.
//! * [`vstub`]: client-side stubs that forward calls and fail over.
//! * [`cache`]: the virtual stub cache manager.
//! * [`reconfig`]: users, bindings and the obligation-policy engine.
//! * [`harness`]: benchmark and scenario runners.

pub mod cache;
pub mod clock;
pub mod harness;
pub mod reconfig;
pub mod registry;
mod server;
pub mod service_host;
pub mod vstub;
pub mod wire;

pub use cache::{CacheEntryInfo, CacheMode, CacheStats, GetOutcome, StubCache};
pub use registry::{
    ProxyDescriptor, RegistryClient, RegistryError, RegistryServer, RegistryStats, RegistryTable,
    ServiceDescription,
};
pub use service_host::{InvokeError, ServiceHandle, ServiceImpl};
pub use vstub::{StubError, StubSnapshot, VirtualStub};
