//! Plugin packaging, signatures, repository manifests and the registry.

pub mod hexser;
pub mod keys;
pub mod manifest;
pub mod package;
pub mod registry;
pub mod repo;

pub use keys::{key_id_of, KeyId, KeyPair, TrustStore};
pub use manifest::{resolve_plugin, verify_manifest, ManifestError, RepoManifest, ResolveError, Timestamp};
pub use package::{package, parse_and_verify, Entry, PackageError, PackageHeader, PluginPackage, Version};
pub use registry::{AttachError, Attachment, AttachmentId, CircuitKey, PluginRegistry, Scope};
