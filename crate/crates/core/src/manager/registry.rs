//! Scoped plugin registry. Attachments are either global or bound to one
//! circuit; lookups prefer the circuit scope.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::keys::TrustStore;
use super::package::{parse_and_verify, PackageError, PluginPackage};
use crate::abi::{host_table, EventKind, SCRATCH_LEN};
use crate::cell::FeatureId;
use crate::vm::{instantiate, HostHandler, InstantiateError, RunError, VmInstance};

pub type AttachmentId = u64;

/// Circuits are identified by a node-wide serial number.
pub type CircuitKey = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Global,
    Circuit(CircuitKey),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttachError {
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("package requests capabilities {requested:#x}, policy allows {allowed:#x}")]
    CapabilityDenied { requested: u32, allowed: u32 },
    #[error("ephemeral-only package cannot be attached globally")]
    EphemeralOnly,
    #[error("feature {0} already attached in this scope")]
    FeatureConflict(FeatureId),
    #[error("instantiate: {0}")]
    Instantiate(#[from] InstantiateError),
    #[error("on_attach: {0}")]
    AttachTrap(RunError),
}

impl AttachError {
    /// Wire code carried in PLUGIN_ERR.
    pub fn code(&self) -> u8 {
        match self {
            AttachError::Package(p) => match p {
                PackageError::UnknownSigner => 2,
                PackageError::SignatureInvalid => 3,
                PackageError::VerifierRejected(_) => 4,
                PackageError::UnknownCapability(_) => 5,
                _ => 1,
            },
            AttachError::CapabilityDenied { .. } | AttachError::EphemeralOnly => 5,
            AttachError::FeatureConflict(_) => 6,
            AttachError::Instantiate(_) => 1,
            AttachError::AttachTrap(_) => 7,
        }
    }
}

pub fn error_code_name(code: u8) -> &'static str {
    match code {
        1 => "BadPackage",
        2 => "UnknownSigner",
        3 => "SignatureInvalid",
        4 => "VerifierRejected",
        5 => "CapabilityDenied",
        6 => "FeatureConflict",
        7 => "AttachTrap",
        _ => "Unknown",
    }
}

#[derive(Debug)]
pub struct Attachment {
    pub id: AttachmentId,
    pub package: Arc<PluginPackage>,
    pub instance: VmInstance,
    /// Scratch for the circuit this attachment is bound to, or the initial
    /// scratch copied into each circuit for global attachments.
    pub scratch: [u8; SCRATCH_LEN],
    pub scope: Scope,
}

impl Attachment {
    pub fn name(&self) -> &str {
        self.package.name()
    }

    pub fn handles(&self, event: EventKind) -> bool {
        self.package.header.entry(event).is_some()
    }

    /// Runs the entry for `event`. `Ok(None)` if the package declares none.
    pub fn run_event(
        &mut self,
        event: EventKind,
        args: &[u64],
        gas: u64,
        host: &mut dyn HostHandler,
    ) -> Result<Option<u64>, RunError> {
        match self.package.header.entry(event) {
            Some(pc) => self.instance.run(pc as usize, args, gas, host).map(Some),
            None => Ok(None),
        }
    }
}

/// Summary of one attachment, for diagnostics and comparisons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttachmentInfo {
    pub id: AttachmentId,
    pub name: String,
    pub scope: Scope,
    pub features: Vec<u8>,
}

#[derive(Debug)]
pub struct Attached {
    pub id: AttachmentId,
    /// return value of `on_attach`, if it ran
    pub on_attach: Option<u64>,
    pub latency: Duration,
}

#[derive(Debug, Default)]
pub struct PluginRegistry {
    next_id: AttachmentId,
    attachments: BTreeMap<AttachmentId, Attachment>,
    global: BTreeMap<FeatureId, AttachmentId>,
    per_circuit: BTreeMap<(CircuitKey, FeatureId), AttachmentId>,
}

impl PluginRegistry {
    pub fn new() -> PluginRegistry {
        PluginRegistry::default()
    }

    fn conflict(&self, package: &PluginPackage, scope: Scope) -> Option<FeatureId> {
        package.header.feature_ids.iter().copied().find(|&f| match scope {
            Scope::Global => self.global.contains_key(&f),
            Scope::Circuit(c) => self.per_circuit.contains_key(&(c, f)),
        })
    }

    /// Instantiates and runs `on_attach`, then registers the package. On any
    /// failure the registry is left unchanged.
    pub fn attach(
        &mut self,
        package: Arc<PluginPackage>,
        scope: Scope,
        policy_mask: u32,
        gas: u64,
        host: &mut dyn HostHandler,
    ) -> Result<(AttachmentId, Option<u64>), AttachError> {
        let requested = package.capability_mask();
        if requested & !policy_mask != 0 {
            return Err(AttachError::CapabilityDenied { requested, allowed: policy_mask });
        }
        if scope == Scope::Global && package.header.ephemeral_only() {
            return Err(AttachError::EphemeralOnly);
        }
        if let Some(f) = self.conflict(&package, scope) {
            return Err(AttachError::FeatureConflict(f));
        }
        let instance = instantiate(&package.program, package.header.memory_size as usize, host_table(), requested)?;
        let mut att = Attachment { id: self.next_id, package, instance, scratch: [0u8; SCRATCH_LEN], scope };
        let ret = att.run_event(EventKind::OnAttach, &[], gas, host).map_err(AttachError::AttachTrap)?;
        let id = self.next_id;
        self.next_id += 1;
        for &f in &att.package.header.feature_ids {
            match scope {
                Scope::Global => self.global.insert(f, id),
                Scope::Circuit(c) => self.per_circuit.insert((c, f), id),
            };
        }
        self.attachments.insert(id, att);
        Ok((id, ret))
    }

    /// parse_and_verify + attach, timed with the wall clock.
    #[allow(clippy::too_many_arguments)]
    pub fn attach_bytes(
        &mut self,
        bytes: &[u8],
        trust: &TrustStore,
        scope: Scope,
        policy_mask: u32,
        gas: u64,
        host: &mut dyn HostHandler,
    ) -> Result<Attached, AttachError> {
        let start = Instant::now();
        let package = Arc::new(parse_and_verify(bytes, trust)?);
        let (id, on_attach) = self.attach(package, scope, policy_mask, gas, host)?;
        Ok(Attached { id, on_attach, latency: start.elapsed() })
    }

    pub fn lookup(&self, feature: FeatureId, circuit: Option<CircuitKey>) -> Option<AttachmentId> {
        circuit.and_then(|c| self.per_circuit.get(&(c, feature))).or_else(|| self.global.get(&feature)).copied()
    }

    pub fn get(&self, id: AttachmentId) -> Option<&Attachment> {
        self.attachments.get(&id)
    }

    pub fn get_mut(&mut self, id: AttachmentId) -> Option<&mut Attachment> {
        self.attachments.get_mut(&id)
    }

    pub fn len(&self) -> usize {
        self.attachments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attachments.is_empty()
    }

    pub fn ids(&self) -> Vec<AttachmentId> {
        self.attachments.keys().copied().collect()
    }

    pub fn global_ids(&self) -> Vec<AttachmentId> {
        self.attachments.values().filter(|a| a.scope == Scope::Global).map(|a| a.id).collect()
    }

    pub fn circuit_attachments(&self, circuit: CircuitKey) -> Vec<AttachmentId> {
        self.attachments.values().filter(|a| a.scope == Scope::Circuit(circuit)).map(|a| a.id).collect()
    }

    /// Runs `on_detach` (a trap is logged, not propagated) and removes the
    /// attachment. Unknown ids are a logged no-op.
    pub fn detach(&mut self, id: AttachmentId, gas: u64, host: &mut dyn HostHandler) -> Option<Attachment> {
        let Some(att) = self.attachments.get_mut(&id) else {
            log::warn!("detach of unknown attachment {id}");
            return None;
        };
        if let Err(e) = att.run_event(EventKind::OnDetach, &[], gas, host) {
            log::warn!("{}: on_detach trapped: {e}", att.name());
        }
        self.remove(id)
    }

    /// Removes without running any event.
    pub fn remove(&mut self, id: AttachmentId) -> Option<Attachment> {
        let att = self.attachments.remove(&id)?;
        for &f in &att.package.header.feature_ids {
            match att.scope {
                Scope::Global => self.global.remove(&f),
                Scope::Circuit(c) => self.per_circuit.remove(&(c, f)),
            };
        }
        Some(att)
    }

    /// Drops every attachment bound to `circuit` without running events.
    /// Callers fire `on_circuit_teardown` first.
    pub fn remove_circuit(&mut self, circuit: CircuitKey) -> Vec<Attachment> {
        self.circuit_attachments(circuit).into_iter().filter_map(|id| self.remove(id)).collect()
    }

    pub fn summary(&self) -> Vec<AttachmentInfo> {
        self.attachments
            .values()
            .map(|a| AttachmentInfo {
                id: a.id,
                name: a.name().to_string(),
                scope: a.scope,
                features: a.package.header.feature_ids.iter().map(|f| f.get()).collect(),
            })
            .collect()
    }
}
