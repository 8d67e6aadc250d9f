//! The shipped sample plugins.

use crate::abi::{cap, mask_of, EventKind};
use crate::cell::FeatureId;
use crate::manager::package::{package, Entry, PackageHeader, Version, FLAG_EPHEMERAL_ONLY};
use crate::manager::KeyPair;
use crate::toolkit::asm::{assemble_program, AsmError};

pub const PADDING_SOURCE: &str = include_str!("../../plugins/padding.fasm");
pub const COUNTER_SOURCE: &str = include_str!("../../plugins/counter.fasm");
pub const SINK_SOURCE: &str = include_str!("../../plugins/sink.fasm");

pub const PADDING_FEATURE: u8 = 32;
pub const COUNTER_FEATURE: u8 = 33;
pub const SINK_FEATURE: u8 = 48;
pub const DEFAULT_PADDING_PERIOD_MS: u64 = 50;

pub const SAMPLE_MEMORY: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePlugin {
    pub name: &'static str,
    pub source: &'static str,
    pub code: Vec<u8>,
    pub capability_mask: u32,
    pub feature_ids: Vec<FeatureId>,
    pub entries: Vec<(EventKind, u32)>,
    pub memory_size: u32,
}

impl SamplePlugin {
    pub fn header(&self, ephemeral_only: bool) -> PackageHeader {
        PackageHeader {
            flags: if ephemeral_only { FLAG_EPHEMERAL_ONLY } else { 0 },
            name: self.name.to_string(),
            version: Version { major: 1, minor: 0, patch: 0 },
            capability_mask: self.capability_mask,
            feature_ids: self.feature_ids.clone(),
            entries: self.entries.iter().map(|&(e, pc)| Entry { event_id: e.id(), pc }).collect(),
            memory_size: self.memory_size,
        }
    }

    /// Signed `.fanp` bytes.
    pub fn package(&self, key: &KeyPair, ephemeral_only: bool) -> Vec<u8> {
        package(&self.header(ephemeral_only), &self.code, key).expect("shipped samples package")
    }
}

/// Entry points come from labels named after events (`on_timer:` etc.).
fn build(name: &'static str, source: &'static str, caps: &[u8], features: &[u8]) -> Result<SamplePlugin, AsmError> {
    let asm = assemble_program(source)?;
    let entries = EventKind::ALL.iter().filter_map(|e| asm.labels.get(e.name()).map(|&pc| (*e, pc as u32))).collect();
    Ok(SamplePlugin {
        name,
        source,
        code: asm.to_bytes(),
        capability_mask: mask_of(caps),
        feature_ids: features.iter().map(|&f| FeatureId::new(f).expect("extension id")).collect(),
        entries,
        memory_size: SAMPLE_MEMORY,
    })
}

pub fn build_sample_plugins() -> Vec<SamplePlugin> {
    let samples = [
        build(
            "padding",
            PADDING_SOURCE,
            &[cap::TIMER, cap::CELL_EMIT, cap::STATE_READ, cap::STATE_WRITE, cap::LOG],
            &[PADDING_FEATURE],
        ),
        build("counter", COUNTER_SOURCE, &[cap::CELL_READ, cap::CELL_EMIT, cap::STATE_READ], &[COUNTER_FEATURE]),
        build("sink", SINK_SOURCE, &[cap::LOG], &[SINK_FEATURE]),
    ];
    samples.into_iter().map(|s| s.expect("shipped samples assemble")).collect()
}

pub fn sample(name: &str) -> Option<SamplePlugin> {
    build_sample_plugins().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abi::HOST_TABLE_SIZE;
    use crate::vm::{verify, Program};

    #[test]
    fn samples_assemble_and_verify() {
        for s in build_sample_plugins() {
            let p = Program::parse(&s.code).unwrap();
            let r = verify(&p, HOST_TABLE_SIZE);
            assert!(r.is_ok(), "{}: {r}", s.name);
            assert!(s.code.len() < 4096, "{} is {} bytes", s.name, s.code.len());
            assert!(s.entries.iter().any(|(e, _)| *e == EventKind::OnFeatureCell));
        }
    }

    #[test]
    fn padding_entry_table() {
        let p = sample("padding").unwrap();
        let events: Vec<_> = p.entries.iter().map(|(e, _)| *e).collect();
        assert_eq!(
            events,
            vec![EventKind::OnAttach, EventKind::OnFeatureCell, EventKind::OnTimer, EventKind::OnCircuitTeardown]
        );
        assert_eq!(p.entries[0].1, 0);
        assert_eq!(p.capability_mask, 0b11_0111);
        assert_eq!(p.feature_ids, vec![FeatureId::new(32).unwrap()]);
    }

    #[test]
    fn counter_caps() {
        let c = sample("counter").unwrap();
        assert_eq!(c.capability_mask, (1 << 3) | (1 << 4) | (1 << 1));
        assert_eq!(c.entries, vec![(EventKind::OnFeatureCell, 0)]);
    }
}
