//! Attach-latency benchmark.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::abi::{ALL_CAPABILITIES, SCRATCH_LEN};
use crate::manager::{parse_and_verify, AttachError, PackageError, PluginRegistry, Scope, TrustStore};
use crate::relay::host::HostContext;
use crate::vm::{DEFAULT_GAS, MAX_MEMORY, MIN_MEMORY};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("memory size {0} outside {MIN_MEMORY}..={MAX_MEMORY}")]
    MemorySize(u32),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("package rejected: {0}")]
    Package(#[from] PackageError),
    #[error("attach failed: {0}")]
    Attach(#[from] AttachError),
}

impl BenchError {
    /// Bad arguments rather than a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(self, BenchError::NoIterations | BenchError::MemorySize(_))
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub iterations: usize,
    /// Arena size to instantiate with instead of the package's own.
    pub memory_size: Option<u32>,
    /// Ask the kernel to drop the file from the page cache before each read.
    pub cold: bool,
}

impl Default for BenchOptions {
    fn default() -> BenchOptions {
        BenchOptions { iterations: 1000, memory_size: None, cold: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub package: String,
    pub iterations: usize,
    pub memory_size: u32,
    pub warm: bool,
    /// Set when a cold run was requested but the cache could not be dropped.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub cold_unavailable: bool,
    pub min_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
    pub host_description: String,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        crate::canonical::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub min_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

/// Median averages the two middle samples; p95 is nearest-rank.
pub fn stats(samples: &[Duration]) -> Stats {
    assert!(!samples.is_empty());
    let mut us: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e6).collect();
    us.sort_by(f64::total_cmp);
    let n = us.len();
    let median = if n % 2 == 1 { us[n / 2] } else { (us[n / 2 - 1] + us[n / 2]) / 2.0 };
    let rank = (n * 95).div_ceil(100).max(1);
    Stats { min_us: us[0], median_us: median, p95_us: us[rank - 1], max_us: us[n - 1] }
}

#[cfg(target_os = "linux")]
fn drop_cache(path: &Path) -> bool {
    use std::os::fd::AsRawFd;
    let Ok(f) = std::fs::File::open(path) else { return false };
    // SAFETY: valid open descriptor; fadvise only takes a hint.
    unsafe { libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED) == 0 }
}

#[cfg(not(target_os = "linux"))]
fn drop_cache(_path: &Path) -> bool {
    false
}

pub fn host_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}, {cores} threads, {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// One timed attach: read, parse and verify, instantiate, on_attach, on a
/// fresh registry.
fn attach_once(
    path: &Path,
    trust: &TrustStore,
    memory: Option<u32>,
    rng: &mut ChaCha20Rng,
) -> Result<Duration, BenchError> {
    let start = Instant::now();
    let bytes = std::fs::read(path).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })?;
    let mut package = parse_and_verify(&bytes, trust)?;
    if let Some(m) = memory {
        package.header.memory_size = m;
    }
    let mut registry = PluginRegistry::new();
    let mut host = HostContext::new(0, [0; SCRATCH_LEN], rng);
    registry.attach(Arc::new(package), Scope::Circuit(0), ALL_CAPABILITIES, DEFAULT_GAS, &mut host)?;
    Ok(start.elapsed())
}

pub fn bench_attach(path: &Path, trust: &TrustStore, opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    if opts.iterations == 0 {
        return Err(BenchError::NoIterations);
    }
    if let Some(m) = opts.memory_size {
        if !(MIN_MEMORY..=MAX_MEMORY).contains(&(m as usize)) {
            return Err(BenchError::MemorySize(m));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    // Validate (and warm up) before timing anything.
    attach_once(path, trust, opts.memory_size, &mut rng)?;
    let bytes = std::fs::read(path).map_err(|source| BenchError::Io { path: path.to_path_buf(), source })?;
    let declared = parse_and_verify(&bytes, trust)?.header.memory_size;

    let mut cold = opts.cold;
    let mut samples = Vec::with_capacity(opts.iterations);
    for _ in 0..opts.iterations {
        if cold && !drop_cache(path) {
            cold = false;
        }
        samples.push(attach_once(path, trust, opts.memory_size, &mut rng)?);
    }
    let s = stats(&samples);
    Ok(BenchReport {
        package: path.display().to_string(),
        iterations: opts.iterations,
        memory_size: opts.memory_size.unwrap_or(declared),
        warm: !cold,
        cold_unavailable: opts.cold && !cold,
        min_us: s.min_us,
        median_us: s.median_us,
        p95_us: s.p95_us,
        max_us: s.max_us,
        host_description: host_description(),
    })
}
