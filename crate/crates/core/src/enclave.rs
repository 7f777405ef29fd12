//! Simulated trusted region.
//!
//! Stands in for an SGX enclave: every object moved across the boundary is
//! charged at its serialized size against a fixed byte budget. In `Strict`
//! mode a load that would exceed the budget fails; in `Penalized` mode it
//! succeeds and the bytes beyond the budget accrue a simulated paging cost.
//! Porting to real hardware replaces this module only.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BUDGET_BYTES: u64 = 96 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PagingMode {
    #[default]
    Strict,
    Penalized,
}

impl fmt::Display for PagingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PagingMode::Strict => "strict",
            PagingMode::Penalized => "penalized",
        })
    }
}

impl FromStr for PagingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(PagingMode::Strict),
            "penalized" => Ok(PagingMode::Penalized),
            other => Err(Error::config(format!("unknown paging mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnclaveConfig {
    pub budget_bytes: u64,
    pub paging_mode: PagingMode,
    pub penalty_ns_per_byte: u64,
}

impl Default for EnclaveConfig {
    fn default() -> Self {
        EnclaveConfig {
            budget_bytes: DEFAULT_BUDGET_BYTES,
            paging_mode: PagingMode::Strict,
            penalty_ns_per_byte: 1,
        }
    }
}

/// Objects whose trusted-side footprint is known.
pub trait Footprint {
    fn trusted_bytes(&self) -> u64;
}

impl Footprint for [u8] {
    fn trusted_bytes(&self) -> u64 {
        self.len() as u64
    }
}

impl Footprint for crate::keys::KeyBlock {
    fn trusted_bytes(&self) -> u64 {
        self.as_bytes().len() as u64
    }
}

impl Footprint for crate::dictionary::KeyDictionary {
    fn trusted_bytes(&self) -> u64 {
        self.serialized_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Handle(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegionStats {
    pub budget_bytes: u64,
    pub used_bytes: u64,
    pub peak_bytes: u64,
    pub live_allocations: usize,
    pub paging_penalty_ns: u128,
}

impl RegionStats {
    pub fn paging_penalty_ms(&self) -> f64 {
        self.paging_penalty_ns as f64 / 1e6
    }
}

#[derive(Debug)]
pub struct TrustedRegion {
    config: EnclaveConfig,
    used: u64,
    peak: u64,
    next_handle: u64,
    live: HashMap<Handle, (u64, String)>,
    penalty_ns: u128,
}

impl TrustedRegion {
    pub fn new(config: EnclaveConfig) -> Result<Self> {
        if config.budget_bytes == 0 {
            return Err(Error::config("enclave budget must be positive"));
        }
        Ok(TrustedRegion {
            config,
            used: 0,
            peak: 0,
            next_handle: 1,
            live: HashMap::new(),
            penalty_ns: 0,
        })
    }

    pub fn with_budget(budget_bytes: u64) -> Result<Self> {
        Self::new(EnclaveConfig {
            budget_bytes,
            ..EnclaveConfig::default()
        })
    }

    pub fn config(&self) -> &EnclaveConfig {
        &self.config
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak
    }

    pub fn available_bytes(&self) -> u64 {
        self.config.budget_bytes.saturating_sub(self.used)
    }

    pub fn stats(&self) -> RegionStats {
        RegionStats {
            budget_bytes: self.config.budget_bytes,
            used_bytes: self.used,
            peak_bytes: self.peak,
            live_allocations: self.live.len(),
            paging_penalty_ns: self.penalty_ns,
        }
    }

    /// Starts a fresh measurement window: peak drops to current usage and the
    /// accumulated paging cost is cleared.
    pub fn reset_counters(&mut self) {
        self.peak = self.used;
        self.penalty_ns = 0;
    }

    fn charge(&mut self, what: &str, bytes: u64) -> Result<()> {
        let after = self.used.saturating_add(bytes);
        if after > self.config.budget_bytes {
            match self.config.paging_mode {
                PagingMode::Strict => {
                    return Err(Error::BudgetExceeded {
                        what: what.to_string(),
                        requested: bytes,
                        used: self.used,
                        budget: self.config.budget_bytes,
                    })
                }
                PagingMode::Penalized => {
                    let over = (after - self.config.budget_bytes).min(bytes);
                    self.penalty_ns += over as u128 * self.config.penalty_ns_per_byte as u128;
                }
            }
        }
        self.used = after;
        self.peak = self.peak.max(self.used);
        Ok(())
    }

    /// Charges `bytes` for an object entering the region.
    pub fn load_to_enclave(&mut self, what: &str, bytes: u64) -> Result<Handle> {
        self.charge(what, bytes)?;
        let h = Handle(self.next_handle);
        self.next_handle += 1;
        self.live.insert(h, (bytes, what.to_string()));
        Ok(h)
    }

    pub fn load_object<T: Footprint + ?Sized>(&mut self, what: &str, obj: &T) -> Result<Handle> {
        self.load_to_enclave(what, obj.trusted_bytes())
    }

    /// Grows or shrinks a live allocation.
    pub fn resize(&mut self, handle: Handle, new_bytes: u64) -> Result<()> {
        let (old, what) = self
            .live
            .get(&handle)
            .map(|(b, w)| (*b, w.clone()))
            .ok_or_else(|| Error::Logic(format!("resize of unknown handle {handle:?}")))?;
        if new_bytes > old {
            self.charge(&what, new_bytes - old)?;
        } else {
            self.used -= old - new_bytes;
        }
        self.live.get_mut(&handle).unwrap().0 = new_bytes;
        Ok(())
    }

    /// Releases an allocation as its payload leaves the region; returns its size.
    pub fn load_from_enclave(&mut self, handle: Handle) -> Result<u64> {
        let (bytes, _) = self
            .live
            .remove(&handle)
            .ok_or_else(|| Error::Logic(format!("release of unknown or released handle {handle:?}")))?;
        self.used -= bytes;
        Ok(bytes)
    }

    pub fn release_all(&mut self) {
        self.live.clear();
        self.used = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1 << 20;

    #[test]
    fn accounting_and_release() {
        let mut r = TrustedRegion::new(EnclaveConfig::default()).unwrap();
        let a = r.load_to_enclave("chunk", 27 * MIB).unwrap();
        assert_eq!(r.used_bytes(), 27 * MIB);
        let b = r.load_to_enclave("q", 10).unwrap();
        assert_eq!(r.load_from_enclave(a).unwrap(), 27 * MIB);
        assert_eq!(r.used_bytes(), 10);
        assert_eq!(r.peak_bytes(), 27 * MIB + 10);
        r.load_from_enclave(b).unwrap();
        assert_eq!(r.used_bytes(), 0);
        assert!(matches!(r.load_from_enclave(b), Err(Error::Logic(_))));
        assert!(matches!(r.load_from_enclave(Handle(999)), Err(Error::Logic(_))));
    }

    #[test]
    fn strict_overflow_fails_without_side_effects() {
        let mut r = TrustedRegion::with_budget(100).unwrap();
        r.load_to_enclave("a", 60).unwrap();
        let err = r.load_to_enclave("big", 41).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { requested: 41, used: 60, budget: 100, .. }));
        assert_eq!(r.used_bytes(), 60);
        assert_eq!(r.peak_bytes(), 60);
        r.load_to_enclave("fits", 40).unwrap();
        assert_eq!(r.used_bytes(), 100);
    }

    #[test]
    fn penalized_overflow_records_cost() {
        let mut r = TrustedRegion::new(EnclaveConfig {
            budget_bytes: 100,
            paging_mode: PagingMode::Penalized,
            penalty_ns_per_byte: 3,
        })
        .unwrap();
        r.load_to_enclave("a", 90).unwrap();
        assert_eq!(r.stats().paging_penalty_ns, 0);
        r.load_to_enclave("b", 30).unwrap();
        assert_eq!(r.stats().paging_penalty_ns, 20 * 3);
        r.load_to_enclave("c", 5).unwrap();
        assert_eq!(r.stats().paging_penalty_ns, 25 * 3);
        assert_eq!(r.used_bytes(), 125);
    }

    #[test]
    fn resize_respects_budget() {
        let mut r = TrustedRegion::with_budget(50).unwrap();
        let h = r.load_to_enclave("results", 0).unwrap();
        r.resize(h, 40).unwrap();
        assert!(r.resize(h, 51).is_err());
        r.resize(h, 10).unwrap();
        assert_eq!(r.used_bytes(), 10);
        assert_eq!(r.peak_bytes(), 40);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(TrustedRegion::with_budget(0).is_err());
        assert_eq!("penalized".parse::<PagingMode>().unwrap(), PagingMode::Penalized);
    }
}
