//! Fixed range of session ports, handed out lowest-free first.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRange {
    pub base: u16,
    pub size: u16,
}

#[derive(Debug)]
pub struct PortPool {
    range: PoolRange,
    used: BTreeSet<u16>,
}

impl PortPool {
    pub fn new(range: PoolRange) -> Self {
        assert!(
            u32::from(range.base) + u32::from(range.size) <= 65536,
            "pool {}+{} overflows the port space",
            range.base,
            range.size
        );
        PortPool {
            range,
            used: BTreeSet::new(),
        }
    }

    pub fn range(&self) -> PoolRange {
        self.range
    }

    /// Free ports in ascending order.
    pub fn free(&self) -> impl Iterator<Item = u16> + '_ {
        let end = u32::from(self.range.base) + u32::from(self.range.size);
        (u32::from(self.range.base)..end)
            .map(|p| p as u16)
            .filter(|p| !self.used.contains(p))
    }

    pub fn allocate(&mut self) -> Option<u16> {
        let port = self.free().next()?;
        self.used.insert(port);
        Some(port)
    }

    /// Marks a specific free port as taken.
    pub fn claim(&mut self, port: u16) -> bool {
        self.contains(port) && self.used.insert(port)
    }

    pub fn release(&mut self, port: u16) -> bool {
        self.used.remove(&port)
    }

    pub fn contains(&self, port: u16) -> bool {
        port >= self.range.base
            && u32::from(port) < u32::from(self.range.base) + u32::from(self.range.size)
    }

    pub fn in_use(&self) -> usize {
        self.used.len()
    }
}
