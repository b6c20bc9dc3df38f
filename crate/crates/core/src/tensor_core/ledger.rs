//! Instrumented memory-traffic and FLOP accounting.
//!
//! Every kernel call reports the logical tensor traffic it performs: each
//! operand is counted once per call, regardless of caching or allocation.
//! A multiply-add counts as 2 FLOPs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Role of a tensor in a kernel call, used to split traffic into the
/// components that matter for decode latency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    /// Model weights.
    Param,
    /// Cached or freshly projected keys.
    Key,
    /// Cached or freshly projected values.
    Value,
    /// Everything else: inputs, queries, logits, weights, outputs.
    Activation,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Operand::Param => "param",
            Operand::Key => "key",
            Operand::Value => "value",
            Operand::Activation => "activation",
        };
        f.write_str(s)
    }
}

/// One operand access: `elements` of `width` bytes each.
#[derive(Clone, Copy, Debug)]
pub struct Access {
    pub operand: Operand,
    pub elements: u64,
    pub width: usize,
}

impl Access {
    pub fn new(operand: Operand, elements: usize, width: usize) -> Self {
        Self {
            operand,
            elements: elements as u64,
            width,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelIo {
    pub reads: u64,
    pub writes: u64,
    pub flops: u64,
    pub calls: u64,
    /// Portion of `reads` that hit model weights.
    pub param_reads: u64,
    /// Portion of `reads` that hit keys or values.
    pub kv_reads: u64,
}

impl KernelIo {
    fn add(&mut self, other: &KernelIo) {
        self.reads += other.reads;
        self.writes += other.writes;
        self.flops += other.flops;
        self.calls += other.calls;
        self.param_reads += other.param_reads;
        self.kv_reads += other.kv_reads;
    }

    fn sub(&self, other: &KernelIo) -> KernelIo {
        KernelIo {
            reads: self.reads - other.reads,
            writes: self.writes - other.writes,
            flops: self.flops - other.flops,
            calls: self.calls - other.calls,
            param_reads: self.param_reads - other.param_reads,
            kv_reads: self.kv_reads - other.kv_reads,
        }
    }
}

/// Monotone counters of elements read/written and FLOPs.
///
/// Totals always equal the sum over `per_kernel`. Ledgers are confined to
/// one session; parallel work keeps separate ledgers and merges them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoLedger {
    pub elements_read: u64,
    pub elements_written: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub flops: u64,
    pub per_kernel: BTreeMap<String, KernelIo>,
    pub reads_by_operand: BTreeMap<Operand, u64>,
    pub writes_by_operand: BTreeMap<Operand, u64>,
}

impl IoLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kernel: &str, reads: &[Access], writes: &[Access], flops: u64) {
        let mut entry = KernelIo {
            calls: 1,
            flops,
            ..KernelIo::default()
        };
        for a in reads {
            entry.reads += a.elements;
            match a.operand {
                Operand::Param => entry.param_reads += a.elements,
                Operand::Key | Operand::Value => entry.kv_reads += a.elements,
                Operand::Activation => {}
            }
            self.bytes_read += a.elements * a.width as u64;
            *self.reads_by_operand.entry(a.operand).or_default() += a.elements;
        }
        for a in writes {
            entry.writes += a.elements;
            self.bytes_written += a.elements * a.width as u64;
            *self.writes_by_operand.entry(a.operand).or_default() += a.elements;
        }
        self.elements_read += entry.reads;
        self.elements_written += entry.writes;
        self.flops += flops;
        self.per_kernel
            .entry(kernel.to_string())
            .or_default()
            .add(&entry);
    }

    pub fn reads_of(&self, operand: Operand) -> u64 {
        self.reads_by_operand.get(&operand).copied().unwrap_or(0)
    }

    pub fn writes_of(&self, operand: Operand) -> u64 {
        self.writes_by_operand.get(&operand).copied().unwrap_or(0)
    }

    /// Key plus value elements read.
    pub fn kv_reads(&self) -> u64 {
        self.reads_of(Operand::Key) + self.reads_of(Operand::Value)
    }

    pub fn kernel(&self, label: &str) -> KernelIo {
        self.per_kernel.get(label).copied().unwrap_or_default()
    }

    /// Sum of FLOPs over kernels whose label starts with any of `prefixes`.
    pub fn flops_matching(&self, prefixes: &[&str]) -> u64 {
        self.per_kernel
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.flops)
            .sum()
    }

    pub fn merge(&mut self, other: &IoLedger) {
        self.elements_read += other.elements_read;
        self.elements_written += other.elements_written;
        self.bytes_read += other.bytes_read;
        self.bytes_written += other.bytes_written;
        self.flops += other.flops;
        for (k, v) in &other.per_kernel {
            self.per_kernel.entry(k.clone()).or_default().add(v);
        }
        for (k, v) in &other.reads_by_operand {
            *self.reads_by_operand.entry(*k).or_default() += v;
        }
        for (k, v) in &other.writes_by_operand {
            *self.writes_by_operand.entry(*k).or_default() += v;
        }
    }

    /// Counters accumulated since `earlier`, which must be a snapshot of
    /// this ledger.
    pub fn since(&self, earlier: &IoLedger) -> IoLedger {
        let mut per_kernel = BTreeMap::new();
        for (k, v) in &self.per_kernel {
            let d = v.sub(&earlier.kernel(k));
            if d != KernelIo::default() {
                per_kernel.insert(k.clone(), d);
            }
        }
        let diff_map = |now: &BTreeMap<Operand, u64>, then: &BTreeMap<Operand, u64>| {
            now.iter()
                .map(|(k, v)| (*k, v - then.get(k).copied().unwrap_or(0)))
                .filter(|(_, v)| *v > 0)
                .collect::<BTreeMap<_, _>>()
        };
        IoLedger {
            elements_read: self.elements_read - earlier.elements_read,
            elements_written: self.elements_written - earlier.elements_written,
            bytes_read: self.bytes_read - earlier.bytes_read,
            bytes_written: self.bytes_written - earlier.bytes_written,
            flops: self.flops - earlier.flops,
            per_kernel,
            reads_by_operand: diff_map(&self.reads_by_operand, &earlier.reads_by_operand),
            writes_by_operand: diff_map(&self.writes_by_operand, &earlier.writes_by_operand),
        }
    }

    /// Checks that the totals equal the per-kernel sums.
    pub fn is_consistent(&self) -> bool {
        let (r, w, f) = self.per_kernel.values().fold((0, 0, 0), |acc, k| {
            (acc.0 + k.reads, acc.1 + k.writes, acc.2 + k.flops)
        });
        r == self.elements_read
            && w == self.elements_written
            && f == self.flops
            && self.reads_by_operand.values().sum::<u64>() == self.elements_read
            && self.writes_by_operand.values().sum::<u64>() == self.elements_written
    }
}
