//! Closed-form cost and skew model: connection counts, buffer counts,
//! broadcast thresholds, and Zipf partition-load analysis.
//!
//! The classic exchange model treats every worker thread as a parallel unit
//! (n·t units for n nodes with t workers each); the hybrid model treats the
//! node as the unit and handles intra-node imbalance by work stealing. The
//! skew analysis deliberately reuses the engine's own hash and partition
//! functions so its predictions apply to engine runs.

use serde::{Deserialize, Serialize};

use crate::hash::{crc32_hash, partition_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ClassicExchange,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelModel {
    pub kind: ModelKind,
    /// Node count.
    pub n: u64,
    /// Workers per node.
    pub t: u64,
}

impl ParallelModel {
    pub fn classic(n: u64, t: u64) -> Self {
        ParallelModel { kind: ModelKind::ClassicExchange, n, t }
    }

    pub fn hybrid(n: u64, t: u64) -> Self {
        ParallelModel { kind: ModelKind::Hybrid, n, t }
    }
}

/// Total directed connections required in the cluster.
pub fn connection_count(model: ParallelModel) -> u64 {
    match model.kind {
        ModelKind::ClassicExchange => model.n * model.n * model.t * model.t - model.t,
        ModelKind::Hybrid => model.n * (model.n - 1),
    }
}

/// Message buffers each exchange operator keeps open for its peers.
pub fn buffers_per_operator(model: ParallelModel) -> u64 {
    match model.kind {
        ModelKind::ClassicExchange => model.n * model.t - 1,
        ModelKind::Hybrid => model.n - 1,
    }
}

/// Input-size ratio above which broadcasting the smaller join input beats
/// hash-partitioning both.
pub fn broadcast_threshold(model: ParallelModel) -> u64 {
    match model.kind {
        ModelKind::ClassicExchange => model.n * model.t - 1,
        ModelKind::Hybrid => model.n - 1,
    }
}

/// Parameters of a Zipf-distributed key workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewSpec {
    pub zipf_z: f64,
    /// Number of distinct keys; keys are 1..=key_domain hashed through their
    /// canonical 8-byte little-endian form.
    pub key_domain: u64,
    pub partitions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadReport {
    /// Largest per-partition probability mass.
    pub max_partition_share: f64,
    /// max_partition_share / (1 / partitions).
    pub overload_factor: f64,
    /// Set when the key domain is smaller than the partition count.
    pub underfilled: bool,
}

/// Exact expected per-partition share of a Zipf(z) key distribution under
/// hash partitioning: every key's probability mass p(k) ∝ 1/k^z is summed
/// into partition_for(hash(k), partitions).
pub fn zipf_partition_load<H>(spec: &SkewSpec, hash: H) -> LoadReport
where
    H: Fn(u64) -> u32,
{
    assert!(spec.partitions >= 1, "at least one partition");
    assert!(spec.key_domain >= 1, "at least one key");
    assert!(spec.zipf_z >= 0.0, "zipf exponent must be non-negative");
    let mut shares = vec![0.0f64; spec.partitions];
    let mut total = 0.0f64;
    for k in 1..=spec.key_domain {
        let w = 1.0 / (k as f64).powf(spec.zipf_z);
        shares[partition_for(hash(k), spec.partitions)] += w;
        total += w;
    }
    let max_share = shares.iter().cloned().fold(0.0, f64::max) / total;
    LoadReport {
        max_partition_share: max_share,
        overload_factor: max_share * spec.partitions as f64,
        underfilled: spec.key_domain < spec.partitions as u64,
    }
}

/// Default key hash for skew analysis: CRC32-C of the key's 8-byte LE form,
/// the same path the engine uses for int64 join keys.
pub fn default_key_hash(key: u64) -> u32 {
    crc32_hash(&(key as i64).to_le_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_by_forty_reference_values() {
        let classic = ParallelModel::classic(6, 40);
        assert_eq!(connection_count(classic), 57_560);
        assert_eq!(buffers_per_operator(classic), 239);
        assert_eq!(broadcast_threshold(classic), 239);
        let hybrid = ParallelModel::hybrid(6, 40);
        assert_eq!(connection_count(hybrid), 30);
        assert_eq!(buffers_per_operator(hybrid), 5);
        assert_eq!(broadcast_threshold(hybrid), 5);
    }

    #[test]
    fn degenerate_single_unit() {
        for model in [ParallelModel::classic(1, 1), ParallelModel::hybrid(1, 1)] {
            assert_eq!(connection_count(model), 0);
            assert_eq!(buffers_per_operator(model), 0);
            assert_eq!(broadcast_threshold(model), 0);
        }
    }

    #[test]
    fn thresholds_coincide_for_two_single_worker_nodes() {
        assert_eq!(broadcast_threshold(ParallelModel::classic(2, 1)), 1);
        assert_eq!(broadcast_threshold(ParallelModel::hybrid(2, 1)), 1);
    }

    #[test]
    fn hybrid_never_exceeds_classic() {
        for n in 1..=10u64 {
            for t in 1..=48u64 {
                let c = ParallelModel::classic(n, t);
                let h = ParallelModel::hybrid(n, t);
                assert!(connection_count(h) <= connection_count(c));
                assert!(buffers_per_operator(h) <= buffers_per_operator(c));
                if n >= 2 && t >= 2 {
                    assert!(connection_count(h) < connection_count(c));
                    assert!(buffers_per_operator(h) < buffers_per_operator(c));
                }
            }
        }
    }

    #[test]
    fn unskewed_load_is_roughly_uniform() {
        let spec = SkewSpec { zipf_z: 0.0, key_domain: 100_000, partitions: 16 };
        let report = zipf_partition_load(&spec, default_key_hash);
        assert!((report.overload_factor - 1.0).abs() < 0.02, "{report:?}");
        assert!(!report.underfilled);
    }

    #[test]
    fn overload_grows_with_partition_count() {
        let mut prev = 0.0;
        for partitions in [2usize, 6, 24, 60, 240] {
            let spec = SkewSpec { zipf_z: 0.84, key_domain: 100_000, partitions };
            let report = zipf_partition_load(&spec, default_key_hash);
            assert!(
                report.overload_factor >= prev * 0.999,
                "overload should not shrink with more partitions: {partitions} -> {report:?}"
            );
            prev = report.overload_factor;
        }
    }

    #[test]
    fn moderately_skewed_load_doubles_at_240_partitions() {
        let spec = SkewSpec { zipf_z: 0.84, key_domain: 1_000_000, partitions: 240 };
        let report = zipf_partition_load(&spec, default_key_hash);
        assert!(report.overload_factor > 2.0, "{report:?}");
    }

    #[test]
    fn underfilled_domain_is_flagged() {
        let spec = SkewSpec { zipf_z: 0.5, key_domain: 3, partitions: 6 };
        let report = zipf_partition_load(&spec, default_key_hash);
        assert!(report.underfilled);
    }
}
