//! Generated trace datasets and their binary file format.
//!
//! Layout: `b"NEED"`, `u32` version, `u32` header length, the JSON header,
//! then one record per episode (`u32` length + JSON), training episodes
//! first. All integers are little-endian. The header carries the SHA-256 of
//! the record bytes.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numeral::Token;

use super::arithmetic::{gen_arithmetic_pairs, ArithOp, ArithmeticData, ArithmeticSpec};
use super::distribution::{sample_with, DistributionSpec};
use super::graph::{gen_dijkstra_trace, gen_graph_with, gen_prim_trace, GraphFamily, WeightMode, WeightedGraph};
use super::sorting::{gen_merge_trace, gen_selection_sort_trace};
use super::{LabeledStep, Subroutine, Task, TraceError, TraceStep};

pub const DATASET_MAGIC: &[u8; 4] = b"NEED";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    pub width: u32,
    /// Sequence length, or node count for graph tasks.
    pub min_len: usize,
    pub max_len: usize,
    pub distribution: DistributionSpec,
    pub train_count: usize,
    pub validation_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub families: Vec<GraphFamily>,
    /// Fraction of graphs with close edge weights.
    #[serde(default)]
    pub hard_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arithmetic: Option<ArithmeticSpec>,
}

impl DatasetSpec {
    /// Sequence task over lengths `2..=max_len` with the training mix.
    pub fn sequences(task: Task, max_len: usize, train_count: usize, validation_count: usize) -> Self {
        Self {
            task,
            width: 8,
            min_len: 2.min(max_len),
            max_len,
            distribution: DistributionSpec::training(),
            train_count,
            validation_count,
            families: Vec::new(),
            hard_fraction: 0.0,
            arithmetic: None,
        }
    }

    /// Graph task over Erdős–Rényi graphs with the default hard fraction
    /// (half for shortest paths, a fifth for spanning trees).
    pub fn graphs(task: Task, max_nodes: usize, train_count: usize, validation_count: usize) -> Self {
        Self {
            hard_fraction: if task == Task::Prim { 0.2 } else { 0.5 },
            families: vec![GraphFamily::ErdosRenyi { p: 0.5 }],
            ..Self::sequences(task, max_nodes, train_count, validation_count)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpisodeInput {
    Sequence { values: Vec<u64> },
    Merge { first: Vec<u64>, second: Vec<u64> },
    Pair { a: Token, b: Token },
    Graph { graph: WeightedGraph, source: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub input: EpisodeInput,
    pub steps: Vec<LabeledStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train_count: usize,
    pub validation_count: usize,
    /// Hex SHA-256 of the record bytes.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train: Vec<Episode>,
    pub validation: Vec<Episode>,
}

fn label(subroutine: Subroutine, steps: Vec<TraceStep>) -> Vec<LabeledStep> {
    steps.into_iter().map(|step| LabeledStep { subroutine, node: None, step }).collect()
}

fn sequence_episode<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<Episode, TraceError> {
    let len = rng.gen_range(spec.min_len.max(1)..=spec.max_len.max(1));
    Ok(match spec.task {
        Task::SelectionSort => {
            let (values, _) = sample_with(&spec.distribution, spec.width, len, rng);
            let steps = label(Subroutine::Select, gen_selection_sort_trace(&values));
            Episode { input: EpisodeInput::Sequence { values }, steps }
        }
        Task::Merge => {
            let (values, _) = sample_with(&spec.distribution, spec.width, len, rng);
            let cut = rng.gen_range(0..=len);
            let (mut first, mut second) = (values[..cut].to_vec(), values[cut..].to_vec());
            first.sort_unstable();
            second.sort_unstable();
            let steps = label(Subroutine::Merge, gen_merge_trace(&first, &second)?);
            Episode { input: EpisodeInput::Merge { first, second }, steps }
        }
        Task::Dijkstra | Task::Prim => {
            let family = spec.families.get(rng.gen_range(0..spec.families.len().max(1))).copied();
            let family = family.unwrap_or(GraphFamily::ErdosRenyi { p: 0.5 });
            let weights = if rng.gen_bool(spec.hard_fraction.clamp(0.0, 1.0)) {
                WeightMode::Close { spread: spec.distribution.spread }
            } else {
                WeightMode::Uniform
            };
            let g = gen_graph_with(&family, len, weights, rng.gen())?;
            let g = g.induced(&g.component_of(0));
            let steps = if spec.task == Task::Dijkstra { gen_dijkstra_trace(&g, 0)? } else { gen_prim_trace(&g, 0)? };
            Episode { input: EpisodeInput::Graph { graph: g, source: 0 }, steps }
        }
        Task::Add | Task::Multiply => unreachable!("arithmetic episodes are enumerated"),
    })
}

fn pair_episode(p: &super::ArithPair, op: ArithOp) -> Episode {
    let sub = if op == ArithOp::Add { Subroutine::Add } else { Subroutine::Multiply };
    Episode { input: EpisodeInput::Pair { a: p.a, b: p.b }, steps: label(sub, vec![p.step()]) }
}

fn arithmetic_splits(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<ArithmeticData, TraceError> {
    let op = if spec.task == Task::Add { ArithOp::Add } else { ArithOp::Multiply };
    let aspec = spec.arithmetic.clone().unwrap_or_else(|| ArithmeticSpec::new(op, spec.width));
    gen_arithmetic_pairs(&aspec, rng.gen())
}

/// The full pair splits behind an arithmetic [`generate_dataset`] call with
/// the same arguments, before the train/validation counts truncate them.
pub fn arithmetic_data(spec: &DatasetSpec, seed: u64) -> Result<ArithmeticData, TraceError> {
    if !matches!(spec.task, Task::Add | Task::Multiply) {
        return Err(TraceError::InvalidParams(format!("{} is not an arithmetic task", spec.task.name())));
    }
    arithmetic_splits(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Deterministic dataset for `(spec, seed)`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset, TraceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, validation) = match spec.task {
        Task::Add | Task::Multiply => {
            let op = if spec.task == Task::Add { ArithOp::Add } else { ArithOp::Multiply };
            let data = arithmetic_splits(spec, &mut rng)?;
            let train = data.train.iter().take(spec.train_count).map(|p| pair_episode(p, op)).collect();
            let validation = data
                .unseen_pairs
                .iter()
                .chain(&data.unseen_numbers)
                .take(spec.validation_count)
                .map(|p| pair_episode(p, op))
                .collect();
            (train, validation)
        }
        _ => {
            let mut make = |n| (0..n).map(|_| sequence_episode(spec, &mut rng)).collect::<Result<Vec<_>, _>>();
            (make(spec.train_count)?, make(spec.validation_count)?)
        }
    };
    Ok(Dataset { spec: spec.clone(), seed, train, validation })
}

pub fn write_dataset_bytes(ds: &Dataset) -> Result<Vec<u8>, TraceError> {
    let mut records = Vec::new();
    for ep in ds.train.iter().chain(&ds.validation) {
        let bytes = serde_json::to_vec(ep)?;
        records.extend((bytes.len() as u32).to_le_bytes());
        records.extend(bytes);
    }
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        seed: ds.seed,
        train_count: ds.train.len(),
        validation_count: ds.validation.len(),
        checksum: hex::encode(Sha256::digest(&records)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header.len() + records.len());
    out.extend(DATASET_MAGIC);
    out.extend(DATASET_VERSION.to_le_bytes());
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    out.extend(records);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], TraceError> {
    if bytes.len() < n {
        return Err(TraceError::Corrupt(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], what: &str) -> Result<u32, TraceError> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().unwrap()))
}

pub fn read_dataset_bytes(mut bytes: &[u8]) -> Result<Dataset, TraceError> {
    if take(&mut bytes, 4, "magic")? != DATASET_MAGIC {
        return Err(TraceError::Corrupt("bad magic".into()));
    }
    let version = take_u32(&mut bytes, "version")?;
    if version != DATASET_VERSION {
        return Err(TraceError::Version(version));
    }
    let header_len = take_u32(&mut bytes, "header length")? as usize;
    let header: DatasetHeader = serde_json::from_slice(take(&mut bytes, header_len, "header")?)
        .map_err(|e| TraceError::Corrupt(format!("header: {e}")))?;
    if hex::encode(Sha256::digest(bytes)) != header.checksum {
        return Err(TraceError::Corrupt("checksum mismatch".into()));
    }
    let mut episodes = Vec::with_capacity(header.train_count + header.validation_count);
    while !bytes.is_empty() {
        let len = take_u32(&mut bytes, "record length")? as usize;
        let ep: Episode = serde_json::from_slice(take(&mut bytes, len, "record")?)
            .map_err(|e| TraceError::Corrupt(format!("record {}: {e}", episodes.len())))?;
        episodes.push(ep);
    }
    if episodes.len() != header.train_count + header.validation_count {
        return Err(TraceError::Corrupt("record count disagrees with header".into()));
    }
    let validation = episodes.split_off(header.train_count);
    Ok(Dataset { spec: header.spec, seed: header.seed, train: episodes, validation })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), TraceError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&write_dataset_bytes(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, TraceError> {
    read_dataset_bytes(&std::fs::read(path)?)
}

/// Human-readable dump of the whole dataset.
pub fn write_dataset_json(ds: &Dataset) -> Result<String, TraceError> {
    Ok(serde_json::to_string_pretty(ds)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> DatasetSpec {
        match task {
            Task::Dijkstra | Task::Prim => DatasetSpec::graphs(task, 8, 30, 5),
            _ => DatasetSpec::sequences(task, 8, 30, 5),
        }
    }

    #[test]
    fn round_trip_every_task() {
        for task in [Task::SelectionSort, Task::Merge, Task::Add, Task::Dijkstra, Task::Prim] {
            let ds = generate_dataset(&small(task), 7).unwrap();
            assert_eq!(ds.train.len(), 30);
            assert_eq!(ds.validation.len(), 5);
            let bytes = write_dataset_bytes(&ds).unwrap();
            assert_eq!(read_dataset_bytes(&bytes).unwrap(), ds);
        }
    }

    #[test]
    fn arithmetic_splits_match_the_dataset() {
        let spec = DatasetSpec { width: 4, ..DatasetSpec::sequences(Task::Add, 1, usize::MAX, 10) };
        let ds = generate_dataset(&spec, 9).unwrap();
        let data = arithmetic_data(&spec, 9).unwrap();
        assert_eq!(ds.train.len(), data.train.len());
        for (e, p) in ds.train.iter().zip(&data.train) {
            assert_eq!(e.input, EpisodeInput::Pair { a: p.a, b: p.b });
        }
        assert!(arithmetic_data(&small(Task::Merge), 9).is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let spec = small(Task::SelectionSort);
        let a = write_dataset_bytes(&generate_dataset(&spec, 3).unwrap()).unwrap();
        let b = write_dataset_bytes(&generate_dataset(&spec, 3).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = write_dataset_bytes(&generate_dataset(&spec, 4).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tampering_is_detected() {
        let mut bytes = write_dataset_bytes(&generate_dataset(&small(Task::Merge), 1).unwrap()).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 1;
        assert!(matches!(read_dataset_bytes(&bytes), Err(TraceError::Corrupt(_))));
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = write_dataset_bytes(&generate_dataset(&small(Task::SelectionSort), 1).unwrap()).unwrap();
        assert!(read_dataset_bytes(&bytes[..bytes.len() - 10]).is_err());
        assert!(read_dataset_bytes(&bytes[..6]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(read_dataset_bytes(&v2), Err(TraceError::Version(2))));
    }

    #[test]
    fn paper_sized_sort_dataset() {
        let ds = generate_dataset(&DatasetSpec::sequences(Task::SelectionSort, 8, 20_000, 2_000), 11).unwrap();
        assert_eq!((ds.train.len(), ds.validation.len()), (20_000, 2_000));
        let lens: Vec<usize> = ds.train.iter().map(|e| e.steps.len() - 1).collect();
        assert_eq!(*lens.iter().min().unwrap(), 2);
        assert_eq!(*lens.iter().max().unwrap(), 8);
    }

    #[test]
    fn json_dump_is_readable() {
        let ds = generate_dataset(&DatasetSpec::sequences(Task::SelectionSort, 3, 1, 0), 0).unwrap();
        let s = write_dataset_json(&ds).unwrap();
        assert!(s.contains("\"target\": \"e\""));
        assert_eq!(serde_json::from_str::<Dataset>(&s).unwrap(), ds);
    }
}
