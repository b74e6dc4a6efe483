//! Success-and-near-success trajectory store.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    expert_action, render, run_episode, ActionPose, Env, Episode, Frame, NearSuccessExpert,
    TaskSpec, FRAME_LEN,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::seed::SeedTree;

pub const SANS_FORMAT_VERSION: u32 = 1;
const MAX_RETRIES: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Expert,
    PerturbedExpert,
    PolicyRollout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub task_id: String,
    /// `L + 1` frames, starting with the initial observation.
    pub frames: Vec<Frame>,
    pub actions: Vec<ActionPose>,
    /// Per-step success bits, one per action.
    pub rewards: Vec<u8>,
    pub outcome: Outcome,
    pub provenance: Provenance,
    pub seed: u64,
}

impl TrajectoryRecord {
    pub fn from_episode(task: &TaskSpec, ep: &Episode, provenance: Provenance, seed: u64) -> Self {
        let frames = ep.states.iter().map(|s| render(s, task.goal_radius)).collect();
        Self {
            task_id: task.task_id.clone(),
            frames,
            actions: ep.actions.clone(),
            rewards: ep.rewards.clone(),
            outcome: outcome_of(&ep.rewards),
            provenance,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvariantViolation(m));
        if self.frames.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len() {
            return bad(format!(
                "record {}: {} frames, {} actions, {} rewards",
                self.seed,
                self.frames.len(),
                self.actions.len(),
                self.rewards.len()
            ));
        }
        if self.rewards.iter().any(|&r| r > 1) {
            return bad(format!("record {}: reward bits must be 0 or 1", self.seed));
        }
        if outcome_of(&self.rewards) != self.outcome {
            return bad(format!(
                "record {}: outcome {:?} disagrees with its reward trace",
                self.seed, self.outcome
            ));
        }
        if let Some(i) = self.frames.iter().position(|f| !f.is_valid()) {
            return bad(format!("record {}: frame {i} has out-of-range pixels", self.seed));
        }
        Ok(())
    }
}

pub fn outcome_of(rewards: &[u8]) -> Outcome {
    if rewards.iter().any(|&r| r == 1) {
        Outcome::Success
    } else {
        Outcome::Failure
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task_id: String,
    pub outcome: Outcome,
    pub provenance: Provenance,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub iteration_index: u64,
    pub record_count: usize,
    pub counts: Vec<ManifestEntry>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn tally(records: &[TrajectoryRecord]) -> Vec<ManifestEntry> {
    let mut m: BTreeMap<(String, Outcome, Provenance), usize> = BTreeMap::new();
    for r in records {
        *m.entry((r.task_id.clone(), r.outcome, r.provenance)).or_default() += 1;
    }
    m.into_iter()
        .map(|((task_id, outcome, provenance), count)| ManifestEntry {
            task_id,
            outcome,
            provenance,
            count,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SansDataset {
    pub records: Vec<TrajectoryRecord>,
    pub manifest: Manifest,
    pub iteration_index: u64,
}

impl SansDataset {
    pub fn new(records: Vec<TrajectoryRecord>, iteration_index: u64) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        Ok(Self::assemble(records, iteration_index, Vec::new()))
    }

    fn assemble(records: Vec<TrajectoryRecord>, iteration_index: u64, warnings: Vec<String>) -> Self {
        let manifest = Manifest {
            format_version: SANS_FORMAT_VERSION,
            iteration_index,
            record_count: records.len(),
            counts: tally(&records),
            warnings,
        };
        Self {
            records,
            manifest,
            iteration_index,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.records.iter().filter(|r| r.outcome == outcome).count()
    }

    /// Checks record invariants and that the manifest matches the records.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            r.validate()?;
        }
        if self.manifest.record_count != self.records.len() || self.manifest.counts != tally(&self.records) {
            return Err(Error::InvariantViolation(
                "manifest counts do not match the stored records".into(),
            ));
        }
        if self.manifest.iteration_index != self.iteration_index {
            return Err(Error::InvariantViolation("manifest iteration index mismatch".into()));
        }
        Ok(())
    }

    /// Keeps only records matching `keep`; iteration index and warnings carry over.
    pub fn filtered(&self, keep: impl Fn(&TrajectoryRecord) -> bool) -> SansDataset {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::assemble(records, self.iteration_index, self.manifest.warnings.clone())
    }

    /// Concatenates datasets; the iteration index is the maximum of the parts.
    pub fn merged(parts: &[&SansDataset]) -> SansDataset {
        let records = parts.iter().flat_map(|d| d.records.iter().cloned()).collect();
        let it = parts.iter().map(|d| d.iteration_index).max().unwrap_or(0);
        Self::assemble(records, it, Vec::new())
    }
}

fn episode_seeds(tree: &SeedTree, label: &str, i: u64) -> Vec<u64> {
    (0..=MAX_RETRIES)
        .map(|j| tree.derive(label, i * (MAX_RETRIES + 1) + j))
        .collect()
}

/// Collects `n_success` expert and `n_near` perturbed-expert episodes.
pub fn generate_sans(task: &TaskSpec, n_success: usize, n_near: usize, seed: u64) -> Result<SansDataset> {
    if n_success + n_near == 0 {
        return Err(Error::contract("generate_sans needs at least one episode"));
    }
    task.validate()?;
    let env = Env::new(task.clone());
    let tree = SeedTree::new(seed);

    let success: Vec<Result<TrajectoryRecord>> = exec::map_indexed(n_success, |i| {
        for s in episode_seeds(&tree, "sans/success", i as u64) {
            let ep = run_episode(&env, env.reset(s), |st| expert_action(st, task, [0.0, 0.0]))?;
            if ep.succeeded() {
                return Ok(TrajectoryRecord::from_episode(task, &ep, Provenance::Expert, s));
            }
        }
        Err(Error::Generation(format!(
            "expert episode {i} failed after {MAX_RETRIES} retries"
        )))
    });
    let near: Vec<Result<TrajectoryRecord>> = exec::map_indexed(n_near, |i| {
        for s in episode_seeds(&tree, "sans/near", i as u64) {
            let expert = NearSuccessExpert::new(task, s ^ 0x9e37_79b9_7f4a_7c15);
            let ep = run_episode(&env, env.reset(s), |st| expert.action(st))?;
            if !ep.succeeded() {
                return Ok(TrajectoryRecord::from_episode(task, &ep, Provenance::PerturbedExpert, s));
            }
        }
        Err(Error::Generation(format!(
            "near-success episode {i} kept succeeding after {MAX_RETRIES} retries"
        )))
    });
    let records = success.into_iter().chain(near).collect::<Result<Vec<_>>>()?;
    SansDataset::new(records, 0)
}

/// Appends deployed-policy rollouts and advances the iteration index.
pub fn augment(dataset: &SansDataset, rollouts: Vec<TrajectoryRecord>) -> Result<SansDataset> {
    for r in &rollouts {
        if r.provenance != Provenance::PolicyRollout {
            return Err(Error::contract(format!(
                "augment accepts policy rollouts only, got {:?}",
                r.provenance
            )));
        }
        r.validate()?;
    }
    let mut records = dataset.records.clone();
    records.extend(rollouts);
    Ok(SansDataset::assemble(
        records,
        dataset.iteration_index + 1,
        dataset.manifest.warnings.clone(),
    ))
}

/// Outcome-stratified train / held-out partition.
pub fn split(dataset: &SansDataset, holdout_fraction: f64, seed: u64) -> Result<(SansDataset, SansDataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::contract(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = dataset.manifest.warnings.clone();
    let classes = [Outcome::Success, Outcome::Failure];
    let by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..dataset.len()).filter(|&i| dataset.records[i].outcome == c).collect())
        .collect();
    let stratify = by_class.iter().all(|ix| ix.is_empty() || ix.len() >= 2);

    let take = |mut ix: Vec<usize>, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = ix.len();
        if n < 2 {
            return Vec::new();
        }
        let k = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
        ix.shuffle(rng);
        ix.truncate(k);
        ix
    };
    let mut held: Vec<usize> = if stratify {
        by_class.into_iter().flat_map(|ix| take(ix, &mut rng)).collect()
    } else {
        warnings.push(format!(
            "split: an outcome class has fewer than 2 records; stratification skipped (seed {seed})"
        ));
        take((0..dataset.len()).collect(), &mut rng)
    };
    held.sort_unstable();
    let mut is_held = vec![false; dataset.len()];
    for &i in &held {
        is_held[i] = true;
    }
    let pick = |want: bool| -> Vec<TrajectoryRecord> {
        dataset
            .records
            .iter()
            .zip(&is_held)
            .filter(|(_, &h)| h == want)
            .map(|(r, _)| r.clone())
            .collect()
    };
    let it = dataset.iteration_index;
    Ok((
        SansDataset::assemble(pick(false), it, warnings.clone()),
        SansDataset::assemble(pick(true), it, warnings),
    ))
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    task_id: String,
    outcome: Outcome,
    provenance: Provenance,
    seed: u64,
    frames: usize,
    actions: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";

/// Writes `manifest.json` and `records.bin` under the directory `dir`.
pub fn save(dataset: &SansDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let mut buf: Vec<u8> = Vec::new();
    for r in &dataset.records {
        let header = RecordHeader {
            task_id: r.task_id.clone(),
            outcome: r.outcome,
            provenance: r.provenance,
            seed: r.seed,
            frames: r.frames.len(),
            actions: r.actions.len(),
        };
        serde_json::to_writer(&mut buf, &header).map_err(|e| Error::json(dir.join(RECORDS_FILE), e))?;
        buf.push(b'\n');
        for f in &r.frames {
            for v in &f.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for a in &r.actions {
            for v in a.to_array() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&r.rewards);
    }
    let rpath = dir.join(RECORDS_FILE);
    let mut f = fs::File::create(&rpath).map_err(|e| Error::io(&rpath, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&rpath, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<SansDataset> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Truncated {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != SANS_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: mpath,
            expected: SANS_FORMAT_VERSION,
            found: version,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Truncated {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;

    let rpath = dir.join(RECORDS_FILE);
    let bytes = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let truncated = |detail: String| Error::Truncated {
        path: rpath.clone(),
        detail,
    };
    let mut pos = 0;
    let mut records = Vec::new();
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| truncated(format!("unterminated record header at byte {pos}")))?;
        let header: RecordHeader = serde_json::from_slice(&bytes[pos..pos + nl])
            .map_err(|e| truncated(format!("bad record header at byte {pos}: {e}")))?;
        pos += nl + 1;
        let need = header.frames * FRAME_LEN * 8 + header.actions * 3 * 8 + header.actions;
        if bytes.len() - pos < need {
            return Err(truncated(format!(
                "record {} needs {need} payload bytes, {} remain",
                header.seed,
                bytes.len() - pos
            )));
        }
        let mut f64s = bytes[pos..pos + need - header.actions]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let frames = (0..header.frames)
            .map(|_| Frame {
                data: f64s.by_ref().take(FRAME_LEN).collect(),
            })
            .collect();
        let actions = (0..header.actions)
            .map(|_| {
                let (x, y, g) = (
                    f64s.next().expect("sized"),
                    f64s.next().expect("sized"),
                    f64s.next().expect("sized"),
                );
                ActionPose { x, y, grip: g != 0.0 }
            })
            .collect();
        pos += need - header.actions;
        let rewards = bytes[pos..pos + header.actions].to_vec();
        pos += header.actions;
        records.push(TrajectoryRecord {
            task_id: header.task_id,
            frames,
            actions,
            rewards,
            outcome: header.outcome,
            provenance: header.provenance,
            seed: header.seed,
        });
    }
    let ds = SansDataset {
        records,
        iteration_index: manifest.iteration_index,
        manifest,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SansDataset {
        generate_sans(&TaskSpec::reference(), 5, 5, 7).unwrap()
    }

    #[test]
    fn generation_counts_and_labels() {
        let d = small();
        assert_eq!(d.len(), 10);
        assert_eq!(d.count(Outcome::Success), 5);
        for r in &d.records {
            assert_eq!(r.outcome == Outcome::Success, r.rewards.contains(&1));
        }
        let one = generate_sans(&TaskSpec::reference(), 1, 0, 1).unwrap();
        assert_eq!(one.records[0].rewards.iter().max(), Some(&1));
        let fails = generate_sans(&TaskSpec::reference(), 0, 3, 1).unwrap();
        assert!(fails
            .records
            .iter()
            .all(|r| r.outcome == Outcome::Failure && r.provenance == Provenance::PerturbedExpert));
        assert!(generate_sans(&TaskSpec::reference(), 0, 0, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(), small());
    }

    #[test]
    fn split_stratifies() {
        let d = small();
        let (train, held) = split(&d, 0.2, 3).unwrap();
        assert_eq!(held.len(), 2);
        assert_eq!(held.count(Outcome::Success), 1);
        assert_eq!(train.len() + held.len(), d.len());
        let (t2, h2) = split(&d, 0.2, 3).unwrap();
        assert_eq!((train, held), (t2, h2));
        assert!(split(&d, 1.0, 3).is_err());
    }

    #[test]
    fn split_without_enough_of_a_class_warns() {
        let d = generate_sans(&TaskSpec::reference(), 1, 6, 2).unwrap();
        let (train, held) = split(&d, 0.3, 1).unwrap();
        assert_eq!(train.len() + held.len(), 7);
        assert!(!held.manifest.warnings.is_empty());
    }

    #[test]
    fn augment_appends_and_bumps_iteration() {
        let d = small();
        let mut extra: Vec<TrajectoryRecord> = d.records[..3].to_vec();
        assert!(augment(&d, extra.clone()).is_err());
        for r in &mut extra {
            r.provenance = Provenance::PolicyRollout;
        }
        let a = augment(&d, extra).unwrap();
        assert_eq!(a.len(), 13);
        assert_eq!(a.iteration_index, 1);
        a.validate().unwrap();
        let b = augment(&d, Vec::new()).unwrap();
        assert_eq!(b.records, d.records);
        assert_eq!(b.iteration_index, 1);
    }
}
