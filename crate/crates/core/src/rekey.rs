//! Key version history and forward/backward security audits.
//!
//! Keys are modeled as `(node, version)` pairs. A reader can decrypt group
//! traffic iff it holds the live version of the root key, so the audits reduce
//! to set disjointness:
//!
//! * forward security: no pair a departing member held stays live after its
//!   withdrawal, or ever becomes live again;
//! * backward security: no pair a newcomer receives was live before its join.
//!
//! The history stores, per mutation, only the versions that changed. The live
//! state at any step is recovered by replay from the initial snapshot.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::key_tree::{KeyTree, MemberId, MutationKind, NodeId, TreeMutation};

#[derive(Debug, Error)]
pub enum EpochError {
    #[error("mutation {step} is inconsistent with the tree: {reason}")]
    Inconsistent { step: usize, reason: String },
    #[error("malformed epoch file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("member {0} never withdrew")]
    NeverWithdrew(MemberId),
    #[error("member {0} never joined")]
    NeverJoined(MemberId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub step: usize,
    pub mutation: TreeMutation,
    /// Post-mutation versions of every node that was created or whose version
    /// changed, sorted by node id.
    pub version_changes: Vec<(NodeId, u64)>,
}

impl EpochEntry {
    /// New `(node, version)` pairs introduced by this mutation.
    pub fn keys_issued(&self) -> usize {
        self.version_changes.len()
    }
}

/// One stay of a member in the group; steps index into the history, `None`
/// for `joined` means present at the start of the epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipInterval {
    pub joined: Option<usize>,
    pub left: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct KeyEpoch {
    initial: Vec<(NodeId, u64)>,
    initial_members: Vec<MemberId>,
    entries: Vec<EpochEntry>,
    live: HashMap<NodeId, u64>,
    intervals: BTreeMap<MemberId, Vec<MembershipInterval>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SecurityViolation {
    pub member: MemberId,
    pub step: usize,
    pub kind: ViolationKind,
    pub node: NodeId,
    pub version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A key held by a departed member is still (or again) live.
    Forward,
    /// A newcomer received a key that was live before it joined.
    Backward,
    /// The history does not know a node on the member's path.
    UnknownPathNode,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub forward: BTreeMap<MemberId, bool>,
    pub backward: BTreeMap<MemberId, bool>,
    pub violations: Vec<SecurityViolation>,
}

impl AuditReport {
    pub fn all_passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Start {
        versions: Vec<(NodeId, u64)>,
        members: Vec<MemberId>,
    },
    Mutation(EpochEntry),
    End {
        entries: usize,
    },
}

impl KeyEpoch {
    pub fn start(tree: &KeyTree) -> Self {
        let initial = tree.key_versions();
        let initial_members: Vec<MemberId> = tree.members().map(|m| m.id).collect();
        let mut epoch = Self {
            live: initial.iter().copied().collect(),
            initial,
            ..Self::default()
        };
        for &m in &initial_members {
            epoch.intervals.entry(m).or_default().push(MembershipInterval {
                joined: None,
                left: None,
            });
        }
        epoch.initial_members = initial_members;
        epoch
    }

    pub fn entries(&self) -> &[EpochEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn intervals(&self, member: MemberId) -> &[MembershipInterval] {
        self.intervals.get(&member).map_or(&[], Vec::as_slice)
    }

    fn is_present(&self, member: MemberId) -> bool {
        self.intervals(member)
            .last()
            .is_some_and(|i| i.left.is_none())
    }

    /// Appends `mutation`, which must be the one that produced the current
    /// state of `tree` from the previously recorded state.
    pub fn record(&mut self, tree: &KeyTree, mutation: TreeMutation) -> Result<(), EpochError> {
        let step = self.entries.len();
        let fail = |reason: String| EpochError::Inconsistent { step, reason };

        let current: HashMap<NodeId, u64> = tree.key_versions().into_iter().collect();
        let removed: BTreeSet<NodeId> = self
            .live
            .keys()
            .filter(|n| !current.contains_key(n))
            .copied()
            .collect();
        let created: BTreeSet<NodeId> = current
            .keys()
            .filter(|n| !self.live.contains_key(n))
            .copied()
            .collect();
        if removed != mutation.removed.iter().copied().collect() {
            return Err(fail(format!(
                "removed nodes {:?} differ from the tree diff {:?}",
                mutation.removed, removed
            )));
        }
        if created != mutation.created.iter().copied().collect() {
            return Err(fail(format!(
                "created nodes {:?} differ from the tree diff {:?}",
                mutation.created, created
            )));
        }

        let refreshed: HashSet<NodeId> = mutation.refreshed.iter().copied().collect();
        let mut changes = Vec::new();
        for (&node, &version) in &current {
            match self.live.get(&node) {
                None => changes.push((node, version)),
                Some(&old) if old != version => {
                    if version < old {
                        return Err(fail(format!("version of {node} went back from {old} to {version}")));
                    }
                    if !refreshed.contains(&node) {
                        return Err(fail(format!("{node} changed version but is not listed as refreshed")));
                    }
                    changes.push((node, version));
                }
                Some(_) => {
                    if refreshed.contains(&node) {
                        return Err(fail(format!("{node} is listed as refreshed but kept its version")));
                    }
                }
            }
        }
        for node in &refreshed {
            if !current.contains_key(node) && !removed.contains(node) {
                return Err(fail(format!("refreshed node {node} is unknown")));
            }
        }

        let member = mutation.member.id;
        match mutation.kind {
            MutationKind::Join => {
                if self.is_present(member) {
                    return Err(fail(format!("{member} joined while already a member")));
                }
                self.intervals.entry(member).or_default().push(MembershipInterval {
                    joined: Some(step),
                    left: None,
                });
            }
            MutationKind::Withdraw => {
                if !self.is_present(member) {
                    return Err(fail(format!("{member} withdrew without being a member")));
                }
                if let Some(last) = self.intervals.get_mut(&member).and_then(|v| v.last_mut()) {
                    last.left = Some(step);
                }
            }
        }

        changes.sort_unstable();
        for node in &removed {
            self.live.remove(node);
        }
        self.live.extend(changes.iter().copied());
        self.entries.push(EpochEntry {
            step,
            mutation,
            version_changes: changes,
        });
        Ok(())
    }

    /// Re-checks every entry's version changes against its refreshed,
    /// created and removed sets by replaying the history.
    pub fn verify_consistency(&self) -> Result<(), EpochError> {
        let mut live: HashMap<NodeId, u64> = self.initial.iter().copied().collect();
        for e in &self.entries {
            let fail = |reason: String| EpochError::Inconsistent {
                step: e.step,
                reason,
            };
            let m = &e.mutation;
            let refreshed: HashSet<NodeId> = m.refreshed.iter().copied().collect();
            for n in &m.removed {
                if live.remove(n).is_none() {
                    return Err(fail(format!("removed node {n} was not live")));
                }
            }
            let changed: HashSet<NodeId> = e.version_changes.iter().map(|(n, _)| *n).collect();
            for n in &m.created {
                if !changed.contains(n) {
                    return Err(fail(format!("created node {n} has no version")));
                }
            }
            for &(n, v) in &e.version_changes {
                match live.get(&n) {
                    None if m.created.contains(&n) => {}
                    None => return Err(fail(format!("{n} changed but is neither live nor created"))),
                    Some(&old) if v <= old => {
                        return Err(fail(format!("{n} version did not increase ({old} -> {v})")))
                    }
                    Some(_) if !refreshed.contains(&n) => {
                        return Err(fail(format!("{n} changed without being refreshed")))
                    }
                    Some(_) => {}
                }
            }
            for n in &refreshed {
                if live.contains_key(n) && !changed.contains(n) && !m.removed.contains(n) {
                    return Err(fail(format!("refreshed node {n} kept its version")));
                }
            }
            live.extend(e.version_changes.iter().copied());
        }
        Ok(())
    }

    /// Audits every withdrawal (forward) and every join (backward) in one
    /// replay. Live pairs only appear through `version_changes`, so a pair
    /// that is gone right after a withdrawal can become live again only by
    /// being re-issued, which is tracked explicitly.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let mut live: HashMap<NodeId, u64> = self.initial.iter().copied().collect();
        let mut seen: HashSet<(NodeId, u64)> = self.initial.iter().copied().collect();
        // Pairs that must never be live again, with the member and step that retired them.
        let mut retired: HashMap<(NodeId, u64), (MemberId, usize)> = HashMap::new();

        for e in &self.entries {
            let m = &e.mutation;
            let member = m.member.id;
            let mut held = Vec::new();
            let mut unknown = None;
            if m.kind == MutationKind::Withdraw {
                for &n in &m.path {
                    match live.get(&n) {
                        Some(&v) => held.push((n, v)),
                        None => unknown = Some(n),
                    }
                }
            }

            for n in &m.removed {
                live.remove(n);
            }
            for &(n, v) in &e.version_changes {
                if let Some(&(who, step)) = retired.get(&(n, v)) {
                    report.violations.push(SecurityViolation {
                        member: who,
                        step,
                        kind: ViolationKind::Forward,
                        node: n,
                        version: v,
                    });
                    report.forward.insert(who, false);
                }
                live.insert(n, v);
            }

            match m.kind {
                MutationKind::Withdraw => {
                    let mut ok = true;
                    if let Some(n) = unknown {
                        ok = false;
                        report.violations.push(SecurityViolation {
                            member,
                            step: e.step,
                            kind: ViolationKind::UnknownPathNode,
                            node: n,
                            version: 0,
                        });
                    }
                    for &(n, v) in &held {
                        if live.get(&n) == Some(&v) {
                            ok = false;
                            report.violations.push(SecurityViolation {
                                member,
                                step: e.step,
                                kind: ViolationKind::Forward,
                                node: n,
                                version: v,
                            });
                        }
                        retired.insert((n, v), (member, e.step));
                    }
                    let entry = report.forward.entry(member).or_insert(true);
                    *entry &= ok;
                }
                MutationKind::Join => {
                    let mut ok = true;
                    for &n in &m.path {
                        let violation = match live.get(&n) {
                            None => Some((ViolationKind::UnknownPathNode, 0)),
                            Some(&v) if seen.contains(&(n, v)) => Some((ViolationKind::Backward, v)),
                            Some(_) => None,
                        };
                        if let Some((kind, version)) = violation {
                            ok = false;
                            report.violations.push(SecurityViolation {
                                member,
                                step: e.step,
                                kind,
                                node: n,
                                version,
                            });
                        }
                    }
                    let entry = report.backward.entry(member).or_insert(true);
                    *entry &= ok;
                }
            }
            seen.extend(e.version_changes.iter().copied());
        }
        report
    }

    pub fn check_forward_security(&self, member: MemberId) -> Result<bool, AuditError> {
        self.audit()
            .forward
            .get(&member)
            .copied()
            .ok_or(AuditError::NeverWithdrew(member))
    }

    pub fn check_backward_security(&self, member: MemberId) -> Result<bool, AuditError> {
        self.audit()
            .backward
            .get(&member)
            .copied()
            .ok_or(AuditError::NeverJoined(member))
    }

    /// Writes the history as JSON lines: a start line with the initial
    /// snapshot, one line per mutation and an end line with the entry count.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let start = Line::Start {
            versions: self.initial.clone(),
            members: self.initial_members.clone(),
        };
        serde_json::to_writer(&mut out, &start)?;
        out.write_all(b"\n")?;
        for e in &self.entries {
            // Borrowing serializer for the tagged enum would need a clone anyway.
            serde_json::to_writer(&mut out, &Line::Mutation(e.clone()))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut out,
            &Line::End {
                entries: self.entries.len(),
            },
        )?;
        out.write_all(b"\n")?;
        out.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, EpochError> {
        let mut epoch: Option<KeyEpoch> = None;
        let mut finished = false;
        let mut line_no = 0;
        for line in input.lines() {
            line_no += 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| EpochError::Malformed {
                line: line_no,
                reason,
            };
            if finished {
                return Err(malformed("content after end line".into()));
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            match (parsed, epoch.as_mut()) {
                (Line::Start { versions, members }, None) => {
                    let mut e = KeyEpoch {
                        live: versions.iter().copied().collect(),
                        initial: versions,
                        ..KeyEpoch::default()
                    };
                    for &m in &members {
                        e.intervals.entry(m).or_default().push(MembershipInterval {
                            joined: None,
                            left: None,
                        });
                    }
                    e.initial_members = members;
                    epoch = Some(e);
                }
                (Line::Start { .. }, Some(_)) => return Err(malformed("repeated start line".into())),
                (_, None) => return Err(malformed("missing start line".into())),
                (Line::Mutation(entry), Some(e)) => {
                    if entry.step != e.entries.len() {
                        return Err(malformed(format!(
                            "expected step {}, found {}",
                            e.entries.len(),
                            entry.step
                        )));
                    }
                    e.apply_loaded(entry);
                }
                (Line::End { entries }, Some(e)) => {
                    if entries != e.entries.len() {
                        return Err(malformed(format!(
                            "end line announces {entries} entries, found {}",
                            e.entries.len()
                        )));
                    }
                    finished = true;
                }
            }
        }
        match (epoch, finished) {
            (Some(e), true) => Ok(e),
            _ => Err(EpochError::Malformed {
                line: line_no,
                reason: "truncated: no end line".into(),
            }),
        }
    }

    fn apply_loaded(&mut self, entry: EpochEntry) {
        let m = &entry.mutation;
        for n in &m.removed {
            self.live.remove(n);
        }
        self.live.extend(entry.version_changes.iter().copied());
        let member = m.member.id;
        match m.kind {
            MutationKind::Join => self.intervals.entry(member).or_default().push(MembershipInterval {
                joined: Some(entry.step),
                left: None,
            }),
            MutationKind::Withdraw => {
                if let Some(last) = self.intervals.get_mut(&member).and_then(|v| v.last_mut()) {
                    last.left = Some(entry.step);
                }
            }
        }
        self.entries.push(entry);
    }

    /// Test and tooling hook: drops the version bump of `node` from entry
    /// `step`, as if that refresh had been skipped.
    pub fn omit_refresh(&mut self, step: usize, node: NodeId) -> bool {
        let Some(entry) = self.entries.get_mut(step) else {
            return false;
        };
        let before = entry.version_changes.len();
        entry.version_changes.retain(|(n, _)| *n != node);
        before != entry.version_changes.len()
    }
}
