//! Slow reference implementations used only by tests.
//!
//! Each one is written from the definitions, sharing no code with the
//! production path it checks.

use std::collections::BTreeMap;

use crate::pipeline::{BubbleType, OpEvent, OpKind, PipelineConfig};
use crate::time::SimTime;

type Node = (usize, usize, OpKind, usize);

fn issue_order(p: usize, m: usize, s: usize) -> Vec<(OpKind, usize)> {
    let warm = (p - s).min(m);
    let mut fp = 1..=m;
    let mut bp = 1..=m;
    let mut out = Vec::new();
    for _ in 0..warm {
        out.push((OpKind::Fp, fp.next().unwrap()));
    }
    loop {
        let b = bp.next();
        let f = fp.next();
        if b.is_none() && f.is_none() {
            break;
        }
        out.extend(b.map(|x| (OpKind::Bp, x)));
        out.extend(f.map(|x| (OpKind::Fp, x)));
    }
    out
}

/// Earliest start of every op as the longest path through the dependency
/// DAG, found by relaxing all edges until nothing changes.
pub fn schedule_oracle(cfg: &PipelineConfig) -> Vec<OpEvent> {
    let (p, m) = (cfg.num_stages, cfg.num_micro_batches);
    let mut preds: BTreeMap<Node, Vec<Node>> = BTreeMap::new();
    for e in 0..cfg.num_epochs {
        for s in 0..p {
            let order = issue_order(p, m, s);
            for (i, &(k, mb)) in order.iter().enumerate() {
                let node = (e, s, k, mb);
                let mut v = Vec::new();
                if i > 0 {
                    v.push((e, s, order[i - 1].0, order[i - 1].1));
                }
                match k {
                    OpKind::Fp if s > 0 => v.push((e, s - 1, OpKind::Fp, mb)),
                    OpKind::Bp if s + 1 < p => v.push((e, s + 1, OpKind::Bp, mb)),
                    _ => {}
                }
                if e > 0 {
                    for t in 0..p {
                        for j in 1..=m {
                            v.push((e - 1, t, OpKind::Fp, j));
                            v.push((e - 1, t, OpKind::Bp, j));
                        }
                    }
                }
                preds.insert(node, v);
            }
        }
    }
    let dur = |n: &Node| match n.2 {
        OpKind::Fp => cfg.fp_durations[n.1],
        OpKind::Bp => cfg.bp_durations[n.1],
    };
    let mut start: BTreeMap<Node, SimTime> = preds.keys().map(|n| (*n, SimTime::ZERO)).collect();
    loop {
        let mut changed = false;
        for (n, ps) in &preds {
            let need = ps.iter().map(|q| start[q] + dur(q)).max().unwrap_or(SimTime::ZERO);
            if need > start[n] {
                start.insert(*n, need);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut ops: Vec<OpEvent> = start
        .iter()
        .map(|(n, &t)| OpEvent {
            stage: n.1,
            kind: n.2,
            micro_batch: n.3,
            epoch: n.0,
            start: t,
            end: t + dur(n),
        })
        .collect();
    ops.sort_by_key(|o| (o.start, o.stage, o.epoch));
    ops
}

/// Idle intervals of each stage inside each epoch window, found by walking
/// the stage's busy intervals. Returns `(stage, epoch, start, end, type)`.
pub fn idle_gap_oracle(cfg: &PipelineConfig, ops: &[OpEvent]) -> Vec<(usize, usize, SimTime, SimTime, BubbleType)> {
    let mut out = Vec::new();
    for e in 0..cfg.num_epochs {
        let in_epoch: Vec<&OpEvent> = ops.iter().filter(|o| o.epoch == e).collect();
        let Some(lo) = in_epoch.iter().map(|o| o.start).min() else {
            continue;
        };
        let hi = in_epoch.iter().map(|o| o.end).max().unwrap();
        for s in 0..cfg.num_stages {
            let mut mine: Vec<&&OpEvent> = in_epoch.iter().filter(|o| o.stage == s).collect();
            mine.sort_by_key(|o| o.start);
            let mut cursor = lo;
            let mut seen_bp = false;
            for (i, op) in mine.iter().enumerate() {
                if op.start > cursor {
                    let t = if i == 0 {
                        BubbleType::A
                    } else if op.kind == OpKind::Bp && !seen_bp {
                        BubbleType::B
                    } else {
                        BubbleType::C
                    };
                    out.push((s, e, cursor, op.start, t));
                }
                seen_bp |= op.kind == OpKind::Bp;
                cursor = op.end;
            }
            if hi > cursor {
                out.push((s, e, cursor, hi, BubbleType::A));
            }
        }
    }
    out.sort_by_key(|g| (g.1, g.0, g.2));
    out
}

/// Worker choice by exhaustive ranking: among workers with strictly more
/// memory than the estimate, fewest tasks first, then lowest id.
pub fn assignment_oracle(est_memory: f64, workers: &[(f64, usize)]) -> Option<usize> {
    let mut ok: Vec<(usize, usize)> = workers
        .iter()
        .enumerate()
        .filter(|(_, (mem, _))| *mem > est_memory)
        .map(|(i, (_, n))| (*n, i))
        .collect();
    ok.sort();
    ok.first().map(|&(_, i)| i)
}
