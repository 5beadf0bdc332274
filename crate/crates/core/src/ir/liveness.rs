//! Backward dataflow liveness. Phi operands count as uses at the tail of
//! the incoming predecessor, and phi results are defined at the top of
//! their block.

use std::collections::BTreeSet;

use super::dom::Cfg;
use super::{Block, Function, InstKind, Value};

#[derive(Clone, Debug)]
pub struct Liveness {
    pub live_in: Vec<BTreeSet<Value>>,
    pub live_out: Vec<BTreeSet<Value>>,
}

impl Liveness {
    pub fn live_in(&self, b: Block) -> &BTreeSet<Value> {
        &self.live_in[b.0 as usize]
    }

    pub fn live_out(&self, b: Block) -> &BTreeSet<Value> {
        &self.live_out[b.0 as usize]
    }
}

pub fn liveness(f: &Function, cfg: &Cfg) -> Liveness {
    let n = f.block_count();
    let mut ue_use = vec![BTreeSet::new(); n];
    let mut defs = vec![BTreeSet::new(); n];
    // Phi uses attributed to predecessor exits: (pred, succ) -> values.
    let mut phi_uses: Vec<Vec<(Block, Value)>> = vec![Vec::new(); n];
    for &b in &f.blocks {
        let bi = b.0 as usize;
        for &id in &f.block(b).insts {
            let inst = f.inst(id);
            match &inst.kind {
                InstKind::Phi { incomings, .. } => {
                    for (p, v) in incomings {
                        phi_uses[p.0 as usize].push((b, *v));
                    }
                }
                kind => {
                    kind.for_each_operand(|v| {
                        if !defs[bi].contains(&v) {
                            ue_use[bi].insert(v);
                        }
                    });
                }
            }
            if let Some(r) = inst.result {
                defs[bi].insert(r);
            }
        }
    }
    let mut live_in = vec![BTreeSet::new(); n];
    let mut live_out = vec![BTreeSet::new(); n];
    let mut changed = true;
    while changed {
        changed = false;
        for &b in cfg.rpo.iter().rev() {
            let bi = b.0 as usize;
            let mut out: BTreeSet<Value> = BTreeSet::new();
            for &s in cfg.succs(b) {
                out.extend(live_in[s.0 as usize].iter().copied());
            }
            for (_, v) in &phi_uses[bi] {
                out.insert(*v);
            }
            let mut inn = ue_use[bi].clone();
            inn.extend(out.difference(&defs[bi]).copied());
            if inn != live_in[bi] || out != live_out[bi] {
                live_in[bi] = inn;
                live_out[bi] = out;
                changed = true;
            }
        }
    }
    Liveness { live_in, live_out }
}

/// True when `v` is live immediately after instruction `index` of block `b`
/// (i.e. some later use on a path from that point still reads it).
pub fn live_after(f: &Function, cfg: &Cfg, live: &Liveness, v: Value, b: Block, index: usize) -> bool {
    // A later non-phi use inside the block keeps it live.
    let insts = &f.block(b).insts;
    for &id in insts.iter().skip(index + 1) {
        let mut used = false;
        match &f.inst(id).kind {
            InstKind::Phi { .. } => {}
            kind => kind.for_each_operand(|o| used |= o == v),
        }
        if used {
            return true;
        }
    }
    // Or it flows out of the block: either in live-out or consumed by a
    // successor phi on this edge.
    if live.live_out(b).contains(&v) {
        return true;
    }
    for &s in cfg.succs(b) {
        for &id in &f.block(s).insts {
            if let InstKind::Phi { incomings, .. } = &f.inst(id).kind {
                if incomings.iter().any(|(p, val)| *p == b && *val == v) {
                    return true;
                }
            }
        }
    }
    false
}
