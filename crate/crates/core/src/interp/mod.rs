//! Executes toy IR in two modes. Direct mode runs the original program
//! against a never-moving arena; handle mode runs pass output against the
//! handle table, pin frames, and the defragmenting service, with forced
//! barriers injected at chosen safepoints. Every live object carries a
//! shadow copy that is revalidated after each relocation pass, and raw
//! addresses must come out of translations — a handle reaching a memory
//! access or an external call untranslated is a hard fault. The two modes
//! together form the observational-equivalence oracle.

pub mod equiv;
pub mod memory;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorage::{AllocError, AnchorageConfig};
use crate::handle::{classify, Classified, HandleError};
use crate::ir::{BinOp, Block, Function, InstId, InstKind, Pred, Program, Ty, Value};
use crate::pass::{allocate_pin_slots, PinSlotAssignment};
use crate::pin::{GlobalPinMap, MutatorContext, PinError};
use crate::runtime::{HandleWorld, RuntimeError};

use memory::{DirectHeap, DirectHeapError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Direct,
    Handle,
}

/// One forced barrier: fires when the dynamic safepoint counter reaches
/// `at_safepoint` (1-based), running a defragmentation pass with the given
/// byte budget (`None` means unbounded).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarrierEvent {
    pub at_safepoint: u64,
    pub budget_bytes: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarrierSchedule {
    pub events: Vec<BarrierEvent>,
}

impl BarrierSchedule {
    pub fn every(n: u64, upto: u64, budget: Option<u64>) -> BarrierSchedule {
        BarrierSchedule {
            events: (1..=upto)
                .filter(|i| i % n == 0)
                .map(|i| BarrierEvent {
                    at_safepoint: i,
                    budget_bytes: budget,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExecConfig {
    pub mode: ExecMode,
    pub seed: u64,
    pub step_limit: u64,
    pub schedule: BarrierSchedule,
    pub anchorage: AnchorageConfig,
    /// Revalidate every live object's shadow copy after each defrag pass.
    pub check_canaries: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            mode: ExecMode::Direct,
            seed: 0,
            step_limit: 2_000_000,
            schedule: BarrierSchedule::default(),
            anchorage: AnchorageConfig::default(),
            check_canaries: true,
        }
    }
}

impl ExecConfig {
    pub fn direct() -> ExecConfig {
        ExecConfig::default()
    }

    pub fn handle(schedule: BarrierSchedule) -> ExecConfig {
        ExecConfig {
            mode: ExecMode::Handle,
            schedule,
            ..ExecConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub steps: u64,
    pub translates: u64,
    pub pins: u64,
    pub releases: u64,
    pub noop_releases: u64,
    pub safepoints: u64,
    pub barriers: u64,
    pub moves: u64,
    pub moved_bytes: u64,
    pub allocs: u64,
    pub frees: u64,
    /// Largest number of simultaneously occupied pin slots observed in any
    /// single frame.
    pub max_live_pins: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub ret: i64,
    pub outputs: Vec<i64>,
    pub counters: Counters,
    pub assertions: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("program has no @main() -> i64")]
    NoMain,
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("call depth limit exceeded in @{0}")]
    CallDepth(String),
    #[error("use of dead handle: {0}")]
    DeadHandle(HandleError),
    #[error("untranslated handle reached a memory access (value {0:#x})")]
    UntranslatedAccess(u64),
    #[error("handle escaped to external @{callee} untranslated (value {value:#x})")]
    EscapedHandle { callee: String, value: u64 },
    #[error("memory fault: {0}")]
    Memory(String),
    #[error("store outside the object's logical size (handle {id}, offset {offset}, len {len})")]
    StoreBeyondObject { id: u32, offset: u64, len: u64 },
    #[error("unbalanced pin bookkeeping: {0}")]
    Pin(#[from] PinError),
    #[error("translation left unreleased at frame pop in @{func} (slot {slot})")]
    UnreleasedTranslation { func: String, slot: usize },
    #[error("release of a translation that is not active (slot {slot})")]
    StaleRelease { slot: usize },
    #[error("canary mismatch: object {id} bytes changed across a pass")]
    CanaryMismatch { id: u32 },
    #[error("pinned object {id} moved during a pass")]
    PinnedObjectMoved { id: u32 },
    #[error("unknown external function @{0}")]
    UnknownExternal(String),
    #[error("allocation fault: {0}")]
    Alloc(String),
    #[error("runtime fault: {0}")]
    Runtime(String),
}

impl From<HandleError> for ExecError {
    fn from(e: HandleError) -> Self {
        ExecError::DeadHandle(e)
    }
}

impl From<DirectHeapError> for ExecError {
    fn from(e: DirectHeapError) -> Self {
        ExecError::Memory(e.to_string())
    }
}

impl From<AllocError> for ExecError {
    fn from(e: AllocError) -> Self {
        ExecError::Alloc(e.to_string())
    }
}

impl From<RuntimeError> for ExecError {
    fn from(e: RuntimeError) -> Self {
        ExecError::Runtime(e.to_string())
    }
}

const CALL_DEPTH_LIMIT: usize = 128;

struct FrameTrack {
    /// Which static translate currently occupies each slot; tracked only
    /// while release instructions are present in the function.
    active: Vec<Option<InstId>>,
}

pub struct Interp<'p> {
    program: &'p Program,
    cfg: ExecConfig,
    direct: DirectHeap,
    world: HandleWorld,
    mutator: MutatorContext,
    frames: Vec<FrameTrack>,
    slot_maps: Vec<PinSlotAssignment>,
    has_releases: Vec<bool>,
    func_index: BTreeMap<String, usize>,
    counters: Counters,
    outputs: Vec<i64>,
    assertions: Vec<String>,
    shadow: BTreeMap<u32, Vec<u8>>,
    schedule: BTreeMap<u64, Vec<Option<u64>>>,
    rng: ChaCha8Rng,
    balance: i64,
}

pub fn run(program: &Program, cfg: &ExecConfig) -> Result<Trace, ExecError> {
    let mut interp = Interp::new(program, cfg.clone())?;
    let ret = interp.run_main()?;
    if interp.balance != 0 {
        interp
            .assertions
            .push(format!("release balance ended at {}", interp.balance));
    }
    Ok(Trace {
        ret,
        outputs: interp.outputs,
        counters: interp.counters,
        assertions: interp.assertions,
    })
}

impl<'p> Interp<'p> {
    pub fn new(program: &'p Program, cfg: ExecConfig) -> Result<Interp<'p>, ExecError> {
        let func_index: BTreeMap<String, usize> = program
            .functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.clone(), i))
            .collect();
        let (slot_maps, has_releases) = if cfg.mode == ExecMode::Handle {
            (
                program.functions.iter().map(allocate_pin_slots).collect(),
                program
                    .functions
                    .iter()
                    .map(|f| {
                        f.blocks.iter().any(|&b| {
                            f.block(b)
                                .insts
                                .iter()
                                .any(|&id| matches!(f.inst(id).kind, InstKind::Release { .. }))
                        })
                    })
                    .collect(),
            )
        } else {
            (
                vec![PinSlotAssignment::default(); program.functions.len()],
                vec![false; program.functions.len()],
            )
        };
        let mut schedule: BTreeMap<u64, Vec<Option<u64>>> = BTreeMap::new();
        for ev in &cfg.schedule.events {
            schedule
                .entry(ev.at_safepoint)
                .or_default()
                .push(ev.budget_bytes);
        }
        let anchorage = cfg.anchorage.clone();
        let seed = cfg.seed;
        Ok(Interp {
            program,
            cfg,
            direct: DirectHeap::new(),
            world: HandleWorld::new(anchorage),
            mutator: MutatorContext::new(),
            frames: Vec::new(),
            slot_maps,
            has_releases,
            func_index,
            counters: Counters::default(),
            outputs: Vec::new(),
            assertions: Vec::new(),
            shadow: BTreeMap::new(),
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            balance: 0,
        })
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    fn run_main(&mut self) -> Result<i64, ExecError> {
        let main = self
            .func_index
            .get("main")
            .copied()
            .ok_or(ExecError::NoMain)?;
        let f = &self.program.functions[main];
        if !f.params.is_empty() || f.ret_ty != Some(Ty::I64) {
            return Err(ExecError::NoMain);
        }
        let ret = self.call_function(main, &[])?;
        Ok(ret.unwrap_or(0) as i64)
    }

    fn handle_mode(&self) -> bool {
        self.cfg.mode == ExecMode::Handle
    }

    fn call_function(&mut self, idx: usize, args: &[u64]) -> Result<Option<u64>, ExecError> {
        if self.frames.len() >= CALL_DEPTH_LIMIT {
            return Err(ExecError::CallDepth(
                self.program.functions[idx].name.clone(),
            ));
        }
        let f = &self.program.functions[idx];
        let slot_count = self.slot_maps[idx].slot_count as usize;
        if self.handle_mode() {
            self.mutator.frame_push(idx as u32, slot_count);
        }
        self.frames.push(FrameTrack {
            active: vec![None; slot_count],
        });
        let mut regs: Vec<u64> = vec![0; f.value_count()];
        for (&p, &a) in f.params.iter().zip(args) {
            regs[p.0 as usize] = a;
        }
        let result = self.exec_blocks(f, idx, &mut regs);
        // Balance check before unwinding the frame.
        let track = self.frames.pop().expect("frame pushed above");
        if self.handle_mode() {
            if result.is_ok() && self.has_releases[idx] {
                if let Some(slot) = track.active.iter().position(|s| s.is_some()) {
                    return Err(ExecError::UnreleasedTranslation {
                        func: self.program.functions[idx].name.clone(),
                        slot,
                    });
                }
            }
            self.mutator.frame_pop();
        }
        result
    }

    fn exec_blocks(
        &mut self,
        f: &'p Function,
        fidx: usize,
        regs: &mut Vec<u64>,
    ) -> Result<Option<u64>, ExecError> {
        let mut block = f.entry();
        let mut index = 0usize;
        loop {
            let insts = &f.block(block).insts;
            if index >= insts.len() {
                return Err(ExecError::Memory(format!(
                    "fell off the end of block {}",
                    f.block(block).label
                )));
            }
            let id = insts[index];
            self.counters.steps += 1;
            if self.counters.steps > self.cfg.step_limit {
                return Err(ExecError::StepLimit(self.cfg.step_limit));
            }
            let inst = f.inst(id);
            let get = |regs: &Vec<u64>, v: Value| regs[v.0 as usize];
            match &inst.kind {
                InstKind::Const(c) => {
                    regs[inst.result.unwrap().0 as usize] = *c as u64;
                }
                InstKind::Bin { op, lhs, rhs } => {
                    let a = get(regs, *lhs) as i64;
                    let b = get(regs, *rhs) as i64;
                    let r = match op {
                        BinOp::Add => a.wrapping_add(b),
                        BinOp::Sub => a.wrapping_sub(b),
                        BinOp::Mul => a.wrapping_mul(b),
                    };
                    regs[inst.result.unwrap().0 as usize] = r as u64;
                }
                InstKind::Icmp { pred, lhs, rhs } => {
                    let a = get(regs, *lhs) as i64;
                    let b = get(regs, *rhs) as i64;
                    let r = match pred {
                        Pred::Eq => a == b,
                        Pred::Ne => a != b,
                        Pred::Slt => a < b,
                        Pred::Sle => a <= b,
                        Pred::Sgt => a > b,
                        Pred::Sge => a >= b,
                    };
                    regs[inst.result.unwrap().0 as usize] = r as u64;
                }
                InstKind::Halloc { size } => {
                    let size = get(regs, *size) as i64;
                    let v = self.halloc(size)?;
                    regs[inst.result.unwrap().0 as usize] = v;
                }
                InstKind::Hfree { ptr } => {
                    let v = get(regs, *ptr);
                    self.hfree(v)?;
                }
                InstKind::Hrealloc { ptr, size } => {
                    let v = get(regs, *ptr);
                    let size = get(regs, *size) as i64;
                    let r = self.hrealloc(v, size)?;
                    regs[inst.result.unwrap().0 as usize] = r;
                }
                InstKind::Load { addr, .. } => {
                    let a = get(regs, *addr);
                    let v = self.load_u64(a)?;
                    regs[inst.result.unwrap().0 as usize] = v;
                }
                InstKind::Store { addr, value } => {
                    let a = get(regs, *addr);
                    let v = get(regs, *value);
                    self.store_u64(a, v)?;
                }
                InstKind::Gep { base, offset } => {
                    let b = get(regs, *base);
                    let o = get(regs, *offset);
                    regs[inst.result.unwrap().0 as usize] = b.wrapping_add(o);
                }
                InstKind::Phi { .. } => {
                    // Assigned in parallel on block entry; nothing to do.
                }
                InstKind::PtrToInt { value } | InstKind::IntToPtr { value } => {
                    regs[inst.result.unwrap().0 as usize] = get(regs, *value);
                }
                InstKind::Translate { ptr } => {
                    let v = get(regs, *ptr);
                    let raw = self.translate(fidx, id, v)?;
                    regs[inst.result.unwrap().0 as usize] = raw;
                }
                InstKind::Release { translation } => {
                    self.release(fidx, *translation, f)?;
                }
                InstKind::Safepoint => {
                    self.safepoint()?;
                }
                InstKind::Call {
                    callee,
                    args,
                    external,
                } => {
                    let argv: Vec<u64> = args.iter().map(|&a| get(regs, a)).collect();
                    let r = self.call(callee, &argv, *external)?;
                    if let Some(res) = inst.result {
                        regs[res.0 as usize] = r.unwrap_or(0);
                    }
                }
                InstKind::Br { target } => {
                    self.enter_block(f, regs, block, *target);
                    block = *target;
                    index = 0;
                    continue;
                }
                InstKind::CondBr {
                    cond,
                    then_dest,
                    else_dest,
                } => {
                    let target = if get(regs, *cond) != 0 {
                        *then_dest
                    } else {
                        *else_dest
                    };
                    self.enter_block(f, regs, block, target);
                    block = target;
                    index = 0;
                    continue;
                }
                InstKind::Ret { value } => {
                    return Ok(value.map(|v| get(regs, v)));
                }
            }
            index += 1;
        }
    }

    /// Parallel phi assignment on block entry.
    fn enter_block(&mut self, f: &Function, regs: &mut Vec<u64>, from: Block, to: Block) {
        let mut updates: Vec<(Value, u64)> = Vec::new();
        for &id in &f.block(to).insts {
            match &f.inst(id).kind {
                InstKind::Phi { incomings, .. } => {
                    let (_, v) = incomings
                        .iter()
                        .find(|(p, _)| *p == from)
                        .expect("verified phi has an incoming per predecessor");
                    updates.push((f.inst(id).result.unwrap(), regs[v.0 as usize]));
                }
                _ => break,
            }
        }
        for (r, v) in updates {
            regs[r.0 as usize] = v;
        }
    }

    fn halloc(&mut self, size: i64) -> Result<u64, ExecError> {
        self.counters.allocs += 1;
        if self.handle_mode() {
            if size <= 0 {
                return Err(ExecError::Alloc(format!("halloc of {size} bytes")));
            }
            let bits = self.world.halloc(size as u64)?;
            let id = match classify(bits) {
                Classified::Handle { id, .. } => id,
                Classified::Raw(_) => unreachable!("halloc returns handles"),
            };
            self.shadow.insert(id, vec![0; size as usize]);
            Ok(bits)
        } else {
            Ok(self.direct.alloc(size)?)
        }
    }

    fn hfree(&mut self, value: u64) -> Result<(), ExecError> {
        self.counters.frees += 1;
        match classify(value) {
            Classified::Raw(0) => Ok(()),
            Classified::Raw(addr) => Ok(self.direct.free(addr)?),
            Classified::Handle { id, .. } => {
                self.world.hfree(value)?;
                self.shadow.remove(&id);
                Ok(())
            }
        }
    }

    fn hrealloc(&mut self, value: u64, new_size: i64) -> Result<u64, ExecError> {
        match classify(value) {
            Classified::Raw(addr) if !self.handle_mode() || DirectHeap::contains(addr) || addr == 0 => {
                Ok(self.direct.realloc(addr, new_size)?)
            }
            Classified::Raw(addr) => Err(ExecError::Memory(format!(
                "realloc of non-heap address {addr:#x}"
            ))),
            Classified::Handle { id, .. } => {
                if new_size <= 0 {
                    return Err(ExecError::Alloc(format!("hrealloc to {new_size} bytes")));
                }
                let r = self.world.hrealloc(value, new_size as u64)?;
                let shadow = self.shadow.entry(id).or_default();
                shadow.resize(new_size as usize, 0);
                Ok(r)
            }
        }
    }

    fn translate(&mut self, fidx: usize, inst: InstId, value: u64) -> Result<u64, ExecError> {
        self.counters.translates += 1;
        if !self.handle_mode() {
            return Ok(value);
        }
        let raw = self.world.translate(value)?;
        if let Classified::Handle { .. } = classify(value) {
            if let Some(slot) = self.slot_maps[fidx].slot_of(inst) {
                self.mutator.pin(slot as usize, value)?;
                self.counters.pins += 1;
                let occupied = self
                    .mutator
                    .top()
                    .map(|fr| fr.occupied() as u64)
                    .unwrap_or(0);
                self.counters.max_live_pins = self.counters.max_live_pins.max(occupied);
            }
        }
        // Occupancy marker for release pairing, raw pass-throughs included.
        if let Some(slot) = self.slot_maps[fidx].slot_of(inst) {
            if let Some(track) = self.frames.last_mut() {
                track.active[slot as usize] = Some(inst);
            }
            self.balance += 1;
        }
        Ok(raw)
    }

    fn release(&mut self, fidx: usize, translation: Value, f: &Function) -> Result<(), ExecError> {
        self.counters.releases += 1;
        if !self.handle_mode() {
            return Ok(());
        }
        let def = match f.def_of(translation) {
            Some(crate::ir::ValueDef::Inst(id)) => *id,
            _ => return Ok(()),
        };
        let Some(slot) = self.slot_maps[fidx].slot_of(def) else {
            return Ok(());
        };
        let track = self.frames.last_mut().expect("active frame");
        if track.active[slot as usize] == Some(def) {
            track.active[slot as usize] = None;
            self.mutator.release(slot as usize)?;
            self.balance -= 1;
        } else {
            // A path that never executed this translation reached its
            // release point; the slot is simply not ours to clear.
            self.counters.noop_releases += 1;
        }
        Ok(())
    }

    fn safepoint(&mut self) -> Result<(), ExecError> {
        self.counters.safepoints += 1;
        if !self.handle_mode() {
            return Ok(());
        }
        let Some(budgets) = self.schedule.remove(&self.counters.safepoints) else {
            return Ok(());
        };
        for budget in budgets {
            self.forced_barrier(budget.unwrap_or(u64::MAX))?;
        }
        Ok(())
    }

    /// A stop-the-world pause with a defragmentation pass, as the barrier
    /// injection schedule dictates. The single simulated mutator is parked
    /// at this safepoint by construction.
    fn forced_barrier(&mut self, budget: u64) -> Result<(), ExecError> {
        self.counters.barriers += 1;
        let pins = GlobalPinMap::from_ids(self.mutator.pinned_ids());
        let pinned_bases: Vec<(u32, u64)> = pins
            .iter()
            .map(|id| (id, self.world.table.get(id).map(|e| e.base).unwrap_or(0)))
            .collect();
        let report = self.world.defrag(&pins, budget);
        self.counters.moves += report.moved_objects;
        self.counters.moved_bytes += report.moved_bytes;
        for (id, base) in pinned_bases {
            let now = self.world.table.get(id).map(|e| e.base).unwrap_or(0);
            if now != base {
                return Err(ExecError::PinnedObjectMoved { id });
            }
        }
        if self.cfg.check_canaries {
            self.verify_canaries()?;
        }
        Ok(())
    }

    fn verify_canaries(&mut self) -> Result<(), ExecError> {
        for (&id, expect) in &self.shadow {
            let entry = self
                .world
                .table
                .get(id)
                .filter(|e| e.state == crate::handle::EntryState::Active)
                .ok_or(ExecError::CanaryMismatch { id })?;
            let got = self
                .world
                .heap
                .read(entry.base, expect.len() as u64)
                .map_err(|_| ExecError::CanaryMismatch { id })?;
            if got != expect.as_slice() {
                return Err(ExecError::CanaryMismatch { id });
            }
        }
        self.assertions
            .push(format!("canaries ok across pass {}", self.counters.barriers));
        Ok(())
    }

    fn load_u64(&mut self, addr: u64) -> Result<u64, ExecError> {
        if self.handle_mode() {
            if let Classified::Handle { .. } = classify(addr) {
                return Err(ExecError::UntranslatedAccess(addr));
            }
        }
        let bytes = if DirectHeap::contains(addr) {
            self.direct.read(addr, 8)?
        } else if self.handle_mode() {
            self.world
                .heap
                .read(addr, 8)
                .map_err(|e| ExecError::Memory(e.to_string()))?
        } else {
            return Err(ExecError::Memory(format!(
                "load from unmapped address {addr:#x}"
            )));
        };
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    fn store_u64(&mut self, addr: u64, value: u64) -> Result<(), ExecError> {
        self.write_mem(addr, &value.to_le_bytes())
    }

    fn write_mem(&mut self, addr: u64, bytes: &[u8]) -> Result<(), ExecError> {
        if self.handle_mode() {
            if let Classified::Handle { .. } = classify(addr) {
                return Err(ExecError::UntranslatedAccess(addr));
            }
        }
        if DirectHeap::contains(addr) {
            return Ok(self.direct.write(addr, bytes)?);
        }
        if !self.handle_mode() {
            return Err(ExecError::Memory(format!(
                "store to unmapped address {addr:#x}"
            )));
        }
        // Attribute the store to its object and keep the shadow in sync.
        let (block_addr, owner) = self
            .world
            .heap
            .owner_of(addr)
            .map_err(|e| ExecError::Memory(e.to_string()))?;
        self.world
            .heap
            .write(addr, bytes)
            .map_err(|e| ExecError::Memory(e.to_string()))?;
        if let Some(id) = owner {
            let off = (addr - block_addr) as usize;
            if let Some(shadow) = self.shadow.get_mut(&id) {
                if off + bytes.len() > shadow.len() {
                    return Err(ExecError::StoreBeyondObject {
                        id,
                        offset: off as u64,
                        len: bytes.len() as u64,
                    });
                }
                shadow[off..off + bytes.len()].copy_from_slice(bytes);
            }
        }
        Ok(())
    }

    fn call(
        &mut self,
        callee: &str,
        args: &[u64],
        external: bool,
    ) -> Result<Option<u64>, ExecError> {
        // Allocation intrinsics left unrewritten allocate raw memory in
        // both modes: raw pointers and handles coexist.
        match callee {
            "malloc" => return Ok(Some(self.direct.alloc(args[0] as i64)?)),
            "calloc" => {
                let bytes = (args[0] as i64).wrapping_mul(args[1] as i64);
                return Ok(Some(self.direct.alloc(bytes)?));
            }
            "realloc" => return Ok(Some(self.hrealloc(args[0], args[1] as i64)?)),
            "free" => {
                match classify(args[0]) {
                    Classified::Raw(0) => {}
                    Classified::Raw(addr) => self.direct.free(addr)?,
                    Classified::Handle { .. } => self.hfree(args[0])?,
                }
                return Ok(None);
            }
            _ => {}
        }
        if let Some(&idx) = self.func_index.get(callee) {
            return self.call_function(idx, args);
        }
        if !external {
            return Err(ExecError::UnknownExternal(callee.to_string()));
        }
        self.mutator.external_enter();
        let result = self.call_native(callee, args);
        self.mutator.external_exit()?;
        result
    }

    /// Native externals. Pointer arguments must arrive raw: external code
    /// knows nothing about handles.
    fn call_native(&mut self, callee: &str, args: &[u64]) -> Result<Option<u64>, ExecError> {
        let want_raw = |v: u64| -> Result<u64, ExecError> {
            match classify(v) {
                Classified::Raw(a) => Ok(a),
                Classified::Handle { .. } => Err(ExecError::EscapedHandle {
                    callee: callee.to_string(),
                    value: v,
                }),
            }
        };
        match callee {
            "out" => {
                self.outputs.push(args[0] as i64);
                Ok(None)
            }
            "ext_id" => Ok(Some(args[0])),
            "ext_rand" => {
                let v: i64 = self.rng.gen_range(-1_000_000..=1_000_000);
                Ok(Some(v as u64))
            }
            "ext_sum" => {
                let addr = want_raw(args[0])?;
                let len = (args[1] as i64).max(0) as u64;
                let mut sum: i64 = 0;
                for i in 0..len {
                    let b = self.read_byte(addr + i)?;
                    sum = sum.wrapping_add(b as i64);
                }
                Ok(Some(sum as u64))
            }
            "ext_fill" => {
                let addr = want_raw(args[0])?;
                let len = (args[1] as i64).max(0) as u64;
                let byte = args[2] as u8;
                let bytes = vec![byte; len as usize];
                self.write_mem(addr, &bytes)?;
                Ok(None)
            }
            other => Err(ExecError::UnknownExternal(other.to_string())),
        }
    }

    fn read_byte(&mut self, addr: u64) -> Result<u8, ExecError> {
        let bytes = if DirectHeap::contains(addr) {
            self.direct.read(addr, 1)?
        } else if self.handle_mode() {
            self.world
                .heap
                .read(addr, 1)
                .map_err(|e| ExecError::Memory(e.to_string()))?
        } else {
            return Err(ExecError::Memory(format!(
                "read from unmapped address {addr:#x}"
            )));
        };
        Ok(bytes[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;
    use crate::pass::{run_pass, PassOptions};

    fn parse(text: &str) -> Program {
        parse_program(text).unwrap()
    }

    #[test]
    fn constant_program_matches_in_both_modes() {
        let p = parse("func @main() -> i64 {\nentry:\n  %z = const 7\n  ret %z\n}\n");
        let direct = run(&p, &ExecConfig::direct()).unwrap();
        assert_eq!(direct.ret, 7);
        let out = run_pass(&p, &PassOptions::default()).unwrap();
        let handle = run(&out.program, &ExecConfig::handle(BarrierSchedule::default())).unwrap();
        assert_eq!(handle.ret, 7);
        assert_eq!(direct.outputs, handle.outputs);
    }

    #[test]
    fn store_load_with_forced_full_defrag_between() {
        // A hole (the freed junk block) gives the pass something to
        // compact. The read happens through a callee so the stored-to
        // object is unpinned while the loop polls; releases are kept so
        // the pin clears eagerly at the store.
        let text = concat!(
            "extern @out(i64)\n",
            "func @read_cell(%q: ptr) -> i64 {\n",
            "entry:\n",
            "  %r = load i64, %q\n",
            "  ret %r\n",
            "}\n",
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 16\n",
            "  %junk = call @malloc(%n)\n",
            "  %p = call @malloc(%n)\n",
            "  %v = const 12345\n",
            "  store %p, %v\n",
            "  call @free(%junk)\n",
            "  %zero = const 0\n",
            "  %one = const 1\n",
            "  %two = const 2\n",
            "  br loop\n",
            "loop:\n",
            "  %i = phi i64 [ %zero, entry ], [ %i2, loop ]\n",
            "  %i2 = add %i, %one\n",
            "  %c = icmp slt %i2, %two\n",
            "  cond_br %c, loop, done\n",
            "done:\n",
            "  %r = call @read_cell(%p)\n",
            "  call @out(%r)\n",
            "  ret %r\n",
            "}\n",
        );
        let p = parse(text);
        let direct = run(&p, &ExecConfig::direct()).unwrap();
        assert_eq!(direct.ret, 12345);
        let out = run_pass(
            &p,
            &PassOptions {
                keep_releases: true,
                ..PassOptions::default()
            },
        )
        .unwrap();
        // Fire an unbounded defrag at a loop latch poll, after the store
        // and the free. Safepoint 1 is main's entry poll.
        let schedule = BarrierSchedule {
            events: vec![BarrierEvent {
                at_safepoint: 2,
                budget_bytes: None,
            }],
        };
        let handle = run(&out.program, &ExecConfig::handle(schedule)).unwrap();
        assert_eq!(handle.ret, 12345, "content preserved across relocation");
        assert_eq!(handle.outputs, direct.outputs);
        assert_eq!(handle.counters.moves, 1, "{:?}", handle.counters);
        assert!(handle.counters.barriers == 1);
    }

    #[test]
    fn untranslated_access_is_a_fault() {
        // Hand-written handle-mode program that skips translation.
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 8\n",
            "  %p = halloc %n\n",
            "  %z = const 0\n",
            "  store %p, %z\n",
            "  ret %z\n",
            "}\n",
        );
        let p = parse(text);
        let err = run(&p, &ExecConfig::handle(BarrierSchedule::default())).unwrap_err();
        assert!(matches!(err, ExecError::UntranslatedAccess(_)), "{err}");
    }

    #[test]
    fn dead_handle_translation_faults() {
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 8\n",
            "  %p = halloc %n\n",
            "  hfree %p\n",
            "  %t = translate %p\n",
            "  %v = load i64, %t\n",
            "  ret %v\n",
            "}\n",
        );
        let p = parse(text);
        let err = run(&p, &ExecConfig::handle(BarrierSchedule::default())).unwrap_err();
        assert!(matches!(err, ExecError::DeadHandle(_)), "{err}");
    }

    #[test]
    fn determinism_across_runs() {
        let text = concat!(
            "extern @out(i64)\n",
            "extern @ext_rand() -> i64\n",
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %r = call @ext_rand()\n",
            "  call @out(%r)\n",
            "  ret %r\n",
            "}\n",
        );
        let p = parse(text);
        let mut cfg = ExecConfig::direct();
        cfg.seed = 42;
        let a = run(&p, &cfg).unwrap();
        let b = run(&p, &cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let c = run(&p, &cfg2).unwrap();
        assert_ne!(a.ret, c.ret, "different seeds draw different values");
    }

    #[test]
    fn raw_and_handle_allocations_coexist() {
        // Opt out of rewriting for malloc while frees go through hfree:
        // the raw pointer passes through translation unchanged and hfree
        // dispatches on the tag bit.
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 16\n",
            "  %raw = call @malloc(%n)\n",
            "  %v = const 99\n",
            "  store %raw, %v\n",
            "  %h = halloc %n\n",
            "  %t = translate %h\n",
            "  store %t, %v\n",
            "  %r = load i64, %raw\n",
            "  hfree %raw\n",
            "  hfree %h\n",
            "  ret %r\n",
            "}\n",
        );
        let p = parse(text);
        let trace = run(&p, &ExecConfig::handle(BarrierSchedule::default())).unwrap();
        assert_eq!(trace.ret, 99);
    }

    #[test]
    fn ptrtoint_stash_survives_relocation() {
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 16\n",
            "  %junk = call @malloc(%n)\n",
            "  %p = call @malloc(%n)\n",
            "  %v = const 777\n",
            "  store %p, %v\n",
            "  call @free(%junk)\n",
            "  %stash = ptrtoint %p\n",
            "  %zero = const 0\n",
            "  %one = const 1\n",
            "  %two = const 2\n",
            "  br loop\n",
            "loop:\n",
            "  %i = phi i64 [ %zero, entry ], [ %i2, loop ]\n",
            "  %i2 = add %i, %one\n",
            "  %c = icmp slt %i2, %two\n",
            "  cond_br %c, loop, done\n",
            "done:\n",
            "  %back = inttoptr %stash\n",
            "  %r = load i64, %back\n",
            "  ret %r\n",
            "}\n",
        );
        let p = parse(text);
        let direct = run(&p, &ExecConfig::direct()).unwrap();
        assert_eq!(direct.ret, 777);
        let out = run_pass(
            &p,
            &PassOptions {
                keep_releases: true,
                ..PassOptions::default()
            },
        )
        .unwrap();
        let schedule = BarrierSchedule {
            events: vec![BarrierEvent {
                at_safepoint: 2,
                budget_bytes: None,
            }],
        };
        let handle = run(&out.program, &ExecConfig::handle(schedule)).unwrap();
        assert_eq!(handle.ret, 777, "handle bits are stable across moves");
        assert!(handle.counters.moves >= 1);
    }
}
