//! A small SSA intermediate representation with a textual format.
//!
//! Two value types exist: `i64` and `ptr`. Pointer-typed values are 64-bit
//! and may hold either raw addresses or handles; nothing in the IR
//! distinguishes them statically, which is the whole point. Programs are
//! sets of functions plus extern declarations; blocks are labeled, the
//! first block is the entry, and every block ends in a terminator.

pub mod dom;
pub mod generate;
pub mod liveness;
pub mod loops;
pub mod parse;
pub mod pg;
pub mod print;

use std::collections::{BTreeMap, BTreeSet};

use smallvec::SmallVec;
use thiserror::Error;

#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(pub u32);

#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Block(pub u32);

#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstId(pub u32);

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl std::fmt::Debug for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "b{}", self.0)
    }
}

impl std::fmt::Debug for InstId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, PartialOrd, Ord)]
pub enum Ty {
    I64,
    Ptr,
}

impl std::fmt::Display for Ty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ty::I64 => write!(f, "i64"),
            Ty::Ptr => write!(f, "ptr"),
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Pred {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InstKind {
    Const(i64),
    Bin {
        op: BinOp,
        lhs: Value,
        rhs: Value,
    },
    Icmp {
        pred: Pred,
        lhs: Value,
        rhs: Value,
    },
    Halloc {
        size: Value,
    },
    Hfree {
        ptr: Value,
    },
    Hrealloc {
        ptr: Value,
        size: Value,
    },
    Load {
        ty: Ty,
        addr: Value,
    },
    Store {
        addr: Value,
        value: Value,
    },
    Gep {
        base: Value,
        offset: Value,
    },
    Phi {
        ty: Ty,
        incomings: Vec<(Block, Value)>,
    },
    Call {
        callee: String,
        args: Vec<Value>,
        external: bool,
    },
    PtrToInt {
        value: Value,
    },
    IntToPtr {
        value: Value,
    },
    /// Pass-introduced: pins (when the operand is a handle) and yields the
    /// current raw address.
    Translate {
        ptr: Value,
    },
    /// Pass-introduced metadata: ends the named translation's lifetime.
    /// Erased before execution unless kept for testing.
    Release {
        translation: Value,
    },
    /// Pass-introduced: a cooperative poll site.
    Safepoint,
    Br {
        target: Block,
    },
    CondBr {
        cond: Value,
        then_dest: Block,
        else_dest: Block,
    },
    Ret {
        value: Option<Value>,
    },
}

impl InstKind {
    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            InstKind::Br { .. } | InstKind::CondBr { .. } | InstKind::Ret { .. }
        )
    }

    pub fn result_ty(&self) -> Option<Ty> {
        match self {
            InstKind::Const(_) => Some(Ty::I64),
            InstKind::Bin { .. } | InstKind::Icmp { .. } | InstKind::PtrToInt { .. } => {
                Some(Ty::I64)
            }
            InstKind::Halloc { .. }
            | InstKind::Hrealloc { .. }
            | InstKind::Gep { .. }
            | InstKind::IntToPtr { .. }
            | InstKind::Translate { .. } => Some(Ty::Ptr),
            InstKind::Load { ty, .. } | InstKind::Phi { ty, .. } => Some(*ty),
            _ => None,
        }
    }

    pub fn operands(&self) -> SmallVec<[Value; 4]> {
        let mut out = SmallVec::new();
        self.for_each_operand(|v| out.push(v));
        out
    }

    pub fn for_each_operand(&self, mut f: impl FnMut(Value)) {
        match self {
            InstKind::Const(_) | InstKind::Safepoint | InstKind::Br { .. } => {}
            InstKind::Bin { lhs, rhs, .. } | InstKind::Icmp { lhs, rhs, .. } => {
                f(*lhs);
                f(*rhs);
            }
            InstKind::Halloc { size } => f(*size),
            InstKind::Hfree { ptr } => f(*ptr),
            InstKind::Hrealloc { ptr, size } => {
                f(*ptr);
                f(*size);
            }
            InstKind::Load { addr, .. } => f(*addr),
            InstKind::Store { addr, value } => {
                f(*addr);
                f(*value);
            }
            InstKind::Gep { base, offset } => {
                f(*base);
                f(*offset);
            }
            InstKind::Phi { incomings, .. } => {
                for (_, v) in incomings {
                    f(*v);
                }
            }
            InstKind::Call { args, .. } => {
                for a in args {
                    f(*a);
                }
            }
            InstKind::PtrToInt { value } | InstKind::IntToPtr { value } => f(*value),
            InstKind::Translate { ptr } => f(*ptr),
            InstKind::Release { translation } => f(*translation),
            InstKind::CondBr { cond, .. } => f(*cond),
            InstKind::Ret { value } => {
                if let Some(v) = value {
                    f(*v)
                }
            }
        }
    }

    pub fn for_each_operand_mut(&mut self, mut f: impl FnMut(&mut Value)) {
        match self {
            InstKind::Const(_) | InstKind::Safepoint | InstKind::Br { .. } => {}
            InstKind::Bin { lhs, rhs, .. } | InstKind::Icmp { lhs, rhs, .. } => {
                f(lhs);
                f(rhs);
            }
            InstKind::Halloc { size } => f(size),
            InstKind::Hfree { ptr } => f(ptr),
            InstKind::Hrealloc { ptr, size } => {
                f(ptr);
                f(size);
            }
            InstKind::Load { addr, .. } => f(addr),
            InstKind::Store { addr, value } => {
                f(addr);
                f(value);
            }
            InstKind::Gep { base, offset } => {
                f(base);
                f(offset);
            }
            InstKind::Phi { incomings, .. } => {
                for (_, v) in incomings {
                    f(v);
                }
            }
            InstKind::Call { args, .. } => {
                for a in args {
                    f(a);
                }
            }
            InstKind::PtrToInt { value } | InstKind::IntToPtr { value } => f(value),
            InstKind::Translate { ptr } => f(ptr),
            InstKind::Release { translation } => f(translation),
            InstKind::CondBr { cond, .. } => f(cond),
            InstKind::Ret { value } => {
                if let Some(v) = value {
                    f(v)
                }
            }
        }
    }

    pub fn successors(&self) -> SmallVec<[Block; 2]> {
        match self {
            InstKind::Br { target } => SmallVec::from_slice(&[*target]),
            InstKind::CondBr {
                then_dest,
                else_dest,
                ..
            } => SmallVec::from_slice(&[*then_dest, *else_dest]),
            _ => SmallVec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Instruction {
    pub kind: InstKind,
    pub result: Option<Value>,
}

#[derive(Clone, Debug)]
pub struct BlockData {
    pub label: String,
    pub insts: Vec<InstId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueDef {
    Param(usize),
    Inst(InstId),
}

#[derive(Clone, Debug)]
pub struct ValueData {
    pub name: String,
    pub ty: Ty,
    pub def: Option<ValueDef>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExternDecl {
    pub name: String,
    pub params: Vec<Ty>,
    pub ret: Option<Ty>,
}

#[derive(Clone, Debug)]
pub struct Function {
    pub name: String,
    pub params: Vec<Value>,
    pub ret_ty: Option<Ty>,
    /// Layout order; the first block is the entry.
    pub blocks: Vec<Block>,
    block_data: Vec<BlockData>,
    insts: Vec<Instruction>,
    values: Vec<ValueData>,
}

/// Allocation routines the rewrite step recognizes by name. They are part
/// of the runtime rather than library escapes: no safepoints or escape
/// pins are placed around them.
pub const ALLOC_INTRINSICS: [&str; 4] = ["malloc", "calloc", "realloc", "free"];

pub fn alloc_intrinsic_sig(name: &str) -> Option<(Vec<Ty>, Option<Ty>)> {
    match name {
        "malloc" => Some((vec![Ty::I64], Some(Ty::Ptr))),
        "calloc" => Some((vec![Ty::I64, Ty::I64], Some(Ty::Ptr))),
        "realloc" => Some((vec![Ty::Ptr, Ty::I64], Some(Ty::Ptr))),
        "free" => Some((vec![Ty::Ptr], None)),
        _ => None,
    }
}

impl Function {
    pub fn new(name: impl Into<String>, params: Vec<(String, Ty)>, ret_ty: Option<Ty>) -> Function {
        let mut f = Function {
            name: name.into(),
            params: Vec::new(),
            ret_ty,
            blocks: Vec::new(),
            block_data: Vec::new(),
            insts: Vec::new(),
            values: Vec::new(),
        };
        for (i, (name, ty)) in params.into_iter().enumerate() {
            let v = f.new_value(name, ty, Some(ValueDef::Param(i)));
            f.params.push(v);
        }
        f
    }

    pub fn new_value(&mut self, name: impl Into<String>, ty: Ty, def: Option<ValueDef>) -> Value {
        let v = Value(self.values.len() as u32);
        self.values.push(ValueData {
            name: name.into(),
            ty,
            def,
        });
        v
    }

    pub fn fresh_value_name(&self, hint: &str) -> String {
        let mut n = self.values.len();
        loop {
            let candidate = format!("{hint}{n}");
            if !self.values.iter().any(|v| v.name == candidate) {
                return candidate;
            }
            n += 1;
        }
    }

    pub fn new_block(&mut self, label: impl Into<String>) -> Block {
        let b = Block(self.block_data.len() as u32);
        self.block_data.push(BlockData {
            label: label.into(),
            insts: Vec::new(),
        });
        self.blocks.push(b);
        b
    }

    /// Creates a block placed before `before` in layout order.
    pub fn new_block_before(&mut self, before: Block, label: impl Into<String>) -> Block {
        let b = Block(self.block_data.len() as u32);
        self.block_data.push(BlockData {
            label: label.into(),
            insts: Vec::new(),
        });
        let pos = self
            .blocks
            .iter()
            .position(|&x| x == before)
            .expect("layout block");
        self.blocks.insert(pos, b);
        b
    }

    pub fn fresh_block_label(&self, hint: &str) -> String {
        if !self.block_data.iter().any(|b| b.label == hint) {
            return hint.to_string();
        }
        let mut n = 0;
        loop {
            let candidate = format!("{hint}{n}");
            if !self.block_data.iter().any(|b| b.label == candidate) {
                return candidate;
            }
            n += 1;
        }
    }

    pub fn entry(&self) -> Block {
        self.blocks[0]
    }

    pub fn block(&self, b: Block) -> &BlockData {
        &self.block_data[b.0 as usize]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut BlockData {
        &mut self.block_data[b.0 as usize]
    }

    pub fn block_count(&self) -> usize {
        self.block_data.len()
    }

    pub fn inst(&self, id: InstId) -> &Instruction {
        &self.insts[id.0 as usize]
    }

    pub fn inst_mut(&mut self, id: InstId) -> &mut Instruction {
        &mut self.insts[id.0 as usize]
    }

    pub fn inst_count(&self) -> usize {
        self.insts.len()
    }

    pub fn value(&self, v: Value) -> &ValueData {
        &self.values[v.0 as usize]
    }

    pub fn value_ty(&self, v: Value) -> Ty {
        self.values[v.0 as usize].ty
    }

    pub fn value_name(&self, v: Value) -> &str {
        &self.values[v.0 as usize].name
    }

    pub fn value_count(&self) -> usize {
        self.values.len()
    }

    pub fn value_ids(&self) -> impl Iterator<Item = Value> {
        (0..self.values.len() as u32).map(Value)
    }

    pub fn def_of(&self, v: Value) -> Option<&ValueDef> {
        self.values[v.0 as usize].def.as_ref()
    }

    fn make_inst(
        &mut self,
        kind: InstKind,
        name_hint: &str,
        explicit_ty: Option<Ty>,
    ) -> (InstId, Option<Value>) {
        let id = InstId(self.insts.len() as u32);
        let result = explicit_ty.or_else(|| kind.result_ty()).map(|ty| {
            let name = self.fresh_value_name(name_hint);
            self.new_value(name, ty, Some(ValueDef::Inst(id)))
        });
        self.insts.push(Instruction { kind, result });
        (id, result)
    }

    /// Appends an instruction to a block; returns its result value if it
    /// produces one.
    pub fn push_inst(&mut self, block: Block, kind: InstKind) -> Option<Value> {
        self.push_inst_named(block, kind, "v")
    }

    pub fn push_inst_named(
        &mut self,
        block: Block,
        kind: InstKind,
        name_hint: &str,
    ) -> Option<Value> {
        let (id, result) = self.make_inst(kind, name_hint, None);
        self.block_data[block.0 as usize].insts.push(id);
        result
    }

    /// Appends a call; the result type comes from the callee's signature.
    pub fn push_call(
        &mut self,
        block: Block,
        callee: impl Into<String>,
        args: Vec<Value>,
        external: bool,
        ret: Option<Ty>,
    ) -> Option<Value> {
        let kind = InstKind::Call {
            callee: callee.into(),
            args,
            external,
        };
        let (id, result) = self.make_inst(kind, "v", ret);
        self.block_data[block.0 as usize].insts.push(id);
        result
    }

    /// Inserts an instruction at a position within a block.
    pub fn insert_inst_at(
        &mut self,
        block: Block,
        index: usize,
        kind: InstKind,
        name_hint: &str,
    ) -> (InstId, Option<Value>) {
        let (id, result) = self.make_inst(kind, name_hint, None);
        self.block_data[block.0 as usize].insts.insert(index, id);
        (id, result)
    }

    /// Appends an instruction whose result value was created beforehand
    /// (the parser pre-creates values so phis can reference later
    /// definitions).
    pub fn attach_inst(&mut self, block: Block, kind: InstKind, result: Option<Value>) -> InstId {
        let id = InstId(self.insts.len() as u32);
        if let Some(v) = result {
            self.values[v.0 as usize].def = Some(ValueDef::Inst(id));
        }
        self.insts.push(Instruction { kind, result });
        self.block_data[block.0 as usize].insts.push(id);
        id
    }

    /// Position of an instruction as (block, index). Linear scan; functions
    /// here are small.
    pub fn position_of(&self, id: InstId) -> Option<(Block, usize)> {
        for &b in &self.blocks {
            if let Some(i) = self.block_data[b.0 as usize]
                .insts
                .iter()
                .position(|&x| x == id)
            {
                return Some((b, i));
            }
        }
        None
    }

    pub fn terminator(&self, b: Block) -> Option<InstId> {
        self.block_data[b.0 as usize]
            .insts
            .last()
            .copied()
            .filter(|&id| self.insts[id.0 as usize].kind.is_terminator())
    }

    pub fn succs(&self, b: Block) -> SmallVec<[Block; 2]> {
        self.terminator(b)
            .map(|t| self.insts[t.0 as usize].kind.successors())
            .unwrap_or_default()
    }

    /// Removes instructions by id, dropping them from their blocks. Their
    /// arena slots stay allocated (ids are never reused).
    pub fn remove_insts(&mut self, ids: &BTreeSet<InstId>) {
        for bd in &mut self.block_data {
            bd.insts.retain(|id| !ids.contains(id));
        }
    }

    /// All uses of each value: (instruction, operand occurrence count).
    pub fn use_counts(&self) -> BTreeMap<Value, usize> {
        let mut counts = BTreeMap::new();
        for &b in &self.blocks {
            for &id in &self.block_data[b.0 as usize].insts {
                self.insts[id.0 as usize]
                    .kind
                    .for_each_operand(|v| *counts.entry(v).or_insert(0) += 1);
            }
        }
        counts
    }

    pub fn find_block(&self, label: &str) -> Option<Block> {
        self.blocks
            .iter()
            .copied()
            .find(|&b| self.block_data[b.0 as usize].label == label)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Program {
    pub externs: Vec<ExternDecl>,
    pub functions: Vec<Function>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn extern_decl(&self, name: &str) -> Option<&ExternDecl> {
        self.externs.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("function {func}: no blocks")]
    Empty { func: String },
    #[error("function {func}: block {block} is not terminated")]
    Unterminated { func: String, block: String },
    #[error("function {func}: terminator in the middle of block {block}")]
    EarlyTerminator { func: String, block: String },
    #[error("function {func}: block {block} is unreachable")]
    Unreachable { func: String, block: String },
    #[error("function {func}: value %{value} defined more than once")]
    Redefined { func: String, value: String },
    #[error("function {func}: use of %{value} is not dominated by its definition")]
    UseNotDominated { func: String, value: String },
    #[error("function {func}: phi %{value} is not grouped at the top of block {block}")]
    PhiNotAtTop {
        func: String,
        value: String,
        block: String,
    },
    #[error("function {func}: phi %{value} incoming blocks do not match predecessors of {block}")]
    PhiPredMismatch {
        func: String,
        value: String,
        block: String,
    },
    #[error("function {func}: phi in entry block")]
    PhiInEntry { func: String },
    #[error("function {func}: operand %{value} has type {got} where {want} is required")]
    TypeMismatch {
        func: String,
        value: String,
        got: Ty,
        want: Ty,
    },
    #[error("function {func}: call to unknown function @{callee}")]
    UnknownCallee { func: String, callee: String },
    #[error("function {func}: call to @{callee} has wrong arity or types")]
    BadCall { func: String, callee: String },
    #[error("function {func}: return value does not match declared type")]
    BadReturn { func: String },
    #[error("function {func}: value %{value} has no definition")]
    Undefined { func: String, value: String },
}

/// Structural and SSA validation: termination, reachability, single
/// assignment, phi shape, operand typing, dominance of uses, and call
/// signatures.
pub fn verify_program(program: &Program) -> Result<(), VerifyError> {
    for f in &program.functions {
        verify_function(program, f)?;
    }
    Ok(())
}

pub fn verify_function(program: &Program, f: &Function) -> Result<(), VerifyError> {
    let func = f.name.clone();
    if f.blocks.is_empty() {
        return Err(VerifyError::Empty { func });
    }
    // Definition census: every value defined exactly once, at its recorded
    // definition site.
    let mut seen: BTreeSet<Value> = BTreeSet::new();
    for &v in &f.params {
        seen.insert(v);
    }
    for &b in &f.blocks {
        let bd = f.block(b);
        let mut terminated = false;
        let mut past_phis = false;
        for (idx, &id) in bd.insts.iter().enumerate() {
            let inst = f.inst(id);
            if terminated {
                return Err(VerifyError::EarlyTerminator {
                    func: func.clone(),
                    block: bd.label.clone(),
                });
            }
            if inst.kind.is_terminator() {
                if idx + 1 != bd.insts.len() {
                    return Err(VerifyError::EarlyTerminator {
                        func,
                        block: bd.label.clone(),
                    });
                }
                terminated = true;
            }
            match &inst.kind {
                InstKind::Phi { .. } => {
                    if past_phis {
                        return Err(VerifyError::PhiNotAtTop {
                            func: func.clone(),
                            value: inst
                                .result
                                .map(|v| f.value_name(v).to_string())
                                .unwrap_or_default(),
                            block: bd.label.clone(),
                        });
                    }
                    if b == f.entry() {
                        return Err(VerifyError::PhiInEntry { func: func.clone() });
                    }
                }
                _ => past_phis = true,
            }
            if let Some(v) = inst.result {
                if !seen.insert(v) {
                    return Err(VerifyError::Redefined {
                        func: func.clone(),
                        value: f.value_name(v).to_string(),
                    });
                }
                if f.def_of(v) != Some(&ValueDef::Inst(id)) {
                    return Err(VerifyError::Redefined {
                        func: func.clone(),
                        value: f.value_name(v).to_string(),
                    });
                }
            }
        }
        if !terminated {
            return Err(VerifyError::Unterminated {
                func: func.clone(),
                block: bd.label.clone(),
            });
        }
    }
    for v in f.value_ids() {
        if f.def_of(v).is_none() {
            return Err(VerifyError::Undefined {
                func: func.clone(),
                value: f.value_name(v).to_string(),
            });
        }
    }

    let cfg = dom::Cfg::new(f);
    for &b in &f.blocks {
        if !cfg.is_reachable(b) {
            return Err(VerifyError::Unreachable {
                func: func.clone(),
                block: f.block(b).label.clone(),
            });
        }
    }
    let dt = dom::DomTree::build(f, &cfg);

    let dominated = |def: &ValueDef, use_point: (Block, usize)| -> bool {
        match def {
            ValueDef::Param(_) => true,
            ValueDef::Inst(def_id) => {
                let (db, di) = f.position_of(*def_id).expect("defined inst in layout");
                if db == use_point.0 {
                    di < use_point.1
                } else {
                    dt.dominates(db, use_point.0)
                }
            }
        }
    };

    let expect_ty = |v: Value, want: Ty| -> Result<(), VerifyError> {
        let got = f.value_ty(v);
        if got != want {
            return Err(VerifyError::TypeMismatch {
                func: f.name.clone(),
                value: f.value_name(v).to_string(),
                got,
                want,
            });
        }
        Ok(())
    };

    for &b in &f.blocks {
        let bd = f.block(b);
        for (idx, &id) in bd.insts.iter().enumerate() {
            let inst = f.inst(id);
            match &inst.kind {
                InstKind::Phi { ty, incomings } => {
                    let mut preds: Vec<Block> = cfg.preds(b).to_vec();
                    preds.sort();
                    let mut inc: Vec<Block> = incomings.iter().map(|(p, _)| *p).collect();
                    inc.sort();
                    if preds != inc {
                        return Err(VerifyError::PhiPredMismatch {
                            func: func.clone(),
                            value: inst
                                .result
                                .map(|v| f.value_name(v).to_string())
                                .unwrap_or_default(),
                            block: bd.label.clone(),
                        });
                    }
                    for (pred, v) in incomings {
                        expect_ty(*v, *ty)?;
                        let term_idx = f.block(*pred).insts.len();
                        let def = f.def_of(*v).expect("defined");
                        if !dominated(def, (*pred, term_idx)) {
                            return Err(VerifyError::UseNotDominated {
                                func: func.clone(),
                                value: f.value_name(*v).to_string(),
                            });
                        }
                    }
                }
                kind => {
                    let mut bad: Option<Value> = None;
                    kind.for_each_operand(|v| {
                        if bad.is_none() {
                            let def = f.def_of(v).expect("defined");
                            if !dominated(def, (b, idx)) {
                                bad = Some(v);
                            }
                        }
                    });
                    if let Some(v) = bad {
                        return Err(VerifyError::UseNotDominated {
                            func: func.clone(),
                            value: f.value_name(v).to_string(),
                        });
                    }
                    match kind {
                        InstKind::Bin { lhs, rhs, .. } | InstKind::Icmp { lhs, rhs, .. } => {
                            expect_ty(*lhs, Ty::I64)?;
                            expect_ty(*rhs, Ty::I64)?;
                        }
                        InstKind::Halloc { size } => expect_ty(*size, Ty::I64)?,
                        InstKind::Hfree { ptr } => expect_ty(*ptr, Ty::Ptr)?,
                        InstKind::Hrealloc { ptr, size } => {
                            expect_ty(*ptr, Ty::Ptr)?;
                            expect_ty(*size, Ty::I64)?;
                        }
                        InstKind::Load { addr, .. } => expect_ty(*addr, Ty::Ptr)?,
                        InstKind::Store { addr, .. } => expect_ty(*addr, Ty::Ptr)?,
                        InstKind::Gep { base, offset } => {
                            expect_ty(*base, Ty::Ptr)?;
                            expect_ty(*offset, Ty::I64)?;
                        }
                        InstKind::PtrToInt { value } => expect_ty(*value, Ty::Ptr)?,
                        InstKind::IntToPtr { value } => expect_ty(*value, Ty::I64)?,
                        InstKind::Translate { ptr } => expect_ty(*ptr, Ty::Ptr)?,
                        InstKind::Release { translation } => expect_ty(*translation, Ty::Ptr)?,
                        InstKind::CondBr { cond, .. } => expect_ty(*cond, Ty::I64)?,
                        InstKind::Ret { value } => match (value, f.ret_ty) {
                            (None, None) => {}
                            (Some(v), Some(want)) => expect_ty(*v, want)?,
                            _ => return Err(VerifyError::BadReturn { func: func.clone() }),
                        },
                        InstKind::Call {
                            callee,
                            args,
                            external,
                        } => {
                            let sig: Option<(Vec<Ty>, Option<Ty>)> =
                                if let Some(callee_fn) = program.function(callee) {
                                    Some((
                                        callee_fn
                                            .params
                                            .iter()
                                            .map(|&p| callee_fn.value_ty(p))
                                            .collect(),
                                        callee_fn.ret_ty,
                                    ))
                                } else if let Some(decl) = program.extern_decl(callee) {
                                    Some((decl.params.clone(), decl.ret))
                                } else {
                                    alloc_intrinsic_sig(callee)
                                };
                            let Some((param_tys, ret)) = sig else {
                                return Err(VerifyError::UnknownCallee {
                                    func: func.clone(),
                                    callee: callee.clone(),
                                });
                            };
                            let result_ty = inst.result.map(|v| f.value_ty(v));
                            if args.len() != param_tys.len() || result_ty != ret {
                                return Err(VerifyError::BadCall {
                                    func: func.clone(),
                                    callee: callee.clone(),
                                });
                            }
                            for (a, want) in args.iter().zip(param_tys) {
                                expect_ty(*a, want)?;
                            }
                            // Defined functions are internal; unknown ones
                            // must carry the external flag.
                            let _ = external;
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(())
}
