//! Seeded program generation.
//!
//! Two flavors: structured workload programs (bounded loops over arrays,
//! diamonds, pointer selects, linked-list chases, escapes, casts, frees)
//! whose memory behavior is in-bounds and terminating by construction —
//! the corpus for the transparency oracle — and arbitrary small CFGs with
//! scattered definitions and uses, for checking the dominator and liveness
//! analyses against brute force.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dom::{Cfg, DomTree};
use super::{BinOp, Block, ExternDecl, Function, InstKind, Pred, Program, Ty, Value};

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub seed: u64,
    /// Number of workload fragments; drawn from the seed when zero.
    pub fragments: usize,
    pub with_externals: bool,
    pub with_stash: bool,
    pub with_realloc: bool,
    pub with_calls: bool,
    pub with_chase: bool,
}

impl GenConfig {
    pub fn new(seed: u64) -> GenConfig {
        GenConfig {
            seed,
            fragments: 0,
            with_externals: true,
            with_stash: true,
            with_realloc: true,
            with_calls: true,
            with_chase: true,
        }
    }
}

pub fn random_program(seed: u64) -> Program {
    random_program_with(&GenConfig::new(seed))
}

struct ArrayInfo {
    ptr: Value,
    elems: i64,
}

struct Gen {
    f: Function,
    cur: Block,
    rng: ChaCha8Rng,
    arrays: Vec<ArrayInfo>,
    acc: Value,
    next_label: u32,
    used_ext_sum: bool,
    used_ext_fill: bool,
    used_helper: bool,
}

impl Gen {
    fn konst(&mut self, c: i64) -> Value {
        self.f
            .push_inst(self.cur, InstKind::Const(c))
            .expect("const produces a value")
    }

    fn bin(&mut self, op: BinOp, lhs: Value, rhs: Value) -> Value {
        self.f
            .push_inst(self.cur, InstKind::Bin { op, lhs, rhs })
            .expect("bin produces a value")
    }

    fn block(&mut self, hint: &str) -> Block {
        self.next_label += 1;
        let label = format!("{hint}{}", self.next_label);
        self.f.new_block(label)
    }

    fn br(&mut self, target: Block) {
        self.f.push_inst(self.cur, InstKind::Br { target });
    }

    /// A bounded counting loop: `body` fills the body blocks and returns
    /// the next values of the extra loop-carried phis.
    fn counted_loop(
        &mut self,
        trip: i64,
        carried_init: &[Value],
        body: impl FnOnce(&mut Gen, Value, &[Value]) -> Vec<Value>,
    ) -> Vec<Value> {
        let zero = self.konst(0);
        let one = self.konst(1);
        let trip_v = self.konst(trip.max(1));
        let pre = self.cur;
        let header = self.block("loop");
        let exit = self.block("after");
        self.br(header);
        self.cur = header;
        // Phis start with the preheader incoming; the latch incoming is
        // patched in once the body has produced it.
        let i = self
            .f
            .push_inst(
                header,
                InstKind::Phi {
                    ty: Ty::I64,
                    incomings: vec![(pre, zero)],
                },
            )
            .expect("phi produces a value");
        let mut carried: Vec<Value> = Vec::new();
        for &init in carried_init {
            let ty = self.f.value_ty(init);
            carried.push(
                self.f
                    .push_inst(
                        header,
                        InstKind::Phi {
                            ty,
                            incomings: vec![(pre, init)],
                        },
                    )
                    .expect("phi produces a value"),
            );
        }
        let next_carried = body(self, i, &carried);
        assert_eq!(next_carried.len(), carried_init.len());
        let i2 = self.bin(BinOp::Add, i, one);
        let latch = self.cur;
        let c = self
            .f
            .push_inst(
                latch,
                InstKind::Icmp {
                    pred: Pred::Slt,
                    lhs: i2,
                    rhs: trip_v,
                },
            )
            .expect("icmp produces a value");
        self.f.push_inst(
            latch,
            InstKind::CondBr {
                cond: c,
                then_dest: header,
                else_dest: exit,
            },
        );
        let header_insts = self.f.block(header).insts.clone();
        let mut phi_idx = 0usize;
        for id in header_insts {
            let latch_value = if phi_idx == 0 {
                i2
            } else if phi_idx <= next_carried.len() {
                next_carried[phi_idx - 1]
            } else {
                break;
            };
            if let InstKind::Phi { incomings, .. } = &mut self.f.inst_mut(id).kind {
                incomings.push((latch, latch_value));
                phi_idx += 1;
            } else {
                break;
            }
        }
        self.cur = exit;
        carried
    }

    fn pick_array(&mut self) -> Option<usize> {
        if self.arrays.is_empty() {
            None
        } else {
            Some(self.rng.gen_range(0..self.arrays.len()))
        }
    }

    fn bump_acc(&mut self, v: Value) {
        self.acc = self.bin(BinOp::Add, self.acc, v);
    }

    fn out(&mut self, v: Value) {
        self.f.push_call(self.cur, "out", vec![v], true, None);
    }
}

pub fn random_program_with(cfg: &GenConfig) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fragments = if cfg.fragments == 0 {
        rng.gen_range(3..=7)
    } else {
        cfg.fragments
    };
    let mut f = Function::new("main", vec![], Some(Ty::I64));
    let entry = f.new_block("entry");
    let acc = f.push_inst(entry, InstKind::Const(0)).expect("const");
    let mut g = Gen {
        f,
        cur: entry,
        rng,
        arrays: Vec::new(),
        acc,
        next_label: 0,
        used_ext_sum: false,
        used_ext_fill: false,
        used_helper: false,
    };
    alloc_array(&mut g);
    for _ in 0..fragments {
        let choice = g.rng.gen_range(0..100);
        match choice {
            0..=13 => alloc_array(&mut g),
            14..=31 => fill_loop(&mut g),
            32..=47 => sum_loop(&mut g),
            48..=57 => straight_ops(&mut g),
            58..=67 => diamond(&mut g),
            68..=73 => nested_2d(&mut g),
            74..=79 => {
                if cfg.with_chase {
                    chase(&mut g)
                } else {
                    fill_loop(&mut g)
                }
            }
            80..=85 => {
                if cfg.with_externals {
                    external_sum(&mut g)
                } else {
                    sum_loop(&mut g)
                }
            }
            86..=88 => {
                if cfg.with_externals {
                    external_fill(&mut g)
                } else {
                    fill_loop(&mut g)
                }
            }
            89..=92 => {
                if cfg.with_calls {
                    internal_call(&mut g)
                } else {
                    sum_loop(&mut g)
                }
            }
            93..=95 => {
                if cfg.with_stash {
                    stash(&mut g)
                } else {
                    straight_ops(&mut g)
                }
            }
            96..=97 => {
                if cfg.with_realloc {
                    regrow(&mut g)
                } else {
                    alloc_array(&mut g)
                }
            }
            _ => free_array(&mut g),
        }
    }
    g.out(g.acc);
    let acc = g.acc;
    g.f.push_inst(g.cur, InstKind::Ret { value: Some(acc) });

    let mut program = Program::default();
    program.externs.push(ExternDecl {
        name: "out".into(),
        params: vec![Ty::I64],
        ret: None,
    });
    if g.used_ext_sum {
        program.externs.push(ExternDecl {
            name: "ext_sum".into(),
            params: vec![Ty::Ptr, Ty::I64],
            ret: Some(Ty::I64),
        });
    }
    if g.used_ext_fill {
        program.externs.push(ExternDecl {
            name: "ext_fill".into(),
            params: vec![Ty::Ptr, Ty::I64, Ty::I64],
            ret: None,
        });
    }
    if g.used_helper {
        program.functions.push(sum_helper());
    }
    program.functions.push(g.f);
    super::verify_program(&program).expect("generated programs are valid");
    program
}

/// The shared callee: a plain summing loop over an array parameter.
fn sum_helper() -> Function {
    let mut f = Function::new(
        "sum_slots",
        vec![("arr".into(), Ty::Ptr), ("elems".into(), Ty::I64)],
        Some(Ty::I64),
    );
    let entry = f.new_block("entry");
    let header = f.new_block("loop");
    let exit = f.new_block("done");
    let arr = f.params[0];
    let elems = f.params[1];
    let zero = f.push_inst(entry, InstKind::Const(0)).unwrap();
    let one = f.push_inst(entry, InstKind::Const(1)).unwrap();
    let eight = f.push_inst(entry, InstKind::Const(8)).unwrap();
    f.push_inst(entry, InstKind::Br { target: header });
    let i = f
        .push_inst(
            header,
            InstKind::Phi {
                ty: Ty::I64,
                incomings: vec![(entry, zero)],
            },
        )
        .unwrap();
    let s = f
        .push_inst(
            header,
            InstKind::Phi {
                ty: Ty::I64,
                incomings: vec![(entry, zero)],
            },
        )
        .unwrap();
    let off = f
        .push_inst(
            header,
            InstKind::Bin {
                op: BinOp::Mul,
                lhs: i,
                rhs: eight,
            },
        )
        .unwrap();
    let addr = f
        .push_inst(
            header,
            InstKind::Gep {
                base: arr,
                offset: off,
            },
        )
        .unwrap();
    let v = f
        .push_inst(header, InstKind::Load { ty: Ty::I64, addr })
        .unwrap();
    let s2 = f
        .push_inst(
            header,
            InstKind::Bin {
                op: BinOp::Add,
                lhs: s,
                rhs: v,
            },
        )
        .unwrap();
    let i2 = f
        .push_inst(
            header,
            InstKind::Bin {
                op: BinOp::Add,
                lhs: i,
                rhs: one,
            },
        )
        .unwrap();
    let c = f
        .push_inst(
            header,
            InstKind::Icmp {
                pred: Pred::Slt,
                lhs: i2,
                rhs: elems,
            },
        )
        .unwrap();
    f.push_inst(
        header,
        InstKind::CondBr {
            cond: c,
            then_dest: header,
            else_dest: exit,
        },
    );
    // Patch phis: i advances by one, s accumulates.
    let header_insts = f.block(header).insts.clone();
    let mut idx = 0;
    for id in header_insts {
        if let InstKind::Phi { incomings, .. } = &mut f.inst_mut(id).kind {
            incomings.push((header, if idx == 0 { i2 } else { s2 }));
            idx += 1;
        } else {
            break;
        }
    }
    f.push_inst(exit, InstKind::Ret { value: Some(s2) });
    f
}

fn alloc_array(g: &mut Gen) {
    let elems = g.rng.gen_range(2..=16i64);
    let use_calloc = g.rng.gen_bool(0.25);
    let ptr = if use_calloc {
        let n = g.konst(elems);
        let eight = g.konst(8);
        g.f.push_call(g.cur, "calloc", vec![n, eight], false, Some(Ty::Ptr))
            .expect("calloc returns a pointer")
    } else {
        let bytes = g.konst(elems * 8);
        g.f.push_call(g.cur, "malloc", vec![bytes], false, Some(Ty::Ptr))
            .expect("malloc returns a pointer")
    };
    g.arrays.push(ArrayInfo { ptr, elems });
}

fn fill_loop(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    let (ptr, elems) = (g.arrays[a].ptr, g.arrays[a].elems);
    let k = g.rng.gen_range(1..=9i64);
    let eight = g.konst(8);
    let kv = g.konst(k);
    g.counted_loop(elems, &[], |g, i, _| {
        let off = g.bin(BinOp::Mul, i, eight);
        let addr = g
            .f
            .push_inst(g.cur, InstKind::Gep { base: ptr, offset: off })
            .expect("gep");
        let val = g.bin(BinOp::Mul, i, kv);
        g.f.push_inst(g.cur, InstKind::Store { addr, value: val });
        vec![]
    });
}

fn sum_loop(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    let (ptr, elems) = (g.arrays[a].ptr, g.arrays[a].elems);
    let eight = g.konst(8);
    let zero = g.konst(0);
    let carried = g.counted_loop(elems, &[zero], |g, i, carried| {
        let off = g.bin(BinOp::Mul, i, eight);
        let addr = g
            .f
            .push_inst(g.cur, InstKind::Gep { base: ptr, offset: off })
            .expect("gep");
        let v = g
            .f
            .push_inst(g.cur, InstKind::Load { ty: Ty::I64, addr })
            .expect("load");
        let s2 = g.bin(BinOp::Add, carried[0], v);
        vec![s2]
    });
    g.out(carried[0]);
    let s = carried[0];
    g.bump_acc(s);
}

fn straight_ops(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    let (ptr, elems) = (g.arrays[a].ptr, g.arrays[a].elems);
    for _ in 0..g.rng.gen_range(1..=3) {
        let idx = g.rng.gen_range(0..elems);
        let off = g.konst(idx * 8);
        let addr = g
            .f
            .push_inst(g.cur, InstKind::Gep { base: ptr, offset: off })
            .expect("gep");
        if g.rng.gen_bool(0.5) {
            let c = g.rng.gen_range(-50..=50);
            let v = g.konst(c);
            g.f.push_inst(g.cur, InstKind::Store { addr, value: v });
        } else {
            let v = g
                .f
                .push_inst(g.cur, InstKind::Load { ty: Ty::I64, addr })
                .expect("load");
            g.bump_acc(v);
        }
    }
}

fn diamond(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    let ptr_a = g.arrays[a].ptr;
    let t = g.rng.gen_range(-20..=20);
    let threshold = g.konst(t);
    let acc = g.acc;
    let c = g
        .f
        .push_inst(
            g.cur,
            InstKind::Icmp {
                pred: Pred::Slt,
                lhs: acc,
                rhs: threshold,
            },
        )
        .expect("icmp");
    let then_b = g.block("then");
    let else_b = g.block("else");
    let join = g.block("join");
    g.f.push_inst(
        g.cur,
        InstKind::CondBr {
            cond: c,
            then_dest: then_b,
            else_dest: else_b,
        },
    );
    let b_idx = g.pick_array().expect("at least one array");
    let ptr_b = g.arrays[b_idx].ptr;
    g.cur = then_b;
    let tc = g.rng.gen_range(0..=30);
    let tv = g.konst(tc);
    g.br(join);
    g.cur = else_b;
    let ec = g.rng.gen_range(31..=60);
    let ev = g.konst(ec);
    g.br(join);
    g.cur = join;
    let sel = g
        .f
        .push_inst(
            join,
            InstKind::Phi {
                ty: Ty::Ptr,
                incomings: vec![(then_b, ptr_a), (else_b, ptr_b)],
            },
        )
        .expect("phi");
    let picked = g
        .f
        .push_inst(
            join,
            InstKind::Phi {
                ty: Ty::I64,
                incomings: vec![(then_b, tv), (else_b, ev)],
            },
        )
        .expect("phi");
    // Write the picked value through the selected array's slot 0 and read
    // it back.
    g.f.push_inst(
        join,
        InstKind::Store {
            addr: sel,
            value: picked,
        },
    );
    let v = g
        .f
        .push_inst(join, InstKind::Load { ty: Ty::I64, addr: sel })
        .expect("load");
    g.bump_acc(v);
}

fn nested_2d(g: &mut Gen) {
    let rows = g.rng.gen_range(2..=4i64);
    let cols = g.rng.gen_range(2..=4i64);
    let bytes = g.konst(rows * cols * 8);
    let ptr = g
        .f
        .push_call(g.cur, "malloc", vec![bytes], false, Some(Ty::Ptr))
        .expect("malloc");
    g.arrays.push(ArrayInfo {
        ptr,
        elems: rows * cols,
    });
    let eight = g.konst(8);
    let colsv = g.konst(cols);
    g.counted_loop(rows, &[], |g, i, _| {
        let row_base = g.bin(BinOp::Mul, i, colsv);
        g.counted_loop(cols, &[], |g, j, _| {
            let slot = g.bin(BinOp::Add, row_base, j);
            let off = g.bin(BinOp::Mul, slot, eight);
            let addr = g
                .f
                .push_inst(g.cur, InstKind::Gep { base: ptr, offset: off })
                .expect("gep");
            let val = g.bin(BinOp::Add, i, j);
            g.f.push_inst(g.cur, InstKind::Store { addr, value: val });
            vec![]
        });
        vec![]
    });
}

/// Builds a linked chain inside one array (16-byte nodes: next pointer,
/// then payload) and walks it. The stored next pointers are handle values
/// in handle mode; every hop loads a pointer of unknown provenance and
/// re-translates it.
fn chase(g: &mut Gen) {
    let nodes = g.rng.gen_range(3..=8i64);
    let bytes = g.konst(nodes * 16);
    let ptr = g
        .f
        .push_call(g.cur, "malloc", vec![bytes], false, Some(Ty::Ptr))
        .expect("malloc");
    let sixteen = g.konst(16);
    let eight = g.konst(8);
    g.counted_loop(nodes - 1, &[], |g, k, _| {
        let off = g.bin(BinOp::Mul, k, sixteen);
        let node = g
            .f
            .push_inst(g.cur, InstKind::Gep { base: ptr, offset: off })
            .expect("gep");
        let one = g.konst(1);
        let k1 = g.bin(BinOp::Add, k, one);
        let next_off = g.bin(BinOp::Mul, k1, sixteen);
        let next = g
            .f
            .push_inst(
                g.cur,
                InstKind::Gep {
                    base: ptr,
                    offset: next_off,
                },
            )
            .expect("gep");
        g.f.push_inst(
            g.cur,
            InstKind::Store {
                addr: node,
                value: next,
            },
        );
        let val_addr = g
            .f
            .push_inst(
                g.cur,
                InstKind::Gep {
                    base: node,
                    offset: eight,
                },
            )
            .expect("gep");
        let val = g.bin(BinOp::Mul, k, k1);
        g.f.push_inst(
            g.cur,
            InstKind::Store {
                addr: val_addr,
                value: val,
            },
        );
        vec![]
    });
    let zero = g.konst(0);
    let carried = g.counted_loop(nodes - 1, &[zero, ptr], |g, _i, carried| {
        let s = carried[0];
        let cur = carried[1];
        let val_addr = g
            .f
            .push_inst(
                g.cur,
                InstKind::Gep {
                    base: cur,
                    offset: eight,
                },
            )
            .expect("gep");
        let v = g
            .f
            .push_inst(g.cur, InstKind::Load { ty: Ty::I64, addr: val_addr })
            .expect("load");
        let s2 = g.bin(BinOp::Add, s, v);
        let next = g
            .f
            .push_inst(g.cur, InstKind::Load { ty: Ty::Ptr, addr: cur })
            .expect("load");
        vec![s2, next]
    });
    g.out(carried[0]);
    let s = carried[0];
    g.bump_acc(s);
    // Chain nodes hold interior pointers, so this array never joins the
    // pools that free or realloc draw from.
}

fn external_sum(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    g.used_ext_sum = true;
    let (ptr, elems) = (g.arrays[a].ptr, g.arrays[a].elems);
    let bytes = g.konst(elems * 8);
    let r = g
        .f
        .push_call(g.cur, "ext_sum", vec![ptr, bytes], true, Some(Ty::I64))
        .expect("ext_sum returns");
    g.out(r);
    g.bump_acc(r);
}

fn external_fill(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    g.used_ext_fill = true;
    let (ptr, elems) = (g.arrays[a].ptr, g.arrays[a].elems);
    let bytes = g.konst(elems * 8);
    let b = g.rng.gen_range(0..=7);
    let byte = g.konst(b);
    g.f.push_call(g.cur, "ext_fill", vec![ptr, bytes, byte], true, None);
}

fn internal_call(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    g.used_helper = true;
    let (ptr, elems) = (g.arrays[a].ptr, g.arrays[a].elems);
    let n = g.konst(elems);
    let r = g
        .f
        .push_call(g.cur, "sum_slots", vec![ptr, n], false, Some(Ty::I64))
        .expect("helper returns");
    g.out(r);
    g.bump_acc(r);
}

fn stash(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    let ptr = g.arrays[a].ptr;
    let s = g
        .f
        .push_inst(g.cur, InstKind::PtrToInt { value: ptr })
        .expect("ptrtoint");
    let back = g
        .f
        .push_inst(g.cur, InstKind::IntToPtr { value: s })
        .expect("inttoptr");
    let v = g
        .f
        .push_inst(g.cur, InstKind::Load { ty: Ty::I64, addr: back })
        .expect("load");
    g.bump_acc(v);
}

fn regrow(g: &mut Gen) {
    let Some(a) = g.pick_array() else {
        return alloc_array(g);
    };
    let grown = g.arrays[a].elems + g.rng.gen_range(1..=8i64);
    let bytes = g.konst(grown * 8);
    let old = g.arrays[a].ptr;
    let newp = g
        .f
        .push_call(g.cur, "realloc", vec![old, bytes], false, Some(Ty::Ptr))
        .expect("realloc returns");
    g.arrays[a] = ArrayInfo {
        ptr: newp,
        elems: grown,
    };
}

fn free_array(g: &mut Gen) {
    if g.arrays.len() < 2 {
        return straight_ops(g);
    }
    let idx = g.rng.gen_range(0..g.arrays.len());
    let arr = g.arrays.remove(idx);
    g.f.push_call(g.cur, "free", vec![arr.ptr], false, None);
}

/// The loop-invariant-base benchmark: N iterations storing through one
/// array, then a single read. With hoisting the whole program performs a
/// constant number of dynamic translations; without it, one per access.
pub fn hoist_benchmark(iters: i64) -> Program {
    let mut f = Function::new("main", vec![], Some(Ty::I64));
    let entry = f.new_block("entry");
    let bytes = f.push_inst(entry, InstKind::Const(iters * 8)).unwrap();
    let ptr = f
        .push_call(entry, "malloc", vec![bytes], false, Some(Ty::Ptr))
        .unwrap();
    let zero = f.push_inst(entry, InstKind::Const(0)).unwrap();
    let one = f.push_inst(entry, InstKind::Const(1)).unwrap();
    let eight = f.push_inst(entry, InstKind::Const(8)).unwrap();
    let trip = f.push_inst(entry, InstKind::Const(iters)).unwrap();
    let header = f.new_block("loop");
    let exit = f.new_block("done");
    f.push_inst(entry, InstKind::Br { target: header });
    let i = f
        .push_inst(
            header,
            InstKind::Phi {
                ty: Ty::I64,
                incomings: vec![(entry, zero)],
            },
        )
        .unwrap();
    let off = f
        .push_inst(
            header,
            InstKind::Bin {
                op: BinOp::Mul,
                lhs: i,
                rhs: eight,
            },
        )
        .unwrap();
    let addr = f
        .push_inst(
            header,
            InstKind::Gep {
                base: ptr,
                offset: off,
            },
        )
        .unwrap();
    f.push_inst(header, InstKind::Store { addr, value: i });
    let i2 = f
        .push_inst(
            header,
            InstKind::Bin {
                op: BinOp::Add,
                lhs: i,
                rhs: one,
            },
        )
        .unwrap();
    let c = f
        .push_inst(
            header,
            InstKind::Icmp {
                pred: Pred::Slt,
                lhs: i2,
                rhs: trip,
            },
        )
        .unwrap();
    f.push_inst(
        header,
        InstKind::CondBr {
            cond: c,
            then_dest: header,
            else_dest: exit,
        },
    );
    for id in f.block(header).insts.clone() {
        if let InstKind::Phi { incomings, .. } = &mut f.inst_mut(id).kind {
            incomings.push((header, i2));
        }
    }
    let back = f
        .push_inst(
            exit,
            InstKind::Gep {
                base: ptr,
                offset: eight,
            },
        )
        .unwrap();
    let v = f
        .push_inst(exit, InstKind::Load { ty: Ty::I64, addr: back })
        .unwrap();
    f.push_call(exit, "out", vec![v], true, None);
    f.push_inst(exit, InstKind::Ret { value: Some(v) });
    let program = Program {
        externs: vec![ExternDecl {
            name: "out".into(),
            params: vec![Ty::I64],
            ret: None,
        }],
        functions: vec![f],
    };
    super::verify_program(&program).expect("benchmark program is valid");
    program
}

/// Arbitrary small CFGs with scattered definitions and uses, for the
/// analysis oracles. All blocks are reachable by construction; extra
/// edges may form loops, including irreducible ones.
pub fn random_cfg_function(seed: u64, max_blocks: usize) -> Function {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_blocks.max(2));
    let mut f = Function::new("cfg", vec![("x".into(), Ty::I64)], Some(Ty::I64));
    let blocks: Vec<Block> = (0..n).map(|i| f.new_block(format!("b{i}"))).collect();

    // Edge plan: a spanning structure keeps everything reachable (each
    // block after the first is targeted by some earlier block with a free
    // out-slot), then extra edges to arbitrary blocks may close cycles.
    let mut targets: Vec<Vec<usize>> = vec![Vec::new(); n];
    for next in 1..n {
        let candidates: Vec<usize> = (0..next).filter(|&b| targets[b].len() < 2).collect();
        let &parent = candidates
            .get(rng.gen_range(0..candidates.len()))
            .expect("some earlier block has a free slot");
        targets[parent].push(next);
    }
    for (b, outs) in targets.iter_mut().enumerate() {
        while outs.len() < 2 && rng.gen_bool(0.35) {
            outs.push(rng.gen_range(0..n));
        }
        let _ = b;
    }

    // Fill blocks along the dominator tree so every use is dominated by
    // its definition.
    {
        // Temporary terminators so the CFG is well-formed for analysis.
        for (i, outs) in targets.iter().enumerate() {
            let b = blocks[i];
            match outs.len() {
                0 => {
                    let z = f.push_inst(b, InstKind::Const(0)).unwrap();
                    f.push_inst(b, InstKind::Ret { value: Some(z) });
                }
                1 => {
                    f.push_inst(
                        b,
                        InstKind::Br {
                            target: blocks[outs[0]],
                        },
                    );
                }
                _ => {
                    let c = f.push_inst(b, InstKind::Const(1)).unwrap();
                    f.push_inst(
                        b,
                        InstKind::CondBr {
                            cond: c,
                            then_dest: blocks[outs[0]],
                            else_dest: blocks[outs[1]],
                        },
                    );
                }
            }
        }
    }
    let cfg = Cfg::new(&f);
    let dt = DomTree::build(&f, &cfg);
    // Walk the dominator tree, carrying available values; sprinkle extra
    // definitions and uses at the top of each block (before terminators).
    let mut stack = vec![(f.entry(), vec![f.params[0]])];
    while let Some((b, mut avail)) = stack.pop() {
        let defs = rng.gen_range(0..=2);
        let mut cursor = 0;
        for _ in 0..defs {
            let kind = if avail.len() >= 2 && rng.gen_bool(0.6) {
                let lhs = avail[rng.gen_range(0..avail.len())];
                let rhs = avail[rng.gen_range(0..avail.len())];
                InstKind::Bin {
                    op: BinOp::Add,
                    lhs,
                    rhs,
                }
            } else {
                InstKind::Const(rng.gen_range(-9..=9))
            };
            let (_, v) = f.insert_inst_at(b, cursor, kind, "v");
            cursor += 1;
            avail.push(v.unwrap());
        }
        // A use that keeps something live across the block.
        if rng.gen_bool(0.7) && !avail.is_empty() {
            let a = avail[rng.gen_range(0..avail.len())];
            let bb = avail[rng.gen_range(0..avail.len())];
            let at = f.block(b).insts.len() - 1;
            f.insert_inst_at(
                b,
                at,
                InstKind::Bin {
                    op: BinOp::Add,
                    lhs: a,
                    rhs: bb,
                },
                "u",
            );
        }
        for &c in dt.children(b) {
            stack.push((c, avail.clone()));
        }
    }
    // Rewrite ret blocks to return an available value occasionally... the
    // constant zero already in place keeps things simple and valid.
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;
    use crate::ir::print::print_program;
    use crate::ir::verify_function;

    #[test]
    fn generated_programs_verify_and_round_trip() {
        for seed in 0..100 {
            let p = random_program(seed);
            let text = print_program(&p);
            let reparsed = parse_program(&text)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
            let text2 = print_program(&reparsed);
            assert_eq!(text, text2, "seed {seed}: round trip is byte-identical");
        }
    }

    #[test]
    fn generated_programs_cover_the_interesting_shapes() {
        let mut saw_chase = false;
        let mut saw_external = false;
        let mut saw_helper = false;
        let mut saw_stash = false;
        let mut saw_free = false;
        for seed in 0..60 {
            let p = random_program(seed);
            let text = print_program(&p);
            saw_chase |= text.contains("load ptr");
            saw_external |= text.contains("@ext_sum") || text.contains("@ext_fill");
            saw_helper |= text.contains("@sum_slots");
            saw_stash |= text.contains("ptrtoint");
            saw_free |= text.contains("call @free");
        }
        assert!(saw_chase, "corpus should include pointer chases");
        assert!(saw_external, "corpus should include escapes");
        assert!(saw_helper, "corpus should include internal calls");
        assert!(saw_stash, "corpus should include pointer stashes");
        assert!(saw_free, "corpus should include frees");
    }

    #[test]
    fn random_cfgs_verify() {
        for seed in 0..200 {
            let f = random_cfg_function(seed, 12);
            assert!(f.block_count() <= 12);
            let prog = crate::ir::Program {
                externs: vec![],
                functions: vec![f],
            };
            verify_function(&prog, &prog.functions[0])
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn hoist_benchmark_runs_in_direct_mode() {
        let p = hoist_benchmark(64);
        let trace = crate::interp::run(&p, &crate::interp::ExecConfig::direct()).unwrap();
        assert_eq!(trace.ret, 1, "slot 1 holds loop index 1");
    }
}
