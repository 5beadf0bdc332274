//! Canonical textual form. `parse(print(f))` is the identity; printing is
//! the normal form whitespace-wise.

use std::fmt::Write;

use super::{BinOp, Function, InstKind, Pred, Program, Value};

fn bin_op_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
    }
}

fn pred_name(p: Pred) -> &'static str {
    match p {
        Pred::Eq => "eq",
        Pred::Ne => "ne",
        Pred::Slt => "slt",
        Pred::Sle => "sle",
        Pred::Sgt => "sgt",
        Pred::Sge => "sge",
    }
}

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for e in &p.externs {
        let params = e
            .params
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        match e.ret {
            Some(r) => writeln!(out, "extern @{}({}) -> {}", e.name, params, r).unwrap(),
            None => writeln!(out, "extern @{}({})", e.name, params).unwrap(),
        }
    }
    if !p.externs.is_empty() {
        out.push('\n');
    }
    for (i, f) in p.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        print_function(&mut out, f);
    }
    out
}

pub fn print_function(out: &mut String, f: &Function) {
    let params = f
        .params
        .iter()
        .map(|&v| format!("%{}: {}", f.value_name(v), f.value_ty(v)))
        .collect::<Vec<_>>()
        .join(", ");
    match f.ret_ty {
        Some(r) => writeln!(out, "func @{}({}) -> {} {{", f.name, params, r).unwrap(),
        None => writeln!(out, "func @{}({}) {{", f.name, params).unwrap(),
    }
    for &b in &f.blocks {
        writeln!(out, "{}:", f.block(b).label).unwrap();
        for &id in &f.block(b).insts {
            let inst = f.inst(id);
            out.push_str("  ");
            if let Some(r) = inst.result {
                write!(out, "%{} = ", f.value_name(r)).unwrap();
            }
            print_kind(out, f, &inst.kind);
            out.push('\n');
        }
    }
    out.push_str("}\n");
}

fn v(f: &Function, x: Value) -> String {
    format!("%{}", f.value_name(x))
}

fn print_kind(out: &mut String, f: &Function, kind: &InstKind) {
    match kind {
        InstKind::Const(c) => write!(out, "const {c}").unwrap(),
        InstKind::Bin { op, lhs, rhs } => {
            write!(out, "{} {}, {}", bin_op_name(*op), v(f, *lhs), v(f, *rhs)).unwrap()
        }
        InstKind::Icmp { pred, lhs, rhs } => write!(
            out,
            "icmp {} {}, {}",
            pred_name(*pred),
            v(f, *lhs),
            v(f, *rhs)
        )
        .unwrap(),
        InstKind::Halloc { size } => write!(out, "halloc {}", v(f, *size)).unwrap(),
        InstKind::Hfree { ptr } => write!(out, "hfree {}", v(f, *ptr)).unwrap(),
        InstKind::Hrealloc { ptr, size } => {
            write!(out, "hrealloc {}, {}", v(f, *ptr), v(f, *size)).unwrap()
        }
        InstKind::Load { ty, addr } => write!(out, "load {}, {}", ty, v(f, *addr)).unwrap(),
        InstKind::Store { addr, value } => {
            write!(out, "store {}, {}", v(f, *addr), v(f, *value)).unwrap()
        }
        InstKind::Gep { base, offset } => {
            write!(out, "gep {}, {}", v(f, *base), v(f, *offset)).unwrap()
        }
        InstKind::Phi { ty, incomings } => {
            write!(out, "phi {ty} ").unwrap();
            let parts = incomings
                .iter()
                .map(|(b, val)| format!("[ {}, {} ]", v(f, *val), f.block(*b).label))
                .collect::<Vec<_>>()
                .join(", ");
            out.push_str(&parts);
        }
        InstKind::Call { callee, args, .. } => {
            let parts = args.iter().map(|&a| v(f, a)).collect::<Vec<_>>().join(", ");
            write!(out, "call @{callee}({parts})").unwrap()
        }
        InstKind::PtrToInt { value } => write!(out, "ptrtoint {}", v(f, *value)).unwrap(),
        InstKind::IntToPtr { value } => write!(out, "inttoptr {}", v(f, *value)).unwrap(),
        InstKind::Translate { ptr } => write!(out, "translate {}", v(f, *ptr)).unwrap(),
        InstKind::Release { translation } => {
            write!(out, "release {}", v(f, *translation)).unwrap()
        }
        InstKind::Safepoint => out.push_str("safepoint"),
        InstKind::Br { target } => write!(out, "br {}", f.block(*target).label).unwrap(),
        InstKind::CondBr {
            cond,
            then_dest,
            else_dest,
        } => write!(
            out,
            "cond_br {}, {}, {}",
            v(f, *cond),
            f.block(*then_dest).label,
            f.block(*else_dest).label
        )
        .unwrap(),
        InstKind::Ret { value } => match value {
            Some(val) => write!(out, "ret {}", v(f, *val)).unwrap(),
            None => out.push_str("ret"),
        },
    }
}
