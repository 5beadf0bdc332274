//! The pointer flow graph: which instructions produce pointer-typed values
//! and which consume them through their `ptr` operand (the address of a
//! load or store, the base of address arithmetic, the incomings of a
//! pointer phi, or the input of a translation).
//!
//! Values that can hold a handle at run time are the roots: allocation
//! results, pointer parameters, loaded pointers (their provenance is
//! statically unknown, so every loaded pointer starts a fresh root),
//! int-to-pointer casts, pointer-valued calls, and pointer phis. Geps over
//! such values derive from them; the derivation edges are what translation
//! insertion walks.

use std::collections::BTreeMap;

use super::{Function, InstId, InstKind, Ty, Value, ValueDef};

/// One pointer-consuming use.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PtrRole {
    LoadAddr,
    StoreAddr,
    GepBase,
    PhiIncoming,
    TranslateInput,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PtrUse {
    pub inst: InstId,
    pub role: PtrRole,
}

#[derive(Clone, Debug, Default)]
pub struct PointerFlow {
    /// Pointer-consuming uses per pointer value.
    pub consumers: BTreeMap<Value, Vec<PtrUse>>,
    /// Count of pointer-derivation edges into each instruction.
    pub incoming: BTreeMap<InstId, usize>,
    /// Pointer values that may hold a handle at run time. Consumers of
    /// these need a translation; geps over them produce raw addresses once
    /// their base operand is rewritten.
    pub maybe_handle: Vec<Value>,
}

impl PointerFlow {
    pub fn incoming_of(&self, inst: InstId) -> usize {
        self.incoming.get(&inst).copied().unwrap_or(0)
    }

    pub fn consumers_of(&self, v: Value) -> &[PtrUse] {
        self.consumers.get(&v).map(|c| c.as_slice()).unwrap_or(&[])
    }

    pub fn is_maybe_handle(&self, v: Value) -> bool {
        self.maybe_handle.contains(&v)
    }
}

pub fn build_pg(f: &Function) -> PointerFlow {
    let mut pg = PointerFlow::default();
    for v in f.value_ids() {
        if f.value_ty(v) != Ty::Ptr {
            continue;
        }
        let maybe = match f.def_of(v) {
            Some(ValueDef::Param(_)) => true,
            Some(ValueDef::Inst(id)) => matches!(
                f.inst(*id).kind,
                InstKind::Halloc { .. }
                    | InstKind::Hrealloc { .. }
                    | InstKind::Load { .. }
                    | InstKind::IntToPtr { .. }
                    | InstKind::Call { .. }
                    | InstKind::Phi { .. }
            ),
            None => false,
        };
        if maybe {
            pg.maybe_handle.push(v);
        }
    }
    for &b in &f.blocks {
        for &id in &f.block(b).insts {
            let mut note = |v: Value, role: PtrRole| {
                pg.consumers.entry(v).or_default().push(PtrUse { inst: id, role });
                *pg.incoming.entry(id).or_insert(0) += 1;
            };
            match &f.inst(id).kind {
                InstKind::Load { addr, .. } => note(*addr, PtrRole::LoadAddr),
                InstKind::Store { addr, .. } => note(*addr, PtrRole::StoreAddr),
                InstKind::Gep { base, .. } => note(*base, PtrRole::GepBase),
                InstKind::Phi { ty: Ty::Ptr, incomings } => {
                    for (_, v) in incomings {
                        note(*v, PtrRole::PhiIncoming);
                    }
                }
                InstKind::Translate { ptr } => note(*ptr, PtrRole::TranslateInput),
                _ => {}
            }
        }
    }
    pg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;

    #[test]
    fn roots_edges_and_incoming_counts() {
        let text = concat!(
            "func @main(%p: ptr) -> i64 {\n",
            "entry:\n",
            "  %n = const 16\n",
            "  %q = call @malloc(%n)\n",
            "  %zero = const 0\n",
            "  %g = gep %q, %zero\n",
            "  store %g, %n\n",
            "  %r = load ptr, %p\n",
            "  %v = load i64, %r\n",
            "  ret %v\n",
            "}\n",
        );
        let prog = parse_program(text).unwrap();
        let f = &prog.functions[0];
        let pg = build_pg(f);
        let by_name = |n: &str| f.value_ids().find(|&v| f.value_name(v) == n).unwrap();
        // Roots: the parameter, the allocation, and the loaded pointer.
        assert!(pg.is_maybe_handle(by_name("p")));
        assert!(pg.is_maybe_handle(by_name("q")));
        assert!(pg.is_maybe_handle(by_name("r")));
        // The gep result derives from q; it is not a fresh root.
        assert!(!pg.is_maybe_handle(by_name("g")));
        // q has one consumer (the gep); g has one (the store address).
        assert_eq!(pg.consumers_of(by_name("q")).len(), 1);
        assert_eq!(pg.consumers_of(by_name("q"))[0].role, PtrRole::GepBase);
        assert_eq!(pg.consumers_of(by_name("g"))[0].role, PtrRole::StoreAddr);
        // The load of %r consumes %p as an address.
        assert_eq!(pg.consumers_of(by_name("p"))[0].role, PtrRole::LoadAddr);
        // Incoming counts: every pointer-consuming instruction has one edge
        // per pointer operand; halloc-style producers have none.
        let store_inst = pg.consumers_of(by_name("g"))[0].inst;
        assert_eq!(pg.incoming_of(store_inst), 1);
    }

    #[test]
    fn pointer_phi_is_a_root_with_edges_from_incomings() {
        let text = concat!(
            "func @main(%c: i64) -> i64 {\n",
            "entry:\n",
            "  %n = const 32\n",
            "  %a = call @malloc(%n)\n",
            "  %b = call @malloc(%n)\n",
            "  cond_br %c, l, r\n",
            "l:\n",
            "  br join\n",
            "r:\n",
            "  br join\n",
            "join:\n",
            "  %p = phi ptr [ %a, l ], [ %b, r ]\n",
            "  %v = load i64, %p\n",
            "  ret %v\n",
            "}\n",
        );
        let prog = parse_program(text).unwrap();
        let f = &prog.functions[0];
        let pg = build_pg(f);
        let by_name = |n: &str| f.value_ids().find(|&v| f.value_name(v) == n).unwrap();
        assert!(pg.is_maybe_handle(by_name("p")));
        let phi_uses_a = pg.consumers_of(by_name("a"));
        assert_eq!(phi_uses_a.len(), 1);
        assert_eq!(phi_uses_a[0].role, PtrRole::PhiIncoming);
        // The phi instruction has two incoming pointer edges.
        assert_eq!(pg.incoming_of(phi_uses_a[0].inst), 2);
    }
}
