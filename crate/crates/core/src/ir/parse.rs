//! Line-oriented parser for the textual IR. `;` starts a comment. Result
//! types are syntactically determined, so definitions are pre-scanned per
//! function and phis may reference values defined later; dominance of every
//! use is still enforced by verification, which runs as part of parsing.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{
    alloc_intrinsic_sig, verify_program, BinOp, Block, ExternDecl, Function, InstKind, Pred,
    Program, Ty, Value, VerifyError,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}, col {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

fn err<T>(line: usize, col: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError::Syntax {
        line,
        col,
        msg: msg.into(),
    })
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Value(String),
    Global(String),
    Int(i64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Eq,
    Arrow,
}

fn lex_line(line: &str, line_no: usize) -> Result<Vec<(Tok, usize)>, ParseError> {
    let mut toks = Vec::new();
    let bytes: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let col = i + 1;
        match c {
            ';' => break,
            c if c.is_whitespace() => {
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, col));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, col));
                i += 1;
            }
            '[' => {
                toks.push((Tok::LBracket, col));
                i += 1;
            }
            ']' => {
                toks.push((Tok::RBracket, col));
                i += 1;
            }
            '{' => {
                toks.push((Tok::LBrace, col));
                i += 1;
            }
            '}' => {
                toks.push((Tok::RBrace, col));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, col));
                i += 1;
            }
            ':' => {
                toks.push((Tok::Colon, col));
                i += 1;
            }
            '=' => {
                toks.push((Tok::Eq, col));
                i += 1;
            }
            '%' | '@' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && (bytes[j].is_alphanumeric() || "._".contains(bytes[j])) {
                    j += 1;
                }
                if j == start {
                    return err(line_no, col, format!("empty name after '{c}'"));
                }
                let name: String = bytes[start..j].iter().collect();
                toks.push((
                    if c == '%' {
                        Tok::Value(name)
                    } else {
                        Tok::Global(name)
                    },
                    col,
                ));
                i = j;
            }
            '-' => {
                if i + 1 < bytes.len() && bytes[i + 1] == '>' {
                    toks.push((Tok::Arrow, col));
                    i += 2;
                } else if i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit() {
                    let mut j = i + 1;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    let text: String = bytes[i..j].iter().collect();
                    let n = text
                        .parse::<i64>()
                        .map_err(|_| ParseError::Syntax {
                            line: line_no,
                            col,
                            msg: format!("bad integer literal {text}"),
                        })?;
                    toks.push((Tok::Int(n), col));
                    i = j;
                } else {
                    return err(line_no, col, "stray '-'");
                }
            }
            c if c.is_ascii_digit() => {
                let mut j = i;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                let text: String = bytes[i..j].iter().collect();
                let n = text.parse::<i64>().map_err(|_| ParseError::Syntax {
                    line: line_no,
                    col,
                    msg: format!("bad integer literal {text}"),
                })?;
                toks.push((Tok::Int(n), col));
                i = j;
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_alphanumeric() || "._".contains(bytes[j])) {
                    j += 1;
                }
                toks.push((Tok::Ident(bytes[i..j].iter().collect()), col));
                i = j;
            }
            other => return err(line_no, col, format!("unexpected character '{other}'")),
        }
    }
    Ok(toks)
}

struct Cursor<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [(Tok, usize)], line: usize) -> Cursor<'a> {
        Cursor { toks, pos: 0, line }
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or_else(|| self.toks.last().map(|(_, c)| c + 1).unwrap_or(1))
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        let col = self.col();
        match self.next() {
            Some(t) if t == want => Ok(()),
            _ => err(self.line, col, format!("expected {what}")),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        let col = self.col();
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            _ => err(self.line, col, format!("expected {what}")),
        }
    }

    fn value_name(&mut self) -> Result<String, ParseError> {
        let col = self.col();
        match self.next() {
            Some(Tok::Value(s)) => Ok(s),
            _ => err(self.line, col, "expected a %value"),
        }
    }

    fn global_name(&mut self) -> Result<String, ParseError> {
        let col = self.col();
        match self.next() {
            Some(Tok::Global(s)) => Ok(s),
            _ => err(self.line, col, "expected a @name"),
        }
    }

    fn ty(&mut self) -> Result<Ty, ParseError> {
        let col = self.col();
        match self.next() {
            Some(Tok::Ident(s)) if s == "i64" => Ok(Ty::I64),
            Some(Tok::Ident(s)) if s == "ptr" => Ok(Ty::Ptr),
            _ => err(self.line, col, "expected a type (i64 or ptr)"),
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expect_done(&self) -> Result<(), ParseError> {
        if self.done() {
            Ok(())
        } else {
            err(self.line, self.col(), "trailing tokens")
        }
    }
}

struct FuncHeader {
    name: String,
    params: Vec<(String, Ty)>,
    ret: Option<Ty>,
    body: Vec<usize>, // line indices of the body
}

/// Parses and verifies a whole program.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut lexed = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        lexed.push(lex_line(line, i + 1)?);
    }

    let mut externs: Vec<ExternDecl> = Vec::new();
    let mut headers: Vec<FuncHeader> = Vec::new();
    let mut i = 0;
    while i < lexed.len() {
        let toks = &lexed[i];
        if toks.is_empty() {
            i += 1;
            continue;
        }
        let mut cur = Cursor::new(toks, i + 1);
        match cur.peek() {
            Some(Tok::Ident(kw)) if kw == "extern" => {
                cur.next();
                let name = cur.global_name()?;
                cur.expect(Tok::LParen, "'('")?;
                let mut params = Vec::new();
                if cur.peek() != Some(&Tok::RParen) {
                    loop {
                        params.push(cur.ty()?);
                        if cur.peek() == Some(&Tok::Comma) {
                            cur.next();
                        } else {
                            break;
                        }
                    }
                }
                cur.expect(Tok::RParen, "')'")?;
                let ret = if cur.peek() == Some(&Tok::Arrow) {
                    cur.next();
                    Some(cur.ty()?)
                } else {
                    None
                };
                cur.expect_done()?;
                externs.push(ExternDecl { name, params, ret });
                i += 1;
            }
            Some(Tok::Ident(kw)) if kw == "func" => {
                cur.next();
                let name = cur.global_name()?;
                cur.expect(Tok::LParen, "'('")?;
                let mut params = Vec::new();
                if cur.peek() != Some(&Tok::RParen) {
                    loop {
                        let pname = cur.value_name()?;
                        cur.expect(Tok::Colon, "':'")?;
                        let pty = cur.ty()?;
                        params.push((pname, pty));
                        if cur.peek() == Some(&Tok::Comma) {
                            cur.next();
                        } else {
                            break;
                        }
                    }
                }
                cur.expect(Tok::RParen, "')'")?;
                let ret = if cur.peek() == Some(&Tok::Arrow) {
                    cur.next();
                    Some(cur.ty()?)
                } else {
                    None
                };
                cur.expect(Tok::LBrace, "'{'")?;
                cur.expect_done()?;
                // Collect body lines until the closing brace.
                let mut body = Vec::new();
                let mut j = i + 1;
                let mut closed = false;
                while j < lexed.len() {
                    let t = &lexed[j];
                    if t.len() == 1 && t[0].0 == Tok::RBrace {
                        closed = true;
                        break;
                    }
                    if !t.is_empty() {
                        body.push(j);
                    }
                    j += 1;
                }
                if !closed {
                    return err(i + 1, 1, format!("function @{name} is missing '}}'"));
                }
                headers.push(FuncHeader {
                    name,
                    params,
                    ret,
                    body,
                });
                i = j + 1;
            }
            _ => return err(i + 1, cur.col(), "expected 'extern' or 'func'"),
        }
    }

    // Signature table for call result types.
    let mut signatures: BTreeMap<String, (Vec<Ty>, Option<Ty>, bool)> = BTreeMap::new();
    for e in &externs {
        signatures.insert(e.name.clone(), (e.params.clone(), e.ret, true));
    }
    for h in &headers {
        let tys = h.params.iter().map(|(_, t)| *t).collect();
        signatures.insert(h.name.clone(), (tys, h.ret, false));
    }

    let mut program = Program {
        externs,
        functions: Vec::new(),
    };
    for h in &headers {
        let f = parse_function(h, &lexed, &signatures)?;
        program.functions.push(f);
    }
    verify_program(&program)?;
    Ok(program)
}

fn result_ty_of(
    op: &str,
    cur: &mut Cursor,
    signatures: &BTreeMap<String, (Vec<Ty>, Option<Ty>, bool)>,
) -> Result<Option<Ty>, ParseError> {
    // `cur` is positioned right after the mnemonic.
    Ok(match op {
        "const" | "add" | "sub" | "mul" | "icmp" | "ptrtoint" => Some(Ty::I64),
        "halloc" | "hrealloc" | "gep" | "inttoptr" | "translate" => Some(Ty::Ptr),
        "load" | "phi" => Some(cur.ty()?),
        "call" => {
            let callee = cur.global_name()?;
            match signatures.get(&callee) {
                Some((_, ret, _)) => *ret,
                None => match alloc_intrinsic_sig(&callee) {
                    Some((_, ret)) => ret,
                    None => {
                        return err(cur.line, 1, format!("call to unknown function @{callee}"))
                    }
                },
            }
        }
        _ => None,
    })
}

fn parse_function(
    h: &FuncHeader,
    lexed: &[Vec<(Tok, usize)>],
    signatures: &BTreeMap<String, (Vec<Ty>, Option<Ty>, bool)>,
) -> Result<Function, ParseError> {
    let mut f = Function::new(h.name.clone(), h.params.clone(), h.ret);
    let mut values: BTreeMap<String, Value> = BTreeMap::new();
    for &p in &f.params {
        values.insert(f.value_name(p).to_string(), p);
    }

    // Pre-scan: blocks in definition order, then value definitions with
    // their syntactic result types.
    let mut blocks: BTreeMap<String, Block> = BTreeMap::new();
    for &li in &h.body {
        let toks = &lexed[li];
        if toks.len() == 2 && matches!(toks[0].0, Tok::Ident(_)) && toks[1].0 == Tok::Colon {
            if let Tok::Ident(label) = &toks[0].0 {
                if blocks.contains_key(label) {
                    return err(li + 1, toks[0].1, format!("duplicate label {label}"));
                }
                blocks.insert(label.clone(), f.new_block(label.clone()));
            }
        }
    }
    if blocks.is_empty() {
        return err(
            h.body.first().map(|&l| l + 1).unwrap_or(1),
            1,
            format!("function @{} has no blocks", h.name),
        );
    }
    for &li in &h.body {
        let toks = &lexed[li];
        if toks.len() >= 2 && matches!(toks[0].0, Tok::Value(_)) && toks[1].0 == Tok::Eq {
            let Tok::Value(name) = &toks[0].0 else { unreachable!() };
            if values.contains_key(name) {
                return err(li + 1, toks[0].1, format!("value %{name} redefined"));
            }
            let mut cur = Cursor::new(toks, li + 1);
            cur.next();
            cur.next();
            let op = cur.ident("an instruction mnemonic")?;
            let ty = result_ty_of(&op, &mut cur, signatures)?;
            let Some(ty) = ty else {
                return err(li + 1, toks[0].1, format!("'{op}' produces no result"));
            };
            let v = f.new_value(name.clone(), ty, None);
            values.insert(name.clone(), v);
        }
    }

    let lookup_value = |values: &BTreeMap<String, Value>,
                        name: &str,
                        line: usize,
                        col: usize|
     -> Result<Value, ParseError> {
        values.get(name).copied().ok_or_else(|| ParseError::Syntax {
            line,
            col,
            msg: format!("use of undefined value %{name}"),
        })
    };

    let mut current: Option<Block> = None;
    for &li in &h.body {
        let toks = &lexed[li];
        let line = li + 1;
        // Label line?
        if toks.len() == 2 && matches!(toks[0].0, Tok::Ident(_)) && toks[1].0 == Tok::Colon {
            if let Tok::Ident(label) = &toks[0].0 {
                current = Some(blocks[label]);
            }
            continue;
        }
        let Some(block) = current else {
            return err(line, toks[0].1, "instruction before the first label");
        };
        let mut cur = Cursor::new(toks, line);
        let result = if matches!(cur.peek(), Some(Tok::Value(_))) {
            let name = cur.value_name()?;
            cur.expect(Tok::Eq, "'='")?;
            Some(values[&name])
        } else {
            None
        };
        let op = cur.ident("an instruction mnemonic")?;
        let operand = |cur: &mut Cursor| -> Result<Value, ParseError> {
            let col = cur.col();
            let name = cur.value_name()?;
            lookup_value(&values, &name, line, col)
        };
        let block_ref = |cur: &mut Cursor| -> Result<Block, ParseError> {
            let col = cur.col();
            let name = cur.ident("a block label")?;
            blocks.get(&name).copied().ok_or_else(|| ParseError::Syntax {
                line,
                col,
                msg: format!("unknown block label {name}"),
            })
        };
        let kind = match op.as_str() {
            "const" => {
                let col = cur.col();
                match cur.next() {
                    Some(Tok::Int(n)) => InstKind::Const(n),
                    _ => return err(line, col, "expected an integer literal"),
                }
            }
            "add" | "sub" | "mul" => {
                let lhs = operand(&mut cur)?;
                cur.expect(Tok::Comma, "','")?;
                let rhs = operand(&mut cur)?;
                let op = match op.as_str() {
                    "add" => BinOp::Add,
                    "sub" => BinOp::Sub,
                    _ => BinOp::Mul,
                };
                InstKind::Bin { op, lhs, rhs }
            }
            "icmp" => {
                let col = cur.col();
                let pred = match cur.ident("a comparison predicate")?.as_str() {
                    "eq" => Pred::Eq,
                    "ne" => Pred::Ne,
                    "slt" => Pred::Slt,
                    "sle" => Pred::Sle,
                    "sgt" => Pred::Sgt,
                    "sge" => Pred::Sge,
                    other => return err(line, col, format!("unknown predicate {other}")),
                };
                let lhs = operand(&mut cur)?;
                cur.expect(Tok::Comma, "','")?;
                let rhs = operand(&mut cur)?;
                InstKind::Icmp { pred, lhs, rhs }
            }
            "halloc" => InstKind::Halloc {
                size: operand(&mut cur)?,
            },
            "hfree" => InstKind::Hfree {
                ptr: operand(&mut cur)?,
            },
            "hrealloc" => {
                let ptr = operand(&mut cur)?;
                cur.expect(Tok::Comma, "','")?;
                let size = operand(&mut cur)?;
                InstKind::Hrealloc { ptr, size }
            }
            "load" => {
                let ty = cur.ty()?;
                cur.expect(Tok::Comma, "','")?;
                InstKind::Load {
                    ty,
                    addr: operand(&mut cur)?,
                }
            }
            "store" => {
                let addr = operand(&mut cur)?;
                cur.expect(Tok::Comma, "','")?;
                let value = operand(&mut cur)?;
                InstKind::Store { addr, value }
            }
            "gep" => {
                let base = operand(&mut cur)?;
                cur.expect(Tok::Comma, "','")?;
                let offset = operand(&mut cur)?;
                InstKind::Gep { base, offset }
            }
            "phi" => {
                let ty = cur.ty()?;
                let mut incomings = Vec::new();
                loop {
                    cur.expect(Tok::LBracket, "'['")?;
                    let v = operand(&mut cur)?;
                    cur.expect(Tok::Comma, "','")?;
                    let b = block_ref(&mut cur)?;
                    cur.expect(Tok::RBracket, "']'")?;
                    incomings.push((b, v));
                    if cur.peek() == Some(&Tok::Comma) {
                        cur.next();
                    } else {
                        break;
                    }
                }
                InstKind::Phi { ty, incomings }
            }
            "call" => {
                let callee = cur.global_name()?;
                cur.expect(Tok::LParen, "'('")?;
                let mut args = Vec::new();
                if cur.peek() != Some(&Tok::RParen) {
                    loop {
                        args.push(operand(&mut cur)?);
                        if cur.peek() == Some(&Tok::Comma) {
                            cur.next();
                        } else {
                            break;
                        }
                    }
                }
                cur.expect(Tok::RParen, "')'")?;
                let external = signatures
                    .get(&callee)
                    .map(|(_, _, ext)| *ext)
                    .unwrap_or(false);
                InstKind::Call {
                    callee,
                    args,
                    external,
                }
            }
            "ptrtoint" => InstKind::PtrToInt {
                value: operand(&mut cur)?,
            },
            "inttoptr" => InstKind::IntToPtr {
                value: operand(&mut cur)?,
            },
            "translate" => InstKind::Translate {
                ptr: operand(&mut cur)?,
            },
            "release" => InstKind::Release {
                translation: operand(&mut cur)?,
            },
            "safepoint" => InstKind::Safepoint,
            "br" => InstKind::Br {
                target: block_ref(&mut cur)?,
            },
            "cond_br" => {
                let cond = operand(&mut cur)?;
                cur.expect(Tok::Comma, "','")?;
                let then_dest = block_ref(&mut cur)?;
                cur.expect(Tok::Comma, "','")?;
                let else_dest = block_ref(&mut cur)?;
                InstKind::CondBr {
                    cond,
                    then_dest,
                    else_dest,
                }
            }
            "ret" => InstKind::Ret {
                value: if cur.done() {
                    None
                } else {
                    Some(operand(&mut cur)?)
                },
            },
            other => return err(line, 1, format!("unknown instruction '{other}'")),
        };
        cur.expect_done()?;
        f.attach_inst(block, kind, result);
    }
    Ok(f)
}
