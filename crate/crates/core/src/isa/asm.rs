//! Two-pass assembler and a disassembler whose output re-assembles to the
//! same bytes.
//!
//! Grammar, one statement per line:
//!
//! ```text
//! line      := { label ':' } [ directive | instruction ] [ ';' comment ]
//! directive := .org expr | .align expr | .space expr
//!            | .word expr {, expr} | .byte expr {, expr}
//!            | .ascii "text"                 ; NUL-terminated
//!            | .stack expr                   ; initial SP (header word 0)
//!            | .vector expr, expr            ; IVT[irq] = handler
//!            | .ram expr                     ; RAM size in bytes
//!            | .equ name, expr
//! operand   := rN | sp | lr | pc | [#]expr | '[' rN [ (+|-) expr ] ']'
//! expr      := term { (+|-) term }
//! term      := number | 'c' | name | '.'
//! ```
//!
//! Numbers are decimal or `0x` hex. `.` is the address of the current
//! statement. Branch, `JAL` and `CALL` operands are absolute target addresses.
//! Pseudo-instructions: `LI rd, expr` and `LA rd, expr` (always `LDI` + `MOVHI`),
//! `CALL target` (= `JAL`), `RET` (= `JR r14`) and `B target` (= `BAL`).
//! Assembly starts right after the header at [`ENTRY`].

use std::collections::{BTreeMap, HashMap};

use super::image::{FirmwareImage, DEFAULT_RAM_SIZE, ENTRY, HEADER_BYTES, IVT_LEN, RAM_BASE};
use super::{AluOp, Cond, Instruction, Operand, Width, IMM_MAX, IMM_MIN, LR};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unresolved label `{0}`")]
    Unresolved(String),
    #[error("immediate {0} out of range")]
    Range(i64),
    #[error("duplicate label `{0}`")]
    Duplicate(String),
    #[error("unknown mnemonic `{0}`")]
    Mnemonic(String),
}

fn syntax<T>(line: usize, msg: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError { line, kind: AsmErrorKind::Syntax(msg.into()) })
}

#[derive(Debug, Clone)]
enum Expr {
    Num(i64),
    Sym(String),
    Here,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone)]
enum Arg {
    Reg(u8),
    Imm(Expr),
    Mem(u8, Expr),
}

#[derive(Debug, Clone)]
enum Stmt {
    Insn { mnemonic: String, args: Vec<Arg> },
    Word(Vec<Expr>),
    Byte(Vec<Expr>),
    Ascii(Vec<u8>),
    Org(Expr),
    Align(Expr),
    Space(Expr),
    Stack(Expr),
    Vector(Expr, Expr),
    Ram(Expr),
    Equ(String, Expr),
}

struct Parsed {
    line: usize,
    labels: Vec<String>,
    stmt: Option<Stmt>,
}

/// Strips a trailing `;` or `//` comment, honouring quotes.
fn strip_comment(s: &str) -> &str {
    let b = s.as_bytes();
    let mut in_str = false;
    let mut in_chr = false;
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'\\' if in_str || in_chr => i += 1,
            b'"' if !in_chr => in_str = !in_str,
            b'\'' if !in_str => in_chr = !in_chr,
            b';' if !in_str && !in_chr => return &s[..i],
            b'/' if !in_str && !in_chr && b.get(i + 1) == Some(&b'/') => return &s[..i],
            _ => {}
        }
        i += 1;
    }
    s
}

/// Splits on top-level commas.
fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0;
    let mut in_str = false;
    let mut in_chr = false;
    let mut esc = false;
    for ch in s.chars() {
        if esc {
            cur.push(ch);
            esc = false;
            continue;
        }
        match ch {
            '\\' if in_str || in_chr => esc = true,
            '"' if !in_chr => in_str = !in_str,
            '\'' if !in_str => in_chr = !in_chr,
            '[' | '(' if !in_str && !in_chr => depth += 1,
            ']' | ')' if !in_str && !in_chr => depth -= 1,
            ',' if depth == 0 && !in_str && !in_chr => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn unescape(ch: char) -> Option<u8> {
    Some(match ch {
        'n' => b'\n',
        'r' => b'\r',
        't' => b'\t',
        '0' => 0,
        '\\' => b'\\',
        '"' => b'"',
        '\'' => b'\'',
        _ => return None,
    })
}

fn parse_string(s: &str, line: usize) -> Result<Vec<u8>, AsmError> {
    let s = s.trim();
    if s.len() < 2 || !s.starts_with('"') || !s.ends_with('"') {
        return syntax(line, "expected quoted string");
    }
    let inner: Vec<char> = s[1..s.len() - 1].chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < inner.len() {
        let c = inner[i];
        if c == '\\' {
            let Some(&e) = inner.get(i + 1) else {
                return syntax(line, "dangling escape");
            };
            if e == 'x' {
                let hex: String = inner.iter().skip(i + 2).take(2).collect();
                let v = u8::from_str_radix(&hex, 16)
                    .or_else(|_| syntax(line, format!("bad \\x escape `{hex}`")))?;
                out.push(v);
                i += 4;
                continue;
            }
            match unescape(e) {
                Some(v) => out.push(v),
                None => return syntax(line, format!("unknown escape \\{e}")),
            }
            i += 2;
        } else {
            if !c.is_ascii() {
                return syntax(line, "non-ASCII character in string");
            }
            out.push(c as u8);
            i += 1;
        }
    }
    Ok(out)
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident(s: &str) -> bool {
    let mut it = s.chars();
    matches!(it.next(), Some(c) if is_ident_start(c))
        && it.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_term(s: &str, line: usize) -> Result<Expr, AsmError> {
    let s = s.trim();
    if s == "." {
        return Ok(Expr::Here);
    }
    if s.starts_with('\'') {
        let inner: Vec<char> = s.trim_matches('\'').chars().collect();
        if !s.ends_with('\'') || s.len() < 3 {
            return syntax(line, format!("bad character literal {s}"));
        }
        let v = match inner.as_slice() {
            [c] if c.is_ascii() => *c as u8,
            ['\\', e] => unescape(*e).ok_or_else(|| AsmError {
                line,
                kind: AsmErrorKind::Syntax(format!("bad escape in {s}")),
            })?,
            _ => return syntax(line, format!("bad character literal {s}")),
        };
        return Ok(Expr::Num(v as i64));
    }
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return i64::from_str_radix(&h.replace('_', ""), 16)
            .map(Expr::Num)
            .or_else(|_| syntax(line, format!("bad hex number {s}")));
    }
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        return s
            .replace('_', "")
            .parse::<i64>()
            .map(Expr::Num)
            .or_else(|_| syntax(line, format!("bad number {s}")));
    }
    if is_ident(s) {
        return Ok(Expr::Sym(s.to_string()));
    }
    syntax(line, format!("bad expression `{s}`"))
}

fn parse_expr(s: &str, line: usize) -> Result<Expr, AsmError> {
    let s = s.trim();
    if s.is_empty() {
        return syntax(line, "empty expression");
    }
    // Split on top-level + and -, keeping a leading sign with the first term.
    let bytes = s.as_bytes();
    let mut terms: Vec<(bool, &str)> = Vec::new();
    let mut start = 0;
    let mut neg = false;
    let mut in_chr = false;
    let mut i = 0;
    if bytes[0] == b'-' || bytes[0] == b'+' {
        neg = bytes[0] == b'-';
        start = 1;
        i = 1;
    }
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\'' {
            in_chr = !in_chr;
        } else if c == b'\\' && in_chr {
            i += 1;
        } else if !in_chr && (c == b'+' || c == b'-') && i > start {
            terms.push((neg, &s[start..i]));
            neg = c == b'-';
            start = i + 1;
        }
        i += 1;
    }
    terms.push((neg, &s[start..]));
    let mut acc: Option<Expr> = None;
    for (neg, t) in terms {
        let term = parse_term(t, line)?;
        acc = Some(match (acc, neg) {
            (None, false) => term,
            (None, true) => Expr::Sub(Box::new(Expr::Num(0)), Box::new(term)),
            (Some(a), false) => Expr::Add(Box::new(a), Box::new(term)),
            (Some(a), true) => Expr::Sub(Box::new(a), Box::new(term)),
        });
    }
    Ok(acc.unwrap())
}

fn parse_reg(s: &str) -> Option<u8> {
    let l = s.trim().to_ascii_lowercase();
    match l.as_str() {
        "sp" => return Some(13),
        "lr" => return Some(14),
        "pc" => return Some(15),
        _ => {}
    }
    let n = l.strip_prefix('r')?;
    if n.is_empty() || !n.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    n.parse::<u8>().ok().filter(|&r| r < 16)
}

fn parse_arg(s: &str, line: usize) -> Result<Arg, AsmError> {
    let s = s.trim();
    if let Some(r) = parse_reg(s) {
        return Ok(Arg::Reg(r));
    }
    if let Some(inner) = s.strip_prefix('[') {
        let Some(inner) = inner.strip_suffix(']') else {
            return syntax(line, "unterminated memory operand");
        };
        let inner = inner.trim();
        let split = inner.find(['+', '-']);
        let (base, off) = match split {
            Some(i) => (&inner[..i], Some(&inner[i..])),
            None => (inner, None),
        };
        let Some(b) = parse_reg(base) else {
            return syntax(line, format!("bad base register `{base}`"));
        };
        let off = match off {
            Some(o) => parse_expr(o, line)?,
            None => Expr::Num(0),
        };
        return Ok(Arg::Mem(b, off));
    }
    let e = s.strip_prefix('#').unwrap_or(s);
    Ok(Arg::Imm(parse_expr(e, line)?))
}

fn parse_line(raw: &str, line: usize) -> Result<Parsed, AsmError> {
    let mut rest = strip_comment(raw).trim();
    let mut labels = Vec::new();
    // Leading `name:` labels; a colon inside quotes is not a label.
    while let Some(i) = rest.find(':') {
        let cand = rest[..i].trim();
        if is_ident(cand) && !cand.contains(' ') {
            labels.push(cand.to_string());
            rest = rest[i + 1..].trim();
        } else {
            break;
        }
    }
    if rest.is_empty() {
        return Ok(Parsed { line, labels, stmt: None });
    }
    let (head, tail) = match rest.find(char::is_whitespace) {
        Some(i) => (&rest[..i], rest[i..].trim()),
        None => (rest, ""),
    };
    let args = split_args(tail);
    let exprs = |args: &[String]| -> Result<Vec<Expr>, AsmError> {
        args.iter().map(|a| parse_expr(a, line)).collect()
    };
    let one = |args: &[String], what: &str| -> Result<Expr, AsmError> {
        if args.len() != 1 {
            return syntax(line, format!("{what} takes one operand"));
        }
        parse_expr(&args[0], line)
    };
    let stmt = if let Some(d) = head.strip_prefix('.') {
        match d.to_ascii_lowercase().as_str() {
            "org" => Stmt::Org(one(&args, ".org")?),
            "align" => Stmt::Align(one(&args, ".align")?),
            "space" => Stmt::Space(one(&args, ".space")?),
            "stack" => Stmt::Stack(one(&args, ".stack")?),
            "ram" => Stmt::Ram(one(&args, ".ram")?),
            "word" => Stmt::Word(exprs(&args)?),
            "byte" => Stmt::Byte(exprs(&args)?),
            "ascii" => Stmt::Ascii(parse_string(tail, line)?),
            "vector" => {
                if args.len() != 2 {
                    return syntax(line, ".vector takes irq, handler");
                }
                Stmt::Vector(parse_expr(&args[0], line)?, parse_expr(&args[1], line)?)
            }
            "equ" => {
                if args.len() != 2 || !is_ident(&args[0]) {
                    return syntax(line, ".equ takes name, value");
                }
                Stmt::Equ(args[0].clone(), parse_expr(&args[1], line)?)
            }
            other => return syntax(line, format!("unknown directive .{other}")),
        }
    } else {
        let args = args
            .iter()
            .map(|a| parse_arg(a, line))
            .collect::<Result<Vec<_>, _>>()?;
        Stmt::Insn { mnemonic: head.to_ascii_uppercase(), args }
    };
    Ok(Parsed { line, labels, stmt: Some(stmt) })
}

fn insn_size(mnemonic: &str) -> u32 {
    match mnemonic {
        "LI" | "LA" => 8,
        _ => 4,
    }
}

struct Ctx<'a> {
    labels: &'a HashMap<String, u32>,
    equs: &'a HashMap<String, Expr>,
    here: u32,
    line: usize,
}

impl Ctx<'_> {
    fn eval(&self, e: &Expr) -> Result<i64, AsmError> {
        self.eval_depth(e, 0)
    }

    fn eval_depth(&self, e: &Expr, depth: usize) -> Result<i64, AsmError> {
        if depth > 64 {
            return syntax(self.line, "recursive .equ");
        }
        Ok(match e {
            Expr::Num(n) => *n,
            Expr::Here => self.here as i64,
            Expr::Add(a, b) => self.eval_depth(a, depth + 1)? + self.eval_depth(b, depth + 1)?,
            Expr::Sub(a, b) => self.eval_depth(a, depth + 1)? - self.eval_depth(b, depth + 1)?,
            Expr::Sym(s) => {
                if let Some(&a) = self.labels.get(s) {
                    a as i64
                } else if let Some(x) = self.equs.get(s) {
                    self.eval_depth(x, depth + 1)?
                } else {
                    return Err(AsmError { line: self.line, kind: AsmErrorKind::Unresolved(s.clone()) });
                }
            }
        })
    }

    fn imm18(&self, e: &Expr) -> Result<i32, AsmError> {
        let v = self.eval(e)?;
        if v < IMM_MIN as i64 || v > IMM_MAX as i64 {
            return Err(AsmError { line: self.line, kind: AsmErrorKind::Range(v) });
        }
        Ok(v as i32)
    }

    fn word(&self, e: &Expr) -> Result<u32, AsmError> {
        let v = self.eval(e)?;
        if v < i32::MIN as i64 || v > u32::MAX as i64 {
            return Err(AsmError { line: self.line, kind: AsmErrorKind::Range(v) });
        }
        Ok(v as u32)
    }

    fn rel(&self, e: &Expr) -> Result<i32, AsmError> {
        let target = self.eval(e)?;
        // Addresses wrap at 32 bits, so `.-N` near zero round-trips.
        let off = (target as u32).wrapping_sub(self.here) as i32 as i64;
        if off % 4 != 0 {
            return syntax(self.line, format!("branch target {target:#x} misaligned"));
        }
        if off < IMM_MIN as i64 || off > IMM_MAX as i64 {
            return Err(AsmError { line: self.line, kind: AsmErrorKind::Range(off) });
        }
        Ok(off as i32)
    }
}

fn encode_insn(mnemonic: &str, args: &[Arg], cx: &Ctx) -> Result<Vec<Instruction>, AsmError> {
    use Instruction as I;
    let line = cx.line;
    let bad = || -> Result<Vec<Instruction>, AsmError> {
        syntax(line, format!("bad operands for {mnemonic}"))
    };
    let alu = |op: AluOp| -> Option<AluOp> { Some(op) };
    let alu_op = match mnemonic {
        "ADD" => alu(AluOp::Add),
        "SUB" => alu(AluOp::Sub),
        "AND" => alu(AluOp::And),
        "OR" => alu(AluOp::Or),
        "XOR" => alu(AluOp::Xor),
        "SHL" => alu(AluOp::Shl),
        "SHR" => alu(AluOp::Shr),
        _ => None,
    };
    if let Some(op) = alu_op {
        return match args {
            [Arg::Reg(rd), Arg::Reg(rs1), Arg::Reg(rs2)] => {
                Ok(vec![I::Alu { op, rd: *rd, rs1: *rs1, src: Operand::Reg(*rs2) }])
            }
            [Arg::Reg(rd), Arg::Reg(rs1), Arg::Imm(e)] => {
                Ok(vec![I::Alu { op, rd: *rd, rs1: *rs1, src: Operand::Imm(cx.imm18(e)?) }])
            }
            _ => bad(),
        };
    }
    let cond = match mnemonic {
        "BEQ" => Some(Cond::Eq),
        "BNE" => Some(Cond::Ne),
        "BLT" => Some(Cond::Lt),
        "BGE" => Some(Cond::Ge),
        "BLTU" => Some(Cond::Ltu),
        "BGEU" => Some(Cond::Geu),
        "BAL" | "B" => Some(Cond::Al),
        _ => None,
    };
    if let Some(cond) = cond {
        return match args {
            [Arg::Imm(e)] => Ok(vec![I::Branch { cond, offset: cx.rel(e)? }]),
            _ => bad(),
        };
    }
    Ok(match (mnemonic, args) {
        ("NOP", []) => vec![I::Nop],
        ("HALT", []) => vec![I::Halt],
        ("IRET", []) => vec![I::Iret],
        ("RET", []) => vec![I::Jr { rs: LR }],
        ("LDI", [Arg::Reg(rd), Arg::Imm(e)]) => vec![I::Ldi { rd: *rd, imm: cx.imm18(e)? }],
        ("MOVHI", [Arg::Reg(rd), Arg::Imm(e)]) => {
            let v = cx.eval(e)?;
            if !(0..=0xffff).contains(&v) {
                return Err(AsmError { line, kind: AsmErrorKind::Range(v) });
            }
            vec![I::Movhi { rd: *rd, imm: v as u16 }]
        }
        ("LI" | "LA", [Arg::Reg(rd), Arg::Imm(e)]) => {
            let v = cx.word(e)?;
            vec![
                I::Ldi { rd: *rd, imm: (v & 0xffff) as i32 },
                I::Movhi { rd: *rd, imm: (v >> 16) as u16 },
            ]
        }
        ("MOV", [Arg::Reg(rd), Arg::Reg(rs)]) => vec![I::Mov { rd: *rd, rs: *rs }],
        ("LDB" | "LDW", [Arg::Reg(rd), Arg::Mem(base, off)]) => vec![I::Load {
            width: if mnemonic == "LDB" { Width::Byte } else { Width::Word },
            rd: *rd,
            base: *base,
            offset: cx.imm18(off)?,
        }],
        ("STB" | "STW", [Arg::Reg(src), Arg::Mem(base, off)]) => vec![I::Store {
            width: if mnemonic == "STB" { Width::Byte } else { Width::Word },
            src: *src,
            base: *base,
            offset: cx.imm18(off)?,
        }],
        ("CMP", [Arg::Reg(a), Arg::Reg(b)]) => vec![I::Cmp { rs1: *a, src: Operand::Reg(*b) }],
        ("CMP", [Arg::Reg(a), Arg::Imm(e)]) => vec![I::Cmp { rs1: *a, src: Operand::Imm(cx.imm18(e)?) }],
        ("JAL" | "CALL", [Arg::Imm(e)]) => vec![I::Jal { offset: cx.rel(e)? }],
        ("JR", [Arg::Reg(rs)]) => vec![I::Jr { rs: *rs }],
        (
            "NOP" | "HALT" | "IRET" | "RET" | "LDI" | "MOVHI" | "LI" | "LA" | "MOV" | "LDB" | "LDW" | "STB"
            | "STW" | "CMP" | "JAL" | "CALL" | "JR",
            _,
        ) => return bad(),
        (other, _) => return Err(AsmError { line, kind: AsmErrorKind::Mnemonic(other.to_string()) }),
    })
}

/// Assembles MiniMCU source into an image with no stateless models.
pub fn assemble(source: &str) -> Result<FirmwareImage, AsmError> {
    let parsed = source
        .lines()
        .enumerate()
        .map(|(i, l)| parse_line(l, i + 1))
        .collect::<Result<Vec<_>, _>>()?;

    // Pass 1: addresses. Every statement's size is independent of symbol values
    // except .org/.align/.space, whose operands must only use .equ constants.
    let mut labels: HashMap<String, u32> = HashMap::new();
    let mut equs: HashMap<String, Expr> = HashMap::new();
    for p in &parsed {
        if let Some(Stmt::Equ(n, e)) = &p.stmt {
            equs.insert(n.clone(), e.clone());
        }
    }
    let no_labels = HashMap::new();
    let mut pc = ENTRY;
    let mut addrs = Vec::with_capacity(parsed.len());
    for p in &parsed {
        let cx = Ctx { labels: &no_labels, equs: &equs, here: pc, line: p.line };
        // .org resolves before its own labels so `name: .org X` labels X.
        if let Some(Stmt::Org(e)) = &p.stmt {
            let target = cx.word(e)?;
            if target < pc {
                return syntax(p.line, format!(".org {target:#x} moves backwards from {pc:#x}"));
            }
            pc = target;
        }
        if let Some(Stmt::Align(e)) = &p.stmt {
            let a = cx.word(e)?.max(1);
            pc = pc.div_ceil(a) * a;
        }
        for l in &p.labels {
            if labels.insert(l.clone(), pc).is_some() || equs.contains_key(l) {
                return Err(AsmError { line: p.line, kind: AsmErrorKind::Duplicate(l.clone()) });
            }
        }
        addrs.push(pc);
        pc += match &p.stmt {
            Some(Stmt::Insn { mnemonic, .. }) => insn_size(mnemonic),
            Some(Stmt::Word(v)) => 4 * v.len() as u32,
            Some(Stmt::Byte(v)) => v.len() as u32,
            Some(Stmt::Ascii(s)) => s.len() as u32 + 1,
            Some(Stmt::Space(e)) => cx.word(e)?,
            _ => 0,
        };
    }

    // Pass 2: bytes.
    let mut code = vec![0u8; HEADER_BYTES as usize];
    let mut ram_size = DEFAULT_RAM_SIZE;
    let mut stack: Option<u32> = None;
    let mut vectors: Vec<(usize, u32)> = Vec::new();
    let put = |code: &mut Vec<u8>, at: u32, bytes: &[u8]| {
        let end = at as usize + bytes.len();
        if code.len() < end {
            code.resize(end, 0);
        }
        code[at as usize..end].copy_from_slice(bytes);
    };
    for (p, &at) in parsed.iter().zip(&addrs) {
        let cx = Ctx { labels: &labels, equs: &equs, here: at, line: p.line };
        match &p.stmt {
            None | Some(Stmt::Equ(..)) | Some(Stmt::Org(_)) | Some(Stmt::Align(_)) => {
                if code.len() < at as usize {
                    code.resize(at as usize, 0);
                }
            }
            Some(Stmt::Space(e)) => {
                let n = cx.word(e)?;
                put(&mut code, at, &vec![0u8; n as usize]);
            }
            Some(Stmt::Word(v)) => {
                for (i, e) in v.iter().enumerate() {
                    put(&mut code, at + 4 * i as u32, &cx.word(e)?.to_le_bytes());
                }
            }
            Some(Stmt::Byte(v)) => {
                for (i, e) in v.iter().enumerate() {
                    let x = cx.eval(e)?;
                    if !(-128..=255).contains(&x) {
                        return Err(AsmError { line: p.line, kind: AsmErrorKind::Range(x) });
                    }
                    put(&mut code, at + i as u32, &[x as u8]);
                }
            }
            Some(Stmt::Ascii(s)) => {
                let mut b = s.clone();
                b.push(0);
                put(&mut code, at, &b);
            }
            Some(Stmt::Stack(e)) => stack = Some(cx.word(e)?),
            Some(Stmt::Ram(e)) => ram_size = cx.word(e)?,
            Some(Stmt::Vector(i, h)) => {
                let irq = cx.eval(i)?;
                if !(0..IVT_LEN as i64).contains(&irq) {
                    return Err(AsmError { line: p.line, kind: AsmErrorKind::Range(irq) });
                }
                vectors.push((irq as usize, cx.word(h)?));
            }
            Some(Stmt::Insn { mnemonic, args }) => {
                if at % 4 != 0 {
                    return syntax(p.line, format!("instruction at unaligned address {at:#x}"));
                }
                let insns = encode_insn(mnemonic, args, &cx)?;
                for (k, insn) in insns.iter().enumerate() {
                    let w = insn.encode().map_err(|e| AsmError {
                        line: p.line,
                        kind: AsmErrorKind::Syntax(e.to_string()),
                    })?;
                    put(&mut code, at + 4 * k as u32, &w.to_le_bytes());
                }
            }
        }
    }
    let sp = stack.unwrap_or(RAM_BASE + ram_size);
    code[0..4].copy_from_slice(&sp.to_le_bytes());
    for (irq, h) in vectors {
        let o = 4 + 4 * irq;
        code[o..o + 4].copy_from_slice(&h.to_le_bytes());
    }
    let symbols: BTreeMap<String, u32> = labels.into_iter().collect();
    Ok(FirmwareImage { code, ram_size, symbols, stateless_models: BTreeMap::new() })
}

fn disasm_insn(insn: &Instruction, at: u32) -> String {
    match *insn {
        Instruction::Branch { cond, offset } => {
            format!("B{} {:#010x}", cond.suffix(), at.wrapping_add(offset as u32))
        }
        Instruction::Jal { offset } => format!("JAL {:#010x}", at.wrapping_add(offset as u32)),
        other => other.to_string(),
    }
}

/// Renders an image as assembly that re-assembles to identical code bytes.
pub fn disassemble(image: &FirmwareImage) -> String {
    let mut out = String::new();
    out.push_str(&format!(".ram {:#x}\n", image.ram_size));
    out.push_str(&format!(".stack {:#010x}\n", image.initial_sp()));
    for i in 0..IVT_LEN {
        let v = image.ivt(i);
        if v != 0 {
            out.push_str(&format!(".vector {i}, {v:#010x}\n"));
        }
    }
    let code = &image.code;
    let mut at = ENTRY as usize;
    while at + 4 <= code.len() {
        let w = u32::from_le_bytes(code[at..at + 4].try_into().unwrap());
        let text = match Instruction::decode(w) {
            Ok(i) => disasm_insn(&i, at as u32),
            Err(_) => format!(".word {w:#010x}"),
        };
        out.push_str(&format!("    {text:<28} ; {at:08x}\n"));
        at += 4;
    }
    if at < code.len() {
        let tail: Vec<String> = code[at..].iter().map(|b| format!("{b:#04x}")).collect();
        out.push_str(&format!("    .byte {}\n", tail.join(", ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::testgen::any_instruction;
    use proptest::prelude::*;

    fn code_words(img: &FirmwareImage) -> Vec<u32> {
        img.code[ENTRY as usize..]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    #[test]
    fn nop_single_word() {
        let img = assemble("NOP").unwrap();
        assert_eq!(code_words(&img), vec![0]);
        assert_eq!(Instruction::decode(0).unwrap(), Instruction::Nop);
    }

    #[test]
    fn ascii_is_nul_terminated() {
        let img = assemble("s: .ascii \"steer\"").unwrap();
        let at = img.symbol("s").unwrap() as usize;
        assert_eq!(&img.code[at..at + 6], &[0x73, 0x74, 0x65, 0x65, 0x72, 0x00]);
    }

    #[test]
    fn escapes_and_chars() {
        let img = assemble("s: .ascii \"OK\\r\\n\"\n.align 4\nCMP r1, #'\\n'").unwrap();
        let at = img.symbol("s").unwrap() as usize;
        assert_eq!(&img.code[at..at + 5], b"OK\r\n\0");
        let w = img.word(at as u32 + 8).unwrap();
        assert_eq!(
            Instruction::decode(w).unwrap(),
            Instruction::Cmp { rs1: 1, src: Operand::Imm(10) }
        );
    }

    #[test]
    fn labels_and_branches() {
        let src = "start: CMP r1, r2\n BEQ done\n NOP\ndone: HALT\n";
        let img = assemble(src).unwrap();
        assert_eq!(img.symbol("start"), Some(ENTRY));
        assert_eq!(img.symbol("done"), Some(ENTRY + 12));
        let w = img.word(ENTRY + 4).unwrap();
        assert_eq!(Instruction::decode(w).unwrap(), Instruction::Branch { cond: Cond::Eq, offset: 8 });
    }

    #[test]
    fn li_expands_to_two_words() {
        let img = assemble(".equ UART, 0x40000818\nLI r1, UART").unwrap();
        let w = code_words(&img);
        assert_eq!(Instruction::decode(w[0]).unwrap(), Instruction::Ldi { rd: 1, imm: 0x0818 });
        assert_eq!(Instruction::decode(w[1]).unwrap(), Instruction::Movhi { rd: 1, imm: 0x4000 });
    }

    #[test]
    fn error_reporting() {
        let e = assemble("NOP\nFOO r1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, AsmErrorKind::Mnemonic(_)));
        let e = assemble("NOP\nNOP\nBEQ nowhere\n").unwrap_err();
        assert_eq!(e, AsmError { line: 3, kind: AsmErrorKind::Unresolved("nowhere".into()) });
        let e = assemble("LDI r1, 200000").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::Range(200000)));
        let e = assemble("ADD r1, [r2]").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::Syntax(_)));
        let e = assemble("a: NOP\na: NOP").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::Duplicate(_)));
    }

    #[test]
    fn comments_do_not_eat_strings() {
        let img = assemble("s: .ascii \"a;b\" ; trailing\n").unwrap();
        let at = img.symbol("s").unwrap() as usize;
        assert_eq!(&img.code[at..at + 4], b"a;b\0");
    }

    #[test]
    fn deterministic() {
        let src = "x: LI r1, x\n.ascii \"hi\"\n.align 4\nB x\n";
        assert_eq!(assemble(src).unwrap(), assemble(src).unwrap());
    }

    fn random_program(insns: &[Instruction]) -> String {
        // Branch/call offsets are rendered as `.+N`, which keeps them position
        // independent for the round trip.
        insns.iter().map(|i| format!("{i}\n")).collect()
    }

    #[test]
    fn thousand_instruction_round_trip() {
        use proptest::strategy::ValueTree;
        use proptest::test_runner::TestRunner;
        let mut runner = TestRunner::deterministic();
        let strat = proptest::collection::vec(any_instruction(), 1000);
        let insns = strat.new_tree(&mut runner).unwrap().current();
        let src = random_program(&insns);
        let a = assemble(&src).unwrap();
        assert_eq!(code_words(&a).len(), 1000);
        for (w, i) in code_words(&a).iter().zip(&insns) {
            assert_eq!(Instruction::decode(*w).unwrap(), *i);
        }
        let text = disassemble(&a);
        let b = assemble(&text).unwrap();
        assert_eq!(a.code, b.code);
        let c = assemble(&disassemble(&b)).unwrap();
        assert_eq!(b.code, c.code);
    }

    proptest! {
        #[test]
        fn assemble_disassemble_assemble(insns in proptest::collection::vec(any_instruction(), 1..40)) {
            let a = assemble(&random_program(&insns)).unwrap();
            let b = assemble(&disassemble(&a)).unwrap();
            prop_assert_eq!(a.code, b.code);
        }
    }
}
