//! Symbolic bit-vector expressions over input bytes.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::isa::{AluOp, Cond};

/// Upper bound on symbolic bytes per state (bit positions in `vars`).
pub const MAX_SYMBOLS: usize = 128;

pub type Sym = Arc<SymExpr>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Kind {
    /// Input byte `k`, 8 bits wide.
    Byte(u16),
    Const(u32),
    /// High part first.
    Concat(Sym, Sym),
    Extract { e: Sym, lo: u8 },
    ZeroExt(Sym),
    /// 32-bit operands.
    Bin(AluOp, Sym, Sym),
}

#[derive(Debug, Clone, Eq)]
pub struct SymExpr {
    pub kind: Kind,
    pub width: u8,
    /// Bit `k` set when `Byte(k)` occurs in the expression.
    pub vars: u128,
    hash: u64,
}

impl PartialEq for SymExpr {
    fn eq(&self, other: &Self) -> bool {
        self.hash == other.hash && self.width == other.width && self.kind == other.kind
    }
}

impl Hash for SymExpr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.hash);
    }
}

#[inline]
pub fn mask(width: u8) -> u32 {
    if width >= 32 {
        u32::MAX
    } else {
        (1u32 << width) - 1
    }
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17)
}

fn node(kind: Kind, width: u8) -> Sym {
    let (vars, hash) = match &kind {
        Kind::Byte(k) => (1u128 << k, mix(1, *k as u64)),
        Kind::Const(v) => (0, mix(2, *v as u64)),
        Kind::Concat(h, l) => (h.vars | l.vars, mix(mix(3, h.hash), l.hash)),
        Kind::Extract { e, lo } => (e.vars, mix(mix(4, e.hash), *lo as u64)),
        Kind::ZeroExt(e) => (e.vars, mix(5, e.hash)),
        Kind::Bin(op, a, b) => (a.vars | b.vars, mix(mix(mix(6, *op as u64), a.hash), b.hash)),
    };
    Arc::new(SymExpr { kind, width, vars, hash: mix(hash, width as u64) })
}

pub fn byte(k: u16) -> Sym {
    assert!((k as usize) < MAX_SYMBOLS, "symbol {k} beyond the supported maximum");
    node(Kind::Byte(k), 8)
}

pub fn konst(v: u32, width: u8) -> Sym {
    node(Kind::Const(v & mask(width)), width)
}

impl SymExpr {
    pub fn as_const(&self) -> Option<u32> {
        match self.kind {
            Kind::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn structural_hash(&self) -> u64 {
        self.hash
    }

    /// Value under `model`, indexed by symbol.
    pub fn eval(&self, model: &[u8]) -> u32 {
        let v = match &self.kind {
            Kind::Byte(k) => model[*k as usize] as u32,
            Kind::Const(v) => *v,
            Kind::Concat(h, l) => (h.eval(model) << l.width) | l.eval(model),
            Kind::Extract { e, lo } => e.eval(model) >> lo,
            Kind::ZeroExt(e) => e.eval(model),
            Kind::Bin(op, a, b) => op.apply(a.eval(model), b.eval(model)),
        };
        v & mask(self.width)
    }
}

pub fn zext(e: Sym, width: u8) -> Sym {
    if e.width == width {
        return e;
    }
    assert!(e.width < width);
    if let Some(v) = e.as_const() {
        return konst(v, width);
    }
    if let Kind::ZeroExt(inner) = &e.kind {
        return zext(Arc::clone(inner), width);
    }
    node(Kind::ZeroExt(e), width)
}

pub fn extract(e: Sym, lo: u8, width: u8) -> Sym {
    assert!(lo as u32 + width as u32 <= e.width as u32);
    if lo == 0 && width == e.width {
        return e;
    }
    if let Some(v) = e.as_const() {
        return konst(v >> lo, width);
    }
    match &e.kind {
        Kind::ZeroExt(x) => {
            if lo + width <= x.width {
                return extract(Arc::clone(x), lo, width);
            }
            if lo >= x.width {
                return konst(0, width);
            }
            if lo == 0 {
                return zext(Arc::clone(x), width);
            }
        }
        Kind::Concat(h, l) => {
            if lo + width <= l.width {
                return extract(Arc::clone(l), lo, width);
            }
            if lo >= l.width {
                return extract(Arc::clone(h), lo - l.width, width);
            }
        }
        Kind::Extract { e: x, lo: lo2 } => return extract(Arc::clone(x), lo + lo2, width),
        // Bitwise results slice per bit; low bits of sums depend on low bits only.
        Kind::Bin(op, a, b)
            if matches!(op, AluOp::And | AluOp::Or | AluOp::Xor) || (lo == 0 && matches!(op, AluOp::Add | AluOp::Sub)) =>
        {
            let na = zext(extract(Arc::clone(a), lo, width), 32);
            let nb = zext(extract(Arc::clone(b), lo, width), 32);
            if !(lo == 0 && na == *a && nb == *b) {
                return extract(bin(*op, na, nb), 0, width);
            }
        }
        _ => {}
    }
    node(Kind::Extract { e, lo }, width)
}

pub fn concat(h: Sym, l: Sym) -> Sym {
    let width = h.width + l.width;
    if let (Some(a), Some(b)) = (h.as_const(), l.as_const()) {
        return konst((a << l.width) | b, width);
    }
    if h.as_const() == Some(0) {
        return zext(l, width);
    }
    // Adjacent slices of one expression.
    if let (Kind::Extract { e: eh, lo: loh }, Kind::Extract { e: el, lo: lol }) = (&h.kind, &l.kind) {
        if eh == el && *lol + l.width == *loh {
            return extract(Arc::clone(el), *lol, width);
        }
    }
    node(Kind::Concat(h, l), width)
}

/// 32-bit ALU operation with constant folding and identities.
pub fn bin(op: AluOp, a: Sym, b: Sym) -> Sym {
    debug_assert!(a.width == 32 && b.width == 32);
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => return konst(op.apply(x, y), 32),
        (_, Some(0)) if matches!(op, AluOp::Add | AluOp::Sub | AluOp::Or | AluOp::Xor | AluOp::Shl | AluOp::Shr) => {
            return a
        }
        (Some(0), _) if matches!(op, AluOp::Add | AluOp::Or | AluOp::Xor) => return b,
        (_, Some(0)) | (Some(0), _) if op == AluOp::And => return konst(0, 32),
        (_, Some(m)) if op == AluOp::And => {
            if m == u32::MAX {
                return a;
            }
            // Masking a zero-extended value that already fits.
            if let Kind::ZeroExt(x) = &a.kind {
                if m & mask(x.width) == mask(x.width) {
                    return a;
                }
            }
        }
        _ => {}
    }
    node(Kind::Bin(op, a, b), 32)
}

/// A register-sized value: concrete or symbolic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Val {
    C(u32),
    S(Sym),
}

impl Val {
    pub fn sym(e: Sym) -> Val {
        match e.as_const() {
            Some(v) => Val::C(v),
            None => Val::S(e),
        }
    }

    pub fn expr(&self) -> Sym {
        match self {
            Val::C(v) => konst(*v, 32),
            Val::S(e) => Arc::clone(e),
        }
    }

    pub fn vars(&self) -> u128 {
        match self {
            Val::C(_) => 0,
            Val::S(e) => e.vars,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self, Val::S(_))
    }

    pub fn eval(&self, model: &[u8]) -> u32 {
        match self {
            Val::C(v) => *v,
            Val::S(e) => e.eval(model),
        }
    }

    pub fn hash_value(&self) -> u64 {
        match self {
            Val::C(v) => *v as u64,
            Val::S(e) => e.hash | 1 << 63,
        }
    }

    pub fn alu(op: AluOp, a: &Val, b: &Val) -> Val {
        match (a, b) {
            (Val::C(x), Val::C(y)) => Val::C(op.apply(*x, *y)),
            _ => Val::sym(bin(op, a.expr(), b.expr())),
        }
    }

    /// Byte `i` (0 = least significant), 8 bits wide.
    pub fn byte(&self, i: u8) -> Sym {
        extract(self.expr(), 8 * i, 8)
    }

    /// A word from four little-endian byte expressions.
    pub fn from_bytes(b: [Sym; 4]) -> Val {
        let [b0, b1, b2, b3] = b;
        Val::sym(concat(b3, concat(b2, concat(b1, b0))))
    }
}

/// `cond` applied to `CMP a, b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub cond: Cond,
    pub a: Val,
    pub b: Val,
}

impl Constraint {
    pub fn vars(&self) -> u128 {
        self.a.vars() | self.b.vars()
    }

    pub fn holds(&self, model: &[u8]) -> bool {
        self.cond.compare(self.a.eval(model), self.b.eval(model))
    }

    pub fn negated(&self) -> Constraint {
        Constraint { cond: self.cond.negate().expect("AL is never symbolic"), a: self.a.clone(), b: self.b.clone() }
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Byte(k) => write!(f, "b{k}"),
            Kind::Const(v) => write!(f, "{v:#x}"),
            Kind::Concat(h, l) => write!(f, "({h} ++ {l})"),
            Kind::Extract { e, lo } => write!(f, "{e}[{}:{lo}]", lo + self.width - 1),
            Kind::ZeroExt(e) => write!(f, "zx{}({e})", self.width),
            Kind::Bin(op, a, b) => write!(f, "({a} {} {b})", op.mnemonic().to_lowercase()),
        }
    }
}

impl fmt::Display for Val {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Val::C(v) => write!(f, "{v:#x}"),
            Val::S(e) => write!(f, "{e}"),
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.a, self.cond.suffix().to_lowercase(), self.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn word_of_bytes_round_trips() {
        let w = Val::from_bytes([byte(0), konst(0, 8), konst(0, 8), konst(0, 8)]);
        assert_eq!(w, Val::S(zext(byte(0), 32)));
        let full = Val::from_bytes([byte(0), byte(1), byte(2), byte(3)]);
        for i in 0..4 {
            assert_eq!(full.byte(i), byte(i as u16));
        }
        assert_eq!(Val::C(0x1234_5678).byte(2).as_const(), Some(0x34));
    }

    #[test]
    fn and_mask_of_byte_is_identity() {
        let b = Val::S(zext(byte(3), 32));
        assert_eq!(Val::alu(AluOp::And, &b, &Val::C(0xff)), b);
    }

    fn arb_expr() -> impl Strategy<Value = Sym> {
        let leaf = prop_oneof![
            (0u16..4).prop_map(|k| zext(byte(k), 32)),
            any::<u32>().prop_map(|v| konst(v, 32)),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (0usize..7, inner.clone(), inner.clone()).prop_map(|(o, a, b)| bin(AluOp::ALL[o], a, b)),
                (inner.clone(), 0u8..4).prop_map(|(e, i)| zext(extract(e, 8 * i, 8), 32)),
                (inner.clone(), inner).prop_map(|(a, b)| concat(extract(a, 0, 16), extract(b, 8, 16))),
            ]
        })
    }

    /// Interprets without any simplification, as a reference.
    fn reference(e: &SymExpr, m: &[u8]) -> u32 {
        let v = match &e.kind {
            Kind::Byte(k) => m[*k as usize] as u32,
            Kind::Const(v) => *v,
            Kind::Concat(h, l) => {
                ((reference(h, m) as u64) << l.width | reference(l, m) as u64) as u32
            }
            Kind::Extract { e, lo } => reference(e, m) >> lo,
            Kind::ZeroExt(e) => reference(e, m),
            Kind::Bin(op, a, b) => op.apply(reference(a, m), reference(b, m)),
        };
        v & mask(e.width)
    }

    proptest! {
        #[test]
        fn byte_split_preserves_value(e in arb_expr(), m in proptest::array::uniform4(any::<u8>())) {
            let v = Val::S(Arc::clone(&e));
            let whole = reference(&e, &m);
            let parts = Val::from_bytes([v.byte(0), v.byte(1), v.byte(2), v.byte(3)]);
            prop_assert_eq!(parts.eval(&m), whole);
            prop_assert_eq!(e.eval(&m), whole);
        }
    }
}
