//! Concrete syntax: lexer, parser, program printer and diagnostics.
//!
//! Declared names are inlined at parse time, so parsed programs contain
//! only closed definitions and no references between them.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::main_core::{check_main, typecheck_main, MainTerm, MainType};
use crate::pure_check::{check_term, check_unitary, typecheck_term, typecheck_unitary, UnitaryType};
use crate::pure_core::{Name, PureTerm, PureType, Scalar, UnitaryExpr};

// ---------------------------------------------------------------------------
// Lexer

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64, bool),
    /// `|n>` or `|x+n>`.
    Ket(usize, Option<String>),
    Sym(&'static str),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(x) => write!(f, "`{x}`"),
            Tok::Num(n, _) => write!(f, "`{n}`"),
            Tok::Ket(n, None) => write!(f, "`|{n}>`"),
            Tok::Ket(n, Some(x)) => write!(f, "`|{x}+{n}>`"),
            Tok::Sym(s) => write!(f, "`{s}`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const SYMBOLS: &[&str] = &[
    "(x)", "(+)", "->", "-o", "(", ")", "[", "]", "{", "}", "|", ";", ":", ",", ".", "\\", "*", "+", "-", "/", "=", "!", "^",
];

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '%'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '\''
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let mut out = Vec::new();
    let err = |m: String, line, col| Error::Syntax { message: m, line, col };
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' || (c == '/' && chars.get(i + 1) == Some(&'/')) {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = (line, col);
        let push = |out: &mut Vec<Token>, tok| out.push(Token { tok, line: start.0, col: start.1 });
        if c == '|' {
            if let Some((tok, len)) = lex_ket(&chars[i..]) {
                push(&mut out, tok);
                i += len;
                col += len;
                continue;
            }
        }
        if c.is_ascii_digit() {
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            let mut integral = true;
            if j + 1 < chars.len() && chars[j] == '.' && chars[j + 1].is_ascii_digit() {
                integral = false;
                j += 1;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
            }
            if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                let mut k = j + 1;
                if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                    k += 1;
                }
                if k < chars.len() && chars[k].is_ascii_digit() {
                    integral = false;
                    j = k;
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                }
            }
            let text: String = chars[i..j].iter().collect();
            let n = text.parse::<f64>().map_err(|_| err(format!("bad number `{text}`"), line, col))?;
            push(&mut out, Tok::Num(n, integral));
            col += j - i;
            i = j;
            continue;
        }
        if is_ident_start(c) {
            let mut j = i + 1;
            while j < chars.len() && is_ident_char(chars[j]) {
                j += 1;
            }
            push(&mut out, Tok::Ident(chars[i..j].iter().collect()));
            col += j - i;
            i = j;
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
        match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
            Some(s) => {
                push(&mut out, Tok::Sym(s));
                i += s.len();
                col += s.len();
            }
            None => return Err(err(format!("unexpected character `{c}`"), line, col)),
        }
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

/// `|12>`, `|y+3>` or `|y>`.
fn lex_ket(cs: &[char]) -> Option<(Tok, usize)> {
    let mut j = 1;
    let mut name = None;
    if cs.get(j).is_some_and(|c| is_ident_start(*c)) {
        let s = j;
        while cs.get(j).is_some_and(|c| is_ident_char(*c)) {
            j += 1;
        }
        name = Some(cs[s..j].iter().collect::<String>());
        if cs.get(j) == Some(&'>') {
            return Some((Tok::Ket(0, name), j + 1));
        }
        if cs.get(j) != Some(&'+') {
            return None;
        }
        j += 1;
    }
    let s = j;
    while cs.get(j).is_some_and(|c| c.is_ascii_digit()) {
        j += 1;
    }
    if j == s || cs.get(j) != Some(&'>') {
        return None;
    }
    let n = cs[s..j].iter().collect::<String>().parse().ok()?;
    Some((Tok::Ket(n, name), j + 1))
}

// ---------------------------------------------------------------------------
// Programs

/// A named top-level definition.
#[derive(Clone, Debug, PartialEq)]
pub enum Declaration {
    Unitary { name: Name, ty: Option<UnitaryType>, body: UnitaryExpr },
    State { name: Name, ty: Option<PureType>, body: PureTerm },
    Def { name: Name, ty: Option<MainType>, body: MainTerm },
}

impl Declaration {
    pub fn name(&self) -> &str {
        match self {
            Declaration::Unitary { name, .. } | Declaration::State { name, .. } | Declaration::Def { name, .. } => name,
        }
    }
}

/// A parsed source file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SourceProgram {
    pub declarations: Vec<Declaration>,
    pub entry: Option<MainTerm>,
}

impl SourceProgram {
    pub fn unitary(&self, name: &str) -> Option<&UnitaryExpr> {
        self.declarations.iter().find_map(|d| match d {
            Declaration::Unitary { name: n, body, .. } if n == name => Some(body),
            _ => None,
        })
    }

    pub fn state(&self, name: &str) -> Option<&PureTerm> {
        self.declarations.iter().find_map(|d| match d {
            Declaration::State { name: n, body, .. } if n == name => Some(body),
            _ => None,
        })
    }

    pub fn def(&self, name: &str) -> Option<&MainTerm> {
        self.declarations.iter().find_map(|d| match d {
            Declaration::Def { name: n, body, .. } if n == name => Some(body),
            _ => None,
        })
    }
}

impl fmt::Display for Declaration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Declaration::Unitary { name, ty, body } => {
                write!(f, "unitary {name}")?;
                if let Some(t) = ty {
                    write!(f, " : {t}")?;
                }
                write!(f, " = {body};")
            }
            Declaration::State { name, ty, body } => {
                write!(f, "state {name}")?;
                if let Some(t) = ty {
                    write!(f, " : {t}")?;
                }
                write!(f, " = {body};")
            }
            Declaration::Def { name, ty, body } => {
                write!(f, "def {name}")?;
                if let Some(t) = ty {
                    write!(f, " : {t}")?;
                }
                write!(f, " = {body};")
            }
        }
    }
}

/// Prints in the concrete syntax accepted by [`parse`].
impl fmt::Display for SourceProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.declarations {
            writeln!(f, "{d}")?;
        }
        if let Some(m) = &self.entry {
            writeln!(f, "main {m};")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parser

const PURE_KEYWORDS: &[&str] = &["inl", "inr", "S", "ket0", "ket1", "adj", "ctrl", "qif", "then", "else"];
const MAIN_KEYWORDS: &[&str] = &[
    "let", "in", "case", "of", "match", "with", "inl", "inr", "succ", "lift", "force", "zero", "pure", "meas", "U", "B",
];

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    unitaries: HashMap<Name, UnitaryExpr>,
    states: HashMap<Name, PureTerm>,
    defs: HashMap<Name, MainTerm>,
    /// Names bound by enclosing binders; these shadow declarations.
    bound: Vec<Name>,
}

impl Parser {
    fn new(src: &str, prog: Option<&SourceProgram>) -> Result<Self> {
        let mut p = Parser {
            toks: lex(src)?,
            pos: 0,
            unitaries: HashMap::new(),
            states: HashMap::new(),
            defs: HashMap::new(),
            bound: Vec::new(),
        };
        if let Some(prog) = prog {
            for d in &prog.declarations {
                p.declare(d);
            }
        }
        Ok(p)
    }

    fn declare(&mut self, d: &Declaration) {
        match d {
            Declaration::Unitary { name, body, .. } => {
                self.unitaries.insert(name.clone(), body.clone());
            }
            Declaration::State { name, body, .. } => {
                self.states.insert(name.clone(), body.clone());
            }
            Declaration::Def { name, body, .. } => {
                self.defs.insert(name.clone(), body.clone());
            }
        }
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>) -> Error {
        let t = &self.toks[self.pos];
        Error::Syntax { message: message.into(), line: t.line, col: t.col }
    }

    fn unexpected(&self, wanted: &str) -> Error {
        self.error(format!("expected {wanted}, found {}", self.peek()))
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(t) if *t == s)
    }

    fn is_kw(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == k)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        let hit = self.is_sym(s);
        if hit {
            self.bump();
        }
        hit
    }

    fn eat_kw(&mut self, k: &str) -> bool {
        let hit = self.is_kw(k);
        if hit {
            self.bump();
        }
        hit
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{s}`")))
        }
    }

    fn expect_kw(&mut self, k: &str) -> Result<()> {
        if self.eat_kw(k) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{k}`")))
        }
    }

    /// An opening parenthesis. The token `(x)` stands for a parenthesized
    /// variable `x` here, and the variable is returned.
    fn open_paren(&mut self) -> Result<Option<Name>> {
        if self.eat_sym("(x)") {
            return Ok(Some("x".into()));
        }
        self.expect_sym("(")?;
        Ok(None)
    }

    /// `( term )` in a position where `(x)` means the variable `x`.
    fn paren_main(&mut self) -> Result<MainTerm> {
        match self.open_paren()? {
            Some(x) => Ok(self.main_var(x)),
            None => {
                let m = self.main_term()?;
                self.expect_sym(")")?;
                Ok(m)
            }
        }
    }

    fn main_var(&self, x: Name) -> MainTerm {
        if !self.is_bound(&x) {
            if let Some(m) = self.defs.get(&x) {
                return m.clone();
            }
        }
        MainTerm::Var(x)
    }

    fn pure_var(&self, x: Name) -> PureTerm {
        if !self.is_bound(&x) {
            if let Some(t) = self.states.get(&x) {
                return t.clone();
            }
        }
        PureTerm::Var(x)
    }

    fn ident(&mut self, reserved: &[&str]) -> Result<Name> {
        match self.peek().clone() {
            Tok::Ident(x) if !reserved.contains(&x.as_str()) => {
                self.bump();
                Ok(x)
            }
            _ => Err(self.unexpected("a name")),
        }
    }

    fn at_end(&self) -> bool {
        *self.peek() == Tok::Eof
    }

    fn expect_end(&self) -> Result<()> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.unexpected("end of input"))
        }
    }

    fn is_bound(&self, x: &str) -> bool {
        self.bound.iter().any(|b| b == x)
    }

    fn scoped<T>(&mut self, names: &[Name], f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let n = self.bound.len();
        self.bound.extend(names.iter().cloned());
        let r = f(self);
        self.bound.truncate(n);
        r
    }

    /// Runs `f`, rewinding on failure.
    fn attempt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Option<T> {
        let save = self.pos;
        match f(self) {
            Ok(v) => Some(v),
            Err(_) => {
                self.pos = save;
                None
            }
        }
    }

    // -- programs ----------------------------------------------------------

    fn program(&mut self) -> Result<SourceProgram> {
        let mut prog = SourceProgram::default();
        while !self.at_end() {
            if self.eat_kw("main") {
                if prog.entry.is_some() {
                    return Err(self.error("a program has at most one `main`"));
                }
                prog.entry = Some(self.main_term()?);
                self.expect_sym(";")?;
                continue;
            }
            let kind = match self.peek() {
                Tok::Ident(k) if k == "unitary" || k == "state" || k == "def" => k.clone(),
                _ => return Err(self.unexpected("`unitary`, `state`, `def` or `main`")),
            };
            self.bump();
            let at = self.pos;
            let name = self.ident(&[])?;
            if prog.declarations.iter().any(|d| d.name() == name) {
                self.pos = at;
                return Err(self.error(format!("`{name}` is declared twice")));
            }
            let decl = match kind.as_str() {
                "unitary" => {
                    let ty = if self.eat_sym(":") { Some(self.unitary_type()?) } else { None };
                    self.expect_sym("=")?;
                    Declaration::Unitary { name, ty, body: self.unitary()? }
                }
                "state" => {
                    let ty = if self.eat_sym(":") { Some(self.pure_type()?) } else { None };
                    self.expect_sym("=")?;
                    Declaration::State { name, ty, body: self.pure_term()? }
                }
                _ => {
                    let ty = if self.eat_sym(":") { Some(self.main_type()?) } else { None };
                    self.expect_sym("=")?;
                    Declaration::Def { name, ty, body: self.main_term()? }
                }
            };
            self.expect_sym(";")?;
            self.declare(&decl);
            prog.declarations.push(decl);
        }
        Ok(prog)
    }

    // -- pure types --------------------------------------------------------

    fn pure_type(&mut self) -> Result<PureType> {
        let mut t = self.pure_type_tensor()?;
        while self.eat_sym("(+)") {
            t = PureType::sum(t, self.pure_type_tensor()?);
        }
        Ok(t)
    }

    fn pure_type_tensor(&mut self) -> Result<PureType> {
        let mut t = self.pure_type_atom()?;
        while self.eat_sym("(x)") {
            t = PureType::tensor(t, self.pure_type_atom()?);
        }
        Ok(t)
    }

    fn pure_type_atom(&mut self) -> Result<PureType> {
        if self.eat_kw("I") {
            Ok(PureType::Unit)
        } else if self.eat_kw("qnat") {
            Ok(PureType::QNat)
        } else if self.eat_kw("qbit") {
            Ok(PureType::qbit())
        } else if self.eat_sym("(") {
            let t = self.pure_type()?;
            self.expect_sym(")")?;
            Ok(t)
        } else {
            Err(self.unexpected("a pure type"))
        }
    }

    fn unitary_type(&mut self) -> Result<UnitaryType> {
        self.expect_kw("U")?;
        self.expect_sym("(")?;
        let domain = self.pure_type()?;
        self.expect_sym(",")?;
        let codomain = self.pure_type()?;
        self.expect_sym(")")?;
        Ok(UnitaryType { domain, codomain })
    }

    // -- scalars -----------------------------------------------------------

    fn scalar(&mut self) -> Result<Scalar> {
        let mut v = self.scalar_product()?;
        loop {
            if self.eat_sym("+") {
                v += self.scalar_product()?;
            } else if self.eat_sym("-") {
                v -= self.scalar_product()?;
            } else {
                return Ok(v);
            }
        }
    }

    fn scalar_product(&mut self) -> Result<Scalar> {
        let mut v = self.scalar_unary()?;
        loop {
            if self.eat_sym("*") {
                v *= self.scalar_unary()?;
            } else if self.eat_sym("/") {
                let d = self.scalar_unary()?;
                if d.norm() == 0.0 {
                    return Err(self.error("division by zero in a coefficient"));
                }
                v /= d;
            } else {
                return Ok(v);
            }
        }
    }

    fn scalar_unary(&mut self) -> Result<Scalar> {
        if self.eat_sym("-") {
            return Ok(-self.scalar_unary()?);
        }
        if self.eat_sym("+") {
            return self.scalar_unary();
        }
        let base = self.scalar_atom()?;
        if self.eat_sym("^") {
            let e = self.scalar_unary()?;
            return Ok(base.powc(e));
        }
        Ok(base)
    }

    fn scalar_atom(&mut self) -> Result<Scalar> {
        match self.peek().clone() {
            Tok::Num(n, _) => {
                self.bump();
                if self.eat_kw("i") {
                    Ok(Scalar::new(0.0, n))
                } else {
                    Ok(Scalar::new(n, 0.0))
                }
            }
            Tok::Ident(x) if x == "i" => {
                self.bump();
                Ok(Scalar::new(0.0, 1.0))
            }
            Tok::Ident(x) if x == "pi" => {
                self.bump();
                Ok(Scalar::new(std::f64::consts::PI, 0.0))
            }
            Tok::Ident(x) if x == "sqrt" || x == "exp" => {
                self.bump();
                self.expect_sym("(")?;
                let a = self.scalar()?;
                self.expect_sym(")")?;
                Ok(if x == "sqrt" { a.sqrt() } else { a.exp() })
            }
            Tok::Sym("(") => {
                self.bump();
                let a = self.scalar()?;
                self.expect_sym(")")?;
                Ok(a)
            }
            _ => Err(self.unexpected("a complex number")),
        }
    }

    // -- pure terms --------------------------------------------------------

    fn pure_term(&mut self) -> Result<PureTerm> {
        if !self.is_sym("[") {
            return self.pure_tensor();
        }
        let mut entries = Vec::new();
        loop {
            self.expect_sym("[")?;
            let c = self.scalar()?;
            self.expect_sym("]")?;
            self.expect_sym("*")?;
            entries.push((c, self.pure_tensor()?));
            if !(self.is_sym("+") && matches!(self.peek_at(1), Tok::Sym("["))) {
                break;
            }
            self.bump();
        }
        Ok(PureTerm::LinComb(entries))
    }

    fn pure_tensor(&mut self) -> Result<PureTerm> {
        let mut t = self.pure_prefix()?;
        while self.eat_sym("(x)") {
            t = PureTerm::pair(t, self.pure_prefix()?);
        }
        Ok(t)
    }

    fn starts_pure_prefix(&self) -> bool {
        match self.peek() {
            Tok::Ident(x) => !["then", "else"].contains(&x.as_str()),
            Tok::Num(_, true) | Tok::Ket(..) => true,
            Tok::Sym(s) => ["*", "(", "{"].contains(s),
            _ => false,
        }
    }

    fn is_unitary_name(&self, x: &str) -> bool {
        !self.is_bound(x) && self.unitaries.contains_key(x)
    }

    fn pure_prefix(&mut self) -> Result<PureTerm> {
        match self.peek().clone() {
            Tok::Ident(k) if k == "inl" || k == "inr" || k == "S" => {
                self.bump();
                let t = self.pure_prefix()?;
                Ok(match k.as_str() {
                    "inl" => PureTerm::inl(t),
                    "inr" => PureTerm::inr(t),
                    _ => PureTerm::succ(t),
                })
            }
            Tok::Ident(k) if k == "adj" || k == "ctrl" || self.is_unitary_name(&k) => {
                let u = self.unitary_prefix()?;
                Ok(PureTerm::apply(u, self.pure_prefix()?))
            }
            Tok::Sym("{") => {
                let u = self.unitary_prefix()?;
                Ok(PureTerm::apply(u, self.pure_prefix()?))
            }
            Tok::Sym("(") => {
                let app = self.attempt(|p| {
                    p.bump();
                    let u = p.unitary()?;
                    p.expect_sym(")")?;
                    let u = p.unitary_postfix(u)?;
                    if !p.starts_pure_prefix() {
                        return Err(p.error("not an application"));
                    }
                    Ok(PureTerm::apply(u, p.pure_prefix()?))
                });
                match app {
                    Some(t) => Ok(t),
                    None => {
                        self.bump();
                        let t = self.pure_term()?;
                        self.expect_sym(")")?;
                        Ok(t)
                    }
                }
            }
            _ => self.pure_atom(),
        }
    }

    fn pure_atom(&mut self) -> Result<PureTerm> {
        match self.peek().clone() {
            Tok::Sym("*") => {
                self.bump();
                Ok(PureTerm::Star)
            }
            Tok::Num(n, true) => {
                self.bump();
                Ok(PureTerm::nat(n as usize))
            }
            Tok::Ket(n, None) => {
                self.bump();
                Ok(PureTerm::nat(n))
            }
            Tok::Ket(n, Some(x)) => {
                self.bump();
                Ok(PureTerm::shifted(PureTerm::Var(x), n))
            }
            Tok::Ident(k) if k == "ket0" => {
                self.bump();
                Ok(PureTerm::ket0())
            }
            Tok::Ident(k) if k == "ket1" => {
                self.bump();
                Ok(PureTerm::ket1())
            }
            Tok::Ident(x) if !PURE_KEYWORDS.contains(&x.as_str()) => {
                self.bump();
                Ok(self.pure_var(x))
            }
            _ => Err(self.unexpected("a pure term")),
        }
    }

    // -- unitaries ---------------------------------------------------------

    fn unitary(&mut self) -> Result<UnitaryExpr> {
        let mut u = self.unitary_sum()?;
        while self.eat_sym(".") {
            u = UnitaryExpr::compose(u, self.unitary_sum()?);
        }
        Ok(u)
    }

    fn unitary_sum(&mut self) -> Result<UnitaryExpr> {
        let mut u = self.unitary_tensor()?;
        while self.eat_sym("(+)") {
            u = UnitaryExpr::direct_sum(u, self.unitary_tensor()?);
        }
        Ok(u)
    }

    fn unitary_tensor(&mut self) -> Result<UnitaryExpr> {
        let mut u = self.unitary_prefix()?;
        while self.eat_sym("(x)") {
            u = UnitaryExpr::tensor(u, self.unitary_prefix()?);
        }
        Ok(u)
    }

    fn unitary_prefix(&mut self) -> Result<UnitaryExpr> {
        if self.eat_kw("adj") {
            return Ok(UnitaryExpr::adjoint(self.unitary_prefix()?));
        }
        if self.eat_kw("ctrl") {
            return Ok(UnitaryExpr::ctrl(self.unitary_prefix()?));
        }
        if self.eat_kw("qif") {
            self.ident(PURE_KEYWORDS)?;
            self.expect_kw("then")?;
            let on_one = self.unitary()?;
            self.expect_kw("else")?;
            let on_zero = self.unitary_prefix()?;
            return Ok(UnitaryExpr::qif(on_one, on_zero));
        }
        let u = self.unitary_atom()?;
        self.unitary_postfix(u)
    }

    fn unitary_postfix(&mut self, mut u: UnitaryExpr) -> Result<UnitaryExpr> {
        while self.eat_sym("^") {
            let k = match self.bump() {
                Tok::Num(n, true) if n >= 1.0 => n as usize,
                _ => return Err(self.error("expected a positive iteration count")),
            };
            let base = u.clone();
            for _ in 1..k {
                u = UnitaryExpr::compose(base.clone(), u);
            }
        }
        Ok(u)
    }

    fn unitary_atom(&mut self) -> Result<UnitaryExpr> {
        match self.peek().clone() {
            Tok::Sym("{") => {
                self.bump();
                let mut clauses = Vec::new();
                while self.eat_sym("|") {
                    let pattern = self.pure_tensor()?;
                    self.expect_sym("->")?;
                    let vars: Vec<Name> = pattern.free_vars().into_iter().collect();
                    let body = self.scoped(&vars, |p| p.pure_term())?;
                    clauses.push((pattern, body));
                }
                self.expect_sym("}")?;
                Ok(UnitaryExpr::Clauses(clauses))
            }
            Tok::Sym("(") => {
                self.bump();
                let u = self.unitary()?;
                self.expect_sym(")")?;
                Ok(u)
            }
            Tok::Ident(x) => match self.unitaries.get(&x) {
                Some(u) if !self.is_bound(&x) => {
                    let u = u.clone();
                    self.bump();
                    Ok(u)
                }
                _ => Err(Error::UnknownName(x)),
            },
            _ => Err(self.unexpected("a unitary")),
        }
    }

    // -- main types --------------------------------------------------------

    fn main_type(&mut self) -> Result<MainType> {
        let a = self.main_type_sum()?;
        if self.eat_sym("-o") {
            return Ok(MainType::lolli(a, self.main_type()?));
        }
        Ok(a)
    }

    fn main_type_sum(&mut self) -> Result<MainType> {
        let mut a = self.main_type_tensor()?;
        while self.eat_sym("+") {
            a = MainType::sum(a, self.main_type_tensor()?);
        }
        Ok(a)
    }

    fn main_type_tensor(&mut self) -> Result<MainType> {
        let mut a = self.main_type_prefix()?;
        while self.eat_sym("(x)") {
            a = MainType::tensor(a, self.main_type_prefix()?);
        }
        Ok(a)
    }

    fn main_type_prefix(&mut self) -> Result<MainType> {
        if self.eat_sym("!") {
            return Ok(MainType::bang(self.main_type_prefix()?));
        }
        if self.eat_kw("I") {
            Ok(MainType::Unit)
        } else if self.eat_kw("Nat") {
            Ok(MainType::Nat)
        } else if self.eat_kw("bit") {
            Ok(MainType::bit())
        } else if self.eat_kw("qbit") {
            Ok(MainType::qbit())
        } else if self.eat_kw("B") {
            self.expect_sym("(")?;
            let q = self.pure_type()?;
            self.expect_sym(")")?;
            Ok(MainType::BOp(q))
        } else if self.eat_sym("(") {
            let a = self.main_type()?;
            self.expect_sym(")")?;
            Ok(a)
        } else {
            Err(self.unexpected("a type"))
        }
    }

    // -- main terms --------------------------------------------------------

    fn binder(&mut self) -> Result<Name> {
        self.ident(MAIN_KEYWORDS)
    }

    fn main_term(&mut self) -> Result<MainTerm> {
        if self.eat_sym("\\") {
            let x = self.binder()?;
            let ann = if self.eat_sym(":") { Some(self.main_type()?) } else { None };
            self.expect_sym(".")?;
            let body = self.scoped(std::slice::from_ref(&x), |p| p.main_term())?;
            return Ok(MainTerm::Lam(x, ann, Box::new(body)));
        }
        if self.eat_kw("let") {
            if self.eat_kw("B") {
                let (x, y) = match self.open_paren()? {
                    Some(x) => (x, None),
                    None => {
                        let x = self.binder()?;
                        let y = if self.eat_sym("(x)") { Some(self.binder()?) } else { None };
                        self.expect_sym(")")?;
                        (x, y)
                    }
                };
                self.expect_sym("=")?;
                let m = self.main_term()?;
                self.expect_kw("in")?;
                return match y {
                    None => {
                        let n = self.scoped(std::slice::from_ref(&x), |p| p.main_term())?;
                        Ok(MainTerm::LetBang(x, Box::new(m), Box::new(n)))
                    }
                    Some(y) => {
                        let n = self.scoped(&[x.clone(), y.clone()], |p| p.main_term())?;
                        Ok(MainTerm::LetPairBang(x, y, Box::new(m), Box::new(n)))
                    }
                };
            }
            let x = self.binder()?;
            self.expect_sym("(x)")?;
            let y = self.binder()?;
            self.expect_sym("=")?;
            let m = self.main_term()?;
            self.expect_kw("in")?;
            let n = self.scoped(&[x.clone(), y.clone()], |p| p.main_term())?;
            return Ok(MainTerm::LetPair(x, y, Box::new(m), Box::new(n)));
        }
        let mut t = self.main_app()?;
        while self.eat_sym("(x)") {
            t = MainTerm::pair(t, self.main_app()?);
        }
        Ok(t)
    }

    fn starts_main_prefix(&self) -> bool {
        match self.peek() {
            Tok::Ident(x) => !["let", "in", "of", "with", "B"].contains(&x.as_str()),
            Tok::Num(_, true) => true,
            Tok::Sym(s) => ["*", "("].contains(s),
            _ => false,
        }
    }

    fn main_app(&mut self) -> Result<MainTerm> {
        let mut t = self.main_prefix()?;
        while self.starts_main_prefix() {
            t = MainTerm::app(t, self.main_prefix()?);
        }
        Ok(t)
    }

    fn main_prefix(&mut self) -> Result<MainTerm> {
        for kw in ["inl", "inr", "succ", "lift", "force"] {
            if self.eat_kw(kw) {
                let a = Box::new(self.main_prefix()?);
                return Ok(match kw {
                    "inl" => MainTerm::InL(a),
                    "inr" => MainTerm::InR(a),
                    "succ" => MainTerm::Succ(a),
                    "lift" => MainTerm::Lift(a),
                    _ => MainTerm::Force(a),
                });
            }
        }
        self.main_atom()
    }

    fn main_atom(&mut self) -> Result<MainTerm> {
        match self.peek().clone() {
            Tok::Sym("*") => {
                self.bump();
                Ok(MainTerm::Star)
            }
            Tok::Sym("(") => {
                self.bump();
                let m = self.main_term()?;
                self.expect_sym(")")?;
                Ok(m)
            }
            Tok::Num(n, true) => {
                self.bump();
                Ok(MainTerm::nat(n as usize))
            }
            Tok::Ident(k) => match k.as_str() {
                "zero" => {
                    self.bump();
                    Ok(MainTerm::Zero)
                }
                "pure" => {
                    self.bump();
                    let t = match self.open_paren()? {
                        Some(x) => self.pure_var(x),
                        None => {
                            let t = self.pure_term()?;
                            self.expect_sym(")")?;
                            t
                        }
                    };
                    Ok(MainTerm::Pure(t))
                }
                "meas" => {
                    self.bump();
                    Ok(MainTerm::meas(self.paren_main()?))
                }
                "U" => {
                    self.bump();
                    self.expect_sym("[")?;
                    let u = self.unitary()?;
                    self.expect_sym("]")?;
                    Ok(MainTerm::unapply(u, self.paren_main()?))
                }
                "case" => {
                    self.bump();
                    let l = self.main_term()?;
                    self.expect_kw("of")?;
                    self.expect_sym("{")?;
                    if !(self.eat_kw("inl") || self.eat_kw("left")) {
                        return Err(self.unexpected("`inl`"));
                    }
                    let x = self.binder()?;
                    self.expect_sym("->")?;
                    let a = self.scoped(std::slice::from_ref(&x), |p| p.main_term())?;
                    self.expect_sym(";")?;
                    if !(self.eat_kw("inr") || self.eat_kw("right")) {
                        return Err(self.unexpected("`inr`"));
                    }
                    let y = self.binder()?;
                    self.expect_sym("->")?;
                    let b = self.scoped(std::slice::from_ref(&y), |p| p.main_term())?;
                    self.eat_sym(";");
                    self.expect_sym("}")?;
                    Ok(MainTerm::Case(Box::new(l), x, Box::new(a), y, Box::new(b)))
                }
                "match" => {
                    self.bump();
                    let l = self.main_term()?;
                    self.expect_kw("with")?;
                    self.expect_sym("{")?;
                    self.expect_kw("zero")?;
                    self.expect_sym("->")?;
                    let a = self.main_term()?;
                    self.expect_sym(";")?;
                    self.expect_kw("succ")?;
                    let x = self.binder()?;
                    self.expect_sym("->")?;
                    let b = self.scoped(std::slice::from_ref(&x), |p| p.main_term())?;
                    self.eat_sym(";");
                    self.expect_sym("}")?;
                    Ok(MainTerm::Match(Box::new(l), Box::new(a), x, Box::new(b)))
                }
                _ if MAIN_KEYWORDS.contains(&k.as_str()) => Err(self.unexpected("a term")),
                _ => {
                    self.bump();
                    Ok(self.main_var(k))
                }
            },
            _ => Err(self.unexpected("a term")),
        }
    }
}

/// Parses a whole source file.
pub fn parse(src: &str) -> Result<SourceProgram> {
    let mut p = Parser::new(src, None)?;
    p.program()
}

/// Parses a pure term against the declarations of `prog`.
pub fn parse_pure_term(prog: &SourceProgram, src: &str) -> Result<PureTerm> {
    let mut p = Parser::new(src, Some(prog))?;
    let t = p.pure_term()?;
    p.expect_end()?;
    Ok(t)
}

/// Parses a unitary expression against the declarations of `prog`.
pub fn parse_unitary(prog: &SourceProgram, src: &str) -> Result<UnitaryExpr> {
    let mut p = Parser::new(src, Some(prog))?;
    let u = p.unitary()?;
    p.expect_end()?;
    Ok(u)
}

/// Parses a main term against the declarations of `prog`.
pub fn parse_main_term(prog: &SourceProgram, src: &str) -> Result<MainTerm> {
    let mut p = Parser::new(src, Some(prog))?;
    let m = p.main_term()?;
    p.expect_end()?;
    Ok(m)
}

pub fn parse_pure_type(src: &str) -> Result<PureType> {
    let mut p = Parser::new(src, None)?;
    let t = p.pure_type()?;
    p.expect_end()?;
    Ok(t)
}

pub fn parse_main_type(src: &str) -> Result<MainType> {
    let mut p = Parser::new(src, None)?;
    let t = p.main_type()?;
    p.expect_end()?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// Checking and diagnostics

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

/// A user-facing message with a stable code.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: &'static str,
    pub message: String,
    pub span: Option<Span>,
}

impl Diagnostic {
    pub fn from_error(e: &Error) -> Self {
        let span = match e {
            Error::Syntax { line, col, .. } => Some(Span { line: *line, col: *col }),
            _ => None,
        };
        Diagnostic { severity: Severity::Error, code: e.code(), message: e.to_string(), span }
    }

    /// Prefixes the message with the declaration it concerns.
    pub fn within(mut self, name: &str) -> Self {
        self.message = format!("in `{name}`: {}", self.message);
        self
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}[{}]", self.code)?;
        if let Some(s) = self.span {
            write!(f, " {}:{}", s.line, s.col)?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Type of one checked declaration, as printed by `check`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckedItem {
    pub name: String,
    pub ty: String,
}

/// Type checks every declaration and the entry point.
pub fn check_program(prog: &SourceProgram) -> (Vec<CheckedItem>, Vec<(Diagnostic, bool)>) {
    let mut items = Vec::new();
    let mut diags = Vec::new();
    let mut record = |name: &str, r: Result<String>| match r {
        Ok(ty) => items.push(CheckedItem { name: name.to_string(), ty }),
        Err(e) => diags.push((Diagnostic::from_error(&e).within(name), e.is_internal())),
    };
    for d in &prog.declarations {
        let r = match d {
            Declaration::Unitary { ty, body, .. } => match ty {
                Some(t) => check_unitary(body, t).map(|_| t.to_string()),
                None => typecheck_unitary(body).map(|t| t.to_string()),
            },
            Declaration::State { ty, body, .. } => match ty {
                Some(t) => check_term(&vec![], body, t).map(|_| t.to_string()),
                None => typecheck_term(&vec![], body).map(|t| t.to_string()),
            },
            Declaration::Def { ty, body, .. } => match ty {
                Some(t) => check_main(&vec![], body, t).map(|_| t.to_string()),
                None => typecheck_main(&vec![], body).map(|t| t.to_string()),
            },
        };
        record(d.name(), r);
    }
    if let Some(m) = &prog.entry {
        record("main", typecheck_main(&vec![], m).map(|t| t.to_string()));
    }
    (items, diags)
}
