//! Text formats: SPA model files and modification-factor files.
//!
//! Model syntax:
//!
//! ```text
//! process P {
//!   states s0, s1;          // optional; otherwise inferred in order of use
//!   initial s0;
//!   s0 -(a, 1.5)-> s1;
//! }
//! system: (P ||{a} Q) || R;
//! ```
//!
//! `||` without braces synchronises on nothing; unparenthesised chains nest
//! to the right. Factor files hold one `(s1,…,sn) -a-> (s1',…,sn') : f` entry
//! per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{ActionLabel, Composition, LocalState, LocalTransition, SequentialProcess, SpaSystem};
use crate::semantics::{FlatTS, GlobalState, TransitionId};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Semi,
    Comma,
    Colon,
    Par,
    Minus,
    Arrow,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: usize,
    pub column: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '\'' | '.')
}

pub(crate) fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            let push = |out: &mut Vec<Token>, tok| {
                out.push(Token {
                    tok,
                    line: li + 1,
                    column,
                })
            };
            match c {
                _ if c.is_whitespace() => {
                    i += 1;
                    continue;
                }
                '/' if chars.get(i + 1) == Some(&'/') => break,
                '{' => push(&mut out, Tok::LBrace),
                '}' => push(&mut out, Tok::RBrace),
                '(' => push(&mut out, Tok::LParen),
                ')' => push(&mut out, Tok::RParen),
                ';' => push(&mut out, Tok::Semi),
                ',' => push(&mut out, Tok::Comma),
                ':' => push(&mut out, Tok::Colon),
                '|' if chars.get(i + 1) == Some(&'|') => {
                    push(&mut out, Tok::Par);
                    i += 1;
                }
                '-' if chars.get(i + 1) == Some(&'>') => {
                    push(&mut out, Tok::Arrow);
                    i += 1;
                }
                '-' => push(&mut out, Tok::Minus),
                _ if is_word_char(c) => {
                    let start = i;
                    let numeric = c.is_ascii_digit();
                    i += 1;
                    while i < chars.len() {
                        let d = chars[i];
                        let exp_sign = numeric
                            && matches!(d, '+' | '-')
                            && matches!(chars[i - 1], 'e' | 'E')
                            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
                        if is_word_char(d) || exp_sign {
                            i += 1;
                        } else {
                            break;
                        }
                    }
                    push(&mut out, Tok::Word(chars[start..i].iter().collect()));
                    continue;
                }
                _ => {
                    return Err(ParseError {
                        line: li + 1,
                        column,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            }
            i += 1;
        }
    }
    Ok(out)
}

pub(crate) struct Cursor {
    toks: Vec<Token>,
    pos: usize,
    pub(crate) end: (usize, usize),
}

impl Cursor {
    pub(crate) fn new(toks: Vec<Token>, text: &str) -> Self {
        let lines = text.lines().count().max(1);
        let last = text.lines().last().map_or(0, |l| l.chars().count());
        Cursor {
            toks,
            pos: 0,
            end: (lines, last + 1),
        }
    }

    pub(crate) fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    pub(crate) fn here(&self) -> (usize, usize) {
        self.toks
            .get(self.pos)
            .map_or(self.end, |t| (t.line, t.column))
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> ParseError {
        let (line, column) = self.here();
        ParseError {
            line,
            column,
            message: message.into(),
        }
    }

    pub(crate) fn error_at(&self, at: (usize, usize), message: impl Into<String>) -> ParseError {
        ParseError {
            line: at.0,
            column: at.1,
            message: message.into(),
        }
    }

    pub(crate) fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    pub(crate) fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub(crate) fn word(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    pub(crate) fn number(&mut self, what: &str) -> Result<f64, ParseError> {
        let at = self.here();
        let w = self.word(what)?;
        w.parse::<f64>()
            .map_err(|_| self.error_at(at, format!("`{w}` is not a number")))
    }

    /// `( w1 , … , wn )`
    pub(crate) fn tuple(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut out = vec![self.word("local state")?];
        while self.eat(&Tok::Comma) {
            out.push(self.word("local state")?);
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok(out)
    }
}

fn is_identifier(w: &str) -> bool {
    w.chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && !w.contains('.')
}

struct ProcessDef {
    at: (usize, usize),
    process: SequentialProcess,
}

pub fn parse_system(text: &str) -> Result<SpaSystem, ParseError> {
    let mut cur = Cursor::new(lex(text)?, text);
    let mut defs: HashMap<String, ProcessDef> = HashMap::new();
    let mut system: Option<(usize, usize, Expr)> = None;
    while !cur.at_end() {
        let at = cur.here();
        match cur.word("`process` or `system`")?.as_str() {
            "process" => {
                let def = parse_process(&mut cur, at)?;
                let name = def.process.name().to_string();
                if defs.contains_key(&name) {
                    return Err(cur.error_at(at, format!("process `{name}` defined twice")));
                }
                defs.insert(name, def);
            }
            "system" => {
                if system.is_some() {
                    return Err(cur.error_at(at, "more than one `system` declaration"));
                }
                cur.expect(Tok::Colon, "`:`")?;
                let e = parse_expr(&mut cur)?;
                cur.expect(Tok::Semi, "`;`")?;
                system = Some((at.0, at.1, e));
            }
            other => return Err(cur.error_at(at, format!("unexpected `{other}`"))),
        }
    }
    let Some((line, column, expr)) = system else {
        return Err(cur.error("missing `system` declaration"));
    };
    let mut used = BTreeSet::new();
    let comp = build(&expr, &defs, &mut used)?;
    SpaSystem::new(comp).map_err(|e| ParseError {
        line,
        column,
        message: e.to_string(),
    })
}

fn parse_process(cur: &mut Cursor, at: (usize, usize)) -> Result<ProcessDef, ParseError> {
    let name_at = cur.here();
    let name = cur.word("process name")?;
    if !is_identifier(&name) {
        return Err(cur.error_at(name_at, format!("`{name}` is not a valid process name")));
    }
    cur.expect(Tok::LBrace, "`{`")?;
    let mut declared: Option<Vec<String>> = None;
    let mut initial: Option<((usize, usize), String)> = None;
    let mut raw: Vec<((usize, usize), String, String, f64, String)> = Vec::new();
    while !cur.eat(&Tok::RBrace) {
        let item_at = cur.here();
        let first = cur.word("`initial`, `states` or a transition")?;
        match (first.as_str(), cur.peek()) {
            ("initial", Some(Tok::Word(_))) => {
                if initial.is_some() {
                    return Err(cur.error_at(item_at, "duplicate `initial`"));
                }
                initial = Some((cur.here(), cur.word("state")?));
                cur.expect(Tok::Semi, "`;`")?;
            }
            ("states", Some(Tok::Word(_))) => {
                if declared.is_some() {
                    return Err(cur.error_at(item_at, "duplicate `states`"));
                }
                let mut states = vec![cur.word("state")?];
                while cur.eat(&Tok::Comma) {
                    states.push(cur.word("state")?);
                }
                cur.expect(Tok::Semi, "`;`")?;
                declared = Some(states);
            }
            _ => {
                cur.expect(Tok::Minus, "`-(`")?;
                cur.expect(Tok::LParen, "`(`")?;
                let action = cur.word("action")?;
                cur.expect(Tok::Comma, "`,`")?;
                let rate_at = cur.here();
                let rate = cur.number("rate")?;
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(cur.error_at(rate_at, format!("rate must be positive, got {rate}")));
                }
                cur.expect(Tok::RParen, "`)`")?;
                cur.expect(Tok::Arrow, "`->`")?;
                let target = cur.word("target state")?;
                cur.expect(Tok::Semi, "`;`")?;
                raw.push((item_at, first, action, rate, target));
            }
        }
    }
    let Some((init_at, init)) = initial else {
        return Err(cur.error_at(at, format!("process `{name}` lacks `initial`")));
    };
    let explicit = declared.is_some();
    let mut states = declared.unwrap_or_default();
    let resolve = |states: &mut Vec<String>, s: &str, pos: (usize, usize)| -> Result<LocalState, ParseError> {
        if let Some(i) = states.iter().position(|x| x == s) {
            return Ok(i as LocalState);
        }
        if explicit {
            return Err(ParseError {
                line: pos.0,
                column: pos.1,
                message: format!("undeclared state `{s}` in process `{name}`"),
            });
        }
        states.push(s.to_string());
        Ok((states.len() - 1) as LocalState)
    };
    let initial = resolve(&mut states, &init, init_at)?;
    let mut transitions = Vec::new();
    for (pos, src, action, rate, tgt) in raw {
        let source = resolve(&mut states, &src, pos)?;
        let target = resolve(&mut states, &tgt, pos)?;
        transitions.push(LocalTransition {
            source,
            action: ActionLabel::new(action),
            rate,
            target,
        });
    }
    let process = SequentialProcess::from_parts(name, states, initial, transitions).map_err(|e| ParseError {
        line: at.0,
        column: at.1,
        message: e.to_string(),
    })?;
    Ok(ProcessDef { at, process })
}

enum Expr {
    Name((usize, usize), String),
    Par(Box<Expr>, BTreeSet<ActionLabel>, Box<Expr>),
}

fn parse_expr(cur: &mut Cursor) -> Result<Expr, ParseError> {
    let first = parse_primary(cur)?;
    if cur.eat(&Tok::Par) {
        let mut sync = BTreeSet::new();
        if cur.eat(&Tok::LBrace) {
            if !cur.eat(&Tok::RBrace) {
                sync.insert(ActionLabel::new(cur.word("action")?));
                while cur.eat(&Tok::Comma) {
                    sync.insert(ActionLabel::new(cur.word("action")?));
                }
                cur.expect(Tok::RBrace, "`}`")?;
            }
        }
        let rest = parse_expr(cur)?;
        Ok(Expr::Par(Box::new(first), sync, Box::new(rest)))
    } else {
        Ok(first)
    }
}

fn parse_primary(cur: &mut Cursor) -> Result<Expr, ParseError> {
    if cur.eat(&Tok::LParen) {
        let e = parse_expr(cur)?;
        cur.expect(Tok::RParen, "`)`")?;
        Ok(e)
    } else {
        let at = cur.here();
        Ok(Expr::Name(at, cur.word("process name")?))
    }
}

fn build(expr: &Expr, defs: &HashMap<String, ProcessDef>, used: &mut BTreeSet<String>) -> Result<Composition, ParseError> {
    match expr {
        Expr::Name(at, name) => {
            let def = defs.get(name).ok_or_else(|| ParseError {
                line: at.0,
                column: at.1,
                message: format!("undefined process `{name}`"),
            })?;
            if !used.insert(name.clone()) {
                return Err(ParseError {
                    line: at.0,
                    column: at.1,
                    message: format!("process `{name}` used twice (defined at line {})", def.at.0),
                });
            }
            Ok(Composition::Leaf(def.process.clone()))
        }
        Expr::Par(l, sync, r) => Ok(Composition::Parallel {
            left: Box::new(build(l, defs, used)?),
            right: Box::new(build(r, defs, used)?),
            sync: sync.clone(),
        }),
    }
}

/// Canonical text of a system: processes in LNR order with explicit state
/// lists, and a fully parenthesised `system` expression.
pub fn serialize_system(sys: &SpaSystem) -> String {
    let mut out = String::new();
    for p in sys.inorder_leaves() {
        let _ = writeln!(out, "process {} {{", p.name());
        let _ = writeln!(out, "  states {};", p.states().join(", "));
        let _ = writeln!(out, "  initial {};", p.state_name(p.initial()));
        for t in p.transitions() {
            let _ = writeln!(
                out,
                "  {} -({}, {:?})-> {};",
                p.state_name(t.source),
                t.action,
                t.rate,
                p.state_name(t.target)
            );
        }
        out.push_str("}\n\n");
    }
    out.push_str("system: ");
    write_comp(&sys.to_composition(), &mut out);
    out.push_str(";\n");
    out
}

fn write_comp(c: &Composition, out: &mut String) {
    match c {
        Composition::Leaf(p) => out.push_str(p.name()),
        Composition::Parallel { left, right, sync } => {
            out.push('(');
            write_comp(left, out);
            let acts: Vec<&str> = sync.iter().map(|a| a.as_str()).collect();
            let _ = write!(out, " ||{{{}}} ", acts.join(","));
            write_comp(right, out);
            out.push(')');
        }
    }
}

/// Factors for flat transitions; transitions not listed have factor 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModificationMap {
    factors: BTreeMap<TransitionId, f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("factor must be positive, got {0}")]
    NonPositive(f64),
}

impl ModificationMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: TransitionId, factor: f64) -> Result<Option<f64>, FactorError> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(FactorError::NonPositive(factor));
        }
        Ok(self.factors.insert(t, factor))
    }

    pub fn factor(&self, t: TransitionId) -> f64 {
        self.factors.get(&t).copied().unwrap_or(1.0)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TransitionId, f64)> + '_ {
        self.factors.iter().map(|(k, v)| (*k, *v))
    }

    pub fn keys(&self) -> impl Iterator<Item = TransitionId> + '_ {
        self.factors.keys().copied()
    }
}

pub(crate) fn resolve_state(sys: &SpaSystem, names: &[String]) -> Result<GlobalState, String> {
    if names.len() != sys.leaf_count() {
        return Err(format!(
            "state tuple has {} components, system has {} processes",
            names.len(),
            sys.leaf_count()
        ));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            sys.leaf(i)
                .state_index(n)
                .ok_or_else(|| format!("process `{}` has no state `{n}`", sys.leaf(i).name()))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(GlobalState)
}

/// Parses `(s) -a-> (s')` at the cursor and resolves it against `flat`.
pub(crate) fn parse_key(cur: &mut Cursor, sys: &SpaSystem) -> Result<(GlobalState, ActionLabel, GlobalState), ParseError> {
    let at = cur.here();
    let src = cur.tuple()?;
    cur.expect(Tok::Minus, "`-`")?;
    let action = ActionLabel::new(cur.word("action")?);
    cur.expect(Tok::Arrow, "`->`")?;
    let tgt = cur.tuple()?;
    let src = resolve_state(sys, &src).map_err(|m| cur.error_at(at, m))?;
    let tgt = resolve_state(sys, &tgt).map_err(|m| cur.error_at(at, m))?;
    Ok((src, action, tgt))
}

pub fn parse_factors(text: &str, sys: &SpaSystem, flat: &FlatTS) -> Result<ModificationMap, ParseError> {
    let mut map = ModificationMap::new();
    for (li, line) in text.lines().enumerate() {
        let toks = lex(line).map_err(|e| ParseError { line: li + 1, ..e })?;
        if toks.is_empty() {
            continue;
        }
        let toks = toks
            .into_iter()
            .map(|t| Token { line: li + 1, ..t })
            .collect();
        let mut cur = Cursor::new(toks, line);
        cur.end = (li + 1, line.chars().count() + 1);
        let at = cur.here();
        let (src, action, tgt) = parse_key(&mut cur, sys)?;
        let id = flat
            .find(&src, &action, &tgt)
            .ok_or_else(|| cur.error_at(at, format!("no flat transition {} -{action}-> {}", src.display(sys), tgt.display(sys))))?;
        cur.expect(Tok::Colon, "`:`")?;
        let f_at = cur.here();
        let f = cur.number("factor")?;
        if !cur.at_end() {
            return Err(cur.error("trailing input"));
        }
        match map.insert(id, f) {
            Err(e) => return Err(cur.error_at(f_at, e.to_string())),
            Ok(Some(_)) => return Err(cur.error_at(at, "duplicate transition")),
            Ok(None) => {}
        }
    }
    Ok(map)
}

pub fn serialize_factors(sys: &SpaSystem, flat: &FlatTS, map: &ModificationMap) -> String {
    let mut out = String::new();
    for (id, f) in map.iter() {
        let _ = writeln!(out, "{} : {:?}", flat.format_key(sys, id), f);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::{flatten, FlattenOptions};

    const FIVE_LEAF: &str = "
        process P1 { initial s; s -(a, 1)-> s; }
        process P2 { initial s; s -(a, 1)-> s; }
        process P3 { initial s; s -(b, 1)-> s; }
        process P4 { initial s; s -(a, 1)-> s; }
        process P5 { initial s; s -(a, 2.5e-1)-> s; } // comment
        system: (P1 ||{a} P2) ||{b} (P3 ||{b} (P4 ||{a} P5));
    ";

    const PAR: &str = "
        process P { initial s0; s0 -(a, 2)-> s1; }
        process Q { initial s0; s0 -(a, 3)-> s0; }
        process R { initial s0; s0 -(a, 5)-> s0; }
        system: P ||{a} (Q || R);
    ";

    #[test]
    fn parses_five_leaf_tree() {
        let sys = parse_system(FIVE_LEAF).unwrap();
        assert_eq!(sys.leaf_count(), 5);
        let mut syncs = Vec::new();
        for id in sys.node_ids() {
            if let Some(s) = sys.sync_set(id) {
                syncs.push(s.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","));
            }
        }
        syncs.sort();
        assert_eq!(syncs, ["a", "a", "b", "b"]);
        assert_eq!(sys.leaf(4).transitions()[0].rate, 0.25);
    }

    #[test]
    fn parses_degenerate_and_nested() {
        let sys = parse_system("process P { initial s0; }  system: P;").unwrap();
        assert_eq!(sys.leaf_count(), 1);
        assert!(sys.leaf(0).transitions().is_empty());

        let sys = parse_system(PAR).unwrap();
        assert_eq!(sys.sync_set(sys.root()).unwrap().len(), 1);
        let (_, inner) = sys.children(sys.root()).unwrap();
        assert!(sys.sync_set(inner).unwrap().is_empty());
    }

    #[test]
    fn chains_nest_to_the_right() {
        let sys = parse_system(
            "process A { initial x; } process B { initial x; } process C { initial x; }
             system: A || B ||{z} C;",
        )
        .unwrap();
        let (a, bc) = sys.children(sys.root()).unwrap();
        assert!(sys.is_leaf(a));
        assert!(sys.syncs(bc, &ActionLabel::new("z")));
    }

    #[test]
    fn reports_errors_with_positions() {
        let e = parse_system("process P { initial s0; s0 -(a, 0)-> s1; } system: P;").unwrap_err();
        assert_eq!((e.line, e.column), (1, 33));
        let e = parse_system("process P { initial s0; }\nsystem: Q;").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.message.contains("undefined process"));
        let e = parse_system("process P { states a; initial a; a -(x, 1)-> b; } system: P;").unwrap_err();
        assert!(e.message.contains("undeclared state"));
        let e = parse_system("process P { initial s0 } system: P;").unwrap_err();
        assert!(e.message.contains("`;`"));
        assert!(parse_system("process P { initial s; } system: P || P;").is_err());
        assert!(parse_system("process P { initial s; } process P { initial s; } system: P;").is_err());
    }

    #[test]
    fn round_trip_is_structural_identity() {
        for text in [FIVE_LEAF, PAR, "process P { initial s0; } system: P;"] {
            let sys = parse_system(text).unwrap();
            let printed = serialize_system(&sys);
            let again = parse_system(&printed).unwrap();
            assert_eq!(sys, again);
            assert_eq!(printed, serialize_system(&again));
        }
    }

    #[test]
    fn factor_files() {
        let sys = parse_system(PAR).unwrap();
        let flat = flatten(&sys, FlattenOptions::default()).unwrap();
        let map = parse_factors("(s0,s0,s0) -a-> (s1,s0,s0) : 2.0\n", &sys, &flat).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.factor(TransitionId(0)), 2.0);
        assert!(parse_factors("", &sys, &flat).unwrap().is_empty());
        assert_eq!(
            parse_factors(&serialize_factors(&sys, &flat, &map), &sys, &flat).unwrap(),
            map
        );

        let unknown = parse_factors("(s1,s0,s0) -a-> (s0,s0,s0) : 2.0", &sys, &flat).unwrap_err();
        assert!(unknown.message.contains("no flat transition"));
        assert!(parse_factors("(s0,s0,s0) -a-> (s1,s0,s0) : 0", &sys, &flat).is_err());
        assert!(parse_factors(
            "(s0,s0,s0) -a-> (s1,s0,s0) : 2\n(s0,s0,s0) -a-> (s1,s0,s0) : 3",
            &sys,
            &flat
        )
        .unwrap_err()
        .message
        .contains("duplicate"));
        assert!(parse_factors("(s0,s0) -a-> (s1,s0) : 2", &sys, &flat).is_err());
    }
}
