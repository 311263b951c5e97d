//! Flat transition system export/import and report serialisation.
//!
//! ```text
//! STATES 4
//! TRANSITIONS 4
//! (s0,t0) -a-> (s1,t0) : 1.0000000000000000e0
//! ```
//!
//! Rates are printed with 17 significant digits, so import is bit-exact.

use std::fmt::Write as _;

use crate::lifting::LiftReport;
use crate::model::SpaSystem;
use crate::parser::{lex, parse_key, Cursor, ParseError, Tok, Token};
use crate::semantics::{FlatTS, FlatTransition, GlobalState};

pub fn export_flat(sys: &SpaSystem, flat: &FlatTS) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "STATES {}", flat.states().len());
    let _ = writeln!(out, "TRANSITIONS {}", flat.transitions().len());
    for id in flat.ids() {
        let _ = writeln!(out, "{} : {:.16e}", flat.format_key(sys, id), flat.transition(id).rate);
    }
    out
}

fn header(cur: &mut Cursor, word: &str) -> Result<usize, ParseError> {
    let w = cur.word(word)?;
    if w != word {
        return Err(cur.error(format!("expected `{word}`")));
    }
    let n = cur.number("count")?;
    if n < 0.0 || n.fract() != 0.0 {
        return Err(cur.error("count must be a non-negative integer"));
    }
    Ok(n as usize)
}

fn line_cursor(line: &str, li: usize) -> Result<Option<Cursor>, ParseError> {
    let toks = lex(line).map_err(|e| ParseError { line: li + 1, ..e })?;
    if toks.is_empty() {
        return Ok(None);
    }
    let toks: Vec<Token> = toks.into_iter().map(|t| Token { line: li + 1, ..t }).collect();
    let mut cur = Cursor::new(toks, line);
    cur.end = (li + 1, line.chars().count() + 1);
    Ok(Some(cur))
}

/// Reads an [`export_flat`] file. States are numbered initial first, then in
/// order of appearance; derivations are not part of the format and are left
/// empty.
pub fn import_flat(text: &str, sys: &SpaSystem) -> Result<FlatTS, ParseError> {
    let mut lines = text.lines().enumerate().filter_map(|(li, l)| match line_cursor(l, li) {
        Ok(None) => None,
        other => Some(other),
    });
    let mut next_header = |word: &str| -> Result<usize, ParseError> {
        let mut cur = lines
            .next()
            .transpose()?
            .flatten()
            .ok_or_else(|| ParseError {
                line: 0,
                column: 0,
                message: format!("missing `{word}` header"),
            })?;
        let n = header(&mut cur, word)?;
        if !cur.at_end() {
            return Err(cur.error("trailing input"));
        }
        Ok(n)
    };
    let k = next_header("STATES")?;
    let m = next_header("TRANSITIONS")?;
    let mut states = vec![GlobalState::initial(sys)];
    let mut index = std::collections::HashMap::from([(states[0].clone(), 0usize)]);
    let mut id_of = |s: GlobalState, states: &mut Vec<GlobalState>| {
        *index.entry(s.clone()).or_insert_with(|| {
            states.push(s);
            states.len() - 1
        })
    };
    let mut transitions = Vec::new();
    for cur in lines {
        let mut cur = cur?.expect("blank lines filtered");
        let (src, action, tgt) = parse_key(&mut cur, sys)?;
        cur.expect(Tok::Colon, "`:`")?;
        let rate = cur.number("rate")?;
        if !cur.at_end() {
            return Err(cur.error("trailing input"));
        }
        let source = id_of(src, &mut states);
        let target = id_of(tgt, &mut states);
        transitions.push(FlatTransition {
            source,
            action,
            target,
            rate,
            derivations: Vec::new(),
        });
    }
    let count_error = |what: &str, want: usize, got: usize| ParseError {
        line: 0,
        column: 0,
        message: format!("header declares {want} {what}, file has {got}"),
    };
    if transitions.len() != m {
        return Err(count_error("transitions", m, transitions.len()));
    }
    if states.len() != k {
        return Err(count_error("states", k, states.len()));
    }
    Ok(FlatTS::from_parts(states, transitions))
}

pub fn export_report(report: &LiftReport) -> String {
    serde_json::to_string_pretty(report).expect("report is serialisable")
}
