//! The line-oriented model file format.
//!
//! ```text
//! # comment
//! plate P1 card=20 reduced=5
//! latent theta2 dim=2 plates=() ~ Normal(0, 1)
//! latent theta1 dim=2 plates=(P1) ~ Normal(theta2, 1)
//! observed x dim=2 plates=(P1, P0) ~ Normal(theta1, 1)
//! ```
//!
//! `reduced` defaults to `card`, `dim` to 1 and `plates` to `()`. Printing a
//! parsed [`TemplateGraph`] yields the normalized form of the same model.

use std::path::Path;

use super::expr::parse_expr_at;
use super::template::{PlateDecl, RvTemplateDecl, TemplateGraph};
use crate::dist::DistKind;
use crate::error::{Error, Result};

/// The bundled Gaussian random effects model.
pub const GRE_MODEL: &str = include_str!("../../models/gre.model");
/// The bundled hierarchical variance model.
pub const HV_MODEL: &str = include_str!("../../models/hv.model");

pub fn parse_model(src: &str) -> Result<TemplateGraph> {
    let mut plates = Vec::new();
    let mut templates = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let text = match raw.find('#') {
            Some(k) => &raw[..k],
            None => raw,
        };
        if text.trim().is_empty() {
            continue;
        }
        let mut cur = Cursor::new(text, line);
        let keyword = cur.word()?;
        match keyword.0.as_str() {
            "plate" => plates.push(parse_plate(&mut cur)?),
            "latent" => templates.push(parse_template(&mut cur, false)?),
            "observed" => templates.push(parse_template(&mut cur, true)?),
            other => {
                return Err(cur.error_at(
                    keyword.1,
                    format!("expected `plate`, `latent` or `observed`, found `{other}`"),
                ))
            }
        }
    }
    TemplateGraph::new(plates, templates)
}

pub fn parse_model_file(path: impl AsRef<Path>) -> Result<TemplateGraph> {
    let src = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_model(&src)
}

/// Parses a `NAME=N` plate cardinality assignment as given on the command
/// line. Errors carry the 1-based column within `s`.
pub fn parse_card_flag(s: &str) -> Result<(String, usize)> {
    let mut cur = Cursor::new(s, 1);
    let (name, _) = cur.word()?;
    cur.expect('=')?;
    cur.skip_ws();
    let start = cur.col();
    let digits: String = s
        .chars()
        .skip(cur.pos)
        .collect::<String>()
        .trim_end()
        .to_string();
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return Err(cur.error_at(start, format!("expected a cardinality after `{name}=`")));
    }
    let n = digits
        .parse::<usize>()
        .map_err(|_| cur.error_at(start, format!("cardinality `{digits}` is too large")))?;
    Ok((name, n))
}

fn parse_plate(cur: &mut Cursor) -> Result<PlateDecl> {
    let (name, _) = cur.word()?;
    let mut card = None;
    let mut reduced = None;
    while !cur.at_end() {
        let (key, col) = cur.word()?;
        cur.expect('=')?;
        let value = cur.number()?;
        match key.as_str() {
            "card" => card = Some(value),
            "reduced" => reduced = Some(value),
            other => return Err(cur.error_at(col, format!("unknown plate attribute `{other}`"))),
        }
    }
    let card =
        card.ok_or_else(|| cur.error_at(cur.end_col(), format!("plate `{name}` needs card=N")))?;
    Ok(PlateDecl {
        name,
        card,
        reduced_card: reduced.unwrap_or(card),
    })
}

fn parse_template(cur: &mut Cursor, observed: bool) -> Result<RvTemplateDecl> {
    let (name, _) = cur.word()?;
    let mut dim = 1;
    let mut plates = Vec::new();
    loop {
        cur.skip_ws();
        if cur.peek() == Some('~') {
            cur.bump();
            break;
        }
        if cur.at_end() {
            return Err(cur.error_at(cur.end_col(), "expected `~ Dist(loc, scale)`".into()));
        }
        let (key, col) = cur.word()?;
        cur.expect('=')?;
        match key.as_str() {
            "dim" => dim = cur.number()?,
            "plates" => plates = cur.name_list()?,
            other => return Err(cur.error_at(col, format!("unknown template attribute `{other}`"))),
        }
    }
    let (kind_name, kcol) = cur.word()?;
    let kind = match kind_name.as_str() {
        "Normal" => DistKind::Normal,
        "LogNormal" => DistKind::LogNormal,
        other => return Err(cur.error_at(kcol, format!("unknown distribution `{other}`"))),
    };
    cur.expect('(')?;
    let args = cur.call_args()?;
    if !cur.at_end() {
        let col = cur.col();
        return Err(cur.error_at(col, "trailing characters after distribution".into()));
    }
    if args.len() != 2 {
        return Err(cur.error_at(
            kcol,
            format!(
                "{kind_name} takes (loc, scale), got {} arguments",
                args.len()
            ),
        ));
    }
    let loc = parse_expr_at(&args[0].0, cur.line, args[0].1)?;
    let scale = parse_expr_at(&args[1].0, cur.line, args[1].1)?;
    Ok(RvTemplateDecl {
        name,
        dim,
        plates,
        kind,
        loc,
        scale,
        observed,
    })
}

struct Cursor {
    chars: Vec<char>,
    pos: usize,
    line: usize,
}

impl Cursor {
    fn new(text: &str, line: usize) -> Self {
        Cursor {
            chars: text.chars().collect(),
            pos: 0,
            line,
        }
    }

    fn col(&self) -> usize {
        self.pos + 1
    }

    fn end_col(&self) -> usize {
        self.chars.len() + 1
    }

    fn error_at(&self, column: usize, message: String) -> Error {
        Error::Parse {
            line: self.line,
            column,
            message,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) {
        self.pos += 1;
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.chars.len()
    }

    fn word(&mut self) -> Result<(String, usize)> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        if start == self.pos {
            let msg = match self.peek() {
                Some(c) => format!("expected a name, found `{c}`"),
                None => "expected a name".to_string(),
            };
            return Err(self.error_at(start + 1, msg));
        }
        Ok((self.chars[start..self.pos].iter().collect(), start + 1))
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error_at(self.col(), format!("expected `{c}`")))
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse()
            .map_err(|_| self.error_at(start + 1, "expected a non-negative integer".into()))
    }

    fn name_list(&mut self) -> Result<Vec<String>> {
        self.expect('(')?;
        let mut out = Vec::new();
        self.skip_ws();
        if self.peek() == Some(')') {
            self.bump();
            return Ok(out);
        }
        loop {
            out.push(self.word()?.0);
            self.skip_ws();
            match self.peek() {
                Some(',') => self.bump(),
                Some(')') => {
                    self.bump();
                    return Ok(out);
                }
                _ => return Err(self.error_at(self.col(), "expected `,` or `)`".into())),
            }
        }
    }

    /// Splits `a, b)` at top-level commas, consuming the closing paren.
    /// Returns each argument with the column of its first character.
    fn call_args(&mut self) -> Result<Vec<(String, usize)>> {
        let open = self.pos;
        let mut depth = 0usize;
        let mut args = Vec::new();
        let mut start = self.pos;
        while let Some(c) = self.peek() {
            match c {
                '(' => depth += 1,
                ')' if depth == 0 => {
                    args.push((self.chars[start..self.pos].iter().collect(), start + 1));
                    self.bump();
                    return Ok(args);
                }
                ')' => depth -= 1,
                ',' if depth == 0 => {
                    args.push((self.chars[start..self.pos].iter().collect(), start + 1));
                    start = self.pos + 1;
                }
                _ => {}
            }
            self.bump();
        }
        Err(self.error_at(open, "unclosed `(`".into()))
    }
}
