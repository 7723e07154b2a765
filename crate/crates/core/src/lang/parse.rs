use thiserror::Error;

use super::*;
use crate::expr::ast::{Axis, NodeTest, PathStart};
use crate::expr::parser::{error_at, is_name_char, is_name_start, parse_prefix, position_of, skip_trivia};
use crate::expr::{Atomic, SyntaxError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LangError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("unknown keyword {keyword:?} at line {line}, column {column}")]
    UnknownKeyword {
        keyword: String,
        line: usize,
        column: usize,
    },
}

/// Parses application text into its statements, in declaration order.
/// Names are not resolved here; see [`validate_application`].
pub fn parse_application(text: &str) -> Result<ApplicationDef, LangError> {
    let mut c = Cursor { text, pos: 0 };
    let mut app = ApplicationDef::default();
    loop {
        c.trivia()?;
        if c.at_end() {
            break;
        }
        c.expect_word("create")?;
        let what = c.name("statement kind")?;
        match what.as_str() {
            "queue" => app.queues.push(c.queue()?),
            "property" => app.properties.push(c.property()?),
            "slicing" => app.slicings.push(c.slicing()?),
            "rule" => app.rules.push(c.rule()?),
            _ => {
                return Err(c.err_back(
                    what.len(),
                    format!("expected queue, property, slicing or rule after create, found {what:?}"),
                ))
            }
        }
    }
    for rule in &mut app.rules {
        let is_queue = app.queues.iter().any(|q| q.name == rule.target);
        let is_slicing = app.slicings.iter().any(|s| s.name == rule.target);
        if is_slicing && !is_queue {
            rule.target_kind = TargetKind::Slicing;
        }
    }
    Ok(app)
}

const QUEUE_CLAUSES: &[&str] = &[
    "kind",
    "mode",
    "priority",
    "errorqueue",
    "endpoint",
    "interface",
    "using",
    "schema",
    "conform",
];

const ANNOTATIONS: &[&str] = &["interface", "using", "schema", "conform"];

struct Cursor<'t> {
    text: &'t str,
    pos: usize,
}

impl<'t> Cursor<'t> {
    fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    fn rest(&self) -> &'t str {
        &self.text[self.pos..]
    }

    fn trivia(&mut self) -> Result<(), SyntaxError> {
        self.pos = skip_trivia(self.text, self.pos)?;
        Ok(())
    }

    fn err(&self, message: impl Into<String>) -> SyntaxError {
        error_at(self.text, self.pos, message)
    }

    fn err_back(&self, len: usize, message: impl Into<String>) -> LangError {
        error_at(self.text, self.pos - len, message).into()
    }

    fn unknown_keyword(&self, word: &str) -> LangError {
        let (line, column) = position_of(self.text, self.pos - word.len());
        LangError::UnknownKeyword {
            keyword: word.to_string(),
            line,
            column,
        }
    }

    /// Length of the (possibly prefixed) name at the cursor, or 0.
    fn name_len(&self) -> usize {
        let rest = self.rest();
        let mut chars = rest.char_indices().peekable();
        match chars.peek() {
            Some((_, c)) if is_name_start(*c) => {}
            _ => return 0,
        }
        let mut end = 0;
        let mut seen_colon = false;
        while let Some((i, c)) = chars.next() {
            if is_name_char(c) {
                end = i + c.len_utf8();
            } else if c == ':' && !seen_colon {
                match chars.peek() {
                    Some((_, n)) if is_name_start(*n) => seen_colon = true,
                    _ => break,
                }
            } else {
                break;
            }
        }
        end
    }

    fn peek_name(&mut self) -> Result<&'t str, SyntaxError> {
        self.trivia()?;
        let len = self.name_len();
        Ok(&self.text[self.pos..self.pos + len])
    }

    fn name(&mut self, what: &str) -> Result<String, SyntaxError> {
        let n = self.peek_name()?;
        if n.is_empty() {
            return Err(self.err(format!("expected {what}")));
        }
        self.pos += n.len();
        Ok(n.to_string())
    }

    fn eat_word(&mut self, word: &str) -> Result<bool, SyntaxError> {
        if self.peek_name()? == word {
            self.pos += word.len();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn expect_word(&mut self, word: &str) -> Result<(), SyntaxError> {
        if self.eat_word(word)? {
            Ok(())
        } else {
            Err(self.err(format!("expected '{word}'")))
        }
    }

    fn eat_char(&mut self, ch: char) -> Result<bool, SyntaxError> {
        self.trivia()?;
        if self.rest().starts_with(ch) {
            self.pos += ch.len_utf8();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// A whitespace-delimited token taken verbatim.
    fn raw_word(&mut self) -> Result<&'t str, SyntaxError> {
        self.trivia()?;
        let len = self
            .rest()
            .find(|c: char| c.is_whitespace())
            .unwrap_or(self.rest().len());
        let w = &self.text[self.pos..self.pos + len];
        self.pos += len;
        Ok(w)
    }

    fn string_literal(&mut self) -> Result<String, SyntaxError> {
        self.trivia()?;
        let quote = match self.rest().chars().next() {
            Some(q @ ('"' | '\'')) => q,
            _ => return Err(self.err("expected a string literal")),
        };
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        loop {
            let Some(c) = self.rest().chars().next() else {
                self.pos = start;
                return Err(self.err("unterminated string literal"));
            };
            self.pos += c.len_utf8();
            if c == quote {
                if self.rest().starts_with(quote) {
                    self.pos += 1;
                    out.push(quote);
                } else {
                    return Ok(out);
                }
            } else {
                out.push(c);
            }
        }
    }

    fn queue(&mut self) -> Result<QueueDescriptor, LangError> {
        let name = self.name("queue name")?;
        let mut kind = None;
        let mut mode = None;
        let mut priority = None;
        let mut endpoint = None;
        let mut errorqueue = None;
        let mut annotations = Vec::new();
        loop {
            let word = self.peek_name()?;
            if !QUEUE_CLAUSES.contains(&word) {
                break;
            }
            self.pos += word.len();
            let duplicate = |c: &Self| c.err_back(word.len(), format!("duplicate {word} clause"));
            match word {
                "kind" => {
                    if kind.is_some() {
                        return Err(duplicate(self));
                    }
                    let k = self.name("queue kind")?;
                    kind = Some(QueueKind::from_keyword(&k).ok_or_else(|| self.unknown_keyword(&k))?);
                }
                "mode" => {
                    if mode.is_some() {
                        return Err(duplicate(self));
                    }
                    let m = self.name("queue mode")?;
                    mode = Some(QueueMode::from_keyword(&m).ok_or_else(|| self.unknown_keyword(&m))?);
                }
                "priority" => {
                    if priority.is_some() {
                        return Err(duplicate(self));
                    }
                    let w = self.raw_word()?;
                    priority = Some(w.parse::<u32>().map_err(|_| {
                        self.err_back(w.len(), "priority must be a non-negative integer")
                    })?);
                }
                "errorqueue" => {
                    if errorqueue.is_some() {
                        return Err(duplicate(self));
                    }
                    errorqueue = Some(self.name("error queue name")?);
                }
                "endpoint" => {
                    if endpoint.is_some() {
                        return Err(duplicate(self));
                    }
                    endpoint = Some(self.string_literal()?);
                }
                kw => {
                    debug_assert!(ANNOTATIONS.contains(&kw));
                    let mut words = Vec::new();
                    loop {
                        let next = self.peek_name()?;
                        if QUEUE_CLAUSES.contains(&next) || next == "create" {
                            break;
                        }
                        self.trivia()?;
                        if self.at_end() {
                            break;
                        }
                        words.push(self.raw_word()?.to_string());
                    }
                    annotations.push(Annotation {
                        keyword: kw.to_string(),
                        words,
                    });
                }
            }
        }
        let kind = kind.ok_or_else(|| self.err(format!("queue {name} needs a kind clause")))?;
        Ok(QueueDescriptor {
            name,
            kind,
            mode: mode.unwrap_or(QueueMode::Persistent),
            priority: priority.unwrap_or(0),
            endpoint,
            errorqueue,
            annotations,
        })
    }

    fn property(&mut self) -> Result<PropertyDef, LangError> {
        let name = self.name("property name")?;
        self.expect_word("as")?;
        let ty = self.name("property type")?;
        let value_type = ValueType::from_xs_name(&ty).ok_or_else(|| self.unknown_keyword(&ty))?;
        let mut fixed = false;
        let mut inherited = false;
        loop {
            if self.eat_word("fixed")? {
                fixed = true;
            } else if self.eat_word("inherited")? {
                inherited = true;
            } else {
                break;
            }
        }
        let mut clauses = Vec::new();
        while self.eat_word("queue")? {
            let mut queues = vec![self.name("queue name")?];
            while self.eat_char(',')? {
                queues.push(self.name("queue name")?);
            }
            let value = if self.eat_word("value")? {
                Some(self.expr(false)?)
            } else {
                None
            };
            clauses.push(PropertyClause { queues, value });
        }
        Ok(PropertyDef {
            name,
            value_type,
            fixed,
            inherited,
            clauses,
        })
    }

    fn slicing(&mut self) -> Result<SlicingDef, LangError> {
        let name = self.name("slicing name")?;
        self.expect_word("on")?;
        let property = self.name("property name")?;
        Ok(SlicingDef { name, property })
    }

    fn rule(&mut self) -> Result<RuleDef, LangError> {
        let name = self.name("rule name")?;
        self.expect_word("for")?;
        let target = self.name("rule target")?;
        let errorqueue = if self.eat_word("errorqueue")? {
            Some(self.name("error queue name")?)
        } else {
            None
        };
        let body = self.expr(true)?;
        Ok(RuleDef {
            name,
            target,
            target_kind: TargetKind::Queue,
            errorqueue,
            body,
        })
    }

    fn expr(&mut self, sequence: bool) -> Result<Expr, SyntaxError> {
        self.trivia()?;
        let (e, end) = parse_prefix(self.text, self.pos, sequence)?;
        self.pos = end;
        Ok(bare_boolean(e))
    }
}

/// `value false` names a constant rather than a child element.
fn bare_boolean(e: Expr) -> Expr {
    if let Expr::Path(p) = &e {
        if let (PathStart::Context, [step]) = (&p.start, p.steps.as_slice()) {
            if step.axis == Axis::Child && step.predicates.is_empty() {
                if let NodeTest::Name(n) = &step.test {
                    match n.as_str() {
                        "true" => return Expr::Literal(Atomic::Bool(true)),
                        "false" => return Expr::Literal(Atomic::Bool(false)),
                        _ => {}
                    }
                }
            }
        }
    }
    e
}
