//! Recursive-descent parser for the rule expression language.
//!
//! The language is a small XQuery subset extended with the `do enqueue` and
//! `do reset` update primitives. Two departures from XQuery: the bodies of
//! `then`, `else` and `return` may be comma sequences without parentheses,
//! and `(: comments :)` are also recognised inside direct element content.

use thiserror::Error;

use super::ast::*;
use super::value::Atomic;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at line {line}, column {column} near {token:?}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub offset: usize,
    pub token: String,
    pub message: String,
}

/// Parses a complete expression; trailing input is an error.
pub fn parse_expression(text: &str) -> Result<Expr, SyntaxError> {
    let mut p = Parser::new(text, 0);
    let e = p.parse_expr()?;
    p.skip_ws()?;
    if !p.at_end() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

/// Parses the longest expression starting at byte `start` and returns it with
/// the byte offset where parsing stopped. `sequence` selects a comma-level
/// expression instead of a single one.
pub(crate) fn parse_prefix(
    text: &str,
    start: usize,
    sequence: bool,
) -> Result<(Expr, usize), SyntaxError> {
    let mut p = Parser::new(text, start);
    let e = if sequence {
        p.parse_expr()?
    } else {
        p.restricted(|p| p.parse_expr_single())?
    };
    Ok((e, p.pos))
}

/// Skips whitespace and `(: :)` comments starting at byte `start`.
pub(crate) fn skip_trivia(text: &str, start: usize) -> Result<usize, SyntaxError> {
    let mut p = Parser::new(text, start);
    p.skip_ws()?;
    Ok(p.pos)
}

/// Builds a syntax error located at byte `offset` of `text`.
pub(crate) fn error_at(text: &str, offset: usize, message: impl Into<String>) -> SyntaxError {
    Parser::new(text, offset).error(message)
}

pub(crate) fn position_of(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub(crate) fn is_name_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

pub(crate) fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.')
}

const UNSUPPORTED_KEYWORDS: &[(&str, &str)] = &[
    ("typeswitch", "typeswitch expressions"),
    ("declare", "prolog declarations and user-defined functions"),
    ("module", "modules"),
    ("import", "module imports"),
    ("some", "quantified expressions"),
    ("every", "quantified expressions"),
];

const UNSUPPORTED_AXES: &[&str] = &[
    "parent",
    "ancestor",
    "ancestor-or-self",
    "following",
    "following-sibling",
    "preceding",
    "preceding-sibling",
    "self",
    "descendant",
    "namespace",
];

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    /// Nonzero while parsing an operand of a comma-separated construct, where
    /// `then`/`else`/`return` bodies must not swallow the comma.
    restrict: u32,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, pos: usize) -> Self {
        Parser {
            src,
            pos,
            restrict: 0,
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.rest().chars().nth(n)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn error(&self, message: impl Into<String>) -> SyntaxError {
        let (line, column) = position_of(self.src, self.pos);
        let token: String = self
            .rest()
            .chars()
            .take_while(|c| !c.is_whitespace())
            .take(20)
            .collect();
        SyntaxError {
            line,
            column,
            offset: self.pos,
            token,
            message: message.into(),
        }
    }

    fn restricted<T>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<T, SyntaxError>,
    ) -> Result<T, SyntaxError> {
        self.restrict += 1;
        let r = f(self);
        self.restrict -= 1;
        r
    }

    fn unrestricted<T>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<T, SyntaxError>,
    ) -> Result<T, SyntaxError> {
        let saved = std::mem::replace(&mut self.restrict, 0);
        let r = f(self);
        self.restrict = saved;
        r
    }

    fn skip_comment(&mut self) -> Result<(), SyntaxError> {
        // caller guarantees we are at "(:"
        let start = self.pos;
        self.pos += 2;
        let mut depth = 1;
        while depth > 0 {
            if self.rest().starts_with("(:") {
                depth += 1;
                self.pos += 2;
            } else if self.rest().starts_with(":)") {
                depth -= 1;
                self.pos += 2;
            } else if self.bump().is_none() {
                self.pos = start;
                return Err(self.error("unterminated comment"));
            }
        }
        Ok(())
    }

    fn skip_ws(&mut self) -> Result<(), SyntaxError> {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('(') if self.peek_at(1) == Some(':') => self.skip_comment()?,
                _ => return Ok(()),
            }
        }
    }

    fn eat(&mut self, s: &str) -> Result<bool, SyntaxError> {
        self.skip_ws()?;
        if self.rest().starts_with(s) {
            self.pos += s.len();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), SyntaxError> {
        if self.eat(s)? {
            Ok(())
        } else {
            Err(self.error(format!("expected '{s}'")))
        }
    }

    /// Looks at the next word without consuming it.
    fn peek_word(&mut self) -> Result<Option<&'a str>, SyntaxError> {
        self.skip_ws()?;
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if is_name_start(c) => {}
            _ => return Ok(None),
        }
        let end = rest
            .char_indices()
            .find(|&(_, c)| !is_name_char(c))
            .map_or(rest.len(), |(i, _)| i);
        Ok(Some(&rest[..end]))
    }

    fn at_keyword(&mut self, kw: &str) -> Result<bool, SyntaxError> {
        Ok(self.peek_word()? == Some(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> Result<bool, SyntaxError> {
        if self.at_keyword(kw)? {
            self.pos += kw.len();
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), SyntaxError> {
        if self.eat_keyword(kw)? {
            Ok(())
        } else {
            Err(self.error(format!("expected '{kw}'")))
        }
    }

    /// Keyword followed (after optional whitespace) by a given character.
    fn keyword_then(&mut self, kw: &str, next: char) -> Result<bool, SyntaxError> {
        if !self.at_keyword(kw)? {
            return Ok(false);
        }
        let after = self.src[self.pos + kw.len()..].trim_start();
        Ok(after.starts_with(next))
    }

    fn read_qname(&mut self) -> Result<String, SyntaxError> {
        self.skip_ws()?;
        let start = self.pos;
        match self.peek() {
            Some(c) if is_name_start(c) => {}
            _ => return Err(self.error("expected a name")),
        }
        while matches!(self.peek(), Some(c) if is_name_char(c)) {
            self.bump();
        }
        if self.peek() == Some(':') && matches!(self.peek_at(1), Some(c) if is_name_start(c)) {
            self.bump();
            while matches!(self.peek(), Some(c) if is_name_char(c)) {
                self.bump();
            }
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn read_var(&mut self) -> Result<String, SyntaxError> {
        self.expect("$")?;
        self.read_qname()
    }

    fn check_unsupported(&mut self) -> Result<(), SyntaxError> {
        let Some(word) = self.peek_word()? else {
            return Ok(());
        };
        let after = self.src[self.pos + word.len()..].trim_start();
        let hit = match word {
            "typeswitch" => after.starts_with('('),
            "some" | "every" => after.starts_with('$'),
            "declare" | "module" | "import" => after.chars().next().is_some_and(is_name_start),
            _ => false,
        };
        if hit {
            let what = UNSUPPORTED_KEYWORDS
                .iter()
                .find(|(kw, _)| *kw == word)
                .map_or("this construct", |(_, what)| what);
            return Err(self.error(format!("{what} are not supported")));
        }
        Ok(())
    }

    // Expr := ExprSingle ("," ExprSingle)*
    fn parse_expr(&mut self) -> Result<Expr, SyntaxError> {
        let first = self.parse_expr_single()?;
        let mut items = vec![first];
        loop {
            self.skip_ws()?;
            if self.peek() == Some(',') {
                self.bump();
                items.push(self.parse_expr_single()?);
            } else {
                break;
            }
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Expr::Sequence(items)
        })
    }

    /// Body of `then`, `else`, `return`.
    fn parse_body(&mut self) -> Result<Expr, SyntaxError> {
        if self.restrict > 0 {
            self.parse_expr_single()
        } else {
            self.parse_expr()
        }
    }

    fn parse_expr_single(&mut self) -> Result<Expr, SyntaxError> {
        self.check_unsupported()?;
        if self.keyword_then("for", '$')? || self.keyword_then("let", '$')? {
            return self.parse_flwor();
        }
        if self.keyword_then("if", '(')? {
            return self.parse_if();
        }
        if self.at_keyword("do")? {
            let after = self.src[self.pos + 2..].trim_start();
            if after.starts_with("enqueue") || after.starts_with("reset") {
                return self.parse_do();
            }
        }
        self.parse_or()
    }

    fn parse_flwor(&mut self) -> Result<Expr, SyntaxError> {
        enum Clause {
            For(String, Expr),
            Let(String, Expr),
        }
        let mut clauses = Vec::new();
        loop {
            if self.keyword_then("for", '$')? {
                self.expect_keyword("for")?;
                loop {
                    let var = self.read_var()?;
                    self.expect_keyword("in")?;
                    let src = self.restricted(|p| p.parse_expr_single())?;
                    clauses.push(Clause::For(var, src));
                    self.skip_ws()?;
                    if self.peek() == Some(',') && self.rest()[1..].trim_start().starts_with('$') {
                        self.bump();
                    } else {
                        break;
                    }
                }
            } else if self.keyword_then("let", '$')? {
                self.expect_keyword("let")?;
                loop {
                    let var = self.read_var()?;
                    self.expect(":=")?;
                    let value = self.restricted(|p| p.parse_expr_single())?;
                    clauses.push(Clause::Let(var, value));
                    self.skip_ws()?;
                    if self.peek() == Some(',') && self.rest()[1..].trim_start().starts_with('$') {
                        self.bump();
                    } else {
                        break;
                    }
                }
            } else {
                break;
            }
        }
        let mut filter = None;
        if self.eat_keyword("where")? {
            filter = Some(self.restricted(|p| p.parse_expr_single())?);
        }
        if self.at_keyword("order")? || self.at_keyword("stable")? {
            return Err(self.error("order by clauses are not supported"));
        }
        self.expect_keyword("return")?;
        let mut body = self.parse_body()?;
        // A where clause filters the innermost iteration.
        for clause in clauses.into_iter().rev() {
            body = match clause {
                Clause::For(var, source) => Expr::For {
                    var,
                    source: Box::new(source),
                    filter: filter.take().map(Box::new),
                    body: Box::new(body),
                },
                Clause::Let(var, value) => {
                    if let Some(w) = filter.take() {
                        body = Expr::If {
                            cond: Box::new(w),
                            then: Box::new(body),
                            otherwise: None,
                        };
                    }
                    Expr::Let {
                        var,
                        value: Box::new(value),
                        body: Box::new(body),
                    }
                }
            };
        }
        Ok(body)
    }

    fn parse_if(&mut self) -> Result<Expr, SyntaxError> {
        self.expect_keyword("if")?;
        self.expect("(")?;
        let cond = self.unrestricted(|p| p.parse_expr())?;
        self.expect(")")?;
        self.expect_keyword("then")?;
        let then = self.parse_body()?;
        let otherwise = if self.eat_keyword("else")? {
            Some(Box::new(self.parse_body()?))
        } else {
            None
        };
        Ok(Expr::If {
            cond: Box::new(cond),
            then: Box::new(then),
            otherwise,
        })
    }

    fn parse_do(&mut self) -> Result<Expr, SyntaxError> {
        self.expect_keyword("do")?;
        if self.eat_keyword("enqueue")? {
            let body = self.restricted(|p| p.parse_expr_single())?;
            self.expect_keyword("into")?;
            let queue = self.read_qname()?;
            let mut props = Vec::new();
            while self.eat_keyword("with")? {
                let name = self.read_qname()?;
                self.expect_keyword("value")?;
                let value = self.restricted(|p| p.parse_expr_single())?;
                props.push((name, value));
            }
            return Ok(Expr::Enqueue {
                body: Box::new(body),
                queue,
                props,
            });
        }
        self.expect_keyword("reset")?;
        // `do reset Slicing key Expr`; without the `key` keyword it has no
        // arguments.
        let save = self.pos;
        if self.peek_word()?.is_some() {
            let name = self.read_qname()?;
            if self.eat_keyword("key")? {
                let key = self.restricted(|p| p.parse_expr_single())?;
                return Ok(Expr::Reset {
                    target: Some(ResetTarget {
                        slicing: name,
                        key: Box::new(key),
                    }),
                });
            }
            self.pos = save;
        }
        Ok(Expr::Reset { target: None })
    }

    fn parse_or(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_and()?;
        while self.eat_keyword("or")? {
            let rhs = self.parse_and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_comparison()?;
        while self.eat_keyword("and")? {
            let rhs = self.parse_comparison()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_comparison(&mut self) -> Result<Expr, SyntaxError> {
        let lhs = self.parse_path()?;
        self.reject_arithmetic()?;
        let op = if self.eat("!=")? {
            Some(CompareOp::Ne)
        } else if self.eat("<=")? {
            Some(CompareOp::Le)
        } else if self.eat(">=")? {
            Some(CompareOp::Ge)
        } else if self.eat("=")? {
            Some(CompareOp::Eq)
        } else if self.eat("<")? {
            Some(CompareOp::Lt)
        } else if self.eat(">")? {
            Some(CompareOp::Gt)
        } else {
            let word_ops = [
                ("eq", CompareOp::Eq),
                ("ne", CompareOp::Ne),
                ("lt", CompareOp::Lt),
                ("le", CompareOp::Le),
                ("gt", CompareOp::Gt),
                ("ge", CompareOp::Ge),
            ];
            let mut found = None;
            for (w, op) in word_ops {
                if self.eat_keyword(w)? {
                    found = Some(op);
                    break;
                }
            }
            found
        };
        let Some(op) = op else {
            return Ok(lhs);
        };
        let rhs = self.parse_path()?;
        self.reject_arithmetic()?;
        Ok(Expr::Compare {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        })
    }

    fn reject_arithmetic(&mut self) -> Result<(), SyntaxError> {
        self.skip_ws()?;
        if matches!(self.peek(), Some('+' | '-' | '*' | '|')) {
            return Err(self.error("arithmetic and set operators are not supported"));
        }
        for w in ["div", "idiv", "mod", "union", "intersect", "except", "to"] {
            if self.at_keyword(w)? {
                return Err(self.error(format!("operator '{w}' is not supported")));
            }
        }
        Ok(())
    }

    fn starts_step(&mut self) -> Result<bool, SyntaxError> {
        self.skip_ws()?;
        Ok(match self.peek() {
            Some(c) if is_name_start(c) => true,
            Some('*' | '@') => true,
            Some('.') => self.peek_at(1) == Some('.'),
            _ => false,
        })
    }

    fn parse_path(&mut self) -> Result<Expr, SyntaxError> {
        self.skip_ws()?;
        if self.rest().starts_with("//") {
            self.pos += 2;
            let mut steps = vec![descendant_step()];
            steps.push(self.parse_axis_step()?);
            self.parse_more_steps(&mut steps)?;
            return Ok(Expr::Path(PathExpr {
                start: PathStart::Root,
                steps,
            }));
        }
        if self.peek() == Some('/') {
            self.pos += 1;
            let mut steps = Vec::new();
            if self.starts_step()? {
                steps.push(self.parse_axis_step()?);
                self.parse_more_steps(&mut steps)?;
            }
            return Ok(Expr::Path(PathExpr {
                start: PathStart::Root,
                steps,
            }));
        }
        // Relative path: either a filter expression or an axis step first.
        if self.starts_primary()? {
            let base = self.parse_filter()?;
            let mut steps = Vec::new();
            self.parse_more_steps(&mut steps)?;
            if steps.is_empty() {
                return Ok(base);
            }
            return Ok(Expr::Path(PathExpr {
                start: PathStart::Expr(Box::new(base)),
                steps,
            }));
        }
        if self.starts_step()? {
            let mut steps = vec![self.parse_axis_step()?];
            self.parse_more_steps(&mut steps)?;
            return Ok(Expr::Path(PathExpr {
                start: PathStart::Context,
                steps,
            }));
        }
        Err(self.error("expected an expression"))
    }

    fn parse_more_steps(&mut self, steps: &mut Vec<Step>) -> Result<(), SyntaxError> {
        loop {
            self.skip_ws()?;
            if self.rest().starts_with("//") {
                self.pos += 2;
                steps.push(descendant_step());
                steps.push(self.parse_axis_step()?);
            } else if self.peek() == Some('/') {
                self.pos += 1;
                steps.push(self.parse_axis_step()?);
            } else {
                return Ok(());
            }
        }
    }

    /// Whether the upcoming token begins a primary expression rather than an
    /// axis step.
    fn starts_primary(&mut self) -> Result<bool, SyntaxError> {
        self.skip_ws()?;
        let Some(c) = self.peek() else {
            return Ok(false);
        };
        Ok(match c {
            '$' | '(' | '"' | '\'' => true,
            '.' => self.peek_at(1) != Some('.'),
            '0'..='9' => true,
            '<' => matches!(self.peek_at(1), Some(c) if is_name_start(c)),
            c if is_name_start(c) => {
                let full_end = {
                    let mut q = Parser::new(self.src, self.pos);
                    q.read_qname()?;
                    q.pos
                };
                let after = self.src[full_end..].trim_start();
                let name = &self.src[self.pos..full_end];
                after.starts_with('(')
                    && !after.starts_with("(:")
                    && !matches!(name, "node" | "text")
            }
            _ => false,
        })
    }

    fn parse_axis_step(&mut self) -> Result<Step, SyntaxError> {
        self.skip_ws()?;
        if self.rest().starts_with("..") {
            return Err(self.error("the parent axis is not supported"));
        }
        let axis = if self.peek() == Some('@') {
            self.bump();
            Axis::Attribute
        } else {
            let save = self.pos;
            if matches!(self.peek(), Some(c) if is_name_start(c)) {
                let word = self.peek_word()?.unwrap_or("").to_string();
                let after_word = self.pos + word.len();
                if self.src[after_word..].trim_start().starts_with("::") {
                    self.pos = after_word;
                    self.expect("::")?;
                    match word.as_str() {
                        "child" => Axis::Child,
                        "descendant-or-self" => Axis::DescendantOrSelf,
                        "attribute" => Axis::Attribute,
                        w if UNSUPPORTED_AXES.contains(&w) => {
                            self.pos = save;
                            return Err(self.error(format!("the {w} axis is not supported")));
                        }
                        w => {
                            self.pos = save;
                            return Err(self.error(format!("unknown axis '{w}'")));
                        }
                    }
                } else {
                    Axis::Child
                }
            } else {
                Axis::Child
            }
        };
        self.skip_ws()?;
        let test = if self.peek() == Some('*') {
            self.bump();
            NodeTest::Wildcard
        } else {
            let name = self.read_qname()?;
            let after = self.rest().trim_start();
            if (name == "node" || name == "text") && after.starts_with('(') {
                self.expect("(")?;
                self.expect(")")?;
                if name == "node" {
                    NodeTest::AnyNode
                } else {
                    NodeTest::Text
                }
            } else {
                NodeTest::Name(name)
            }
        };
        let predicates = self.parse_predicates()?;
        Ok(Step {
            axis,
            test,
            predicates,
        })
    }

    fn parse_predicates(&mut self) -> Result<Vec<Expr>, SyntaxError> {
        let mut preds = Vec::new();
        loop {
            self.skip_ws()?;
            if self.peek() != Some('[') {
                return Ok(preds);
            }
            self.bump();
            let e = self.unrestricted(|p| p.parse_expr())?;
            self.expect("]")?;
            preds.push(e);
        }
    }

    fn parse_filter(&mut self) -> Result<Expr, SyntaxError> {
        let base = self.parse_primary()?;
        let predicates = self.parse_predicates()?;
        if predicates.is_empty() {
            Ok(base)
        } else {
            Ok(Expr::Filter {
                base: Box::new(base),
                predicates,
            })
        }
    }

    fn parse_primary(&mut self) -> Result<Expr, SyntaxError> {
        self.skip_ws()?;
        let Some(c) = self.peek() else {
            return Err(self.error("unexpected end of input"));
        };
        match c {
            '$' => Ok(Expr::Var(self.read_var()?)),
            '(' => {
                self.bump();
                self.skip_ws()?;
                if self.peek() == Some(')') {
                    self.bump();
                    return Ok(Expr::EmptySeq);
                }
                let e = self.unrestricted(|p| p.parse_expr())?;
                self.expect(")")?;
                Ok(e)
            }
            '"' | '\'' => Ok(Expr::Literal(Atomic::Str(self.read_string_literal()?))),
            '.' => {
                self.bump();
                Ok(Expr::ContextItem)
            }
            '0'..='9' => self.read_number(),
            '<' => Ok(Expr::Element(self.parse_element_ctor()?)),
            _ => {
                let name = self.read_qname()?;
                self.expect("(")?;
                let mut args = Vec::new();
                self.skip_ws()?;
                if self.peek() == Some(')') {
                    self.bump();
                } else {
                    loop {
                        args.push(self.unrestricted(|p| p.restricted(|p| p.parse_expr_single()))?);
                        self.skip_ws()?;
                        match self.bump() {
                            Some(',') => continue,
                            Some(')') => break,
                            _ => return Err(self.error("expected ',' or ')' in argument list")),
                        }
                    }
                }
                if args.is_empty() {
                    match crate::xml::local_part(&name) {
                        "true" => return Ok(Expr::Literal(Atomic::Bool(true))),
                        "false" => return Ok(Expr::Literal(Atomic::Bool(false))),
                        _ => {}
                    }
                }
                Ok(Expr::Call { name, args })
            }
        }
    }

    fn read_string_literal(&mut self) -> Result<String, SyntaxError> {
        let quote = self.bump().unwrap();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(self.error("unterminated string literal")),
                Some(c) if c == quote => {
                    if self.peek() == Some(quote) {
                        self.bump();
                        out.push(quote);
                    } else {
                        return Ok(out);
                    }
                }
                Some(c) => out.push(c),
            }
        }
    }

    fn read_number(&mut self) -> Result<Expr, SyntaxError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.bump();
        }
        let mut decimal = false;
        if self.peek() == Some('.') && matches!(self.peek_at(1), Some(c) if c.is_ascii_digit()) {
            decimal = true;
            self.bump();
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.bump();
            }
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let save = self.pos;
            self.bump();
            if matches!(self.peek(), Some('+' | '-')) {
                self.bump();
            }
            if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                decimal = true;
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.bump();
                }
            } else {
                self.pos = save;
            }
        }
        let text = &self.src[start..self.pos];
        if decimal {
            text.parse::<f64>()
                .map(|d| Expr::Literal(Atomic::Dec(d)))
                .map_err(|_| self.error("invalid number"))
        } else {
            text.parse::<i64>()
                .map(|i| Expr::Literal(Atomic::Int(i)))
                .map_err(|_| self.error("integer literal out of range"))
        }
    }

    fn read_entity(&mut self) -> Result<String, SyntaxError> {
        // at '&'
        let end = self.rest().find(';').ok_or_else(|| self.error("unterminated entity reference"))?;
        let name = &self.rest()[1..end];
        let resolved = match name {
            "lt" => "<".to_string(),
            "gt" => ">".to_string(),
            "amp" => "&".to_string(),
            "quot" => "\"".to_string(),
            "apos" => "'".to_string(),
            n if n.starts_with("#x") => u32::from_str_radix(&n[2..], 16)
                .ok()
                .and_then(char::from_u32)
                .map(String::from)
                .ok_or_else(|| self.error("invalid character reference"))?,
            n if n.starts_with('#') => n[1..]
                .parse::<u32>()
                .ok()
                .and_then(char::from_u32)
                .map(String::from)
                .ok_or_else(|| self.error("invalid character reference"))?,
            _ => return Err(self.error(format!("unknown entity &{name};"))),
        };
        self.pos += end + 1;
        Ok(resolved)
    }

    fn read_tag_name(&mut self) -> Result<String, SyntaxError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if is_name_char(c) || c == ':') {
            self.bump();
        }
        if start == self.pos {
            return Err(self.error("expected an element name"));
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn skip_xml_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn parse_element_ctor(&mut self) -> Result<ElementCtor, SyntaxError> {
        self.expect("<")?;
        let name = self.read_tag_name()?;
        let mut attributes = Vec::new();
        loop {
            self.skip_xml_ws();
            if self.rest().starts_with("/>") {
                self.pos += 2;
                return Ok(ElementCtor {
                    name,
                    attributes,
                    content: Vec::new(),
                });
            }
            if self.peek() == Some('>') {
                self.bump();
                break;
            }
            let attr = self.read_tag_name()?;
            self.skip_xml_ws();
            if self.bump() != Some('=') {
                return Err(self.error("expected '=' in attribute"));
            }
            self.skip_xml_ws();
            let quote = match self.bump() {
                Some(q @ ('"' | '\'')) => q,
                _ => return Err(self.error("expected a quoted attribute value")),
            };
            attributes.push((attr, self.parse_attr_value(quote)?));
        }
        let content = self.parse_element_content(&name)?;
        Ok(ElementCtor {
            name,
            attributes,
            content,
        })
    }

    fn parse_attr_value(&mut self, quote: char) -> Result<Vec<AttrPart>, SyntaxError> {
        let mut parts = Vec::new();
        let mut text = String::new();
        loop {
            match self.peek() {
                None => return Err(self.error("unterminated attribute value")),
                Some(c) if c == quote => {
                    self.bump();
                    if self.peek() == Some(quote) {
                        self.bump();
                        text.push(quote);
                        continue;
                    }
                    break;
                }
                Some('{') if self.peek_at(1) == Some('{') => {
                    self.pos += 2;
                    text.push('{');
                }
                Some('}') if self.peek_at(1) == Some('}') => {
                    self.pos += 2;
                    text.push('}');
                }
                Some('{') => {
                    self.bump();
                    if !text.is_empty() {
                        parts.push(AttrPart::Text(std::mem::take(&mut text)));
                    }
                    let e = self.unrestricted(|p| p.parse_expr())?;
                    self.expect("}")?;
                    parts.push(AttrPart::Enclosed(e));
                }
                Some('&') => text.push_str(&self.read_entity()?),
                Some(c) => {
                    self.bump();
                    text.push(c);
                }
            }
        }
        if !text.is_empty() {
            parts.push(AttrPart::Text(text));
        }
        Ok(parts)
    }

    fn parse_element_content(&mut self, name: &str) -> Result<Vec<Content>, SyntaxError> {
        // (text, significant): whitespace-only literal runs between other
        // content are boundary whitespace and get dropped.
        let mut raw: Vec<Result<(String, bool), Content>> = Vec::new();
        let mut text = String::new();
        let flush = |text: &mut String, raw: &mut Vec<Result<(String, bool), Content>>| {
            if !text.is_empty() {
                raw.push(Ok((std::mem::take(text), false)));
            }
        };
        loop {
            let rest = self.rest();
            if rest.is_empty() {
                return Err(self.error(format!("unterminated element <{name}>")));
            }
            if rest.starts_with("</") {
                flush(&mut text, &mut raw);
                self.pos += 2;
                let close = self.read_tag_name()?;
                if close != name {
                    return Err(self.error(format!("mismatched end tag </{close}> for <{name}>")));
                }
                self.skip_xml_ws();
                if self.bump() != Some('>') {
                    return Err(self.error("expected '>'"));
                }
                break;
            } else if rest.starts_with("<!--") {
                let end = rest
                    .find("-->")
                    .ok_or_else(|| self.error("unterminated XML comment"))?;
                self.pos += end + 3;
            } else if rest.starts_with("<![CDATA[") {
                flush(&mut text, &mut raw);
                let end = rest
                    .find("]]>")
                    .ok_or_else(|| self.error("unterminated CDATA section"))?;
                raw.push(Ok((rest[9..end].to_string(), true)));
                self.pos += end + 3;
            } else if rest.starts_with('<') {
                flush(&mut text, &mut raw);
                let el = self.parse_element_ctor()?;
                raw.push(Err(Content::Element(el)));
            } else if rest.starts_with("{{") {
                text.push('{');
                self.pos += 2;
            } else if rest.starts_with("}}") {
                text.push('}');
                self.pos += 2;
            } else if rest.starts_with('{') {
                flush(&mut text, &mut raw);
                self.bump();
                let e = self.unrestricted(|p| p.parse_expr())?;
                self.expect("}")?;
                raw.push(Err(Content::Enclosed(e)));
            } else if rest.starts_with("(:") {
                self.skip_comment()?;
            } else if rest.starts_with('&') {
                flush(&mut text, &mut raw);
                let s = self.read_entity()?;
                raw.push(Ok((s, true)));
            } else {
                text.push(self.bump().unwrap());
            }
        }
        let mut content = Vec::new();
        let mut pending = String::new();
        let mut pending_significant = false;
        for item in raw {
            match item {
                Ok((s, significant)) => {
                    pending.push_str(&s);
                    pending_significant |= significant;
                }
                Err(c) => {
                    if !pending.is_empty() && (pending_significant || !pending.trim().is_empty()) {
                        content.push(Content::Text(std::mem::take(&mut pending)));
                    }
                    pending.clear();
                    pending_significant = false;
                    content.push(c);
                }
            }
        }
        if !pending.is_empty() && (pending_significant || !pending.trim().is_empty()) {
            content.push(Content::Text(pending));
        }
        Ok(content)
    }
}

fn descendant_step() -> Step {
    Step {
        axis: Axis::DescendantOrSelf,
        test: NodeTest::AnyNode,
        predicates: Vec::new(),
    }
}
