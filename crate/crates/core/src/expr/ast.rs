//! Expression syntax tree and its canonical textual rendering.
//!
//! Rendering produces text that [`parse_expression`](super::parse_expression)
//! reads back into an identical tree.

use std::fmt::{self, Write as _};

use super::value::{format_decimal, Atomic};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Atomic),
    EmptySeq,
    Var(String),
    ContextItem,
    Sequence(Vec<Expr>),
    Let {
        var: String,
        value: Box<Expr>,
        body: Box<Expr>,
    },
    For {
        var: String,
        source: Box<Expr>,
        filter: Option<Box<Expr>>,
        body: Box<Expr>,
    },
    If {
        cond: Box<Expr>,
        then: Box<Expr>,
        otherwise: Option<Box<Expr>>,
    },
    Path(PathExpr),
    /// A primary expression followed by predicates, e.g. `$x[1]`.
    Filter {
        base: Box<Expr>,
        predicates: Vec<Expr>,
    },
    Compare {
        op: CompareOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Call {
        name: String,
        args: Vec<Expr>,
    },
    Element(ElementCtor),
    Enqueue {
        body: Box<Expr>,
        queue: String,
        props: Vec<(String, Expr)>,
    },
    Reset {
        target: Option<ResetTarget>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResetTarget {
    pub slicing: String,
    pub key: Box<Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CompareOp::Eq => ord == Equal,
            CompareOp::Ne => ord != Equal,
            CompareOp::Lt => ord == Less,
            CompareOp::Le => ord != Greater,
            CompareOp::Gt => ord == Greater,
            CompareOp::Ge => ord != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathExpr {
    pub start: PathStart,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathStart {
    /// `/...`: the root of the context node's tree.
    Root,
    /// A relative path starting at the context item.
    Context,
    /// A primary or filter expression, e.g. `qs:queue("crm")/offer`.
    Expr(Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub axis: Axis,
    pub test: NodeTest,
    pub predicates: Vec<Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Child,
    DescendantOrSelf,
    Attribute,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeTest {
    Name(String),
    Wildcard,
    /// `node()`
    AnyNode,
    /// `text()`
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementCtor {
    pub name: String,
    pub attributes: Vec<(String, Vec<AttrPart>)>,
    pub content: Vec<Content>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrPart {
    Text(String),
    Enclosed(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Content {
    Text(String),
    Element(ElementCtor),
    Enclosed(Expr),
}

impl Expr {
    /// Visits this expression and every subexpression, parents first.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        for c in self.children() {
            c.walk(f);
        }
    }

    /// Direct subexpressions in evaluation order.
    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Literal(_) | Expr::EmptySeq | Expr::Var(_) | Expr::ContextItem => Vec::new(),
            Expr::Sequence(items) => items.iter().collect(),
            Expr::Let { value, body, .. } => vec![value, body],
            Expr::For {
                source,
                filter,
                body,
                ..
            } => {
                let mut v: Vec<&Expr> = vec![source];
                v.extend(filter.as_deref());
                v.push(body);
                v
            }
            Expr::If {
                cond,
                then,
                otherwise,
            } => {
                let mut v: Vec<&Expr> = vec![cond, then];
                v.extend(otherwise.as_deref());
                v
            }
            Expr::Path(p) => {
                let mut v = Vec::new();
                if let PathStart::Expr(e) = &p.start {
                    v.push(&**e);
                }
                for s in &p.steps {
                    v.extend(s.predicates.iter());
                }
                v
            }
            Expr::Filter { base, predicates } => {
                let mut v: Vec<&Expr> = vec![base];
                v.extend(predicates.iter());
                v
            }
            Expr::Compare { lhs, rhs, .. } | Expr::And(lhs, rhs) | Expr::Or(lhs, rhs) => {
                vec![lhs, rhs]
            }
            Expr::Call { args, .. } => args.iter().collect(),
            Expr::Element(c) => {
                let mut v = Vec::new();
                c.enclosed(&mut v);
                v
            }
            Expr::Enqueue { body, props, .. } => {
                let mut v: Vec<&Expr> = vec![body];
                v.extend(props.iter().map(|(_, e)| e));
                v
            }
            Expr::Reset { target } => target.iter().map(|t| &*t.key).collect(),
        }
    }

    /// Rebuilds the tree bottom-up, letting `f` replace any node.
    pub fn rewrite(self, f: &mut dyn FnMut(Expr) -> Expr) -> Expr {
        let bx = |e: Box<Expr>, f: &mut dyn FnMut(Expr) -> Expr| Box::new(e.rewrite(f));
        let rebuilt = match self {
            e @ (Expr::Literal(_) | Expr::EmptySeq | Expr::Var(_) | Expr::ContextItem) => e,
            Expr::Sequence(items) => Expr::Sequence(items.into_iter().map(|e| e.rewrite(f)).collect()),
            Expr::Let { var, value, body } => Expr::Let {
                var,
                value: bx(value, f),
                body: bx(body, f),
            },
            Expr::For {
                var,
                source,
                filter,
                body,
            } => Expr::For {
                var,
                source: bx(source, f),
                filter: filter.map(|w| bx(w, f)),
                body: bx(body, f),
            },
            Expr::If {
                cond,
                then,
                otherwise,
            } => Expr::If {
                cond: bx(cond, f),
                then: bx(then, f),
                otherwise: otherwise.map(|e| bx(e, f)),
            },
            Expr::Path(p) => Expr::Path(PathExpr {
                start: match p.start {
                    PathStart::Expr(e) => PathStart::Expr(bx(e, f)),
                    s => s,
                },
                steps: p
                    .steps
                    .into_iter()
                    .map(|s| Step {
                        axis: s.axis,
                        test: s.test,
                        predicates: s.predicates.into_iter().map(|e| e.rewrite(f)).collect(),
                    })
                    .collect(),
            }),
            Expr::Filter { base, predicates } => Expr::Filter {
                base: bx(base, f),
                predicates: predicates.into_iter().map(|e| e.rewrite(f)).collect(),
            },
            Expr::Compare { op, lhs, rhs } => Expr::Compare {
                op,
                lhs: bx(lhs, f),
                rhs: bx(rhs, f),
            },
            Expr::And(l, r) => Expr::And(bx(l, f), bx(r, f)),
            Expr::Or(l, r) => Expr::Or(bx(l, f), bx(r, f)),
            Expr::Call { name, args } => Expr::Call {
                name,
                args: args.into_iter().map(|e| e.rewrite(f)).collect(),
            },
            Expr::Element(c) => Expr::Element(c.rewrite(f)),
            Expr::Enqueue { body, queue, props } => Expr::Enqueue {
                body: bx(body, f),
                queue,
                props: props.into_iter().map(|(n, e)| (n, e.rewrite(f))).collect(),
            },
            Expr::Reset { target } => Expr::Reset {
                target: target.map(|t| ResetTarget {
                    slicing: t.slicing,
                    key: bx(t.key, f),
                }),
            },
        };
        f(rebuilt)
    }

    /// True if evaluating this expression can emit pending updates.
    pub fn is_updating(&self) -> bool {
        let mut found = false;
        self.walk(&mut |e| {
            if matches!(e, Expr::Enqueue { .. } | Expr::Reset { .. }) {
                found = true;
            }
        });
        found
    }

    /// Variables referenced but not bound inside this expression, in order of
    /// first occurrence.
    pub fn free_variables(&self) -> Vec<String> {
        fn go(e: &Expr, bound: &mut Vec<String>, out: &mut Vec<String>) {
            match e {
                Expr::Var(v) => {
                    if !bound.contains(v) && !out.contains(v) {
                        out.push(v.clone());
                    }
                }
                Expr::Let { var, value, body } => {
                    go(value, bound, out);
                    bound.push(var.clone());
                    go(body, bound, out);
                    bound.pop();
                }
                Expr::For {
                    var,
                    source,
                    filter,
                    body,
                } => {
                    go(source, bound, out);
                    bound.push(var.clone());
                    if let Some(w) = filter {
                        go(w, bound, out);
                    }
                    go(body, bound, out);
                    bound.pop();
                }
                other => {
                    for c in other.children() {
                        go(c, bound, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    /// Names of all functions called anywhere in this expression.
    pub fn called_functions(&self) -> Vec<(&str, usize)> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let Expr::Call { name, args } = e {
                out.push((name.as_str(), args.len()));
            }
        });
        out
    }
}

impl ElementCtor {
    /// Enclosed expressions of this constructor and its nested constructors.
    fn enclosed<'a>(&'a self, out: &mut Vec<&'a Expr>) {
        for (_, parts) in &self.attributes {
            for p in parts {
                if let AttrPart::Enclosed(e) = p {
                    out.push(e);
                }
            }
        }
        for c in &self.content {
            match c {
                Content::Text(_) => {}
                Content::Element(el) => el.enclosed(out),
                Content::Enclosed(e) => out.push(e),
            }
        }
    }

    fn rewrite(self, f: &mut dyn FnMut(Expr) -> Expr) -> ElementCtor {
        ElementCtor {
            name: self.name,
            attributes: self
                .attributes
                .into_iter()
                .map(|(n, parts)| {
                    let parts = parts
                        .into_iter()
                        .map(|p| match p {
                            AttrPart::Enclosed(e) => AttrPart::Enclosed(e.rewrite(f)),
                            t => t,
                        })
                        .collect();
                    (n, parts)
                })
                .collect(),
            content: self
                .content
                .into_iter()
                .map(|c| match c {
                    Content::Element(el) => Content::Element(el.rewrite(f)),
                    Content::Enclosed(e) => Content::Enclosed(e.rewrite(f)),
                    t => t,
                })
                .collect(),
        }
    }
}

fn write_string_literal(s: &str, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    f.write_char('"')?;
    for c in s.chars() {
        if c == '"' {
            f.write_str("\"\"")?;
        } else {
            f.write_char(c)?;
        }
    }
    f.write_char('"')
}

fn escape_content(s: &str, in_attr: bool) -> String {
    let mut out = String::new();
    let mut prev = '\0';
    for c in s.chars() {
        match c {
            '{' => out.push_str("{{"),
            '}' => out.push_str("}}"),
            '<' => out.push_str("&lt;"),
            '&' => out.push_str("&amp;"),
            '"' if in_attr => out.push_str("&quot;"),
            ':' if prev == '(' => {
                out.pop();
                out.push_str("&#40;:");
            }
            _ => out.push(c),
        }
        prev = c;
    }
    out
}

impl fmt::Display for ElementCtor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}", self.name)?;
        for (name, parts) in &self.attributes {
            write!(f, " {name}=\"")?;
            for p in parts {
                match p {
                    AttrPart::Text(t) => f.write_str(&escape_content(t, true))?,
                    AttrPart::Enclosed(e) => write!(f, "{{{e}}}")?,
                }
            }
            f.write_char('"')?;
        }
        if self.content.is_empty() {
            return f.write_str("/>");
        }
        f.write_char('>')?;
        for c in &self.content {
            match c {
                Content::Text(t) => f.write_str(&escape_content(t, false))?,
                Content::Element(el) => write!(f, "{el}")?,
                Content::Enclosed(e) => write!(f, "{{{e}}}")?,
            }
        }
        write!(f, "</{}>", self.name)
    }
}

fn write_operand(e: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match e {
        Expr::Let { .. }
        | Expr::For { .. }
        | Expr::If { .. }
        | Expr::Compare { .. }
        | Expr::And(..)
        | Expr::Or(..)
        | Expr::Enqueue { .. }
        | Expr::Reset { .. } => write!(f, "({e})"),
        _ => write!(f, "{e}"),
    }
}

fn write_steps(
    steps: &[Step],
    mut leading_slash: bool,
    abbrev_first: bool,
    f: &mut fmt::Formatter<'_>,
) -> fmt::Result {
    let mut i = 0;
    while i < steps.len() {
        let s = &steps[i];
        let abbreviated_desc = (i > 0 || abbrev_first)
            && s.axis == Axis::DescendantOrSelf
            && s.test == NodeTest::AnyNode
            && s.predicates.is_empty()
            && i + 1 < steps.len();
        if abbreviated_desc {
            f.write_str("//")?;
            i += 1;
            write_step(&steps[i], f)?;
        } else {
            if leading_slash {
                f.write_char('/')?;
            }
            write_step(s, f)?;
        }
        leading_slash = true;
        i += 1;
    }
    Ok(())
}

fn write_step(s: &Step, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match s.axis {
        Axis::Child => {}
        Axis::Attribute => f.write_char('@')?,
        Axis::DescendantOrSelf => f.write_str("descendant-or-self::")?,
    }
    match &s.test {
        NodeTest::Name(n) => f.write_str(n)?,
        NodeTest::Wildcard => f.write_char('*')?,
        NodeTest::AnyNode => f.write_str("node()")?,
        NodeTest::Text => f.write_str("text()")?,
    }
    for p in &s.predicates {
        write!(f, "[{p}]")?;
    }
    Ok(())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(a) => match a {
                Atomic::Int(i) => write!(f, "{i}"),
                Atomic::Dec(d) => f.write_str(&format_decimal(*d)),
                Atomic::Bool(b) => write!(f, "{b}()"),
                other => write_string_literal(&other.lexical(), f),
            },
            Expr::EmptySeq => f.write_str("()"),
            Expr::Var(v) => write!(f, "${v}"),
            Expr::ContextItem => f.write_char('.'),
            Expr::Sequence(items) => {
                f.write_char('(')?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_char(')')
            }
            Expr::Let { var, value, body } => {
                write!(f, "let ${var} := ")?;
                write_operand(value, f)?;
                f.write_str(" return ")?;
                write_operand(body, f)
            }
            Expr::For {
                var,
                source,
                filter,
                body,
            } => {
                write!(f, "for ${var} in ")?;
                write_operand(source, f)?;
                if let Some(w) = filter {
                    f.write_str(" where ")?;
                    write_operand(w, f)?;
                }
                f.write_str(" return ")?;
                write_operand(body, f)
            }
            Expr::If {
                cond,
                then,
                otherwise,
            } => {
                write!(f, "if ({cond}) then ")?;
                write_operand(then, f)?;
                if let Some(e) = otherwise {
                    f.write_str(" else ")?;
                    write_operand(e, f)?;
                }
                Ok(())
            }
            Expr::Path(p) => match &p.start {
                PathStart::Root => {
                    if p.steps.is_empty() {
                        f.write_char('/')
                    } else {
                        if !(p.steps.len() > 1
                            && p.steps[0].axis == Axis::DescendantOrSelf
                            && p.steps[0].test == NodeTest::AnyNode
                            && p.steps[0].predicates.is_empty())
                        {
                            f.write_char('/')?;
                        }
                        write_steps(&p.steps, false, true, f)
                    }
                }
                PathStart::Context => write_steps(&p.steps, false, false, f),
                PathStart::Expr(e) => {
                    write_operand(e, f)?;
                    write_steps(&p.steps, true, true, f)
                }
            },
            Expr::Filter { base, predicates } => {
                write_operand(base, f)?;
                for p in predicates {
                    write!(f, "[{p}]")?;
                }
                Ok(())
            }
            Expr::Compare { op, lhs, rhs } => {
                write_operand(lhs, f)?;
                write!(f, " {} ", op.symbol())?;
                write_operand(rhs, f)
            }
            Expr::And(l, r) => {
                write_operand(l, f)?;
                f.write_str(" and ")?;
                write_operand(r, f)
            }
            Expr::Or(l, r) => {
                write_operand(l, f)?;
                f.write_str(" or ")?;
                write_operand(r, f)
            }
            Expr::Call { name, args } => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write_operand(a, f)?;
                }
                f.write_char(')')
            }
            Expr::Element(c) => write!(f, "{c}"),
            Expr::Enqueue { body, queue, props } => {
                f.write_str("do enqueue ")?;
                write_operand(body, f)?;
                write!(f, " into {queue}")?;
                for (name, e) in props {
                    write!(f, " with {name} value ")?;
                    write_operand(e, f)?;
                }
                Ok(())
            }
            Expr::Reset { target } => {
                f.write_str("do reset")?;
                if let Some(t) = target {
                    write!(f, " {} key ", t.slicing)?;
                    write_operand(&t.key, f)?;
                }
                Ok(())
            }
        }
    }
}
