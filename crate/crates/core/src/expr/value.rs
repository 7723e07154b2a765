use std::cmp::Ordering;
use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::xml::NodeRef;

/// Declared type of a message property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueType {
    String,
    Boolean,
    Integer,
    Decimal,
    DateTime,
}

impl ValueType {
    pub fn from_xs_name(name: &str) -> Option<ValueType> {
        let local = crate::xml::local_part(name);
        Some(match local {
            "string" => ValueType::String,
            "boolean" => ValueType::Boolean,
            "integer" | "int" | "long" => ValueType::Integer,
            "decimal" | "double" | "float" => ValueType::Decimal,
            "dateTime" => ValueType::DateTime,
            _ => return None,
        })
    }

    pub fn xs_name(self) -> &'static str {
        match self {
            ValueType::String => "xs:string",
            ValueType::Boolean => "xs:boolean",
            ValueType::Integer => "xs:integer",
            ValueType::Decimal => "xs:decimal",
            ValueType::DateTime => "xs:dateTime",
        }
    }
}

/// A typed atomic value.
///
/// `Untyped` is the result of atomizing a node; it casts to any declared
/// type whose lexical form it matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", content = "v")]
pub enum Atomic {
    Untyped(String),
    Str(String),
    Bool(bool),
    Int(i64),
    Dec(f64),
    DateTime(DateTime<Utc>),
}

impl Atomic {
    pub fn value_type(&self) -> ValueType {
        match self {
            Atomic::Untyped(_) | Atomic::Str(_) => ValueType::String,
            Atomic::Bool(_) => ValueType::Boolean,
            Atomic::Int(_) => ValueType::Integer,
            Atomic::Dec(_) => ValueType::Decimal,
            Atomic::DateTime(_) => ValueType::DateTime,
        }
    }

    /// Lexical form.
    pub fn lexical(&self) -> String {
        match self {
            Atomic::Untyped(s) | Atomic::Str(s) => s.clone(),
            Atomic::Bool(b) => b.to_string(),
            Atomic::Int(i) => i.to_string(),
            Atomic::Dec(d) => format_decimal(*d),
            Atomic::DateTime(t) => t.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        }
    }

    fn as_number(&self) -> Option<f64> {
        match self {
            Atomic::Int(i) => Some(*i as f64),
            Atomic::Dec(d) => Some(*d),
            Atomic::Untyped(s) | Atomic::Str(s) => parse_number(s),
            _ => None,
        }
    }

    fn is_numeric(&self) -> bool {
        matches!(self, Atomic::Int(_) | Atomic::Dec(_))
    }

    fn is_stringlike(&self) -> bool {
        matches!(self, Atomic::Untyped(_) | Atomic::Str(_))
    }

    /// Casts to `ty`, returning `None` when the value does not conform.
    pub fn cast(&self, ty: ValueType) -> Option<Atomic> {
        match (ty, self) {
            (ValueType::String, a) => Some(Atomic::Str(a.lexical())),
            (ValueType::Boolean, Atomic::Bool(b)) => Some(Atomic::Bool(*b)),
            (ValueType::Boolean, Atomic::Untyped(s) | Atomic::Str(s)) => {
                parse_boolean(s.trim()).map(Atomic::Bool)
            }
            (ValueType::Integer, Atomic::Int(i)) => Some(Atomic::Int(*i)),
            (ValueType::Integer, Atomic::Untyped(s) | Atomic::Str(s)) => {
                s.trim().parse::<i64>().ok().map(Atomic::Int)
            }
            (ValueType::Decimal, Atomic::Dec(d)) => Some(Atomic::Dec(*d)),
            (ValueType::Decimal, Atomic::Int(i)) => Some(Atomic::Dec(*i as f64)),
            (ValueType::Decimal, Atomic::Untyped(s) | Atomic::Str(s)) => {
                parse_number(s).map(Atomic::Dec)
            }
            (ValueType::DateTime, Atomic::DateTime(t)) => Some(Atomic::DateTime(*t)),
            (ValueType::DateTime, Atomic::Untyped(s) | Atomic::Str(s)) => {
                DateTime::parse_from_rfc3339(s.trim())
                    .ok()
                    .map(|t| Atomic::DateTime(t.with_timezone(&Utc)))
            }
            _ => None,
        }
    }

    /// Value comparison of two atomics.
    ///
    /// Numbers compare numerically. A number against a string compares
    /// numerically only if the string parses as a number, otherwise both
    /// compare as strings. Booleans compare with booleans (or strings spelling
    /// a boolean); dateTimes with dateTimes (or strings spelling one).
    /// Anything else is a type mismatch.
    pub fn compare(&self, other: &Atomic) -> Result<Ordering, TypeMismatch> {
        let mismatch = || TypeMismatch {
            left: self.value_type(),
            right: other.value_type(),
        };
        if self.is_stringlike() && other.is_stringlike() {
            return Ok(self.lexical().cmp(&other.lexical()));
        }
        if self.is_numeric() || other.is_numeric() {
            if let (Some(a), Some(b)) = (self.as_number(), other.as_number()) {
                return a.partial_cmp(&b).ok_or_else(mismatch);
            }
            if (self.is_numeric() && other.is_stringlike())
                || (self.is_stringlike() && other.is_numeric())
            {
                return Ok(self.lexical().cmp(&other.lexical()));
            }
            return Err(mismatch());
        }
        match (self, other) {
            (Atomic::Bool(a), b) | (b, Atomic::Bool(a)) if !matches!(b, Atomic::Bool(_)) => {
                let b = b.cast(ValueType::Boolean).ok_or_else(mismatch)?;
                let Atomic::Bool(b) = b else { unreachable!() };
                // keep the original operand order
                if matches!(self, Atomic::Bool(_)) {
                    Ok(a.cmp(&b))
                } else {
                    Ok(b.cmp(a))
                }
            }
            (Atomic::Bool(a), Atomic::Bool(b)) => Ok(a.cmp(b)),
            (Atomic::DateTime(a), Atomic::DateTime(b)) => Ok(a.cmp(b)),
            (Atomic::DateTime(a), s) if s.is_stringlike() => match s.cast(ValueType::DateTime) {
                Some(Atomic::DateTime(b)) => Ok(a.cmp(&b)),
                _ => Err(mismatch()),
            },
            (s, Atomic::DateTime(b)) if s.is_stringlike() => match s.cast(ValueType::DateTime) {
                Some(Atomic::DateTime(a)) => Ok(a.cmp(b)),
                _ => Err(mismatch()),
            },
            _ => Err(mismatch()),
        }
    }

    /// Canonical key used for slice membership.
    pub fn key_string(&self) -> String {
        self.lexical()
    }
}

impl fmt::Display for Atomic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.lexical())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeMismatch {
    pub left: ValueType,
    pub right: ValueType,
}

pub fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    let ok = t
        .chars()
        .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'));
    if !ok {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_boolean(s: &str) -> Option<bool> {
    match s {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

pub fn format_decimal(d: f64) -> String {
    if d.fract() == 0.0 && d.abs() < 1e15 {
        format!("{d:.1}")
    } else {
        format!("{d}")
    }
}

/// One item of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Node(NodeRef),
    Atomic(Atomic),
}

impl Item {
    pub fn atomize(&self) -> Atomic {
        match self {
            Item::Node(n) => Atomic::Untyped(n.string_value()),
            Item::Atomic(a) => a.clone(),
        }
    }

    pub fn as_node(&self) -> Option<&NodeRef> {
        match self {
            Item::Node(n) => Some(n),
            Item::Atomic(_) => None,
        }
    }
}

/// A flat sequence of items.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Value(pub Vec<Item>);

impl Value {
    pub fn empty() -> Self {
        Value(Vec::new())
    }

    pub fn one(item: Item) -> Self {
        Value(vec![item])
    }

    pub fn atomic(a: Atomic) -> Self {
        Value(vec![Item::Atomic(a)])
    }

    pub fn boolean(b: bool) -> Self {
        Value::atomic(Atomic::Bool(b))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn items(&self) -> &[Item] {
        &self.0
    }

    pub fn into_items(self) -> Vec<Item> {
        self.0
    }

    pub fn atomize(&self) -> Vec<Atomic> {
        self.0.iter().map(Item::atomize).collect()
    }

    pub fn nodes(&self) -> Option<Vec<NodeRef>> {
        self.0.iter().map(|i| i.as_node().cloned()).collect()
    }
}

impl FromIterator<Item> for Value {
    fn from_iter<T: IntoIterator<Item = Item>>(iter: T) -> Self {
        Value(iter.into_iter().collect())
    }
}
