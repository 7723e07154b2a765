//! The rule expression language: parsing, static helpers and evaluation.

pub mod ast;
pub mod eval;
pub mod parser;
pub mod value;

pub use ast::Expr;
pub use eval::{
    builtin_call, effective_boolean, evaluate, is_builtin, DynamicError, DynamicErrorKind, EvalContext,
    PendingUpdate, RuleTarget, StoreView,
};
pub use parser::{parse_expression, SyntaxError};
pub use value::{Atomic, Item, Value, ValueType};
