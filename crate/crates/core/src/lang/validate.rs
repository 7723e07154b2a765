use std::collections::BTreeSet;
use std::fmt;

use super::*;
use crate::expr::{is_builtin, Atomic};
use crate::sysprops;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    DuplicateName {
        category: &'static str,
        name: String,
    },
    /// A referenced queue, property, slicing or rule target is not declared.
    UnresolvedName {
        name: String,
        referenced_by: String,
    },
    SliceFunctionOutsideSlicing {
        rule: String,
        function: String,
    },
    AmbiguousQueueFunction {
        rule: String,
    },
    ResetOutsideSlicing {
        rule: String,
    },
    UnknownFunction {
        rule: String,
        function: String,
        arity: usize,
    },
    UnboundVariable {
        rule: String,
        variable: String,
    },
    NonConditionalBody {
        rule: String,
    },
    ReservedPropertyName(String),
    DuplicateClauseQueue {
        property: String,
        queue: String,
    },
    EndpointOnNonGateway {
        queue: String,
    },
    AmbiguousTarget {
        rule: String,
    },
    FixedPropertyAssignment {
        rule: String,
        property: String,
    },
    ReservedPropertyAssignment {
        rule: String,
        property: String,
        queue: String,
    },
    ComputedValueUsesUpdates {
        property: String,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::DuplicateName { category, name } => {
                write!(f, "duplicate {category} name '{name}'")
            }
            Diagnostic::UnresolvedName { name, referenced_by } => {
                write!(f, "unresolved name '{name}' referenced by {referenced_by}")
            }
            Diagnostic::SliceFunctionOutsideSlicing { rule, function } => write!(
                f,
                "rule '{rule}' calls {function}() but is not defined on a slicing"
            ),
            Diagnostic::AmbiguousQueueFunction { rule } => write!(
                f,
                "rule '{rule}' is defined on a slicing and calls qs:queue() without a name"
            ),
            Diagnostic::ResetOutsideSlicing { rule } => write!(
                f,
                "rule '{rule}' uses 'do reset' without arguments but is not defined on a slicing"
            ),
            Diagnostic::UnknownFunction {
                rule,
                function,
                arity,
            } => write!(f, "rule '{rule}' calls unknown function {function}#{arity}"),
            Diagnostic::UnboundVariable { rule, variable } => {
                write!(f, "rule '{rule}' references unbound variable ${variable}")
            }
            Diagnostic::NonConditionalBody { rule } => {
                write!(f, "rule '{rule}' body is not a conditional expression")
            }
            Diagnostic::ReservedPropertyName(name) => {
                write!(f, "property name '{name}' is reserved by the system")
            }
            Diagnostic::DuplicateClauseQueue { property, queue } => write!(
                f,
                "property '{property}' has more than one clause for queue '{queue}'"
            ),
            Diagnostic::EndpointOnNonGateway { queue } => {
                write!(f, "queue '{queue}' has an endpoint but is not a gateway queue")
            }
            Diagnostic::AmbiguousTarget { rule } => write!(
                f,
                "rule '{rule}' targets a name declared as both a queue and a slicing"
            ),
            Diagnostic::FixedPropertyAssignment { rule, property } => write!(
                f,
                "rule '{rule}' assigns fixed property '{property}' explicitly"
            ),
            Diagnostic::ReservedPropertyAssignment {
                rule,
                property,
                queue,
            } => write!(
                f,
                "rule '{rule}' assigns system property '{property}' on a message for queue '{queue}'"
            ),
            Diagnostic::ComputedValueUsesUpdates { property } => write!(
                f,
                "value expression of property '{property}' contains update primitives"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.diagnostics.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.diagnostics {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}

fn duplicates<'a>(
    category: &'static str,
    names: impl Iterator<Item = &'a str>,
    out: &mut Vec<Diagnostic>,
) {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            out.push(Diagnostic::DuplicateName {
                category,
                name: n.to_string(),
            });
        }
    }
}

/// Checks name uniqueness, name resolution and the static restrictions on
/// rule bodies. An empty report means the application can be compiled.
pub fn validate_application(app: &ApplicationDef) -> ValidationReport {
    let mut d = Vec::new();
    duplicates("queue", app.queues.iter().map(|q| q.name.as_str()), &mut d);
    duplicates("property", app.properties.iter().map(|p| p.name.as_str()), &mut d);
    duplicates("slicing", app.slicings.iter().map(|s| s.name.as_str()), &mut d);
    duplicates("rule", app.rules.iter().map(|r| r.name.as_str()), &mut d);

    let unresolved = |name: &str, by: String| Diagnostic::UnresolvedName {
        name: name.to_string(),
        referenced_by: by,
    };

    for q in &app.queues {
        if q.endpoint.is_some() && !q.kind.is_gateway() {
            d.push(Diagnostic::EndpointOnNonGateway {
                queue: q.name.clone(),
            });
        }
        if let Some(e) = &q.errorqueue {
            if app.queue(e).is_none() {
                d.push(unresolved(e, format!("queue '{}'", q.name)));
            }
        }
    }

    for p in &app.properties {
        if sysprops::is_reserved(&p.name) {
            d.push(Diagnostic::ReservedPropertyName(p.name.clone()));
        }
        let mut seen = BTreeSet::new();
        for c in &p.clauses {
            for q in &c.queues {
                if app.queue(q).is_none() {
                    d.push(unresolved(q, format!("property '{}'", p.name)));
                }
                if !seen.insert(q.as_str()) {
                    d.push(Diagnostic::DuplicateClauseQueue {
                        property: p.name.clone(),
                        queue: q.clone(),
                    });
                }
            }
            if let Some(v) = &c.value {
                if v.is_updating() {
                    d.push(Diagnostic::ComputedValueUsesUpdates {
                        property: p.name.clone(),
                    });
                }
            }
        }
    }

    for s in &app.slicings {
        if app.property(&s.property).is_none() {
            d.push(unresolved(&s.property, format!("slicing '{}'", s.name)));
        }
    }

    for r in &app.rules {
        let is_queue = app.queue(&r.target).is_some();
        let is_slicing = app.slicing(&r.target).is_some();
        if !is_queue && !is_slicing {
            d.push(unresolved(&r.target, format!("rule '{}'", r.name)));
        } else if is_queue && is_slicing {
            d.push(Diagnostic::AmbiguousTarget {
                rule: r.name.clone(),
            });
        }
        if let Some(e) = &r.errorqueue {
            if app.queue(e).is_none() {
                d.push(unresolved(e, format!("rule '{}'", r.name)));
            }
        }
        if !matches!(r.body, Expr::If { .. }) {
            d.push(Diagnostic::NonConditionalBody {
                rule: r.name.clone(),
            });
        }
        check_body(app, r, &mut d);
    }

    ValidationReport { diagnostics: d }
}

fn check_body(app: &ApplicationDef, r: &RuleDef, d: &mut Vec<Diagnostic>) {
    let on_slicing = r.target_kind == TargetKind::Slicing;
    let rule = || r.name.clone();
    let by = || format!("rule '{}'", r.name);
    for v in r.body.free_variables() {
        d.push(Diagnostic::UnboundVariable {
            rule: rule(),
            variable: v,
        });
    }
    r.body.walk(&mut |e| match e {
        Expr::Call { name, args } => {
            let local = name.strip_prefix("fn:").unwrap_or(name);
            if !is_builtin(name, args.len()) {
                d.push(Diagnostic::UnknownFunction {
                    rule: rule(),
                    function: name.clone(),
                    arity: args.len(),
                });
            } else if matches!(local, "qs:slice" | "qs:slicekey") && !on_slicing {
                d.push(Diagnostic::SliceFunctionOutsideSlicing {
                    rule: rule(),
                    function: name.clone(),
                });
            } else if local == "qs:queue" && args.is_empty() && on_slicing {
                d.push(Diagnostic::AmbiguousQueueFunction { rule: rule() });
            }
            if matches!(local, "qs:queue" | "collection" | "qs:property") {
                if let [Expr::Literal(Atomic::Str(lit))] = args.as_slice() {
                    let known = if local == "qs:property" {
                        app.property(lit).is_some() || sysprops::is_reserved(lit)
                    } else {
                        app.queue(lit).is_some()
                    };
                    if !known {
                        d.push(Diagnostic::UnresolvedName {
                            name: lit.clone(),
                            referenced_by: by(),
                        });
                    }
                }
            }
        }
        Expr::Enqueue { queue, props, .. } => {
            let target = app.queue(queue);
            if target.is_none() {
                d.push(Diagnostic::UnresolvedName {
                    name: queue.clone(),
                    referenced_by: by(),
                });
            }
            for (p, _) in props {
                if sysprops::is_reserved(p) {
                    if let Some(q) = target {
                        if !sysprops::settable(p, q.kind) {
                            d.push(Diagnostic::ReservedPropertyAssignment {
                                rule: rule(),
                                property: p.clone(),
                                queue: queue.clone(),
                            });
                        }
                    }
                    continue;
                }
                match app.property(p) {
                    None => d.push(Diagnostic::UnresolvedName {
                        name: p.clone(),
                        referenced_by: by(),
                    }),
                    Some(def) if def.fixed => d.push(Diagnostic::FixedPropertyAssignment {
                        rule: rule(),
                        property: p.clone(),
                    }),
                    Some(_) => {}
                }
            }
        }
        Expr::Reset { target } => match target {
            None if !on_slicing => d.push(Diagnostic::ResetOutsideSlicing { rule: rule() }),
            Some(t) if app.slicing(&t.slicing).is_none() => d.push(Diagnostic::UnresolvedName {
                name: t.slicing.clone(),
                referenced_by: by(),
            }),
            _ => {}
        },
        _ => {}
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(text: &str) -> Vec<Diagnostic> {
        validate_application(&parse_application(text).unwrap()).diagnostics
    }

    #[test]
    fn unresolved_slicing_property() {
        let d = report("create slicing s on nope");
        assert_eq!(
            d,
            vec![Diagnostic::UnresolvedName {
                name: "nope".into(),
                referenced_by: "slicing 's'".into()
            }]
        );
    }

    #[test]
    fn slice_function_in_queue_rule() {
        let d = report("create queue q kind basic\ncreate rule r for q if (qs:slice()) then ()");
        assert_eq!(
            d,
            vec![Diagnostic::SliceFunctionOutsideSlicing {
                rule: "r".into(),
                function: "qs:slice".into()
            }]
        );
    }

    #[test]
    fn duplicates_and_reserved_names() {
        let d = report(
            "create queue q kind basic\ncreate queue q kind echo\ncreate property Sender as xs:string queue q",
        );
        assert!(d.contains(&Diagnostic::DuplicateName {
            category: "queue",
            name: "q".into()
        }));
        assert!(d.contains(&Diagnostic::ReservedPropertyName("Sender".into())));
    }

    #[test]
    fn unbound_variables_and_unknown_functions() {
        let d = report(
            "create queue q kind basic\ncreate rule r for q if (frob(1)) then let $a := 1 return $b",
        );
        assert!(d.contains(&Diagnostic::UnknownFunction {
            rule: "r".into(),
            function: "frob".into(),
            arity: 1
        }));
        assert!(d.contains(&Diagnostic::UnboundVariable {
            rule: "r".into(),
            variable: "b".into()
        }));
    }

    #[test]
    fn system_property_assignment_depends_on_queue_kind() {
        let d = report(
            "create queue q kind basic\ncreate queue out kind outgoingGateway\ncreate rule r for q if (/a) then (do enqueue <x/> into out with Sender value \"s\", do enqueue <y/> into q with Sender value \"s\")",
        );
        assert_eq!(
            d,
            vec![Diagnostic::ReservedPropertyAssignment {
                rule: "r".into(),
                property: "Sender".into(),
                queue: "q".into()
            }]
        );
    }
}
