use std::fmt::Write;

use super::*;

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Canonical text of `app`. Parsing the result yields `app` again.
pub fn render_application(app: &ApplicationDef) -> String {
    let mut blocks: Vec<String> = Vec::new();
    for q in &app.queues {
        let mut s = format!("create queue {} kind {} mode {}", q.name, q.kind, q.mode);
        if q.priority != 0 {
            let _ = write!(s, " priority {}", q.priority);
        }
        if let Some(e) = &q.endpoint {
            let _ = write!(s, " endpoint {}", quote(e));
        }
        if let Some(e) = &q.errorqueue {
            let _ = write!(s, " errorqueue {e}");
        }
        for a in &q.annotations {
            let _ = write!(s, "\n  {}", a.keyword);
            for w in &a.words {
                let _ = write!(s, " {w}");
            }
        }
        blocks.push(s);
    }
    for p in &app.properties {
        let mut s = format!("create property {} as {}", p.name, p.value_type.xs_name());
        if p.fixed {
            s.push_str(" fixed");
        }
        if p.inherited {
            s.push_str(" inherited");
        }
        for c in &p.clauses {
            let _ = write!(s, "\n  queue {}", c.queues.join(", "));
            if let Some(v) = &c.value {
                let _ = write!(s, " value {v}");
            }
        }
        blocks.push(s);
    }
    for sl in &app.slicings {
        blocks.push(format!("create slicing {} on {}", sl.name, sl.property));
    }
    for r in &app.rules {
        let mut s = format!("create rule {} for {}", r.name, r.target);
        if let Some(e) = &r.errorqueue {
            let _ = write!(s, " errorqueue {e}");
        }
        let _ = write!(s, "\n  {}", r.body);
        blocks.push(s);
    }
    if blocks.is_empty() {
        return String::new();
    }
    let mut out = blocks.join("\n\n");
    out.push('\n');
    out
}
