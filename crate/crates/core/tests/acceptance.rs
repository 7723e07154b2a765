//! Acceptance suite. Runs without the libtest harness so that each
//! criterion prints exactly one PASS or FAIL line.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::TimeDelta;
use common::oracle::{path_round, slice_round, SLICE_APP};
use common::*;
use qflow::clock::ManualClock;
use qflow::expr::Atomic;
use qflow::lang::QueueKind;
use qflow::store::{EnqueueRequest, Store, StoreError};
use qflow::system::HttpTransport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Wall-clock limit for one procurement arrival ordering.
const MAX_ORDERING_TIME: Duration = Duration::from_secs(5);
/// Crash seeds that must actually hit a kill-point.
const MIN_CRASH_SEEDS: usize = 50;
const CRASH_SEEDS: u64 = 60;
const SLICE_ROUNDS: usize = 1_000;
const SLICE_STEPS: usize = 25;
const PATH_DOCS: usize = 200;
const PATHS_PER_DOC: usize = 50;
/// Guards against a vacuous path corpus: at least this share of the
/// random paths must select something.
const MIN_NON_EMPTY_PATH_SHARE: f64 = 0.15;
const PRIORITY_MESSAGES: usize = 100;

type Criterion = (&'static str, fn() -> String);

fn main() {
    let criteria: [Criterion; 10] = [
        ("procurement join, 6 arrival orders", procurement_end_to_end),
        ("snapshot semantics", snapshot_semantics),
        ("exactly-once under crashes", exactly_once_under_crashes),
        ("retention truth table", retention_truth_table),
        ("slice oracle equivalence", slice_oracle),
        ("path oracle equivalence", path_oracle),
        ("priority-then-FIFO dispatch", scheduler_ordering),
        ("echo timing across restart", echo_timing),
        ("error routing for dead endpoints", error_routing),
        ("property precedence table", property_precedence),
    ];

    let last_panic = Arc::new(Mutex::new(String::new()));
    {
        let last_panic = last_panic.clone();
        panic::set_hook(Box::new(move |info| {
            *last_panic.lock().unwrap() = info.to_string();
        }));
    }

    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2}: PASS  {name} [{detail}] ({secs:.2}s)", i + 1),
            Err(_) => {
                failed += 1;
                let why = last_panic.lock().unwrap().replace('\n', " ");
                println!("criterion {:>2}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn text(v: &qflow::expr::Value) -> Vec<String> {
    v.atomize().iter().map(Atomic::lexical).collect()
}

// 1 -------------------------------------------------------------------

const OFFER_REQUEST: &str = "<offerRequest><requestID>R1</requestID><customerID>C7</customerID>\
     <items><item>acid</item></items></offerRequest>";

fn check_results(credit: &str) -> [String; 3] {
    [
        format!(
            "<customerInfoResult><requestID>R1</requestID><customerID>C7</customerID>{credit}</customerInfoResult>"
        ),
        "<restrictionsResult><requestID>R1</requestID></restrictionsResult>".into(),
        "<capacityResult><requestID>R1</requestID><accept/></capacityResult>".into(),
    ]
}

const ORDERINGS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn procurement_run(order: [usize; 3], credit: &str) -> (String, Duration) {
    let start = Instant::now();
    let dir = tempdir();
    let transport = Arc::new(MockTransport::default());
    let h = harness(dir.path(), PROCUREMENT, transport.clone());
    let r1 = Atomic::Str("R1".into());

    let offer = h.inject("crm", OFFER_REQUEST);
    let out = h.runtime.process_one(offer).unwrap();
    let forked: Vec<&str> = out.created.iter().map(|m| m.queue.as_str()).collect();
    assert_eq!(forked, ["finance", "legal", "supplier"]);

    let checks = check_results(credit);
    for i in order {
        let id = h.inject("crm", &checks[i]);
        h.runtime.process_one(id).unwrap();
    }
    let customer = h.queue("customer");
    assert_eq!(customer.len(), 1, "ordering {order:?}: customer-bound messages");
    let reply = customer[0].document().to_xml();
    assert!(!h.store.snapshot().read_slice("requestMsgs", &r1).unwrap().is_empty());

    h.runtime.process_one(customer[0].id).unwrap();
    assert!(
        h.store.snapshot().read_slice("requestMsgs", &r1).unwrap().is_empty(),
        "ordering {order:?}: slice not reset"
    );
    let sent = transport.sent.lock().unwrap();
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0].0, "http://customer.example/inbox");
    assert_eq!(h.queue("customer").len(), 1);
    (reply, start.elapsed())
}

fn procurement_end_to_end() -> String {
    let mut slowest = Duration::ZERO;
    for order in ORDERINGS {
        let (reply, took) = procurement_run(order, "<accept/>");
        assert_eq!(
            reply,
            "<offer><requestID>R1</requestID><items><item>acid</item></items></offer>"
        );
        assert!(took < MAX_ORDERING_TIME, "ordering {order:?} took {took:?}");
        slowest = slowest.max(took);
        let (reply, _) = procurement_run(order, "<refuse/>");
        assert_eq!(reply, "<refusal><requestID>R1</requestID></refusal>");
    }
    format!("slowest ordering {:.0} ms", slowest.as_secs_f64() * 1000.0)
}

// 2 -------------------------------------------------------------------

const SNAPSHOT_APP: &str = r#"
create queue inbox kind basic mode persistent
create queue outbox kind basic mode persistent
create queue seen kind basic mode persistent
create rule producer for inbox
  if (/ping) then do enqueue <pong/> into outbox
create rule observer for inbox
  if (qs:queue("outbox")/pong) then do enqueue <sawPong/> into seen
create rule later for outbox
  if (qs:queue("outbox")/pong) then do enqueue <sawPong/> into seen
"#;

fn snapshot_semantics() -> String {
    let dir = tempdir();
    let h = harness(dir.path(), SNAPSHOT_APP, Arc::new(MockTransport::default()));
    let ping = h.inject("inbox", "<ping/>");
    let out = h.runtime.process_one(ping).unwrap();
    assert_eq!(out.created.len(), 1);
    assert_eq!(out.created[0].queue, "outbox");
    assert!(h.queue("seen").is_empty(), "observer saw output of the same message");
    h.runtime.process_one(out.created[0].id).unwrap();
    let seen = h.queue("seen");
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].prop("CreatingRule"), Some(&Atomic::Str("later".into())));
    "same-message output invisible, later processing sees it".into()
}

// 3 -------------------------------------------------------------------

const CRASH_APP: &str = r#"
create queue in kind basic mode persistent
create queue mid kind basic mode persistent
create queue out kind basic mode persistent
create property g as xs:string fixed
  queue in, mid, out value //g
create slicing byGroup on g
create rule forward for in
  if (/m) then do enqueue <step>{/m/n}{/m/g}</step> into mid
create rule finish for mid
  if (/step) then do enqueue <done>{/step/n}{/step/g}</done> into out
create rule close for byGroup
  if (count(qs:slice()[/done]) = 10) then do reset
"#;

const WORKLOAD: usize = 100;

fn workload_item(i: usize) -> String {
    format!("<m><n>{i}</n><g>{}</g></m>", i % 10)
}

type Contents = BTreeMap<String, Vec<(String, bool)>>;

fn contents(store: &Store) -> (Contents, Vec<u64>) {
    let snap = store.snapshot();
    let mut out = Contents::new();
    for q in ["in", "mid", "out"] {
        let mut v: Vec<(String, bool)> = snap
            .read_queue(q)
            .unwrap()
            .iter()
            .map(|m| (m.document().to_xml(), snap.is_processed(m.id)))
            .collect();
        v.sort();
        out.insert(q.to_string(), v);
    }
    let gens = (0..10)
        .map(|g| snap.generation("byGroup", &Atomic::Str(g.to_string())).unwrap())
        .collect();
    (out, gens)
}

fn crash_config() -> qflow::config::EngineConfig {
    qflow::config::EngineConfig {
        workers: 2,
        ..config(None)
    }
}

fn try_inject(h: &Harness, i: usize) -> Result<(), StoreError> {
    let mut t = h.store.begin();
    t.enqueue(EnqueueRequest::new("in", body(&workload_item(i))))?;
    t.commit().map(|_| ())
}

/// Runs the workload in batches of ten, stopping at the first failure.
/// Returns true if the store failed part-way.
fn drive_workload(h: &Harness) -> bool {
    for batch in 0..WORKLOAD / 10 {
        for i in batch * 10..batch * 10 + 10 {
            if try_inject(h, i).is_err() {
                return true;
            }
        }
        if h.runtime.run_until_idle().is_err() {
            return true;
        }
    }
    false
}

fn open_crash(dir: &std::path::Path, budget: Option<u64>) -> Harness {
    harness_with(
        dir,
        CRASH_APP,
        crash_config(),
        Arc::new(MockTransport::default()),
        Arc::new(ManualClock::default()),
        budget,
    )
}

fn exactly_once_under_crashes() -> String {
    let reference_dir = tempdir();
    let (reference, total_bytes) = {
        let h = open_crash(reference_dir.path(), None);
        assert!(!drive_workload(&h));
        let c = contents(&h.store);
        (c, std::fs::metadata(reference_dir.path().join("log")).unwrap().len())
    };
    let (queues, gens) = &reference;
    for q in ["in", "mid", "out"] {
        let v = &queues[q];
        assert_eq!(v.len(), WORKLOAD, "{q}");
        assert!(v.iter().all(|(_, processed)| *processed), "{q}");
        v.windows(2).for_each(|w| assert_ne!(w[0].0, w[1].0, "duplicate in {q}"));
    }
    assert!(gens.iter().all(|&g| g == 1), "generations {gens:?}");

    let mut crashed = 0;
    for seed in 0..CRASH_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let budget = rng.random_range(0..total_bytes);
        let dir = tempdir();
        {
            let h = open_crash(dir.path(), Some(budget));
            if drive_workload(&h) {
                crashed += 1;
                assert!(h.store.is_poisoned(), "seed {seed}: failure without a crash");
            }
        }
        let h = open_crash(dir.path(), None);
        let present: Vec<String> = h
            .queue("in")
            .iter()
            .flat_map(|m| text(&query(&m.body, "/m/n")))
            .collect();
        for i in 0..WORKLOAD {
            if !present.contains(&i.to_string()) {
                try_inject(&h, i).unwrap();
            }
        }
        h.runtime.run_until_idle().unwrap();
        assert_eq!(contents(&h.store), reference, "seed {seed} (budget {budget} of {total_bytes})");
    }
    assert!(crashed >= MIN_CRASH_SEEDS, "only {crashed} seeds crashed");
    format!("{crashed} crashed seeds recovered to identical state")
}

// 4 -------------------------------------------------------------------

const RETENTION_APP: &str = r#"
create queue q kind basic mode persistent
create property a as xs:string fixed queue q value /m/@a
create property b as xs:string fixed queue q value /m/@b
create slicing sa on a
create slicing sb on b
"#;

fn retention_truth_table() -> String {
    let dir = tempdir();
    let h = harness(dir.path(), RETENTION_APP, Arc::new(MockTransport::default()));
    let mut rows = Vec::new();
    for case in 0..8u8 {
        let (processed, reset_a, reset_b) = (case & 1 != 0, case & 2 != 0, case & 4 != 0);
        let key = format!("k{case}");
        let id = h.inject("q", &format!(r#"<m a="{key}" b="{key}"/>"#));
        rows.push((id, key, processed, reset_a, reset_b));
    }
    let bare = h.inject("q", "<m/>");
    let mut t = h.store.begin();
    t.mark_processed(bare).unwrap();
    for (id, key, processed, reset_a, reset_b) in &rows {
        let k = Atomic::Str(key.clone());
        if *processed {
            t.mark_processed(*id).unwrap();
        }
        if *reset_a {
            t.reset_slice("sa", &k).unwrap();
        }
        if *reset_b {
            t.reset_slice("sb", &k).unwrap();
        }
    }
    t.commit().unwrap();
    h.store.garbage_collect().unwrap();
    let snap = h.store.snapshot();
    assert!(snap.message(bare).is_none(), "processed message outside every slice survived");
    for (id, key, processed, reset_a, reset_b) in &rows {
        let removable = *processed && *reset_a && *reset_b;
        assert_eq!(
            snap.message(*id).is_none(),
            removable,
            "{key}: processed={processed} reset sa={reset_a} reset sb={reset_b}"
        );
    }

    // The same message walked through both resets one at a time.
    let id = h.inject("q", r#"<m a="z" b="z"/>"#);
    let z = Atomic::Str("z".into());
    let step = |f: &dyn Fn(&mut qflow::store::Txn<'_>)| {
        let mut t = h.store.begin();
        f(&mut t);
        t.commit().unwrap();
        h.store.garbage_collect().unwrap();
        h.store.snapshot().message(id).is_some()
    };
    assert!(step(&|t| t.reset_slice("sa", &z).unwrap()), "unprocessed, one reset");
    assert!(step(&|t| t.reset_slice("sb", &z).unwrap()), "unprocessed, both resets");
    assert!(!step(&|t| t.mark_processed(id).unwrap()), "processed after both resets");
    drop(h);
    let h = harness(dir.path(), RETENTION_APP, Arc::new(MockTransport::default()));
    assert!(h.store.snapshot().message(id).is_none(), "collection not durable");
    "8 combinations plus stepwise resets".into()
}

// 5 -------------------------------------------------------------------

fn slice_oracle() -> String {
    assert!(SLICE_APP.contains("create slicing s3"));
    let mut checks = 0;
    for round in 0..SLICE_ROUNDS {
        let mut rng = ChaCha8Rng::seed_from_u64(round as u64);
        let dir = tempdir();
        checks += slice_round(&mut rng, dir.path(), SLICE_STEPS).unwrap_or_else(|e| panic!("round {round}: {e}"));
    }
    format!("{SLICE_ROUNDS} interleavings, {checks} slice comparisons")
}

// 6 -------------------------------------------------------------------

fn path_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut non_empty = 0;
    for doc in 0..PATH_DOCS {
        non_empty += path_round(&mut rng, PATHS_PER_DOC).unwrap_or_else(|e| panic!("document {doc}: {e}"));
    }
    let total = PATH_DOCS * PATHS_PER_DOC;
    let share = non_empty as f64 / total as f64;
    assert!(share >= MIN_NON_EMPTY_PATH_SHARE, "only {non_empty} of {total} paths selected anything");
    format!("{total} paths, {non_empty} non-empty")
}

// 7 -------------------------------------------------------------------

const PRIORITY_APP: &str = r#"
create queue hi kind basic mode persistent priority 10
create queue lo kind basic mode persistent priority 1
"#;

fn scheduler_ordering() -> String {
    let dir = tempdir();
    let cfg = qflow::config::EngineConfig {
        workers: 1,
        ..config(None)
    };
    let h = harness_with(
        dir.path(),
        PRIORITY_APP,
        cfg,
        Arc::new(MockTransport::default()),
        Arc::new(ManualClock::default()),
        None,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for _ in 0..PRIORITY_MESSAGES {
        if rng.random_bool(0.5) {
            hi.push(h.inject("hi", "<m/>"));
        } else {
            lo.push(h.inject("lo", "<m/>"));
        }
    }
    h.runtime.run_until_idle().unwrap();
    let expected: Vec<u64> = hi.iter().chain(&lo).copied().collect();
    assert_eq!(h.runtime.dispatch_log(), expected);
    format!("{} high then {} low", hi.len(), lo.len())
}

// 8 -------------------------------------------------------------------

const ECHO_APP: &str = r#"
create queue timers kind echo mode persistent
create queue start kind basic mode persistent
create queue wake kind basic mode persistent
create queue systemErrors kind basic mode persistent
create rule arm for start
  if (/arm) then do enqueue <timeout>{/arm/*}</timeout> into timers
    with EchoTarget value "wake" with EchoDelay value 1
"#;

fn echo_open(dir: &std::path::Path, clock: &Arc<ManualClock>, budget: Option<u64>) -> Harness {
    harness_with(
        dir,
        ECHO_APP,
        config(Some("systemErrors")),
        Arc::new(MockTransport::default()),
        clock.clone(),
        budget,
    )
}

fn echo_timing() -> String {
    // Ticks every 100 ms: the echo fires on the tenth tick and only then.
    let dir = tempdir();
    let clock = Arc::new(ManualClock::default());
    let h = echo_open(dir.path(), &clock, None);
    h.inject("start", "<arm><id>1</id></arm>");
    h.runtime.run_until_idle().unwrap();
    let timer = h.queue("timers");
    assert_eq!(timer.len(), 1);
    let due = timer[0].created_at + TimeDelta::seconds(1);
    let mut fired_at = None;
    for tick in 1..=30 {
        clock.advance(TimeDelta::milliseconds(100));
        h.runtime.run_until_idle().unwrap();
        let woke = h.queue("wake").len();
        match fired_at {
            None if woke == 1 => {
                let now = qflow::clock::Clock::now(clock.as_ref());
                assert!(now >= due, "fired early at tick {tick}");
                fired_at = Some(tick);
            }
            None => assert_eq!(woke, 0),
            Some(_) => assert_eq!(woke, 1, "fired twice"),
        }
    }
    assert_eq!(fired_at, Some(10));
    drop(h);

    // Crash/restart straddling the timeout, with a crash inside the firing.
    let dir = tempdir();
    let clock = Arc::new(ManualClock::default());
    {
        let h = echo_open(dir.path(), &clock, None);
        h.inject("start", "<arm><id>2</id></arm>");
        h.runtime.run_until_idle().unwrap();
    }
    clock.advance(TimeDelta::milliseconds(500));
    {
        let h = echo_open(dir.path(), &clock, None);
        h.runtime.run_until_idle().unwrap();
        assert!(h.queue("wake").is_empty(), "fired before timeout after restart");
    }
    clock.advance(TimeDelta::milliseconds(1000));
    {
        let h = echo_open(dir.path(), &clock, Some(16));
        assert!(h.runtime.run_until_idle().is_err(), "firing should hit the kill-point");
    }
    {
        let h = echo_open(dir.path(), &clock, None);
        assert!(h.queue("wake").is_empty(), "torn firing became visible");
        h.runtime.run_until_idle().unwrap();
        assert_eq!(h.queue("wake").len(), 1);
    }
    for _ in 0..3 {
        clock.advance(TimeDelta::seconds(5));
        let h = echo_open(dir.path(), &clock, None);
        h.runtime.run_until_idle().unwrap();
        let wake = h.queue("wake");
        assert_eq!(wake.len(), 1, "fired again after restart");
        assert_eq!(wake[0].document().to_xml(), "<timeout><id>2</id></timeout>");
    }
    "fires at creation+1s, once across restarts".into()
}

// 9 -------------------------------------------------------------------

fn closed_port_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    format!("http://127.0.0.1:{}/", l.local_addr().unwrap().port())
}

const ROUTING_APP: &str = r#"
create queue src kind basic mode persistent
create queue viaRule kind outgoingGateway mode persistent endpoint "http://127.0.0.1:9/" errorqueue queueErrors
create queue viaQueue kind outgoingGateway mode persistent endpoint "http://127.0.0.1:9/" errorqueue queueErrors
create queue viaSystem kind outgoingGateway mode persistent endpoint "http://127.0.0.1:9/"
create queue ruleErrors kind basic mode persistent
create queue queueErrors kind basic mode persistent
create queue systemErrors kind basic mode persistent
create rule r1 for src errorqueue ruleErrors
  if (/go) then do enqueue <order><orderID>1</orderID></order> into viaRule
create rule r2 for src
  if (/go) then do enqueue <order><orderID>2</orderID></order> into viaQueue
create rule r3 for src
  if (/go) then do enqueue <order><orderID>3</orderID></order> into viaSystem
"#;

fn error_routing() -> String {
    let app = PROCUREMENT
        .replace("http://customer.example/inbox", &closed_port_url())
        .replace("http://postal.example/letters", &closed_port_url());
    let dir = tempdir();
    let h = harness(dir.path(), &app, Arc::new(HttpTransport::new(Duration::from_secs(2))));
    h.inject(
        "crm",
        "<customerOrder><orderID>O-17</orderID><address>1 Main St</address></customerOrder>",
    );
    h.runtime.run_until_idle().unwrap();

    let errors = h.queue("crmErrors");
    assert_eq!(errors.len(), 1);
    let e = &errors[0].body;
    assert!(!query(e, "/error/disconnectedTransport").is_empty());
    assert_eq!(text(&query(e, "/error/initialMessage//orderID")), ["O-17"]);
    assert_eq!(text(&query(e, "string(/error/ruleName)")), ["confirmOrder"]);
    let letters = h.queue("postalService");
    assert_eq!(letters.len(), 1);
    assert_eq!(text(&query(&letters[0].body, "/sendMessage/initialMessage//orderID")), ["O-17"]);
    let system = h.queue("systemErrors");
    assert_eq!(system.len(), 1, "letter delivery failure goes to the system error queue");
    assert_eq!(text(&query(&system[0].body, "string(/error/ruleName)")), ["deadLink"]);
    assert!(!query(&system[0].body, "/error/disconnectedTransport").is_empty());

    let dir = tempdir();
    let h = harness(dir.path(), ROUTING_APP, Arc::new(MockTransport::failing()));
    h.inject("src", "<go/>");
    h.runtime.run_until_idle().unwrap();
    for (queue, order) in [("ruleErrors", "1"), ("queueErrors", "2"), ("systemErrors", "3")] {
        let errors = h.queue(queue);
        assert_eq!(errors.len(), 1, "{queue}");
        assert!(!query(&errors[0].body, "/error/disconnectedTransport").is_empty());
        assert_eq!(text(&query(&errors[0].body, "/error/initialMessage//orderID")), [order], "{queue}");
    }
    "rule, queue and system error queues".into()
}

// 10 ------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Combo {
    fixed: bool,
    inherited: bool,
    default_value: bool,
    explicit: bool,
    trigger_has: bool,
}

/// The precedence table: fixed-computed, then explicit, then inherited,
/// then the queue default. Explicit values for fixed properties are
/// rejected.
fn expected(c: Combo) -> Result<Option<&'static str>, ()> {
    if c.fixed && c.explicit {
        return Err(());
    }
    Ok(if c.fixed && c.default_value {
        Some("computed")
    } else if c.explicit {
        Some("explicit")
    } else if c.inherited && c.trigger_has {
        Some("inherited")
    } else if c.default_value {
        Some("computed")
    } else {
        None
    })
}

fn precedence_case(c: Combo) {
    let app = format!(
        "create queue s kind basic mode persistent\n\
         create queue t kind basic mode persistent\n\
         create property p as xs:string{}{}\n  queue s{}\n  queue t{}\n",
        if c.fixed { " fixed" } else { "" },
        if c.inherited { " inherited" } else { "" },
        if c.trigger_has { " value \"inherited\"" } else { "" },
        if c.default_value { " value string(/m/@v)" } else { "" },
    );
    let dir = tempdir();
    let h = harness(dir.path(), &app, Arc::new(MockTransport::default()));
    let trigger_id = h.inject("s", "<m/>");
    let trigger = h.store.snapshot().message(trigger_id).unwrap();
    assert_eq!(trigger.prop("p").is_some(), c.trigger_has, "{c:?}");

    let mut t = h.store.begin();
    let mut req = EnqueueRequest::new("t", body(r#"<m v="computed"/>"#)).trigger(trigger);
    if c.explicit {
        req = req.with("p", Atomic::Str("explicit".into()));
    }
    match (t.enqueue(req), expected(c)) {
        (Err(StoreError::FixedPropertyOverride(name)), Err(())) => assert_eq!(name, "p"),
        (Ok(id), Ok(want)) => {
            t.commit().unwrap();
            let m = h.store.snapshot().message(id).unwrap();
            let got = m.prop("p").map(Atomic::lexical);
            assert_eq!(got.as_deref(), want, "{c:?}");
        }
        (got, want) => panic!("{c:?}: got {got:?}, expected {want:?}"),
    }
}

const RESERVED_APP: &str = r#"
create queue src kind basic mode persistent
create queue basic kind basic mode persistent
create queue outgoing kind outgoingGateway mode persistent endpoint "http://127.0.0.1:9/"
create queue echo kind echo mode persistent
"#;

/// Reserved names a `with` clause may set, per target queue kind.
const SETTABLE: &[(&str, &[QueueKind])] = &[
    ("Sender", &[QueueKind::OutgoingGateway]),
    ("Recipient", &[QueueKind::OutgoingGateway]),
    ("EchoTarget", &[QueueKind::Echo]),
    ("EchoDelay", &[QueueKind::Echo]),
    ("ConnectionId", &[]),
    ("ArrivalTime", &[]),
    ("CreationTime", &[]),
    ("CreatingRule", &[]),
];

fn reserved_value(name: &str) -> Atomic {
    match name {
        "EchoDelay" => Atomic::Int(5),
        "ArrivalTime" | "CreationTime" => Atomic::DateTime(chrono::DateTime::UNIX_EPOCH),
        _ => Atomic::Str(format!("user-{name}")),
    }
}

fn reserved_table() -> usize {
    let dir = tempdir();
    let h = harness(dir.path(), RESERVED_APP, Arc::new(MockTransport::default()));
    let mut cases = 0;
    for (name, kinds) in SETTABLE {
        for (queue, kind) in [
            ("basic", QueueKind::Basic),
            ("outgoing", QueueKind::OutgoingGateway),
            ("echo", QueueKind::Echo),
        ] {
            let mut t = h.store.begin();
            let r = t.enqueue(EnqueueRequest::new(queue, body("<m/>")).with(*name, reserved_value(name)));
            match r {
                Ok(id) => {
                    assert!(kinds.contains(&kind), "{name} accepted on {queue}");
                    t.commit().unwrap();
                    let m = h.store.snapshot().message(id).unwrap();
                    assert_eq!(m.prop(name), Some(&reserved_value(name)));
                }
                Err(StoreError::FixedPropertyOverride(n)) => {
                    assert!(!kinds.contains(&kind), "{name} rejected on {queue}");
                    assert_eq!(&n, name);
                }
                Err(e) => panic!("{name} on {queue}: {e}"),
            }
            cases += 1;
        }
    }

    // System values: CreationTime from the clock, CreatingRule from the
    // rule, ConnectionId from the trigger.
    let mut t = h.store.begin();
    let trigger = t
        .enqueue(EnqueueRequest::new("src", body("<m/>")).system("ConnectionId", Atomic::Str("conn-1".into())))
        .unwrap();
    t.commit().unwrap();
    let trigger = h.store.snapshot().message(trigger).unwrap();
    let mut t = h.store.begin();
    let id = t
        .enqueue(EnqueueRequest::new("basic", body("<m/>")).trigger(trigger).rule("r"))
        .unwrap();
    t.commit().unwrap();
    let m = h.store.snapshot().message(id).unwrap();
    let now = qflow::clock::Clock::now(h.clock.as_ref());
    assert_eq!(m.prop("CreationTime"), Some(&Atomic::DateTime(now)));
    assert_eq!(m.prop("CreatingRule"), Some(&Atomic::Str("r".into())));
    assert_eq!(m.prop("ConnectionId"), Some(&Atomic::Str("conn-1".into())));
    cases + 1
}

fn property_precedence() -> String {
    let mut n = 0;
    for bits in 0..32u8 {
        precedence_case(Combo {
            fixed: bits & 1 != 0,
            inherited: bits & 2 != 0,
            default_value: bits & 4 != 0,
            explicit: bits & 8 != 0,
            trigger_has: bits & 16 != 0,
        });
        n += 1;
    }
    let reserved = reserved_table();
    format!("{n} user-property combinations, {reserved} reserved-name cases")
}
