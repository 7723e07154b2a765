mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use qflow::clock::ManualClock;
use qflow::config::EngineConfig;
use qflow::expr::Atomic;

const PIPELINE: &str = r#"
create queue in kind basic mode persistent
create queue out kind basic mode persistent
create property g as xs:string fixed queue in, out value //g
create slicing byGroup on g
create rule forward for in
  if (/m) then do enqueue <done>{/m/*}</done> into out
create rule close for byGroup
  if (count(qs:slice()[/done]) = 5) then do reset
"#;

fn pipeline(dir: &std::path::Path, workers: usize, gc: bool) -> Harness {
    harness_with(
        dir,
        PIPELINE,
        EngineConfig {
            workers,
            gc_on_idle: gc,
            ..config(None)
        },
        Arc::new(MockTransport::default()),
        Arc::new(ManualClock::default()),
        None,
    )
}

fn final_state(h: &Harness) -> (Vec<(String, String, bool)>, Vec<u64>) {
    let snap = h.store.snapshot();
    let mut msgs: Vec<_> = snap
        .messages()
        .iter()
        .map(|m| (m.queue.clone(), m.document().to_xml(), snap.is_processed(m.id)))
        .collect();
    msgs.sort();
    let gens = (0..4)
        .map(|g| snap.generation("byGroup", &Atomic::Str(g.to_string())).unwrap())
        .collect();
    (msgs, gens)
}

#[test]
fn parallel_workers_reach_the_serial_outcome() {
    let serial_dir = tempfile::tempdir().unwrap();
    let serial = pipeline(serial_dir.path(), 1, false);
    let parallel_dir = tempfile::tempdir().unwrap();
    let parallel = pipeline(parallel_dir.path(), 4, false);
    for h in [&serial, &parallel] {
        for i in 0..20 {
            h.inject("in", &format!("<m><n>{i}</n><g>{}</g></m>", i % 4));
        }
        let stats = h.runtime.run_until_idle().unwrap();
        assert!(stats.processed >= 40);
    }
    let expected = final_state(&serial);
    assert_eq!(expected.1, vec![1; 4]);
    assert_eq!(final_state(&parallel), expected);
}

#[test]
fn unprocessed_messages_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let h = pipeline(dir.path(), 1, false);
        h.inject("in", "<m><n>1</n><g>0</g></m>");
    }
    let h = pipeline(dir.path(), 1, false);
    assert_eq!(h.unprocessed_in("in").len(), 1);
    h.runtime.run_until_idle().unwrap();
    assert!(h.unprocessed_in("in").is_empty());
    assert_eq!(h.queue("out").len(), 1);
}

#[test]
fn idle_collection_removes_finished_slices() {
    let dir = tempfile::tempdir().unwrap();
    let h = pipeline(dir.path(), 2, true);
    for i in 0..5 {
        h.inject("in", &format!("<m><n>{i}</n><g>0</g></m>"));
    }
    let stats = h.runtime.run_until_idle().unwrap();
    assert_eq!(stats.collected, 10);
    assert_eq!(h.store.snapshot().message_count(), 0);
}

#[test]
fn background_run_picks_up_notified_messages() {
    let dir = tempfile::tempdir().unwrap();
    let h = Arc::new(pipeline(dir.path(), 2, false));
    let stop = Arc::new(AtomicBool::new(false));
    let runner = {
        let (h, stop) = (h.clone(), stop.clone());
        thread::spawn(move || h.runtime.run(&stop).unwrap())
    };
    let notify = h.runtime.notifier();
    for i in 0..3 {
        let mut t = h.store.begin();
        t.enqueue(qflow::store::EnqueueRequest::new(
            "in",
            body(&format!("<m><n>{i}</n><g>1</g></m>")),
        ))
        .unwrap();
        notify(t.commit().unwrap().created);
    }
    let deadline = Instant::now() + Duration::from_secs(10);
    while h.queue("out").len() < 3 {
        assert!(Instant::now() < deadline, "messages were not processed");
        thread::sleep(Duration::from_millis(5));
    }
    stop.store(true, Ordering::SeqCst);
    let stats = runner.join().unwrap();
    assert_eq!(stats.processed, 6);
}
