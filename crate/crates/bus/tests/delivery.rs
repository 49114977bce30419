use std::collections::HashMap;

use ogs_bus::{topics, Bus, BusError, Envelope, Qos, TopicPattern};
use proptest::prelude::*;
use serde_json::{json, Value};

fn state(s: &str) -> Value {
    json!({"state": s, "pass_id": null})
}

fn track(x: f64) -> Value {
    let p = json!([x, -x]);
    json!({"raw_error": p, "fpm_command": p, "residual": p, "residual_rms": p, "lock": true, "offload_offset": p, "valid": true})
}

fn boba(power: f64) -> Value {
    json!({"enabled": true, "lambda_nm": 1550.0, "power_w": power, "modulated": false})
}

#[test]
fn wildcards_match_whole_levels() {
    let p = TopicPattern::parse("ogs/track/#").unwrap();
    assert!(p.matches("ogs/track/telemetry"));
    assert!(p.matches("ogs/track/cmd/ack"));
    assert!(p.matches("ogs/track"));
    assert!(!p.matches("ogs/tracker/telemetry"));
    for bad in ["track/#", "ogs/+/cmd", "ogs//x", "ogs/#/x", "x"] {
        assert!(TopicPattern::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn publishing_checks_topic_and_schema() {
    let bus = Bus::new();
    assert!(matches!(bus.publish("ogs/nope", 0.0, json!({})), Err(BusError::UnregisteredTopic(_))));
    assert!(matches!(bus.publish("ogs/#", 0.0, json!({})), Err(BusError::WildcardPublish(_))));
    let err = bus.publish(topics::CONTROLLER_STATE, 0.0, json!({"state": "NAPPING", "pass_id": null})).unwrap_err();
    assert!(matches!(&err, BusError::Schema { path, .. } if path == "/state"), "{err}");
    assert!(bus.publish(topics::CONTROLLER_STATE, 0.0, json!({"state": "IDLE", "pass_id": null, "extra": 1})).is_err());
    assert!(bus.publish(topics::CONTROLLER_STATE, 0.0, json!([1])).is_err());
    assert!(bus.log().is_empty());

    let env = bus.publish(topics::CONTROLLER_STATE, 2.5, state("IDLE")).unwrap();
    assert_eq!((env.seq, env.qos, env.retained), (1, Qos::AtLeastOnce, true));
    assert_eq!(env.payload["t"], json!(2.5));
    assert_eq!(env.payload["seq"], json!(1));
}

#[test]
fn full_queues_drop_telemetry_but_refuse_state() {
    let bus = Bus::new();
    let sub = bus.subscribe_with_capacity("ogs/#", 3).unwrap();
    for i in 0..5 {
        bus.publish(topics::TRACK_TELEMETRY, i as f64, track(i as f64)).unwrap();
    }
    assert_eq!(sub.dropped(), 2);
    let seqs: Vec<u64> = sub.drain().iter().map(|e| e.seq).collect();
    assert_eq!(seqs, vec![3, 4, 5]);

    for _ in 0..3 {
        bus.publish(topics::BOBA_STATE, 0.0, boba(1.0)).unwrap();
    }
    let err = bus.publish(topics::BOBA_STATE, 0.0, boba(2.0)).unwrap_err();
    assert!(matches!(err, BusError::Backpressure(_)));
    // the refused publish left no trace
    assert_eq!(bus.retained(topics::BOBA_STATE).unwrap().payload["power_w"], json!(1.0));
    sub.drain();
    bus.publish(topics::BOBA_STATE, 0.0, boba(2.0)).unwrap();
    assert_eq!(sub.try_recv().unwrap().seq, 4);
}

#[test]
fn closed_subscription_stops_receiving() {
    let bus = Bus::new();
    let sub = bus.subscribe("ogs/controller/state").unwrap();
    sub.close();
    bus.publish(topics::CONTROLLER_STATE, 0.0, state("IDLE")).unwrap();
    assert!(sub.try_recv().is_none());
}

#[test]
fn commands_are_acknowledged_once_per_seq() {
    let bus = Bus::new();
    let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let c = calls.clone();
    bus.register_handler(topics::TRACK_CMD, move |env| {
        c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        match env.payload.get("kp").and_then(Value::as_f64) {
            Some(kp) if kp > 5.0 => Err("kp too large".into()),
            kp => Ok(json!({"kp": kp})),
        }
    })
    .unwrap();
    bus.set_handler_latency(topics::TRACK_CMD, 0.01);

    let ack = bus.command_roundtrip(topics::TRACK_CMD, 1.0, json!({"kp": 0.4}), 1.0).unwrap();
    assert_eq!(ack["ok"], json!(true));
    assert_eq!(ack["t"], json!(1.01));
    let ack = bus.command_roundtrip(topics::TRACK_CMD, 2.0, json!({"kp": 9.0}), 1.0).unwrap();
    assert_eq!(ack["error"], json!("kp too large"));

    let acks = bus.subscribe("ogs/track/cmd/ack").unwrap();
    bus.inject_duplicate(topics::TRACK_CMD);
    bus.publish(topics::TRACK_CMD, 3.0, json!({"kp": 0.1})).unwrap();
    let got = acks.drain();
    assert_eq!(got.len(), 2);
    assert_eq!(got[0].payload, got[1].payload);
    assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 3);

    bus.set_handler_latency(topics::TRACK_CMD, 5.0);
    assert!(matches!(
        bus.command_roundtrip(topics::TRACK_CMD, 4.0, json!({}), 1.0),
        Err(BusError::CommandFailed { attempts: 2, .. })
    ));
    bus.set_handler_latency(topics::TRACK_CMD, 0.0);
    bus.set_handler_running(topics::TRACK_CMD, false);
    assert!(matches!(
        bus.command_roundtrip(topics::TRACK_CMD, 5.0, json!({}), 1.0),
        Err(BusError::CommandFailed { .. })
    ));
    assert!(matches!(
        bus.command_roundtrip(topics::POL_CMD, 5.0, json!({}), 1.0),
        Err(BusError::NoHandler(_))
    ));
}

#[test]
fn log_round_trips_through_jsonl() {
    let bus = Bus::new();
    bus.publish(topics::CONTROLLER_STATE, 0.1, state("IDLE")).unwrap();
    bus.publish(topics::TRACK_TELEMETRY, 0.2, track(1e-6)).unwrap();
    let mut buf = Vec::new();
    bus.write_log(&mut buf).unwrap();
    let back = ogs_bus::read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, bus.log());
    assert!(ogs_bus::read_jsonl("{not json}\n".as_bytes()).is_err());
}

#[derive(Debug, Clone)]
enum Op {
    Track(f64),
    State(usize),
    Boba(f64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (-1e-3..1e-3f64).prop_map(Op::Track),
        (0..topics::STATION_STATES.len()).prop_map(Op::State),
        (0.0..5.0f64).prop_map(Op::Boba),
    ]
}

fn apply(bus: &Bus, t: f64, op: &Op) -> Envelope {
    match op {
        Op::Track(x) => bus.publish(topics::TRACK_TELEMETRY, t, track(*x)),
        Op::State(i) => bus.publish(topics::CONTROLLER_STATE, t, state(topics::STATION_STATES[*i])),
        Op::Boba(p) => bus.publish(topics::BOBA_STATE, t, boba(*p)),
    }
    .unwrap()
}

proptest! {
    #[test]
    fn per_topic_order_is_preserved(ops in proptest::collection::vec(op(), 1..200)) {
        let bus = Bus::new();
        let all = bus.subscribe("ogs/#").unwrap();
        let track_only = bus.subscribe(topics::TRACK_TELEMETRY).unwrap();
        for (i, o) in ops.iter().enumerate() {
            apply(&bus, i as f64 * 0.1, o);
        }
        let got = all.drain();
        prop_assert_eq!(got.len(), ops.len());
        let mut last: HashMap<String, u64> = HashMap::new();
        for e in &got {
            let prev = last.insert(e.topic.clone(), e.seq).unwrap_or(0);
            prop_assert_eq!(e.seq, prev + 1);
        }
        prop_assert_eq!(got, bus.log());
        prop_assert!(track_only.drain().iter().all(|e| e.topic == topics::TRACK_TELEMETRY));
    }

    #[test]
    fn retained_values_converge(ops in proptest::collection::vec(op(), 1..100), split in 0usize..100) {
        let bus = Bus::new();
        let split = split.min(ops.len());
        let early = bus.subscribe("ogs/#").unwrap();
        let mut latest: HashMap<&str, Value> = HashMap::new();
        for (i, o) in ops.iter().enumerate() {
            let e = apply(&bus, i as f64, o);
            if e.retained {
                latest.insert(topics::lookup(&e.topic).unwrap().path, e.payload);
            }
            if i + 1 == split {
                drop(bus.subscribe("ogs/#").unwrap());
            }
        }
        let late = bus.subscribe("ogs/#").unwrap();
        let mut from_early: HashMap<String, Value> = HashMap::new();
        for e in early.drain().into_iter().filter(|e| e.retained) {
            from_early.insert(e.topic, e.payload);
        }
        let from_late: HashMap<String, Value> = late.drain().into_iter().map(|e| (e.topic, e.payload)).collect();
        prop_assert_eq!(&from_early, &from_late);
        for (topic, v) in latest {
            prop_assert_eq!(bus.retained(topic).map(|e| e.payload), Some(v));
        }
    }
}
