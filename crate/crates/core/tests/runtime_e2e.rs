//! End-to-end runs of the runtime: demo couplings, start-order
//! independence, distributed placement, fail-fast, and external
//! instance attachment.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use couplet_core::codec::Payload;
use couplet_core::config::parse_config;
use couplet_core::kernel::{
    InstanceImpl, InstancePorts, KernelError, Sink, Source, Submodel,
};
use couplet_core::runtime::{
    run_simulation, ExternalEvent, ExternalInstance, ImplRegistry, InstanceOutcome,
    ManagerCfg, RunOptions, RunPlan, RunReport,
};

type Transcript = Arc<Mutex<Vec<(String, String, Vec<u8>, u64)>>>;

/// Sink that records (instance, port, payload bytes, timestamp bits).
struct Recorder {
    name: String,
    log: Transcript,
}

impl Sink for Recorder {
    fn consume(&mut self, port: &str, payload: Payload, t: f64) -> Result<(), KernelError> {
        let bytes = couplet_core::codec::encode_payload(&payload)
            .map_err(|e| KernelError::failed(e.to_string()))?;
        self.log
            .lock()
            .unwrap()
            .push((self.name.clone(), port.to_string(), bytes, t.to_bits()));
        Ok(())
    }
}

/// Source that emits `count` numbered messages on every out-port.
struct Burst {
    count: u64,
    sent: u64,
}

impl Source for Burst {
    fn produce(&mut self, ports: &mut InstancePorts) -> Result<bool, KernelError> {
        if self.sent >= self.count {
            return Ok(false);
        }
        for port in ports.out_port_names() {
            ports.send(&port, Payload::I64(vec![self.sent as i64]), self.sent as f64)?;
        }
        self.sent += 1;
        Ok(true)
    }
}

fn registry_with_test_impls(log: Transcript) -> ImplRegistry {
    let mut impls = ImplRegistry::with_builtins();
    impls.register("test.burst8", |_| {
        Ok(InstanceImpl::Source(Box::new(Burst { count: 8, sent: 0 })))
    });
    {
        let log = log.clone();
        impls.register("test.recorder", move |spec| {
            Ok(InstanceImpl::Sink(Box::new(Recorder {
                name: spec.name.clone(),
                log: log.clone(),
            })))
        });
    }
    impls.register("test.forward_both", |_| {
        struct ForwardBoth;
        impl couplet_core::kernel::Mapper for ForwardBoth {
            fn activate(
                &mut self,
                inputs: &mut couplet_core::kernel::MapperInputs,
                ports: &mut InstancePorts,
            ) -> Result<(), KernelError> {
                let (payload, t) = inputs.take("inp").unwrap();
                for port in ports.out_port_names() {
                    ports.send(&port, payload.clone(), t)?;
                }
                Ok(())
            }
        }
        Ok(InstanceImpl::Mapper(Box::new(ForwardBoth)))
    });
    impls
}

const FAN_CONFIG: &str = "\
instance gen source:test.burst8
instance fan mapper:test.forward_both
instance s1 sink:test.recorder
instance s2 sink:test.recorder
conduit gen.out -> fan.inp
conduit fan.a -> s1.inp
conduit fan.b -> s2.inp
";

fn sorted(log: &Transcript) -> Vec<(String, String, Vec<u8>, u64)> {
    let mut entries = log.lock().unwrap().clone();
    entries.sort();
    entries
}

fn assert_completed(report: &RunReport) {
    assert!(
        report.success(),
        "run did not complete cleanly: {:?}",
        report.outcome
    );
    for instance in &report.instances {
        assert!(
            matches!(instance.outcome, InstanceOutcome::Completed(_)),
            "instance {} did not complete: {:?}",
            instance.name,
            instance.outcome
        );
    }
}

#[test]
fn acyclic_macro_micro_demo_completes() {
    let text = "\
instance macro submodel:demo.macro
instance micro submodel:demo.micro
scale macro dt=1 hour T=1 day
scale micro dt=60 s T=1 hour
param micro.restart_port environmentValue
conduit macro.macroscopicVariable -> micro.environmentValue
";
    let doc = parse_config(text).unwrap();
    let plan = RunPlan::single(doc);
    let impls = ImplRegistry::with_builtins();
    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    assert_completed(&report);
    let macro_stats = report
        .instances
        .iter()
        .find(|i| i.name == "macro")
        .unwrap();
    if let InstanceOutcome::Completed(stats) = &macro_stats.outcome {
        assert_eq!(stats.solve_steps, 24);
        assert_eq!(stats.messages_sent, 24);
    }
    let micro_stats = report
        .instances
        .iter()
        .find(|i| i.name == "micro")
        .unwrap();
    if let InstanceOutcome::Completed(stats) = &micro_stats.outcome {
        // One pass per macro observation.
        assert_eq!(stats.passes, 24);
        assert_eq!(stats.messages_received, 24);
    }
}

#[test]
fn cyclic_ping_pong_demo_completes() {
    let text = "\
instance macro submodel:demo.macro
instance micro submodel:demo.micro
scale macro dt=1 hour T=1 day
scale micro dt=60 s T=1 hour
param micro.restart_port environmentValue
conduit macro.macroscopicVariable -> micro.environmentValue
conduit micro.microscopicResponse -> macro.feedback
";
    let doc = parse_config(text).unwrap();
    let plan = RunPlan::single(doc);
    let impls = ImplRegistry::with_builtins();
    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    assert_completed(&report);
}

#[test]
fn start_order_does_not_change_the_transcript() {
    let doc = parse_config(FAN_CONFIG).unwrap();
    let orders: Vec<Vec<String>> = vec![
        vec![],
        vec!["s2".into(), "s1".into(), "fan".into(), "gen".into()],
        vec!["fan".into(), "gen".into(), "s2".into(), "s1".into()],
        vec!["s1".into(), "gen".into(), "fan".into(), "s2".into()],
        vec!["gen".into(), "s1".into(), "s2".into(), "fan".into()],
        vec!["s2".into(), "fan".into(), "s1".into(), "gen".into()],
        vec!["fan".into(), "s1".into(), "gen".into(), "s2".into()],
        vec!["s1".into(), "s2".into(), "gen".into(), "fan".into()],
        vec!["gen".into(), "fan".into(), "s1".into(), "s2".into()],
        vec!["s2".into(), "s1".into(), "gen".into(), "fan".into()],
    ];
    let mut transcripts = Vec::new();
    for order in orders {
        let log: Transcript = Arc::new(Mutex::new(Vec::new()));
        let impls = registry_with_test_impls(log.clone());
        let plan = RunPlan::single(doc.clone());
        let options = RunOptions {
            start_order: (!order.is_empty()).then_some(order),
            ..Default::default()
        };
        let report = run_simulation(&plan, &impls, &options).unwrap();
        assert_completed(&report);
        transcripts.push(sorted(&log));
    }
    for transcript in &transcripts[1..] {
        assert_eq!(transcript, &transcripts[0]);
    }
    // 8 messages to each sink.
    assert_eq!(transcripts[0].len(), 16);
}

#[test]
fn split_placement_matches_single_manager_transcript() {
    let doc = parse_config(FAN_CONFIG).unwrap();

    let log_single: Transcript = Arc::new(Mutex::new(Vec::new()));
    let impls = registry_with_test_impls(log_single.clone());
    let report =
        run_simulation(&RunPlan::single(doc.clone()), &impls, &RunOptions::default()).unwrap();
    assert_completed(&report);

    let log_split: Transcript = Arc::new(Mutex::new(Vec::new()));
    let impls = registry_with_test_impls(log_split.clone());
    let mut placement = BTreeMap::new();
    placement.insert("gen".to_string(), "m1".to_string());
    placement.insert("fan".to_string(), "m1".to_string());
    placement.insert("s1".to_string(), "m2".to_string());
    placement.insert("s2".to_string(), "m2".to_string());
    let mut managers = BTreeMap::new();
    managers.insert("m1".to_string(), ManagerCfg::default());
    managers.insert("m2".to_string(), ManagerCfg::default());
    let plan = RunPlan {
        doc,
        placement,
        managers,
    };
    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    assert_completed(&report);

    assert_eq!(sorted(&log_single), sorted(&log_split));
}

#[test]
fn failing_instance_aborts_blocked_ring_within_five_seconds() {
    struct FailSoon;
    impl Submodel for FailSoon {
        fn init(&mut self, _p: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
            Ok(())
        }
        fn intermediate_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
        fn solve_step(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
            _dt: f64,
        ) -> Result<(), KernelError> {
            thread::sleep(Duration::from_millis(20));
            Err(KernelError::failed("synthetic failure"))
        }
        fn final_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
    }

    struct WaitForever;
    impl Submodel for WaitForever {
        fn init(&mut self, _p: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
            Ok(())
        }
        fn intermediate_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
        fn solve_step(
            &mut self,
            ports: &mut InstancePorts,
            _t: f64,
            _dt: f64,
        ) -> Result<(), KernelError> {
            // Blocks forever: the upstream neighbor never sends.
            ports.receive("inp").map(|_| ())
        }
        fn final_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
    }

    // Four waiters in a ring (a receive deadlock on their own) plus one
    // failing instance; fail-fast must unblock everything.
    let text = "\
instance failer submodel:test.fail_soon
instance w1 submodel:test.wait
instance w2 submodel:test.wait
instance w3 submodel:test.wait
instance w4 submodel:test.wait
scale failer dt=1 s T=10 s
scale w1 dt=1 s T=10 s
scale w2 dt=1 s T=10 s
scale w3 dt=1 s T=10 s
scale w4 dt=1 s T=10 s
conduit w1.out -> w2.inp
conduit w2.out -> w3.inp
conduit w3.out -> w4.inp
conduit w4.out -> w1.inp
";
    let doc = parse_config(text).unwrap();
    let mut impls = ImplRegistry::with_builtins();
    impls.register("test.fail_soon", |_| {
        Ok(InstanceImpl::Submodel(Box::new(FailSoon)))
    });
    impls.register("test.wait", |_| {
        Ok(InstanceImpl::Submodel(Box::new(WaitForever)))
    });
    let plan = RunPlan::single(doc);
    let start = Instant::now();
    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "abort took {elapsed:?}, expected under 5 s"
    );
    assert!(!report.success());
    assert_eq!(report.instances.len(), 5);
    let failed = report
        .instances
        .iter()
        .filter(|i| matches!(i.outcome, InstanceOutcome::Failed(_)))
        .count();
    assert_eq!(failed, 1, "exactly the failer reports the failure");
    for instance in report.instances.iter().filter(|i| i.name != "failer") {
        assert_eq!(instance.outcome, InstanceOutcome::Aborted, "{}", instance.name);
    }
}

#[test]
fn unknown_impl_is_a_startup_error() {
    let text = "\
instance a source:no.such.impl
instance b sink:test.recorder
conduit a.out -> b.inp
";
    let doc = parse_config(text).unwrap();
    let log: Transcript = Arc::new(Mutex::new(Vec::new()));
    let impls = registry_with_test_impls(log);
    let plan = RunPlan::single(doc);
    let err = run_simulation(&plan, &impls, &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("no.such.impl"));
}

#[test]
fn send_to_cleanly_finished_instance_fails_fast() {
    // The downstream sink consumes one message per pass and finishes; the
    // source keeps sending. That is an error, not a silent drop.
    struct OneShotSink {
        taken: bool,
    }
    impl Submodel for OneShotSink {
        fn init(&mut self, ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
            if !self.taken {
                self.taken = true;
                ports.receive("inp").map(|_| ())
            } else {
                Ok(())
            }
        }
        fn intermediate_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
        fn solve_step(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
            _dt: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
        fn final_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
    }
    struct SlowBurst {
        sent: u64,
    }
    impl Source for SlowBurst {
        fn produce(&mut self, ports: &mut InstancePorts) -> Result<bool, KernelError> {
            if self.sent >= 50 {
                return Ok(false);
            }
            thread::sleep(Duration::from_millis(5));
            ports.send("out", Payload::I64(vec![self.sent as i64]), self.sent as f64)?;
            self.sent += 1;
            Ok(true)
        }
    }
    let text = "\
instance src source:test.slow_burst
instance snk submodel:test.one_shot
scale snk dt=1 s T=1 s
conduit src.out -> snk.inp
";
    let doc = parse_config(text).unwrap();
    let mut impls = ImplRegistry::with_builtins();
    impls.register("test.slow_burst", |_| {
        Ok(InstanceImpl::Source(Box::new(SlowBurst { sent: 0 })))
    });
    impls.register("test.one_shot", |_| {
        Ok(InstanceImpl::Submodel(Box::new(OneShotSink { taken: false })))
    });
    let plan = RunPlan::single(doc);
    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    assert!(!report.success(), "late sends must fail fast");
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn external_instance_exchanges_messages_and_shuts_down_cleanly() {
    // "ext" echoes each received value back, doubled, speaking only the
    // frame protocol over TCP.
    let text = "\
instance gen source:test.burst8
instance ext submodel:external
instance rec sink:test.recorder
scale ext dt=1 s T=8 s
conduit gen.out -> ext.inp
conduit ext.out -> rec.inp
";
    let doc = parse_config(text).unwrap();
    let log: Transcript = Arc::new(Mutex::new(Vec::new()));
    let impls = registry_with_test_impls(log.clone());
    let mut plan = RunPlan::single(doc);
    let port = free_port();
    plan.managers.get_mut("main").unwrap().bind = format!("127.0.0.1:{port}");

    let client = thread::spawn(move || {
        let mut ext = ExternalInstance::connect(&format!("127.0.0.1:{port}"), "ext").unwrap();
        let mut received = 0u64;
        loop {
            match ext.receive().unwrap() {
                ExternalEvent::Message {
                    payload: Payload::I64(values),
                    timestamp,
                    ..
                } => {
                    received += 1;
                    ext.send("out", Payload::I64(vec![values[0] * 2]), timestamp)
                        .unwrap();
                    if received == 8 {
                        break;
                    }
                }
                other => panic!("unexpected event {other:?}"),
            }
        }
        ext.finish().unwrap();
        received
    });

    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    assert!(report.success(), "outcome: {:?}", report.outcome);
    assert_eq!(client.join().unwrap(), 8);
    let entries = sorted(&log);
    assert_eq!(entries.len(), 8);
    // Doubled values 0,2,4,...,14 all arrive at the recorder.
    let mut values: Vec<i64> = entries
        .iter()
        .map(|(_, _, bytes, _)| match couplet_core::codec::decode_payload(bytes).unwrap() {
            Payload::I64(v) => v[0],
            other => panic!("unexpected payload {other:?}"),
        })
        .collect();
    values.sort();
    assert_eq!(values, (0..8).map(|i| i * 2).collect::<Vec<i64>>());
}

#[test]
fn external_first_frame_must_be_register() {
    let text = "\
instance ext source:external
instance rec sink:test.recorder
conduit ext.out -> rec.inp
";
    let doc = parse_config(text).unwrap();
    let log: Transcript = Arc::new(Mutex::new(Vec::new()));
    let impls = registry_with_test_impls(log);
    let mut plan = RunPlan::single(doc);
    let port = free_port();
    plan.managers.get_mut("main").unwrap().bind = format!("127.0.0.1:{port}");

    let client = thread::spawn(move || {
        use std::io::Write;
        let mut stream = loop {
            match std::net::TcpStream::connect(("127.0.0.1", port)) {
                Ok(s) => break s,
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        };
        // DATA before REGISTER: a bad handshake.
        let frame = couplet_core::codec::Frame::Data {
            src: couplet_core::topology::Endpoint::new("ext", "out"),
            dst: couplet_core::topology::Endpoint::new("", ""),
            timestamp: 0.0,
            payload: Payload::Raw(vec![]),
        };
        let bytes = couplet_core::codec::encode_frame(&frame).unwrap();
        let _ = stream.write_all(&bytes);
    });

    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    assert!(!report.success());
    client.join().unwrap();
}

#[test]
fn abort_during_large_transfer_unblocks_receiver() {
    struct BigSendThenFail;
    impl Submodel for BigSendThenFail {
        fn init(&mut self, _p: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
            Ok(())
        }
        fn intermediate_observation(
            &mut self,
            ports: &mut InstancePorts,
            t: f64,
        ) -> Result<(), KernelError> {
            ports.send("out", Payload::Raw(vec![0xAA; 64 * 1024 * 1024]), t)
        }
        fn solve_step(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
            _dt: f64,
        ) -> Result<(), KernelError> {
            Err(KernelError::failed("synthetic failure mid-transfer"))
        }
        fn final_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
    }
    struct TwoReceives;
    impl Submodel for TwoReceives {
        fn init(&mut self, _p: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
            Ok(())
        }
        fn intermediate_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
        fn solve_step(
            &mut self,
            ports: &mut InstancePorts,
            _t: f64,
            _dt: f64,
        ) -> Result<(), KernelError> {
            ports.receive("inp")?;
            // The second message never arrives; only the abort unblocks us.
            ports.receive("inp").map(|_| ())
        }
        fn final_observation(
            &mut self,
            _p: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            Ok(())
        }
    }
    let text = "\
instance big submodel:test.big_send
instance rcv submodel:test.two_receives
scale big dt=1 s T=1 s
scale rcv dt=1 s T=1 s
conduit big.out -> rcv.inp
";
    let doc = parse_config(text).unwrap();
    let mut impls = ImplRegistry::with_builtins();
    impls.register("test.big_send", |_| {
        Ok(InstanceImpl::Submodel(Box::new(BigSendThenFail)))
    });
    impls.register("test.two_receives", |_| {
        Ok(InstanceImpl::Submodel(Box::new(TwoReceives)))
    });
    // Split across two managers so the 64 MiB payload crosses a socket.
    let mut placement = BTreeMap::new();
    placement.insert("big".to_string(), "m1".to_string());
    placement.insert("rcv".to_string(), "m2".to_string());
    let mut managers = BTreeMap::new();
    managers.insert("m1".to_string(), ManagerCfg::default());
    managers.insert("m2".to_string(), ManagerCfg::default());
    let plan = RunPlan {
        doc,
        placement,
        managers,
    };
    let start = Instant::now();
    let report = run_simulation(&plan, &impls, &RunOptions::default()).unwrap();
    assert!(!report.success());
    assert!(
        start.elapsed() < Duration::from_secs(5),
        "abort took {:?}",
        start.elapsed()
    );
}
