use qoverlay::classical::ClassicalChannelParams;
use qoverlay::control::{Controller, ControllerSettings, LinkSpec, PathSpec};
use qoverlay::error::Error;
use qoverlay::overlay::{CircuitConfig, CircuitKind, CircuitState};
use qoverlay::quantum::QuantumLinkParams;

fn line(names: &[&str], drop: f64, seed: u64) -> Controller {
    let mut c = Controller::new(ControllerSettings::default());
    let ids: Vec<_> = names.iter().map(|n| c.add_node(n, true).unwrap()).collect();
    for (i, w) in ids.windows(2).enumerate() {
        let mut spec = LinkSpec::new(w[0].clone(), w[1].clone());
        spec.quantum = QuantumLinkParams::perfect(seed + i as u64);
        spec.qkd.seed = seed * 31 + i as u64;
        spec.classical = ClassicalChannelParams {
            drop_probability: drop,
            latency_ticks: 2,
            seed: seed + 100 + i as u64,
        };
        c.configure_link(spec).unwrap();
    }
    c
}

#[test]
fn lossy_datagrams_arrive_intact() {
    let mut c = line(&["a", "b"], 0.0, 1);
    let (a, b) = (c.node("a").unwrap(), c.node("b").unwrap());
    let h = c.open_circuit(&a, &b, CircuitConfig::new(CircuitKind::SecureLossyDatagram)).unwrap();
    for i in 0..20u8 {
        c.send_lossy(&h, &[i; 10]).unwrap();
    }
    c.run_ticks(5).unwrap();
    let got = c.recv_all(&h.reversed()).unwrap();
    assert_eq!(got.len(), 20);
    assert_eq!(got[3], vec![3u8; 10]);
}

#[test]
fn reliable_survives_drops_and_refreshes() {
    let mut c = line(&["a", "b"], 0.3, 2);
    let (a, b) = (c.node("a").unwrap(), c.node("b").unwrap());
    let mut cfg = CircuitConfig::new(CircuitKind::SecureReliableDatagram);
    cfg.key_refresh_datagrams = Some(10);
    let h = c.open_circuit(&a, &b, cfg).unwrap();
    for i in 0..40u32 {
        c.submit_reliable(&h, &i.to_le_bytes()).unwrap();
    }
    assert!(c.run_until_idle(100_000).unwrap());
    let mut got: Vec<u32> = c
        .recv_all(&h.reversed())
        .unwrap()
        .iter()
        .map(|p| u32::from_le_bytes(p[..].try_into().unwrap()))
        .collect();
    got.sort();
    assert_eq!(got, (0..40).collect::<Vec<_>>());
    assert!(c.circuit_info(&h).unwrap().epoch >= 4);
}

#[test]
fn bytestream_round_trip() {
    let mut c = line(&["a", "b"], 0.2, 3);
    let (a, b) = (c.node("a").unwrap(), c.node("b").unwrap());
    let h = c.open_circuit(&a, &b, CircuitConfig::new(CircuitKind::SecureReliableBytestream)).unwrap();
    let data: Vec<u8> = (0..50_000u32).map(|i| (i * 13) as u8).collect();
    c.stream_write(&h, &data).unwrap();
    c.stream_close(&h).unwrap();
    c.stream_drain(&h).unwrap();
    c.run_ticks(10).unwrap();
    let back = h.reversed();
    let got = c.stream_read(&back, usize::MAX).unwrap();
    assert_eq!(got, data);
    assert!(c.stream_finished(&back).unwrap());
}

#[test]
fn sync_draws_agree_and_desync_is_detected() {
    let mut c = line(&["a", "b"], 0.0, 4);
    let (a, b) = (c.node("a").unwrap(), c.node("b").unwrap());
    let h = c.open_circuit(&a, &b, CircuitConfig::new(CircuitKind::SynchronizedRandom)).unwrap();
    let hb = h.reversed();
    for i in 0..200 {
        let n = 1 + (i % 64);
        let x = c.sync_random(&h, n).unwrap();
        let y = c.sync_random(&hb, n).unwrap();
        assert_eq!(x, y);
        c.pump().unwrap();
    }
    let mut err = None;
    for i in 0..40 {
        let x = c.sync_random(&h, 8);
        let y = c.sync_random(&hb, 16);
        c.run_ticks(3).unwrap();
        if let Err(e) = x.and(y) {
            err = Some((i, e));
            break;
        }
    }
    let (i, e) = err.expect("desync detected");
    assert!(matches!(e, Error::Desync(_)), "{e}");
    assert!(i <= 17, "detected after {i} calls");
    assert_eq!(c.circuit_info(&h).unwrap().state, CircuitState::Desynced);
}

#[test]
fn paths_of_each_kind() {
    for hops in 1..=3usize {
        let names = ["n0", "n1", "n2", "n3"];
        let mut c = line(&names[..=hops], 0.1, 10 + hops as u64);
        let nodes: Vec<_> = names[..=hops].iter().map(|n| c.node(n).unwrap()).collect();
        let spec = PathSpec::new(nodes);
        for kind in CircuitKind::ALL {
            let p = c.establish_path(&spec, CircuitConfig::new(kind)).unwrap();
            match kind {
                CircuitKind::SecureLossyDatagram => {
                    c.send_lossy(&p.a, b"hello").unwrap();
                    c.run_ticks(40).unwrap();
                    // may be lost; if it arrives it is intact
                    for m in c.recv_all(&p.b).unwrap() {
                        assert_eq!(m, b"hello");
                    }
                }
                CircuitKind::SecureReliableDatagram => {
                    c.send_reliable(&p.a, b"ping").unwrap();
                    assert_eq!(c.recv(&p.b).unwrap().unwrap(), b"ping");
                    c.send_reliable(&p.b, b"pong").unwrap();
                    assert_eq!(c.recv(&p.a).unwrap().unwrap(), b"pong");
                }
                CircuitKind::SecureReliableBytestream => {
                    let data = vec![7u8; 5000];
                    c.stream_write(&p.a, &data).unwrap();
                    c.stream_close(&p.a).unwrap();
                    c.stream_drain(&p.a).unwrap();
                    assert_eq!(c.stream_read(&p.b, usize::MAX).unwrap(), data);
                    assert!(c.stream_finished(&p.b).unwrap());
                }
                CircuitKind::SynchronizedRandom => {
                    for n in [5, 64, 17, 1] {
                        let x = c.sync_random(&p.a, n).unwrap();
                        let y = c.sync_random(&p.b, n).unwrap();
                        assert_eq!(x, y);
                    }
                }
            }
        }
        if hops >= 2 {
            assert!(c.relay_log().iter().any(|r| r.plaintext == b"ping"));
        } else {
            assert!(c.relay_log().is_empty());
        }
    }
}
