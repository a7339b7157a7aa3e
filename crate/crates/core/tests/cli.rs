use std::fs;

use qoverlay::cli::run;

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["qoverlay"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

#[test]
fn syncrand_sequences_match() {
    let (code, out) = cli(&["syncrand", "--draws", "20", "--bits", "48"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("sequences identical: true"), "{out}");
}

#[test]
fn circuit_kinds_round_trip_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("payload.bin");
    let data: Vec<u8> = (0..20_000u32).map(|i| (i * 31 % 251) as u8).collect();
    fs::write(&input, &data).unwrap();
    for kind in ["reliable", "bytestream"] {
        let (code, out) = cli(&["circuit", "--kind", kind, "--input", input.to_str().unwrap()]);
        assert_eq!(code, 0, "{kind}: {out}");
        assert!(out.contains("hash match"), "{kind}: {out}");
    }
    let (code, out) = cli(&["circuit", "--kind", "lossy", "--input", input.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("hash"), "{out}");
}

#[test]
fn records_and_event_log_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.txt");
    let events = dir.path().join("events.log");
    let (code, out) = cli(&[
        "--records",
        records.to_str().unwrap(),
        "--event-log",
        events.to_str().unwrap(),
        "qkd",
        "--trials",
        "3",
    ]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(fs::read_to_string(&records).unwrap().lines().count(), 3);
    assert!(!fs::read_to_string(&events).unwrap().is_empty());
}

#[test]
fn same_seed_same_output_with_and_without_parallel_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let log = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (a_log, b_log) = (log("a.log"), log("b.log"));
    let (ca, a) = cli(&["--seed", "7", "--event-log", &a_log, "syncrand", "--draws", "30"]);
    let (cb, b) = cli(&["--seed", "7", "--event-log", &b_log, "--parallel-nodes", "syncrand", "--draws", "30"]);
    assert_eq!((ca, cb), (0, 0));
    assert_eq!(a, b);
    assert_eq!(fs::read(&a_log).unwrap(), fs::read(&b_log).unwrap());
}

#[test]
fn montecarlo_and_search_run() {
    let (code, out) = cli(&["montecarlo", "--samples", "40000"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("4 x estimate"), "{out}");
    let (code, out) = cli(&["search", "--items", "1000", "--target", "999"]);
    assert_eq!(code, 0, "{out}");
}

#[test]
fn exit_codes() {
    let (code, _) = cli(&["syncrand", "--path", "nowhere"]);
    assert_eq!(code, 1);
    let (code, _) = cli(&["--topology", "/nonexistent/topology.ini", "qkd"]);
    assert_eq!(code, 1);
    let (code, _) = cli(&["frobnicate"]);
    assert_eq!(code, 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "[node]\nname = a\n[link]\na = a\nb = ghost\n").unwrap();
    let (code, out) = cli(&["--topology", bad.to_str().unwrap(), "qkd"]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("line"), "{out}");

    // a link too noisy to ever distil key cannot carry a circuit
    let noisy = dir.path().join("noisy.ini");
    fs::write(
        &noisy,
        "[node]\nname = a\n[node]\nname = b\n[link]\na = a\nb = b\nflip_probability = 0.3\n",
    )
    .unwrap();
    let (code, out) = cli(&["--topology", noisy.to_str().unwrap(), "syncrand", "--link", "a,b"]);
    assert_eq!(code, 2, "{out}");
}
