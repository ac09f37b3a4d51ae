use std::collections::BTreeSet;

use flowmine::benchmark;
use flowmine::flow::{branches, parse_flow_file, FlowSet, Message};
use flowmine::tracegen::{generate_traces, generate_traces_logged, validate_interleaving, GenConfig, Trace};

fn m(s: &str) -> Message {
    s.parse().unwrap()
}

// Two flows sharing the message D: A B D E and W X D Y.
fn shared_pair() -> FlowSet {
    parse_flow_file(
        r#"{"flows":[
          {"name":"abde","messages":[
             {"id":0,"src":"P","dest":"Q","cmd":"a"},
             {"id":1,"src":"Q","dest":"R","cmd":"b"},
             {"id":2,"src":"R","dest":"S","cmd":"d"},
             {"id":3,"src":"S","dest":"T","cmd":"e"}],
           "edges":[[0,1],[1,2],[2,3]],"start":0,"ends":[3]},
          {"name":"wxdy","messages":[
             {"id":0,"src":"U","dest":"V","cmd":"w"},
             {"id":1,"src":"V","dest":"R","cmd":"x"},
             {"id":2,"src":"R","dest":"S","cmd":"d"},
             {"id":3,"src":"S","dest":"Z","cmd":"y"}],
           "edges":[[0,1],[1,2],[2,3]],"start":0,"ends":[3]}]}"#,
    )
    .unwrap()
}

#[test]
fn shared_message_interleaving_is_valid() {
    let fs = shared_pair();
    let t = Trace::from_messages(
        ["P:Q:a", "Q:R:b", "R:S:d", "U:V:w", "V:R:x", "R:S:d", "S:Z:y", "S:T:e"].map(m),
    );
    assert!(validate_interleaving(&t, &fs, 1));
    // the second D before X belongs to nobody
    let bad = Trace::from_messages(
        ["P:Q:a", "Q:R:b", "R:S:d", "U:V:w", "R:S:d", "V:R:x", "S:Z:y", "S:T:e"].map(m),
    );
    assert!(!validate_interleaving(&bad, &fs, 1));
}

#[test]
fn order_violation_is_rejected() {
    let fs = parse_flow_file(
        r#"{"flows":[{"name":"ab","messages":[
            {"id":0,"src":"a","dest":"b","cmd":"x"},{"id":1,"src":"b","dest":"c","cmd":"y"}],
            "edges":[[0,1]],"start":0,"ends":[1]}]}"#,
    )
    .unwrap();
    assert!(validate_interleaving(&Trace::from_messages([m("a:b:x"), m("b:c:y")]), &fs, 1));
    assert!(!validate_interleaving(&Trace::from_messages([m("b:c:y"), m("a:b:x")]), &fs, 1));
    assert!(!validate_interleaving(&Trace::from_messages([m("a:b:x")]), &fs, 1));
}

#[test]
fn zero_runs_is_empty() {
    let ts = generate_traces(&benchmark::flows(), &GenConfig { runs: 0, instances_per_flow: 1, seed: 3 }).unwrap();
    assert!(ts.traces.is_empty());
}

#[test]
fn lengths_match_logged_branch_choices() {
    let fs = benchmark::flows();
    let lens: Vec<Vec<usize>> = fs
        .flows
        .iter()
        .map(|f| branches(f).iter().map(|b| b.path.len()).collect())
        .collect();
    let cfg = GenConfig { runs: 600, instances_per_flow: 1, seed: 2022 };
    let (ts, log) = generate_traces_logged(&fs, &cfg).unwrap();
    assert_eq!(ts.traces.len(), 600);
    for (t, choices) in ts.traces.iter().zip(&log) {
        let want: usize = choices.iter().map(|c| lens[c.flow][c.branch]).sum();
        assert_eq!(t.len(), want);
        assert!(t.steps.iter().all(|s| s.len() == 1));
    }
}

#[test]
fn projections_follow_chosen_branches() {
    // benchmark flows share messages, but each flow's own-only messages must
    // appear in the order of the logged branch
    let fs = benchmark::flows();
    let (ts, log) = generate_traces_logged(&fs, &GenConfig { runs: 200, instances_per_flow: 1, seed: 5 }).unwrap();
    let own: Vec<BTreeSet<Message>> = fs
        .flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let other = &fs.flows[1 - i];
            f.messages
                .iter()
                .map(|(_, m)| m.clone())
                .filter(|m| !other.messages.iter().any(|(_, o)| o == m))
                .collect()
        })
        .collect();
    for (t, choices) in ts.traces.iter().zip(&log) {
        for c in choices {
            let f = &fs.flows[c.flow];
            let want: Vec<Message> = f
                .branch_messages(&branches(f)[c.branch])
                .into_iter()
                .filter(|m| own[c.flow].contains(m))
                .collect();
            let got: Vec<Message> = t.flatten().filter(|m| own[c.flow].contains(m)).cloned().collect();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let fs = benchmark::flows();
    let cfg = GenConfig { runs: 300, instances_per_flow: 2, seed: 99 };
    let a = generate_traces(&fs, &cfg).unwrap().render();
    let b = generate_traces(&fs, &cfg).unwrap().render();
    assert_eq!(a, b);
    let c = generate_traces(&fs, &GenConfig { seed: 100, ..cfg }).unwrap().render();
    assert_ne!(a, c);
}

#[test]
fn every_branch_is_covered() {
    let fs = benchmark::flows();
    let (_, log) = generate_traces_logged(&fs, &GenConfig { runs: 200, instances_per_flow: 1, seed: 11 }).unwrap();
    let seen: BTreeSet<(usize, usize)> = log.iter().flatten().map(|c| (c.flow, c.branch)).collect();
    let all: BTreeSet<(usize, usize)> = fs
        .flows
        .iter()
        .enumerate()
        .flat_map(|(i, f)| (0..branches(f).len()).map(move |b| (i, b)))
        .collect();
    assert_eq!(seen, all);
}

#[test]
fn generated_traces_validate_with_several_instances() {
    for (fs, k) in [(benchmark::flows(), 2), (shared_pair(), 3)] {
        let ts = generate_traces(&fs, &GenConfig { runs: 200, instances_per_flow: k, seed: 8 }).unwrap();
        for t in &ts.traces {
            assert!(validate_interleaving(t, &fs, k));
        }
    }
}

#[test]
fn trace_file_round_trip() {
    let ts = generate_traces(&benchmark::flows(), &GenConfig { runs: 50, instances_per_flow: 1, seed: 1 }).unwrap();
    let text = ts.render();
    assert_eq!(flowmine::tracegen::TraceSet::parse(&text).unwrap(), ts);
}
