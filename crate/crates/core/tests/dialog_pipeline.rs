use clue_core::dialog::{
    evaluate_guesser, linearize_dialog, read_corpus, run_dialog, run_dialog_with_hook, write_corpus, DialogError,
    ScriptedGenerator, ScriptedOracle, PREFIX_HEADER,
};
use clue_core::loc::encode_box;
use clue_core::synth::gen_dialog_dataset;

#[test]
fn corpus_round_trip_and_gold_echo() {
    let records = gen_dialog_dataset(40, 5).unwrap();
    let mut buf = Vec::new();
    write_corpus(&records, &mut buf).unwrap();
    let back = read_corpus(&buf[..]).unwrap();
    assert_eq!(back, records);

    let mut pairs = Vec::new();
    let mut golds = Vec::new();
    for r in &records {
        let gold = r.gold().unwrap();
        let lin = linearize_dialog(&r.user_request, &r.turns(), &gold).unwrap();
        let last = lin.last().unwrap();
        pairs.push((last.prefix.clone(), gold));
        golds.push(last.target.clone());
    }
    let mut echo = ScriptedGenerator::new(golds);
    assert_eq!(evaluate_guesser(&pairs, &mut echo).unwrap(), 1.0);
    let mut silent = |_: &str| String::from("which one?");
    assert_eq!(evaluate_guesser(&pairs, &mut silent).unwrap(), 0.0);
}

#[test]
fn replaying_a_recorded_dialog_reproduces_it() {
    let records = gen_dialog_dataset(30, 8).unwrap();
    let r = records.iter().find(|r| !r.dialog.is_empty()).expect("some dialog asks");
    let gold = r.gold().unwrap();
    let mut script: Vec<String> = r.dialog.iter().map(|(q, _)| q.clone()).collect();
    script.push(encode_box(&gold).unwrap());
    let mut generator = ScriptedGenerator::new(script);
    let mut oracle = ScriptedOracle::new(r.dialog.iter().map(|(_, a)| a.clone()));
    let (state, grounded) = run_dialog(&mut generator, &mut oracle, &r.user_request, 10).unwrap();
    assert_eq!(state.turns(), r.turns().as_slice());
    assert!(state.is_terminal());
    for (x, y) in grounded.to_array().iter().zip(gold.to_array()) {
        assert!((x - y).abs() < 1.0 / 1024.0);
    }
}

#[test]
fn hook_sees_every_prefix_without_steering() {
    let mut seen = Vec::new();
    let mut hook = |prefix: &str| {
        seen.push(prefix.to_string());
        Some(0.9)
    };
    let mut generator = ScriptedGenerator::new(["Which cup?", "<loc0000><loc0000><loc0512><loc0512>"]);
    let mut oracle = ScriptedOracle::repeating("The blue one.");
    let out = run_dialog_with_hook(&mut generator, &mut oracle, "Get the cup", 3, Some(&mut hook)).unwrap();
    assert_eq!(out.ambiguity_scores, vec![0.9, 0.9]);
    assert_eq!(seen[0], format!("{PREFIX_HEADER}Get the cup"));
    assert_eq!(
        seen[1],
        format!("{PREFIX_HEADER}Get the cup assistant: Which cup? user: The blue one.")
    );
}

#[test]
fn asking_forever_stops_at_the_limit() {
    let mut calls = 0;
    let mut always_ask = |_: &str| {
        calls += 1;
        String::from("Which one?")
    };
    let mut oracle = ScriptedOracle::repeating("that one");
    let err = run_dialog(&mut always_ask, &mut oracle, "Get the mug", 4).unwrap_err();
    assert_eq!(err, DialogError::TurnLimitExceeded { k_max: 4 });
    assert_eq!(calls, 4);
}
