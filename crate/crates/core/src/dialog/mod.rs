//! The ask-or-ground dialog loop.
//!
//! Every model input is the fixed header `<image>clarify ` followed by the
//! user request and the turns so far, each rendered as
//! ` assistant: <question> user: <answer>`. Training pairs, inference and
//! guesser evaluation all go through [`history_text`], so the strings they
//! see are identical.

mod corpus;
mod loss;
mod ports;

pub use corpus::{read_corpus, write_corpus, DialogRecord};
pub use loss::{masked_ce, masked_ce_grad};
pub use ports::{
    AmbiguityHook, GeneratorPort, LineOracle, ReplySource, ScriptedGenerator, ScriptedOracle, ToyGenerator,
};

use thiserror::Error;

use crate::loc::{decode_box, encode_box, parse_loc_sequence, BoxNorm, LocError, LocQuad};
use crate::metrics::iou;

pub const PREFIX_HEADER: &str = "<image>clarify ";
pub const ASSISTANT_TAG: &str = "assistant:";
pub const USER_TAG: &str = "user:";
pub const DEFAULT_K_MAX: usize = 10;
/// Guesser hit threshold on IoU.
pub const IOU_HIT: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum DialogError {
    #[error("dialog already grounded")]
    Terminal,
    #[error("no grounding after {k_max} generations")]
    TurnLimitExceeded { k_max: usize },
    #[error("k_max must be at least 1")]
    InvalidTurnLimit,
    #[error("generation is empty after cleaning: {0:?}")]
    MalformedGeneration(String),
    #[error("reply source has no reply left")]
    OracleExhausted,
    #[error("question parses as a location sequence: {0:?}")]
    QuestionIsGrounding(String),
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("no evaluation pairs")]
    NoPairs,
    #[error("suffix is empty")]
    EmptySuffix,
    #[error("loss input shape: {0}")]
    Shape(String),
    #[error("target id {id} outside vocabulary of {vocab_size}")]
    TargetOutOfVocab { id: u32, vocab_size: usize },
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error(transparent)]
    Loc(#[from] LocError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

impl Turn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

/// Append-only dialog history. Grounding freezes it.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogState {
    user_request: String,
    turns: Vec<Turn>,
    terminal_box: Option<BoxNorm>,
}

impl DialogState {
    pub fn new(user_request: impl Into<String>) -> Self {
        Self {
            user_request: user_request.into(),
            turns: Vec::new(),
            terminal_box: None,
        }
    }

    pub fn user_request(&self) -> &str {
        &self.user_request
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn terminal_box(&self) -> Option<BoxNorm> {
        self.terminal_box
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal_box.is_some()
    }

    pub fn push_turn(&mut self, turn: Turn) -> Result<(), DialogError> {
        if self.is_terminal() {
            return Err(DialogError::Terminal);
        }
        self.turns.push(turn);
        Ok(())
    }

    pub fn ground(&mut self, b: BoxNorm) -> Result<(), DialogError> {
        if self.is_terminal() {
            return Err(DialogError::Terminal);
        }
        self.terminal_box = Some(b);
        Ok(())
    }
}

/// `U` followed by ` assistant: R user: H` for every turn; no header.
pub fn history_text(user_request: &str, turns: &[Turn]) -> String {
    let mut s = user_request.to_string();
    for t in turns {
        s.push_str(&format!(" {ASSISTANT_TAG} {} {USER_TAG} {}", t.question, t.answer));
    }
    s
}

/// Full model input for the next generation step.
pub fn build_prefix(s: &DialogState) -> Result<String, DialogError> {
    if s.is_terminal() {
        return Err(DialogError::Terminal);
    }
    Ok(format!("{PREFIX_HEADER}{}", history_text(&s.user_request, &s.turns)))
}

/// A prefix→target training example. `prefix` excludes the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisedPair {
    pub prefix: String,
    pub target: String,
    pub is_grounding: bool,
}

impl SupervisedPair {
    /// The prefix as the model sees it.
    pub fn model_input(&self) -> String {
        format!("{PREFIX_HEADER}{}", self.prefix)
    }
}

/// K turns become K question pairs, each conditioned on the turns before it,
/// followed by one grounding pair conditioned on the whole dialog.
pub fn linearize_dialog(
    user_request: &str,
    turns: &[Turn],
    gold: &BoxNorm,
) -> Result<Vec<SupervisedPair>, DialogError> {
    let mut pairs = Vec::with_capacity(turns.len() + 1);
    for (k, turn) in turns.iter().enumerate() {
        let target = clean_question(&turn.question);
        if target.is_empty() {
            return Err(DialogError::MalformedGeneration(turn.question.clone()));
        }
        if parse_loc_sequence(&target).is_some() {
            return Err(DialogError::QuestionIsGrounding(target));
        }
        pairs.push(SupervisedPair {
            prefix: history_text(user_request, &turns[..k]),
            target: turn.question.clone(),
            is_grounding: false,
        });
    }
    pairs.push(SupervisedPair {
        prefix: history_text(user_request, turns),
        target: encode_box(gold)?,
        is_grounding: true,
    });
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelOutput {
    Question(String),
    Grounding(LocQuad),
}

fn clean_question(text: &str) -> String {
    text.replace(ASSISTANT_TAG, " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// A generation containing a valid location sequence is a grounding;
/// anything else is a question, cleaned of echoed `assistant:` headers and
/// redundant whitespace.
pub fn classify_output(generated: &str) -> Result<ModelOutput, DialogError> {
    if let Some(q) = parse_loc_sequence(generated) {
        return Ok(ModelOutput::Grounding(q));
    }
    let question = clean_question(generated);
    if question.is_empty() {
        return Err(DialogError::MalformedGeneration(generated.to_string()));
    }
    Ok(ModelOutput::Question(question))
}

/// Result of a finished dialog, with any ambiguity scores the hook produced
/// before each generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogOutcome {
    pub state: DialogState,
    pub grounding: BoxNorm,
    pub ambiguity_scores: Vec<f64>,
}

pub fn run_dialog(
    generator: &mut dyn GeneratorPort,
    oracle: &mut dyn ReplySource,
    user_request: &str,
    k_max: usize,
) -> Result<(DialogState, BoxNorm), DialogError> {
    run_dialog_with_hook(generator, oracle, user_request, k_max, None).map(|o| (o.state, o.grounding))
}

/// Generates up to `k_max` times. Questions are answered by `oracle` and
/// appended; the first grounding ends the dialog. The hook, when given, is
/// consulted on each prefix and its scores are recorded; it never changes
/// control flow.
pub fn run_dialog_with_hook(
    generator: &mut dyn GeneratorPort,
    oracle: &mut dyn ReplySource,
    user_request: &str,
    k_max: usize,
    mut hook: Option<&mut dyn AmbiguityHook>,
) -> Result<DialogOutcome, DialogError> {
    if k_max == 0 {
        return Err(DialogError::InvalidTurnLimit);
    }
    let mut state = DialogState::new(user_request);
    let mut scores = Vec::new();
    for _ in 0..k_max {
        let prefix = build_prefix(&state)?;
        if let Some(h) = hook.as_deref_mut() {
            if let Some(p) = h.ambiguity(&prefix) {
                scores.push(p);
            }
        }
        match classify_output(&generator.generate(&prefix)?)? {
            ModelOutput::Grounding(q) => {
                let b = decode_box(q);
                state.ground(b)?;
                return Ok(DialogOutcome {
                    state,
                    grounding: b,
                    ambiguity_scores: scores,
                });
            }
            ModelOutput::Question(question) => {
                let answer = oracle.reply(&question)?;
                state.push_turn(Turn::new(question, answer))?;
            }
        }
    }
    Err(DialogError::TurnLimitExceeded { k_max })
}

/// Acc@0.5 of `generator` on `(history, gold)` pairs. Histories exclude the
/// header. Generations without a location sequence count as misses.
pub fn evaluate_guesser(pairs: &[(String, BoxNorm)], generator: &mut dyn GeneratorPort) -> Result<f64, DialogError> {
    if pairs.is_empty() {
        return Err(DialogError::NoPairs);
    }
    let mut hits = 0usize;
    for (history, gold) in pairs {
        let out = generator.generate(&format!("{PREFIX_HEADER}{history}"))?;
        if let Some(q) = parse_loc_sequence(&out) {
            if iou(&decode_box(q), gold) >= IOU_HIT {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apple() -> DialogState {
        DialogState::new("Pick up the apple")
    }

    #[test]
    fn prefix_examples() {
        let mut s = apple();
        assert_eq!(build_prefix(&s).unwrap(), "<image>clarify Pick up the apple");
        s.push_turn(Turn::new("Which apple?", "The red one")).unwrap();
        assert_eq!(
            build_prefix(&s).unwrap(),
            "<image>clarify Pick up the apple assistant: Which apple? user: The red one"
        );
    }

    #[test]
    fn grounding_freezes_state() {
        let mut s = apple();
        s.ground(BoxNorm::new(0.0, 0.0, 0.5, 0.5).unwrap()).unwrap();
        assert_eq!(s.push_turn(Turn::new("a", "b")), Err(DialogError::Terminal));
        assert_eq!(build_prefix(&s), Err(DialogError::Terminal));
        assert_eq!(
            s.ground(BoxNorm::new(0.0, 0.0, 1.0, 1.0).unwrap()),
            Err(DialogError::Terminal)
        );
    }

    #[test]
    fn linearize_counts() {
        let gold = BoxNorm::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let zero = linearize_dialog("Get the cup", &[], &gold).unwrap();
        assert_eq!(zero.len(), 1);
        assert!(zero[0].is_grounding);
        assert_eq!(zero[0].prefix, "Get the cup");

        let turns = [Turn::new("Which cup?", "Left"), Turn::new("The blue one?", "Yes")];
        let pairs = linearize_dialog("Get the cup", &turns, &gold).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[1].prefix, "Get the cup assistant: Which cup? user: Left");
        assert_eq!(pairs[1].target, "The blue one?");
        assert_eq!(pairs[2].target, encode_box(&gold).unwrap());
        assert_eq!(pairs[2].model_input(), format!("<image>clarify {}", pairs[2].prefix));
    }

    #[test]
    fn linearize_rejects_loc_questions() {
        let gold = BoxNorm::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let turns = [Turn::new("<loc0001><loc0002><loc0003><loc0004>", "?")];
        assert!(matches!(
            linearize_dialog("x", &turns, &gold),
            Err(DialogError::QuestionIsGrounding(_))
        ));
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify_output("<loc0010><loc0020><loc0500><loc0600>").unwrap(),
            ModelOutput::Grounding(LocQuad::new([10, 20, 500, 600]).unwrap())
        );
        assert_eq!(
            classify_output("assistant: which   one is it? ").unwrap(),
            ModelOutput::Question("which one is it?".into())
        );
        assert!(matches!(classify_output(""), Err(DialogError::MalformedGeneration(_))));
        assert!(matches!(
            classify_output("  assistant: "),
            Err(DialogError::MalformedGeneration(_))
        ));
    }

    #[test]
    fn fast_path_grounds_in_one_step() {
        let gold = BoxNorm::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let tokens = encode_box(&gold).unwrap();
        let mut calls = 0;
        let mut gen = |_: &str| {
            calls += 1;
            tokens.clone()
        };
        let (state, b) = run_dialog(&mut gen, &mut ScriptedOracle::new(Vec::<String>::new()), "Get it", 10).unwrap();
        assert!(state.turns().is_empty());
        assert!((b.y_min - gold.y_min).abs() < 1.0 / 1024.0);
        assert_eq!(calls, 1);
    }

    #[test]
    fn two_questions_then_ground() {
        let mut gen = ScriptedGenerator::new(["Which one?", "The left?", "<loc0000><loc0000><loc0512><loc0512>"]);
        let mut oracle = ScriptedOracle::new(["The red", "Yes"]);
        let (state, _) = run_dialog(&mut gen, &mut oracle, "Get the apple", 10).unwrap();
        assert_eq!(state.turns().len(), 2);
        assert!(state.is_terminal());
    }

    #[test]
    fn always_asking_hits_the_limit() {
        let mut generations = 0;
        let mut gen = |_: &str| {
            generations += 1;
            "Which one?".to_string()
        };
        let mut oracle = ScriptedOracle::repeating("the left one");
        assert_eq!(
            run_dialog(&mut gen, &mut oracle, "Get it", DEFAULT_K_MAX),
            Err(DialogError::TurnLimitExceeded { k_max: 10 })
        );
        assert_eq!(
            run_dialog(&mut gen, &mut oracle, "Get it", 0),
            Err(DialogError::InvalidTurnLimit)
        );
        assert_eq!(generations, 10);
    }

    #[test]
    fn oracle_exhaustion_propagates() {
        let mut gen = ScriptedGenerator::new(["Which?", "Which?"]);
        let mut oracle = ScriptedOracle::new(["left"]);
        assert_eq!(
            run_dialog(&mut gen, &mut oracle, "Get it", 5),
            Err(DialogError::OracleExhausted)
        );
    }

    #[test]
    fn hook_scores_are_recorded() {
        let mut gen = ScriptedGenerator::new(["Which?", "<loc0000><loc0000><loc0100><loc0100>"]);
        let mut oracle = ScriptedOracle::new(["left"]);
        let mut hook = |p: &str| Some(p.len() as f64);
        let out = run_dialog_with_hook(&mut gen, &mut oracle, "Get it", 5, Some(&mut hook)).unwrap();
        assert_eq!(out.ambiguity_scores.len(), 2);
        assert!(out.ambiguity_scores[1] > out.ambiguity_scores[0]);
    }

    #[test]
    fn guesser_extremes() {
        let gold = BoxNorm::new(0.1, 0.1, 0.6, 0.6).unwrap();
        let pairs = vec![("Get the cup".to_string(), gold); 3];
        let tokens = encode_box(&gold).unwrap();
        assert_eq!(evaluate_guesser(&pairs, &mut |_: &str| tokens.clone()).unwrap(), 1.0);
        assert_eq!(
            evaluate_guesser(&pairs, &mut |_: &str| "Which?".to_string()).unwrap(),
            0.0
        );
        assert_eq!(
            evaluate_guesser(&[], &mut |_: &str| String::new()),
            Err(DialogError::NoPairs)
        );
    }
}
