//! Worked two-hop rollouts under a word-level fixture vocabulary.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use sdlab::env::Question;
use sdlab::format::{parse_trajectory, serialize_trajectory, SpanKind, Trajectory};
use sdlab::grpo::RolloutGroup;
use sdlab::hindsight::{assemble_teacher_context, build_block, HindsightConfig, HindsightFlags};
use sdlab::scoring::Outcome;
use sdlab::vocab::Vocab;

#[derive(Deserialize)]
struct CaseStudy {
    question: String,
    gold_answer: String,
    rho: f64,
    focal: usize,
    insert_before_search: usize,
    rollouts: Vec<String>,
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn load() -> (Vocab, CaseStudy, RolloutGroup) {
    let vocab = Vocab::load(fixture("case_study_vocab.json")).unwrap();
    let case: CaseStudy = serde_json::from_str(&std::fs::read_to_string(fixture("case_study.json")).unwrap()).unwrap();
    let question = Question {
        id: 0,
        hops: 2,
        prompt_tokens: vocab.encode(&case.question).unwrap(),
        gold_answer: vocab.encode(&case.gold_answer).unwrap(),
        gold_path: vec![],
    };
    let trajs: Vec<Trajectory> = case
        .rollouts
        .iter()
        .map(|r| parse_trajectory(&vocab.encode(r).unwrap(), &vocab).with_question(question.prompt_tokens.clone()))
        .collect();
    let group = RolloutGroup::new(&vocab, question, trajs).unwrap();
    (vocab, case, group)
}

fn cfg(case: &CaseStudy, flags: HindsightFlags) -> HindsightConfig {
    HindsightConfig {
        rho: case.rho,
        budget: 1024,
        flags,
    }
}

fn focal_insertion(case: &CaseStudy, t: &Trajectory) -> usize {
    t.search_spans().nth(case.insert_before_search).unwrap().open_index()
}

#[test]
fn focal_rollout_parses_and_round_trips() {
    let (vocab, case, group) = load();
    let t = &group.trajectories[case.focal];
    assert!(!t.malformed);
    let kinds: Vec<SpanKind> = t.spans.iter().map(|s| s.kind).collect();
    assert_eq!(
        kinds,
        [
            SpanKind::Think,
            SpanKind::Search,
            SpanKind::Documents,
            SpanKind::Search,
            SpanKind::Documents,
            SpanKind::Answer
        ]
    );
    assert_eq!(t.num_searches(), 2);
    assert_eq!(vocab.decode(&t.answer_text), "21 January 1426");
    assert_eq!(serialize_trajectory(t, &vocab).unwrap(), t.body_tokens);
    assert_eq!(vocab.decode(&t.body_tokens), case.rollouts[case.focal]);
    let queries: Vec<String> = t
        .search_spans()
        .map(|s| vocab.decode(&t.body_tokens[s.start..s.end]))
        .collect();
    assert_eq!(
        queries,
        [
            "Alexander of Masovia father",
            "Siemowit IV Duke of Masovia date of death"
        ]
    );
}

#[test]
fn outcomes_follow_strict_matching() {
    let (_, case, group) = load();
    let labels: Vec<Outcome> = group
        .rewards
        .iter()
        .map(|&r| sdlab::scoring::outcome_label(r, case.rho))
        .collect();
    use Outcome::*;
    assert_eq!(labels, [Correct, Correct, Incorrect, Incorrect, Correct]);
    // Partial overlap counts under the default threshold of zero.
    assert_eq!(sdlab::scoring::outcome_label(group.rewards[3], 0.0), Correct);
}

#[test]
fn block_matches_golden_layout() {
    let (vocab, case, group) = load();
    let t = &group.trajectories[case.focal];
    let ins = focal_insertion(&case, t);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = build_block(
        &group,
        case.focal,
        &cfg(&case, HindsightFlags::default()),
        ins,
        &vocab.markers(),
        &mut rng,
    )
    .unwrap();
    let golden = std::fs::read_to_string(fixture("case_study_block.txt")).unwrap();
    assert_eq!(block.to_text(&vocab), golden);
}

#[test]
fn block_never_shows_documents_or_answers() {
    let (vocab, case, group) = load();
    let t = &group.trajectories[case.focal];
    let ins = focal_insertion(&case, t);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = build_block(
        &group,
        case.focal,
        &cfg(&case, HindsightFlags::default()),
        ins,
        &vocab.markers(),
        &mut rng,
    )
    .unwrap();
    let text = vocab.decode(&block.rendered);
    for leaked in [
        "1444)",
        "[Doc",
        "1381",
        "identify",
        "<answer>",
        "<documents>",
        "<think>",
    ] {
        assert!(!text.split(' ').any(|w| w == leaked), "{leaked} leaked into the block");
    }
}

#[test]
fn duplicate_sibling_collapses() {
    let (vocab, case, group) = load();
    let mut trajs = group.trajectories.clone();
    trajs.push(trajs[2].clone());
    let bigger = RolloutGroup::new(&vocab, group.question.clone(), trajs).unwrap();
    let ins = focal_insertion(&case, &bigger.trajectories[case.focal]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = build_block(
        &bigger,
        case.focal,
        &cfg(&case, HindsightFlags::default()),
        ins,
        &vocab.markers(),
        &mut rng,
    )
    .unwrap();
    assert_eq!(block.entries.len(), 4);
    let golden = std::fs::read_to_string(fixture("case_study_block.txt")).unwrap();
    assert_eq!(block.to_text(&vocab), golden);
}

#[test]
fn teacher_context_splits_around_the_supervised_search() {
    let (vocab, case, group) = load();
    let t = &group.trajectories[case.focal];
    let ins = focal_insertion(&case, t);
    let supervised: Vec<usize> = t.query_positions.iter().copied().filter(|&p| p > ins).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = build_block(
        &group,
        case.focal,
        &cfg(&case, HindsightFlags::default()),
        ins,
        &vocab.markers(),
        &mut rng,
    )
    .unwrap();
    let ctx = assemble_teacher_context(&t.question_tokens, &t.body_tokens, &block.rendered, ins, &supervised).unwrap();
    let q = t.question_tokens.len();
    assert_eq!(ctx.tokens[..q + ins], t.full_tokens()[..q + ins]);
    assert_eq!(ctx.tokens[q + ins..q + ins + block.len()], block.rendered[..]);
    let tail: Vec<_> = ctx
        .teacher_positions(&supervised)
        .iter()
        .map(|&i| ctx.tokens[i])
        .collect();
    assert_eq!(vocab.decode(&tail), "Siemowit IV Duke of Masovia date of death");
}
