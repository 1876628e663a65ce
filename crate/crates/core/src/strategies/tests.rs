use super::*;
use crate::chat::ImageRef;

fn img(n: u8) -> ImageRef {
    ImageRef {
        uri: format!("img{n}.png"),
        media_type: "image/png".into(),
        sha256: format!("{n:02x}").repeat(32),
    }
}

fn factify_prompt() -> TaskPrompt {
    TaskPrompt {
        images: vec![img(1), img(2)],
        candidates: vec![],
        question: "Does the second image support the content of the first image?".into(),
        choices: Some(ChoiceSet::letters(&["support", "refute"]).unwrap()),
        requires_choices: true,
    }
}

fn stub<'a>(outputs: &'a [&'a str]) -> impl FnMut(&Stage, &[ChatMessage]) -> Result<String, ()> + 'a {
    let mut i = 0;
    move |_, _| {
        i += 1;
        Ok(outputs[i - 1].to_string())
    }
}

#[test]
fn stage_count_table() {
    let expect = |id, mode, n| assert_eq!(Strategy::builtin(id, mode).stages.len(), n, "{id} {mode:?}");
    expect(StrategyId::Standard, CocotMode::SingleCall, 1);
    expect(StrategyId::Ddcot, CocotMode::SingleCall, 3);
    expect(StrategyId::Ccot, CocotMode::SingleCall, 2);
    for c in [StrategyId::Cocot, StrategyId::CocotSim, StrategyId::CocotDiff] {
        expect(c, CocotMode::SingleCall, 1);
        expect(c, CocotMode::TwoStage, 2);
    }
}

#[test]
fn cocot_single_call_on_a_pair() {
    let s = Strategy::builtin(StrategyId::Cocot, CocotMode::SingleCall);
    let chain = build_chain(&s, &factify_prompt(), stub(&["(A)"])).unwrap();
    assert_eq!(chain.len(), 1);
    let msgs = &chain[0].messages;
    assert_eq!(msgs.len(), 1);
    let parts = &msgs[0].parts;
    assert_eq!(parts.len(), 3);
    assert_eq!(parts[0].as_image(), Some(&img(1)));
    assert_eq!(parts[1].as_image(), Some(&img(2)));
    assert_eq!(
        parts[2].as_text().unwrap(),
        "First, describe the similarities and differences between the input images. \
         Then, using those similarities and differences, answer the following question: \
         Does the second image support the content of the first image? Options:\n(A) support\n(B) refute\n\
         Answer with the label of the correct option."
    );
}

#[test]
fn standard_template_is_bare() {
    let s = Strategy::builtin(StrategyId::Standard, CocotMode::SingleCall);
    assert_eq!(s.stages[0].template, "{QUESTION} {CHOICES}");
}

#[test]
fn ddcot_threads_subquestions_verbatim() {
    let s = Strategy::builtin(StrategyId::Ddcot, CocotMode::SingleCall);
    let stage1 = "1. What is the boy doing?\n2. Is the ball a basketball?";
    let prompt = TaskPrompt {
        images: vec![img(1)],
        candidates: vec![],
        question: "Which caption matches the image?".into(),
        choices: Some(ChoiceSet::letters(&["a boy throws a ball", "a ball throws a boy"]).unwrap()),
        requires_choices: true,
    };
    let chain = build_chain(&s, &prompt, stub(&[stage1, "1. Throwing.\n2. Yes.", "(A)"])).unwrap();
    assert_eq!(chain.len(), 3);
    // stage 1 is text only
    assert_eq!(chain[0].messages[0].images().count(), 0);
    assert!(chain[1].messages[0].text().contains(stage1));
    assert_eq!(chain[1].messages[0].images().count(), 1);
    let last = chain[2].messages[0].text();
    assert!(last.contains(stage1) && last.contains("1. Throwing.\n2. Yes."));
}

#[test]
fn ddcot_empty_decomposition_fails() {
    let s = Strategy::builtin(StrategyId::Ddcot, CocotMode::SingleCall);
    let err = build_chain(&s, &factify_prompt(), stub(&["   ", "", ""])).unwrap_err();
    assert!(matches!(err, ChainError::Strategy(StrategyError::UnusableStageOutput { .. })));
}

#[test]
fn ccot_requests_one_graph_per_image() {
    let s = Strategy::builtin(StrategyId::Ccot, CocotMode::SingleCall);
    let two = s.render_stage(0, &factify_prompt(), StageInputs::default()).unwrap();
    let t = two[0].text();
    assert!(t.contains("Return exactly 2 scene graphs") && t.contains("\"Image 1\", \"Image 2\""));
    let mut one = factify_prompt();
    one.images.truncate(1);
    let t = s.render_stage(0, &one, StageInputs::default()).unwrap()[0].text();
    assert!(t.contains("Return exactly 1 scene graph ") && !t.contains("Image 2"));
}

#[test]
fn prior_output_in_first_stage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("standard.1.txt"), "{PRIOR_OUTPUT} {QUESTION}").unwrap();
    let set = TemplateSet::with_overrides(dir.path()).unwrap();
    let err = Strategy::load(StrategyId::Standard, CocotMode::SingleCall, &set).unwrap_err();
    assert!(matches!(err, StrategyError::UnboundPlaceholder { stage: 1, .. }));
}

#[test]
fn unknown_placeholder_in_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cocot.1.txt"), "{QUESTION} {IMAGES}").unwrap();
    let set = TemplateSet::with_overrides(dir.path()).unwrap();
    let err = Strategy::load(StrategyId::Cocot, CocotMode::SingleCall, &set).unwrap_err();
    assert!(matches!(err, StrategyError::UnknownPlaceholder { .. }));
}

#[test]
fn missing_choices() {
    let mut p = factify_prompt();
    p.choices = None;
    let s = Strategy::builtin(StrategyId::Standard, CocotMode::SingleCall);
    assert_eq!(s.render_stage(0, &p, StageInputs::default()), Err(StrategyError::MissingChoices));
}

#[test]
fn per_candidate_stage_attaches_one_candidate() {
    let prompt = TaskPrompt {
        images: vec![img(1), img(2), img(3)],
        candidates: (10..16).map(img).collect(),
        question: "Does this candidate complete the pattern? Answer Yes or No.".into(),
        choices: None,
        requires_choices: false,
    };
    let s = Strategy::builtin(StrategyId::Standard, CocotMode::SingleCall).for_candidate_scoring();
    assert_eq!(s.render_stage(0, &prompt, StageInputs::default()), Err(StrategyError::MissingCandidate));
    let m = s.render_stage(0, &prompt, StageInputs { candidate: Some(4), ..Default::default() }).unwrap();
    let imgs: Vec<_> = m[0].images().cloned().collect();
    assert_eq!(imgs, vec![img(1), img(2), img(3), img(14)]);
    assert!(m[0].text().starts_with("Images 1-3 are the puzzle context; image 4 is candidate 5 of 6."));
    assert!(m[0].text().ends_with("Answer Yes or No."));
}

#[test]
fn template_versions_differ_by_content() {
    let a = Strategy::builtin(StrategyId::Cocot, CocotMode::SingleCall);
    let b = Strategy::builtin(StrategyId::CocotSim, CocotMode::SingleCall);
    let c = Strategy::builtin(StrategyId::Cocot, CocotMode::TwoStage);
    assert_ne!(a.template_version, b.template_version);
    assert_ne!(a.template_version, c.template_version);
    assert_eq!(a.template_version, Strategy::builtin(StrategyId::Cocot, CocotMode::SingleCall).template_version);
    assert_eq!(c.key(), "cocot_two_stage");
}

#[test]
fn strategy_ids_parse() {
    assert_eq!("cocot_diff".parse::<StrategyId>().unwrap(), StrategyId::CocotDiff);
    assert!("cot".parse::<StrategyId>().is_err());
}
