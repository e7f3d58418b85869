mod common;

use common::checks::{self, toy};
use histo_icl::context::{
    assemble_prompt, build_bundle, build_feedback_context, build_guideline_context, render_feedback_request,
    render_guideline_request, ContextBundle, ContextSources, IclFlags, FEEDBACK_HEADER, GUIDELINE_HEADER,
    REFERENCE_HEADER,
};
use histo_icl::Error;
use std::collections::BTreeMap;

#[test]
fn golden_files() {
    checks::prompt_goldens().unwrap();
}

#[test]
fn payload_law() {
    checks::payload_law(128).unwrap();
}

#[test]
fn base_prompt_alone_without_flags() {
    let t = toy();
    let index = t.index(4);
    let sources = ContextSources {
        index: &index,
        train: &t.corpus,
        tokens: &t.tokens,
        guidelines: None,
        feedback: None,
    };
    let bundle = build_bundle(&t.query, None, IclFlags::BASE, 3, &sources).unwrap();
    let prompt = assemble_prompt(&t.query, &bundle).unwrap();
    assert_eq!(prompt.user_text, histo_icl::context::base_prompt());
    assert_eq!(prompt.image_payload.len(), 1);
    assert!(prompt.reference.is_none());

    let nn = IclFlags { nn: true, ..IclFlags::BASE };
    let prompt = assemble_prompt(&t.query, &build_bundle(&t.query, None, nn, 3, &sources).unwrap()).unwrap();
    assert_eq!(prompt.image_payload.len(), 2);
    assert_eq!(prompt.reference.as_deref(), Some(t.corpus.get("train-a").unwrap().report.as_str()));
    assert!(prompt.user_text.contains(REFERENCE_HEADER));
}

#[test]
fn guideline_follows_majority_of_neighbours() {
    let t = toy();
    let index = t.index(4);
    let g = build_guideline_context(&t.query, None, &index, &t.guidelines, 3).unwrap();
    assert_eq!(g.category, "TCGA-KIRC");
    let only_luad = BTreeMap::from([("TCGA-LUAD".to_string(), "x".to_string())]);
    assert!(matches!(
        build_guideline_context(&t.query, None, &index, &only_luad, 3),
        Err(Error::MissingGuideline(c)) if c == "TCGA-KIRC"
    ));
}

#[test]
fn feedback_is_capped_by_index_size() {
    let t = toy();
    let two = t.index(2);
    let items = build_feedback_context(&t.query, None, &two, &t.feedback, &t.tokens, 3).unwrap();
    assert_eq!(items.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["train-a", "train-b"]);
    let mut partial = t.feedback.clone();
    partial.remove("train-b");
    assert!(matches!(
        build_feedback_context(&t.query, None, &two, &partial, &t.tokens, 3),
        Err(Error::MissingFeedback(id)) if id == "train-b"
    ));
}

#[test]
fn missing_store_is_reported() {
    let t = toy();
    let index = t.index(4);
    let sources = ContextSources {
        index: &index,
        train: &t.corpus,
        tokens: &t.tokens,
        guidelines: None,
        feedback: None,
    };
    assert!(matches!(
        build_bundle(&t.query, None, IclFlags::ALL, 3, &sources),
        Err(Error::MissingStore(_))
    ));
}

#[test]
fn toggling_a_flag_changes_only_its_section() {
    let t = toy();
    let index = t.index(4);
    let sources = ContextSources {
        index: &index,
        train: &t.corpus,
        tokens: &t.tokens,
        guidelines: Some(&t.guidelines),
        feedback: Some(&t.feedback),
    };
    let text = |flags| assemble_prompt(&t.query, &build_bundle(&t.query, None, flags, 3, &sources).unwrap()).unwrap().user_text;
    let all = text(IclFlags::ALL);
    let no_guideline = text(IclFlags { guideline: false, ..IclFlags::ALL });
    let start = all.find(&format!("\n\n{GUIDELINE_HEADER}")).unwrap();
    let end = all.find(&format!("\n\n{FEEDBACK_HEADER} 1")).unwrap();
    assert_eq!(format!("{}{}", &all[..start], &all[end..]), no_guideline);
    let no_feedback = text(IclFlags { feedback: false, ..IclFlags::ALL });
    let f_end = all.find(&format!("\n\n{REFERENCE_HEADER}")).unwrap();
    assert_eq!(format!("{}{}", &all[..end], &all[f_end..]), no_feedback);
    assert_eq!(text(IclFlags::ALL), all);
}

#[test]
fn inconsistent_bundle_is_rejected() {
    let t = toy();
    let bundle = ContextBundle {
        flags: IclFlags { nn: true, ..IclFlags::BASE },
        ..Default::default()
    };
    assert!(matches!(assemble_prompt(&t.query, &bundle), Err(Error::InconsistentBundle(_))));
}

#[test]
fn request_templates() {
    let r = render_feedback_request("GT", "GEN").unwrap();
    assert!(r.contains("Ground Truth: GT") && r.contains("Generated Report: GEN"));
    assert!(matches!(render_feedback_request("GT", ""), Err(Error::EmptyInput)));

    let reports: Vec<String> = (1..=20).map(|i| format!("report {i}")).collect();
    let g = render_guideline_request(&reports).unwrap();
    assert!(g.contains("Report 1: report 1") && g.contains("Report 20: report 20"));
    assert!(g.contains("5 short guidelines"));
    let one = render_guideline_request(&reports[..1]).unwrap();
    assert_eq!(one.matches("Report ").count(), 1);
    let mut many = reports.clone();
    many.push("extra".into());
    assert!(matches!(render_guideline_request(&many), Err(Error::TooManyReports(21))));
    assert!(matches!(render_guideline_request::<String>(&[]), Err(Error::EmptyInput)));
}
