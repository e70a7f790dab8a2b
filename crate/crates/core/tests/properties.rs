use std::collections::BTreeSet;

use proptest::prelude::*;

use evoconfig_core::agent::context::{scrub, ELIDED};
use evoconfig_core::command::{parse_action, validate_tool_text, ActionSet, AtomicCommand, Origin};
use evoconfig_core::expert::Priority;
use evoconfig_core::sandbox::clip_tail;

fn command_text() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9 ._=-]{0,30}[a-z0-9]".prop_map(|s| s.trim().to_string())
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(
        cmds in prop::collection::vec(command_text(), 0..6),
        thought in "[A-Za-z][A-Za-z ,.]{0,40}",
    ) {
        let a = ActionSet {
            round: 3,
            commands: cmds.iter().map(|c| AtomicCommand::new(c, Origin::MainAgent).unwrap()).collect(),
            thought: thought.trim().to_string(),
        };
        prop_assert_eq!(parse_action(&a.render(), 3).unwrap(), a);
    }

    #[test]
    fn mutation_words_are_never_valid_tools(
        before in "[a-z ]{0,12}",
        word in prop::sample::select(vec!["rm", "install", "mv", "chmod", "touch", "uninstall", "tee", "mkdir"]),
        after in "[a-z ]{0,12}",
    ) {
        let text = format!("ls {before} {word} {after}");
        prop_assert!(validate_tool_text(&text).is_err(), "{}", text);
    }

    #[test]
    fn priority_stays_in_range(start in 0u16..=1000, deltas in prop::collection::vec(-400i32..400, 0..50)) {
        let mut p = Priority::from_milli(start).unwrap();
        for d in deltas {
            let q = p.shifted(d);
            prop_assert!(q.milli() <= 1000);
            prop_assert_eq!(q.milli() as i32, (p.milli() as i32 + d).clamp(0, 1000));
            p = q;
        }
    }

    #[test]
    fn clip_keeps_a_bounded_suffix(text in "\\PC{0,200}", cap in 0usize..120) {
        let (kept, truncated) = clip_tail(&text, cap);
        prop_assert!(kept.len() <= cap || !truncated);
        prop_assert!(text.ends_with(&kept));
        prop_assert_eq!(truncated, text.len() > cap);
    }

    #[test]
    fn scrubbed_text_holds_no_token(
        token in "[a-z0-9]{16,24}",
        pre in "[ -~]{0,20}",
        post in "[ -~]{0,20}",
    ) {
        let text = format!("{pre}{token}{post}{token}");
        let out = scrub(&text, &BTreeSet::from([token.clone()]));
        prop_assert!(!out.contains(&token));
        prop_assert!(out.contains(ELIDED));
    }
}
